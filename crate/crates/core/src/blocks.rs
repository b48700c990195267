//! Firm–product block detection by bipartite modularity maximization (BRIM),
//! and in-block / out-of-block diversification.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::HsMap;
use crate::matrix::{BinaryMatrix, ExportMatrix};

const MODULE: &str = "block-structure";

/// Label of nodes that belong to no block (isolated nodes, unmapped firms).
/// It never matches another label, residual included.
pub const RESIDUAL: u32 = u32::MAX;

/// Unweighted bipartite firm–product graph in both adjacency directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    firms: Vec<String>,
    products: Vec<String>,
    firm_ptr: Vec<usize>,
    firm_adj: Vec<u32>,
    product_ptr: Vec<usize>,
    product_adj: Vec<u32>,
    n_components: usize,
}

impl BipartiteGraph {
    pub fn from_binary(binary: &BinaryMatrix) -> Self {
        Self::from_parts(
            binary.rows().to_vec(),
            binary.cols().to_vec(),
            binary.indptr().to_vec(),
            binary.indices().to_vec(),
        )
    }

    /// Graph over `f0..`, `p0..` from an edge list; duplicates collapse.
    pub fn from_edges(n_firms: usize, n_products: usize, edges: &[(u32, u32)]) -> Result<Self> {
        if let Some(e) = edges
            .iter()
            .find(|e| e.0 as usize >= n_firms || e.1 as usize >= n_products)
        {
            return Err(Error::Validation(format!("edge ({}, {}) outside the graph", e.0, e.1)));
        }
        let mut rows = vec![Vec::new(); n_firms];
        for &(f, p) in edges {
            rows[f as usize].push(p);
        }
        let mut ptr = vec![0];
        let mut adj = Vec::with_capacity(edges.len());
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            adj.extend(row);
            ptr.push(adj.len());
        }
        Ok(Self::from_parts(
            (0..n_firms).map(|f| format!("f{f}")).collect(),
            (0..n_products).map(|p| format!("p{p}")).collect(),
            ptr,
            adj,
        ))
    }

    fn from_parts(firms: Vec<String>, products: Vec<String>, firm_ptr: Vec<usize>, firm_adj: Vec<u32>) -> Self {
        let mut product_ptr = vec![0usize; products.len() + 1];
        for &p in &firm_adj {
            product_ptr[p as usize + 1] += 1;
        }
        for i in 0..products.len() {
            product_ptr[i + 1] += product_ptr[i];
        }
        let mut fill = product_ptr.clone();
        let mut product_adj = vec![0u32; firm_adj.len()];
        for f in 0..firms.len() {
            for &p in &firm_adj[firm_ptr[f]..firm_ptr[f + 1]] {
                product_adj[fill[p as usize]] = f as u32;
                fill[p as usize] += 1;
            }
        }
        let mut graph = BipartiteGraph {
            firms,
            products,
            firm_ptr,
            firm_adj,
            product_ptr,
            product_adj,
            n_components: 0,
        };
        graph.n_components = graph.count_components();
        graph
    }

    /// Connected components among nodes with at least one edge.
    fn count_components(&self) -> usize {
        let nf = self.firms.len();
        let mut parent: Vec<usize> = (0..nf + self.products.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in 0..nf {
            for &p in self.firm_neighbors(f) {
                let (a, b) = (find(&mut parent, f), find(&mut parent, nf + p as usize));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let degree = |i: usize| {
            if i < nf {
                self.firm_degree(i)
            } else {
                self.product_degree(i - nf)
            }
        };
        (0..parent.len())
            .filter(|&i| degree(i) > 0 && find(&mut parent, i) == i)
            .count()
    }

    pub fn firms(&self) -> &[String] {
        &self.firms
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    /// Edge count m.
    pub fn n_edges(&self) -> usize {
        self.firm_adj.len()
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn firm_neighbors(&self, f: usize) -> &[u32] {
        &self.firm_adj[self.firm_ptr[f]..self.firm_ptr[f + 1]]
    }

    pub fn product_neighbors(&self, p: usize) -> &[u32] {
        &self.product_adj[self.product_ptr[p]..self.product_ptr[p + 1]]
    }

    pub fn firm_degree(&self, f: usize) -> usize {
        self.firm_ptr[f + 1] - self.firm_ptr[f]
    }

    pub fn product_degree(&self, p: usize) -> usize {
        self.product_ptr[p + 1] - self.product_ptr[p]
    }

    pub fn has_edge(&self, f: usize, p: usize) -> bool {
        self.firm_neighbors(f).binary_search(&(p as u32)).is_ok()
    }
}

/// Bipartite (Barber) modularity of a labeling:
/// `Q = (1/m) Σ_{f,p} (A_fp − k_f k_p / m) δ(c_f, c_p)`.
///
/// Evaluated as `(m·within − Σ_c R_c K_c) / m²` in integer arithmetic, where
/// `R_c` and `K_c` are the firm and product degree totals of label `c`.
pub fn bipartite_modularity(graph: &BipartiteGraph, firm_labels: &[u32], product_labels: &[u32]) -> Result<f64> {
    if firm_labels.len() != graph.n_firms() || product_labels.len() != graph.n_products() {
        return Err(Error::Validation(format!(
            "labels cover {} firms and {} products, graph has {} and {}",
            firm_labels.len(),
            product_labels.len(),
            graph.n_firms(),
            graph.n_products()
        )));
    }
    let m = graph.n_edges() as i128;
    if m == 0 {
        return Err(Error::compute(MODULE, "modularity of a graph without edges is undefined"));
    }
    let mut mass: HashMap<u32, (i128, i128)> = HashMap::new();
    let mut within: i128 = 0;
    for (f, &lf) in firm_labels.iter().enumerate() {
        if lf == RESIDUAL {
            continue;
        }
        mass.entry(lf).or_default().0 += graph.firm_degree(f) as i128;
        within += graph
            .firm_neighbors(f)
            .iter()
            .filter(|&&p| product_labels[p as usize] == lf)
            .count() as i128;
    }
    for (p, &lp) in product_labels.iter().enumerate() {
        if lp != RESIDUAL {
            mass.entry(lp).or_default().1 += graph.product_degree(p) as i128;
        }
    }
    let null: i128 = mass.values().map(|(r, k)| r * k).sum();
    Ok(scaled_q(m * within - null, m))
}

fn scaled_q(numerator: i128, m: i128) -> f64 {
    numerator as f64 / (m * m) as f64
}

/// BRIM settings. `blocks` fixes the label count; otherwise the count is
/// scanned up to `max_blocks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrimConfig {
    pub seed: u64,
    pub restarts: usize,
    pub max_blocks: usize,
    pub max_sweeps: usize,
    pub blocks: Option<usize>,
}

impl Default for BrimConfig {
    fn default() -> Self {
        BrimConfig {
            seed: 0,
            restarts: 32,
            max_blocks: 64,
            max_sweeps: 200,
            blocks: None,
        }
    }
}

/// How a BRIM partition was reached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrimInfo {
    pub seed: u64,
    /// Label count of the winning run (some labels may have emptied).
    pub candidate_blocks: usize,
    /// Index of the winning restart.
    pub restart: usize,
    pub sweeps: usize,
    pub converged: bool,
    /// Q after every half-step of the winning restart.
    pub log: Vec<f64>,
    /// Best Q per evaluated label count, in evaluation order.
    pub scan: Vec<(usize, f64)>,
    /// Evaluated runs that hit the sweep cap.
    pub unconverged_runs: usize,
    pub n_components: usize,
}

/// Joint block labels for firms and products.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    pub firms: Vec<String>,
    pub products: Vec<String>,
    pub firm_labels: Vec<u32>,
    pub product_labels: Vec<u32>,
    pub n_blocks: usize,
    pub modularity: Option<f64>,
    pub info: Option<BrimInfo>,
}

impl BlockPartition {
    pub fn new(firms: Vec<String>, products: Vec<String>, firm_labels: Vec<u32>, product_labels: Vec<u32>) -> Result<Self> {
        if firms.len() != firm_labels.len() || products.len() != product_labels.len() {
            return Err(Error::Validation("partition labels do not match node counts".into()));
        }
        let n_blocks = count_labels(&firm_labels, &product_labels);
        Ok(BlockPartition {
            firms,
            products,
            firm_labels,
            product_labels,
            n_blocks,
            modularity: None,
            info: None,
        })
    }

    pub fn firm_label(&self, firm: &str) -> Option<u32> {
        let i = self.firms.iter().position(|f| f == firm)?;
        Some(self.firm_labels[i])
    }

    pub fn product_label(&self, product: &str) -> Option<u32> {
        let i = self.products.iter().position(|p| p == product)?;
        Some(self.product_labels[i])
    }

    /// Sets `modularity` against `graph`, which must share the node order.
    pub fn with_modularity(mut self, graph: &BipartiteGraph) -> Result<Self> {
        if graph.firms() != self.firms.as_slice() || graph.products() != self.products.as_slice() {
            return Err(Error::Validation("partition and graph have different nodes".into()));
        }
        self.modularity = Some(bipartite_modularity(graph, &self.firm_labels, &self.product_labels)?);
        Ok(self)
    }

    /// Reorders to the given node lists. Firms absent from the partition get
    /// [`RESIDUAL`]; absent products are an error.
    pub fn align(&self, firms: &[String], products: &[String]) -> Result<BlockPartition> {
        if firms == self.firms.as_slice() && products == self.products.as_slice() {
            return Ok(self.clone());
        }
        let firm_index: HashMap<&str, u32> = self
            .firms
            .iter()
            .map(String::as_str)
            .zip(self.firm_labels.iter().copied())
            .collect();
        let product_index: HashMap<&str, u32> = self
            .products
            .iter()
            .map(String::as_str)
            .zip(self.product_labels.iter().copied())
            .collect();
        let mut missing_firms = 0;
        let firm_labels = firms
            .iter()
            .map(|f| {
                firm_index.get(f.as_str()).copied().unwrap_or_else(|| {
                    missing_firms += 1;
                    RESIDUAL
                })
            })
            .collect();
        if missing_firms > 0 {
            log::warn!("partition: {missing_firms} firms without a block label");
        }
        let product_labels = products
            .iter()
            .map(|p| {
                product_index
                    .get(p.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("product {p} has no block label")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = BlockPartition::new(firms.to_vec(), products.to_vec(), firm_labels, product_labels)?;
        out.info = self.info.clone();
        Ok(out)
    }

    /// `node_type,node_id,block_id`; residual nodes are written as -1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e| Error::csv(path, e);
        w.write_record(["node_type", "node_id", "block_id"]).map_err(io)?;
        let label = |l: u32| if l == RESIDUAL { "-1".to_string() } else { l.to_string() };
        for (f, &l) in self.firms.iter().zip(&self.firm_labels) {
            w.write_record(["firm", f, &label(l)]).map_err(io)?;
        }
        for (p, &l) in self.products.iter().zip(&self.product_labels) {
            w.write_record(["product", p, &label(l)]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn count_labels(firm_labels: &[u32], product_labels: &[u32]) -> usize {
    let mut labels: Vec<u32> = firm_labels
        .iter()
        .chain(product_labels)
        .copied()
        .filter(|&l| l != RESIDUAL)
        .collect();
    labels.sort_unstable();
    labels.dedup();
    labels.len()
}

/// Per-node adjacency of the side being assigned.
struct Side<'a> {
    ptr: &'a [usize],
    adj: &'a [u32],
}

impl Side<'_> {
    fn len(&self) -> usize {
        self.ptr.len() - 1
    }
}

struct Scratch {
    counts: Vec<i64>,
    touched: Vec<u32>,
}

/// Assigns every node of `side` the label maximizing its modularity
/// contribution given the labels of the other side. Returns whether any
/// label changed, `m² Q` after the step, and the new per-label degree mass.
fn half_step(
    side: &Side,
    labels: &mut [u32],
    other_labels: &[u32],
    other_mass: &[i64],
    m: i64,
    scratch: &mut Scratch,
) -> (bool, i128, Vec<i64>) {
    let c = other_mass.len();
    // Lowest-mass label: the best choice among labels with no neighbor.
    let min_label = (0..c).min_by_key(|&l| (other_mass[l], l)).unwrap_or(0) as u32;
    let mut changed = false;
    let mut total: i128 = 0;
    let mut mass = vec![0i64; c];
    for i in 0..side.len() {
        let nbrs = &side.adj[side.ptr[i]..side.ptr[i + 1]];
        let k = nbrs.len() as i64;
        if k == 0 {
            if labels[i] != RESIDUAL {
                labels[i] = RESIDUAL;
                changed = true;
            }
            continue;
        }
        for &j in nbrs {
            let l = other_labels[j as usize];
            if l == RESIDUAL {
                continue;
            }
            if scratch.counts[l as usize] == 0 {
                scratch.touched.push(l);
            }
            scratch.counts[l as usize] += 1;
        }
        let score = |l: u32, counts: &[i64]| counts[l as usize] * m - k * other_mass[l as usize];
        let current = labels[i];
        let mut best = (i64::MIN, u32::MAX);
        let mut consider = |l: u32, counts: &[i64]| {
            let s = score(l, counts);
            if s > best.0 || (s == best.0 && l < best.1) {
                best = (s, l);
            }
        };
        for &l in &scratch.touched {
            consider(l, &scratch.counts);
        }
        consider(min_label, &scratch.counts);
        let mut choice = best.1;
        if current != RESIDUAL && (current as usize) < c && score(current, &scratch.counts) == best.0 {
            choice = current;
        }
        total += best.0 as i128;
        mass[choice as usize] += k;
        if choice != current {
            labels[i] = choice;
            changed = true;
        }
        for &l in &scratch.touched {
            scratch.counts[l as usize] = 0;
        }
        scratch.touched.clear();
    }
    (changed, total, mass)
}

#[derive(Debug, Clone)]
struct RunResult {
    firm_labels: Vec<u32>,
    product_labels: Vec<u32>,
    numerator: i128,
    log: Vec<f64>,
    sweeps: usize,
    converged: bool,
}

/// One BRIM run with `c` labels from a random start on the smaller side.
fn brim_run(graph: &BipartiteGraph, c: usize, rng: &mut ChaCha8Rng, max_sweeps: usize) -> RunResult {
    let m = graph.n_edges() as i64;
    let firms = Side {
        ptr: &graph.firm_ptr,
        adj: &graph.firm_adj,
    };
    let products = Side {
        ptr: &graph.product_ptr,
        adj: &graph.product_adj,
    };
    let init_products = graph.n_products() <= graph.n_firms();
    let (init_side, other_side) = if init_products { (&products, &firms) } else { (&firms, &products) };
    let mut init_labels = vec![RESIDUAL; init_side.len()];
    let mut init_mass = vec![0i64; c];
    for (i, label) in init_labels.iter_mut().enumerate() {
        let k = (init_side.ptr[i + 1] - init_side.ptr[i]) as i64;
        if k > 0 {
            let l = rng.random_range(0..c as u32);
            *label = l;
            init_mass[l as usize] += k;
        }
    }
    let mut other_labels = vec![RESIDUAL; other_side.len()];
    let mut scratch = Scratch {
        counts: vec![0; c],
        touched: Vec::new(),
    };
    let mut log = Vec::new();
    let mut numerator = 0;
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        let (_, num, other_mass) = half_step(other_side, &mut other_labels, &init_labels, &init_mass, m, &mut scratch);
        log.push(scaled_q(num, m as i128));
        let (changed, num, mass) = half_step(init_side, &mut init_labels, &other_labels, &other_mass, m, &mut scratch);
        log.push(scaled_q(num, m as i128));
        init_mass = mass;
        numerator = num;
        sweeps += 1;
        if !changed {
            converged = true;
            break;
        }
    }
    let (firm_labels, product_labels) = if init_products {
        (other_labels, init_labels)
    } else {
        (init_labels, other_labels)
    };
    RunResult {
        firm_labels,
        product_labels,
        numerator,
        log,
        sweeps,
        converged,
    }
}

struct Candidate {
    c: usize,
    restart: usize,
    run: RunResult,
    unconverged: usize,
}

fn best_of_restarts(graph: &BipartiteGraph, c: usize, config: &BrimConfig) -> Candidate {
    let runs: Vec<RunResult> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(((c as u64) << 32) | r as u64);
            brim_run(graph, c, &mut rng, config.max_sweeps)
        })
        .collect();
    let unconverged = runs.iter().filter(|r| !r.converged).count();
    let (restart, run) = runs
        .into_iter()
        .enumerate()
        .reduce(|best, next| if next.1.numerator > best.1.numerator { next } else { best })
        .expect("at least one restart");
    Candidate {
        c,
        restart,
        run,
        unconverged,
    }
}

/// Best-of-restarts BRIM. Without a fixed block count, label counts
/// 2, 4, 8, … are tried until Q stops improving, then the best count is
/// refined by bisection between its scanned neighbours.
pub fn brim(graph: &BipartiteGraph, config: &BrimConfig) -> Result<BlockPartition> {
    if graph.n_edges() == 0 {
        return Err(Error::compute(MODULE, "BRIM needs at least one edge"));
    }
    if config.restarts == 0 || config.max_sweeps == 0 {
        return Err(Error::Config("BRIM restarts and max_sweeps must be positive".into()));
    }
    if config.max_blocks == 0 || config.blocks == Some(0) {
        return Err(Error::Config("block count must be positive".into()));
    }
    log::debug!(
        "brim: {} firms, {} products, {} edges, {} components",
        graph.n_firms(),
        graph.n_products(),
        graph.n_edges(),
        graph.n_components()
    );
    let mut evaluated: BTreeMap<usize, Candidate> = BTreeMap::new();
    let mut scan = Vec::new();
    let mut eval = |c: usize, evaluated: &mut BTreeMap<usize, Candidate>| -> i128 {
        let cand = evaluated
            .entry(c)
            .or_insert_with(|| best_of_restarts(graph, c, config));
        let num = cand.run.numerator;
        scan.push((c, scaled_q(num, graph.n_edges() as i128)));
        log::debug!("brim: {c} labels, Q = {}", scaled_q(num, graph.n_edges() as i128));
        num
    };
    // Higher Q wins; ties go to fewer labels.
    let better = |a: (i128, usize), b: (i128, usize)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);

    let best_c = if let Some(c) = config.blocks {
        eval(c, &mut evaluated);
        c
    } else {
        let cap = config.max_blocks;
        let mut c = 2.min(cap);
        let mut best = (eval(c, &mut evaluated), c);
        while c < cap {
            let next = (c * 2).min(cap);
            let q = eval(next, &mut evaluated);
            c = next;
            if better((q, next), best) {
                best = (q, next);
            } else {
                break;
            }
        }
        let mut lo = evaluated.range(..best.1).next_back().map_or(best.1, |(&k, _)| k);
        let mut hi = evaluated.range(best.1 + 1..).next().map_or(best.1, |(&k, _)| k);
        while best.1 - lo > 1 || hi - best.1 > 1 {
            let left = (best.1 - lo > 1).then(|| (lo + best.1) / 2);
            let right = (hi - best.1 > 1).then(|| (best.1 + hi) / 2);
            let left_q = left.map(|c| (eval(c, &mut evaluated), c));
            let right_q = right.map(|c| (eval(c, &mut evaluated), c));
            match (left_q, right_q) {
                (Some(l), _) if better(l, best) && right_q.is_none_or(|r| better(l, r)) => {
                    hi = best.1;
                    best = l;
                }
                (_, Some(r)) if better(r, best) => {
                    lo = best.1;
                    best = r;
                }
                _ => {
                    lo = left.unwrap_or(lo);
                    hi = right.unwrap_or(hi);
                }
            }
        }
        best.1
    };
    let unconverged_runs = evaluated.values().map(|c| c.unconverged).sum();
    let winner = evaluated.remove(&best_c).expect("evaluated block count");
    if !winner.run.converged {
        log::warn!(
            "brim: best run did not converge within {} sweeps",
            config.max_sweeps
        );
    }
    let (firm_labels, product_labels) = compact_labels(graph, winner.run.firm_labels, winner.run.product_labels);
    let modularity = bipartite_modularity(graph, &firm_labels, &product_labels)?;
    let mut partition = BlockPartition::new(
        graph.firms().to_vec(),
        graph.products().to_vec(),
        firm_labels,
        product_labels,
    )?;
    partition.modularity = Some(modularity);
    partition.info = Some(BrimInfo {
        seed: config.seed,
        candidate_blocks: winner.c,
        restart: winner.restart,
        sweeps: winner.run.sweeps,
        converged: winner.run.converged,
        log: winner.run.log,
        scan,
        unconverged_runs,
        n_components: graph.n_components(),
    });
    Ok(partition)
}

/// Relabels blocks 0.. by descending within-block edge count, then descending
/// degree mass, then old label.
fn compact_labels(graph: &BipartiteGraph, mut firm_labels: Vec<u32>, mut product_labels: Vec<u32>) -> (Vec<u32>, Vec<u32>) {
    let mut stats: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (f, &l) in firm_labels.iter().enumerate() {
        if l == RESIDUAL {
            continue;
        }
        let e = stats.entry(l).or_default();
        e.1 += graph.firm_degree(f);
        e.0 += graph
            .firm_neighbors(f)
            .iter()
            .filter(|&&p| product_labels[p as usize] == l)
            .count();
    }
    for (p, &l) in product_labels.iter().enumerate() {
        if l != RESIDUAL {
            stats.entry(l).or_default().1 += graph.product_degree(p);
        }
    }
    let mut order: Vec<(u32, (usize, usize))> = stats.into_iter().collect();
    order.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(b.1 .1.cmp(&a.1 .1)).then(a.0.cmp(&b.0)));
    let map: HashMap<u32, u32> = order.iter().enumerate().map(|(new, &(old, _))| (old, new as u32)).collect();
    for l in firm_labels.iter_mut().chain(product_labels.iter_mut()) {
        if *l != RESIDUAL {
            *l = map[l];
        }
    }
    (firm_labels, product_labels)
}

/// Per-firm counts of exported products inside and outside the firm's block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiversification {
    pub firms: Vec<String>,
    pub d_in: Vec<u32>,
    pub d_out: Vec<u32>,
}

impl BlockDiversification {
    pub fn d_total(&self, firm: usize) -> u32 {
        self.d_in[firm] + self.d_out[firm]
    }
}

/// `d_in = Σ_p M_fp δ_fp`, `d_out = Σ_p M_fp (1 − δ_fp)`. The partition is
/// aligned to the matrix by node name.
pub fn block_diversification(binary: &BinaryMatrix, partition: &BlockPartition) -> Result<BlockDiversification> {
    let partition = partition.align(binary.rows(), binary.cols())?;
    let mut d_in = Vec::with_capacity(binary.n_rows());
    let mut d_out = Vec::with_capacity(binary.n_rows());
    for f in 0..binary.n_rows() {
        let row = binary.row(f);
        let lf = partition.firm_labels[f];
        let inside = if lf == RESIDUAL {
            0
        } else {
            row.iter()
                .filter(|&&p| partition.product_labels[p as usize] == lf)
                .count() as u32
        };
        d_in.push(inside);
        d_out.push(row.len() as u32 - inside);
    }
    Ok(BlockDiversification {
        firms: binary.rows().to_vec(),
        d_in,
        d_out,
    })
}

/// Section of an HS6 code or HS4 heading.
fn product_section(hs_map: &HsMap, code: &str) -> Option<u8> {
    match code.len() {
        6 => hs_map.section(code),
        4 => hs_map.heading_section(code),
        _ => None,
    }
}

/// Partition by HS section, with the firms whose largest section was tied.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorPartition {
    pub partition: BlockPartition,
    pub ties: Vec<usize>,
}

/// Labels every product with its section (1..=21) and every firm with the
/// section holding its largest export value; ties go to the lowest section.
/// Firms with no exports get [`RESIDUAL`].
pub fn sector_partition(matrix: &ExportMatrix, hs_map: &HsMap) -> Result<SectorPartition> {
    let product_labels = matrix
        .cols()
        .iter()
        .map(|p| {
            product_section(hs_map, p)
                .map(u32::from)
                .ok_or_else(|| Error::Validation(format!("product {p} has no HS section")))
        })
        .collect::<Result<Vec<u32>>>()?;
    let mut firm_labels = Vec::with_capacity(matrix.rows().len());
    let mut ties = Vec::new();
    let data = matrix.data();
    for f in 0..data.n_rows() {
        let mut by_section = [0.0f64; 22];
        let (idx, vals) = data.row(f);
        for (&p, &v) in idx.iter().zip(vals) {
            by_section[product_labels[p as usize] as usize] += v;
        }
        let max = by_section.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            firm_labels.push(RESIDUAL);
            continue;
        }
        let mut top = (1..=21).filter(|&s| by_section[s] == max);
        firm_labels.push(top.next().expect("a maximal section") as u32);
        if top.next().is_some() {
            ties.push(f);
        }
    }
    if !ties.is_empty() {
        log::info!("sector partition: {} firms tied between sections", ties.len());
    }
    let partition = BlockPartition::new(matrix.rows().to_vec(), matrix.cols().to_vec(), firm_labels, product_labels)?;
    Ok(SectorPartition { partition, ties })
}

/// Carries an HS4 product partition over to HS6 codes by prefix. A partition
/// already over HS6 codes is aligned to `hs6_codes` unchanged.
pub fn map_blocks_hs4_to_hs6(partition: &BlockPartition, hs_map: &HsMap, hs6_codes: &[String]) -> Result<BlockPartition> {
    if partition.products.iter().all(|p| p.len() == 6) {
        return partition.align(&partition.firms, hs6_codes);
    }
    let heading: HashMap<&str, u32> = partition
        .products
        .iter()
        .map(String::as_str)
        .zip(partition.product_labels.iter().copied())
        .collect();
    let product_labels = hs6_codes
        .iter()
        .map(|code| {
            let hs4 = hs_map.hs4(code).unwrap_or(&code[..code.len().min(4)]);
            heading
                .get(hs4)
                .copied()
                .ok_or_else(|| Error::Validation(format!("HS4 prefix {hs4} of {code} is not in the partition")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = BlockPartition::new(
        partition.firms.clone(),
        hs6_codes.to_vec(),
        partition.firm_labels.clone(),
        product_labels,
    )?;
    out.info = partition.info.clone();
    out.modularity = partition.modularity;
    Ok(out)
}

/// Size and sector make-up of one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockComposition {
    pub block: u32,
    pub n_firms: usize,
    pub n_products: usize,
    pub internal_edges: usize,
    /// Up to three (section, share of the block's products), largest first.
    pub top_sections: Vec<(u8, f64)>,
}

pub fn block_composition(graph: &BipartiteGraph, partition: &BlockPartition, hs_map: &HsMap) -> Result<Vec<BlockComposition>> {
    let partition = partition.align(graph.firms(), graph.products())?;
    let mut out: BTreeMap<u32, (BlockComposition, [usize; 22])> = BTreeMap::new();
    let mut entry = |l: u32| {
        out.entry(l).or_insert_with(|| {
            (
                BlockComposition {
                    block: l,
                    n_firms: 0,
                    n_products: 0,
                    internal_edges: 0,
                    top_sections: Vec::new(),
                },
                [0; 22],
            )
        });
    };
    for &l in partition.firm_labels.iter().chain(&partition.product_labels) {
        if l != RESIDUAL {
            entry(l);
        }
    }
    for (f, &l) in partition.firm_labels.iter().enumerate() {
        if let Some((b, _)) = out.get_mut(&l) {
            b.n_firms += 1;
            b.internal_edges += graph
                .firm_neighbors(f)
                .iter()
                .filter(|&&p| partition.product_labels[p as usize] == l)
                .count();
        }
    }
    for (p, &l) in partition.product_labels.iter().enumerate() {
        if let Some((b, sections)) = out.get_mut(&l) {
            b.n_products += 1;
            if let Some(s) = product_section(hs_map, &partition.products[p]) {
                sections[s as usize] += 1;
            }
        }
    }
    Ok(out
        .into_values()
        .map(|(mut b, sections)| {
            let mut ranked: Vec<(u8, usize)> = (1..=21u8)
                .map(|s| (s, sections[s as usize]))
                .filter(|&(_, n)| n > 0)
                .collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            b.top_sections = ranked
                .into_iter()
                .take(3)
                .map(|(s, n)| (s, n as f64 / b.n_products as f64))
                .collect();
            b
        })
        .collect())
}

pub fn write_composition_csv(path: &Path, blocks: &[BlockComposition], hs_map: &HsMap) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e| Error::csv(path, e);
    w.write_record(["block_id", "n_firms", "n_products", "internal_edges", "top_sections"])
        .map_err(io)?;
    for b in blocks {
        let top = b
            .top_sections
            .iter()
            .map(|(s, share)| {
                format!("{} {} ({:.3})", s, hs_map.section_label(*s).unwrap_or(""), share)
            })
            .collect::<Vec<_>>()
            .join("; ");
        w.write_record([
            b.block.to_string(),
            b.n_firms.to_string(),
            b.n_products.to_string(),
            b.internal_edges.to_string(),
            top,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
