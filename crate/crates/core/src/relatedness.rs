//! Sapling similarity between products and volume-weighted firm coherence.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{BinaryMatrix, ExportMatrix};

/// Symmetric product co-occurrence counts of a binary matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    products: Vec<String>,
    counts: Vec<u32>,
    degrees: Vec<u32>,
    n_rows: u32,
}

impl CooccurrenceTable {
    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    /// Number of rows (firms) N.
    pub fn n_rows(&self) -> u32 {
        self.n_rows
    }

    pub fn degree(&self, p: usize) -> u32 {
        self.degrees[p]
    }

    /// Rows having both `p` and `q`; the diagonal is the degree.
    pub fn get(&self, p: usize, q: usize) -> u32 {
        self.counts[p * self.products.len() + q]
    }
}

/// Counts, for every product pair, the rows exporting both.
pub fn cooccurrence(binary: &BinaryMatrix) -> CooccurrenceTable {
    let n = binary.n_cols();
    let mut counts = vec![0u32; n * n];
    for r in 0..binary.n_rows() {
        let row = binary.row(r);
        for (i, &a) in row.iter().enumerate() {
            let a = a as usize;
            counts[a * n + a] += 1;
            for &b in &row[i + 1..] {
                let b = b as usize;
                counts[a * n + b] += 1;
                counts[b * n + a] += 1;
            }
        }
    }
    let degrees = (0..n).map(|p| counts[p * n + p]).collect();
    CooccurrenceTable {
        products: binary.cols().to_vec(),
        counts,
        degrees,
        n_rows: binary.n_rows() as u32,
    }
}

/// Sapling similarity of `p` given `q` from co-occurrence `co`, degrees
/// `kp`, `kq` and row count `n`. `None` when either degree is 0 or `n`.
pub fn sapling_entry(co: u32, kp: u32, kq: u32, n: u32) -> Option<f64> {
    if kp == 0 || kq == 0 || kp >= n || kq >= n || co > kp.min(kq) {
        return None;
    }
    let (co_f, kp_f, kq_f, n_f) = (co as f64, kp as f64, kq as f64, n as f64);
    let rest = kp_f - co_f;
    let f = (co_f * (1.0 - co_f / kq_f) + rest * (1.0 - rest / (n_f - kq_f))) / (kp_f * (1.0 - kp_f / n_f));
    let positive = co as u64 * n as u64 >= kp as u64 * kq as u64;
    let b = if positive { 1.0 - f } else { -1.0 + f };
    Some(b.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Dense(Vec<f64>),
    /// Row-compressed entries with |B| at or above the cutoff.
    Sparse {
        ptr: Vec<usize>,
        idx: Vec<u32>,
        val: Vec<f64>,
    },
}

/// Product × product Sapling similarity. Entries of products with a
/// degenerate degree are undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    products: Vec<String>,
    defined: Vec<bool>,
    cutoff: f64,
    storage: Storage,
}

impl SimilarityMatrix {
    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn is_defined(&self, p: usize) -> bool {
        self.defined[p]
    }

    /// `B[p][q]`; entries pruned by the cutoff read as 0.
    pub fn get(&self, p: usize, q: usize) -> Option<f64> {
        if !(self.defined[p] && self.defined[q]) {
            return None;
        }
        Some(match &self.storage {
            Storage::Dense(v) => v[p * self.products.len() + q],
            Storage::Sparse { ptr, idx, val } => {
                let row = &idx[ptr[p]..ptr[p + 1]];
                row.binary_search(&(q as u32)).map_or(0.0, |k| val[ptr[p] + k])
            }
        })
    }

    /// Stored entries (dense storage stores everything defined).
    pub fn stored_entries(&self) -> usize {
        match &self.storage {
            Storage::Dense(_) => {
                let d = self.defined.iter().filter(|&&x| x).count();
                d * d
            }
            Storage::Sparse { idx, .. } => idx.len(),
        }
    }

    /// Largest `|B[p][q] − B[q][p]|` over defined entries.
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.products.len();
        (0..n)
            .into_par_iter()
            .map(|p| {
                (p + 1..n)
                    .filter_map(|q| Some((self.get(p, q)? - self.get(q, p)?).abs()))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// `(p, p', B)` triplets for defined entries with `|B|` at or above the
    /// cutoff.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let io = |e| Error::csv(path, e);
        w.write_record(["product", "product_other", "similarity"]).map_err(io)?;
        let n = self.products.len();
        for p in 0..n {
            let qs: Box<dyn Iterator<Item = usize>> = match &self.storage {
                Storage::Dense(_) => Box::new(0..n),
                Storage::Sparse { ptr, idx, .. } => Box::new(idx[ptr[p]..ptr[p + 1]].iter().map(|&q| q as usize)),
            };
            for q in qs {
                match self.get(p, q) {
                    Some(b) if b.abs() >= self.cutoff => {
                        w.write_record([self.products[p].as_str(), &self.products[q], &b.to_string()])
                            .map_err(io)?;
                    }
                    _ => {}
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Sapling similarity for every product pair. A positive `cutoff` keeps only
/// entries with `|B| ≥ cutoff` in sparse storage; zero keeps everything dense.
pub fn sapling(co: &CooccurrenceTable, cutoff: f64) -> Result<SimilarityMatrix> {
    if !(cutoff >= 0.0 && cutoff <= 1.0) {
        return Err(Error::Config(format!("similarity cutoff must lie in [0, 1], got {cutoff}")));
    }
    let n = co.n_products();
    let big_n = co.n_rows;
    let defined: Vec<bool> = co.degrees.iter().map(|&k| k > 0 && k < big_n).collect();
    let undefined = defined.iter().filter(|&&d| !d).count();
    if undefined > 0 {
        log::warn!("sapling: {undefined} products have degree 0 or N; their similarities are undefined");
    }
    let row = |p: usize| -> Vec<(u32, f64)> {
        if !defined[p] {
            return Vec::new();
        }
        (0..n)
            .filter(|&q| defined[q])
            .filter_map(|q| {
                let b = sapling_entry(co.get(p, q), co.degrees[p], co.degrees[q], big_n)?;
                Some((q as u32, b))
            })
            .collect()
    };
    let storage = if cutoff == 0.0 {
        let mut dense = vec![0.0; n * n];
        dense.par_chunks_mut(n.max(1)).enumerate().for_each(|(p, out)| {
            for (q, b) in row(p) {
                out[q as usize] = b;
            }
        });
        Storage::Dense(dense)
    } else {
        let rows: Vec<Vec<(u32, f64)>> = (0..n)
            .into_par_iter()
            .map(|p| row(p).into_iter().filter(|e| e.1.abs() >= cutoff).collect())
            .collect();
        let mut ptr = vec![0];
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for r in rows {
            for (q, b) in r {
                idx.push(q);
                val.push(b);
            }
            ptr.push(idx.len());
        }
        Storage::Sparse { ptr, idx, val }
    };
    Ok(SimilarityMatrix {
        products: co.products.clone(),
        defined,
        cutoff,
        storage,
    })
}

/// Per-firm coherence; `None` for firms without exports.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceTable {
    pub firms: Vec<String>,
    pub values: Vec<Option<f64>>,
    /// Single-product firms, given coherence 1.
    pub degenerate: Vec<bool>,
    /// Product pairs read as 0 because their similarity was undefined.
    pub undefined_pairs: usize,
}

impl CoherenceTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e| Error::csv(path, e);
        w.write_record(["firm_id", "coherence", "degenerate"]).map_err(io)?;
        for (i, f) in self.firms.iter().enumerate() {
            let c = self.values[i].map(|v| v.to_string()).unwrap_or_default();
            w.write_record([f.as_str(), &c, if self.degenerate[i] { "1" } else { "0" }])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `C_f = Σ_{p≠p'} E_fp E_fp' B_pp' / Σ_{p≠p'} E_fp E_fp'`, both orderings of
/// every pair. Products are matched to the similarity matrix by code;
/// undefined or missing similarities count as 0.
pub fn coherence(exports: &ExportMatrix, sim: &SimilarityMatrix) -> CoherenceTable {
    let index: HashMap<&str, usize> = sim
        .products()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let col_to_sim: Vec<Option<usize>> = exports.cols().iter().map(|p| index.get(p.as_str()).copied()).collect();
    let data = exports.data();
    let per_firm: Vec<(Option<f64>, bool, usize)> = (0..data.n_rows())
        .into_par_iter()
        .map(|f| {
            let (idx, vals) = data.row(f);
            let items: Vec<(Option<usize>, f64)> = idx
                .iter()
                .zip(vals)
                .filter(|(_, &v)| v > 0.0)
                .map(|(&c, &v)| (col_to_sim[c as usize], v))
                .collect();
            match items.len() {
                0 => (None, false, 0),
                1 => (Some(1.0), true, 0),
                _ => {
                    let (mut num, mut den, mut undefined) = (0.0, 0.0, 0);
                    for (i, &(p, ep)) in items.iter().enumerate() {
                        for (j, &(q, eq)) in items.iter().enumerate() {
                            if i == j {
                                continue;
                            }
                            let w = ep * eq;
                            den += w;
                            match p.zip(q).and_then(|(p, q)| sim.get(p, q)) {
                                Some(b) => num += w * b,
                                None => undefined += 1,
                            }
                        }
                    }
                    (Some((num / den).clamp(-1.0, 1.0)), false, undefined)
                }
            }
        })
        .collect();
    let undefined_pairs = per_firm.iter().map(|x| x.2).sum();
    if undefined_pairs > 0 {
        log::warn!("coherence: {undefined_pairs} ordered product pairs without a defined similarity");
    }
    CoherenceTable {
        firms: exports.rows().to_vec(),
        values: per_firm.iter().map(|x| x.0).collect(),
        degenerate: per_firm.iter().map(|x| x.1).collect(),
        undefined_pairs,
    }
}
