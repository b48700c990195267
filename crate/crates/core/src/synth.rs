//! Synthetic economies with planted blocks, a product income gradient and
//! planted growth coefficients. Every output uses the input schemas of
//! [`crate::ingest`], so the generated files run through the full pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{bipartite_modularity, BipartiteGraph, BlockPartition};
use crate::econometrics::{Timing, Variable, VariablePanel};
use crate::error::{Error, Result};
use crate::indicators::{aggregate_graph, firm_sectors, fill_panel, product_tables, year_indicators, IndicatorSettings};
use crate::ingest::{
    ExportPanel, ExportPanelBuilder, FinancialPanel, FinancialRow, GdpTable, HsMap, HsRow, TableSchema, WorldTrade,
};
use crate::matrix::Resolution;

const MODULE: &str = "synthetic-economy";
const SECTIONS: usize = 21;

// Stream offsets keep the generator's independent draws apart.
const STREAM_LINKS: u64 = 0;
const STREAM_FIRM: u64 = 1 << 40;
const STREAM_PRODUCTS: u64 = 2 << 40;
const STREAM_WORLD: u64 = 3 << 40;
const STREAM_SECTORS: u64 = 4 << 40;
const STREAM_GROWTH: u64 = 5 << 40;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Coefficients planted in the growth equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedBeta {
    pub intercept: f64,
    pub expy: f64,
    pub log_d_out: f64,
    pub log_d_in: f64,
    pub log_revenue: f64,
}

impl Default for PlantedBeta {
    fn default() -> Self {
        PlantedBeta {
            intercept: 0.05,
            expy: 0.05,
            log_d_out: 0.016,
            log_d_in: -0.014,
            log_revenue: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub firms: usize,
    /// HS6 products.
    pub products: usize,
    /// HS6 codes per HS4 heading; headings never straddle blocks.
    pub hs6_per_heading: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub export_years: (i32, i32),
    pub financial_years: (i32, i32),
    /// Log-normal parameters of a link's base export value.
    pub value_log_mean: f64,
    pub value_log_sd: f64,
    /// Log-normal year-to-year jitter of each export value.
    pub year_log_sd: f64,
    pub countries: usize,
    pub log_gdp_range: (f64, f64),
    /// Share of headings placed in a random section instead of one of
    /// their block's home sections.
    pub section_noise: f64,
    pub beta: PlantedBeta,
    pub sector_effect_sd: f64,
    /// Standard deviation of the growth error.
    pub noise: f64,
    pub missing_financial_rate: f64,
    pub timing: Timing,
    pub indicators: IndicatorSettings,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            firms: 2000,
            products: 600,
            hs6_per_heading: 4,
            blocks: 7,
            p_in: 0.1,
            p_out: 0.005,
            export_years: (1993, 2017),
            financial_years: (2009, 2019),
            value_log_mean: 10.0,
            value_log_sd: 1.0,
            year_log_sd: 0.2,
            countries: 60,
            log_gdp_range: (7.0, 11.5),
            section_noise: 0.2,
            beta: PlantedBeta::default(),
            sector_effect_sd: 0.02,
            noise: 0.05,
            missing_financial_rate: 0.0,
            timing: Timing::default(),
            indicators: IndicatorSettings::default(),
        }
    }
}

impl SynthConfig {
    pub const PRESETS: [&'static str; 3] = ["small", "default", "paper"];

    /// `small` for quick runs, `default` at 2,000 firms, `paper` at
    /// 12,852 firms × 5,203 products × 25 years.
    pub fn preset(name: &str) -> Result<Self> {
        let base = SynthConfig::default();
        match name {
            "default" => Ok(base),
            "small" => Ok(SynthConfig {
                firms: 300,
                products: 168,
                p_in: 0.2,
                p_out: 0.01,
                export_years: (2008, 2017),
                countries: 30,
                ..base
            }),
            "paper" => Ok(SynthConfig {
                firms: 12_852,
                products: 5_203,
                p_in: 0.02,
                p_out: 0.001,
                indicators: IndicatorSettings {
                    similarity_cutoff: 1e-3,
                    ..IndicatorSettings::default()
                },
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown synthetic preset {other:?}; expected one of {}",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return bad(format!("link probabilities must lie in [0, 1], got {} and {}", self.p_in, self.p_out));
        }
        if self.blocks == 0 || self.firms < self.blocks || self.products < self.blocks {
            return bad(format!(
                "{} blocks cannot be filled by {} firms and {} products",
                self.blocks, self.firms, self.products
            ));
        }
        if self.hs6_per_heading == 0 || self.hs6_per_heading > 99 {
            return bad("hs6_per_heading must be in 1..=99".into());
        }
        let headings: usize = block_sizes(self.products, self.blocks)
            .iter()
            .map(|s| s.div_ceil(self.hs6_per_heading))
            .sum();
        if headings < SECTIONS {
            return bad(format!("{headings} HS4 headings cannot cover all {SECTIONS} sections"));
        }
        if headings > 9_899 {
            return bad(format!("{headings} HS4 headings exceed the 4-digit code space"));
        }
        if self.countries < 2 || !(self.log_gdp_range.0 < self.log_gdp_range.1) {
            return bad("need at least 2 countries and a non-empty log GDP range".into());
        }
        let Timing { t_star, dt, window } = self.timing;
        let w = window as i32;
        if window == 0 || dt < w {
            return bad(format!("planting needs 1 <= window <= dt, got window {window}, dt {dt}"));
        }
        let (e0, e1) = self.export_years;
        let (f0, f1) = self.financial_years;
        if e0 > e1 || t_star - w + 1 < e0 || t_star > e1 {
            return bad(format!("export years {e0}..={e1} must contain {}..={t_star}", t_star - w + 1));
        }
        if f0 > f1 || t_star - w + 1 < f0 || t_star + dt > f1 {
            return bad(format!("financial years {f0}..={f1} must contain {}..={}", t_star - w + 1, t_star + dt));
        }
        for (name, v) in [
            ("value_log_sd", self.value_log_sd),
            ("year_log_sd", self.year_log_sd),
            ("sector_effect_sd", self.sector_effect_sd),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.section_noise) || !(0.0..1.0).contains(&self.missing_financial_rate) {
            return bad("section_noise must lie in [0, 1] and missing_financial_rate in [0, 1)".into());
        }
        Ok(())
    }
}

/// `n` items split into `k` near-equal consecutive groups, larger groups first.
pub fn block_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|b| n / k + usize::from(b < n % k)).collect()
}

fn labels_from_sizes(sizes: &[usize]) -> Vec<u32> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b as u32, s))
        .collect()
}

/// Bipartite graph drawn from a planted block model.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedGraph {
    pub n_firms: usize,
    pub n_products: usize,
    pub edges: Vec<(u32, u32)>,
    pub firm_labels: Vec<u32>,
    pub product_labels: Vec<u32>,
}

impl PlantedGraph {
    pub fn graph(&self) -> Result<BipartiteGraph> {
        BipartiteGraph::from_edges(self.n_firms, self.n_products, &self.edges)
    }
}

/// Each firm–product pair is linked with `p_in` inside a block and `p_out`
/// across blocks. With `ensure_link`, a firm that drew no link gets one
/// random product of its own block.
pub fn planted_graph(
    firm_sizes: &[usize],
    product_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    seed: u64,
    ensure_link: bool,
) -> PlantedGraph {
    let firm_labels = labels_from_sizes(firm_sizes);
    let product_labels = labels_from_sizes(product_sizes);
    let starts: Vec<usize> = product_sizes
        .iter()
        .scan(0, |acc, &s| {
            let start = *acc;
            *acc += s;
            Some(start)
        })
        .collect();
    let rows: Vec<Vec<(u32, u32)>> = (0..firm_labels.len())
        .into_par_iter()
        .map(|f| {
            let mut r = rng(seed, STREAM_LINKS + f as u64);
            let b = firm_labels[f];
            let mut row: Vec<(u32, u32)> = product_labels
                .iter()
                .enumerate()
                .filter(|(_, &pb)| r.random_bool(if pb == b { p_in } else { p_out }))
                .map(|(p, _)| (f as u32, p as u32))
                .collect();
            let size = product_sizes[b as usize];
            if ensure_link && row.is_empty() && size > 0 {
                row.push((f as u32, (starts[b as usize] + r.random_range(0..size)) as u32));
            }
            row
        })
        .collect();
    PlantedGraph {
        n_firms: firm_labels.len(),
        n_products: product_labels.len(),
        edges: rows.into_iter().flatten().collect(),
        firm_labels,
        product_labels,
    }
}

/// Bipartite modularity of the planted partition with every edge count and
/// degree sum replaced by its expectation under the block model.
pub fn expected_planted_modularity(firm_sizes: &[usize], product_sizes: &[usize], p_in: f64, p_out: f64) -> f64 {
    let nf: f64 = firm_sizes.iter().sum::<usize>() as f64;
    let np: f64 = product_sizes.iter().sum::<usize>() as f64;
    let blocks: Vec<(f64, f64)> = firm_sizes.iter().zip(product_sizes).map(|(&f, &p)| (f as f64, p as f64)).collect();
    let within: f64 = blocks.iter().map(|(f, p)| p_in * f * p).sum();
    let m = within + p_out * (nf * np - blocks.iter().map(|(f, p)| f * p).sum::<f64>());
    let null: f64 = blocks
        .iter()
        .map(|&(f, p)| {
            let k = f * (p_in * p + p_out * (np - p));
            let r = p * (p_in * f + p_out * (nf - f));
            k * r
        })
        .sum();
    within / m - null / (m * m)
}

/// Generated inputs and the planted truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub exports: ExportPanel,
    pub financials: FinancialPanel,
    pub gdp: GdpTable,
    pub world_trade: WorldTrade,
    pub hs_map: HsMap,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirmTruth {
    pub firm_id: String,
    pub block: u32,
    pub section: Option<u8>,
    /// Planted growth; `None` when a covariate is undefined for the firm.
    pub growth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductTruth {
    pub hs6: String,
    pub hs4: String,
    pub block: u32,
    pub sophistication: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub config: SynthConfig,
    pub beta: PlantedBeta,
    pub sector_effects: BTreeMap<u8, f64>,
    /// Closed-form modularity of the planted HS6 block model.
    pub expected_modularity: f64,
    /// Modularity of the planted heading partition on the aggregate HS4 graph
    /// the pipeline clusters.
    pub planted_modularity_hs4: f64,
    pub firms: Vec<FirmTruth>,
    pub products: Vec<ProductTruth>,
}

/// Home sections of block `b`: the 21 sections are dealt out to the blocks
/// in contiguous runs.
fn home_sections(b: usize, blocks: usize) -> Vec<u8> {
    if blocks > SECTIONS {
        return vec![(b % SECTIONS) as u8 + 1];
    }
    (0..SECTIONS).filter(|s| s * blocks / SECTIONS == b).map(|s| s as u8 + 1).collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let seed = config.seed;
    let firm_sizes = block_sizes(config.firms, config.blocks);
    let product_sizes = block_sizes(config.products, config.blocks);

    // Products, headings and sections.
    let mut prng = rng(seed, STREAM_PRODUCTS);
    let mut products = Vec::with_capacity(config.products);
    let mut heading_section = Vec::new();
    for (b, &size) in product_sizes.iter().enumerate() {
        let homes = home_sections(b, config.blocks);
        let level = if config.blocks > 1 { b as f64 / (config.blocks - 1) as f64 } else { 0.5 };
        for j in 0..size {
            if j % config.hs6_per_heading == 0 {
                let s = if prng.random_bool(config.section_noise) {
                    prng.random_range(1..=SECTIONS as u8)
                } else {
                    homes[prng.random_range(0..homes.len())]
                };
                heading_section.push(s);
            }
            let h = heading_section.len() - 1;
            let hs4 = format!("{:04}", 101 + h);
            products.push(ProductTruth {
                hs6: format!("{hs4}{:02}", j % config.hs6_per_heading + 1),
                hs4,
                block: b as u32,
                sophistication: 0.6 * level + 0.4 * prng.random::<f64>(),
            });
        }
    }
    for s in 1..=SECTIONS as u8 {
        if !heading_section.contains(&s) {
            let h = (s as usize - 1) * heading_section.len() / SECTIONS;
            heading_section[h] = s;
        }
    }
    // A reassignment above may have removed the last heading of another
    // section; sweep until every section is covered.
    while let Some(s) = (1..=SECTIONS as u8).find(|s| !heading_section.contains(s)) {
        let counts = |x: u8| heading_section.iter().filter(|&&y| y == x).count();
        let h = (0..heading_section.len())
            .find(|&h| counts(heading_section[h]) > 1)
            .ok_or_else(|| Error::compute(MODULE, "too few headings to cover every section"))?;
        heading_section[h] = s;
    }
    let hs_map = HsMap::new(
        products
            .iter()
            .map(|p| {
                let s = heading_section[p.hs4.parse::<usize>().expect("numeric heading") - 101];
                HsRow {
                    hs6: p.hs6.clone(),
                    hs4: p.hs4.clone(),
                    section: s,
                    label: format!("Section {s}"),
                }
            })
            .collect(),
    )?;

    // Links and export values.
    let planted = planted_graph(&firm_sizes, &product_sizes, config.p_in, config.p_out, seed, true);
    let firm_ids: Vec<String> = (0..config.firms).map(|f| format!("F{f:06}")).collect();
    let (y0, y1) = config.export_years;
    let mut by_firm: Vec<Vec<u32>> = vec![Vec::new(); config.firms];
    for &(f, p) in &planted.edges {
        by_firm[f as usize].push(p);
    }
    let value_dist = Normal::new(config.value_log_mean, config.value_log_sd)
        .map_err(|e| Error::Config(format!("export value distribution: {e}")))?;
    let rows: Vec<Vec<(u32, i32, f64)>> = by_firm
        .par_iter()
        .enumerate()
        .map(|(f, ps)| {
            let mut r = rng(seed, STREAM_FIRM + 2 * f as u64);
            let scale = 0.5 * normal(&mut r);
            let mut out = Vec::with_capacity(ps.len() * (y1 - y0 + 1) as usize);
            for &p in ps {
                let base = value_dist.sample(&mut r) + scale;
                for y in y0..=y1 {
                    let v = (base + config.year_log_sd * normal(&mut r)).exp();
                    out.push((p, y, (v * 100.0).round().max(1.0) / 100.0));
                }
            }
            out
        })
        .collect();
    let mut builder = ExportPanelBuilder::new();
    for (f, firm_rows) in rows.iter().enumerate() {
        for &(p, y, v) in firm_rows {
            builder.push(&firm_ids[f], &products[p as usize].hs6, y, v);
        }
    }
    let (exports, _) = builder.finish();

    // Countries, GDP and world trade.
    let mut wrng = rng(seed, STREAM_WORLD);
    let (g0, g1) = config.log_gdp_range;
    let countries: Vec<(String, f64)> = (0..config.countries)
        .map(|c| {
            let u = c as f64 / (config.countries - 1) as f64;
            (format!("C{c:03}"), g0 + u * (g1 - g0))
        })
        .collect();
    let gdp = GdpTable::new(countries.iter().map(|(c, l)| (c.clone(), round_sig(l.exp()))).collect())?;
    let mut world_rows = Vec::with_capacity(config.countries * config.products);
    for (ci, (c, _)) in countries.iter().enumerate() {
        let capability = ci as f64 / (config.countries - 1) as f64;
        for p in &products {
            let gap = p.sophistication - capability;
            let v = (12.0 + 0.5 * normal(&mut wrng) - gap * gap / (2.0 * 0.25 * 0.25)).exp();
            world_rows.push((c.as_str(), p.hs6.as_str(), round_sig(v)));
        }
    }
    let world_trade = WorldTrade::from_rows(world_rows)?;

    // Indicators under the planted partition, measured exactly as the
    // pipeline measures them.
    let planted_hs6 = BlockPartition::new(
        firm_ids.clone(),
        products.iter().map(|p| p.hs6.clone()).collect(),
        planted.firm_labels.clone(),
        planted.product_labels.clone(),
    )?
    .align(exports.firms().names(), exports.products().names())?;
    let sectors = firm_sectors(&exports, config.export_years, &hs_map)?;
    let tables = product_tables(&world_trade, &gdp, &config.indicators)?;
    let Timing { t_star, dt, window } = config.timing;
    let w = window as i32;
    let years: Vec<_> = (t_star - w + 1..=t_star)
        .map(|t| year_indicators(&exports, t, &planted_hs6, &sectors.partition, &tables, None, &config.indicators))
        .collect::<Result<_>>()?;
    let mut panel = VariablePanel::new(firm_ids.clone());
    fill_panel(&mut panel, &years);

    // Revenue paths carrying the planted growth, then the rest of the
    // financials.
    let mut srng = rng(seed, STREAM_SECTORS);
    let sector_effects: BTreeMap<u8, f64> = (1..=SECTIONS as u8)
        .map(|s| (s, config.sector_effect_sd * normal(&mut srng)))
        .collect();
    let (f0, f1) = config.financial_years;
    let per_firm: Vec<(Vec<FinancialRow>, FirmTruth)> = (0..config.firms)
        .into_par_iter()
        .map(|f| {
            let mut r = rng(seed, STREAM_GROWTH + f as u64);
            let size = 16.0 + normal(&mut r);
            let mut revenue = BTreeMap::new();
            for t in f0..=t_star {
                revenue.insert(t, round_sig((size + 0.1 * normal(&mut r)).exp()));
            }
            let base: f64 = (t_star - w + 1..=t_star).map(|t| revenue[&t]).sum::<f64>() / window as f64;
            let section = sectors.partition.firm_label(&firm_ids[f]).filter(|&s| s != crate::blocks::RESIDUAL).map(|s| s as u8);
            let smoothed = |v: Variable| panel.smoothed(v, f, t_star, window);
            let terms = [
                smoothed(Variable::Expy).map(|x| config.beta.expy * x),
                smoothed(Variable::DOut).filter(|&d| d > 0.0).map(|d| config.beta.log_d_out * d.ln()),
                smoothed(Variable::DIn).filter(|&d| d > 0.0).map(|d| config.beta.log_d_in * d.ln()),
                Some(config.beta.log_revenue * base.ln()),
                section.map(|s| sector_effects[&s]),
            ];
            let error = config.noise * normal(&mut r);
            let defined = terms.iter().all(Option::is_some);
            let g = config.beta.intercept + terms.iter().flatten().sum::<f64>() + error;
            let ramp_end = t_star + dt - w + 1;
            for t in t_star + 1..=f1 {
                let step = if t >= ramp_end { 1.0 } else { f64::from(t - t_star) / f64::from(ramp_end - t_star) };
                revenue.insert(t, round_sig(base * (g * step).exp()));
            }
            let margin = 0.04 + 0.03 * normal(&mut r);
            let staff = (size.exp() / 2e5).max(1.0);
            let mut rows = Vec::new();
            for (&t, &o) in &revenue {
                let employees = (staff * (0.05 * normal(&mut r)).exp()).round().max(1.0) as u32;
                let net = round_sig(o * (margin + 0.02 * normal(&mut r)));
                let missing = r.random::<f64>() < config.missing_financial_rate;
                if !missing {
                    rows.push(FinancialRow {
                        firm_id: firm_ids[f].clone(),
                        year: t,
                        employees: Some(employees),
                        operating_revenue: Some(o),
                        net_income: Some(net),
                    });
                }
            }
            let truth = FirmTruth {
                firm_id: firm_ids[f].clone(),
                block: planted.firm_labels[f],
                section,
                growth: defined.then_some(g),
            };
            (rows, truth)
        })
        .collect();
    let mut fin_rows = Vec::new();
    let mut firm_truth = Vec::with_capacity(config.firms);
    for (rows, t) in per_firm {
        fin_rows.extend(rows);
        firm_truth.push(t);
    }
    let financials = FinancialPanel::from_rows(fin_rows)?;

    let (_, hs4_binary) = aggregate_graph(&exports, config.export_years, Resolution::Hs4, &hs_map, config.indicators.rca_threshold)?;
    let hs4_graph = BipartiteGraph::from_binary(&hs4_binary);
    let heading_block: BTreeMap<&str, u32> = products.iter().map(|p| (p.hs4.as_str(), p.block)).collect();
    let firm_block: BTreeMap<&str, u32> = firm_ids.iter().map(String::as_str).zip(planted.firm_labels.iter().copied()).collect();
    let planted_modularity_hs4 = bipartite_modularity(
        &hs4_graph,
        &hs4_graph.firms().iter().map(|f| firm_block[f.as_str()]).collect::<Vec<_>>(),
        &hs4_graph.products().iter().map(|p| heading_block[p.as_str()]).collect::<Vec<_>>(),
    )?;

    Ok(SynthDataset {
        exports,
        financials,
        gdp,
        world_trade,
        hs_map,
        truth: Truth {
            config: config.clone(),
            beta: config.beta,
            sector_effects,
            expected_modularity: expected_planted_modularity(&firm_sizes, &product_sizes, config.p_in, config.p_out),
            planted_modularity_hs4,
            firms: firm_truth,
            products,
        },
    })
}

/// Rounds to 10 significant digits to keep the written tables compact.
fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.9e}").parse().unwrap_or(v)
}

pub const EXPORTS_FILE: &str = "exports.csv";
pub const FINANCIALS_FILE: &str = "financials.csv";
pub const GDP_FILE: &str = "gdp.csv";
pub const WORLD_TRADE_FILE: &str = "world_trade.csv";
pub const HS_MAP_FILE: &str = "hs_map.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes the five input tables with default schemas plus `truth.json`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.exports.write_csv(&dir.join(EXPORTS_FILE), &TableSchema::default())?;
    data.financials.write_csv(&dir.join(FINANCIALS_FILE), &TableSchema::default())?;
    data.gdp.write_csv(&dir.join(GDP_FILE), &TableSchema::default())?;
    data.world_trade.write_csv(&dir.join(WORLD_TRADE_FILE), &TableSchema::default())?;
    data.hs_map.write_csv(&dir.join(HS_MAP_FILE), &TableSchema::default())?;
    let path = dir.join(TRUTH_FILE);
    let json = serde_json::to_string_pretty(&data.truth).map_err(|e| Error::compute(MODULE, e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_sizes_split_evenly() {
        assert_eq!(block_sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(block_sizes(7, 7), vec![1; 7]);
    }

    #[test]
    fn home_sections_cover_all_sections_once() {
        let mut all: Vec<u8> = (0..7).flat_map(|b| home_sections(b, 7)).collect();
        all.sort();
        assert_eq!(all, (1..=21).collect::<Vec<u8>>());
        assert_eq!(home_sections(0, 7), vec![1, 2, 3]);
    }

    #[test]
    fn expected_modularity_of_disjoint_blocks() {
        // Two equal disjoint complete blocks: 1 − 2·(1/2)² = 0.5.
        assert!((expected_planted_modularity(&[5, 5], &[4, 4], 1.0, 0.0) - 0.5).abs() < 1e-12);
        // Seven equal disjoint blocks: 1 − 1/7.
        let q = expected_planted_modularity(&[10; 7], &[6; 7], 0.3, 0.0);
        assert!((q - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_inter_block_probability_keeps_links_inside() {
        let g = planted_graph(&[20, 20, 20], &[10, 10, 10], 0.4, 0.0, 3, true);
        assert!(g.edges.iter().all(|&(f, p)| g.firm_labels[f as usize] == g.product_labels[p as usize]));
    }

    #[test]
    fn planted_graph_is_deterministic() {
        let a = planted_graph(&[30, 30], &[15, 15], 0.3, 0.05, 11, false);
        let b = planted_graph(&[30, 30], &[15, 15], 0.3, 0.05, 11, false);
        let c = planted_graph(&[30, 30], &[15, 15], 0.3, 0.05, 12, false);
        assert_eq!(a, b);
        assert_ne!(a.edges, c.edges);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_p = SynthConfig { p_in: 1.5, ..SynthConfig::default() };
        assert!(bad_p.validate().is_err());
        let too_many_blocks = SynthConfig { firms: 5, ..SynthConfig::default() };
        assert!(too_many_blocks.validate().is_err());
        let late = SynthConfig {
            financial_years: (2009, 2018),
            ..SynthConfig::default()
        };
        assert!(late.validate().is_err());
        assert!(SynthConfig::preset("huge").is_err());
        for p in SynthConfig::PRESETS {
            SynthConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn round_sig_keeps_ten_digits() {
        assert_eq!(round_sig(1234.567891234), 1234.567891);
        assert_eq!(round_sig(0.0), 0.0);
    }
}
