//! End-to-end run from a TOML config: ingest, blocks, indicators,
//! regressions and figure data, written atomically into one output
//! directory with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{block_composition, write_composition_csv, BrimConfig, RESIDUAL};
use crate::econometrics::{
    backward_mean, estimate, growth, regression_table, write_results_csv, write_summary_csv, Covariate, Dependent,
    RegressionResult, RegressionSpec, Timing, Variable, VariablePanel, ZeroDiversification,
};
use crate::error::{Error, Result};
use crate::figures::{emit_heatmap, emit_nonparametric_curve, Axis};
use crate::indicators::{
    detect_blocks, fill_panel, firm_sectors, product_similarity, product_tables, write_indicators_csv, year_indicators,
    IndicatorSettings,
};
use crate::ingest::{
    filter_persistent_firms, load_exports, load_financials, load_gdp, load_hs_map, load_world_trade, ExportColumns,
    FinancialColumns, GdpColumns, HsMapColumns, LoadReport, TableSchema, WorldTradeColumns,
};
use crate::matrix::Resolution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub exports: PathBuf,
    pub financials: PathBuf,
    pub gdp: PathBuf,
    pub world_trade: PathBuf,
    pub hs_map: PathBuf,
}

impl InputPaths {
    fn iter(&self) -> [(&'static str, &Path); 5] {
        [
            ("exports", &self.exports),
            ("financials", &self.financials),
            ("gdp", &self.gdp),
            ("world_trade", &self.world_trade),
            ("hs_map", &self.hs_map),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schemas {
    pub exports: TableSchema<ExportColumns>,
    pub financials: TableSchema<FinancialColumns>,
    pub gdp: TableSchema<GdpColumns>,
    pub world_trade: TableSchema<WorldTradeColumns>,
    pub hs_map: TableSchema<HsMapColumns>,
}

/// Inclusive year coverage of the export and financial tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Years {
    pub exports: (i32, i32),
    pub financials: (i32, i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlocksConfig {
    /// Product resolution of the graph handed to BRIM.
    pub resolution: Resolution,
    pub brim: BrimConfig,
}

impl Default for BlocksConfig {
    fn default() -> Self {
        BlocksConfig {
            resolution: Resolution::Hs4,
            brim: BrimConfig::default(),
        }
    }
}

/// Models printed side by side in one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub id: String,
    pub title: String,
    pub models: Vec<RegressionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub tables: Vec<TableSpec>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        use Covariate::*;
        let base = [LogRevenue, LogCoherence, Expy];
        let with = |extra: &[Covariate]| base.iter().chain(extra).copied().collect::<Vec<_>>();
        let growth = |id: &str, covariates: Vec<Covariate>| RegressionSpec {
            id: id.into(),
            dependent: Dependent::Growth,
            covariates,
            sector_dummies: true,
            zero_diversification: ZeroDiversification::Drop,
        };
        RegressionConfig {
            tables: vec![
                TableSpec {
                    id: "main".into(),
                    title: "Export basket and performance".into(),
                    models: RegressionSpec::pair("main", &with(&[LogDOut, LogDIn])).to_vec(),
                },
                TableSpec {
                    id: "blocks_vs_sections".into(),
                    title: "Diversification by section and by block".into(),
                    models: vec![
                        growth("sections_growth", with(&[LogSectionOut, LogSectionIn])),
                        growth("blocks_growth", with(&[LogDOut, LogDIn])),
                    ],
                },
                TableSpec {
                    id: "complexity".into(),
                    title: "EXPY and average complexity".into(),
                    models: RegressionSpec::pair("complexity", &with(&[AvgComplexity, LogDOut, LogDIn])).to_vec(),
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiguresConfig {
    pub heatmap_bins: usize,
    /// Gaussian filter width in cells.
    pub sigma: f64,
    pub curve_points: usize,
    /// Kernel bandwidth of the diversification curve; Silverman's rule when
    /// absent.
    pub bandwidth: Option<f64>,
}

impl Default for FiguresConfig {
    fn default() -> Self {
        FiguresConfig {
            heatmap_bins: 30,
            sigma: 3.0,
            curve_points: crate::figures::DEFAULT_GRID_POINTS,
            bandwidth: None,
        }
    }
}

/// Everything a run needs. Relative paths are resolved against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    pub inputs: InputPaths,
    #[serde(default)]
    pub schemas: Schemas,
    pub years: Years,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub indicators: IndicatorSettings,
    #[serde(default)]
    pub blocks: BlocksConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub figures: FiguresConfig,
    /// Also write the product similarity matrix (large at full scale).
    #[serde(default)]
    pub write_similarity: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut config.output_dir);
        for p in [
            &mut config.inputs.exports,
            &mut config.inputs.financials,
            &mut config.inputs.gdp,
            &mut config.inputs.world_trade,
            &mut config.inputs.hs_map,
        ] {
            resolve(p);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Config for a directory written by [`crate::synth::write_dataset`].
    pub fn for_synthetic(dir: &Path, config: &crate::synth::SynthConfig, output_dir: PathBuf) -> Self {
        use crate::synth::*;
        RunConfig {
            output_dir,
            threads: None,
            inputs: InputPaths {
                exports: dir.join(EXPORTS_FILE),
                financials: dir.join(FINANCIALS_FILE),
                gdp: dir.join(GDP_FILE),
                world_trade: dir.join(WORLD_TRADE_FILE),
                hs_map: dir.join(HS_MAP_FILE),
            },
            schemas: Schemas::default(),
            years: Years {
                exports: config.export_years,
                financials: config.financial_years,
            },
            timing: config.timing,
            indicators: config.indicators.clone(),
            blocks: BlocksConfig {
                resolution: Resolution::Hs4,
                brim: BrimConfig {
                    seed: config.seed,
                    ..BrimConfig::default()
                },
            },
            regression: RegressionConfig::default(),
            figures: FiguresConfig::default(),
            write_similarity: false,
        }
    }

    /// Checks everything that can be checked without reading the inputs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in self.inputs.iter() {
            if !p.is_file() {
                return bad(format!("{name} input {} does not exist", p.display()));
            }
        }
        let Timing { t_star, dt, window } = self.timing;
        let w = window as i32;
        let (e0, e1) = self.years.exports;
        let (f0, f1) = self.years.financials;
        if e0 > e1 || f0 > f1 {
            return bad("year ranges must be non-empty".into());
        }
        if window == 0 || dt <= 0 {
            return bad("window and horizon must be positive".into());
        }
        if t_star - dt < e0 || t_star > e1 {
            return bad(format!("t* = {t_star} with Δt = {dt} needs export years covering {}..={t_star}, have {e0}..={e1}", t_star - dt));
        }
        if t_star - w + 1 < e0 {
            return bad(format!("the {window}-year window at t* = {t_star} starts before {e0}"));
        }
        if t_star - w + 1 < f0 || t_star + dt > f1 {
            return bad(format!(
                "t* + Δt = {} must lie inside the financial years {f0}..={f1}, window included",
                t_star + dt
            ));
        }
        if !(self.indicators.rca_threshold > 0.0) {
            return bad("rca_threshold must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.indicators.similarity_cutoff) {
            return bad("similarity_cutoff must lie in [0, 1]".into());
        }
        if self.blocks.brim.restarts == 0 {
            return bad("BRIM needs at least one restart".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for table in &self.regression.tables {
            if table.models.is_empty() {
                return bad(format!("table {} has no models", table.id));
            }
            for m in &table.models {
                if !ids.insert(m.id.as_str()) {
                    return bad(format!("duplicate model id {}", m.id));
                }
                if m.covariates.is_empty() {
                    return bad(format!("model {} has no covariates", m.id));
                }
            }
        }
        if self.figures.heatmap_bins == 0 || self.figures.curve_points < 2 || !(self.figures.sigma >= 0.0) {
            return bad("figure settings need bins ≥ 1, curve_points ≥ 2 and sigma ≥ 0".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }
}

pub const SYNTH_RUN_FILE: &str = "run.toml";

/// Generates a synthetic economy into `dir` together with a run config that
/// points at it and writes to `dir/out`. Returns the dataset and the config
/// path.
pub fn synthesize(dir: &Path, config: &crate::synth::SynthConfig) -> Result<(crate::synth::SynthDataset, PathBuf)> {
    let data = crate::synth::generate(config)?;
    crate::synth::write_dataset(dir, &data)?;
    let abs = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
    let run = RunConfig::for_synthetic(&abs, config, abs.join("out"));
    let path = dir.join(SYNTH_RUN_FILE);
    fs::write(&path, run.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok((data, path))
}

/// Last stage a run executes; earlier stages always run first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Blocks,
    Indicators,
    Regress,
    Figures,
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub results: Vec<RegressionResult>,
    pub manifest: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
const STAGING_DIR: &str = ".staging";

/// Holds the output-directory lock; removes staging and lock on drop.
struct OutputGuard {
    dir: PathBuf,
    staging: PathBuf,
}

impl OutputGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Validation(format!(
                        "output directory {} is locked by another run (remove {} if stale)",
                        dir.display(),
                        lock.display()
                    ))
                } else {
                    Error::io(&lock, e)
                }
            })?;
        let staging = dir.join(STAGING_DIR);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(OutputGuard {
            dir: dir.to_path_buf(),
            staging,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    fn commit(&self, files: &[String]) -> Result<()> {
        for f in files {
            let from = self.staging.join(f);
            let to = self.dir.join(f);
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        Ok(())
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.staging);
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn load_counts(r: &LoadReport) -> serde_json::Value {
    serde_json::json!({
        "rows": r.rows,
        "accepted": r.accepted,
        "rejected": r.rejected.len(),
        "merged_duplicates": r.merged_duplicates,
    })
}

fn json_err(e: serde_json::Error) -> Error {
    Error::compute("pipeline-cli", e.to_string())
}

/// Runs every stage up to and including `until`.
pub fn run_pipeline(config: &RunConfig, until: Stage) -> Result<RunReport> {
    config.validate()?;
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| run_stages(config, until)),
        None => run_stages(config, until),
    }
}

fn run_stages(config: &RunConfig, until: Stage) -> Result<RunReport> {
    let guard = OutputGuard::acquire(&config.output_dir)?;
    let mut files: Vec<String> = Vec::new();
    let mut manifest = serde_json::Map::new();
    let mut summary: Vec<(String, String)> = Vec::new();
    let emit = |name: &str, files: &mut Vec<String>| {
        files.push(name.to_string());
        guard.path(name)
    };

    manifest.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    manifest.insert("stage".into(), serde_json::to_value(until).map_err(json_err)?);
    manifest.insert("config".into(), serde_json::to_value(config).map_err(json_err)?);
    let mut digests = serde_json::Map::new();
    for (name, p) in config.inputs.iter() {
        digests.insert(name.into(), serde_json::json!({ "path": p, "sha256": sha256_file(p)? }));
    }
    manifest.insert("inputs".into(), digests.into());
    manifest.insert("seeds".into(), serde_json::json!({ "brim": config.blocks.brim.seed }));

    // Ingest.
    log::info!("ingest");
    let s = &config.schemas;
    let (raw_exports, export_report) = load_exports(&config.inputs.exports, &s.exports)?;
    let (financials, fin_report) = load_financials(&config.inputs.financials, &s.financials)?;
    let (gdp, gdp_report) = load_gdp(&config.inputs.gdp, &s.gdp)?;
    let (world, world_report) = load_world_trade(&config.inputs.world_trade, &s.world_trade)?;
    let (hs_map, hs_report) = load_hs_map(&config.inputs.hs_map, &s.hs_map)?;
    hs_map.check_covers(raw_exports.products())?;
    hs_map.check_covers(world.products())?;
    let exports = filter_persistent_firms(&raw_exports, config.years.exports)?;
    if exports.is_empty() {
        return Err(Error::Validation(format!(
            "no firm exports in every year of {}..={}",
            config.years.exports.0, config.years.exports.1
        )));
    }
    let Timing { t_star, dt, window } = config.timing;
    let w = window as i32;
    let fin_years: std::collections::BTreeSet<i32> = financials.records().iter().map(|r| r.year).collect();
    if let Some(missing) = (t_star - w + 1..=t_star + dt).find(|y| !fin_years.contains(y)) {
        return Err(Error::Validation(format!("financial data has no records for {missing}, needed by t* + Δt")));
    }
    let mut rejections = csv::Writer::from_path(emit("rejections.csv", &mut files)).map_err(|e| Error::csv("rejections.csv", e))?;
    rejections.write_record(["table", "line", "reason"]).map_err(|e| Error::csv("rejections.csv", e))?;
    for (table, report) in [
        ("exports", &export_report),
        ("financials", &fin_report),
        ("gdp", &gdp_report),
        ("world_trade", &world_report),
        ("hs_map", &hs_report),
    ] {
        for r in &report.rejected {
            rejections
                .write_record([table, &r.line.to_string(), &r.reason])
                .map_err(|e| Error::csv("rejections.csv", e))?;
        }
    }
    rejections.flush().map_err(|e| Error::io("rejections.csv", e))?;
    manifest.insert(
        "ingest".into(),
        serde_json::json!({
            "exports": load_counts(&export_report),
            "financials": load_counts(&fin_report),
            "gdp": load_counts(&gdp_report),
            "world_trade": load_counts(&world_report),
            "hs_map": load_counts(&hs_report),
            "firms_loaded": raw_exports.firms().len(),
            "firms_persistent": exports.firms().len(),
            "products": exports.products().len(),
        }),
    );
    summary.push(("firms_loaded".into(), raw_exports.firms().len().to_string()));
    summary.push(("firms_persistent".into(), exports.firms().len().to_string()));
    summary.push(("products".into(), exports.products().len().to_string()));
    let mut results = Vec::new();

    if until >= Stage::Blocks {
        log::info!("blocks");
        let structure = detect_blocks(
            &exports,
            config.years.exports,
            config.blocks.resolution,
            &hs_map,
            config.indicators.rca_threshold,
            &config.blocks.brim,
        )?;
        let sectors = firm_sectors(&exports, config.years.exports, &hs_map)?;
        structure.detected.write_csv(&emit("partition.csv", &mut files))?;
        structure.hs6.write_csv(&emit("partition_hs6.csv", &mut files))?;
        sectors.partition.write_csv(&emit("sector_partition.csv", &mut files))?;
        let composition = block_composition(&structure.graph, &structure.detected, &hs_map)?;
        write_composition_csv(&emit("block_composition.csv", &mut files), &composition, &hs_map)?;
        let q = structure.detected.modularity.unwrap_or(f64::NAN);
        let info = structure.detected.info.as_ref();
        manifest.insert(
            "blocks".into(),
            serde_json::json!({
                "resolution": config.blocks.resolution,
                "graph_firms": structure.graph.n_firms(),
                "graph_products": structure.graph.n_products(),
                "graph_edges": structure.graph.n_edges(),
                "components": structure.graph.n_components(),
                "n_blocks": structure.detected.n_blocks,
                "modularity": q,
                "info": info,
                "sector_ties": sectors.ties.len(),
                "residual_firms": structure.detected.firm_labels.iter().filter(|&&l| l == RESIDUAL).count(),
            }),
        );
        summary.push(("n_blocks".into(), structure.detected.n_blocks.to_string()));
        summary.push(("modularity".into(), format!("{q:.6}")));

        if until >= Stage::Indicators {
            log::info!("indicators");
            let tables = product_tables(&world, &gdp, &config.indicators)?;
            tables
                .log_prody
                .write_csv(&emit("product_scores.csv", &mut files), ["hs6", "logprody_raw", "logprody_z"])?;
            tables.complexity.write_csv(&emit("product_complexity.csv", &mut files))?;
            let similarity = product_similarity(&exports, config.years.exports, &hs_map, &config.indicators)?;
            if config.write_similarity {
                similarity.write_csv(&emit("similarity.csv", &mut files))?;
            }
            let years: Vec<_> = (t_star - w + 1..=t_star)
                .map(|t| {
                    log::info!("indicators for {t}");
                    year_indicators(&exports, t, &structure.hs6, &sectors.partition, &tables, Some(&similarity), &config.indicators)
                })
                .collect::<Result<_>>()?;
            write_indicators_csv(&emit("indicators.csv", &mut files), &years)?;
            let mut panel = VariablePanel::new(exports.firms().names().to_vec());
            panel.add_financials(&financials);
            for (f, firm) in exports.firms().names().iter().enumerate() {
                let s = sectors.partition.firm_label(firm).filter(|&l| l != RESIDUAL);
                panel.set_section(f, s.map(|s| s as u8));
            }
            fill_panel(&mut panel, &years);
            panel.write_frame_csv(&emit("firm_frame.csv", &mut files), t_star, dt, window)?;
            manifest.insert(
                "indicators".into(),
                serde_json::json!({
                    "years": (t_star - w + 1..=t_star).collect::<Vec<_>>(),
                    "logprody_products": tables.log_prody.products().len(),
                    "logprody_excluded": tables.log_prody.excluded(),
                    "fitness_iterations": tables.fitness.iterations,
                    "fitness_residual": tables.fitness.residual,
                    "fitness_converged": tables.fitness.converged,
                    "prody_complexity_r": tables.prody_complexity_r,
                    "similarity_cutoff": similarity.cutoff(),
                    "similarity_stored": similarity.stored_entries(),
                    "similarity_max_asymmetry": similarity.max_asymmetry(),
                    "coherence_undefined_pairs": years.iter().map(|y| y.coherence.as_ref().map_or(0, |c| c.undefined_pairs)).sum::<usize>(),
                }),
            );
            if let Some(r) = tables.prody_complexity_r {
                summary.push(("prody_complexity_r".into(), format!("{r:.6}")));
            }

            if until >= Stage::Regress {
                log::info!("regressions");
                let mut text = String::new();
                let mut drops = serde_json::Map::new();
                for table in &config.regression.tables {
                    let fitted: Vec<RegressionResult> = table
                        .models
                        .iter()
                        .map(|m| estimate(&panel, m, config.timing))
                        .collect::<Result<_>>()?;
                    for r in &fitted {
                        drops.insert(
                            r.model_id.clone(),
                            serde_json::json!({
                                "observations": r.n,
                                "dropped": r.dropped.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
                            }),
                        );
                    }
                    let _ = writeln!(text, "{} ({})\n", table.title, table.id);
                    text.push_str(&regression_table(&fitted.iter().collect::<Vec<_>>()));
                    text.push('\n');
                    results.extend(fitted);
                }
                let all: Vec<&RegressionResult> = results.iter().collect();
                write_results_csv(&emit("regression_results.csv", &mut files), &all)?;
                write_summary_csv(&emit("regression_summary.csv", &mut files), &all)?;
                let path = emit("regression_tables.txt", &mut files);
                fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
                manifest.insert("regressions".into(), drops.into());

                if until >= Stage::Figures {
                    log::info!("figures");
                    let figs = figures(config, &panel, &years, &guard, &mut files)?;
                    manifest.insert("figures".into(), figs);
                }
            }
        }
    }

    let summary_path = emit("run_summary.csv", &mut files);
    let mut w = csv::Writer::from_path(&summary_path).map_err(|e| Error::csv(&summary_path, e))?;
    w.write_record(["key", "value"]).map_err(|e| Error::csv(&summary_path, e))?;
    for (k, v) in &summary {
        w.write_record([k, v]).map_err(|e| Error::csv(&summary_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&summary_path, e))?;
    let report_path = emit("report.md", &mut files);
    fs::write(&report_path, render_report(&summary, &guard)?).map_err(|e| Error::io(&report_path, e))?;

    let mut outputs = serde_json::Map::new();
    for f in &files {
        outputs.insert(f.clone(), sha256_file(&guard.path(f))?.into());
    }
    manifest.insert("outputs".into(), outputs.into());
    let manifest = serde_json::Value::Object(manifest);
    let manifest_path = emit(MANIFEST_FILE, &mut files);
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err)? + "\n";
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    guard.commit(&files)?;
    Ok(RunReport {
        output_dir: config.output_dir.clone(),
        files,
        results,
        manifest,
    })
}

/// Firm-level growth over `[t*, t*+Δt]` from smoothed revenue.
fn firm_growth(panel: &VariablePanel, f: usize, timing: Timing) -> Option<f64> {
    let s = panel.series(Variable::Revenue, f)?;
    growth(&backward_mean(s, timing.window), timing.t_star, timing.dt).ok()
}

fn figures(
    config: &RunConfig,
    panel: &VariablePanel,
    years: &[crate::indicators::YearIndicators],
    guard: &OutputGuard,
    files: &mut Vec<String>,
) -> Result<serde_json::Value> {
    let timing = config.timing;
    let Timing { t_star, window, .. } = timing;
    let fc = &config.figures;
    let n = panel.firms().len();
    let g: Vec<Option<f64>> = (0..n).map(|f| firm_growth(panel, f, timing)).collect();
    let mut out = serde_json::Map::new();
    let add = |name: &str, files: &mut Vec<String>| {
        files.push(name.to_string());
        guard.path(name)
    };

    let expy_points: Vec<(f64, f64, f64)> = (0..n)
        .filter_map(|f| {
            let x = panel.smoothed(Variable::Expy, f, t_star, window)?;
            let r = panel.smoothed(Variable::Revenue, f, t_star, window).filter(|&r| r > 0.0)?;
            Some((x, r.ln(), g[f]?))
        })
        .collect();
    if !expy_points.is_empty() {
        let grid = emit_heatmap(&expy_points, Axis::Bins(fc.heatmap_bins), Axis::Bins(fc.heatmap_bins), fc.sigma)?;
        grid.write_csv(&add("fig_expy_revenue_growth.csv", files))?;
        out.insert("expy_revenue_points".into(), expy_points.len().into());
        out.insert("expy_revenue_occupied".into(), grid.occupied().into());
    }

    let last = years.iter().find(|y| y.year == t_star);
    if let Some(y) = last {
        let div_points: Vec<(f64, f64, f64)> = y
            .firms
            .iter()
            .enumerate()
            .filter_map(|(i, firm)| {
                let f = panel.firm_index(firm)?;
                Some((f64::from(y.blocks.d_in[i]), f64::from(y.blocks.d_out[i]), g[f]?))
            })
            .collect();
        if !div_points.is_empty() {
            let grid = emit_heatmap(&div_points, Axis::Integer, Axis::Integer, fc.sigma)?;
            grid.write_csv(&add("fig_din_dout_growth.csv", files))?;
            out.insert("din_dout_points".into(), div_points.len().into());
            out.insert("din_dout_occupied".into(), grid.occupied().into());
        }
    }

    let mut excluded = 0usize;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for f in 0..n {
        let (Some(din), Some(dout), Some(gf)) = (
            panel.smoothed(Variable::DIn, f, t_star, window),
            panel.smoothed(Variable::DOut, f, t_star, window),
            g[f],
        ) else {
            continue;
        };
        if din <= 0.0 {
            excluded += 1;
            continue;
        }
        xs.push(((din + dout) / din).ln());
        ys.push(gf);
    }
    out.insert("curve_excluded_zero_d_in".into(), excluded.into());
    match emit_nonparametric_curve(&xs, &ys, fc.bandwidth, fc.curve_points) {
        Ok(curve) => {
            curve.write_csv(&add("fig_diversification_curve.csv", files))?;
            out.insert("curve_points".into(), curve.n_points.into());
            out.insert("curve_bandwidth".into(), curve.bandwidth.into());
            out.insert("curve_bandwidth_rule".into(), curve.bandwidth_rule.into());
        }
        Err(e) => {
            log::warn!("diversification curve skipped: {e}");
            out.insert("curve_skipped".into(), e.to_string().into());
        }
    }
    Ok(out.into())
}

/// Human-readable summary. Every number comes from `run_summary.csv` or
/// the regression tables file.
fn render_report(summary: &[(String, String)], guard: &OutputGuard) -> Result<String> {
    let mut s = String::from("# Run report\n\n| key | value |\n|---|---|\n");
    for (k, v) in summary {
        let _ = writeln!(s, "| {k} | {v} |");
    }
    let tables = guard.path("regression_tables.txt");
    if tables.exists() {
        let text = fs::read_to_string(&tables).map_err(|e| Error::io(&tables, e))?;
        let _ = write!(s, "\n## Regressions\n\n```\n{text}```\n");
    }
    Ok(s)
}
