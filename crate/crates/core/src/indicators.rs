//! Glue between the matrix-level modules and the regression panel: product
//! tables from world trade, the aggregate block recipe, and yearly firm
//! indicators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    block_diversification, brim, map_blocks_hs4_to_hs6, sector_partition, BipartiteGraph, BlockDiversification,
    BlockPartition, BrimConfig, SectorPartition,
};
use crate::econometrics::{Variable, VariablePanel};
use crate::error::{Error, Result};
use crate::fitness::{avg_complexity, fitness_complexity, pearson, product_complexity, ComplexityTransform, FitnessResult, ProductComplexity};
use crate::ingest::{ExportPanel, GdpTable, HsMap, WorldTrade};
use crate::matrix::{aggregate_years, binarize, rca, BinaryMatrix, ExportMatrix, Resolution};
use crate::prody::{expy, log_prody, zscore, ExpyWeights, FirmScores, ProductScores};
use crate::relatedness::{coherence, cooccurrence, sapling, CoherenceTable, SimilarityMatrix};

/// Numerical settings shared by the indicator stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorSettings {
    pub rca_threshold: f64,
    pub expy_weights: ExpyWeights,
    pub complexity_transform: ComplexityTransform,
    pub fitness_tol: f64,
    pub fitness_max_iter: usize,
    /// Similarities with `|B|` below this are not stored; 0 keeps the dense
    /// matrix.
    pub similarity_cutoff: f64,
}

impl Default for IndicatorSettings {
    fn default() -> Self {
        IndicatorSettings {
            rca_threshold: 1.0,
            expy_weights: ExpyWeights::Volume,
            complexity_transform: ComplexityTransform::Log,
            fitness_tol: 1e-8,
            fitness_max_iter: 1000,
            similarity_cutoff: 0.0,
        }
    }
}

/// Product-level scores derived from the country × product world-trade table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTables {
    pub log_prody: ProductScores,
    pub fitness: FitnessResult,
    pub complexity: ProductComplexity,
    /// Correlation between raw logPRODY and log product complexity over the
    /// products scored by both.
    pub prody_complexity_r: Option<f64>,
}

pub fn product_tables(world: &WorldTrade, gdp: &GdpTable, settings: &IndicatorSettings) -> Result<ProductTables> {
    let matrix = ExportMatrix::from_world_trade(world);
    let country_rca = rca(&matrix)?;
    let log_prody = zscore(log_prody(&country_rca, gdp)?)?;
    let binary = binarize(&country_rca, settings.rca_threshold)?;
    let fitness = fitness_complexity(&binary, settings.fitness_tol, settings.fitness_max_iter)?;
    if !fitness.converged {
        log::warn!(
            "fitness-complexity stopped after {} iterations with residual {:e}",
            fitness.iterations,
            fitness.residual
        );
    }
    let complexity = product_complexity(&fitness, settings.complexity_transform)?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (p, &q) in complexity.products.iter().zip(&complexity.raw) {
        if let Some(x) = log_prody.value_of(p) {
            a.push(x);
            b.push(q.ln());
        }
    }
    let prody_complexity_r = pearson(&a, &b).ok();
    Ok(ProductTables {
        log_prody,
        fitness,
        complexity,
        prody_complexity_r,
    })
}

/// Year-averaged, RCA-thresholded firm × product graph at the given
/// resolution.
pub fn aggregate_graph(
    panel: &ExportPanel,
    years: (i32, i32),
    resolution: Resolution,
    hs_map: &HsMap,
    threshold: f64,
) -> Result<(ExportMatrix, BinaryMatrix)> {
    let matrix = aggregate_years(panel, years, resolution, Some(hs_map))?;
    let binary = binarize(&rca(&matrix)?, threshold)?;
    Ok((matrix, binary))
}

/// Blocks found on the aggregate graph and their HS6 version.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStructure {
    pub graph: BipartiteGraph,
    pub detected: BlockPartition,
    pub hs6: BlockPartition,
}

/// Runs BRIM on the aggregate graph at `resolution` and carries the product
/// labels over to every HS6 code of the panel.
pub fn detect_blocks(
    panel: &ExportPanel,
    years: (i32, i32),
    resolution: Resolution,
    hs_map: &HsMap,
    threshold: f64,
    brim_config: &BrimConfig,
) -> Result<BlockStructure> {
    let (_, binary) = aggregate_graph(panel, years, resolution, hs_map, threshold)?;
    let graph = BipartiteGraph::from_binary(&binary);
    let detected = brim(&graph, brim_config)?;
    let hs6 = map_blocks_hs4_to_hs6(&detected, hs_map, panel.products().names())?;
    Ok(BlockStructure { graph, detected, hs6 })
}

/// Section partition from the full-range HS6 aggregate.
pub fn firm_sectors(panel: &ExportPanel, years: (i32, i32), hs_map: &HsMap) -> Result<SectorPartition> {
    sector_partition(&aggregate_years(panel, years, Resolution::Hs6, Some(hs_map))?, hs_map)
}

/// Sapling similarity over the full-range HS6 firm graph.
pub fn product_similarity(panel: &ExportPanel, years: (i32, i32), hs_map: &HsMap, settings: &IndicatorSettings) -> Result<SimilarityMatrix> {
    let (_, binary) = aggregate_graph(panel, years, Resolution::Hs6, hs_map, settings.rca_threshold)?;
    sapling(&cooccurrence(&binary), settings.similarity_cutoff)
}

/// Firm indicators of one year.
#[derive(Debug, Clone, PartialEq)]
pub struct YearIndicators {
    pub year: i32,
    pub firms: Vec<String>,
    pub expy: FirmScores,
    pub avg_complexity: FirmScores,
    pub coherence: Option<CoherenceTable>,
    pub blocks: BlockDiversification,
    pub sections: BlockDiversification,
}

/// EXPY, average complexity, coherence (when a similarity matrix is given),
/// and block / section diversification of the year's RCA > threshold matrix.
pub fn year_indicators(
    panel: &ExportPanel,
    year: i32,
    blocks: &BlockPartition,
    sectors: &BlockPartition,
    tables: &ProductTables,
    similarity: Option<&SimilarityMatrix>,
    settings: &IndicatorSettings,
) -> Result<YearIndicators> {
    let matrix = aggregate_years(panel, (year, year), Resolution::Hs6, None)?;
    let binary = binarize(&rca(&matrix)?, settings.rca_threshold)?;
    Ok(YearIndicators {
        year,
        firms: matrix.rows().to_vec(),
        expy: expy(&matrix, &tables.log_prody, settings.expy_weights)?.scores,
        avg_complexity: avg_complexity(&matrix, &tables.complexity),
        coherence: similarity.map(|s| coherence(&matrix, s)),
        blocks: block_diversification(&binary, blocks)?,
        sections: block_diversification(&binary, sectors)?,
    })
}

/// Copies yearly indicators into the regression panel by firm name.
pub fn fill_panel(panel: &mut VariablePanel, years: &[YearIndicators]) {
    for y in years {
        for (i, firm) in y.firms.iter().enumerate() {
            let Some(f) = panel.firm_index(firm) else { continue };
            let t = y.year;
            if let Some(v) = y.expy.get(i) {
                panel.insert(Variable::Expy, f, t, v);
            }
            if let Some(v) = y.avg_complexity.get(i) {
                panel.insert(Variable::AvgComplexity, f, t, v);
            }
            if let Some(v) = y.coherence.as_ref().and_then(|c| c.values[i]) {
                panel.insert(Variable::Coherence, f, t, v);
            }
            panel.insert(Variable::DIn, f, t, f64::from(y.blocks.d_in[i]));
            panel.insert(Variable::DOut, f, t, f64::from(y.blocks.d_out[i]));
            panel.insert(Variable::SectionIn, f, t, f64::from(y.sections.d_in[i]));
            panel.insert(Variable::SectionOut, f, t, f64::from(y.sections.d_out[i]));
        }
    }
}

/// Long table with one row per firm and year.
pub fn write_indicators_csv(path: &Path, years: &[YearIndicators]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e| Error::csv(path, e);
    w.write_record([
        "firm_id",
        "year",
        "expy",
        "expy_coverage",
        "avg_complexity",
        "coherence",
        "coherence_degenerate",
        "d_in",
        "d_out",
        "d_total",
        "section_in",
        "section_out",
    ])
    .map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for y in years {
        for (i, firm) in y.firms.iter().enumerate() {
            let (coh, degenerate) = match &y.coherence {
                Some(c) => (opt(c.values[i]), c.degenerate[i].to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                firm.clone(),
                y.year.to_string(),
                opt(y.expy.get(i)),
                y.expy.coverage[i].to_string(),
                opt(y.avg_complexity.get(i)),
                coh,
                degenerate,
                y.blocks.d_in[i].to_string(),
                y.blocks.d_out[i].to_string(),
                y.blocks.d_total(i).to_string(),
                y.sections.d_in[i].to_string(),
                y.sections.d_out[i].to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
