//! Product income levels (logPRODY) from world trade and GDP per capita, and
//! their export-weighted firm average (EXPY).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::GdpTable;
use crate::matrix::{rca, Csr, ExportMatrix, RcaMatrix};

const MODULE: &str = "prody-expy";

/// Mean and population standard deviation used to standardize a score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Standardizes values with the population standard deviation.
pub fn standardize(values: &[f64]) -> Result<(Vec<f64>, Normalization)> {
    if values.len() < 2 {
        return Err(Error::compute(MODULE, "z-score needs at least two values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::compute(
            MODULE,
            "z-score undefined: values have zero standard deviation",
        ));
    }
    let norm = Normalization { mean, std };
    Ok((values.iter().map(|&x| norm.apply(x)).collect(), norm))
}

/// Per-product score with optional standardized column.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductScores {
    products: Vec<String>,
    raw: Vec<f64>,
    standardized: Option<(Vec<f64>, Normalization)>,
    excluded: Vec<String>,
}

impl ProductScores {
    pub fn new(products: Vec<String>, raw: Vec<f64>) -> Result<Self> {
        if products.len() != raw.len() {
            return Err(Error::compute(MODULE, "score and product counts differ"));
        }
        Ok(ProductScores {
            products,
            raw,
            standardized: None,
            excluded: Vec::new(),
        })
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Standardized scores, once [`zscore`] has run.
    pub fn z(&self) -> Option<&[f64]> {
        self.standardized.as_ref().map(|(v, _)| v.as_slice())
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.standardized.as_ref().map(|(_, n)| *n)
    }

    /// Products left without a score (no exporter mass).
    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }

    /// Standardized score when available, raw otherwise.
    pub fn value_of(&self, product: &str) -> Option<f64> {
        let i = self.products.binary_search_by(|p| p.as_str().cmp(product)).ok()?;
        Some(self.z().map_or(self.raw[i], |z| z[i]))
    }

    fn lookup(&self) -> HashMap<&str, f64> {
        let vals = self.z().unwrap_or(&self.raw);
        self.products
            .iter()
            .map(String::as_str)
            .zip(vals.iter().copied())
            .collect()
    }

    /// Writes `code, <raw>, <z>` with the given column names.
    pub fn write_csv(&self, path: &Path, header: [&str; 3]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e| Error::csv(path, e);
        w.write_record(header).map_err(io)?;
        for (i, p) in self.products.iter().enumerate() {
            let z = self.z().map(|z| z[i].to_string()).unwrap_or_default();
            w.write_record([p.as_str(), &self.raw[i].to_string(), &z])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// RCA-weighted mean of exporters' log GDP per capita, per product.
///
/// Products whose RCA column sums to zero are excluded with a warning.
/// Every country row that carries RCA values must have a GDP entry.
pub fn log_prody(country_rca: &RcaMatrix, gdp: &GdpTable) -> Result<ProductScores> {
    let data = country_rca.data();
    let mut log_gdp = Vec::with_capacity(data.n_rows());
    for (r, country) in country_rca.rows().iter().enumerate() {
        let has_values = !data.row(r).0.is_empty();
        match gdp.ln(country) {
            Some(v) => log_gdp.push(v),
            None if has_values => {
                return Err(Error::Validation(format!("no GDP per capita for country {country}")))
            }
            None => log_gdp.push(0.0),
        }
    }
    let mut num = vec![0.0; data.n_cols()];
    let mut den = vec![0.0; data.n_cols()];
    for (r, c, v) in data.iter() {
        num[c] += v * log_gdp[r];
        den[c] += v;
    }
    let mut products = Vec::new();
    let mut raw = Vec::new();
    let mut excluded = Vec::new();
    for (c, code) in country_rca.cols().iter().enumerate() {
        if den[c] > 0.0 {
            products.push(code.clone());
            raw.push(num[c] / den[c]);
        } else {
            excluded.push(code.clone());
        }
    }
    if !excluded.is_empty() {
        log::warn!("log_prody: {} products have no exporter mass", excluded.len());
    }
    Ok(ProductScores {
        products,
        raw,
        standardized: None,
        excluded,
    })
}

/// Adds the standardized column (population standard deviation).
pub fn zscore(mut scores: ProductScores) -> Result<ProductScores> {
    let (z, norm) = standardize(&scores.raw)?;
    scores.standardized = Some((z, norm));
    Ok(scores)
}

/// Weighting of products in a firm average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpyWeights {
    /// Export volume.
    #[default]
    Volume,
    /// Firm-level RCA computed on the firm × product matrix.
    Rca,
}

/// Per-firm weighted product average, `None` where a firm has no scored
/// weight. `coverage` is the share of the firm's weight that was scored.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmScores {
    pub firms: Vec<String>,
    pub values: Vec<Option<f64>>,
    pub coverage: Vec<f64>,
}

impl FirmScores {
    pub fn get(&self, firm: usize) -> Option<f64> {
        self.values[firm]
    }
}

/// Weighted mean of column scores per row; unscored columns are left out of
/// both numerator and denominator.
pub(crate) fn weighted_row_means(
    rows: &[String],
    weights: &Csr,
    col_scores: &[Option<f64>],
) -> FirmScores {
    let mut values = Vec::with_capacity(rows.len());
    let mut coverage = Vec::with_capacity(rows.len());
    for r in 0..weights.n_rows() {
        let (idx, w) = weights.row(r);
        let (mut num, mut den, mut total) = (0.0, 0.0, 0.0);
        for (&c, &w) in idx.iter().zip(w) {
            total += w;
            if let Some(s) = col_scores[c as usize] {
                num += w * s;
                den += w;
            }
        }
        values.push((den > 0.0).then(|| num / den));
        coverage.push(if total > 0.0 { den / total } else { 0.0 });
    }
    FirmScores {
        firms: rows.to_vec(),
        values,
        coverage,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpyTable {
    pub scores: FirmScores,
    pub mode: ExpyWeights,
}

/// Weighted mean of the firm's products' standardized logPRODY.
pub fn expy(firm_exports: &ExportMatrix, scores: &ProductScores, mode: ExpyWeights) -> Result<ExpyTable> {
    if scores.z().is_none() {
        return Err(Error::compute(MODULE, "EXPY needs standardized logPRODY scores"));
    }
    let lookup = scores.lookup();
    let col_scores: Vec<Option<f64>> = firm_exports
        .cols()
        .iter()
        .map(|p| lookup.get(p.as_str()).copied())
        .collect();
    let rca_matrix;
    let weights = match mode {
        ExpyWeights::Volume => firm_exports.data(),
        ExpyWeights::Rca => {
            rca_matrix = rca(firm_exports)?;
            rca_matrix.data()
        }
    };
    let scores = weighted_row_means(firm_exports.rows(), weights, &col_scores);
    let dropped = scores.values.iter().filter(|v| v.is_none()).count();
    if dropped > 0 {
        log::debug!("expy: {dropped} firms without scored exports");
    }
    Ok(ExpyTable { scores, mode })
}
