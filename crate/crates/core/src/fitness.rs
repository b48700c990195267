//! Fitness–Complexity iteration, basket average complexity and the Pearson
//! correlation used for diagnostics.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{BinaryMatrix, ExportMatrix};
use crate::prody::{standardize, weighted_row_means, FirmScores, Normalization};

const MODULE: &str = "fitness-complexity";

/// Converged (or capped) Fitness–Complexity fixed point over the rows and
/// products that have at least one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessResult {
    pub rows: Vec<String>,
    pub products: Vec<String>,
    pub fitness: Vec<f64>,
    pub complexity: Vec<f64>,
    pub iterations: usize,
    /// Largest relative change in the last iteration.
    pub residual: f64,
    pub converged: bool,
    pub dropped_rows: Vec<String>,
    pub dropped_products: Vec<String>,
}

/// Both adjacency directions of a binary matrix with empty rows and columns
/// removed.
struct Adjacency {
    rows: Vec<Vec<u32>>,
    cols: Vec<Vec<u32>>,
}

fn mean_one(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x /= mean);
}

fn step(adj: &Adjacency, fitness: &[f64], complexity: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut f: Vec<f64> = adj
        .rows
        .par_iter()
        .map(|row| row.iter().map(|&p| complexity[p as usize]).sum())
        .collect();
    let mut q: Vec<f64> = adj
        .cols
        .par_iter()
        .map(|col| 1.0 / col.iter().map(|&r| 1.0 / fitness[r as usize]).sum::<f64>())
        .collect();
    mean_one(&mut f);
    mean_one(&mut q);
    (f, q)
}

fn max_relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| ((b - a) / a).abs())
        .fold(0.0, f64::max)
}

/// Iterates `F̃_r = Σ_p M_rp Q_p`, `Q̃_p = 1 / Σ_r M_rp / F_r` from a uniform
/// start, normalizing both to mean 1, until the largest relative change of
/// any value drops below `tol`.
pub fn fitness_complexity(binary: &BinaryMatrix, tol: f64, max_iter: usize) -> Result<FitnessResult> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Config("fitness tolerance and iteration cap must be positive".into()));
    }
    // Removing empty columns cannot empty a row, so one pass each suffices.
    let keep_rows: Vec<usize> = (0..binary.n_rows()).filter(|&r| !binary.row(r).is_empty()).collect();
    let degrees = binary.col_degrees();
    let keep_cols: Vec<usize> = (0..binary.n_cols()).filter(|&c| degrees[c] > 0).collect();
    if keep_rows.is_empty() {
        return Err(Error::compute(MODULE, "binary matrix has no entries"));
    }
    let dropped_rows: Vec<String> = (0..binary.n_rows())
        .filter(|&r| binary.row(r).is_empty())
        .map(|r| binary.rows()[r].clone())
        .collect();
    let dropped_products: Vec<String> = (0..binary.n_cols())
        .filter(|&c| degrees[c] == 0)
        .map(|c| binary.cols()[c].clone())
        .collect();
    if !dropped_rows.is_empty() || !dropped_products.is_empty() {
        log::warn!(
            "fitness: dropping {} empty rows and {} empty products",
            dropped_rows.len(),
            dropped_products.len()
        );
    }
    let m = binary.select(&keep_rows, &keep_cols);
    let mut cols = vec![Vec::new(); m.n_cols()];
    let rows: Vec<Vec<u32>> = (0..m.n_rows())
        .map(|r| {
            for &c in m.row(r) {
                cols[c as usize].push(r as u32);
            }
            m.row(r).to_vec()
        })
        .collect();
    let adj = Adjacency { rows, cols };

    let mut fitness = vec![1.0; m.n_rows()];
    let mut complexity = vec![1.0; m.n_cols()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let (f, q) = step(&adj, &fitness, &complexity);
        residual = max_relative_change(&fitness, &f).max(max_relative_change(&complexity, &q));
        fitness = f;
        complexity = q;
        iterations += 1;
        if residual < tol {
            break;
        }
    }
    let converged = residual < tol;
    if !converged {
        log::warn!("fitness: no convergence after {max_iter} iterations, residual {residual:e}");
    }
    Ok(FitnessResult {
        rows: m.rows().to_vec(),
        products: m.cols().to_vec(),
        fitness,
        complexity,
        iterations,
        residual,
        converged,
        dropped_rows,
        dropped_products,
    })
}

/// One more application of the map to a result, for fixed-point checks.
pub fn fitness_step(binary: &BinaryMatrix, result: &FitnessResult) -> Result<(Vec<f64>, Vec<f64>)> {
    if binary.rows() != result.rows.as_slice() || binary.cols() != result.products.as_slice() {
        return Err(Error::Validation("matrix does not match the fitness result".into()));
    }
    let mut cols = vec![Vec::new(); binary.n_cols()];
    let rows = (0..binary.n_rows())
        .map(|r| {
            for &c in binary.row(r) {
                cols[c as usize].push(r as u32);
            }
            binary.row(r).to_vec()
        })
        .collect();
    Ok(step(&Adjacency { rows, cols }, &result.fitness, &result.complexity))
}

/// How product complexity enters the firm average, before z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityTransform {
    #[default]
    Log,
    Raw,
}

/// Standardized (transformed) product complexity.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductComplexity {
    pub products: Vec<String>,
    pub raw: Vec<f64>,
    pub z: Vec<f64>,
    pub normalization: Normalization,
    pub transform: ComplexityTransform,
}

impl ProductComplexity {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e| Error::csv(path, e);
        let z_name = match self.transform {
            ComplexityTransform::Log => "logQ_z",
            ComplexityTransform::Raw => "Q_z",
        };
        w.write_record(["hs6", "Q_raw", z_name]).map_err(io)?;
        for i in 0..self.products.len() {
            w.write_record([self.products[i].as_str(), &self.raw[i].to_string(), &self.z[i].to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, product: &str) -> Option<f64> {
        let i = self.products.iter().position(|p| p == product)?;
        Some(self.z[i])
    }
}

pub fn product_complexity(result: &FitnessResult, transform: ComplexityTransform) -> Result<ProductComplexity> {
    let transformed: Vec<f64> = match transform {
        ComplexityTransform::Log => result.complexity.iter().map(|q| q.ln()).collect(),
        ComplexityTransform::Raw => result.complexity.clone(),
    };
    if transformed.iter().any(|v| !v.is_finite()) {
        return Err(Error::compute(MODULE, "complexity underflowed to zero"));
    }
    let (z, normalization) = standardize(&transformed)?;
    Ok(ProductComplexity {
        products: result.products.clone(),
        raw: result.complexity.clone(),
        z,
        normalization,
        transform,
    })
}

/// Export-volume-weighted mean of standardized product complexity per firm.
/// Products without a score are left out; firms with none get `None`.
pub fn avg_complexity(firm_exports: &ExportMatrix, complexity: &ProductComplexity) -> FirmScores {
    let lookup: HashMap<&str, f64> = complexity
        .products
        .iter()
        .map(String::as_str)
        .zip(complexity.z.iter().copied())
        .collect();
    let col_scores: Vec<Option<f64>> = firm_exports
        .cols()
        .iter()
        .map(|p| lookup.get(p.as_str()).copied())
        .collect();
    let scores = weighted_row_means(firm_exports.rows(), firm_exports.data(), &col_scores);
    let dropped = scores.values.iter().filter(|v| v.is_none()).count();
    if dropped > 0 {
        log::warn!("avg_complexity: {dropped} firms export no scored product");
    }
    scores
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::compute(MODULE, "correlation needs two series of equal length, at least 3"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::compute(MODULE, "correlation undefined for a constant series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
