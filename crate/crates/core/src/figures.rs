//! Figure data: binned heatmaps smoothed over occupied cells, and kernel
//! regression curves.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MODULE: &str = "figures";

/// How one axis of a [`FigureGrid`] is cut into cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// `n` equal-width bins spanning the observed range.
    Bins(usize),
    /// One cell per integer value between the observed extremes.
    Integer,
}

#[derive(Debug, Clone, Copy)]
struct Binning {
    lo: f64,
    width: f64,
    n: usize,
}

impl Binning {
    fn new(axis: Axis, values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let lo = values.clone().fold(f64::INFINITY, f64::min);
        let hi = values.fold(f64::NEG_INFINITY, f64::max);
        match axis {
            Axis::Bins(0) => Err(Error::Config("heatmap axis needs at least one bin".into())),
            Axis::Bins(n) => {
                let width = if hi > lo { (hi - lo) / n as f64 } else { 1.0 };
                Ok(Binning { lo, width, n })
            }
            Axis::Integer => {
                let (lo, hi) = (lo.round(), hi.round());
                Ok(Binning {
                    lo: lo - 0.5,
                    width: 1.0,
                    n: (hi - lo) as usize + 1,
                })
            }
        }
    }

    fn index(&self, v: f64) -> usize {
        (((v - self.lo) / self.width).floor().max(0.0) as usize).min(self.n - 1)
    }

    fn edges(&self, i: usize) -> (f64, f64) {
        (self.lo + i as f64 * self.width, self.lo + (i + 1) as f64 * self.width)
    }
}

/// Binned per-cell means of a color variable. Empty cells hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureGrid {
    pub nx: usize,
    pub ny: usize,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Row-major by y, then x: cell `(ix, iy)` sits at `iy * nx + ix`.
    pub count: Vec<usize>,
    pub mean: Vec<Option<f64>>,
    pub smoothed: Vec<Option<f64>>,
    pub sigma: f64,
}

impl FigureGrid {
    pub fn cell(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn occupied(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    /// `ix,iy,x_lo,x_hi,y_lo,y_hi,count,mean,smoothed` with empty fields for
    /// unoccupied cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let io = |e| Error::csv(path, e);
        w.write_record(["ix", "iy", "x_lo", "x_hi", "y_lo", "y_hi", "count", "mean", "smoothed"])
            .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let c = self.cell(ix, iy);
                w.write_record([
                    ix.to_string(),
                    iy.to_string(),
                    self.x_edges[ix].to_string(),
                    self.x_edges[ix + 1].to_string(),
                    self.y_edges[iy].to_string(),
                    self.y_edges[iy + 1].to_string(),
                    self.count[c].to_string(),
                    opt(self.mean[c]),
                    opt(self.smoothed[c]),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Bins `(x, y, color)` points, averages the color per cell, then applies a
/// Gaussian filter of width `sigma` (in cells) normalized over occupied cells
/// only. Empty cells stay empty.
pub fn emit_heatmap(points: &[(f64, f64, f64)], x_axis: Axis, y_axis: Axis, sigma: f64) -> Result<FigureGrid> {
    if points.is_empty() {
        return Err(Error::compute(MODULE, "heatmap needs at least one point"));
    }
    if points.iter().any(|p| !(p.0.is_finite() && p.1.is_finite() && p.2.is_finite())) {
        return Err(Error::compute(MODULE, "heatmap points must be finite"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("smoothing sigma must be a finite non-negative number, got {sigma}")));
    }
    let bx = Binning::new(x_axis, points.iter().map(|p| p.0))?;
    let by = Binning::new(y_axis, points.iter().map(|p| p.1))?;
    let (nx, ny) = (bx.n, by.n);
    let mut sum = vec![0.0; nx * ny];
    let mut count = vec![0usize; nx * ny];
    for &(x, y, c) in points {
        let i = by.index(y) * nx + bx.index(x);
        sum[i] += c;
        count[i] += 1;
    }
    let mean: Vec<Option<f64>> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();

    let smoothed = if sigma == 0.0 {
        mean.clone()
    } else {
        let radius = (4.0 * sigma).ceil() as usize;
        let kernel: Vec<f64> = (0..=radius)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let mut out = vec![None; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                if mean[iy * nx + ix].is_none() {
                    continue;
                }
                let mut num = 0.0;
                let mut den = 0.0;
                for jy in iy.saturating_sub(radius)..=(iy + radius).min(ny - 1) {
                    for jx in ix.saturating_sub(radius)..=(ix + radius).min(nx - 1) {
                        if let Some(v) = mean[jy * nx + jx] {
                            let w = kernel[ix.abs_diff(jx)] * kernel[iy.abs_diff(jy)];
                            num += w * v;
                            den += w;
                        }
                    }
                }
                out[iy * nx + ix] = Some(num / den);
            }
        }
        out
    };
    Ok(FigureGrid {
        nx,
        ny,
        x_edges: (0..nx).map(|i| bx.edges(i).0).chain([bx.edges(nx - 1).1]).collect(),
        y_edges: (0..ny).map(|i| by.edges(i).0).chain([by.edges(ny - 1).1]).collect(),
        count,
        mean,
        smoothed,
        sigma,
    })
}

/// Kernel regression curve on an even grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub grid: Vec<f64>,
    pub fitted: Vec<Option<f64>>,
    pub bandwidth: f64,
    pub n_points: usize,
    pub bandwidth_rule: &'static str,
}

impl Curve {
    /// `x,fitted` rows preceded by `#` comment lines with the bandwidth and
    /// sample size.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(out, "# bandwidth={} rule={} n_points={} grid_points={}", self.bandwidth, self.bandwidth_rule, self.n_points, self.grid.len()).map_err(io)?;
        writeln!(out, "x,fitted").map_err(io)?;
        for (x, y) in self.grid.iter().zip(&self.fitted) {
            writeln!(out, "{x},{}", y.map(|v| v.to_string()).unwrap_or_default()).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

pub const DEFAULT_GRID_POINTS: usize = 100;

/// Silverman's rule: `0.9 · min(sd, IQR/1.34) · n^(−1/5)`, falling back to
/// the standard deviation when the IQR is zero.
pub fn silverman_bandwidth(x: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::compute(MODULE, "x has no variance; curve is undefined"));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (sorted.len() - 1) as f64;
        let (i, frac) = (h.floor() as usize, h.fract());
        sorted[i] + frac * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * n.powf(-0.2))
}

/// Nadaraya–Watson estimate with a Gaussian kernel on `grid_points` evenly
/// spaced values over the range of `x`. `bandwidth = None` uses
/// [`silverman_bandwidth`].
pub fn emit_nonparametric_curve(x: &[f64], y: &[f64], bandwidth: Option<f64>, grid_points: usize) -> Result<Curve> {
    if x.len() != y.len() {
        return Err(Error::compute(MODULE, "x and y differ in length"));
    }
    if x.len() < 10 {
        return Err(Error::compute(MODULE, format!("kernel curve needs at least 10 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::compute(MODULE, "curve inputs must be finite"));
    }
    if grid_points < 2 {
        return Err(Error::Config("curve grid needs at least 2 points".into()));
    }
    let silverman = silverman_bandwidth(x)?;
    let (h, rule) = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => (h, "fixed"),
        Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        None => (silverman, "silverman"),
    };
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + i as f64 * step).collect();
    let fitted = grid
        .iter()
        .map(|&g| {
            let (mut num, mut den) = (0.0, 0.0);
            for (&xi, &yi) in x.iter().zip(y) {
                let u = (xi - g) / h;
                let w = (-0.5 * u * u).exp();
                num += w * yi;
                den += w;
            }
            (den > 0.0).then(|| num / den)
        })
        .collect();
    Ok(Curve {
        grid,
        fitted,
        bandwidth: h,
        n_points: x.len(),
        bandwidth_rule: rule,
    })
}
