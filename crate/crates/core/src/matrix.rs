//! Sparse firm (or country) × product matrices: year-averaged export values,
//! Revealed Comparative Advantage and the thresholded binary matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ExportPanel, HsMap, WorldTrade};

const MODULE: &str = "trade-matrix";

/// Product resolution of a matrix's columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Hs6,
    Hs4,
}

/// Compressed sparse rows. Column indices are sorted within each row and
/// every stored value is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    /// Sums repeated cells and drops zeros.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut rows = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            debug_assert!((r as usize) < n_rows && (c as usize) < n_cols);
            if rows.last() == Some(&r) && indices.last() == Some(&c) {
                *values.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                indices.push(c);
                values.push(v);
            }
        }
        // Drop cells that summed to zero.
        let mut k = 0;
        for i in 0..values.len() {
            if values[i] > 0.0 {
                rows[k] = rows[i];
                indices[k] = indices[i];
                values[k] = values[i];
                k += 1;
            }
        }
        rows.truncate(k);
        indices.truncate(k);
        values.truncate(k);
        for &r in &rows {
            indptr[r as usize + 1] += 1;
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Csr {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, val) = self.row(r);
        idx.binary_search(&(c as u32)).map_or(0.0, |k| val[k])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cols];
        for (&c, &v) in self.indices.iter().zip(&self.values) {
            sums[c as usize] += v;
        }
        sums
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (idx, val) = self.row(r);
            idx.iter().zip(val).map(move |(&c, &v)| (r, c as usize, v))
        })
    }
}

/// Non-negative export values over (firm or country, product), with cached
/// marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    data: Csr,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    total: f64,
    years: Option<(i32, i32)>,
    resolution: Resolution,
}

impl ExportMatrix {
    pub fn new(
        rows: Vec<String>,
        cols: Vec<String>,
        triplets: Vec<(u32, u32, f64)>,
        years: Option<(i32, i32)>,
        resolution: Resolution,
    ) -> Result<Self> {
        if let Some(t) = triplets.iter().find(|t| !(t.2.is_finite() && t.2 >= 0.0)) {
            return Err(Error::compute(MODULE, format!("invalid export value {}", t.2)));
        }
        if let Some(t) = triplets
            .iter()
            .find(|t| t.0 as usize >= rows.len() || t.1 as usize >= cols.len())
        {
            return Err(Error::compute(
                MODULE,
                format!("cell ({}, {}) outside matrix shape", t.0, t.1),
            ));
        }
        let data = Csr::from_triplets(rows.len(), cols.len(), triplets);
        Ok(Self::from_csr(rows, cols, data, years, resolution))
    }

    fn from_csr(
        rows: Vec<String>,
        cols: Vec<String>,
        data: Csr,
        years: Option<(i32, i32)>,
        resolution: Resolution,
    ) -> Self {
        let row_sums = data.row_sums();
        let col_sums = data.col_sums();
        let total = row_sums.iter().sum();
        ExportMatrix {
            rows,
            cols,
            data,
            row_sums,
            col_sums,
            total,
            years,
            resolution,
        }
    }

    /// Dense constructor with generated labels `r0..`, `c0..`; convenient for
    /// small hand-built matrices.
    pub fn from_dense(values: &[Vec<f64>]) -> Result<Self> {
        let n_cols = values.first().map_or(0, Vec::len);
        let mut triplets = Vec::new();
        for (r, row) in values.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::compute(MODULE, "ragged dense matrix"));
            }
            for (c, &v) in row.iter().enumerate() {
                triplets.push((r as u32, c as u32, v));
            }
        }
        Self::new(
            (0..values.len()).map(|r| format!("r{r}")).collect(),
            (0..n_cols).map(|c| format!("c{c}")).collect(),
            triplets,
            None,
            Resolution::Hs6,
        )
    }

    /// Country × HS6 matrix of a world-trade table.
    pub fn from_world_trade(table: &WorldTrade) -> Self {
        let data = Csr::from_triplets(
            table.countries().len(),
            table.products().len(),
            table.cells().to_vec(),
        );
        Self::from_csr(
            table.countries().names().to_vec(),
            table.products().names().to_vec(),
            data,
            None,
            Resolution::Hs6,
        )
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn data(&self) -> &Csr {
        &self.data
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn years(&self) -> Option<(i32, i32)> {
        self.years
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    /// Same matrix with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let triplets = self
            .data
            .iter()
            .map(|(r, c, v)| (r as u32, c as u32, v * factor))
            .collect();
        Self::new(
            self.rows.clone(),
            self.cols.clone(),
            triplets,
            self.years,
            self.resolution,
        )
    }
}

/// Mean yearly export value per (firm, product) over an inclusive year range.
///
/// Years without a record count as zero in the mean. Rows are all firms of
/// the panel; columns are all of its HS6 codes, or their distinct HS4
/// headings when `resolution` is [`Resolution::Hs4`].
pub fn aggregate_years(
    panel: &ExportPanel,
    years: (i32, i32),
    resolution: Resolution,
    hs_map: Option<&HsMap>,
) -> Result<ExportMatrix> {
    let (first, last) = years;
    if first > last {
        return Err(Error::Validation(format!("empty year range {first}..={last}")));
    }
    let n_years = (last - first + 1) as f64;

    let (cols, product_col): (Vec<String>, Vec<u32>) = match resolution {
        Resolution::Hs6 => (
            panel.products().names().to_vec(),
            (0..panel.products().len() as u32).collect(),
        ),
        Resolution::Hs4 => {
            let map = hs_map.ok_or_else(|| {
                Error::compute(MODULE, "HS4 aggregation requires an HS map")
            })?;
            let mut headings = BTreeMap::new();
            let mut hs4_of = Vec::with_capacity(panel.products().len());
            for code in panel.products().names() {
                let hs4 = map.hs4(code).ok_or_else(|| {
                    Error::compute(MODULE, format!("HS6 code {code} missing from the HS map"))
                })?;
                headings.entry(hs4.to_string()).or_insert(0u32);
                hs4_of.push(hs4.to_string());
            }
            for (i, v) in headings.values_mut().enumerate() {
                *v = i as u32;
            }
            let col_of = hs4_of.iter().map(|h| headings[h]).collect();
            (headings.into_keys().collect(), col_of)
        }
    };

    let triplets = panel
        .records()
        .iter()
        .filter(|r| r.year >= first && r.year <= last && r.value > 0.0)
        .map(|r| (r.firm, product_col[r.product as usize], r.value))
        .collect();
    let mut data = Csr::from_triplets(panel.firms().len(), cols.len(), triplets);
    for v in &mut data.values {
        *v /= n_years;
    }
    Ok(ExportMatrix::from_csr(
        panel.firms().names().to_vec(),
        cols,
        data,
        Some(years),
        resolution,
    ))
}

/// Revealed Comparative Advantage over the same shape as its source matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RcaMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    data: Csr,
    dropped_rows: Vec<usize>,
}

impl RcaMatrix {
    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn data(&self) -> &Csr {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data.get(r, c)
    }

    /// Rows with zero export total; they hold no RCA values.
    pub fn dropped_rows(&self) -> &[usize] {
        &self.dropped_rows
    }
}

/// RCA of every stored cell: the row's share of the product divided by the
/// product's share of the grand total.
pub fn rca(matrix: &ExportMatrix) -> Result<RcaMatrix> {
    if matrix.total <= 0.0 {
        return Err(Error::compute(MODULE, "RCA of an all-zero matrix is undefined"));
    }
    let dropped_rows: Vec<usize> = (0..matrix.rows.len())
        .filter(|&r| matrix.row_sums[r] <= 0.0)
        .collect();
    if !dropped_rows.is_empty() {
        log::warn!(
            "rca: dropping {} rows with zero export total",
            dropped_rows.len()
        );
    }
    let mut data = matrix.data.clone();
    for r in 0..data.n_rows {
        let row_total = matrix.row_sums[r];
        for k in data.indptr[r]..data.indptr[r + 1] {
            let c = data.indices[k] as usize;
            let world_share = matrix.col_sums[c] / matrix.total;
            data.values[k] = (data.values[k] / row_total) / world_share;
        }
    }
    Ok(RcaMatrix {
        rows: matrix.rows.clone(),
        cols: matrix.cols.clone(),
        data,
        dropped_rows,
    })
}

/// 0/1 matrix stored as a sparsity pattern. `active` marks rows that had a
/// positive export total in the source matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    threshold: f64,
    active: Vec<bool>,
}

impl BinaryMatrix {
    /// Builds a matrix from per-row column lists. Every row is active.
    pub fn from_rows(rows: Vec<String>, cols: Vec<String>, pattern: &[Vec<u32>]) -> Result<Self> {
        if pattern.len() != rows.len() {
            return Err(Error::compute(MODULE, "pattern does not match row count"));
        }
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        for row in pattern {
            let mut row = row.clone();
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&c| c as usize >= cols.len()) {
                return Err(Error::compute(MODULE, "column index outside matrix shape"));
            }
            indices.extend_from_slice(&row);
            indptr.push(indices.len());
        }
        let active = vec![true; rows.len()];
        Ok(BinaryMatrix {
            rows,
            cols,
            indptr,
            indices,
            threshold: f64::NAN,
            active,
        })
    }

    /// Dense 0/1 constructor with generated labels.
    pub fn from_dense(values: &[Vec<u8>]) -> Result<Self> {
        let n_cols = values.first().map_or(0, Vec::len);
        let pattern: Vec<Vec<u32>> = values
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(c, _)| c as u32)
                    .collect()
            })
            .collect();
        Self::from_rows(
            (0..values.len()).map(|r| format!("r{r}")).collect(),
            (0..n_cols).map(|c| format!("c{c}")).collect(),
            &pattern,
        )
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.indptr[r]..self.indptr[r + 1]]
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).binary_search(&(c as u32)).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// The RCA threshold used; NaN for matrices built directly from patterns.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub(crate) fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub(crate) fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn col_degrees(&self) -> Vec<u32> {
        let mut k = vec![0u32; self.cols.len()];
        for &c in &self.indices {
            k[c as usize] += 1;
        }
        k
    }

    /// Copy keeping only the given rows and columns, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![u32::MAX; self.cols.len()];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new as u32;
        }
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        for &r in rows {
            let mut row: Vec<u32> = self
                .row(r)
                .iter()
                .map(|&c| col_map[c as usize])
                .filter(|&c| c != u32::MAX)
                .collect();
            row.sort_unstable();
            indices.extend(row);
            indptr.push(indices.len());
        }
        BinaryMatrix {
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
            cols: cols.iter().map(|&c| self.cols[c].clone()).collect(),
            indptr,
            indices,
            threshold: self.threshold,
            active: rows.iter().map(|&r| self.active[r]).collect(),
        }
    }
}

/// `M = 1` exactly where RCA is strictly above `threshold`.
pub fn binarize(rca: &RcaMatrix, threshold: f64) -> Result<BinaryMatrix> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::Config(format!("RCA threshold must be positive, got {threshold}")));
    }
    let data = &rca.data;
    let mut indptr = Vec::with_capacity(data.n_rows + 1);
    indptr.push(0);
    let mut indices = Vec::new();
    for r in 0..data.n_rows {
        let (idx, val) = data.row(r);
        indices.extend(
            idx.iter()
                .zip(val)
                .filter(|(_, &v)| v > threshold)
                .map(|(&c, _)| c),
        );
        indptr.push(indices.len());
    }
    let mut active = vec![true; data.n_rows];
    for &r in &rca.dropped_rows {
        active[r] = false;
    }
    Ok(BinaryMatrix {
        rows: rca.rows.clone(),
        cols: rca.cols.clone(),
        indptr,
        indices,
        threshold,
        active,
    })
}

/// Number of products each row exports above threshold.
pub fn diversification(binary: &BinaryMatrix) -> Vec<u32> {
    (0..binary.n_rows())
        .map(|r| binary.row(r).len() as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{HsRow, HS_SECTIONS};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn hs_map_with(extra: &[(&str, &str)]) -> HsMap {
        let mut rows: Vec<HsRow> = (1..=HS_SECTIONS)
            .map(|s| HsRow {
                hs6: format!("{:04}01", 200 + s as u32),
                hs4: format!("{:04}", 200 + s as u32),
                section: s,
                label: format!("S{s}"),
            })
            .collect();
        for (hs6, hs4) in extra {
            rows.push(HsRow {
                hs6: hs6.to_string(),
                hs4: hs4.to_string(),
                section: 1,
                label: "S1".into(),
            });
        }
        HsMap::new(rows).unwrap()
    }

    #[test]
    fn year_mean_counts_missing_years_as_zero() {
        let panel = ExportPanel::from_rows([("f", "010101", 2002, 10.0)]).unwrap();
        let m = aggregate_years(&panel, (2000, 2004), Resolution::Hs6, None).unwrap();
        assert_eq!(m.data().get(0, 0), 2.0);
    }

    #[test]
    fn single_year_range_is_that_year() {
        let panel = ExportPanel::from_rows([
            ("f", "010101", 2000, 3.0),
            ("f", "010101", 2001, 5.0),
            ("g", "010102", 2001, 7.0),
        ])
        .unwrap();
        let m = aggregate_years(&panel, (2001, 2001), Resolution::Hs6, None).unwrap();
        assert_eq!(m.data().get(0, 0), 5.0);
        assert_eq!(m.data().get(1, 1), 7.0);
        assert_eq!(m.data().nnz(), 2);
    }

    #[test]
    fn hs4_resolution_sums_prefixes() {
        let panel = ExportPanel::from_rows([("f", "010101", 2000, 3.0), ("f", "010102", 2000, 4.0)]).unwrap();
        let map = hs_map_with(&[("010101", "0101"), ("010102", "0101")]);
        let m = aggregate_years(&panel, (2000, 2000), Resolution::Hs4, Some(&map)).unwrap();
        assert_eq!(m.cols(), ["0101"]);
        assert_eq!(m.data().get(0, 0), 7.0);
    }

    #[test]
    fn hs4_resolution_unknown_code_is_fatal() {
        let panel = ExportPanel::from_rows([("f", "999999", 2000, 3.0)]).unwrap();
        let map = hs_map_with(&[]);
        assert!(aggregate_years(&panel, (2000, 2000), Resolution::Hs4, Some(&map)).is_err());
        assert!(aggregate_years(&panel, (2000, 2000), Resolution::Hs4, None).is_err());
    }

    #[test]
    fn rca_hand_example() {
        let m = ExportMatrix::from_dense(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let r = rca(&m).unwrap();
        // Direct evaluation: row shares over column shares of the total 4.
        assert_abs_diff_eq!(r.get(0, 0), (2.0 / 2.0) / (3.0 / 4.0), epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(0, 0), 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(r.get(0, 1), 0.0);
        assert_abs_diff_eq!(r.get(1, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(1, 1), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rca_rank_one_is_unity() {
        let a = [1.0, 3.0, 0.5];
        let b = [2.0, 7.0, 1.0, 4.0];
        let dense: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x * y).collect()).collect();
        let r = rca(&ExportMatrix::from_dense(&dense).unwrap()).unwrap();
        for (_, _, v) in r.data().iter() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
        let bin = binarize(&r, 1.0).unwrap();
        assert_eq!(bin.nnz(), 0);
    }

    #[test]
    fn rca_zero_rows_dropped_and_all_zero_fatal() {
        let m = ExportMatrix::from_dense(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let r = rca(&m).unwrap();
        assert_eq!(r.dropped_rows(), [0]);
        let bin = binarize(&r, 1.0).unwrap();
        assert_eq!(bin.active(), [false, true]);
        let zero = ExportMatrix::from_dense(&[vec![0.0]]).unwrap();
        assert!(rca(&zero).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let m = ExportMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = rca(&m).unwrap();
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(binarize(&r, 1.0).unwrap().nnz(), 0);
        assert_eq!(binarize(&r, 0.9999).unwrap().nnz(), 4);
        assert!(binarize(&r, 0.0).is_err());
    }

    #[test]
    fn binarize_just_above_threshold() {
        // Row 0 holds 1.0001 times its fair share of column 0.
        let x = 1.0001;
        let m = ExportMatrix::from_dense(&[vec![x, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = rca(&m).unwrap();
        assert!(r.get(0, 0) > 1.0);
        assert!(binarize(&r, 1.0).unwrap().contains(0, 0));
    }

    #[test]
    fn diversification_counts() {
        let b = BinaryMatrix::from_dense(&[vec![0, 0, 0, 0], vec![1, 0, 1, 1]]).unwrap();
        assert_eq!(diversification(&b), [0, 3]);
    }

    fn dense_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(
                prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1e6], c),
                r,
            )
        })
    }

    proptest! {
        #[test]
        fn rca_world_share_weighted_mean_is_one(dense in dense_matrix()) {
            let m = ExportMatrix::from_dense(&dense).unwrap();
            prop_assume!(m.total() > 0.0);
            let r = rca(&m).unwrap();
            for c in 0..m.cols().len() {
                if m.col_sums()[c] == 0.0 { continue; }
                let s: f64 = (0..m.rows().len())
                    .map(|row| m.row_sums()[row] / m.total() * r.get(row, c))
                    .sum();
                prop_assert!((s - 1.0).abs() < 1e-12, "column {} sums to {}", c, s);
            }
        }

        #[test]
        fn rca_invariant_under_global_scale(dense in dense_matrix(), scale in 1e-3f64..1e3) {
            let m = ExportMatrix::from_dense(&dense).unwrap();
            prop_assume!(m.total() > 0.0);
            let a = rca(&m).unwrap();
            let b = rca(&m.scaled(scale).unwrap()).unwrap();
            for ((_, _, x), (_, _, y)) in a.data().iter().zip(b.data().iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
