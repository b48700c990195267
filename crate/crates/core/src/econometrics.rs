//! Regression variables (smoothing, growth, symlog, logs, sector dummies) and
//! cross-sectional OLS with HC1 robust standard errors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::ingest::FinancialPanel;

const MODULE: &str = "econometrics";

/// Yearly values of one quantity for one firm.
pub type Series = BTreeMap<i32, f64>;

/// Mean over `t − window + 1 ..= t`, only where every year is present.
pub fn backward_mean_at(series: &Series, t: i32, window: usize) -> Option<f64> {
    let window = i32::try_from(window).ok().filter(|&w| w > 0)?;
    let mut sum = 0.0;
    for y in t - window + 1..=t {
        sum += series.get(&y)?;
    }
    Some(sum / window as f64)
}

/// [`backward_mean_at`] at every year where it is defined.
pub fn backward_mean(series: &Series, window: usize) -> Series {
    series
        .keys()
        .filter_map(|&t| Some((t, backward_mean_at(series, t, window)?)))
        .collect()
}

/// Why a firm is missing from a regression sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum DropReason {
    NoSector,
    MissingWindow(Variable),
    NonPositiveRevenue,
    NonPositiveCoherence,
    ZeroDiversification,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::NoSector => write!(f, "no sector assignment"),
            DropReason::MissingWindow(v) => write!(f, "incomplete {} window", v.name()),
            DropReason::NonPositiveRevenue => write!(f, "log of non-positive revenue"),
            DropReason::NonPositiveCoherence => write!(f, "log of non-positive coherence"),
            DropReason::ZeroDiversification => write!(f, "log of zero diversification"),
        }
    }
}

/// `ln(Ō_{t+dt} / Ō_t)` from a smoothed revenue series.
pub fn growth(smoothed: &Series, t: i32, dt: i32) -> Result<f64, DropReason> {
    let (Some(&a), Some(&b)) = (smoothed.get(&t), smoothed.get(&(t + dt))) else {
        return Err(DropReason::MissingWindow(Variable::Revenue));
    };
    if a <= 0.0 || b <= 0.0 {
        return Err(DropReason::NonPositiveRevenue);
    }
    Ok((b / a).ln())
}

/// `sign(x) · ln(1 + |x|)`.
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Net income per employee for every firm-year with both fields present.
pub fn profit_per_employee_ratio(fin: &FinancialPanel) -> Vec<(String, Series)> {
    fin.firms()
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let series = fin
                .firm_records(i as u32)
                .iter()
                .filter_map(|r| Some((r.year, r.net_income? / f64::from(r.employees?))))
                .collect();
            (name.clone(), series)
        })
        .collect()
}

/// Yearly ratio, backward-averaged over `window`, then symlog.
pub fn profit_per_employee(fin: &FinancialPanel, window: usize) -> Vec<(String, Series)> {
    profit_per_employee_ratio(fin)
        .into_iter()
        .map(|(f, s)| (f, backward_mean(&s, window).into_iter().map(|(t, v)| (t, symlog(v))).collect()))
        .collect()
}

/// Yearly firm quantities held by a [`VariablePanel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Revenue,
    ProfitPerEmployee,
    Expy,
    Coherence,
    AvgComplexity,
    DIn,
    DOut,
    SectionIn,
    SectionOut,
}

impl Variable {
    pub const ALL: [Variable; 9] = [
        Variable::Revenue,
        Variable::ProfitPerEmployee,
        Variable::Expy,
        Variable::Coherence,
        Variable::AvgComplexity,
        Variable::DIn,
        Variable::DOut,
        Variable::SectionIn,
        Variable::SectionOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Revenue => "revenue",
            Variable::ProfitPerEmployee => "profit_per_employee",
            Variable::Expy => "expy",
            Variable::Coherence => "coherence",
            Variable::AvgComplexity => "avg_complexity",
            Variable::DIn => "d_in",
            Variable::DOut => "d_out",
            Variable::SectionIn => "section_in",
            Variable::SectionOut => "section_out",
        }
    }
}

/// Yearly firm series of every regression quantity plus each firm's sector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariablePanel {
    firms: Vec<String>,
    index: HashMap<String, usize>,
    sections: Vec<Option<u8>>,
    series: BTreeMap<Variable, Vec<Series>>,
}

impl VariablePanel {
    pub fn new(firms: Vec<String>) -> Self {
        let index = firms.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        let n = firms.len();
        VariablePanel {
            firms,
            index,
            sections: vec![None; n],
            series: BTreeMap::new(),
        }
    }

    pub fn firms(&self) -> &[String] {
        &self.firms
    }

    pub fn firm_index(&self, firm: &str) -> Option<usize> {
        self.index.get(firm).copied()
    }

    pub fn section(&self, firm: usize) -> Option<u8> {
        self.sections[firm]
    }

    pub fn set_section(&mut self, firm: usize, section: Option<u8>) {
        self.sections[firm] = section;
    }

    pub fn insert(&mut self, var: Variable, firm: usize, year: i32, value: f64) {
        let n = self.firms.len();
        self.series.entry(var).or_insert_with(|| vec![Series::new(); n])[firm].insert(year, value);
    }

    /// Inserts by firm name; unknown firms are ignored and counted.
    pub fn insert_named<'a>(&mut self, var: Variable, values: impl IntoIterator<Item = (&'a str, i32, f64)>) -> usize {
        let mut unknown = 0;
        for (firm, year, value) in values {
            match self.firm_index(firm) {
                Some(i) => self.insert(var, i, year, value),
                None => unknown += 1,
            }
        }
        unknown
    }

    /// Operating revenue and the net income per employee ratio.
    pub fn add_financials(&mut self, fin: &FinancialPanel) {
        for (i, name) in fin.firms().names().iter().enumerate() {
            let Some(f) = self.firm_index(name) else { continue };
            for r in fin.firm_records(i as u32) {
                if let Some(v) = r.operating_revenue {
                    self.insert(Variable::Revenue, f, r.year, v);
                }
            }
        }
        for (name, series) in profit_per_employee_ratio(fin) {
            if let Some(f) = self.firm_index(&name) {
                for (t, v) in series {
                    self.insert(Variable::ProfitPerEmployee, f, t, v);
                }
            }
        }
    }

    pub fn series(&self, var: Variable, firm: usize) -> Option<&Series> {
        self.series.get(&var).map(|s| &s[firm])
    }

    pub fn has(&self, var: Variable) -> bool {
        self.series.contains_key(&var)
    }

    pub fn smoothed(&self, var: Variable, firm: usize, t: i32, window: usize) -> Option<f64> {
        backward_mean_at(self.series(var, firm)?, t, window)
    }

    /// Cross-section at `t`: sector, the smoothed value of every variable, and
    /// growth over `dt`.
    pub fn write_frame_csv(&self, path: &Path, t: i32, dt: i32, window: usize) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let io = |e| Error::csv(path, e);
        let vars: Vec<Variable> = Variable::ALL.into_iter().filter(|&v| self.has(v)).collect();
        let mut header = vec!["firm_id".to_string(), "section".to_string()];
        header.extend(vars.iter().map(|v| format!("{}_bar", v.name())));
        header.push("growth".into());
        w.write_record(&header).map_err(io)?;
        for (f, name) in self.firms.iter().enumerate() {
            let mut row = vec![name.clone(), self.sections[f].map(|s| s.to_string()).unwrap_or_default()];
            for &v in &vars {
                row.push(self.smoothed(v, f, t, window).map(|x| x.to_string()).unwrap_or_default());
            }
            let g = self
                .series(Variable::Revenue, f)
                .and_then(|s| growth(&backward_mean(s, window), t, dt).ok());
            row.push(g.map(|x| x.to_string()).unwrap_or_default());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Left-hand side of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependent {
    Growth,
    ProfitPerEmployee,
}

impl Dependent {
    pub fn label(self) -> &'static str {
        match self {
            Dependent::Growth => "Growth",
            Dependent::ProfitPerEmployee => "Profit per Employee",
        }
    }
}

/// Right-hand-side term, in table row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    LogRevenue,
    LogCoherence,
    Expy,
    AvgComplexity,
    LogSectionOut,
    LogSectionIn,
    LogDOut,
    LogDIn,
}

impl Covariate {
    pub fn variable(self) -> Variable {
        match self {
            Covariate::LogRevenue => Variable::Revenue,
            Covariate::LogCoherence => Variable::Coherence,
            Covariate::Expy => Variable::Expy,
            Covariate::AvgComplexity => Variable::AvgComplexity,
            Covariate::LogSectionOut => Variable::SectionOut,
            Covariate::LogSectionIn => Variable::SectionIn,
            Covariate::LogDOut => Variable::DOut,
            Covariate::LogDIn => Variable::DIn,
        }
    }

    /// Column name in machine outputs.
    pub fn term(self) -> &'static str {
        match self {
            Covariate::LogRevenue => "log_revenue",
            Covariate::LogCoherence => "log_coherence",
            Covariate::Expy => "expy",
            Covariate::AvgComplexity => "avg_complexity",
            Covariate::LogSectionOut => "log_section_out",
            Covariate::LogSectionIn => "log_section_in",
            Covariate::LogDOut => "log_d_out",
            Covariate::LogDIn => "log_d_in",
        }
    }

    /// Row label in the text table.
    pub fn label(self) -> &'static str {
        match self {
            Covariate::LogRevenue => "log Operative Revenue",
            Covariate::LogCoherence => "log Coherence",
            Covariate::Expy => "EXPY",
            Covariate::AvgComplexity => "Average Complexity",
            Covariate::LogSectionOut => "log Out-of-section Diversification",
            Covariate::LogSectionIn => "log In-section Diversification",
            Covariate::LogDOut => "log Out-of-block Diversification",
            Covariate::LogDIn => "log In-block Diversification",
        }
    }

    fn is_diversification(self) -> bool {
        matches!(
            self,
            Covariate::LogDIn | Covariate::LogDOut | Covariate::LogSectionIn | Covariate::LogSectionOut
        )
    }
}

/// Treatment of zero smoothed diversification under the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroDiversification {
    #[default]
    Drop,
    /// Use `ln(1 + d)` for every diversification covariate.
    Log1p,
}

/// One cross-sectional model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    pub id: String,
    pub dependent: Dependent,
    pub covariates: Vec<Covariate>,
    #[serde(default = "default_true")]
    pub sector_dummies: bool,
    #[serde(default)]
    pub zero_diversification: ZeroDiversification,
}

fn default_true() -> bool {
    true
}

impl RegressionSpec {
    /// The two models of the main results table for the given covariates.
    pub fn pair(prefix: &str, covariates: &[Covariate]) -> [RegressionSpec; 2] {
        [Dependent::Growth, Dependent::ProfitPerEmployee].map(|dependent| RegressionSpec {
            id: format!(
                "{prefix}_{}",
                match dependent {
                    Dependent::Growth => "growth",
                    Dependent::ProfitPerEmployee => "profit",
                }
            ),
            dependent,
            covariates: covariates.to_vec(),
            sector_dummies: true,
            zero_diversification: ZeroDiversification::Drop,
        })
    }
}

/// Measurement timing shared by all models of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    pub t_star: i32,
    pub dt: i32,
    pub window: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            t_star: 2015,
            dt: 4,
            window: 3,
        }
    }
}

/// Response, design matrix and the bookkeeping of how they were built.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub firms: Vec<String>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub columns: Vec<String>,
    pub covariates: Vec<Covariate>,
    pub reference_section: Option<u8>,
    pub dropped: BTreeMap<DropReason, usize>,
}

fn log_term(cov: Covariate, v: f64, zero: ZeroDiversification) -> Result<f64, DropReason> {
    if cov.is_diversification() && zero == ZeroDiversification::Log1p {
        return Ok(v.ln_1p());
    }
    if v > 0.0 {
        return Ok(v.ln());
    }
    Err(match cov {
        Covariate::LogRevenue => DropReason::NonPositiveRevenue,
        Covariate::LogCoherence => DropReason::NonPositiveCoherence,
        _ => DropReason::ZeroDiversification,
    })
}

fn row_values(panel: &VariablePanel, spec: &RegressionSpec, timing: Timing, f: usize) -> Result<(f64, Vec<f64>, u8), DropReason> {
    let Timing { t_star, dt, window } = timing;
    let y = match spec.dependent {
        Dependent::Growth => {
            let revenue = panel
                .series(Variable::Revenue, f)
                .ok_or(DropReason::MissingWindow(Variable::Revenue))?;
            growth(&backward_mean(revenue, window), t_star, dt)?
        }
        Dependent::ProfitPerEmployee => symlog(
            panel
                .smoothed(Variable::ProfitPerEmployee, f, t_star + dt, window)
                .ok_or(DropReason::MissingWindow(Variable::ProfitPerEmployee))?,
        ),
    };
    let mut x = Vec::with_capacity(spec.covariates.len());
    for &cov in &spec.covariates {
        let var = cov.variable();
        let v = panel
            .smoothed(var, f, t_star, window)
            .ok_or(DropReason::MissingWindow(var))?;
        x.push(match cov {
            Covariate::Expy | Covariate::AvgComplexity => v,
            _ => log_term(cov, v, spec.zero_diversification)?,
        });
    }
    let section = if spec.sector_dummies {
        panel.section(f).ok_or(DropReason::NoSector)?
    } else {
        0
    };
    Ok((y, x, section))
}

/// Builds `y` and `X = [1, covariates, section dummies]` with listwise
/// deletion. Dummies cover the sections present in the surviving sample,
/// minus the lowest, which is the reference.
pub fn assemble_design(panel: &VariablePanel, spec: &RegressionSpec, timing: Timing) -> Result<Design> {
    if spec.covariates.is_empty() {
        return Err(Error::Config(format!("model {} has no covariates", spec.id)));
    }
    if timing.window == 0 || timing.dt <= 0 {
        return Err(Error::Config("window and horizon must be positive".into()));
    }
    let mut dropped: BTreeMap<DropReason, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for f in 0..panel.firms().len() {
        match row_values(panel, spec, timing, f) {
            Ok(r) => rows.push((f, r)),
            Err(reason) => *dropped.entry(reason).or_default() += 1,
        }
    }
    let sections: Vec<u8> = if spec.sector_dummies {
        rows.iter()
            .map(|(_, r)| r.2)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        Vec::new()
    };
    let reference_section = sections.first().copied();
    let dummies = sections.get(1..).unwrap_or(&[]);
    let mut columns = vec!["intercept".to_string()];
    columns.extend(spec.covariates.iter().map(|c| c.term().to_string()));
    columns.extend(dummies.iter().map(|s| format!("section_{s:02}")));
    let k = columns.len();
    let n = rows.len();
    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    for (i, (_, (yi, xi, s))) in rows.iter().enumerate() {
        y[i] = *yi;
        x[(i, 0)] = 1.0;
        for (j, v) in xi.iter().enumerate() {
            x[(i, 1 + j)] = *v;
        }
        if let Ok(d) = dummies.binary_search(s) {
            x[(i, 1 + spec.covariates.len() + d)] = 1.0;
        }
    }
    for (reason, count) in &dropped {
        log::info!("model {}: dropped {count} firms ({reason})", spec.id);
    }
    Ok(Design {
        firms: rows.iter().map(|(f, _)| panel.firms()[*f].clone()).collect(),
        y,
        x,
        columns,
        covariates: spec.covariates.clone(),
        reference_section,
        dropped,
    })
}

/// Fitted model with HC1 inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    pub model_id: String,
    pub dependent: Option<Dependent>,
    pub terms: Vec<String>,
    pub covariates: Vec<Covariate>,
    pub estimates: Vec<f64>,
    pub se_hc1: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub residuals: Vec<f64>,
    pub reference_section: Option<u8>,
    pub dropped: BTreeMap<DropReason, usize>,
}

impl RegressionResult {
    pub fn coefficient(&self, term: &str) -> Option<(f64, f64, f64)> {
        let i = self.terms.iter().position(|t| t == term)?;
        Some((self.estimates[i], self.se_hc1[i], self.p[i]))
    }

    /// Two-sided confidence interval from the t distribution with `n − k`
    /// degrees of freedom.
    pub fn confidence_interval(&self, term: &str, level: f64) -> Option<(f64, f64)> {
        let (b, se, _) = self.coefficient(term)?;
        let dist = StudentsT::new(0.0, 1.0, (self.n - self.k) as f64).ok()?;
        let q = dist.inverse_cdf(0.5 + level / 2.0);
        Some((b - q * se, b + q * se))
    }

    fn has_sector_dummies(&self) -> bool {
        self.reference_section.is_some()
    }
}

/// OLS via thin QR with the HC1 sandwich covariance
/// `N/(N−k) · (XᵀX)⁻¹ Xᵀ diag(e²) X (XᵀX)⁻¹`.
pub fn ols_hc1(y: &DVector<f64>, x: &DMatrix<f64>, columns: &[String]) -> Result<RegressionResult> {
    let (n, k) = x.shape();
    if y.len() != n || columns.len() != k {
        return Err(Error::compute(MODULE, "response, design and column names disagree in size"));
    }
    if n <= k {
        return Err(Error::compute(MODULE, format!("{n} observations cannot identify {k} coefficients")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let deficient: Vec<&str> = (0..k)
        .filter(|&j| r[(j, j)].abs() <= 1e-10 * x.column(j).norm().max(f64::MIN_POSITIVE))
        .map(|j| columns[j].as_str())
        .collect();
    if !deficient.is_empty() {
        return Err(Error::compute(
            MODULE,
            format!("rank-deficient design: {} linearly dependent on earlier columns", deficient.join(", ")),
        ));
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::compute(MODULE, "singular XᵀX"))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::compute(MODULE, "singular XᵀX"))?;
    let bread = &r_inv * r_inv.transpose();
    let residuals = y - x * &beta;
    let mut scaled = x.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= residuals[i];
    }
    let meat = scaled.transpose() * &scaled;
    let cov = (&bread * meat * &bread) * (n as f64 / (n - k) as f64);

    let df = (n - k) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::compute(MODULE, e.to_string()))?;
    let se_hc1: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let mut t = Vec::with_capacity(k);
    let mut p = Vec::with_capacity(k);
    for j in 0..k {
        let (b, se) = (beta[j], se_hc1[j]);
        if se > 0.0 {
            let tj = b / se;
            t.push(tj);
            p.push((2.0 * dist.sf(tj.abs())).clamp(0.0, 1.0));
        } else {
            t.push(if b == 0.0 { 0.0 } else { b.signum() * f64::INFINITY });
            p.push(if b == 0.0 { 1.0 } else { 0.0 });
        }
    }

    let ssr = residuals.norm_squared();
    let has_intercept = (0..k).any(|j| x.column(j).iter().all(|&v| v == 1.0));
    let sst = if has_intercept {
        let mean = y.mean();
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
    } else {
        y.norm_squared()
    };
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let denom = if has_intercept { n as f64 - 1.0 } else { n as f64 };
    let adj_r_squared = 1.0 - (1.0 - r_squared) * denom / df;
    Ok(RegressionResult {
        model_id: String::new(),
        dependent: None,
        terms: columns.to_vec(),
        covariates: Vec::new(),
        estimates: beta.iter().copied().collect(),
        se_hc1,
        t,
        p,
        n,
        k,
        r_squared,
        adj_r_squared,
        residuals: residuals.iter().copied().collect(),
        reference_section: None,
        dropped: BTreeMap::new(),
    })
}

/// Assembles and fits one model.
pub fn estimate(panel: &VariablePanel, spec: &RegressionSpec, timing: Timing) -> Result<RegressionResult> {
    let design = assemble_design(panel, spec, timing)?;
    let mut result = ols_hc1(&design.y, &design.x, &design.columns)
        .map_err(|e| match e {
            Error::Compute { message, .. } => Error::compute(MODULE, format!("model {}: {message}", spec.id)),
            other => other,
        })?;
    result.model_id = spec.id.clone();
    result.dependent = Some(spec.dependent);
    result.covariates = design.covariates;
    result.reference_section = design.reference_section;
    result.dropped = design.dropped;
    Ok(result)
}

/// Significance marks at the 0.01 / 0.05 / 0.1 bands.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Three decimals without a negative sign on values that round to zero.
fn fixed3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

pub const TABLE_FOOTNOTE: &str = "Robust standard errors in parentheses (HC1). ***p<0.01, **p<0.05, *p<0.1.";

/// Side-by-side text table: one column per model, covariate rows with the
/// standard error underneath, then sector dummies, observations and
/// adjusted R².
pub fn regression_table(results: &[&RegressionResult]) -> String {
    let rows: BTreeSet<Covariate> = results.iter().flat_map(|r| r.covariates.iter().copied()).collect();
    let headers: Vec<String> = results
        .iter()
        .map(|r| r.dependent.map_or_else(|| r.model_id.clone(), |d| d.label().to_string()))
        .collect();
    let mut body: Vec<(String, Vec<String>)> = Vec::new();
    for cov in &rows {
        let mut coef = Vec::new();
        let mut se = Vec::new();
        for r in results {
            match r.coefficient(cov.term()) {
                Some((b, s, p)) => {
                    coef.push(format!("{}{}", fixed3(b), stars(p)));
                    se.push(format!("({})", fixed3(s)));
                }
                None => {
                    coef.push(String::new());
                    se.push(String::new());
                }
            }
        }
        body.push((cov.label().to_string(), coef));
        body.push((String::new(), se));
    }
    let dummies = ("Sector dummies".to_string(), results.iter().map(|r| if r.has_sector_dummies() { "YES" } else { "NO" }.to_string()).collect());
    let obs = ("Observations".to_string(), results.iter().map(|r| r.n.to_string()).collect());
    let adj = ("Adjusted R-squared".to_string(), results.iter().map(|r| fixed3(r.adj_r_squared)).collect::<Vec<_>>());

    let all = body.iter().chain([&dummies, &obs, &adj]);
    let label_w = all.clone().map(|(l, _)| l.chars().count()).max().unwrap_or(0);
    let col_w: Vec<usize> = (0..results.len())
        .map(|j| {
            all.clone()
                .map(|(_, v)| v[j].chars().count())
                .chain([headers[j].chars().count(), 10])
                .max()
                .unwrap_or(10)
        })
        .collect();
    let line = |label: &str, cells: &[String]| {
        let mut s = format!("{label:<label_w$}");
        for (c, w) in cells.iter().zip(&col_w) {
            s.push_str(&format!("  {c:>w$}"));
        }
        s.trim_end().to_string() + "\n"
    };
    let width = label_w + col_w.iter().map(|w| w + 2).sum::<usize>();
    let rule = "-".repeat(width) + "\n";
    let mut out = String::new();
    out.push_str(&line("", &headers));
    out.push_str(&rule);
    for (label, cells) in &body {
        out.push_str(&line(label, cells));
    }
    out.push('\n');
    out.push_str(&line(&dummies.0, &dummies.1));
    out.push_str(&rule);
    out.push_str(&line(&obs.0, &obs.1));
    out.push_str(&line(&adj.0, &adj.1));
    out.push_str(&rule);
    out.push_str(TABLE_FOOTNOTE);
    out.push('\n');
    out
}

/// `term,estimate,se_hc1,p,stars,model_id` for every coefficient, with the
/// reference section as an extra row.
pub fn write_results_csv(path: &Path, results: &[&RegressionResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e| Error::csv(path, e);
    w.write_record(["term", "estimate", "se_hc1", "p", "stars", "model_id"]).map_err(io)?;
    for r in results {
        for j in 0..r.terms.len() {
            w.write_record([
                r.terms[j].as_str(),
                &r.estimates[j].to_string(),
                &r.se_hc1[j].to_string(),
                &r.p[j].to_string(),
                stars(r.p[j]),
                &r.model_id,
            ])
            .map_err(io)?;
        }
        if let Some(s) = r.reference_section {
            w.write_record([format!("section_{s:02}").as_str(), "0", "", "", "reference", &r.model_id])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line per model: sample size, fit and deletion counts.
pub fn write_summary_csv(path: &Path, results: &[&RegressionResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e| Error::csv(path, e);
    w.write_record([
        "model_id",
        "dependent",
        "observations",
        "parameters",
        "r_squared",
        "adj_r_squared",
        "reference_section",
        "dropped",
    ])
    .map_err(io)?;
    for r in results {
        let dropped = r
            .dropped
            .iter()
            .map(|(reason, n)| format!("{reason}: {n}"))
            .collect::<Vec<_>>()
            .join("; ");
        w.write_record([
            r.model_id.clone(),
            r.dependent.map(|d| d.label().to_string()).unwrap_or_default(),
            r.n.to_string(),
            r.k.to_string(),
            r.r_squared.to_string(),
            r.adj_r_squared.to_string(),
            r.reference_section.map(|s| s.to_string()).unwrap_or_default(),
            dropped,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn series(pairs: &[(i32, f64)]) -> Series {
        pairs.iter().copied().collect()
    }

    #[test]
    fn backward_mean_examples() {
        let s = series(&[(2010, 4.0), (2011, 4.0), (2012, 4.0), (2013, 4.0)]);
        assert_eq!(backward_mean(&s, 3), series(&[(2012, 4.0), (2013, 4.0)]));
        assert_eq!(backward_mean_at(&series(&[(1, 1.0), (2, 2.0), (3, 3.0)]), 3, 3), Some(2.0));
        assert_eq!(backward_mean_at(&series(&[(1, 1.0), (3, 3.0)]), 3, 3), None);
    }

    #[test]
    fn growth_examples() {
        let flat = series(&[(2015, 7.0), (2019, 7.0)]);
        assert_eq!(growth(&flat, 2015, 4), Ok(0.0));
        let doubled = series(&[(2015, 3.0), (2019, 6.0)]);
        assert_abs_diff_eq!(growth(&doubled, 2015, 4).unwrap(), 0.6931471805599453, epsilon = 1e-15);
        assert_eq!(growth(&series(&[(2015, 3.0)]), 2015, 4), Err(DropReason::MissingWindow(Variable::Revenue)));
        assert_eq!(growth(&series(&[(2015, 0.0), (2019, 1.0)]), 2015, 4), Err(DropReason::NonPositiveRevenue));
    }

    #[test]
    fn symlog_examples() {
        assert_eq!(symlog(0.0), 0.0);
        assert_abs_diff_eq!(symlog(std::f64::consts::E - 1.0), 1.0, epsilon = 1e-15);
        assert_eq!(symlog(-3.5), -symlog(3.5));
    }

    fn fin(rows: &[(&str, i32, Option<u32>, Option<f64>, Option<f64>)]) -> FinancialPanel {
        FinancialPanel::from_rows(
            rows.iter()
                .map(|&(f, y, e, o, n)| crate::ingest::FinancialRow {
                    firm_id: f.into(),
                    year: y,
                    employees: e,
                    operating_revenue: o,
                    net_income: n,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn profit_per_employee_examples() {
        let p = fin(&[
            ("a", 2000, Some(4), None, Some(100.0)),
            ("b", 2000, Some(3), None, Some(0.0)),
            ("c", 2000, Some(2), None, Some(10.0)),
            ("c", 2001, Some(4), None, Some(20.0)),
            ("c", 2002, Some(1), None, Some(5.0)),
            ("d", 2000, None, None, Some(5.0)),
        ]);
        let ratio = profit_per_employee_ratio(&p);
        assert_eq!(ratio[0].1[&2000], 25.0);
        assert_eq!(ratio[1].1[&2000], 0.0);
        assert!(ratio[3].1.is_empty());
        let smoothed = profit_per_employee(&p, 3);
        assert_eq!(smoothed[2].1, series(&[(2002, symlog(5.0))]));
    }

    /// Panel of `n` firms with complete windows and sections cycling 1..=21.
    fn complete_panel(n: usize) -> VariablePanel {
        let mut panel = VariablePanel::new((0..n).map(|i| format!("f{i:03}")).collect());
        for f in 0..n {
            let x = f as f64;
            panel.set_section(f, Some((f % 21) as u8 + 1));
            for t in 2013..=2019 {
                let g = if t >= 2017 { 1.0 + 0.05 * (x * 0.37).sin() } else { 1.0 };
                panel.insert(Variable::Revenue, f, t, 100.0 * (1.0 + x) * g);
                panel.insert(Variable::ProfitPerEmployee, f, t, 4.0 * (x * 1.3).cos());
                panel.insert(Variable::Expy, f, t, (x * 0.71).sin());
                panel.insert(Variable::Coherence, f, t, 0.5 + 0.3 * (x * 2.9).cos());
                panel.insert(Variable::DIn, f, t, 4.0 + 3.0 * (x * 1.7).sin());
                panel.insert(Variable::DOut, f, t, 5.0 + 4.0 * (x * 0.23).cos());
            }
        }
        panel
    }

    const MAIN: [Covariate; 5] = [
        Covariate::LogRevenue,
        Covariate::LogCoherence,
        Covariate::Expy,
        Covariate::LogDOut,
        Covariate::LogDIn,
    ];

    #[test]
    fn complete_panel_keeps_every_firm() {
        let panel = complete_panel(100);
        let [growth_spec, _] = RegressionSpec::pair("main", &MAIN);
        let d = assemble_design(&panel, &growth_spec, Timing::default()).unwrap();
        assert_eq!(d.y.len(), 100);
        assert!(d.dropped.is_empty());
        assert_eq!(d.columns.len(), 1 + 5 + 20);
        assert_eq!(d.reference_section, Some(1));
    }

    #[test]
    fn zero_in_block_diversification_is_dropped() {
        let mut panel = complete_panel(30);
        for t in 2013..=2015 {
            panel.insert(Variable::DIn, 0, t, 0.0);
        }
        let [spec, _] = RegressionSpec::pair("main", &MAIN);
        let d = assemble_design(&panel, &spec, Timing::default()).unwrap();
        assert_eq!(d.dropped[&DropReason::ZeroDiversification], 1);
        assert_eq!(DropReason::ZeroDiversification.to_string(), "log of zero diversification");
        let log1p = RegressionSpec {
            zero_diversification: ZeroDiversification::Log1p,
            ..spec
        };
        assert_eq!(assemble_design(&panel, &log1p, Timing::default()).unwrap().y.len(), 30);
    }

    /// Closed-form OLS and HC1 sandwich through explicit normal equations and
    /// Gauss–Jordan inversion.
    fn sandwich_oracle(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, k) = (x.len(), x[0].len());
        let mut xtx = vec![vec![0.0; k]; k];
        let mut xty = vec![0.0; k];
        for i in 0..n {
            for a in 0..k {
                xty[a] += x[i][a] * y[i];
                for b in 0..k {
                    xtx[a][b] += x[i][a] * x[i][b];
                }
            }
        }
        let mut aug: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                let mut row = xtx[a].clone();
                row.extend((0..k).map(|b| if a == b { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..k {
            let piv = (c..k).max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs())).unwrap();
            aug.swap(c, piv);
            let d = aug[c][c];
            aug[c].iter_mut().for_each(|v| *v /= d);
            for r in 0..k {
                if r != c {
                    let f = aug[r][c];
                    for j in 0..2 * k {
                        aug[r][j] -= f * aug[c][j];
                    }
                }
            }
        }
        let inv: Vec<Vec<f64>> = aug.iter().map(|r| r[k..].to_vec()).collect();
        let beta: Vec<f64> = (0..k).map(|a| (0..k).map(|b| inv[a][b] * xty[b]).sum()).collect();
        let mut meat = vec![vec![0.0; k]; k];
        for i in 0..n {
            let e = y[i] - (0..k).map(|a| x[i][a] * beta[a]).sum::<f64>();
            for a in 0..k {
                for b in 0..k {
                    meat[a][b] += e * e * x[i][a] * x[i][b];
                }
            }
        }
        let scale = n as f64 / (n - k) as f64;
        let se = (0..k)
            .map(|j| {
                let mut v = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        v += inv[j][a] * meat[a][b] * inv[b][j];
                    }
                }
                (scale * v).sqrt()
            })
            .collect();
        (beta, se)
    }

    fn design(x: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j])
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn exact_fit_has_zero_errors() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64]).collect();
        let y = DVector::from_iterator(6, (0..6).map(|i| 1.0 + 2.0 * i as f64));
        let r = ols_hc1(&y, &design(&x), &names(2)).unwrap();
        assert_abs_diff_eq!(r.estimates[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.estimates[1], 2.0, epsilon = 1e-12);
        assert!(r.residuals.iter().all(|e| e.abs() < 1e-12));
        assert!(r.se_hc1.iter().all(|s| *s < 1e-12));
    }

    #[test]
    fn heteroskedastic_six_points_match_sandwich_oracle() {
        let x = vec![
            vec![1.0, 1.0, 0.5],
            vec![1.0, 2.0, -1.0],
            vec![1.0, 3.0, 2.0],
            vec![1.0, 4.0, 0.0],
            vec![1.0, 5.0, 1.5],
            vec![1.0, 6.0, -0.5],
        ];
        let y = [1.2, 2.9, 2.1, 6.3, 4.4, 9.8];
        let r = ols_hc1(&DVector::from_row_slice(&y), &design(&x), &names(3)).unwrap();
        let (beta, se) = sandwich_oracle(&x, &y);
        // Values the oracle produced when this test was written.
        let frozen_beta = [-0.288281249999994, 1.493963068181818, -1.1774147727272726];
        let frozen_se = [0.9952848021620023, 0.23280807480209154, 0.39608487894854877];
        for j in 0..3 {
            assert_abs_diff_eq!(beta[j], frozen_beta[j], epsilon = 1e-10);
            assert_abs_diff_eq!(se[j], frozen_se[j], epsilon = 1e-10);
        }
        for j in 0..3 {
            assert_abs_diff_eq!(r.estimates[j], beta[j], epsilon = 1e-10);
            assert_abs_diff_eq!(r.se_hc1[j], se[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn duplicated_column_is_rank_error() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64, i as f64]).collect();
        let y = DVector::from_iterator(6, (0..6).map(|i| (i * i) as f64));
        let err = ols_hc1(&y, &design(&x), &names(3)).unwrap_err().to_string();
        assert!(err.contains("x2"), "{err}");
    }

    #[test]
    fn stars_bands() {
        assert_eq!(stars(0.004), "***");
        assert_eq!(stars(0.01), "**");
        assert_eq!(stars(0.049), "**");
        assert_eq!(stars(0.07), "*");
        assert_eq!(stars(0.1), "");
    }

    #[test]
    fn table_has_two_model_columns() {
        let panel = complete_panel(120);
        let specs = RegressionSpec::pair("main", &MAIN);
        let results: Vec<RegressionResult> = specs
            .iter()
            .map(|s| estimate(&panel, s, Timing::default()).unwrap())
            .collect();
        let table = regression_table(&results.iter().collect::<Vec<_>>());
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].contains("Growth") && lines[0].contains("Profit per Employee"));
        assert!(lines.iter().any(|l| l.starts_with("Sector dummies") && l.matches("YES").count() == 2));
        assert!(lines.iter().any(|l| l.starts_with("Observations") && l.matches("120").count() == 2));
        assert!(lines.iter().any(|l| l.starts_with("Adjusted R-squared")));
        assert_eq!(*lines.last().unwrap(), TABLE_FOOTNOTE);
        assert_eq!(table, regression_table(&results.iter().collect::<Vec<_>>()));
    }

    fn dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (8usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )
                .prop_map(|(xs, y)| (xs.into_iter().map(|(a, b)| vec![1.0, a, b]).collect(), y))
        })
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_columns((x, y) in dataset()) {
            let r = ols_hc1(&DVector::from_row_slice(&y), &design(&x), &names(3)).unwrap();
            for j in 0..3 {
                let dot: f64 = x.iter().zip(&r.residuals).map(|(row, e)| row[j] * e).sum();
                prop_assert!(dot.abs() < 1e-10);
            }
            prop_assert!(r.p.iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn shifting_y_moves_only_intercept((x, y) in dataset(), c in -100.0f64..100.0) {
            let a = ols_hc1(&DVector::from_row_slice(&y), &design(&x), &names(3)).unwrap();
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            let b = ols_hc1(&DVector::from_row_slice(&shifted), &design(&x), &names(3)).unwrap();
            prop_assert!((b.estimates[0] - a.estimates[0] - c).abs() < 1e-9);
            for j in 1..3 {
                prop_assert!((b.estimates[j] - a.estimates[j]).abs() < 1e-10);
            }
            for j in 0..3 {
                prop_assert!((b.se_hc1[j] - a.se_hc1[j]).abs() < 1e-10);
            }
        }

        #[test]
        fn hc1_equals_scaled_classical_under_equal_magnitudes(
            xs in proptest::collection::vec(-3.0f64..3.0, 6..20),
            sigma in 0.1f64..3.0,
        ) {
            // Each x appears as ±x with residuals ±σ in a pattern orthogonal
            // to both columns, so every |e| equals σ. HC1 then reduces to
            // σ²·N/(N−k)·(XᵀX)⁻¹, i.e. √(N/(N−k)) times the SE that uses the
            // unscaled variance estimate SSR/N.
            prop_assume!(xs.iter().any(|v| v.abs() > 0.1));
            let mut rows = Vec::new();
            let mut y = Vec::new();
            for (i, &v) in xs.iter().enumerate() {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                for (xv, e) in [(v, s * sigma), (-v, s * sigma), (v, -s * sigma), (-v, -s * sigma)] {
                    rows.push(vec![1.0, xv]);
                    y.push(0.5 + 1.5 * xv + e);
                }
            }
            let r = ols_hc1(&DVector::from_row_slice(&y), &design(&rows), &names(2)).unwrap();
            prop_assert!(r.residuals.iter().all(|e| (e.abs() - sigma).abs() < 1e-9));
            let (n, k) = (rows.len() as f64, 2.0);
            let sigma2 = r.residuals.iter().map(|e| e * e).sum::<f64>() / n;
            let inv = (design(&rows).transpose() * design(&rows)).try_inverse().unwrap();
            for j in 0..2 {
                let unscaled = (sigma2 * inv[(j, j)]).sqrt();
                let expected = (n / (n - k)).sqrt() * unscaled;
                prop_assert!((r.se_hc1[j] - expected).abs() < 1e-10 * expected.max(1.0));
            }
        }

        #[test]
        fn growth_is_additive(
            values in proptest::collection::vec(0.1f64..1000.0, 12),
            a in 1i32..5,
            b in 1i32..5,
        ) {
            let s: Series = values.iter().enumerate().map(|(i, &v)| (2000 + i as i32, v)).collect();
            let sm = backward_mean(&s, 3);
            let t = 2002;
            if let (Ok(x), Ok(y), Ok(z)) = (growth(&sm, t, a), growth(&sm, t + a, b), growth(&sm, t, a + b)) {
                prop_assert!((x + y - z).abs() < 1e-12);
            }
        }

        #[test]
        fn stars_depend_only_on_band(p in 0.0f64..1.0) {
            let expected = if p < 0.01 { 3 } else if p < 0.05 { 2 } else if p < 0.1 { 1 } else { 0 };
            prop_assert_eq!(stars(p).len(), expected);
        }
    }
}
