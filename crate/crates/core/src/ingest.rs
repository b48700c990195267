//! Typed loaders for the input tables: firm exports, firm financials, GDP per
//! capita, world trade and the HS classification map.
//!
//! Every loader validates row by row. Bad rows are rejected with their line
//! number and never stop the load; only unreadable files, missing header
//! columns and table-level invariant violations are fatal. Firm, country and
//! product identifiers are interned to dense indices in sorted order, so a
//! panel does not depend on the row order of the file it came from.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of top-level Harmonized System sections.
pub const HS_SECTIONS: u8 = 21;

/// Dense index over a sorted set of opaque string identifiers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    /// Builds an interner from names that are already sorted and unique.
    fn from_sorted(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Interner { names, index }
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: u32) -> &str {
        &self.names[idx as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Collects identifiers in arrival order, then produces a sorted interner and
/// the remapping from arrival ids to sorted ids.
#[derive(Default)]
struct ArrivalIds {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl ArrivalIds {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    fn finish(self) -> (Interner, Vec<u32>) {
        let mut order: Vec<u32> = (0..self.names.len() as u32).collect();
        order.sort_by(|&a, &b| self.names[a as usize].cmp(&self.names[b as usize]));
        let mut remap = vec![0u32; order.len()];
        for (sorted, &arrival) in order.iter().enumerate() {
            remap[arrival as usize] = sorted as u32;
        }
        let mut names = self.names;
        let sorted_names = order
            .iter()
            .map(|&a| std::mem::take(&mut names[a as usize]))
            .collect();
        (Interner::from_sorted(sorted_names), remap)
    }
}

pub fn is_hs6(code: &str) -> bool {
    code.len() == 6 && code.bytes().all(|b| b.is_ascii_digit())
}

pub fn is_hs4(code: &str) -> bool {
    code.len() == 4 && code.bytes().all(|b| b.is_ascii_digit())
}

// ---------------------------------------------------------------------------
// Schemas and load reports
// ---------------------------------------------------------------------------

fn default_delimiter() -> char {
    ','
}

/// Delimiter, column mapping and optional year window for one input table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema<C> {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub columns: C,
    /// Inclusive year window; rows outside it are rejected.
    #[serde(default)]
    pub years: Option<(i32, i32)>,
}

impl<C: Default> Default for TableSchema<C> {
    fn default() -> Self {
        TableSchema {
            delimiter: default_delimiter(),
            columns: C::default(),
            years: None,
        }
    }
}

impl<C> TableSchema<C> {
    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .ok()
            .filter(|b| b.is_ascii())
            .ok_or_else(|| Error::Config(format!("delimiter {:?} is not ASCII", self.delimiter)))
    }

    fn check_year(&self, year: i32) -> Option<String> {
        match self.years {
            Some((lo, hi)) if year < lo || year > hi => {
                Some(format!("year {year} outside {lo}..={hi}"))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportColumns {
    pub firm_id: String,
    pub product: String,
    pub year: String,
    pub value: String,
}

impl Default for ExportColumns {
    fn default() -> Self {
        ExportColumns {
            firm_id: "firm_id".into(),
            product: "hs6".into(),
            year: "year".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinancialColumns {
    pub firm_id: String,
    pub year: String,
    pub employees: String,
    pub operating_revenue: String,
    pub net_income: String,
}

impl Default for FinancialColumns {
    fn default() -> Self {
        FinancialColumns {
            firm_id: "firm_id".into(),
            year: "year".into(),
            employees: "employees".into(),
            operating_revenue: "operating_revenue".into(),
            net_income: "net_income".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdpColumns {
    pub country: String,
    pub gdp_pc: String,
}

impl Default for GdpColumns {
    fn default() -> Self {
        GdpColumns {
            country: "country".into(),
            gdp_pc: "gdp_pc".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldTradeColumns {
    pub country: String,
    pub product: String,
    pub value: String,
}

impl Default for WorldTradeColumns {
    fn default() -> Self {
        WorldTradeColumns {
            country: "country".into(),
            product: "hs6".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsMapColumns {
    pub hs6: String,
    pub hs4: String,
    pub section_index: String,
    pub section_label: String,
}

impl Default for HsMapColumns {
    fn default() -> Self {
        HsMapColumns {
            hs6: "hs6".into(),
            hs4: "hs4".into(),
            section_index: "section_index".into(),
            section_label: "section_label".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

/// Outcome of one table load. Rejections are ordered by line number.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    /// Rows folded into an earlier row with the same key.
    pub merged_duplicates: usize,
    /// Sum of the value column over accepted rows (value-bearing tables only).
    pub accepted_value: f64,
    /// Sum of the value column over rejected rows whose value parsed.
    pub rejected_value: f64,
}

impl LoadReport {
    fn reject(&mut self, line: u64, reason: impl Into<String>) {
        self.rejected.push(Rejection {
            line,
            reason: reason.into(),
        });
    }
}

/// Opens a delimited file and resolves the positions of the required columns.
fn open_table(
    path: &Path,
    delimiter: u8,
    required: &[&str],
) -> Result<(csv::Reader<File>, Vec<usize>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let mut positions = Vec::with_capacity(required.len());
    for name in required {
        let pos = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "{}: header has no column {name:?}",
                    path.display()
                ))
            })?;
        positions.push(pos);
    }
    Ok((reader, positions))
}

/// Iterates data rows, handing each to `row` with its line number and the
/// required fields in schema order. Row-level decode failures are rejections.
fn for_each_row(
    path: &Path,
    mut reader: csv::Reader<File>,
    positions: &[usize],
    report: &mut LoadReport,
    mut row: impl FnMut(u64, &[&str], &mut LoadReport),
) -> Result<()> {
    let mut record = csv::StringRecord::new();
    let n = positions.len();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                report.rows += 1;
                let line = record.position().map_or(0, |p| p.line());
                let mut fields = [""; 8];
                let mut complete = true;
                for (slot, &p) in fields.iter_mut().zip(positions) {
                    match record.get(p) {
                        Some(v) => *slot = v.trim(),
                        None => {
                            complete = false;
                            break;
                        }
                    }
                }
                if !complete {
                    report.reject(line, "missing fields");
                    continue;
                }
                row(line, &fields[..n], report);
            }
            Err(e) => match e.kind() {
                csv::ErrorKind::Utf8 { pos, .. } => {
                    report.rows += 1;
                    report.reject(pos.as_ref().map_or(0, |p| p.line()), "invalid UTF-8");
                }
                _ => return Err(Error::csv(path, e)),
            },
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_optional(raw: &str) -> std::result::Result<Option<f64>, ()> {
    if raw.is_empty() {
        return Ok(None);
    }
    parse_value(raw).map(Some).ok_or(())
}

fn parse_count(raw: &str) -> Option<u32> {
    raw.parse::<u32>().ok().or_else(|| {
        let v = raw.parse::<f64>().ok()?;
        (v.is_finite() && v.fract() == 0.0 && v >= 0.0 && v <= u32::MAX as f64).then_some(v as u32)
    })
}

fn writer(path: &Path, delimiter: u8) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().delimiter(delimiter).from_writer(file))
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportRecord {
    pub firm: u32,
    pub product: u32,
    pub year: i32,
    pub value: f64,
}

/// Firm × product × year export values. Records are unique per key and sorted
/// by (firm, product, year); firms and products are indexed in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportPanel {
    firms: Interner,
    products: Interner,
    records: Vec<ExportRecord>,
}

/// Accumulates validated rows; duplicates are summed in arrival order.
#[derive(Default)]
pub struct ExportPanelBuilder {
    firms: ArrivalIds,
    products: ArrivalIds,
    records: Vec<ExportRecord>,
}

impl ExportPanelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a row that has already been validated.
    pub fn push(&mut self, firm_id: &str, hs6: &str, year: i32, value: f64) {
        let firm = self.firms.intern(firm_id);
        let product = self.products.intern(hs6);
        self.records.push(ExportRecord {
            firm,
            product,
            year,
            value,
        });
    }

    /// Returns the panel and the number of rows merged into duplicates.
    pub fn finish(self) -> (ExportPanel, usize) {
        let (firms, firm_map) = self.firms.finish();
        let (products, product_map) = self.products.finish();
        let mut records = self.records;
        for r in &mut records {
            r.firm = firm_map[r.firm as usize];
            r.product = product_map[r.product as usize];
        }
        // Stable sort keeps arrival order among duplicates, so sums are
        // reproducible.
        records.sort_by_key(|r| (r.firm, r.product, r.year));
        let before = records.len();
        records.dedup_by(|later, kept| {
            if later.firm == kept.firm && later.product == kept.product && later.year == kept.year {
                kept.value += later.value;
                true
            } else {
                false
            }
        });
        let merged = before - records.len();
        (
            ExportPanel {
                firms,
                products,
                records,
            },
            merged,
        )
    }
}

impl ExportPanel {
    /// Builds a panel from in-memory rows, applying the same validation as
    /// [`load_exports`].
    pub fn from_rows<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, i32, f64)>,
    {
        let mut builder = ExportPanelBuilder::new();
        for (i, (firm, hs6, year, value)) in rows.into_iter().enumerate() {
            if !is_hs6(hs6) {
                return Err(Error::Validation(format!("row {i}: malformed HS6 code {hs6:?}")));
            }
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::Validation(format!("row {i}: invalid export value {value}")));
            }
            builder.push(firm, hs6, year, value);
        }
        Ok(builder.finish().0)
    }

    pub fn firms(&self) -> &Interner {
        &self.firms
    }

    pub fn products(&self) -> &Interner {
        &self.products
    }

    pub fn records(&self) -> &[ExportRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First and last year present in the records.
    pub fn years(&self) -> Option<(i32, i32)> {
        let lo = self.records.iter().map(|r| r.year).min()?;
        let hi = self.records.iter().map(|r| r.year).max()?;
        Some((lo, hi))
    }

    pub fn total_value(&self) -> f64 {
        self.records.iter().map(|r| r.value).sum()
    }

    /// Records of one firm, as a contiguous slice.
    pub fn firm_records(&self, firm: u32) -> &[ExportRecord] {
        let start = self.records.partition_point(|r| r.firm < firm);
        let end = self.records.partition_point(|r| r.firm <= firm);
        &self.records[start..end]
    }

    /// Writes the panel in the schema's layout, one row per record.
    pub fn write_csv(&self, path: &Path, schema: &TableSchema<ExportColumns>) -> Result<()> {
        let mut w = writer(path, schema.delimiter_byte()?)?;
        let c = &schema.columns;
        let io = |e| Error::csv(path, e);
        w.write_record([&c.firm_id, &c.product, &c.year, &c.value])
            .map_err(io)?;
        for r in &self.records {
            w.write_record([
                self.firms.name(r.firm),
                self.products.name(r.product),
                &r.year.to_string(),
                &r.value.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_exports(
    path: &Path,
    schema: &TableSchema<ExportColumns>,
) -> Result<(ExportPanel, LoadReport)> {
    let c = &schema.columns;
    let (reader, positions) = open_table(
        path,
        schema.delimiter_byte()?,
        &[&c.firm_id, &c.product, &c.year, &c.value],
    )?;
    let mut report = LoadReport::default();
    let mut builder = ExportPanelBuilder::new();
    for_each_row(path, reader, &positions, &mut report, |line, f, report| {
        let value = parse_value(f[3]);
        let problem = if f[0].is_empty() {
            Some("empty firm id".to_string())
        } else if !is_hs6(f[1]) {
            Some(format!("malformed HS6 code {:?}", f[1]))
        } else if let Ok(year) = f[2].parse::<i32>() {
            match value {
                None => Some(format!("unparseable value {:?}", f[3])),
                Some(v) if v < 0.0 => Some(format!("negative value {v}")),
                Some(v) => match schema.check_year(year) {
                    Some(reason) => Some(reason),
                    None => {
                        builder.push(f[0], f[1], year, v);
                        report.accepted += 1;
                        report.accepted_value += v;
                        None
                    }
                },
            }
        } else {
            Some(format!("unparseable year {:?}", f[2]))
        };
        if let Some(reason) = problem {
            if let Some(v) = value {
                report.rejected_value += v;
            }
            report.reject(line, reason);
        }
    })?;
    let (panel, merged) = builder.finish();
    report.merged_duplicates = merged;
    Ok((panel, report))
}

/// Keeps exactly the firms with at least one positive-valued record in every
/// year of the inclusive range, together with all of their records.
pub fn filter_persistent_firms(panel: &ExportPanel, years: (i32, i32)) -> Result<ExportPanel> {
    let (first, last) = years;
    if first > last {
        return Err(Error::Validation(format!("empty year range {first}..={last}")));
    }
    let span = (last - first + 1) as usize;
    let mut keep = vec![false; panel.firms.len()];
    let mut seen = vec![false; span];
    for (firm, keep_firm) in keep.iter_mut().enumerate() {
        seen.iter_mut().for_each(|s| *s = false);
        for r in panel.firm_records(firm as u32) {
            if r.value > 0.0 && r.year >= first && r.year <= last {
                seen[(r.year - first) as usize] = true;
            }
        }
        *keep_firm = seen.iter().all(|&s| s);
    }

    let mut builder = ExportPanelBuilder::new();
    for r in panel.records.iter().filter(|r| keep[r.firm as usize]) {
        builder.push(
            panel.firms.name(r.firm),
            panel.products.name(r.product),
            r.year,
            r.value,
        );
    }
    Ok(builder.finish().0)
}

// ---------------------------------------------------------------------------
// Financials
// ---------------------------------------------------------------------------

/// One firm-year of financial data. Absent fields are `None`, never zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinancialRecord {
    pub firm: u32,
    pub year: i32,
    pub employees: Option<u32>,
    pub operating_revenue: Option<f64>,
    pub net_income: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinancialPanel {
    firms: Interner,
    records: Vec<FinancialRecord>,
}

/// Raw financial row for [`FinancialPanel::from_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct FinancialRow {
    pub firm_id: String,
    pub year: i32,
    pub employees: Option<u32>,
    pub operating_revenue: Option<f64>,
    pub net_income: Option<f64>,
}

impl FinancialPanel {
    /// Builds a panel from rows that satisfy the record invariants. Rows with
    /// zero employees or a repeated (firm, year) key are an error.
    pub fn from_rows(rows: Vec<FinancialRow>) -> Result<Self> {
        let mut ids = ArrivalIds::default();
        let mut records = Vec::with_capacity(rows.len());
        for row in rows {
            if row.employees == Some(0) {
                return Err(Error::Validation(format!(
                    "{} {}: zero employees",
                    row.firm_id, row.year
                )));
            }
            records.push(FinancialRecord {
                firm: ids.intern(&row.firm_id),
                year: row.year,
                employees: row.employees,
                operating_revenue: row.operating_revenue,
                net_income: row.net_income,
            });
        }
        let (firms, remap) = ids.finish();
        for r in &mut records {
            r.firm = remap[r.firm as usize];
        }
        records.sort_by_key(|r| (r.firm, r.year));
        if let Some(w) = records
            .windows(2)
            .find(|w| w[0].firm == w[1].firm && w[0].year == w[1].year)
        {
            return Err(Error::Validation(format!(
                "duplicate financial record for {} {}",
                firms.name(w[0].firm),
                w[0].year
            )));
        }
        Ok(FinancialPanel { firms, records })
    }

    pub fn firms(&self) -> &Interner {
        &self.firms
    }

    pub fn records(&self) -> &[FinancialRecord] {
        &self.records
    }

    pub fn firm_records(&self, firm: u32) -> &[FinancialRecord] {
        let start = self.records.partition_point(|r| r.firm < firm);
        let end = self.records.partition_point(|r| r.firm <= firm);
        &self.records[start..end]
    }

    pub fn get(&self, firm_id: &str, year: i32) -> Option<&FinancialRecord> {
        let firm = self.firms.get(firm_id)?;
        self.firm_records(firm).iter().find(|r| r.year == year)
    }

    pub fn write_csv(&self, path: &Path, schema: &TableSchema<FinancialColumns>) -> Result<()> {
        let mut w = writer(path, schema.delimiter_byte()?)?;
        let c = &schema.columns;
        let io = |e| Error::csv(path, e);
        w.write_record([
            &c.firm_id,
            &c.year,
            &c.employees,
            &c.operating_revenue,
            &c.net_income,
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                self.firms.name(r.firm).to_string(),
                r.year.to_string(),
                r.employees.map(|e| e.to_string()).unwrap_or_default(),
                opt(r.operating_revenue),
                opt(r.net_income),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_financials(
    path: &Path,
    schema: &TableSchema<FinancialColumns>,
) -> Result<(FinancialPanel, LoadReport)> {
    let c = &schema.columns;
    let (reader, positions) = open_table(
        path,
        schema.delimiter_byte()?,
        &[
            &c.firm_id,
            &c.year,
            &c.employees,
            &c.operating_revenue,
            &c.net_income,
        ],
    )?;
    let mut report = LoadReport::default();
    let mut ids = ArrivalIds::default();
    let mut records: Vec<(u64, FinancialRecord)> = Vec::new();
    for_each_row(path, reader, &positions, &mut report, |line, f, report| {
        let year = match f[1].parse::<i32>() {
            Ok(y) => y,
            Err(_) => return report.reject(line, format!("unparseable year {:?}", f[1])),
        };
        if f[0].is_empty() {
            return report.reject(line, "empty firm id");
        }
        if let Some(reason) = schema.check_year(year) {
            return report.reject(line, reason);
        }
        let employees = if f[2].is_empty() {
            None
        } else {
            match parse_count(f[2]) {
                Some(0) => return report.reject(line, "employees must be at least 1"),
                Some(n) => Some(n),
                None => return report.reject(line, format!("unparseable employees {:?}", f[2])),
            }
        };
        let Ok(operating_revenue) = parse_optional(f[3]) else {
            return report.reject(line, format!("unparseable operating revenue {:?}", f[3]));
        };
        let Ok(net_income) = parse_optional(f[4]) else {
            return report.reject(line, format!("unparseable net income {:?}", f[4]));
        };
        records.push((
            line,
            FinancialRecord {
                firm: ids.intern(f[0]),
                year,
                employees,
                operating_revenue,
                net_income,
            },
        ));
    })?;

    let (firms, remap) = ids.finish();
    for (_, r) in &mut records {
        r.firm = remap[r.firm as usize];
    }
    records.sort_by_key(|(line, r)| (r.firm, r.year, *line));
    let mut kept: Vec<FinancialRecord> = Vec::with_capacity(records.len());
    for (line, r) in records {
        match kept.last() {
            Some(prev) if prev.firm == r.firm && prev.year == r.year => {
                report.reject(line, format!("duplicate record for {} {}", firms.name(r.firm), r.year));
            }
            _ => kept.push(r),
        }
    }
    report.accepted = kept.len();
    report.rejected.sort_by_key(|r| r.line);
    Ok((
        FinancialPanel {
            firms,
            records: kept,
        },
        report,
    ))
}

// ---------------------------------------------------------------------------
// GDP
// ---------------------------------------------------------------------------

/// GDP per capita by country. All values are strictly positive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GdpTable {
    values: BTreeMap<String, f64>,
}

impl GdpTable {
    pub fn new(values: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((c, v)) = values.iter().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Validation(format!(
                "GDP per capita for {c} is {v}; its logarithm is undefined"
            )));
        }
        Ok(GdpTable { values })
    }

    pub fn get(&self, country: &str) -> Option<f64> {
        self.values.get(country).copied()
    }

    pub fn ln(&self, country: &str) -> Option<f64> {
        self.get(country).map(f64::ln)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.values.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn write_csv(&self, path: &Path, schema: &TableSchema<GdpColumns>) -> Result<()> {
        let mut w = writer(path, schema.delimiter_byte()?)?;
        let io = |e| Error::csv(path, e);
        w.write_record([&schema.columns.country, &schema.columns.gdp_pc])
            .map_err(io)?;
        for (c, v) in &self.values {
            w.write_record([c.as_str(), &v.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loads GDP per capita. A non-positive value is fatal: every country's log
/// GDP must exist. Unparseable rows are rejected, repeated countries are fatal.
pub fn load_gdp(path: &Path, schema: &TableSchema<GdpColumns>) -> Result<(GdpTable, LoadReport)> {
    let c = &schema.columns;
    let (reader, positions) = open_table(path, schema.delimiter_byte()?, &[&c.country, &c.gdp_pc])?;
    let mut report = LoadReport::default();
    let mut values = BTreeMap::new();
    let mut fatal: Option<Error> = None;
    for_each_row(path, reader, &positions, &mut report, |line, f, report| {
        if fatal.is_some() {
            return;
        }
        if f[0].is_empty() {
            return report.reject(line, "empty country code");
        }
        let Some(v) = parse_value(f[1]) else {
            return report.reject(line, format!("unparseable GDP per capita {:?}", f[1]));
        };
        if v <= 0.0 {
            fatal = Some(Error::Validation(format!(
                "{} line {line}: GDP per capita {v} for {} is not positive; log GDP is undefined",
                path.display(),
                f[0]
            )));
            return;
        }
        if values.insert(f[0].to_string(), v).is_some() {
            fatal = Some(Error::Validation(format!(
                "{} line {line}: duplicate country {}",
                path.display(),
                f[0]
            )));
            return;
        }
        report.accepted += 1;
        report.accepted_value += v;
    })?;
    if let Some(e) = fatal {
        return Err(e);
    }
    Ok((GdpTable::new(values)?, report))
}

// ---------------------------------------------------------------------------
// World trade
// ---------------------------------------------------------------------------

/// Country × product export values, aggregated over whatever period the
/// source covers. Cells are unique and sorted by (country, product).
#[derive(Debug, Clone, PartialEq)]
pub struct WorldTrade {
    countries: Interner,
    products: Interner,
    cells: Vec<(u32, u32, f64)>,
}

impl WorldTrade {
    pub fn from_rows<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, f64)>,
    {
        let mut countries = ArrivalIds::default();
        let mut products = ArrivalIds::default();
        let mut cells = Vec::new();
        for (country, hs6, value) in rows {
            if !is_hs6(hs6) {
                return Err(Error::Validation(format!("malformed HS6 code {hs6:?}")));
            }
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::Validation(format!("invalid trade value {value}")));
            }
            cells.push((countries.intern(country), products.intern(hs6), value));
        }
        Ok(Self::finish(countries, products, cells).0)
    }

    fn finish(
        countries: ArrivalIds,
        products: ArrivalIds,
        mut cells: Vec<(u32, u32, f64)>,
    ) -> (Self, usize) {
        let (countries, cmap) = countries.finish();
        let (products, pmap) = products.finish();
        for c in &mut cells {
            c.0 = cmap[c.0 as usize];
            c.1 = pmap[c.1 as usize];
        }
        cells.sort_by_key(|c| (c.0, c.1));
        let before = cells.len();
        cells.dedup_by(|later, kept| {
            if later.0 == kept.0 && later.1 == kept.1 {
                kept.2 += later.2;
                true
            } else {
                false
            }
        });
        let merged = before - cells.len();
        (
            WorldTrade {
                countries,
                products,
                cells,
            },
            merged,
        )
    }

    pub fn countries(&self) -> &Interner {
        &self.countries
    }

    pub fn products(&self) -> &Interner {
        &self.products
    }

    pub fn cells(&self) -> &[(u32, u32, f64)] {
        &self.cells
    }

    pub fn write_csv(&self, path: &Path, schema: &TableSchema<WorldTradeColumns>) -> Result<()> {
        let mut w = writer(path, schema.delimiter_byte()?)?;
        let c = &schema.columns;
        let io = |e| Error::csv(path, e);
        w.write_record([&c.country, &c.product, &c.value]).map_err(io)?;
        for &(country, product, value) in &self.cells {
            w.write_record([
                self.countries.name(country),
                self.products.name(product),
                &value.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_world_trade(
    path: &Path,
    schema: &TableSchema<WorldTradeColumns>,
) -> Result<(WorldTrade, LoadReport)> {
    let c = &schema.columns;
    let (reader, positions) = open_table(
        path,
        schema.delimiter_byte()?,
        &[&c.country, &c.product, &c.value],
    )?;
    let mut report = LoadReport::default();
    let mut countries = ArrivalIds::default();
    let mut products = ArrivalIds::default();
    let mut cells = Vec::new();
    for_each_row(path, reader, &positions, &mut report, |line, f, report| {
        let value = parse_value(f[2]);
        let problem = if f[0].is_empty() {
            Some("empty country code".to_string())
        } else if !is_hs6(f[1]) {
            Some(format!("malformed HS6 code {:?}", f[1]))
        } else {
            match value {
                None => Some(format!("unparseable value {:?}", f[2])),
                Some(v) if v < 0.0 => Some(format!("negative value {v}")),
                Some(v) => {
                    cells.push((countries.intern(f[0]), products.intern(f[1]), v));
                    report.accepted += 1;
                    report.accepted_value += v;
                    None
                }
            }
        };
        if let Some(reason) = problem {
            if let Some(v) = value {
                report.rejected_value += v;
            }
            report.reject(line, reason);
        }
    })?;
    let (table, merged) = WorldTrade::finish(countries, products, cells);
    report.merged_duplicates = merged;
    Ok((table, report))
}

// ---------------------------------------------------------------------------
// HS classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsEntry {
    pub hs4: String,
    pub section: u8,
}

/// HS6 → (HS4 heading, section) with the 21 section labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsMap {
    entries: BTreeMap<String, HsEntry>,
    section_labels: BTreeMap<u8, String>,
}

/// One row of the HS map, as accepted by [`HsMap::new`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsRow {
    pub hs6: String,
    pub hs4: String,
    pub section: u8,
    pub label: String,
}

impl HsRow {
    fn problem(&self) -> Option<String> {
        if !is_hs6(&self.hs6) {
            Some(format!("malformed HS6 code {:?}", self.hs6))
        } else if !is_hs4(&self.hs4) || !self.hs6.starts_with(&self.hs4) {
            Some(format!("HS4 {:?} is not the prefix of {}", self.hs4, self.hs6))
        } else if !(1..=HS_SECTIONS).contains(&self.section) {
            Some(format!("section {} outside 1..={HS_SECTIONS}", self.section))
        } else {
            None
        }
    }
}

impl HsMap {
    /// Validates rows and the table-level invariant that all 21 sections are
    /// present with one label each.
    pub fn new(rows: Vec<HsRow>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section_labels: BTreeMap<u8, String> = BTreeMap::new();
        for row in rows {
            if let Some(p) = row.problem() {
                return Err(Error::Validation(p));
            }
            Self::insert(&mut entries, &mut section_labels, row)?;
        }
        Self::from_parts(entries, section_labels)
    }

    fn insert(
        entries: &mut BTreeMap<String, HsEntry>,
        labels: &mut BTreeMap<u8, String>,
        row: HsRow,
    ) -> Result<()> {
        match labels.get(&row.section) {
            Some(l) if *l != row.label => {
                return Err(Error::Validation(format!(
                    "section {} labelled both {l:?} and {:?}",
                    row.section, row.label
                )))
            }
            Some(_) => {}
            None => {
                labels.insert(row.section, row.label.clone());
            }
        }
        if entries.contains_key(&row.hs6) {
            return Err(Error::Validation(format!("duplicate HS6 code {}", row.hs6)));
        }
        entries.insert(
            row.hs6,
            HsEntry {
                hs4: row.hs4,
                section: row.section,
            },
        );
        Ok(())
    }

    fn from_parts(
        entries: BTreeMap<String, HsEntry>,
        section_labels: BTreeMap<u8, String>,
    ) -> Result<Self> {
        let sections: BTreeSet<u8> = entries.values().map(|e| e.section).collect();
        if sections.len() != HS_SECTIONS as usize {
            return Err(Error::Validation(format!(
                "HS map covers {} sections, expected {HS_SECTIONS}",
                sections.len()
            )));
        }
        Ok(HsMap {
            entries,
            section_labels,
        })
    }

    pub fn get(&self, hs6: &str) -> Option<&HsEntry> {
        self.entries.get(hs6)
    }

    pub fn hs4(&self, hs6: &str) -> Option<&str> {
        self.entries.get(hs6).map(|e| e.hs4.as_str())
    }

    pub fn section(&self, hs6: &str) -> Option<u8> {
        self.entries.get(hs6).map(|e| e.section)
    }

    pub fn section_label(&self, section: u8) -> Option<&str> {
        self.section_labels.get(&section).map(String::as_str)
    }

    /// Section of an HS4 heading, taken from any HS6 code under it.
    pub fn heading_section(&self, hs4: &str) -> Option<u8> {
        self.entries
            .range(hs4.to_string()..)
            .next()
            .filter(|(k, _)| k.starts_with(hs4))
            .map(|(_, e)| e.section)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &HsEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Fails when any product of the panel has no HS map entry.
    pub fn check_covers(&self, products: &Interner) -> Result<()> {
        let missing: Vec<&str> = products
            .names()
            .iter()
            .filter(|p| !self.entries.contains_key(p.as_str()))
            .map(String::as_str)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{} HS6 codes missing from the HS map (first: {})",
                missing.len(),
                missing[0]
            )))
        }
    }

    pub fn write_csv(&self, path: &Path, schema: &TableSchema<HsMapColumns>) -> Result<()> {
        let mut w = writer(path, schema.delimiter_byte()?)?;
        let c = &schema.columns;
        let io = |e| Error::csv(path, e);
        w.write_record([&c.hs6, &c.hs4, &c.section_index, &c.section_label])
            .map_err(io)?;
        for (hs6, e) in &self.entries {
            w.write_record([
                hs6.as_str(),
                e.hs4.as_str(),
                &e.section.to_string(),
                self.section_labels[&e.section].as_str(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_hs_map(path: &Path, schema: &TableSchema<HsMapColumns>) -> Result<(HsMap, LoadReport)> {
    let c = &schema.columns;
    let (reader, positions) = open_table(
        path,
        schema.delimiter_byte()?,
        &[&c.hs6, &c.hs4, &c.section_index, &c.section_label],
    )?;
    let mut report = LoadReport::default();
    let mut entries = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for_each_row(path, reader, &positions, &mut report, |line, f, report| {
        let Ok(section) = f[2].parse::<u8>() else {
            return report.reject(line, format!("unparseable section index {:?}", f[2]));
        };
        let row = HsRow {
            hs6: f[0].to_string(),
            hs4: f[1].to_string(),
            section,
            label: f[3].to_string(),
        };
        if let Some(p) = row.problem() {
            return report.reject(line, p);
        }
        match HsMap::insert(&mut entries, &mut labels, row) {
            Ok(()) => report.accepted += 1,
            Err(e) => report.reject(line, e.to_string()),
        }
    })?;
    Ok((HsMap::from_parts(entries, labels)?, report))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    pub(crate) fn full_hs_rows() -> Vec<HsRow> {
        (1..=HS_SECTIONS)
            .map(|s| HsRow {
                hs6: format!("{:04}01", 200 + s as u32),
                hs4: format!("{:04}", 200 + s as u32),
                section: s,
                label: format!("Section {s}"),
            })
            .collect()
    }

    #[test]
    fn malformed_product_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "e.csv",
            "firm_id,hs6,year,value\nf1,010101,2000,5\nf1,12AB56,2000,1\nf2,010102,2000,3\nf2,010101,2001,4\n",
        );
        let (panel, report) = load_exports(&path, &TableSchema::default()).unwrap();
        assert_eq!(panel.records().len(), 3);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].line, 3);
        assert!(report.rejected[0].reason.contains("12AB56"));
        assert_eq!(report.accepted_value + report.rejected_value, 13.0);
    }

    #[test]
    fn duplicates_are_summed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "e.csv",
            "firm_id,hs6,year,value\nf1,010101,2000,5\nf1,010101,2000,7\n",
        );
        let (panel, report) = load_exports(&path, &TableSchema::default()).unwrap();
        assert_eq!(panel.records().len(), 1);
        assert_eq!(panel.records()[0].value, 12.0);
        assert_eq!(report.merged_duplicates, 1);
    }

    #[test]
    fn header_only_file_is_empty_panel() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "e.csv", "firm_id,hs6,year,value\n");
        let (panel, report) = load_exports(&path, &TableSchema::default()).unwrap();
        assert!(panel.is_empty());
        assert!(report.rejected.is_empty());
    }

    #[test]
    fn column_mapping_and_delimiter() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "e.csv", "v;yr;code;id\n2.5;1999;010101;a\n");
        let schema = TableSchema {
            delimiter: ';',
            columns: ExportColumns {
                firm_id: "id".into(),
                product: "code".into(),
                year: "yr".into(),
                value: "v".into(),
            },
            years: Some((1990, 2000)),
        };
        let (panel, _) = load_exports(&path, &schema).unwrap();
        assert_eq!(panel.firms().names(), ["a"]);
        assert_eq!(panel.records()[0].value, 2.5);
    }

    #[test]
    fn missing_header_column_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "e.csv", "firm_id,hs6,value\n");
        let err = load_exports(&path, &TableSchema::default()).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn unreadable_file_is_fatal() {
        let err = load_exports(Path::new("/nonexistent/e.csv"), &TableSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn year_window_rejects_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "e.csv", "firm_id,hs6,year,value\nf,010101,1980,1\n");
        let schema = TableSchema {
            years: Some((1993, 2017)),
            ..TableSchema::default()
        };
        let (panel, report) = load_exports(&path, &schema).unwrap();
        assert!(panel.is_empty());
        assert_eq!(report.rejected.len(), 1);
    }

    #[test]
    fn persistence_filter_definition() {
        let mut rows = Vec::new();
        for y in 1993..=2017 {
            rows.push(("A", "010101", y, 1.0));
            if y != 2001 {
                rows.push(("B", "010102", y, 1.0));
            }
        }
        let panel = ExportPanel::from_rows(rows).unwrap();
        let kept = filter_persistent_firms(&panel, (1993, 2017)).unwrap();
        assert_eq!(kept.firms().names(), ["A"]);
        assert_eq!(kept.products().names(), ["010101"]);
        let one_year = filter_persistent_firms(&panel, (2001, 2001)).unwrap();
        assert_eq!(one_year.firms().names(), ["A"]);
        let both = filter_persistent_firms(&panel, (2002, 2003)).unwrap();
        assert_eq!(both.firms().len(), 2);
        assert!(filter_persistent_firms(&panel, (2003, 2002)).is_err());
    }

    #[test]
    fn zero_values_do_not_count_as_activity() {
        let panel = ExportPanel::from_rows([("A", "010101", 2000, 0.0), ("A", "010101", 2001, 1.0)]).unwrap();
        assert!(filter_persistent_firms(&panel, (2000, 2001)).unwrap().is_empty());
    }

    #[test]
    fn gdp_zero_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "g.csv", "country,gdp_pc\nITA,30000\nXXX,0\n");
        let err = load_gdp(&path, &TableSchema::default()).unwrap_err();
        assert!(err.to_string().contains("log GDP is undefined"), "{err}");
    }

    #[test]
    fn financial_zero_employees_rejected_and_gaps_kept_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "f.csv",
            "firm_id,year,employees,operating_revenue,net_income\n\
             f1,2013,0,100,5\nf1,2014,10,,-3\nf1,2014,11,1,1\nf2,2013,3,50,\n",
        );
        let (panel, report) = load_financials(&path, &TableSchema::default()).unwrap();
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.rejected[0].line, 2);
        assert!(report.rejected[1].reason.contains("duplicate"));
        let r = panel.get("f1", 2014).unwrap();
        assert_eq!(r.operating_revenue, None);
        assert_eq!(r.net_income, Some(-3.0));
        assert!(panel.get("f1", 2013).is_none());
        assert_eq!(panel.get("f2", 2013).unwrap().net_income, None);
    }

    #[test]
    fn hs_map_requires_all_sections() {
        let rows = full_hs_rows();
        let map = HsMap::new(rows.clone()).unwrap();
        assert_eq!(map.section("010101"), None);
        assert_eq!(map.section(&rows[4].hs6), Some(5));
        assert_eq!(map.heading_section("0205"), Some(5));
        let mut short = rows;
        short.pop();
        assert!(HsMap::new(short).is_err());
    }

    #[test]
    fn hs_map_rejects_non_prefix_heading() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("hs6,hs4,section_index,section_label\n");
        for r in full_hs_rows() {
            body.push_str(&format!("{},{},{},{}\n", r.hs6, r.hs4, r.section, r.label));
        }
        body.push_str("999901,1234,3,Section 3\n");
        let path = write_file(&dir, "h.csv", &body);
        let (map, report) = load_hs_map(&path, &TableSchema::default()).unwrap();
        assert_eq!(map.len(), 21);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].line, 23);
    }

    #[test]
    fn world_trade_duplicates_sum() {
        let t = WorldTrade::from_rows([("ITA", "010101", 1.0), ("DEU", "010101", 2.0), ("ITA", "010101", 3.0)]).unwrap();
        assert_eq!(t.countries().names(), ["DEU", "ITA"]);
        assert_eq!(t.cells(), &[(0, 0, 2.0), (1, 0, 4.0)]);
    }
}
