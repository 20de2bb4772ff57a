//! CSV tables with a stable, byte-reproducible rendering.

use std::fmt::Write as _;

/// Formats a float so that it parses back to the same bits. Plain decimal
/// inside `[1e-4, 1e15)`, scientific outside.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One CSV artifact: a file name, a fixed header and string rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, header: &[&'static str]) -> Self {
        Self { file: file.to_string(), header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width for {}", self.file);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Key/value lines collected from every pipeline into `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary(Table);

impl Default for Summary {
    fn default() -> Self {
        Summary(Table::new("summary.csv", &["pipeline", "key", "metric", "value"]))
    }
}

impl Summary {
    pub fn add(&mut self, pipeline: &str, key: &str, metric: &str, value: impl ToString) {
        self.0.push(vec![pipeline.into(), key.into(), metric.into(), value.to_string()]);
    }

    pub fn add_num(&mut self, pipeline: &str, key: &str, metric: &str, value: f64) {
        self.add(pipeline, key, metric, num(value));
    }

    pub fn table(&self) -> &Table {
        &self.0
    }

    pub fn into_table(self) -> Table {
        self.0
    }

    /// First value recorded under `(pipeline, key, metric)`.
    pub fn get(&self, pipeline: &str, key: &str, metric: &str) -> Option<&str> {
        self.0
            .rows
            .iter()
            .find(|r| r[0] == pipeline && r[1] == key && r[2] == metric)
            .map(|r| r[3].as_str())
    }
}
