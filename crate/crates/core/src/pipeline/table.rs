//! Delimited latency table: `scope,window,total_ms,cpu_ms,gpu_ms,comm_ms,overlap_ms`.
//!
//! `scope` is `iteration`, `kind` (one row per window kind) or `window` (one
//! window instance, written as `L<layer>/<KIND>`). Numbers use a fixed
//! number of decimals per table, which keeps parse → render lossless.

use super::trace::{ProfileRecord, Scope};
use crate::error::{Error, Result};
use crate::ids::WindowKind;

pub const HEADER: [&str; 7] = ["scope", "window", "total_ms", "cpu_ms", "gpu_ms", "comm_ms", "overlap_ms"];

/// Published per-token decode breakdown of the reference system, one row per
/// iteration and window kind.
pub const REFERENCE_PROFILE: &str = "\
scope,window,total_ms,cpu_ms,gpu_ms,comm_ms,overlap_ms
iteration,,128.33,67.99,87.04,3.10,57.54
kind,ATT_QKV,13.15,2.74,3.05,1.01,2.39
kind,ATT_O,4.69,1.22,1.36,0.33,1.06
kind,FFN_UPGATE,68.07,66.39,57.28,1.08,56.67
kind,FFN_DOWN,32.13,31.22,25.35,0.68,25.12
";

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub scope: String,
    pub window: String,
    /// total, cpu, gpu, comm, overlap
    pub values: [f64; 5],
}

impl ProfileRow {
    pub fn total_ms(&self) -> f64 {
        self.values[0]
    }
    pub fn cpu_ms(&self) -> f64 {
        self.values[1]
    }
    pub fn gpu_ms(&self) -> f64 {
        self.values[2]
    }
    pub fn comm_ms(&self) -> f64 {
        self.values[3]
    }
    pub fn overlap_ms(&self) -> f64 {
        self.values[4]
    }

    pub fn check(&self) -> Result<()> {
        if self.values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Format(format!("{} {}: negative duration", self.scope, self.window)));
        }
        if self.overlap_ms() > self.cpu_ms().min(self.gpu_ms()) {
            return Err(Error::Format(format!(
                "{} {}: overlap {} exceeds min(cpu, gpu)",
                self.scope,
                self.window,
                self.overlap_ms()
            )));
        }
        if self.comm_ms() > self.total_ms() {
            return Err(Error::Format(format!("{} {}: comm exceeds total", self.scope, self.window)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub decimals: usize,
    pub rows: Vec<ProfileRow>,
}

fn fmt_err(e: csv::Error) -> Error {
    Error::Format(format!("profile table: {e}"))
}

fn decimals_of(field: &str) -> usize {
    field.split_once('.').map_or(0, |(_, frac)| frac.len())
}

impl ProfileTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(fmt_err)?.clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Format(format!("unexpected profile header {:?}", header)));
        }
        let mut decimals = None;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(fmt_err)?;
            let mut values = [0.0; 5];
            for (i, v) in values.iter_mut().enumerate() {
                let field = &rec[i + 2];
                let d = decimals_of(field);
                if *decimals.get_or_insert(d) != d {
                    return Err(Error::Format(format!("field {field:?} breaks the table's decimal precision")));
                }
                *v = field
                    .parse()
                    .map_err(|_| Error::Format(format!("field {field:?} is not a number")))?;
            }
            let row = ProfileRow {
                scope: rec[0].to_string(),
                window: rec[1].to_string(),
                values,
            };
            if !matches!(row.scope.as_str(), "iteration" | "kind" | "window") {
                return Err(Error::Format(format!("unknown scope {:?}", row.scope)));
            }
            rows.push(row);
        }
        Ok(Self {
            decimals: decimals.unwrap_or(3),
            rows,
        })
    }

    pub fn render(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.rows {
            let mut fields = vec![r.scope.clone(), r.window.clone()];
            fields.extend(r.values.iter().map(|v| format!("{:.*}", self.decimals, v)));
            w.write_record(&fields).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii table")
    }

    pub fn check(&self) -> Result<()> {
        self.rows.iter().try_for_each(ProfileRow::check)
    }

    pub fn from_records(records: &[ProfileRecord], decimals: usize) -> Self {
        let rows = records
            .iter()
            .map(|r| {
                let (scope, window) = match &r.scope {
                    Scope::Iteration => ("iteration", String::new()),
                    Scope::Kind(k) => ("kind", k.name().to_string()),
                    Scope::Window(w) => ("window", w.to_string()),
                };
                ProfileRow {
                    scope: scope.to_string(),
                    window,
                    values: [r.total_ms, r.cpu_ms, r.gpu_ms, r.comm_ms, r.overlap_ms],
                }
            })
            .collect();
        Self { decimals, rows }
    }

    pub fn iteration(&self) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.scope == "iteration")
    }

    pub fn kind(&self, k: WindowKind) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.scope == "kind" && r.window == k.name())
    }

    /// Aligned plain-text rendering for reports.
    pub fn pretty(&self) -> String {
        let mut s = format!(
            "{:<10} {:<16} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "scope", "window", "total", "cpu", "gpu", "comm", "overlap"
        );
        for r in &self.rows {
            s.push_str(&format!("{:<10} {:<16}", r.scope, r.window));
            for v in r.values {
                s.push_str(&format!(" {:>10.*}", self.decimals, v));
            }
            s.push('\n');
        }
        s
    }
}
