//! Result tables, CSV and plot series with a provenance header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::objective::SweepPoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    PlotData,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" => Ok(ReportFormat::PlotData),
            other => Err(Error::validation(format!("unknown report format {other:?} (table|csv|plotdata)"))),
        }
    }
}

/// Written as `#` comment lines ahead of every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    fn header(&self) -> String {
        format!(
            "# seed={}\n# version={}\n# config_hash={}\n",
            self.seed, self.version, self.config_hash
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<f64>,
}

impl TableRow {
    pub fn average(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Models × datasets, rendered with a trailing average column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::validation(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push(TableRow {
            label: label.into(),
            values,
        });
        Ok(())
    }

    /// Fixed-width text table; values are printed as percentages.
    pub fn render_table(&self, provenance: &Provenance) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).chain([5]).max().unwrap_or(5);
        let headers: Vec<&str> = self.columns.iter().map(String::as_str).chain(["Avg."]).collect();
        let col_w: Vec<usize> = headers.iter().map(|h| h.len().max(6)).collect();
        let mut out = provenance.header();
        let _ = write!(out, "{:<label_w$}", "Model");
        for (h, w) in headers.iter().zip(&col_w) {
            let _ = write!(out, " | {h:>w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_w + col_w.iter().map(|w| w + 3).sum::<usize>()));
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<label_w$}", row.label);
            for (v, w) in row.values.iter().chain([row.average()].iter()).zip(&col_w) {
                let _ = write!(out, " | {:>w$.1}", v * 100.0);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self, provenance: &Provenance) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_owned()];
        header.extend(self.columns.iter().cloned());
        header.push("avg".to_owned());
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            rec.extend(row.values.iter().map(|v| v.to_string()));
            rec.push(row.average().to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::validation(e.to_string()))?)
            .map_err(|e| Error::validation(e.to_string()))?;
        Ok(provenance.header() + &body)
    }

    /// Parse what [`ResultTable::to_csv`] wrote. The average column is
    /// recomputed, not trusted.
    pub fn from_csv(text: &str) -> Result<(Self, Provenance)> {
        let provenance = parse_header(text)?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() < 2 || &headers[0] != "model" || &headers[headers.len() - 1] != "avg" {
            return Err(Error::validation("csv header must be model,...,avg"));
        }
        let columns: Vec<String> = headers.iter().skip(1).take(headers.len() - 2).map(str::to_owned).collect();
        let mut table = ResultTable::new(columns);
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let values = rec
                .iter()
                .skip(1)
                .take(rec.len().saturating_sub(2))
                .map(|v| v.parse::<f64>().map_err(|e| Error::validation(format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            table.push(&rec[0], values)?;
        }
        Ok((table, provenance))
    }

    pub fn load_csv(path: &Path) -> Result<(Self, Provenance)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::validation(format!("csv: {e}"))
}

fn parse_header(text: &str) -> Result<Provenance> {
    let mut p = Provenance::default();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
            match k {
                "seed" => p.seed = v.parse().map_err(|_| Error::validation(format!("bad seed {v:?}")))?,
                "version" => p.version = v.to_owned(),
                "config_hash" => p.config_hash = v.to_owned(),
                _ => {}
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Long-format `series,x,y` CSV.
pub fn render_plotdata(series: &[PlotSeries], provenance: &Provenance) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "x", "y"]).map_err(csv_err)?;
    for s in series {
        for (x, y) in &s.points {
            w.write_record([s.name.clone(), x.to_string(), y.to_string()])
                .map_err(csv_err)?;
        }
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::validation(e.to_string()))?)
        .map_err(|e| Error::validation(e.to_string()))?;
    Ok(provenance.header() + &body)
}

/// Mean accuracy per fraction across seeds.
pub fn sweep_series(name: &str, points: &[SweepPoint]) -> PlotSeries {
    let mut by_fraction: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for p in points {
        let e = by_fraction.entry(p.fraction.to_bits()).or_insert((p.fraction, 0.0, 0));
        e.1 += p.accuracy;
        e.2 += 1;
    }
    let mut pts: Vec<(f64, f64)> = by_fraction.values().map(|&(f, s, n)| (f, s / n as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    PlotSeries {
        name: name.to_owned(),
        points: pts,
    }
}
