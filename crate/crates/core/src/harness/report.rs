//! Experiment reports: mean-confidence tables with the config and seeds
//! that produced them.
//!
//! The CSV form has one record per item, `kind,key,train,test`:
//!
//! ```text
//! kind,key,train,test
//! name,noise-patch-baseline,,
//! row,Original image,0.93,0.95
//! note,patch_size,23,
//! seed,dataset,1234,
//! config,epsilon,2,
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub train: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<ReportRow>,
    /// Derived quantities, e.g. the smallest effective patch size.
    pub notes: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub config: Vec<(String, String)>,
    /// Training-set size shown in the column header.
    pub n_train: usize,
    pub n_test: usize,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn note(&self, key: &str) -> Option<&str> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push_row(&mut self, label: impl Into<String>, train: f64, test: f64) {
        self.rows.push(ReportRow { label: label.into(), train, test });
    }

    pub fn push_note(&mut self, key: impl Into<String>, value: impl ToString) {
        self.notes.push((key.into(), value.to_string()));
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "key", "train", "test"])?;
        w.write_record(["name", &self.name, "", ""])?;
        w.write_record(["split", "", &self.n_train.to_string(), &self.n_test.to_string()])?;
        for r in &self.rows {
            w.write_record(["row", &r.label, &r.train.to_string(), &r.test.to_string()])?;
        }
        for (k, v) in &self.notes {
            w.write_record(["note", k, v, ""])?;
        }
        for (k, v) in &self.seeds {
            w.write_record(["seed", k, &v.to_string(), ""])?;
        }
        for (k, v) in &self.config {
            w.write_record(["config", k, v, ""])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::MalformedHeader(m);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut out = ExperimentReport::default();
        for rec in r.records() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).unwrap_or_default();
            let num = |k: usize| field(k).parse::<f64>().map_err(|_| bad(format!("bad number in {rec:?}")));
            let count = |k: usize| field(k).parse::<usize>().map_err(|_| bad(format!("bad count in {rec:?}")));
            match field(0) {
                "name" => out.name = field(1).to_string(),
                "split" => (out.n_train, out.n_test) = (count(2)?, count(3)?),
                "row" => out.push_row(field(1), num(2)?, num(3)?),
                "note" => out.push_note(field(1), field(2)),
                "seed" => out.seeds.push((field(1).into(), field(2).parse().map_err(|_| bad(format!("bad seed in {rec:?}")))?)),
                "config" => out.config.push((field(1).into(), field(2).into())),
                other => return Err(bad(format!("unknown report record kind {other:?}"))),
            }
        }
        Ok(out)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Aligned plain-text table followed by the notes.
    pub fn render(&self) -> String {
        let head = [
            "Condition".to_string(),
            format!("Mean training set confidence ({} images)", self.n_train),
            format!("Mean test set confidence ({} images)", self.n_test),
        ];
        let body: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [r.label.clone(), format!("{:.3}", r.train), format!("{:.3}", r.test)])
            .collect();
        let width = |k: usize| body.iter().map(|b| b[k].chars().count()).chain([head[k].chars().count()]).max().unwrap_or(0);
        let (w0, w1, w2) = (width(0), width(1), width(2));
        let mut out = String::new();
        writeln!(out, "{}", self.name).unwrap();
        writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", head[0], head[1], head[2]).unwrap();
        writeln!(out, "{}", "-".repeat(w0 + w1 + w2 + 4)).unwrap();
        for b in &body {
            writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", b[0], b[1], b[2]).unwrap();
        }
        for (k, v) in &self.notes {
            writeln!(out, "{k}: {v}").unwrap();
        }
        out
    }
}
