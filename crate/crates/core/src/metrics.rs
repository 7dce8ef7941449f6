//! Per-epoch diagnostics and their CSV serialization.

use std::path::Path;

use crate::error::{Error, Result};

/// Schema version of every CSV this crate writes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "d_loss",
    "g_loss",
    "clean_train_acc",
    "clean_test_acc",
    "robust_train_acc",
    "robust_test_acc",
    "llv_train",
    "llv_test",
    "oracle_score",
    "g_step_norm",
    "d_input_grad_norm_on_fake",
];

/// One row per epoch. Fields that do not apply to a training mode (for
/// example generator diagnostics of a classifier-only run) are `None` and
/// serialize as empty cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub clean_train_acc: Option<f64>,
    pub clean_test_acc: Option<f64>,
    pub robust_train_acc: Option<f64>,
    pub robust_test_acc: Option<f64>,
    pub llv_train: Option<f64>,
    pub llv_test: Option<f64>,
    /// Oracle conditional accuracy of generated samples.
    pub oracle_score: Option<f64>,
    pub g_step_norm: Option<f64>,
    pub d_input_grad_norm_on_fake: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str, col: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Format {
        offset: line,
        reason: format!("column {col}: {s:?} is not a number"),
    })
}

impl MetricsRecord {
    pub fn cells(&self) -> Vec<String> {
        let mut out = vec![self.epoch.to_string()];
        out.extend(
            [
                self.d_loss,
                self.g_loss,
                self.clean_train_acc,
                self.clean_test_acc,
                self.robust_train_acc,
                self.robust_test_acc,
                self.llv_train,
                self.llv_test,
                self.oracle_score,
                self.g_step_norm,
                self.d_input_grad_norm_on_fake,
            ]
            .into_iter()
            .map(cell),
        );
        out
    }

    /// Accuracies lie in [0, 1] and norms are non-negative.
    pub fn check(&self) -> Result<()> {
        let accs = [
            self.clean_train_acc,
            self.clean_test_acc,
            self.robust_train_acc,
            self.robust_test_acc,
            self.oracle_score,
        ];
        if accs.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Validation(format!("accuracy outside [0, 1] in {self:?}")));
        }
        let norms = [
            self.llv_train,
            self.llv_test,
            self.g_step_norm,
            self.d_input_grad_norm_on_fake,
        ];
        if norms.iter().flatten().any(|n| !(*n >= 0.0)) {
            return Err(Error::Validation(format!("negative norm in {self:?}")));
        }
        Ok(())
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let write_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(write_err)?;
    for r in records {
        w.write_record(r.cells()).map_err(write_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Format {
        offset: 0,
        reason: format!("csv header: {e}"),
    })?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format {
            offset: 0,
            reason: format!("unexpected metrics header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Format {
            offset: line,
            reason: format!("csv row: {e}"),
        })?;
        let get = |j: usize| parse_cell(&row[j], METRICS_HEADER[j], line);
        out.push(MetricsRecord {
            epoch: row[0].parse().map_err(|_| Error::Format {
                offset: line,
                reason: format!("bad epoch {:?}", &row[0]),
            })?,
            d_loss: get(1)?,
            g_loss: get(2)?,
            clean_train_acc: get(3)?,
            clean_test_acc: get(4)?,
            robust_train_acc: get(5)?,
            robust_test_acc: get(6)?,
            llv_train: get(7)?,
            llv_test: get(8)?,
            oracle_score: get(9)?,
            g_step_norm: get(10)?,
            d_input_grad_norm_on_fake: get(11)?,
        });
    }
    Ok(out)
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, metrics_csv(records)?.as_bytes())
}
