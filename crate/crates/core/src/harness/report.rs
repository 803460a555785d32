use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{param_err, Error, Result};
use crate::harness::{BatchReport, ConditionStats, EvalReport, SweepPoint};
use crate::quantlinear::OutlierPolicy;

/// Output encoding of [`write_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(param_err!("unknown report format {other:?}; expected json or csv")),
        }
    }
}

/// Header of every CSV report.
pub const CSV_HEADER: &str = "experiment,batch_size,policy,condition,outlier_count,f16_macs,int8_macs,bytes_moved,cost_units,accuracy_preserved_fraction,wall_clock_ms";

/// One CSV line: a condition of some experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionRow {
    pub experiment: &'static str,
    pub batch_size: Option<usize>,
    pub policy: Option<String>,
    pub condition: &'static str,
    pub outlier_count: u64,
    pub f16_macs: u64,
    pub int8_macs: u64,
    pub bytes_moved: u64,
    pub cost_units: f64,
    pub accuracy_preserved_fraction: f64,
    pub wall_clock_ms: Option<f64>,
}

impl ConditionRow {
    fn new(experiment: &'static str, condition: &'static str, s: &ConditionStats) -> Self {
        Self {
            experiment,
            batch_size: None,
            policy: None,
            condition,
            outlier_count: s.outlier_count,
            f16_macs: s.f16_macs,
            int8_macs: s.int8_macs,
            bytes_moved: s.bytes_moved,
            cost_units: s.cost_units,
            accuracy_preserved_fraction: s.accuracy_preserved_fraction,
            wall_clock_ms: s.wall_clock_ms,
        }
    }
}

/// Reports that flatten to one row per condition.
pub trait Tabular {
    fn rows(&self) -> Vec<ConditionRow>;
}

impl Tabular for EvalReport {
    fn rows(&self) -> Vec<ConditionRow> {
        vec![
            ConditionRow::new("baselines", "clean", &self.clean),
            ConditionRow::new("baselines", "random", &self.random),
            ConditionRow::new("baselines", "adversarial", &self.adversarial),
        ]
    }
}

impl Tabular for BatchReport {
    fn rows(&self) -> Vec<ConditionRow> {
        [("clean", &self.clean), ("contaminated", &self.contaminated)]
            .into_iter()
            .map(|(c, s)| ConditionRow {
                batch_size: Some(self.batch_size),
                ..ConditionRow::new("batch", c, s)
            })
            .collect()
    }
}

pub fn policy_label(p: OutlierPolicy) -> String {
    match p {
        OutlierPolicy::Unlimited => "unlimited".into(),
        OutlierPolicy::Capped(c) => format!("cap{c}"),
    }
}

impl Tabular for SweepPoint {
    fn rows(&self) -> Vec<ConditionRow> {
        [("clean", &self.clean), ("adversarial", &self.adversarial)]
            .into_iter()
            .map(|(c, s)| ConditionRow {
                policy: Some(policy_label(self.policy)),
                ..ConditionRow::new("sweep", c, s)
            })
            .collect()
    }
}

impl<T: Tabular> Tabular for [T] {
    fn rows(&self) -> Vec<ConditionRow> {
        self.iter().flat_map(Tabular::rows).collect()
    }
}

impl<T: Tabular> Tabular for Vec<T> {
    fn rows(&self) -> Vec<ConditionRow> {
        self.as_slice().rows()
    }
}

/// Renders a report as pretty JSON or as CSV with [`CSV_HEADER`].
pub fn render_report<R: Serialize + Tabular + ?Sized>(report: &R, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(CSV_HEADER.split(','))?;
            for row in report.rows() {
                w.serialize(row)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
        }
    }
}

pub fn write_report<R: Serialize + Tabular + ?Sized>(report: &R, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
