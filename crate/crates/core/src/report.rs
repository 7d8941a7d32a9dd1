//! Run reports, their CSV/JSON encodings and the report schema.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::train::EpochLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Local and global attention cost at one problem size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub feature_dim: usize,
    pub key_dim: usize,
    pub local_flops: u64,
    pub global_flops: u64,
    pub skipped: bool,
}

/// Deterministic outcome of one run. Wall-clock times live in [`Timings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: BTreeMap<String, String>,
    pub class_names: Vec<String>,
    pub train_iou: Vec<Option<f64>>,
    pub train_miou: Option<f64>,
    pub eval_iou: Vec<Option<f64>>,
    pub eval_miou: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub attention_flops: u64,
    pub peak_memory_bytes: u64,
    pub param_count: u64,
    pub bench: Vec<BenchRow>,
}

impl RunReport {
    /// Successful run with no metrics yet.
    pub fn new(name: &str, config: BTreeMap<String, String>) -> Self {
        Self {
            name: name.to_string(),
            status: RunStatus::Ok,
            error: None,
            config,
            class_names: Vec::new(),
            train_iou: Vec::new(),
            train_miou: None,
            eval_iou: Vec::new(),
            eval_miou: None,
            epochs: Vec::new(),
            attention_flops: 0,
            peak_memory_bytes: 0,
            param_count: 0,
            bench: Vec::new(),
        }
    }

    pub fn failed(name: &str, config: BTreeMap<String, String>, err: &Error) -> Self {
        Self {
            error: Some(err.to_string()),
            status: RunStatus::Failed,
            ..Self::new(name, config)
        }
    }
}

/// Named wall-clock measurements, kept apart from reports so that reports
/// stay bit-identical across repeated runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub entries: Vec<(String, f64)>,
}

impl Timings {
    pub fn push(&mut self, name: &str, d: Duration) {
        self.entries.push((name.to_string(), d.as_secs_f64()));
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "stage,seconds")?;
        for (n, s) in &self.entries {
            writeln!(out, "{n},{s:.6}")?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per training report; one row per size for benchmark reports.
pub fn write_reports_csv<W: Write>(mut out: W, reports: &[RunReport]) -> std::io::Result<()> {
    if !reports.is_empty() && reports.iter().all(|r| !r.bench.is_empty()) {
        writeln!(out, "name,n,k,feature_dim,key_dim,local_flops,global_flops,skipped")?;
        for r in reports {
            for b in &r.bench {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.name, b.n, b.k, b.feature_dim, b.key_dim, b.local_flops, b.global_flops, b.skipped
                )?;
            }
        }
        return Ok(());
    }
    writeln!(
        out,
        "name,status,seed,mode,k,n_past,aligned,train_miou,eval_miou,attention_flops,peak_memory_bytes,param_count,error"
    )?;
    for r in reports {
        let c = |k: &str| r.config.get(k).cloned().unwrap_or_default();
        let status = match r.status {
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            status,
            c("seed"),
            c("mode"),
            c("k"),
            c("n_past"),
            c("aligned"),
            opt(r.train_miou),
            opt(r.eval_miou),
            r.attention_flops,
            r.peak_memory_bytes,
            r.param_count,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        )?;
    }
    Ok(())
}

pub fn reports_to_json(reports: &[RunReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}

/// JSON Schema (draft 2020-12) for `report.json`.
pub const REPORT_SCHEMA: &str = r##"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "stela run reports",
  "type": "array",
  "items": {
    "type": "object",
    "required": ["name", "status", "error", "config", "class_names", "train_iou", "train_miou",
                 "eval_iou", "eval_miou", "epochs", "attention_flops", "peak_memory_bytes",
                 "param_count", "bench"],
    "additionalProperties": false,
    "properties": {
      "name": {"type": "string"},
      "status": {"enum": ["ok", "failed"]},
      "error": {"type": ["string", "null"]},
      "config": {"type": "object", "additionalProperties": {"type": "string"}},
      "class_names": {"type": "array", "items": {"type": "string"}},
      "train_iou": {"$ref": "#/$defs/iou_list"},
      "train_miou": {"$ref": "#/$defs/iou"},
      "eval_iou": {"$ref": "#/$defs/iou_list"},
      "eval_miou": {"$ref": "#/$defs/iou"},
      "epochs": {
        "type": "array",
        "items": {
          "type": "object",
          "required": ["stage", "epoch", "lr", "loss"],
          "additionalProperties": false,
          "properties": {
            "stage": {"enum": ["pretrain", "warmup", "finetune"]},
            "epoch": {"type": "integer", "minimum": 0},
            "lr": {"type": "number"},
            "loss": {"type": "number", "minimum": 0}
          }
        }
      },
      "attention_flops": {"type": "integer", "minimum": 0},
      "peak_memory_bytes": {"type": "integer", "minimum": 0},
      "param_count": {"type": "integer", "minimum": 0},
      "bench": {
        "type": "array",
        "items": {
          "type": "object",
          "required": ["n", "k", "feature_dim", "key_dim", "local_flops", "global_flops", "skipped"],
          "additionalProperties": false,
          "properties": {
            "n": {"type": "integer", "minimum": 1},
            "k": {"type": "integer", "minimum": 1},
            "feature_dim": {"type": "integer", "minimum": 1},
            "key_dim": {"type": "integer", "minimum": 1},
            "local_flops": {"type": "integer", "minimum": 0},
            "global_flops": {"type": "integer", "minimum": 0},
            "skipped": {"type": "boolean"}
          }
        }
      }
    }
  },
  "$defs": {
    "iou": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    "iou_list": {"type": "array", "items": {"$ref": "#/$defs/iou"}}
  }
}
"##;

/// Checks the invariants the schema states that serde cannot: value ranges
/// and the ok/failed field contract.
pub fn check_report(r: &RunReport) -> Result<()> {
    let in_unit = |v: &Option<f64>| v.is_none_or(|x| (0.0..=1.0).contains(&x));
    if !(in_unit(&r.train_miou)
        && in_unit(&r.eval_miou)
        && r.train_iou.iter().all(in_unit)
        && r.eval_iou.iter().all(in_unit))
    {
        return Err(Error::InvariantViolation(format!("{}: IoU outside [0, 1]", r.name)));
    }
    if r.epochs.iter().any(|e| !(e.loss.is_finite() && e.loss >= 0.0)) {
        return Err(Error::InvariantViolation(format!("{}: bad epoch loss", r.name)));
    }
    match r.status {
        RunStatus::Failed if r.error.is_none() => Err(Error::InvariantViolation(format!(
            "{}: failed run without error",
            r.name
        ))),
        _ => Ok(()),
    }
}

/// Parses `report.json` text back into reports and checks each.
pub fn parse_reports(json: &str) -> Result<Vec<RunReport>> {
    let v: Value = serde_json::from_str(json).map_err(|e| Error::Corruption(format!("report json: {e}")))?;
    let reports: Vec<RunReport> =
        serde_json::from_value(v).map_err(|e| Error::Corruption(format!("report json: {e}")))?;
    reports.iter().try_for_each(check_report)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            name: "x".into(),
            status: RunStatus::Ok,
            error: None,
            config: [("seed".to_string(), "1".to_string())].into(),
            class_names: vec!["a".into()],
            train_iou: vec![Some(0.5)],
            train_miou: Some(0.5),
            eval_iou: vec![None],
            eval_miou: None,
            epochs: vec![],
            attention_flops: 10,
            peak_memory_bytes: 20,
            param_count: 3,
            bench: vec![],
        }
    }

    #[test]
    fn json_round_trip() {
        let r = vec![sample()];
        assert_eq!(parse_reports(&reports_to_json(&r)).unwrap(), r);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut r = sample();
        r.train_miou = Some(1.5);
        assert!(check_report(&r).is_err());
    }

    #[test]
    fn schema_is_json() {
        let v: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        assert_eq!(v["type"], "array");
    }

    #[test]
    fn csv_header_and_row() {
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[sample()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("x,ok,1,"));
    }
}
