//! Per-epoch metrics and their CSV / JSON-lines serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub arm: String,
    pub seed: u64,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    #[default]
    Csv,
    Jsonl,
}

impl std::str::FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "jsonl" => Ok(MetricsFormat::Jsonl),
            other => Err(Error::config("format", format!("unknown format `{other}` (expected csv or jsonl)"))),
        }
    }
}

pub const CSV_HEADER: &str = "arm,seed,epoch,train_loss,test_accuracy,wall_ms";

/// Formats like C's `%g`: 6 significant digits, trailing zeros dropped,
/// scientific notation below 1e-4 or from 1e6 up.
pub fn format_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // the exponent after rounding to 6 significant digits
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_metrics(records: &[MetricsRecord], format: MetricsFormat) -> String {
    let mut out = String::new();
    match format {
        MetricsFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in records {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.arm,
                    r.seed,
                    r.epoch,
                    format_g(r.train_loss),
                    format_g(r.test_accuracy),
                    r.wall_ms
                ));
            }
        }
        MetricsFormat::Jsonl => {
            for r in records {
                out.push_str(&format!(
                    "{{\"arm\":{},\"seed\":{},\"epoch\":{},\"train_loss\":{},\"test_accuracy\":{},\"wall_ms\":{}}}\n",
                    serde_json::to_string(&r.arm).expect("string"),
                    r.seed,
                    r.epoch,
                    format_g(r.train_loss),
                    format_g(r.test_accuracy),
                    r.wall_ms
                ));
            }
        }
    }
    out
}

pub fn emit_metrics(records: &[MetricsRecord], path: &Path, format: MetricsFormat) -> Result<()> {
    std::fs::write(path, format_metrics(records, format)).map_err(|e| Error::io(path, e))
}
