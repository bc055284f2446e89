//! JSON documents: numbers rounded to 12 significant digits, keys sorted,
//! written atomically.

use std::path::Path;

use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::{Error, Result};
use crate::io::adapter_file::write_atomic;
use crate::sim::pipeline::RunReport;

/// Significant digits kept for every float.
pub const SIGNIFICANT_DIGITS: usize = 12;

fn round_float(x: f64) -> f64 {
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses")
}

fn round_numbers(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            if let Some(r) = Number::from_f64(round_float(x)) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_numbers),
        Value::Object(map) => map.values_mut().for_each(round_numbers),
        _ => {}
    }
}

/// Canonical JSON value: rounded numbers, keys in sorted order.
pub fn to_report_value<T: Serialize>(doc: &T) -> Result<Value> {
    let mut v = serde_json::to_value(doc).map_err(|e| Error::Format(format!("cannot serialise report: {e}")))?;
    round_numbers(&mut v);
    Ok(v)
}

pub fn to_report_json<T: Serialize>(doc: &T) -> Result<String> {
    let v = to_report_value(doc)?;
    let mut text = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    write_atomic(path, to_report_json(doc)?.as_bytes())
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    write_json(path, report)
}

/// Drop the top-level `timings` block, the only nondeterministic part of a
/// report.
pub fn strip_timings(mut report: Value) -> Value {
    if let Value::Object(map) = &mut report {
        map.remove("timings");
    }
    report
}
