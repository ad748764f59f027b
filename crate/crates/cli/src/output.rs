//! Machine output: JSON on stdout with floats cut to six significant digits.

use std::io::Write;

use serde::Serialize;
use serde_json::{Number, Value};

pub const SIGNIFICANT_DIGITS: usize = 6;

pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig).and_then(Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

pub fn to_rounded_value(v: &impl Serialize) -> anyhow::Result<Value> {
    let mut value = serde_json::to_value(v)?;
    round_value(&mut value);
    Ok(value)
}

/// Pretty JSON document on stdout.
pub fn print_json(v: &impl Serialize) -> anyhow::Result<()> {
    let value = to_rounded_value(v)?;
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &value)?;
    writeln!(out)?;
    Ok(())
}

/// One compact JSON object per line.
pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &to_rounded_value(&item)?)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
