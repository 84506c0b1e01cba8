//! Canonical JSON text: sorted object keys, no insignificant whitespace,
//! and every float written with 17 significant digits so that identical
//! values always produce identical bytes.

use serde::Serialize;
use serde_json::Value;

/// Formats a finite double with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes `value` canonically. Object keys are sorted because
/// `serde_json::Map` is ordered by key.
pub fn to_canonical_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out);
    out.push('\n');
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                out.push_str(&format_float(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(item, out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_seventeen_digits() {
        assert_eq!(format_float(1.0), "1.0000000000000000e0");
        assert_eq!(format_float(-1e-7), "-9.9999999999999995e-8");
        let back: f64 = format_float(0.1).parse().unwrap();
        assert_eq!(back, 0.1);
    }

    #[test]
    fn keys_sorted_floats_fixed() {
        #[derive(Serialize)]
        struct S {
            z: f64,
            a: Vec<usize>,
        }
        let s = to_canonical_string(&S { z: 0.5, a: vec![1, 2] }).unwrap();
        assert_eq!(s, "{\"a\":[1,2],\"z\":5.0000000000000000e-1}\n");
    }
}
