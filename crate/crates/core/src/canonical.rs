//! Canonical JSON: object keys in byte order, floats always written with 17
//! significant digits in exponent form, integers verbatim.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Serializes `value` canonically, compact or with two-space indentation.
pub fn to_string<T: Serialize + ?Sized>(value: &T, pretty: bool) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    let mut out = String::new();
    write_value(&v, pretty, 0, &mut out);
    if pretty {
        out.push('\n');
    }
    out
}

/// Lowercase hex SHA-256 of the compact canonical form.
pub fn hash<T: Serialize + ?Sized>(value: &T) -> String {
    hex::encode(Sha256::digest(to_string(value, false).as_bytes()))
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn newline(pretty: bool, depth: usize, out: &mut String) {
    if pretty {
        out.push('\n');
        out.extend(std::iter::repeat_n("  ", depth));
    }
}

fn write_value(v: &Value, pretty: bool, depth: usize, out: &mut String) {
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) if !n.is_f64() => out.push_str(&u.to_string()),
            (_, Some(i), _) if !n.is_f64() => out.push_str(&i.to_string()),
            (_, _, Some(f)) => out.push_str(&format_float(f)),
            _ => out.push_str(&n.to_string()),
        },
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(pretty, depth + 1, out);
                write_value(item, pretty, depth + 1, out);
            }
            newline(pretty, depth, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(pretty, depth + 1, out);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push(':');
                if pretty {
                    out.push(' ');
                }
                write_value(&map[*k], pretty, depth + 1, out);
            }
            newline(pretty, depth, out);
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_floats_fixed() {
        let v = json!({"b": 1, "a": [0.1, -2.0], "c": {"z": null, "y": "s"}});
        assert_eq!(
            to_string(&v, false),
            r#"{"a":[1.0000000000000001e-1,-2.0000000000000000e0],"b":1,"c":{"y":"s","z":null}}"#
        );
    }

    #[test]
    fn floats_round_trip_exactly() {
        for x in [
            0.1,
            1.0 / 3.0,
            1e-300,
            123_456_789.123_456_79,
            f64::MIN_POSITIVE,
            -0.0,
        ] {
            let back: f64 = serde_json::from_str(&format_float(x)).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x}");
        }
    }

    #[test]
    fn pretty_form_parses_to_same_value() {
        let v = json!({"k": [1, 2.5, {"x": []}], "e": {}});
        let p: Value = serde_json::from_str(&to_string(&v, true)).unwrap();
        assert_eq!(p, v);
        assert_eq!(hash(&v).len(), 64);
    }
}
