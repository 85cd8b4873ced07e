//! JSON output with a stable field order and 9 significant digits.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::{Error, Result};

/// Rounds to 9 significant decimal digits.
pub fn sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.8e}", v).parse().unwrap_or(v)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().and_then(|f| Number::from_f64(sig9(f))) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with every float rounded by [`sig9`] and a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_floats(&mut v);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_nine_digits() {
        assert_eq!(sig9(0.1 + 0.2), 0.3);
        assert_eq!(sig9(123456789.4), 123456789.0);
        assert_eq!(sig9(-2.0 / 3.0), -0.666666667);
        assert_eq!(sig9(0.0), 0.0);
    }

    #[test]
    fn keeps_field_order_and_integers() {
        #[derive(Serialize)]
        struct S {
            zeta: f64,
            alpha: u64,
            mid: Vec<f64>,
        }
        let s = to_json(&S { zeta: 1.0 / 3.0, alpha: 12345678901, mid: vec![2.0 / 3.0] }).unwrap();
        let z = s.find("zeta").unwrap();
        assert!(z < s.find("alpha").unwrap());
        assert!(s.contains("0.333333333"));
        assert!(s.contains("12345678901"));
        assert!(s.contains("0.666666667"));
    }
}
