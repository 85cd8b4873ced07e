//! `--config file.json`: a flat JSON object whose keys are long flag names.
//! The flags are spliced in right after the subcommand, so anything given
//! explicitly on the command line overrides them.

use std::ffi::OsString;
use std::fs;

use serde_json::Value;
use tff_core::{Error, Result};

fn to_flags(key: &str, value: &Value) -> Result<Vec<OsString>> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| -> Result<String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            other => Err(Error::Config(format!("unsupported value for '{}': {}", key, other))),
        }
    };
    Ok(match value {
        Value::Bool(true) => vec![flag.into()],
        Value::Bool(false) | Value::Null => vec![],
        Value::Array(items) => {
            let mut out = Vec::new();
            for v in items {
                out.push(flag.clone().into());
                out.push(scalar(v)?.into());
            }
            out
        }
        v => vec![flag.into(), scalar(v)?.into()],
    })
}

/// Removes `--config PATH` from `args` and splices the file's flags in
/// after the first occurrence of a known subcommand.
pub fn expand(mut args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--config" {
            if i + 1 >= args.len() {
                return Err(Error::Config("--config needs a file argument".into()));
            }
            path = Some(args[i + 1].clone());
            args.drain(i..i + 2);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.into());
            args.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.to_string_lossy(), e)))?;
    let obj = match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Error::Config("config file must hold a JSON object".into())),
        Err(e) => return Err(Error::Config(format!("config file is not valid JSON: {}", e))),
    };
    let mut flags = Vec::new();
    for (k, v) in &obj {
        flags.extend(to_flags(k, v)?);
    }
    let at = args
        .iter()
        .position(|a| subcommands.contains(&a.to_string_lossy().as_ref()))
        .map(|p| p + 1)
        .unwrap_or(args.len());
    args.splice(at..at, flags);
    Ok(args)
}
