use std::path::Path;

use irs_core::experiments::SweepSpec;
use serde_json::Value;

use crate::CliError;

/// Defaults for a command. Estimation commands start from two antennas and
/// four IRS elements.
pub fn defaults(estimation: bool) -> SweepSpec {
    if estimation {
        SweepSpec { m: 2, n: 4, ..SweepSpec::default() }
    } else {
        SweepSpec::default()
    }
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match patch {
        Value::Object(fields) => {
            for (k, v) in fields {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let Value::Object(obj) = base else {
                    return Err(CliError::Config(format!("unknown key `{here}`")));
                };
                match obj.get_mut(&k) {
                    Some(slot) if v.is_object() && slot.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v,
                    None => return Err(CliError::Config(format!("unknown key `{here}`"))),
                }
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

/// Set `path` (dotted) to `raw`, read as JSON when it parses and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| CliError::Config(format!("unknown key `{path}`")))?;
    }
    *slot = value;
    Ok(())
}

/// Defaults, then the config file, then overrides, then `--seed`.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, estimation: bool) -> Result<SweepSpec, CliError> {
    let mut doc = serde_json::to_value(defaults(estimation)).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: malformed JSON: {e}", p.display())))?;
        if !file.is_object() {
            return Err(CliError::Config(format!("{}: expected a JSON object", p.display())));
        }
        merge(&mut doc, file, "")?;
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut spec: SweepSpec = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        spec.master_seed = s;
    }
    Ok(spec)
}
