//! Merges a TOML config file into the argument list.
//!
//! Top-level keys apply to every subcommand; keys under `[gen]`, `[train]` or
//! `[eval]` apply to that subcommand and shadow top-level keys. A key maps to
//! the flag of the same name with `_` spelled `-`. Flags present on the command
//! line win over the file.

use std::ffi::OsString;
use std::path::Path;

use toml::{Table, Value};

use crate::CliError;

const SUBCOMMANDS: [&str; 3] = ["gen", "train", "eval"];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn render(key: &str, v: &Value) -> Result<String, CliError> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|i| render(key, i))
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        _ => return Err(CliError::usage(format!("config key {key:?} has an unsupported value"))),
    })
}

fn given_on_command_line(args: &[OsString], flag: &str) -> bool {
    let eq = format!("{flag}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&eq)
    })
}

/// Flag/value pairs from `table` for `sub`, in key order.
pub fn config_args(table: &Table, sub: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut merged: Vec<(String, &Value)> = Vec::new();
    for (k, v) in table {
        if !v.is_table() {
            merged.push((k.clone(), v));
        } else if !SUBCOMMANDS.contains(&k.as_str()) {
            return Err(CliError::usage(format!("config section [{k}] is not a subcommand")));
        }
    }
    if let Some(Value::Table(section)) = table.get(sub) {
        for (k, v) in section {
            merged.retain(|(m, _)| m != k);
            merged.push((k.clone(), v));
        }
    }
    merged
        .into_iter()
        .filter(|(k, _)| k != "config")
        .map(|(k, v)| Ok((format!("--{}", k.replace('_', "-")), render(&k, v)?)))
        .collect()
}

pub fn load(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

/// `args` with the config file's entries inserted after the subcommand name,
/// skipping every flag the command line already sets.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(pos) = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(args);
    };
    let sub = args[pos].to_string_lossy().into_owned();
    let table = load(Path::new(&path))?;
    let user = &args[pos + 1..];
    let mut out: Vec<OsString> = args[..=pos].to_vec();
    for (flag, value) in config_args(&table, &sub)? {
        if !given_on_command_line(user, &flag) {
            out.push(flag.into());
            out.push(value.into());
        }
    }
    out.extend_from_slice(user);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_shadow_top_level_and_flags_win() {
        let table: Table = "epochs = 3\nseed = 9\n[train]\nepochs = 5\nsites = [0, 1]\n".parse().unwrap();
        let pairs = config_args(&table, "train").unwrap();
        assert!(pairs.contains(&("--epochs".into(), "5".into())));
        assert!(pairs.contains(&("--sites".into(), "0,1".into())));
        assert!(!pairs.contains(&("--epochs".into(), "3".into())));
        assert!(given_on_command_line(&["--seed=4".into()], "--seed"));
        assert!(!given_on_command_line(&["--seeds".into()], "--seed"));
    }

    #[test]
    fn unknown_sections_are_rejected() {
        let table: Table = "[training]\nepochs = 5\n".parse().unwrap();
        assert!(config_args(&table, "train").is_err());
    }
}
