//! `--config FILE` support: the file's keys become flags inserted right after
//! the subcommand, ahead of the user's own flags so those win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::args::SUBCOMMANDS;

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

fn flags_from(value: &Value, path: &Path) -> Result<Vec<OsString>, String> {
    let Value::Object(map) = value else {
        return Err(format!("{}: config must be a JSON object", path.display()));
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            continue;
        }
        let mut push = |v: &Value| -> Result<(), String> {
            match v {
                Value::Bool(true) => out.push(flag.clone().into()),
                Value::Bool(false) | Value::Null => {}
                Value::Number(n) => out.push(format!("{flag}={n}").into()),
                Value::String(s) => out.push(format!("{flag}={s}").into()),
                _ => return Err(format!("{}: unsupported value for {key:?}", path.display())),
            }
            Ok(())
        };
        match v {
            Value::Array(items) => items.iter().try_for_each(&mut push)?,
            other => push(other)?,
        }
    }
    Ok(out)
}

/// Returns `args` with the config file's flags spliced in, or the original
/// arguments when no `--config` is given. Errors carry a message and an exit code.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, (String, i32)> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| (format!("cannot read {}: {e}", path.display()), 2))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| (format!("{}: invalid JSON: {e}", path.display()), 2))?;
    let flags = flags_from(&value, &path).map_err(|m| (m, 2))?;
    let Some(pos) = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
