//! `key=value` run configuration merged into the command line.
//!
//! Keys are long flag names of the chosen subcommand (or the global flags).
//! A key already given on the command line keeps the command-line value.
//! Boolean flags take `true`/`false`; list flags may repeat a key or
//! separate values with commas.

use std::collections::HashSet;
use std::ffi::OsString;

use clap::{ArgAction, Command};

pub fn merge(args: Vec<OsString>, root: &Command) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("config {path}: {e}"))?;
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(sub) = strs.iter().skip(1).find_map(|a| root.find_subcommand(a)) else {
        // let clap report the missing subcommand
        return Ok(args);
    };
    let given: HashSet<&str> = strs
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut extra = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| format!("config {path}:{}: {msg}", i + 1);
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| at("expected key=value".into()))?;
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key) && key != "config" && key != "help")
            .ok_or_else(|| at(format!("unknown key '{key}' for '{}'", sub.get_name())))?;
        if given.contains(key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => return Err(at(format!("'{key}' expects true or false, got '{value}'"))),
            },
            ArgAction::Append => {
                for v in value.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                    extra.push(format!("--{key}"));
                    extra.push(v.to_string());
                }
            }
            _ => {
                extra.push(format!("--{key}"));
                extra.push(value.to_string());
            }
        }
    }
    let mut out = args;
    out.extend(extra.into_iter().map(OsString::from));
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<String> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    for (i, a) in strs.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
        if a == "--config" {
            return strs.get(i + 1).cloned();
        }
    }
    None
}
