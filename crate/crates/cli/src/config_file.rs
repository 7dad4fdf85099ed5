//! Folds option values from a TOML file into the argument list before clap
//! parses it, so the file can supply required options too.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::CommandFactory;
use toml::Value;

use crate::args::Cli;

const SUBCOMMANDS: [&str; 3] = ["explain", "batch", "renormalize"];

struct Scan {
    config: Option<PathBuf>,
    subcommand: Option<String>,
}

fn scan(args: &[OsString]) -> Scan {
    let mut out = Scan { config: None, subcommand: None };
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let Some(a) = a.to_str() else { continue };
        if a == "--" {
            break;
        } else if a == "--config" {
            out.config = it.next().map(PathBuf::from);
        } else if let Some(path) = a.strip_prefix("--config=") {
            out.config = Some(PathBuf::from(path));
        } else if out.subcommand.is_none() && SUBCOMMANDS.contains(&a) {
            out.subcommand = Some(a.to_string());
        }
    }
    out
}

fn given_on_command_line(args: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    args.iter().filter_map(|a| a.to_str()).any(|a| a == flag || a.starts_with(&prefix))
}

fn render_value(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|i| render_value(key, i))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        other => bail!("config key `{key}` has unsupported value {other}"),
    })
}

/// Returns `args` extended with `--key value` pairs from the config file
/// for every option the command line and environment leave unset.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Scan { config: Some(path), subcommand } = scan(&args) else { return Ok(args) };
    let Some(subcommand) = subcommand else { return Ok(args) };
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read config file {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("invalid config file {}", path.display()))?;

    let root = Cli::command();
    let known_anywhere = |key: &str| {
        root.get_subcommands()
            .any(|c| c.get_arguments().any(|a| a.get_long() == Some(key)))
    };
    let cmd = root.find_subcommand(&subcommand).expect("scanned from the known list");

    let mut entries: Vec<(String, Value, bool)> = Vec::new();
    for (key, value) in &table {
        match value {
            Value::Table(section) if SUBCOMMANDS.contains(&key.as_str()) => {
                if *key == subcommand {
                    entries.extend(section.iter().map(|(k, v)| (k.replace('_', "-"), v.clone(), true)));
                }
            }
            _ => entries.push((key.replace('_', "-"), value.clone(), false)),
        }
    }

    let mut extra: Vec<OsString> = Vec::new();
    for (key, value, scoped) in entries {
        if key == "config" {
            bail!("config files cannot name another config file");
        }
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            if scoped || !known_anywhere(&key) {
                bail!("unknown option `{key}` in {}", path.display());
            }
            continue;
        };
        if given_on_command_line(&args, &key) {
            continue;
        }
        if arg.get_env().is_some_and(|var| std::env::var_os(var).is_some()) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}").into());
            extra.push(render_value(&key, &value)?.into());
        } else {
            match value {
                Value::Boolean(true) => extra.push(format!("--{key}").into()),
                Value::Boolean(false) => {}
                other => bail!("config key `{key}` is a switch and needs true or false, got {other}"),
            }
        }
    }
    let mut args = args;
    args.extend(extra);
    Ok(args)
}
