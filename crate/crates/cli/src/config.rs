//! `--config FILE` support.
//!
//! The file holds either `key = value` lines (`#` starts a comment, repeated
//! keys give repeated flags) or a single JSON object whose values are scalars
//! or arrays of scalars. Keys are long flag names; `_` and `-` are
//! interchangeable. Each entry becomes a `--key=value` argument appended to
//! the command line unless the flag is already present there.

use std::ffi::{OsStr, OsString};
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context as _};
use clap::ArgAction;
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, PartialEq)]
enum Setting {
    Flag(bool),
    Values(Vec<String>),
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut iter = args.iter().skip(1);
    while let Some(a) = iter.next() {
        if a == "--config" {
            return iter.next().map(PathBuf::from);
        }
        if let Some(rest) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// First positional token: the subcommand name.
fn subcommand_name(args: &[OsString]) -> Option<&OsStr> {
    let mut iter = args.iter().skip(1);
    while let Some(a) = iter.next() {
        if a == "--config" {
            iter.next();
        } else if !a.to_string_lossy().starts_with('-') {
            return Some(a);
        }
    }
    None
}

fn scalar(v: &Value) -> anyhow::Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => bail!("unsupported value {other}"),
    }
}

fn parse_settings(text: &str) -> anyhow::Result<Vec<(String, Setting)>> {
    let mut settings: Vec<(String, Setting)> = Vec::new();
    let mut push = |key: &str, value: Setting| {
        let key = key.trim().replace('_', "-");
        match (settings.iter_mut().find(|(k, _)| *k == key), value) {
            (Some((_, Setting::Values(existing))), Setting::Values(more)) => existing.extend(more),
            (Some(entry), value) => entry.1 = value,
            (None, value) => settings.push((key, value)),
        }
    };

    if text.trim_start().starts_with('{') {
        let object: serde_json::Map<String, Value> =
            serde_json::from_str(text).context("config is not a JSON object")?;
        for (key, value) in &object {
            let setting = match value {
                Value::Bool(b) => Setting::Flag(*b),
                Value::Null => continue,
                Value::Array(items) => Setting::Values(
                    items
                        .iter()
                        .map(scalar)
                        .collect::<anyhow::Result<_>>()
                        .with_context(|| format!("key {key:?}"))?,
                ),
                v => Setting::Values(vec![scalar(v).with_context(|| format!("key {key:?}"))?]),
            };
            push(key, setting);
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            push(key, Setting::Values(vec![value.to_string()]));
        }
    }
    Ok(settings)
}

fn flag_present(args: &[OsString], long: &str) -> bool {
    let bare = format!("--{long}");
    let with_value = format!("--{long}=");
    args.iter().any(|a| {
        a.to_str()
            .is_some_and(|s| s == bare || s.starts_with(&with_value))
    })
}

/// Appends arguments from the `--config` file, if one is named.
pub(crate) fn merge_config(
    mut args: Vec<OsString>,
    root: &clap::Command,
) -> Result<Vec<OsString>, Failure> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Runtime)?;
    let settings = parse_settings(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(Failure::Usage)?;
    let Some(sub) = subcommand_name(&args)
        .and_then(|n| n.to_str())
        .and_then(|n| root.find_subcommand(n))
    else {
        // let clap report the missing or unknown subcommand
        return Ok(args);
    };

    let mut extra = Vec::new();
    for (key, setting) in settings {
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .filter(|a| !matches!(a.get_action(), ArgAction::Help | ArgAction::Version))
            .filter(|a| a.get_long() != Some("config"))
            .ok_or_else(|| {
                Failure::Usage(anyhow!(
                    "config {}: {key:?} is not an option of `{}`",
                    path.display(),
                    sub.get_name()
                ))
            })?;
        if flag_present(&args, &key) {
            continue;
        }
        let is_switch = matches!(arg.get_action(), ArgAction::SetTrue);
        match (is_switch, setting) {
            (true, Setting::Flag(on)) => {
                if on {
                    extra.push(OsString::from(format!("--{key}")));
                }
            }
            (true, Setting::Values(values)) => match values.last().map(String::as_str) {
                Some("true") => extra.push(OsString::from(format!("--{key}"))),
                Some("false") => {}
                _ => {
                    return Err(Failure::Usage(anyhow!(
                        "config {}: {key:?} takes true or false",
                        path.display()
                    )))
                }
            },
            (false, Setting::Flag(b)) => extra.push(OsString::from(format!("--{key}={b}"))),
            (false, Setting::Values(values)) => extra.extend(
                values
                    .into_iter()
                    .map(|v| OsString::from(format!("--{key}={v}"))),
            ),
        }
    }
    args.extend(extra);
    Ok(args)
}
