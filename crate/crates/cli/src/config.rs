// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON config files and the list-valued flag types.
//!
//! A config file is a flat JSON object keyed by flag name (`held_out` and
//! `held-out` both work). Entries for flags not given on the command line
//! are turned into ordinary flags, so the file goes through the same parsing
//! and validation as typed flags.

use std::ffi::OsString;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use crate::UsageError;

/// Path given to `--config`, in either `--config PATH` or `--config=PATH` form.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn flag_tokens(key: &str, value: &Value) -> Result<Vec<OsString>, UsageError> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| -> Result<String, UsageError> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            other => Err(UsageError(format!("config key `{key}`: unsupported value {other}"))),
        }
    };
    Ok(match value {
        Value::Null | Value::Bool(false) => vec![],
        Value::Bool(true) => vec![flag.into()],
        Value::Array(items) => {
            let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
            vec![flag.into(), joined.into()]
        }
        v => vec![flag.into(), scalar(v)?.into()],
    })
}

/// Splice the flags of the `--config` file (if any) in right after the
/// subcommand words.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, UsageError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        UsageError(format!("cannot read config {}: {e}", path.to_string_lossy()))
    })?;
    let obj: serde_json::Map<String, Value> = serde_json::from_str(&text).map_err(|e| {
        UsageError(format!("config {} is not a JSON object: {e}", path.to_string_lossy()))
    })?;
    let given: Vec<String> = args[1..]
        .iter()
        .filter_map(|a| {
            let s = a.to_string_lossy();
            let name = s.strip_prefix("--")?;
            Some(name.split('=').next().unwrap_or(name).to_string())
        })
        .collect();
    let mut injected = Vec::new();
    for (k, v) in &obj {
        if k == "config" {
            return Err(UsageError("config files cannot nest `config`".into()));
        }
        if given.contains(&k.replace('_', "-")) {
            continue;
        }
        injected.extend(flag_tokens(k, v)?);
    }
    let words = 1 + args[1..]
        .iter()
        .take_while(|a| !a.to_string_lossy().starts_with('-'))
        .count();
    let mut out = args[..words].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[words..]);
    Ok(out)
}

// ---------------------------------------------------------------------------
// List-valued flags
// ---------------------------------------------------------------------------

fn expand_ranges(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| format!("bad range `{part}`"))?;
                let b: usize = b.trim().parse().map_err(|_| format!("bad range `{part}`"))?;
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad integer `{part}`"))?),
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

/// Layer indices as `1-4`, `3,5,7` or a mix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct LayerList(pub Vec<usize>);

impl FromStr for LayerList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut v = expand_ranges(s)?;
        v.sort_unstable();
        v.dedup();
        Ok(LayerList(v))
    }
}

/// Steering scales. Integer ranges expand in steps of one (`1-4` is
/// 1, 2, 3, 4); other entries are parsed as floats.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ScaleList(pub Vec<f32>);

impl FromStr for ScaleList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Ok(x) = part.parse::<f32>() {
                out.push(x);
            } else {
                out.extend(expand_ranges(part)?.into_iter().map(|i| i as f32));
            }
        }
        if out.is_empty() {
            return Err("empty list".into());
        }
        if let Some(bad) = out.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(format!("scale must be > 0, got {bad}"));
        }
        Ok(ScaleList(out))
    }
}

/// `(layer, head)` pairs as `l:h,l:h`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct HeadList(pub Vec<(usize, usize)>);

impl FromStr for HeadList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (l, h) = part.split_once(':').ok_or_else(|| format!("expected layer:head, got `{part}`"))?;
            let l = l.parse().map_err(|_| format!("bad layer in `{part}`"))?;
            let h = h.parse().map_err(|_| format!("bad head in `{part}`"))?;
            out.push((l, h));
        }
        if out.is_empty() {
            return Err("empty head list".into());
        }
        Ok(HeadList(out))
    }
}

impl fmt::Display for HeadList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(l, h)| format!("{l}:{h}")).collect();
        f.write_str(&parts.join(","))
    }
}
