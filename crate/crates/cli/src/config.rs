//! Plain-text `key = value` experiment configs.
//!
//! Every experiment declares its keys and defaults. Parsing fills in defaults,
//! so a parsed config always carries every key and [`ExperimentConfig::to_text`]
//! followed by [`ExperimentConfig::parse`] gives back the same value.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::CliError;
use crate::experiments::{find, Spec};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Int(u64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Text(v) => f.write_str(v),
        }
    }
}

/// Allowed key of an experiment, with its default and (for text) its choices.
#[derive(Clone, Debug)]
pub struct Param {
    pub key: &'static str,
    pub default: Value,
    pub choices: &'static [&'static str],
    pub help: &'static str,
}

impl Param {
    pub fn int(key: &'static str, default: u64, help: &'static str) -> Self {
        Self { key, default: Value::Int(default), choices: &[], help }
    }

    pub fn float(key: &'static str, default: f64, help: &'static str) -> Self {
        Self { key, default: Value::Float(default), choices: &[], help }
    }

    pub fn text(key: &'static str, default: &'static str, choices: &'static [&'static str], help: &'static str) -> Self {
        Self { key, default: Value::Text(default.into()), choices, help }
    }

    fn parse(&self, raw: &str) -> Result<Value, CliError> {
        let bad = |what: &str| CliError::Config(format!("key `{}`: expected {what}, got `{raw}`", self.key));
        match &self.default {
            Value::Int(_) => raw.parse::<u64>().map(Value::Int).map_err(|_| bad("a non-negative integer")),
            Value::Float(_) => match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Value::Float(v)),
                _ => Err(bad("a finite number")),
            },
            Value::Text(_) => {
                if self.choices.is_empty() || self.choices.contains(&raw) {
                    Ok(Value::Text(raw.to_string()))
                } else {
                    Err(bad(&format!("one of {}", self.choices.join(", "))))
                }
            }
        }
    }
}

/// Keys every experiment accepts.
pub fn common_params() -> Vec<Param> {
    vec![
        Param::int("seed", 1, "RNG seed for random cases and ensembles"),
        Param::text("output", "", &[], "output subdirectory (experiment id when empty)"),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub params: BTreeMap<String, Value>,
}

impl ExperimentConfig {
    /// Defaults of an experiment.
    pub fn defaults(experiment: &str) -> Result<Self, CliError> {
        let spec = spec_of(experiment)?;
        let params = all_params(spec).into_iter().map(|p| (p.key.to_string(), p.default)).collect();
        Ok(Self { experiment: experiment.to_string(), params })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut raw: Vec<(usize, String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(CliError::Config(format!("line {}: empty key", n + 1)));
            }
            if raw.iter().any(|(_, seen, _)| seen == k) {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            raw.push((n + 1, k.to_string(), v.trim().to_string()));
        }
        let experiment = raw
            .iter()
            .find(|(_, k, _)| k == "experiment")
            .map(|(_, _, v)| v.clone())
            .ok_or_else(|| CliError::Config("missing key `experiment`".into()))?;
        let spec = spec_of(&experiment)?;
        let params = all_params(spec);
        let mut cfg = Self::defaults(&experiment)?;
        for (line, k, v) in raw.into_iter().filter(|(_, k, _)| k != "experiment") {
            let p = params
                .iter()
                .find(|p| p.key == k)
                .ok_or_else(|| CliError::Config(format!("line {line}: unknown key `{k}` for {experiment}")))?;
            cfg.params.insert(k, p.parse(&v)?);
        }
        Ok(cfg)
    }

    /// Canonical text: `experiment` first, then every key in sorted order.
    pub fn to_text(&self) -> String {
        let mut out = format!("experiment = {}\n", self.experiment);
        for (k, v) in &self.params {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn int(&self, key: &str) -> Result<u64, CliError> {
        match self.params.get(key) {
            Some(Value::Int(v)) => Ok(*v),
            _ => Err(CliError::Config(format!("integer key `{key}` missing"))),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        Ok(self.int(key)? as usize)
    }

    pub fn float(&self, key: &str) -> Result<f64, CliError> {
        match self.params.get(key) {
            Some(Value::Float(v)) => Ok(*v),
            _ => Err(CliError::Config(format!("number key `{key}` missing"))),
        }
    }

    pub fn text(&self, key: &str) -> Result<&str, CliError> {
        match self.params.get(key) {
            Some(Value::Text(v)) => Ok(v),
            _ => Err(CliError::Config(format!("text key `{key}` missing"))),
        }
    }

    pub fn seed(&self) -> u64 {
        self.int("seed").unwrap_or(1)
    }

    /// Output subdirectory name.
    pub fn output_name(&self) -> String {
        match self.text("output") {
            Ok(v) if !v.is_empty() => v.to_string(),
            _ => self.experiment.clone(),
        }
    }
}

fn spec_of(experiment: &str) -> Result<&'static Spec, CliError> {
    find(experiment).ok_or_else(|| CliError::Config(format!("unknown experiment `{experiment}`")))
}

fn all_params(spec: &Spec) -> Vec<Param> {
    let mut ps = common_params();
    ps.extend((spec.params)());
    ps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_fills_defaults() {
        let cfg = ExperimentConfig::parse("# demo\nexperiment = chen-check  # trailing\n\npoints = 10\n").unwrap();
        assert_eq!(cfg.int("points").unwrap(), 10);
        assert_eq!(cfg.text("path").unwrap(), "linear");
        assert_eq!(cfg.output_name(), "chen-check");
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "points = 3",
            "experiment = nope",
            "experiment = chen-check\nbogus = 1",
            "experiment = chen-check\npoints = -2",
            "experiment = chen-check\npoints = 2\npoints = 3",
            "experiment = chen-check\npath = wiggly",
            "experiment = cole-hopf\nl = nan",
            "experiment = chen-check\njust text",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn defaults_round_trip_for_every_experiment() {
        for spec in crate::experiments::SPECS {
            let cfg = ExperimentConfig::defaults(spec.id).unwrap();
            assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
