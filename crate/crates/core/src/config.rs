//! System configuration: defaults, validation, file and environment overrides.
//!
//! The config file is a flat `key = value` document (TOML syntax, no
//! tables). Every key can also be set through an environment variable named
//! `TB_<KEY>` in upper case, e.g. `TB_TAU_ROUTE=0.7`; environment values win
//! over the file.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ActionSet;

/// Analytic link model used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub up_mbps: f64,
    pub down_mbps: f64,
    pub rtt_ms: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            up_mbps: 59.0,
            down_mbps: 119.0,
            rtt_ms: 9.0,
        }
    }
}

impl NetworkModel {
    /// Parses `up,down,rtt` (Mbps, Mbps, ms).
    pub fn parse_triplet(s: &str) -> Result<Self, ConfigError> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(ConfigError::Value {
                key: "network".into(),
                message: format!("expected up,down,rtt but got {s:?}"),
            });
        }
        let num = |p: &str| {
            p.parse::<f64>().map_err(|e| ConfigError::Value {
                key: "network".into(),
                message: e.to_string(),
            })
        };
        Ok(Self {
            up_mbps: num(parts[0])?,
            down_mbps: num(parts[1])?,
            rtt_ms: num(parts[2])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_min: u64,
    pub n_max: u64,
    pub tau_route: f64,
    pub tau_proxy: f64,
    pub lambda_tradeoff: f64,
    pub lambda0: f64,
    pub alpha_ts: f64,
    pub pca_dim: usize,
    pub top_clips: usize,
    pub clip_size: usize,
    pub actions: ActionSet,
    pub network: NetworkModel,
    pub queue_capacity: usize,
    pub ece_bins: usize,
    pub offload_timeout_s: f64,
    pub train_learning_rate: f64,
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let actions = ActionSet::default();
        let n_max = 512;
        Self {
            n_min: 64,
            n_max,
            tau_route: 0.6,
            tau_proxy: 0.6,
            lambda_tradeoff: normalized_lambda(n_max, &actions),
            lambda0: 0.1,
            alpha_ts: 0.05,
            pca_dim: 4,
            top_clips: 3,
            clip_size: 4,
            actions,
            network: NetworkModel::default(),
            queue_capacity: 2,
            ece_bins: 10,
            offload_timeout_s: 120.0,
            train_learning_rate: 1e-3,
            train_epochs: 200,
            train_batch_size: 64,
            seed: 0,
        }
    }
}

/// The trade-off weight that scales the largest token volume
/// (`n_max * max density`) to exactly 1.
pub fn normalized_lambda(n_max: u64, actions: &ActionSet) -> f64 {
    1.0 / (n_max as f64 * actions.max().unwrap_or(1) as f64)
}

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    Value { key: String, message: String },
    #[error("invalid config: {}", join_issues(.0))]
    Invalid(Vec<ConfigIssue>),
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Reports every violated invariant; `Ok` iff there are none.
pub fn validate_config(cfg: &SystemConfig) -> Result<(), Vec<ConfigIssue>> {
    let mut issues = Vec::new();
    let mut push =
        |field: &'static str, message: String| issues.push(ConfigIssue { field, message });

    if cfg.n_min < 1 {
        push("n_min", "n_min must be ≥ 1".into());
    }
    if cfg.n_max < 1 {
        push("n_max", "n_max must be ≥ 1".into());
    }
    if cfg.n_min > cfg.n_max {
        push(
            "n_max",
            format!("n_min ({}) exceeds n_max ({})", cfg.n_min, cfg.n_max),
        );
    }
    for (field, v) in [("tau_route", cfg.tau_route), ("tau_proxy", cfg.tau_proxy)] {
        if !(v > 0.0 && v < 1.0) {
            push(field, format!("{field} out of (0,1)"));
        }
    }
    for (field, v) in [
        ("lambda_tradeoff", cfg.lambda_tradeoff),
        ("lambda0", cfg.lambda0),
        ("alpha_ts", cfg.alpha_ts),
        ("train_learning_rate", cfg.train_learning_rate),
        ("offload_timeout_s", cfg.offload_timeout_s),
    ] {
        if !(v.is_finite() && v > 0.0) {
            push(field, format!("{field} must be positive"));
        }
    }
    for (field, v) in [
        ("pca_dim", cfg.pca_dim),
        ("top_clips", cfg.top_clips),
        ("clip_size", cfg.clip_size),
        ("queue_capacity", cfg.queue_capacity),
        ("ece_bins", cfg.ece_bins),
        ("train_epochs", cfg.train_epochs),
        ("train_batch_size", cfg.train_batch_size),
    ] {
        if v < 1 {
            push(field, format!("{field} must be ≥ 1"));
        }
    }
    if cfg.clip_size > u8::MAX as usize {
        push("clip_size", "clip_size must fit in one byte".into());
    }
    let net = cfg.network;
    for (field, v) in [
        ("net_up_mbps", net.up_mbps),
        ("net_down_mbps", net.down_mbps),
        ("net_rtt_ms", net.rtt_ms),
    ] {
        if !(v.is_finite() && v > 0.0) {
            push(field, format!("{field} must be positive"));
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

const KEYS: &[&str] = &[
    "n_min",
    "n_max",
    "tau_route",
    "tau_proxy",
    "lambda_tradeoff",
    "lambda0",
    "alpha_ts",
    "pca_dim",
    "top_clips",
    "clip_size",
    "actions",
    "net_up_mbps",
    "net_down_mbps",
    "net_rtt_ms",
    "queue_capacity",
    "ece_bins",
    "offload_timeout_s",
    "train_learning_rate",
    "train_epochs",
    "train_batch_size",
    "seed",
];

/// Accumulates overrides on top of the defaults; `lambda_tradeoff` follows
/// `n_max` and the action set unless it was set explicitly.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    cfg: SystemConfig,
    explicit_lambda: bool,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_config(cfg: SystemConfig) -> Self {
        Self {
            cfg,
            explicit_lambda: true,
        }
    }

    /// Applies every `key = value` pair of a flat TOML document.
    pub fn apply_toml_str(&mut self, text: &str) -> Result<&mut Self, ConfigError> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for (key, value) in &table {
            self.set(key, value)?;
        }
        Ok(self)
    }

    /// Applies `TB_*` variables from the given iterator (normally
    /// `std::env::vars()`). Unrelated `TB_` variables are rejected so typos
    /// do not go unnoticed.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<&mut Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut vars: Vec<_> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("TB_").map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        vars.sort();
        for (key, raw) in vars {
            let value = parse_env_value(&raw);
            self.set(&key, &value)?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: &toml::Value) -> Result<&mut Self, ConfigError> {
        let c = &mut self.cfg;
        match key {
            "n_min" => c.n_min = as_u64(key, value)?,
            "n_max" => c.n_max = as_u64(key, value)?,
            "tau_route" => c.tau_route = as_f64(key, value)?,
            "tau_proxy" => c.tau_proxy = as_f64(key, value)?,
            "lambda_tradeoff" => {
                c.lambda_tradeoff = as_f64(key, value)?;
                self.explicit_lambda = true;
            }
            "lambda0" => c.lambda0 = as_f64(key, value)?,
            "alpha_ts" => c.alpha_ts = as_f64(key, value)?,
            "pca_dim" => c.pca_dim = as_u64(key, value)? as usize,
            "top_clips" => c.top_clips = as_u64(key, value)? as usize,
            "clip_size" => c.clip_size = as_u64(key, value)? as usize,
            "actions" => c.actions = as_actions(key, value)?,
            "net_up_mbps" => c.network.up_mbps = as_f64(key, value)?,
            "net_down_mbps" => c.network.down_mbps = as_f64(key, value)?,
            "net_rtt_ms" => c.network.rtt_ms = as_f64(key, value)?,
            "queue_capacity" => c.queue_capacity = as_u64(key, value)? as usize,
            "ece_bins" => c.ece_bins = as_u64(key, value)? as usize,
            "offload_timeout_s" => c.offload_timeout_s = as_f64(key, value)?,
            "train_learning_rate" => c.train_learning_rate = as_f64(key, value)?,
            "train_epochs" => c.train_epochs = as_u64(key, value)? as usize,
            "train_batch_size" => c.train_batch_size = as_u64(key, value)? as usize,
            "seed" => c.seed = as_u64(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(self)
    }

    /// Finishes the build and validates the result.
    pub fn build(&self) -> Result<SystemConfig, ConfigError> {
        let mut cfg = self.cfg.clone();
        if !self.explicit_lambda {
            cfg.lambda_tradeoff = normalized_lambda(cfg.n_max, &cfg.actions);
        }
        validate_config(&cfg).map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }
}

impl SystemConfig {
    /// Defaults, then the optional file, then `TB_*` environment variables.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut b = ConfigBuilder::new();
        if let Some(p) = path {
            b.apply_toml_str(&std::fs::read_to_string(p)?)?;
        }
        b.apply_env(std::env::vars())?;
        b.build()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        ConfigBuilder::new().apply_toml_str(text)?.build()
    }

    /// Serializes to the flat key/value format accepted by [`Self::load`].
    pub fn to_toml_string(&self) -> String {
        let actions = self
            .actions
            .densities()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("n_min", self.n_min.to_string());
        line("n_max", self.n_max.to_string());
        line("tau_route", fmt_f64(self.tau_route));
        line("tau_proxy", fmt_f64(self.tau_proxy));
        line("lambda_tradeoff", fmt_f64(self.lambda_tradeoff));
        line("lambda0", fmt_f64(self.lambda0));
        line("alpha_ts", fmt_f64(self.alpha_ts));
        line("pca_dim", self.pca_dim.to_string());
        line("top_clips", self.top_clips.to_string());
        line("clip_size", self.clip_size.to_string());
        line("actions", format!("[{actions}]"));
        line("net_up_mbps", fmt_f64(self.network.up_mbps));
        line("net_down_mbps", fmt_f64(self.network.down_mbps));
        line("net_rtt_ms", fmt_f64(self.network.rtt_ms));
        line("queue_capacity", self.queue_capacity.to_string());
        line("ece_bins", self.ece_bins.to_string());
        line("offload_timeout_s", fmt_f64(self.offload_timeout_s));
        line("train_learning_rate", fmt_f64(self.train_learning_rate));
        line("train_epochs", self.train_epochs.to_string());
        line("train_batch_size", self.train_batch_size.to_string());
        line("seed", self.seed.to_string());
        out
    }

    pub fn known_keys() -> &'static [&'static str] {
        KEYS
    }
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` keeps a decimal point and round-trips exactly.
    format!("{v:?}")
}

fn parse_env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64, ConfigError> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        toml::Value::Integer(_) => Err(bad(key, "must not be negative")),
        toml::Value::String(s) => s
            .trim()
            .parse()
            .map_err(|_| bad(key, "expected an integer")),
        _ => Err(bad(key, "expected an integer")),
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) => s.trim().parse().map_err(|_| bad(key, "expected a number")),
        _ => Err(bad(key, "expected a number")),
    }
}

fn as_actions(key: &str, v: &toml::Value) -> Result<ActionSet, ConfigError> {
    let list: Vec<u32> = match v {
        toml::Value::Array(items) => items
            .iter()
            .map(|i| as_u64(key, i).map(|x| x as u32))
            .collect::<Result<_, _>>()?,
        toml::Value::String(s) => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| bad(key, "expected integers"))
            })
            .collect::<Result<_, _>>()?,
        _ => return Err(bad(key, "expected a list of densities")),
    };
    ActionSet::new(list).map_err(|e| bad(key, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = SystemConfig::default();
        assert_eq!(validate_config(&cfg), Ok(()));
        assert_eq!(cfg.lambda_tradeoff, 1.0 / 16384.0);
        let max = cfg.actions.max().unwrap() as f64;
        assert_eq!(cfg.lambda_tradeoff * cfg.n_max as f64 * max, 1.0);
    }

    #[test]
    fn tau_route_out_of_range_is_reported() {
        let cfg = SystemConfig {
            tau_route: 1.5,
            ..Default::default()
        };
        let issues = validate_config(&cfg).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].to_string(), "tau_route out of (0,1)");
    }

    #[test]
    fn n_min_zero_is_reported() {
        let cfg = SystemConfig {
            n_min: 0,
            ..Default::default()
        };
        let issues = validate_config(&cfg).unwrap_err();
        assert_eq!(issues[0].to_string(), "n_min must be ≥ 1");
    }

    #[test]
    fn all_issues_are_collected() {
        let cfg = SystemConfig {
            n_min: 0,
            tau_proxy: 0.0,
            alpha_ts: -1.0,
            ..Default::default()
        };
        assert_eq!(validate_config(&cfg).unwrap_err().len(), 3);
    }

    #[test]
    fn file_then_env_overrides() {
        let mut b = ConfigBuilder::new();
        b.apply_toml_str("n_max = 256\ntau_route = 0.7\nactions = [2, 4, 8]\n")
            .unwrap();
        b.apply_env(vec![
            ("TB_TAU_ROUTE".to_string(), "0.8".to_string()),
            ("TB_ACTIONS".to_string(), "1,2,4,8,16".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ])
        .unwrap();
        let cfg = b.build().unwrap();
        assert_eq!(cfg.n_max, 256);
        assert_eq!(cfg.tau_route, 0.8);
        assert_eq!(cfg.actions.densities(), &[1, 2, 4, 8, 16]);
        // lambda follows n_max and the largest density
        assert_eq!(cfg.lambda_tradeoff, 1.0 / (256.0 * 16.0));
    }

    #[test]
    fn explicit_lambda_is_kept() {
        let cfg = SystemConfig::from_toml_str("lambda_tradeoff = 0.001\nn_max = 100").unwrap();
        assert_eq!(cfg.lambda_tradeoff, 0.001);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(
            SystemConfig::from_toml_str("nmin = 3"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            SystemConfig::from_toml_str("n_min = \"many\""),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            SystemConfig::from_toml_str("tau_route = 2.0"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = SystemConfig {
            seed: 7,
            tau_route: 0.55,
            network: NetworkModel {
                up_mbps: 10.5,
                down_mbps: 20.0,
                rtt_ms: 30.0,
            },
            ..Default::default()
        };
        let text = cfg.to_toml_string();
        let mut b = ConfigBuilder::new();
        b.apply_toml_str(&text).unwrap();
        assert_eq!(b.build().unwrap(), cfg);
        for key in SystemConfig::known_keys() {
            assert!(text.contains(&format!("{key} = ")), "{key} missing");
        }
    }

    #[test]
    fn network_triplet() {
        let n = NetworkModel::parse_triplet("59, 119, 9").unwrap();
        assert_eq!(n, NetworkModel::default());
        assert!(NetworkModel::parse_triplet("1,2").is_err());
    }
}
