//! Run configuration: flat `key=value` files, overrides and the JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::d3::D3Config;
use crate::error::{Error, Result};
use crate::fwm::{FwmConfig, HeadInput, MemoryForm, Variant};
use crate::optim::AdamConfig;
use crate::sar::{PhaseFlags, SarVocab, INPUT_DIM};

/// Seeds used when a suite runs several seeds.
pub const DESK_SEEDS: [u64; 3] = [0, 1111, 2222];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub v: usize,
    pub length: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub variant: Variant,
    pub phase_flags: PhaseFlags,
    pub d3: D3Config,
    pub fwm: FwmConfig,
    pub adam: AdamConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let v = 20;
        Self {
            seed: 0,
            v,
            length: 20,
            batch_size: 64,
            iterations: 3000,
            eval_every: 100,
            variant: Variant::D3WithoutFiller,
            phase_flags: PhaseFlags::Impulse,
            d3: D3Config::default(),
            fwm: FwmConfig { d_input: INPUT_DIM, n_classes: 2 * v, ..FwmConfig::default() },
            adam: AdamConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key, in the order `to_key_values` writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "V",
    "L",
    "batch",
    "iterations",
    "eval_every",
    "variant",
    "phase_flags",
    "D_code",
    "N_code",
    "top_k",
    "D_query",
    "p_dropout",
    "D_component",
    "use_codebook",
    "use_residual",
    "apply_to_filler",
    "shared_projections",
    "D_LSTM",
    "D_FWM",
    "N_reads",
    "head",
    "normalize_roles",
    "memory",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "output_dir",
];

impl RunConfig {
    pub fn vocab(&self) -> SarVocab {
        SarVocab { v: self.v, length: self.length }
    }

    pub fn fwm_config(&self) -> FwmConfig {
        self.fwm.clone()
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab().validate()?;
        self.d3.validate()?;
        self.fwm.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch and eval_every must be positive"));
        }
        if self.fwm.d_input != INPUT_DIM || self.fwm.n_classes != 2 * self.v {
            return Err(Error::config(format!(
                "FWM input/output sizes {}/{} do not match the task ({INPUT_DIM}/{})",
                self.fwm.d_input,
                self.fwm.n_classes,
                2 * self.v
            )));
        }
        if self.variant.uses_d3() && self.d3.d_component != self.fwm.d_fwm {
            return Err(Error::config(format!(
                "D_component={} must equal D_FWM={}",
                self.d3.d_component, self.fwm.d_fwm
            )));
        }
        if self.d3.apply_to_filler != (self.variant == Variant::D3WithFiller) {
            return Err(Error::config(format!(
                "apply_to_filler={} contradicts variant {}",
                self.d3.apply_to_filler, self.variant
            )));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("Adam needs lr > 0, betas in [0, 1) and eps > 0"));
        }
        Ok(())
    }

    /// Applies `key=value` settings on top of `self`. Dependent sizes follow
    /// their source unless set in the same batch: `D_query = D_code / 2`,
    /// `D_component = D_FWM`, and `apply_to_filler` from `variant`.
    pub fn apply(&mut self, settings: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in settings {
            self.set(key, value)?;
        }
        let has = |k: &str| settings.contains_key(k);
        if has("D_code") && !has("D_query") {
            self.d3.d_query = self.d3.d_code / 2;
        }
        if has("D_FWM") && !has("D_component") {
            self.d3.d_component = self.fwm.d_fwm;
        }
        if has("variant") && !has("apply_to_filler") {
            self.d3.apply_to_filler = self.variant == Variant::D3WithFiller;
        }
        if has("V") {
            self.fwm.n_classes = 2 * self.v;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "V" => self.v = parse(key, value)?,
            "L" => self.length = parse(key, value)?,
            "batch" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "variant" => self.variant = parse(key, value)?,
            "phase_flags" => self.phase_flags = parse_named(key, value, &[("impulse", PhaseFlags::Impulse), ("constant", PhaseFlags::Constant)])?,
            "D_code" => self.d3.d_code = parse(key, value)?,
            "N_code" => self.d3.n_code = parse(key, value)?,
            "top_k" => self.d3.top_k = parse(key, value)?,
            "D_query" => self.d3.d_query = parse(key, value)?,
            "p_dropout" => self.d3.p_dropout = parse(key, value)?,
            "D_component" => self.d3.d_component = parse(key, value)?,
            "use_codebook" => self.d3.use_codebook = parse(key, value)?,
            "use_residual" => self.d3.use_residual = parse(key, value)?,
            "apply_to_filler" => self.d3.apply_to_filler = parse(key, value)?,
            "shared_projections" => self.d3.shared_projections = parse(key, value)?,
            "D_LSTM" => self.fwm.d_lstm = parse(key, value)?,
            "D_FWM" => self.fwm.d_fwm = parse(key, value)?,
            "N_reads" => self.fwm.n_reads = parse(key, value)?,
            "head" => self.fwm.head = parse_named(key, value, &[("hidden-and-read", HeadInput::HiddenAndRead), ("read", HeadInput::Read)])?,
            "normalize_roles" => self.fwm.normalize_roles = parse(key, value)?,
            "memory" => self.fwm.memory = parse_named(key, value, &[("dense", MemoryForm::Dense), ("factored", MemoryForm::Factored)])?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The config as `key=value` lines, one per entry of [`KEYS`].
    pub fn to_key_values(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let plain = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let lookup = |key: &str| -> String {
            let (section, field) = match key {
                "V" => ("", "v"),
                "L" => ("", "length"),
                "batch" => ("", "batch_size"),
                "D_code" | "N_code" | "top_k" | "D_query" | "p_dropout" | "D_component" | "use_codebook"
                | "use_residual" | "apply_to_filler" | "shared_projections" => ("d3", key),
                "D_LSTM" | "D_FWM" | "N_reads" | "head" | "normalize_roles" | "memory" => ("fwm", key),
                "lr" | "beta1" | "beta2" | "eps" => ("adam", key),
                _ => ("", key),
            };
            let field = field.to_lowercase();
            let node = if section.is_empty() { &json } else { &json[section] };
            plain(&node[field.as_str()])
        };
        KEYS.iter().map(|k| format!("{k}={}\n", lookup(k))).collect()
    }

    /// Canonical JSON manifest.
    pub fn to_manifest(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {key}={value:?}")))
}

fn parse_named<V: Copy>(key: &str, value: &str, options: &[(&str, V)]) -> Result<V> {
    options.iter().find(|(name, _)| *name == value).map(|&(_, v)| v).ok_or_else(|| {
        let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
        Error::config(format!("{key}={value:?} is not one of {names:?}"))
    })
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
/// A repeated key keeps its last value.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads a config file and applies `overrides` (each `key=value`) on top.
/// The file is either flat `key=value` text or a JSON manifest.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let mut config = RunConfig::from_manifest(&text)?;
        apply_overrides(&mut config, overrides)?;
        return Ok(config);
    }
    let mut settings = parse_key_values(&text)?;
    settings.extend(override_map(overrides)?);
    let mut config = RunConfig::default();
    config.apply(&settings)?;
    Ok(config)
}

/// Defaults with `overrides` applied, for invocations without a file.
pub fn default_config(overrides: &[String]) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    apply_overrides(&mut config, overrides)?;
    Ok(config)
}

fn override_map(overrides: &[String]) -> Result<BTreeMap<String, String>> {
    if let Some(bad) = overrides.iter().find(|o| !o.contains('=') || o.contains('\n')) {
        return Err(Error::config(format!("override {bad:?} is not key=value")));
    }
    parse_key_values(&overrides.join("\n"))
}

fn apply_overrides(config: &mut RunConfig, overrides: &[String]) -> Result<()> {
    config.apply(&override_map(overrides)?)
}
