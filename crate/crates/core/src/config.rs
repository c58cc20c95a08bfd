//! Flat `key = value` run configuration.
//!
//! Files hold one `key = value` per line; `#` starts a comment and lists are
//! comma separated. Values resolve as built-in default, then file, then
//! command-line override. A summary JSON written by `run` is accepted as a
//! config file too (its `config` object is read back).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::augment::{AugKind, AugPolicy, IntensityPreset, MixMode};
use crate::episodes::{EpisodeSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluate::{EnsembleSpace, ExperimentConfig, TtaConfig};
use crate::finetune::{FineTuneConfig, PretrainConfig, Schedule, UpdateMode};
use crate::intensity::{IntensityConfig, PairsMode};
use crate::model::{ModelConfig, SgdConfig};

/// Every accepted key with its default. `auto` and `-` mark values derived
/// from other keys or left unset.
pub const KEYS: &[(&str, &str)] = &[
    ("data.path", "-"),
    ("data.preset", "source-a"),
    ("data.seed", "0"),
    ("data.height", "auto"),
    ("data.width", "auto"),
    ("data.classes", "auto"),
    ("data.per_class", "auto"),
    ("data.noise_sigma", "auto"),
    ("data.translate_radius", "auto"),
    ("model.checkpoint", "-"),
    ("model.base_width", "16"),
    ("model.blocks", "3"),
    ("pretrain.epochs", "60"),
    ("pretrain.batch_size", "64"),
    ("pretrain.lr", "0.1"),
    ("pretrain.momentum", "0.9"),
    ("pretrain.weight_decay", "0.0001"),
    ("pretrain.aug", "BaseAug"),
    ("pretrain.preset", "Default"),
    ("episode.n", "5"),
    ("episode.k", "1"),
    ("episode.kq", "15"),
    ("ft.mode", "LP"),
    ("ft.epochs", "100"),
    ("ft.batch_size", "auto"),
    ("ft.lr", "0.01"),
    ("ft.momentum", "0.9"),
    ("ft.weight_decay", "0.001"),
    ("da.kind", "None"),
    ("da.preset", "Default"),
    ("da.mix_mode", "WB"),
    ("aug.per_epoch_params", "false"),
    ("sched.start", "auto"),
    ("sched.end", "auto"),
    ("tta.enabled", "false"),
    ("tta.kind", "BaseAug"),
    ("tta.preset", "Default"),
    ("tta.v", "32"),
    ("tta.space", "probs"),
    ("intensity.kinds", "None,HFlip,RCrop,CJitter,BaseAug,MixUp,CutMix"),
    ("intensity.presets", "Default"),
    ("intensity.modes", "WB"),
    ("intensity.subset_size", "256"),
    ("intensity.subset_seed", "0"),
    ("intensity.pairs", "full"),
    ("intensity.lambda_draws", "1"),
    ("intensity.lambda", "auto"),
    ("run.episodes", "600"),
    ("run.seed", "0"),
    ("run.record_runtime", "false"),
    ("grid.cap", "64"),
];

/// Keys whose value is a list in every command, so `grid` does not expand them.
pub const LIST_KEYS: &[&str] = &["intensity.kinds", "intensity.presets", "intensity.modes"];

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parses config text: either `key = value` lines or a summary JSON.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config JSON: {e}")))?;
        let obj = v
            .get("config")
            .and_then(|c| c.as_object())
            .ok_or_else(|| Error::config("config JSON has no `config` object"))?;
        return obj
            .iter()
            .map(|(k, v)| {
                v.as_str()
                    .map(|s| (k.clone(), s.to_string()))
                    .ok_or_else(|| Error::config(format!("config JSON value for {k} is not a string")))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            for (k, v) in parse_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e| Error::config(format!("{key} = {v:?}: {e}")))
    }

    fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            "auto" | "-" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::config(format!("{key} = {v:?}: expected true or false"))),
        }
    }

    /// Comma-separated items of `key`; empty items are an error.
    pub fn list(&self, key: &str) -> Result<Vec<String>> {
        let items: Vec<String> = self.get(key).split(',').map(|s| s.trim().to_string()).collect();
        if items.iter().any(String::is_empty) {
            return Err(Error::config(format!("{key}: empty list item")));
        }
        Ok(items)
    }

    /// Path-valued key; errors when unset.
    pub fn path(&self, key: &str) -> Result<&Path> {
        match self.get(key) {
            "-" | "" => Err(Error::config(format!("{key} must be set"))),
            p => Ok(Path::new(p)),
        }
    }

    /// Keys holding comma lists, other than inherent list keys.
    pub fn grid_axes(&self) -> Result<Vec<(String, Vec<String>)>> {
        let mut axes = Vec::new();
        for (k, v) in &self.values {
            if LIST_KEYS.contains(&k.as_str()) {
                continue;
            }
            if v.is_empty() {
                return Err(Error::config(format!("{k}: empty grid list")));
            }
            if v.contains(',') {
                axes.push((k.clone(), self.list(k)?));
            }
        }
        Ok(axes)
    }

    fn no_lists(&self) -> Result<()> {
        match self.values.iter().find(|(k, v)| v.contains(',') && !LIST_KEYS.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::config(format!("{k} holds a list; use the grid command"))),
            None => Ok(()),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            base_width: self.parse("model.base_width")?,
            blocks: self.parse("model.blocks")?,
        };
        m.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(m)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        self.no_lists()?;
        let mut s = SynthConfig::preset(self.get("data.preset")).map_err(|e| Error::config(e.to_string()))?;
        if let Some(h) = self.parse_opt("data.height")? {
            s.height = h;
        }
        if let Some(w) = self.parse_opt("data.width")? {
            s.width = w;
        }
        if let Some(c) = self.parse_opt("data.classes")? {
            s.n_classes = c;
        }
        if let Some(p) = self.parse_opt("data.per_class")? {
            s.per_class = p;
        }
        if let Some(n) = self.parse_opt("data.noise_sigma")? {
            s.noise_sigma = n;
        }
        if let Some(r) = self.parse_opt("data.translate_radius")? {
            s.translate_radius = r;
        }
        s.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(s)
    }

    fn policy(&self, kind: &str, preset: &str, mode: &str) -> Result<AugPolicy> {
        let kind: AugKind = self.parse(kind)?;
        let preset: IntensityPreset = self.parse(preset)?;
        let mut p = AugPolicy::new(kind, preset);
        if kind.is_mixing() {
            p.mix_mode = self.parse(mode)?;
        }
        Ok(p)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        self.no_lists()?;
        let cfg = PretrainConfig {
            model: self.model()?,
            epochs: self.parse("pretrain.epochs")?,
            batch_size: self.parse("pretrain.batch_size")?,
            sgd: SgdConfig {
                lr: self.parse("pretrain.lr")?,
                momentum: self.parse("pretrain.momentum")?,
                weight_decay: self.parse("pretrain.weight_decay")?,
            },
            aug: self.policy("pretrain.aug", "pretrain.preset", "da.mix_mode")?,
            ..PretrainConfig::default()
        };
        if cfg.aug.is_mixing() {
            return Err(Error::config("pretrain.aug must be a single-image augmentation"));
        }
        if cfg.batch_size < 2 {
            return Err(Error::config("pretrain.batch_size must be at least 2"));
        }
        Ok(cfg)
    }

    pub fn experiment(&self, workers: usize) -> Result<ExperimentConfig> {
        self.no_lists()?;
        let k = self.parse("episode.k")?;
        let spec = EpisodeSpec::new(self.parse("episode.n")?, k, self.parse("episode.kq")?)
            .map_err(|e| Error::config(e.to_string()))?;
        let mode: UpdateMode = self.parse("ft.mode")?;
        let mut ft = FineTuneConfig::new(mode, k);
        ft.epochs = self.parse("ft.epochs")?;
        if let Some(b) = self.parse_opt("ft.batch_size")? {
            ft.batch_size = b;
        }
        ft.sgd = SgdConfig {
            lr: self.parse("ft.lr")?,
            momentum: self.parse("ft.momentum")?,
            weight_decay: self.parse("ft.weight_decay")?,
        };
        ft.da_policy = self.policy("da.kind", "da.preset", "da.mix_mode")?;
        ft.da_policy.shared_params = self.flag("aug.per_epoch_params")?;
        let start = self.parse_opt::<usize>("sched.start")?;
        let end = self.parse_opt::<usize>("sched.end")?;
        ft.schedule = if ft.da_policy.kind == AugKind::None {
            Schedule::none()
        } else {
            Schedule::window(start.unwrap_or(1), end.unwrap_or(ft.epochs))
        };
        let tta = if self.flag("tta.enabled")? {
            Some(TtaConfig {
                policy: self.policy("tta.kind", "tta.preset", "da.mix_mode")?,
                v: self.parse("tta.v")?,
                space: self.parse::<EnsembleSpace>("tta.space")?,
            })
        } else {
            None
        };
        let cfg = ExperimentConfig {
            spec,
            ft,
            tta,
            episodes: self.parse("run.episodes")?,
            seed: self.parse("run.seed")?,
            workers,
        };
        cfg.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn record_runtime(&self) -> Result<bool> {
        self.flag("run.record_runtime")
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("run.seed")
    }

    pub fn grid_cap(&self) -> Result<usize> {
        self.parse("grid.cap")
    }

    /// Intensity settings and the requested policies: one per kind, expanded
    /// over presets (RCrop, CJitter, BaseAug) or mix modes (MixUp, CutMix).
    pub fn intensity(&self) -> Result<(IntensityConfig, Vec<AugPolicy>)> {
        self.no_lists()?;
        let cfg = IntensityConfig {
            subset_size: self.parse("intensity.subset_size")?,
            subset_seed: self.parse("intensity.subset_seed")?,
            pairs: self.parse::<PairsMode>("intensity.pairs")?,
            lambda_draws: self.parse("intensity.lambda_draws")?,
            fixed_lambda: self.parse_opt("intensity.lambda")?,
        };
        cfg.validate().map_err(|e| Error::config(e.to_string()))?;
        let presets = self
            .list("intensity.presets")?
            .iter()
            .map(|p| p.parse::<IntensityPreset>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::config(e.to_string()))?;
        let modes = self
            .list("intensity.modes")?
            .iter()
            .map(|m| m.parse::<MixMode>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::config(e.to_string()))?;
        let mut policies = Vec::new();
        for k in self.list("intensity.kinds")? {
            let kind: AugKind = k.parse().map_err(|e: Error| Error::config(e.to_string()))?;
            match kind {
                AugKind::RCrop | AugKind::CJitter | AugKind::BaseAug => {
                    policies.extend(presets.iter().map(|&p| AugPolicy::new(kind, p)))
                }
                AugKind::MixUp | AugKind::CutMix => {
                    policies.extend(modes.iter().map(|&m| AugPolicy::mixing(kind, m)))
                }
                _ => policies.push(AugPolicy::new(kind, IntensityPreset::Default)),
            }
        }
        Ok((cfg, policies))
    }
}
