use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use super::{accuracy, expected_gain, predict, predict_tta, v_measure_analysis, TtaConfig};
use crate::augment::AugKind;
use crate::episodes::{sample_episode, Dataset, EpisodeSpec};
use crate::error::{Error, Result};
use crate::finetune::{finetune_episode, FineTuneConfig, TrainTrace};
use crate::model::{layer_diff, FeatureExtractor, Network, ParamGroupIndex};
use crate::rng::RngStream;

/// Formats `x` with 6 significant digits, `%g` style: fixed notation for
/// exponents in `[-4, 6)`, otherwise `d.ddddde±XX`, trailing zeros removed.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        let m = trim(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

/// Normal-approximation 95% half-width `1.96·s/√E` with the sample standard
/// deviation; 0 for fewer than two values or identical values.
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 || values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub spec: EpisodeSpec,
    pub ft: FineTuneConfig,
    pub tta: Option<TtaConfig>,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.ft.validate()?;
        if let Some(t) = &self.tta {
            t.validate()?;
        }
        if self.episodes == 0 {
            return Err(Error::invalid("an experiment needs at least one episode"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be >= 1"));
        }
        Ok(())
    }

    /// TTA settings that change predictions, if any.
    pub fn effective_tta(&self) -> Option<&TtaConfig> {
        self.tta.as_ref().filter(|t| t.is_effective())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub episode_id: usize,
    /// Final-model query accuracy (with TTA when enabled).
    pub acc_last: f64,
    /// Best of the per-epoch accuracies and `acc_last`.
    pub acc_best: f64,
    /// 1-indexed epoch of `acc_best`; 0 without training.
    pub best_epoch: usize,
    pub v_pre: f64,
    pub v_post: f64,
    /// Per-group L1 change from the episode's starting network.
    pub layer_diff: Vec<f64>,
    pub trace: TrainTrace,
}

impl EpisodeResult {
    /// Expected gain of the per-epoch trace.
    pub fn expected_gain(&self) -> Result<f64> {
        expected_gain(&self.trace)
    }
}

/// Runs episode `id`. Its stream is `RngStream::new(seed).child_idx("episode", id)`;
/// sampling, fine-tuning, TTA and K-Means use its children `sample`,
/// (`head`, `train`), `tta` and `kmeans`.
pub fn evaluate_episode(
    dataset: &Dataset,
    pretrained: &FeatureExtractor,
    cfg: &ExperimentConfig,
    id: usize,
) -> Result<EpisodeResult> {
    let rng = RngStream::new(cfg.seed).child_idx("episode", id as u64);
    let episode = sample_episode(dataset, cfg.spec, &mut rng.child("sample"))?;
    let tuned = finetune_episode(pretrained, &episode, &cfg.ft, &rng)?;
    let preds = match cfg.effective_tta() {
        Some(t) => predict_tta(&tuned.model, &episode.query, t, &rng.child("tta"))?,
        None => predict(&tuned.model, &episode.query)?,
    };
    let acc_last = accuracy(&preds, &episode.query_labels);
    let (acc_best, best_epoch) = match tuned.trace.best() {
        Some((b, e)) if b >= acc_last => (b, e),
        _ => (acc_last, tuned.trace.epochs()),
    };
    let (v_pre, v_post) = v_measure_analysis(pretrained, &tuned.model.extractor, &episode, &rng.child("kmeans"))?;
    let start = Network::new(pretrained.clone(), tuned.initial_head.clone())?;
    Ok(EpisodeResult {
        episode_id: id,
        acc_last,
        acc_best,
        best_epoch,
        v_pre,
        v_post,
        layer_diff: layer_diff(&start, &tuned.model)?,
        trace: tuned.trace,
    })
}

#[derive(Clone, Debug)]
pub struct Report {
    pub config: ExperimentConfig,
    pub group_names: Vec<String>,
    /// Sorted by episode id.
    pub rows: Vec<EpisodeResult>,
    pub mean: f64,
    pub ci95: f64,
}

/// Runs episodes `0..E` on `cfg.workers` threads and merges by episode id,
/// so the report does not depend on the worker count.
pub fn run_experiment(dataset: &Dataset, pretrained: &FeatureExtractor, cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<EpisodeResult>> = pool.install(|| {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|id| {
                evaluate_episode(dataset, pretrained, cfg, id).map_err(|e| Error::Episode {
                    id,
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = rows.iter().map(|r| r.acc_last).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(Report {
        config: cfg.clone(),
        group_names: ParamGroupIndex::new(pretrained.config).names().to_vec(),
        ci95: ci95(&accs),
        mean,
        rows,
    })
}

impl Report {
    pub fn csv_header(&self) -> String {
        let mut h = String::from(
            "episode_id,n,k,k_q,update_mode,da_policy,da_preset,mix_mode,sched_start,sched_end,tta,v,acc_last,acc_best,best_epoch,v_pre,v_post",
        );
        for g in &self.group_names {
            h.push(',');
            h.push_str(g);
        }
        h
    }

    pub fn csv(&self) -> String {
        let c = &self.config;
        let policy = &c.ft.da_policy;
        let da_on = policy.kind != AugKind::None && c.ft.schedule.aug_epochs.is_some();
        let dash = || "-".to_string();
        let preset = match policy.kind {
            AugKind::RCrop | AugKind::CJitter | AugKind::BaseAug => policy.preset.to_string(),
            _ => dash(),
        };
        let mix = if policy.is_mixing() { policy.mix_mode.to_string() } else { dash() };
        let (s0, s1) = match c.ft.schedule.aug_epochs {
            Some((a, b)) if da_on => (a.to_string(), b.to_string()),
            _ => (dash(), dash()),
        };
        let (tta, v) = match c.effective_tta() {
            Some(t) => ("true", t.v),
            None => ("false", 1),
        };
        let fixed = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.spec.n, c.spec.k, c.spec.k_q, c.ft.mode, policy.kind, preset, mix, s0, s1, tta, v
        );
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{fixed},{},{},{},{},{}",
                r.episode_id,
                fmt_num(r.acc_last),
                fmt_num(r.acc_best),
                r.best_epoch,
                fmt_num(r.v_pre),
                fmt_num(r.v_post)
            );
            for d in &r.layer_diff {
                out.push(',');
                out.push_str(&fmt_num(*d));
            }
            out.push('\n');
        }
        out
    }

    /// Summary JSON: config echo, episode count, mean and ci95, plus
    /// `runtime_seconds` when given.
    pub fn summary_json(&self, echo: &BTreeMap<String, String>, runtime_seconds: Option<f64>) -> String {
        let num = |x: f64| -> Value {
            fmt_num(x)
                .parse::<f64>()
                .ok()
                .and_then(serde_json::Number::from_f64)
                .map_or(Value::Null, Value::Number)
        };
        let config: Map<String, Value> = echo.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
        let mut v = json!({
            "config": config,
            "episodes": self.rows.len(),
            "mean": num(self.mean),
            "ci95": num(self.ci95),
        });
        if let Some(t) = runtime_seconds {
            v["runtime_seconds"] = num(t);
        }
        let mut s = serde_json::to_string_pretty(&v).expect("plain JSON value");
        s.push('\n');
        s
    }
}
