//! The `fslab` command line: argument parsing and the five subcommands.
//!
//! Exit codes: 0 success, 1 configuration error (nothing ran), 2 runtime
//! error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::episodes::{generate_synthetic, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::evaluate::{fmt_num, run_experiment, Report};
use crate::finetune::{pretrain, Pretrained};
use crate::intensity::{IntensityProbe, IntensityReport};
use crate::model::{load_checkpoint, save_checkpoint, FeatureExtractor};
use crate::rng::RngStream;

pub const USAGE: &str = "\
usage: fslab <command> [--config FILE] [--KEY VALUE ...] [options]

commands:
  gen-data   --out FILE.fsds [--preset NAME] [--seed N]
  pretrain   --out FILE.ftm  (data.path = source set)
  intensity  [--out FILE.csv] (data.path = subset source, model.checkpoint)
  run        --out-dir DIR   (data.path = target set, model.checkpoint)
  grid       --out-dir DIR   (list values, e.g. --ft.mode LP,FT)

options:
  --config FILE   key = value file, or a summary.json from an earlier run
  --workers N     episode threads (default: available cores); output is
                  identical for every N
  --KEY VALUE     override any config key, e.g. --episode.k 5
";

#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub overrides: Vec<(String, String)>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Parses `args` (without the program name).
pub fn parse_args(args: &[String]) -> Result<Invocation> {
    let mut it = args.iter();
    let command = it
        .next()
        .filter(|c| !c.starts_with('-'))
        .ok_or_else(|| Error::config("missing command"))?
        .clone();
    if !["gen-data", "pretrain", "intensity", "run", "grid"].contains(&command.as_str()) {
        return Err(Error::config(format!("unknown command `{command}`")));
    }
    let mut inv = Invocation {
        command,
        config: None,
        out: None,
        workers: default_workers(),
        overrides: Vec::new(),
    };
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("unexpected argument `{arg}`")))?;
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        match name.as_str() {
            "config" => inv.config = Some(PathBuf::from(value)),
            "out" | "out-dir" => inv.out = Some(PathBuf::from(value)),
            "workers" => {
                inv.workers = value
                    .parse()
                    .ok()
                    .filter(|&w| w >= 1)
                    .ok_or_else(|| Error::config(format!("--workers needs a positive integer, got {value:?}")))?
            }
            "preset" => inv.overrides.push(("data.preset".into(), value)),
            "epochs" => inv.overrides.push(("pretrain.epochs".into(), value)),
            "seed" if inv.command == "gen-data" => inv.overrides.push(("data.seed".into(), value)),
            "seed" => inv.overrides.push(("run.seed".into(), value)),
            _ => inv.overrides.push((name, value)),
        }
    }
    Ok(inv)
}

fn required_out(inv: &Invocation) -> Result<&Path> {
    inv.out
        .as_deref()
        .ok_or_else(|| Error::config(format!("{} needs --out", inv.command)))
}

fn existing(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    let p = cfg.path(key)?;
    if !p.is_file() {
        return Err(Error::config(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p.to_path_buf())
}

/// Generates the configured synthetic set and writes it to `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let synth = cfg.synth()?;
    let seed: u64 = cfg
        .get("data.seed")
        .parse()
        .map_err(|_| Error::config("data.seed must be an integer"))?;
    let ds = generate_synthetic(&synth, &RngStream::new(seed))?;
    save_dataset(&ds, out)?;
    Ok(ds)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<Pretrained> {
    let pcfg = cfg.pretrain()?;
    let seed = cfg.seed()?;
    let data = existing(cfg, "data.path")?;
    let source = load_dataset(&data)?;
    let pre = pretrain(&source, &pcfg, &RngStream::new(seed))?;
    save_checkpoint(&pre.net, out)?;
    Ok(pre)
}

fn load_inputs(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    Ok((existing(cfg, "data.path")?, existing(cfg, "model.checkpoint")?))
}

fn load_extractor(path: &Path) -> Result<FeatureExtractor> {
    Ok(load_checkpoint(path)?.extractor)
}

/// One report per requested policy, all on the same subset.
pub fn cmd_intensity(cfg: &RunConfig) -> Result<Vec<IntensityReport>> {
    cfg.intensity()?;
    let (data, ckpt) = load_inputs(cfg)?;
    let source = load_dataset(&data)?;
    let ext = load_extractor(&ckpt)?;
    cmd_intensity_with(cfg, &source, &ext)
}

/// [`cmd_intensity`] on an in-memory dataset and extractor.
pub fn cmd_intensity_with(cfg: &RunConfig, source: &Dataset, ext: &FeatureExtractor) -> Result<Vec<IntensityReport>> {
    let (icfg, policies) = cfg.intensity()?;
    let probe = IntensityProbe::new(ext, source, &icfg)?;
    let rng = RngStream::new(cfg.seed()?);
    policies.iter().map(|p| probe.measure(p, &rng)).collect()
}

pub fn intensity_csv(reports: &[IntensityReport]) -> String {
    let mut s = format!("{}\n", IntensityReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: Report,
    pub csv: String,
    pub json: String,
    pub runtime_seconds: f64,
}

pub fn cmd_run(cfg: &RunConfig, workers: usize) -> Result<RunArtifacts> {
    cfg.experiment(workers)?;
    cfg.record_runtime()?;
    let (data, ckpt) = load_inputs(cfg)?;
    let target = load_dataset(&data)?;
    let ext = load_extractor(&ckpt)?;
    run_with(cfg, &target, &ext, workers)
}

/// [`cmd_run`] on an in-memory target set and extractor.
pub fn run_with(cfg: &RunConfig, target: &Dataset, ext: &FeatureExtractor, workers: usize) -> Result<RunArtifacts> {
    let ecfg = cfg.experiment(workers)?;
    let record = cfg.record_runtime()?;
    let start = Instant::now();
    let report = run_experiment(target, ext, &ecfg)?;
    let runtime_seconds = start.elapsed().as_secs_f64();
    let csv = report.csv();
    let json = report.summary_json(cfg.values(), record.then_some(runtime_seconds));
    Ok(RunArtifacts {
        report,
        csv,
        json,
        runtime_seconds,
    })
}

pub fn write_run(dir: &Path, art: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("results.csv");
    std::fs::write(&csv, &art.csv).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("summary.json");
    std::fs::write(&json, &art.json).map_err(|e| Error::io(&json, e))
}

/// Directory-safe `key=value` fragment.
fn slug_part(key: &str, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{key}={clean}")
}

/// Cartesian product of list-valued keys, last key varying fastest.
pub fn grid_runs(cfg: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    let axes = cfg.grid_axes()?;
    let total = axes.iter().try_fold(1usize, |acc, (_, v)| acc.checked_mul(v.len()));
    let cap = cfg.grid_cap()?;
    match total {
        Some(t) if t <= cap => {}
        _ => {
            return Err(Error::config(format!(
                "grid has {} runs, above grid.cap = {cap}",
                total.map_or("too many".to_string(), |t| t.to_string())
            )))
        }
    }
    let mut runs = vec![(Vec::<String>::new(), cfg.clone())];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(runs.len() * values.len());
        for (parts, base) in &runs {
            for v in values {
                let mut c = base.clone();
                c.set(key, v)?;
                let mut p = parts.clone();
                p.push(slug_part(key, v));
                next.push((p, c));
            }
        }
        runs = next;
    }
    let named: Vec<(String, RunConfig)> = runs
        .into_iter()
        .map(|(p, c)| (if p.is_empty() { "run".to_string() } else { p.join("__") }, c))
        .collect();
    let mut names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("grid values collide after slugging"));
    }
    Ok(named)
}

/// Runs every grid combination into `out/<slug>/` and writes `out/index.json`.
pub fn cmd_grid(cfg: &RunConfig, workers: usize, out: &Path) -> Result<String> {
    let runs = grid_runs(cfg)?;
    let axes = cfg.grid_axes()?;
    for (_, c) in &runs {
        c.experiment(workers)?;
        load_inputs(c)?;
    }
    let mut index = Vec::new();
    for (name, c) in &runs {
        let art = cmd_run(c, workers)?;
        write_run(&out.join(name), &art)?;
        eprintln!("{name}: mean {} ci95 {}", fmt_num(art.report.mean), fmt_num(art.report.ci95));
        let params: serde_json::Map<String, Value> = axes
            .iter()
            .map(|(k, _)| (k.clone(), Value::String(c.get(k).to_string())))
            .collect();
        index.push(json!({
            "name": name,
            "params": params,
            "csv": format!("{name}/results.csv"),
            "summary": format!("{name}/summary.json"),
        }));
    }
    let mut s = serde_json::to_string_pretty(&json!({ "runs": index })).expect("plain JSON value");
    s.push('\n');
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("index.json");
    std::fs::write(&path, &s).map_err(|e| Error::io(&path, e))?;
    Ok(s)
}

fn execute(inv: &Invocation) -> Result<()> {
    let cfg = RunConfig::load(inv.config.as_deref(), &inv.overrides)?;
    match inv.command.as_str() {
        "gen-data" => {
            let out = required_out(inv)?;
            let ds = cmd_gen_data(&cfg, out)?;
            println!("{}: {} classes, {} samples", out.display(), ds.n_classes(), ds.len());
        }
        "pretrain" => {
            let out = required_out(inv)?;
            let pre = cmd_pretrain(&cfg, out)?;
            let loss = pre.trace.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "{}: final loss {}, train accuracy {}",
                out.display(),
                fmt_num(loss),
                fmt_num(pre.train_accuracy)
            );
        }
        "intensity" => {
            let csv = intensity_csv(&cmd_intensity(&cfg)?);
            match &inv.out {
                Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e))?,
                None => print!("{csv}"),
            }
        }
        "run" => {
            let out = required_out(inv)?;
            let art = cmd_run(&cfg, inv.workers)?;
            for r in &art.report.rows {
                eprintln!(
                    "episode {}: acc_last {} acc_best {} (epoch {})",
                    r.episode_id,
                    fmt_num(r.acc_last),
                    fmt_num(r.acc_best),
                    r.best_epoch
                );
            }
            write_run(out, &art)?;
            eprintln!("runtime {}s", fmt_num(art.runtime_seconds));
            println!("mean {} ci95 {}", fmt_num(art.report.mean), fmt_num(art.report.ci95));
        }
        "grid" => {
            let out = required_out(inv)?;
            cmd_grid(&cfg, inv.workers, out)?;
            println!("{}", out.join("index.json").display());
        }
        _ => unreachable!("command checked by parse_args"),
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Runs the CLI on `args` (without the program name) and returns the exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    if args.is_empty() || args.iter().any(|a| a == "--help" || a == "-h") {
        print!("{USAGE}");
        return if args.is_empty() { 1 } else { 0 };
    }
    match parse_args(args).and_then(|inv| execute(&inv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
