// SPDX-License-Identifier: Apache-2.0

//! Runs configured experiments and writes their outputs.
//!
//! An output directory holds:
//!
//! - `config.txt`: the resolved configuration, readable by `--config`;
//! - `FORMAT`: the output format stamp;
//! - `metrics.csv`: one row per (round, method, seed), appended as rounds finish;
//! - `summary.txt`: final metrics and paired comparisons as `key = value`;
//! - `checkpoints/`: resumable snapshots when `run.checkpoint_every > 0`.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use fedsc_core::data::{holdout_split, make_dataset, partition_iid, partition_noniid, ClientDataset};
use fedsc_core::encoder::{init_params, EncoderArch, Params};
use fedsc_core::federation::{EvalData, Method, RoundRecord, Simulation};
use fedsc_core::numerics::{Purpose, RngStream};
use fedsc_core::privacy::Epsilon;

use crate::config::{ExperimentConfig, Methods, Partition, FORMAT_VERSION};
use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "FEDSC_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const METRICS_HEADER: &str = "round,method,seed,global_sc_loss,knn_acc,linear_acc,eps_spent,alpha,weight_drift";

/// Output root from the environment, or `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

/// `run.output_dir` if set, else `<root>/<label>`.
pub fn output_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    cfg.run.output_dir.clone().unwrap_or_else(|| root.join(&cfg.run.label))
}

/// Everything a seed's runs share: clients, evaluation split and `θ⁰`.
pub struct SeedData {
    pub clients: Vec<ClientDataset>,
    pub eval: Option<EvalData>,
    pub theta0: Params,
}

pub fn build_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData, CliError> {
    let anchors = make_dataset(&cfg.data, &mut RngStream::for_purpose(seed, Purpose::Dataset))?;
    let (train, test) = holdout_split(anchors, cfg.data.holdout, &mut RngStream::for_purpose(seed, Purpose::Holdout))?;
    let mut rng = RngStream::for_purpose(seed, Purpose::Partition);
    let kernel = cfg.data.kernel();
    let clients = match cfg.partition {
        Partition::NonIid => partition_noniid(train, cfg.data.clients, cfg.data.classes_per_client, kernel, &mut rng)?,
        Partition::Iid => partition_iid(train, cfg.data.clients, kernel, &mut rng)?,
    };
    let eval = (!test.is_empty()).then(|| EvalData::from_clients(&clients, test, cfg.eval.knn_k, cfg.eval.ridge, cfg.eval.every));
    let mut widths = vec![cfg.data.dim];
    widths.extend(&cfg.encoder.hidden);
    widths.push(cfg.encoder.output_dim);
    let arch = EncoderArch::new(widths)?;
    let theta0 = init_params(&arch, cfg.encoder.init_scale, &mut RngStream::for_purpose(seed, Purpose::Init))?;
    Ok(SeedData { clients, eval, theta0 })
}

fn methods(cfg: &ExperimentConfig) -> Vec<Method> {
    match cfg.run.methods {
        Methods::FedSc => vec![Method::FedSc],
        Methods::FedAvgSc => vec![Method::FedAvgSc],
        Methods::Both => vec![Method::FedSc, Method::FedAvgSc],
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn eps_text(e: Epsilon) -> String {
    match e {
        Epsilon::Finite(x) => x.to_string(),
        Epsilon::Unbounded => "inf".into(),
    }
}

pub fn metrics_row(method: Method, seed: u64, r: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.round,
        method.name(),
        seed,
        opt(r.global_loss),
        opt(r.knn_accuracy),
        opt(r.linear_accuracy),
        eps_text(r.epsilon),
        opt(r.alpha),
        r.weight_drift
    )
}

/// Final state of one (method, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub rounds_completed: usize,
    pub last: RoundRecord,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub metrics_rows: usize,
    pub results: Vec<RunResult>,
}

impl Outcome {
    pub fn diverged(&self) -> Option<&RunResult> {
        self.results.iter().find(|r| r.diverged_at.is_some())
    }
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    let occupied = dir.exists() && fs::read_dir(dir).map_err(CliError::io(dir))?.next().is_some();
    if occupied {
        if !overwrite {
            return Err(CliError::Config(format!(
                "output directory {} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(path))
}

struct MetricsFile {
    path: PathBuf,
    out: BufWriter<File>,
    rows: usize,
}

impl MetricsFile {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let file = OpenOptions::new().create_new(true).append(true).open(&path).map_err(CliError::io(&path))?;
        let mut m = Self {
            out: BufWriter::new(file),
            path,
            rows: 0,
        };
        m.line(METRICS_HEADER)?;
        m.rows = 0;
        Ok(m)
    }

    fn line(&mut self, text: &str) -> Result<(), CliError> {
        writeln!(self.out, "{text}").map_err(CliError::io(&self.path))?;
        self.rows += 1;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), CliError> {
        self.out.flush().map_err(CliError::io(&self.path))
    }
}

/// Runs every configured (seed, method) pair into `dir`. Refuses a non-empty
/// `dir` unless `overwrite` is set. A diverged run stops the experiment; the
/// outputs written so far are kept and the summary records the failure.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, overwrite: bool) -> Result<Outcome, CliError> {
    cfg.validate()
        .map_err(|(key, message)| CliError::Config(format!("{key}: {message}")))?;
    prepare_dir(dir, overwrite)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    write_file(&dir.join("FORMAT"), &format!("fedsc-run v{FORMAT_VERSION}\n"))?;
    let ckpt_dir = dir.join("checkpoints");
    if cfg.run.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(CliError::io(&ckpt_dir))?;
    }

    let started = Instant::now();
    let mut metrics = MetricsFile::create(dir.join("metrics.csv"))?;
    let mut results = Vec::new();
    'seeds: for seed in cfg.run.first_seed..cfg.run.first_seed + cfg.run.seeds as u64 {
        let data = build_seed(cfg, seed)?;
        let fed = fedsc_core::federation::FedConfig {
            seed,
            ..cfg.fed.clone()
        };
        for method in methods(cfg) {
            let mut sim = Simulation::new(method, &fed, &data.clients, data.theta0.clone(), data.eval.as_ref())?;
            metrics.line(&metrics_row(method, seed, sim.trace().last()))?;
            let mut diverged_at = None;
            while !sim.is_done() {
                match sim.step() {
                    Ok(()) => {}
                    Err(fedsc_core::Error::Diverged { round }) => {
                        diverged_at = Some(round);
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
                metrics.line(&metrics_row(method, seed, sim.trace().last()))?;
                metrics.flush()?;
                let round = sim.state().round;
                if cfg.run.checkpoint_every > 0 && (round.is_multiple_of(cfg.run.checkpoint_every) || sim.is_done()) {
                    let path = ckpt_dir.join(format!("checkpoint-{}-seed{seed}-{round:05}.json", method.name()));
                    sim.checkpoint().save(&path)?;
                }
            }
            log::info!(
                "{} seed {seed}: {} rounds in {:.2}s",
                method.name(),
                sim.state().round,
                started.elapsed().as_secs_f64()
            );
            results.push(RunResult {
                method,
                seed,
                rounds_completed: sim.state().round,
                last: sim.trace().last().clone(),
                diverged_at,
            });
            if diverged_at.is_some() {
                break 'seeds;
            }
        }
    }
    metrics.flush()?;
    let outcome = Outcome {
        dir: dir.to_path_buf(),
        metrics_rows: metrics.rows,
        results,
    };
    write_file(&dir.join("summary.txt"), &summary(cfg, &outcome, started.elapsed().as_secs_f64()))?;
    if let Some(bad) = outcome.diverged() {
        return Err(CliError::Diverged {
            method: bad.method.name().into(),
            seed: bad.seed,
            round: bad.diverged_at.unwrap_or_default(),
        });
    }
    Ok(outcome)
}

fn summary(cfg: &ExperimentConfig, outcome: &Outcome, wall: f64) -> String {
    let mut s = String::new();
    let seeds: Vec<String> = (0..cfg.run.seeds as u64).map(|i| (cfg.run.first_seed + i).to_string()).collect();
    let names: Vec<&str> = methods(cfg).iter().map(Method::name).collect();
    let status = match outcome.diverged() {
        Some(r) => format!("diverged ({} seed {} round {})", r.method.name(), r.seed, r.diverged_at.unwrap_or_default()),
        None => "ok".into(),
    };
    let _ = writeln!(s, "format_version = {FORMAT_VERSION}");
    let _ = writeln!(s, "label = {}", cfg.run.label);
    let _ = writeln!(s, "seeds = {}", seeds.join(","));
    let _ = writeln!(s, "methods = {}", names.join(","));
    let _ = writeln!(s, "rounds = {}", cfg.fed.rounds);
    let _ = writeln!(s, "status = {status}");
    let _ = writeln!(s, "metrics_rows = {}", outcome.metrics_rows);
    let _ = writeln!(s, "wall_time_secs = {wall:.3}");
    for r in &outcome.results {
        let p = format!("{}.seed{}", r.method.name(), r.seed);
        let _ = writeln!(s, "{p}.rounds_completed = {}", r.rounds_completed);
        let _ = writeln!(s, "{p}.final_global_sc_loss = {}", opt(r.last.global_loss));
        let _ = writeln!(s, "{p}.final_knn_acc = {}", opt(r.last.knn_accuracy));
        let _ = writeln!(s, "{p}.final_linear_acc = {}", opt(r.last.linear_accuracy));
        let _ = writeln!(s, "{p}.eps_spent = {}", eps_text(r.last.epsilon));
    }
    let pairs: Vec<(&RunResult, &RunResult)> = outcome
        .results
        .iter()
        .filter(|a| a.method == Method::FedSc)
        .filter_map(|a| {
            outcome
                .results
                .iter()
                .find(|b| b.method == Method::FedAvgSc && b.seed == a.seed)
                .map(|b| (a, b))
        })
        .collect();
    if !pairs.is_empty() {
        let lower = pairs
            .iter()
            .filter(|(a, b)| matches!((a.last.global_loss, b.last.global_loss), (Some(x), Some(y)) if x < y))
            .count();
        let _ = writeln!(s, "paired.seeds = {}", pairs.len());
        let _ = writeln!(s, "paired.fedsc_lower_loss = {lower}");
        let gaps: Vec<f64> = pairs
            .iter()
            .filter_map(|(a, b)| Some(a.last.knn_accuracy? - b.last.knn_accuracy?))
            .collect();
        if !gaps.is_empty() {
            let _ = writeln!(s, "paired.mean_knn_gap = {}", gaps.iter().sum::<f64>() / gaps.len() as f64);
        }
    }
    s
}

/// One entry of a sweep: the overrides and where its outputs live.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub overrides: Vec<(String, String)>,
    pub dir: PathBuf,
}

/// Cartesian product of `vary`, each entry in its own subdirectory of `base`.
pub fn sweep_entries(base: &Path, vary: &[(String, Vec<String>)]) -> Vec<SweepEntry> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in vary {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|overrides| {
            let name: Vec<String> = overrides
                .iter()
                .map(|(k, v)| format!("{k}={}", v.replace(['/', '\\', ','], "_")))
                .collect();
            SweepEntry {
                dir: base.join(name.join(",")),
                overrides,
            }
        })
        .collect()
}

/// Parses `key=v1,v2,...`.
pub fn parse_vary(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--vary expects key=v1,v2,..., got {spec:?}")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if key.trim().is_empty() || values.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("--vary expects key=v1,v2,..., got {spec:?}")));
    }
    Ok((key.trim().to_string(), values))
}

/// Runs every sweep entry. Entries are independent and may run in parallel.
/// Writes `sweep.csv` listing each entry's directory and status.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    vary: &[(String, Vec<String>)],
    base: &Path,
    overwrite: bool,
    parallel: bool,
) -> Result<Vec<(SweepEntry, Result<Outcome, CliError>)>, CliError> {
    let entries = sweep_entries(base, vary);
    let mut configs = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut c = cfg.clone();
        for (k, v) in &e.overrides {
            if k == "run.output_dir" {
                return Err(CliError::Config("--vary cannot change run.output_dir".into()));
            }
            c.set(k, v).map_err(|m| CliError::Config(format!("--vary {k}={v}: {m}")))?;
        }
        c.validate()
            .map_err(|(key, m)| CliError::Config(format!("sweep entry {}: {key}: {m}", e.dir.display())))?;
        c.run.output_dir = Some(e.dir.clone());
        configs.push(c);
    }
    prepare_dir(base, overwrite)?;
    let run = |(e, c): (&SweepEntry, &ExperimentConfig)| (e.clone(), run_experiment(c, &e.dir, false));
    let results: Vec<(SweepEntry, Result<Outcome, CliError>)> = if parallel {
        entries.par_iter().zip(configs.par_iter()).map(run).collect()
    } else {
        entries.iter().zip(configs.iter()).map(run).collect()
    };
    let mut index = String::from("entry,overrides,dir,status\n");
    for (i, (e, r)) in results.iter().enumerate() {
        let overrides: Vec<String> = e.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let status = match r {
            Ok(_) => "ok".to_string(),
            Err(err) => format!("error: {err}").replace(',', ";"),
        };
        let _ = writeln!(index, "{i},{},{},{status}", overrides.join(" "), e.dir.display());
    }
    write_file(&base.join("sweep.csv"), &index)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_entries_are_a_cartesian_product() {
        let vary = vec![
            ("fed.eta".to_string(), vec!["0.1".to_string(), "0.2".to_string()]),
            ("privacy.sigma".to_string(), vec!["0".to_string(), "0.01".to_string(), "0.1".to_string()]),
        ];
        let entries = sweep_entries(Path::new("/x"), &vary);
        assert_eq!(entries.len(), 6);
        assert_eq!(entries[0].dir, Path::new("/x/fed.eta=0.1,privacy.sigma=0"));
        assert_eq!(entries[5].overrides[1], ("privacy.sigma".into(), "0.1".into()));
        assert_eq!(sweep_entries(Path::new("/x"), &[]).len(), 1);
    }

    #[test]
    fn vary_parsing() {
        assert_eq!(parse_vary("fed.T=1,2").unwrap(), ("fed.T".into(), vec!["1".into(), "2".into()]));
        assert!(parse_vary("fed.T").is_err());
        assert!(parse_vary("fed.T=1,,2").is_err());
    }
}
