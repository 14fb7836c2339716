// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration: a line-oriented `key = value` format with
//! dotted section keys.
//!
//! ```text
//! # comment
//! fed.T = 200
//! privacy.preset = svhn-eps3-delta1e-2
//! privacy.sigma = 0.01   # explicit keys override the preset
//! ```
//!
//! Every key is optional; [`KEYS`] lists the defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedsc_core::data::{DataConfig, KernelMode, ViewDraw};
use fedsc_core::federation::{Aggregation, AlphaSchedule, FedConfig};
use fedsc_core::privacy::{dp_preset, PrivacyParams};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    NonIid,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Methods {
    FedSc,
    FedAvgSc,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub knn_k: usize,
    pub ridge: f64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub label: String,
    pub methods: Methods,
    pub seeds: usize,
    pub first_seed: u64,
    /// Empty means `<output root>/<label>`.
    pub output_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub partition: Partition,
    pub encoder: EncoderSettings,
    /// `seed` is overwritten per run.
    pub fed: FedConfig,
    pub eval: EvalSettings,
    pub run: RunSettings,
    /// Name of the DP preset applied before explicit keys, if any.
    pub preset: Option<String>,
}

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, default, doc }
}

/// Every accepted key with its default.
pub const KEYS: &[KeySpec] = &[
    key("data.dim", "8", "input dimension d"),
    key("data.classes", "4", "number of classes C"),
    key("data.anchors_per_class", "85", "anchors drawn per class before the holdout split"),
    key("data.clients", "4", "number of clients J"),
    key("data.classes_per_client", "1", "classes per client (non-iid split)"),
    key("data.noise", "0.2", "view noise s; anchors scatter with s/2"),
    key("data.views", "4", "stored views per anchor K"),
    key("data.kernel", "finite", "finite | stochastic"),
    key("data.holdout", "0.25", "fraction of each class held out for evaluation"),
    key("data.partition", "noniid", "noniid | iid"),
    key("encoder.hidden", "32", "comma-separated hidden widths (empty for none)"),
    key("encoder.output_dim", "4", "representation dimension H"),
    key("encoder.init_scale", "1.0", "uniform init bound multiplier on 1/sqrt(fan_in)"),
    key("fed.T", "150", "communication rounds"),
    key("fed.E", "2", "local epochs"),
    key("fed.B", "32", "batch size"),
    key("fed.V", "2", "positive pairs per anchor per batch, or enumerate"),
    key("fed.eta", "0.05", "learning rate"),
    key("fed.participation", "4", "clients sampled per round"),
    key("fed.alpha", "linear", "linear (1 -> 0.2) | fixed (alpha_j = q_j)"),
    key("fed.aggregation", "uniform", "uniform | weighted"),
    key("fed.share_start_round", "1", "first round that shares correlation matrices"),
    key("fed.share_period", "1", "rounds between shares"),
    key("fed.parallel", "false", "run client updates concurrently"),
    key("privacy.preset", "none", "named DP configuration applied before explicit keys"),
    key("privacy.mu", "5.0", "clip bound on squared representation norm"),
    key("privacy.sigma", "0.0", "Gaussian noise standard deviation per entry"),
    key("privacy.share_views", "5", "views per anchor in a release, or enumerate"),
    key("privacy.symmetric_noise", "false", "symmetrise the noise matrix"),
    key("privacy.delta", "0.01", "delta for reported epsilon"),
    key("eval.knn_k", "5", "neighbours in the KNN probe"),
    key("eval.ridge", "0.001", "ridge strength of the linear probe"),
    key("eval.every", "1", "evaluate probes every this many rounds"),
    key("run.label", "fedsc", "run name; default output directory is <root>/<label>"),
    key("run.methods", "both", "fedsc | fedavg_sc | both"),
    key("run.seeds", "1", "number of seeds"),
    key("run.seed", "0", "first seed"),
    key("run.output_dir", "", "explicit output directory"),
    key("run.checkpoint_every", "0", "rounds between checkpoints; 0 disables"),
];

/// Defaults as an aligned table.
pub fn defaults_table() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::new();
    for k in KEYS {
        let _ = writeln!(out, "{:width$} = {:8} # {}", k.key, k.default, k.doc);
    }
    out
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            data: DataConfig::default(),
            partition: Partition::NonIid,
            encoder: EncoderSettings {
                hidden: vec![32],
                output_dim: 4,
                init_scale: 1.0,
            },
            fed: FedConfig::default(),
            eval: EvalSettings {
                knn_k: 5,
                ridge: 1e-3,
                every: 1,
            },
            run: RunSettings {
                label: "fedsc".into(),
                methods: Methods::Both,
                seeds: 1,
                first_seed: 0,
                output_dir: None,
                checkpoint_every: 0,
            },
            preset: None,
        };
        for k in KEYS {
            cfg.set(k.key, k.default).expect("defaults parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("expected {what}, got {value:?}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn at_least(value: &str, min: usize, name: &str) -> Result<usize, String> {
    let v: usize = parse(value, "a non-negative integer")?;
    if v < min {
        return Err(format!("{name} must be >= {min}, got {v}"));
    }
    Ok(v)
}

fn finite(value: &str) -> Result<f64, String> {
    let v: f64 = parse(value, "a number")?;
    if !v.is_finite() {
        return Err(format!("expected a finite number, got {value:?}"));
    }
    Ok(v)
}

fn view_draw(value: &str, name: &str) -> Result<ViewDraw, String> {
    if value == "enumerate" {
        return Ok(ViewDraw::Enumerate);
    }
    Ok(ViewDraw::Sample(at_least(value, 1, name)?))
}

fn draw_text(d: ViewDraw) -> String {
    match d {
        ViewDraw::Enumerate => "enumerate".into(),
        ViewDraw::Sample(v) => v.to_string(),
    }
}

impl ExperimentConfig {
    /// Sets one key. The error text does not include the key or line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "data.dim" => self.data.dim = at_least(value, 1, "d")?,
            "data.classes" => self.data.classes = at_least(value, 1, "C")?,
            "data.anchors_per_class" => self.data.anchors_per_class = at_least(value, 1, "anchors per class")?,
            "data.clients" => self.data.clients = at_least(value, 1, "J")?,
            "data.classes_per_client" => self.data.classes_per_client = at_least(value, 1, "classes per client")?,
            "data.noise" => {
                let s = finite(value)?;
                if s < 0.0 {
                    return Err(format!("s must be >= 0, got {s}"));
                }
                self.data.noise = s;
            }
            "data.views" => self.data.views = at_least(value, 1, "K")?,
            "data.kernel" => {
                self.data.kernel = match value {
                    "finite" => KernelMode::Finite,
                    "stochastic" => KernelMode::Stochastic,
                    _ => return Err(format!("expected finite or stochastic, got {value:?}")),
                }
            }
            "data.holdout" => {
                let h = finite(value)?;
                if !(0.0..1.0).contains(&h) {
                    return Err(format!("holdout must be in [0, 1), got {h}"));
                }
                self.data.holdout = h;
            }
            "data.partition" => {
                self.partition = match value {
                    "noniid" => Partition::NonIid,
                    "iid" => Partition::Iid,
                    _ => return Err(format!("expected noniid or iid, got {value:?}")),
                }
            }
            "encoder.hidden" => {
                self.encoder.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| at_least(w.trim(), 1, "hidden width"))
                        .collect::<Result<_, _>>()?
                }
            }
            "encoder.output_dim" => self.encoder.output_dim = at_least(value, 1, "H")?,
            "encoder.init_scale" => {
                let s = finite(value)?;
                if s < 0.0 {
                    return Err(format!("init scale must be >= 0, got {s}"));
                }
                self.encoder.init_scale = s;
            }
            "fed.T" => self.fed.rounds = at_least(value, 0, "T")?,
            "fed.E" => self.fed.local_epochs = at_least(value, 1, "E")?,
            "fed.B" => self.fed.batch_size = at_least(value, 1, "B")?,
            "fed.V" => self.fed.train_views = view_draw(value, "V")?,
            "fed.eta" => {
                let eta = finite(value)?;
                if eta <= 0.0 {
                    return Err(format!("eta must be > 0, got {eta}"));
                }
                self.fed.learning_rate = eta;
            }
            "fed.participation" => self.fed.participation = at_least(value, 1, "|J|")?,
            "fed.alpha" => {
                self.fed.alpha = match value {
                    "linear" => AlphaSchedule::Linear,
                    "fixed" => AlphaSchedule::Fixed,
                    _ => return Err(format!("expected linear or fixed, got {value:?}")),
                }
            }
            "fed.aggregation" => {
                self.fed.aggregation = match value {
                    "uniform" => Aggregation::Uniform,
                    "weighted" => Aggregation::Weighted,
                    _ => return Err(format!("expected uniform or weighted, got {value:?}")),
                }
            }
            "fed.share_start_round" => self.fed.share_start_round = at_least(value, 1, "share start round")?,
            "fed.share_period" => self.fed.share_period = at_least(value, 1, "share period")?,
            "fed.parallel" => self.fed.parallel = parse_bool(value)?,
            "privacy.preset" => {
                if value == "none" {
                    self.preset = None;
                } else {
                    let p = dp_preset(value).map_err(|e| e.to_string())?;
                    self.privacy_mut().mu = p.mu;
                    self.privacy_mut().sigma = p.sigma;
                    self.fed.share_start_round = p.share_start_round;
                    self.fed.share_period = p.share_period;
                    self.fed.delta = p.delta;
                    self.preset = Some(p.name.to_string());
                }
            }
            "privacy.mu" => {
                let mu = finite(value)?;
                if mu <= 0.0 {
                    return Err(format!("mu must be > 0, got {mu}"));
                }
                self.privacy_mut().mu = mu;
            }
            "privacy.sigma" => {
                let s = finite(value)?;
                if s < 0.0 {
                    return Err(format!("sigma must be >= 0, got {s}"));
                }
                self.privacy_mut().sigma = s;
            }
            "privacy.share_views" => self.privacy_mut().share_views = view_draw(value, "share views")?,
            "privacy.symmetric_noise" => self.privacy_mut().symmetric_noise = parse_bool(value)?,
            "privacy.delta" => {
                let d = finite(value)?;
                if !(d > 0.0 && d < 1.0) {
                    return Err(format!("delta must be in (0, 1), got {d}"));
                }
                self.fed.delta = d;
            }
            "eval.knn_k" => self.eval.knn_k = at_least(value, 1, "k")?,
            "eval.ridge" => {
                let r = finite(value)?;
                if r < 0.0 {
                    return Err(format!("ridge must be >= 0, got {r}"));
                }
                self.eval.ridge = r;
            }
            "eval.every" => self.eval.every = at_least(value, 1, "eval interval")?,
            "run.label" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(format!("label must be a non-empty name without path separators, got {value:?}"));
                }
                self.run.label = value.to_string();
            }
            "run.methods" => {
                self.run.methods = match value {
                    "fedsc" => Methods::FedSc,
                    "fedavg_sc" => Methods::FedAvgSc,
                    "both" => Methods::Both,
                    _ => return Err(format!("expected fedsc, fedavg_sc or both, got {value:?}")),
                }
            }
            "run.seeds" => self.run.seeds = at_least(value, 1, "seeds")?,
            "run.seed" => self.run.first_seed = parse(value, "a non-negative integer")?,
            "run.output_dir" => self.run.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "run.checkpoint_every" => self.run.checkpoint_every = at_least(value, 0, "checkpoint interval")?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn privacy_mut(&mut self) -> &mut PrivacyParams {
        &mut self.fed.privacy
    }

    /// Cross-field checks that do not need the generated data.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if let Err(e) = self.data.validate() {
            let message = e.to_string();
            let key = KEYS
                .iter()
                .map(|k| k.key)
                .filter(|k| message.contains(k))
                .max_by_key(|k| k.len())
                .unwrap_or("data");
            return Err((key.into(), message));
        }
        if self.fed.participation > self.data.clients {
            return Err((
                "fed.participation".into(),
                format!(
                    "|J| must be <= data.clients = {}, got {}",
                    self.data.clients, self.fed.participation
                ),
            ));
        }
        if self.fed.train_views == ViewDraw::Enumerate && self.data.kernel == KernelMode::Stochastic {
            return Err(("fed.V".into(), "enumerate needs data.kernel = finite".into()));
        }
        if self.fed.privacy.share_views == ViewDraw::Enumerate && self.data.kernel == KernelMode::Stochastic {
            return Err(("privacy.share_views".into(), "enumerate needs data.kernel = finite".into()));
        }
        Ok(())
    }

    /// Serialises every key; [`parse_config_str`] reads it back to an equal config.
    pub fn to_text(&self) -> String {
        let p = &self.fed.privacy;
        let kernel = match self.data.kernel {
            KernelMode::Finite => "finite",
            KernelMode::Stochastic => "stochastic",
        };
        let partition = match self.partition {
            Partition::NonIid => "noniid",
            Partition::Iid => "iid",
        };
        let alpha = match self.fed.alpha {
            AlphaSchedule::Linear => "linear",
            AlphaSchedule::Fixed => "fixed",
        };
        let aggregation = match self.fed.aggregation {
            Aggregation::Uniform => "uniform",
            Aggregation::Weighted => "weighted",
        };
        let methods = match self.run.methods {
            Methods::FedSc => "fedsc",
            Methods::FedAvgSc => "fedavg_sc",
            Methods::Both => "both",
        };
        let hidden: Vec<String> = self.encoder.hidden.iter().map(ToString::to_string).collect();
        let output_dir = self.run.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<(&str, String)> = vec![
            ("data.dim", self.data.dim.to_string()),
            ("data.classes", self.data.classes.to_string()),
            ("data.anchors_per_class", self.data.anchors_per_class.to_string()),
            ("data.clients", self.data.clients.to_string()),
            ("data.classes_per_client", self.data.classes_per_client.to_string()),
            ("data.noise", format!("{:?}", self.data.noise)),
            ("data.views", self.data.views.to_string()),
            ("data.kernel", kernel.into()),
            ("data.holdout", format!("{:?}", self.data.holdout)),
            ("data.partition", partition.into()),
            ("encoder.hidden", hidden.join(",")),
            ("encoder.output_dim", self.encoder.output_dim.to_string()),
            ("encoder.init_scale", format!("{:?}", self.encoder.init_scale)),
            ("fed.T", self.fed.rounds.to_string()),
            ("fed.E", self.fed.local_epochs.to_string()),
            ("fed.B", self.fed.batch_size.to_string()),
            ("fed.V", draw_text(self.fed.train_views)),
            ("fed.eta", format!("{:?}", self.fed.learning_rate)),
            ("fed.participation", self.fed.participation.to_string()),
            ("fed.alpha", alpha.into()),
            ("fed.aggregation", aggregation.into()),
            ("fed.share_start_round", self.fed.share_start_round.to_string()),
            ("fed.share_period", self.fed.share_period.to_string()),
            ("fed.parallel", self.fed.parallel.to_string()),
            ("privacy.mu", format!("{:?}", p.mu)),
            ("privacy.sigma", format!("{:?}", p.sigma)),
            ("privacy.share_views", draw_text(p.share_views)),
            ("privacy.symmetric_noise", p.symmetric_noise.to_string()),
            ("privacy.delta", format!("{:?}", self.fed.delta)),
            ("eval.knn_k", self.eval.knn_k.to_string()),
            ("eval.ridge", format!("{:?}", self.eval.ridge)),
            ("eval.every", self.eval.every.to_string()),
            ("run.label", self.run.label.clone()),
            ("run.methods", methods.into()),
            ("run.seeds", self.run.seeds.to_string()),
            ("run.seed", self.run.first_seed.to_string()),
            ("run.output_dir", output_dir),
            ("run.checkpoint_every", self.run.checkpoint_every.to_string()),
        ];
        let mut out = format!("# fedsc-config v{FORMAT_VERSION}\n");
        if let Some(name) = &self.preset {
            let _ = writeln!(out, "# resolved from privacy.preset = {name}");
        }
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(before, _)| before).trim()
}

/// Parses config text. The preset, if present, is applied before every other key.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Parse {
            line: line_no,
            key: line.to_string(),
            message: "expected key = value".into(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|spec| spec.key == k) {
            return Err(CliError::Parse {
                line: line_no,
                key: k.into(),
                message: "unknown key".into(),
            });
        }
        if let Some((first, _)) = entries.get(k) {
            return Err(CliError::Parse {
                line: line_no,
                key: k.into(),
                message: format!("duplicate key (first set on line {first})"),
            });
        }
        entries.insert(k.to_string(), (line_no, v.to_string()));
    }
    let mut cfg = ExperimentConfig::default();
    let mut ordered: Vec<(&String, &(usize, String))> = entries.iter().collect();
    ordered.sort_by_key(|(k, (line, _))| (k.as_str() != "privacy.preset", *line));
    for (k, (line, v)) in ordered {
        cfg.set(k, v).map_err(|message| CliError::Parse {
            line: *line,
            key: k.clone(),
            message,
        })?;
    }
    cfg.validate().map_err(|(key, message)| CliError::Parse {
        line: entries.get(&key).map_or(0, |(l, _)| *l),
        key,
        message,
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_err(text: &str) -> (usize, String, String) {
        match parse_config_str(text) {
            Err(CliError::Parse { line, key, message }) => (line, key, message),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.fed.rounds, 150);
        assert_eq!(cfg.fed.batch_size, 32);
        assert_eq!(cfg.encoder.hidden, vec![32]);
        assert_eq!(cfg.run.methods, Methods::Both);
        assert!(defaults_table().lines().count() == KEYS.len());
    }

    #[test]
    fn full_scale_settings_accepted() {
        let cfg = parse_config_str("fed.T = 200\nfed.E = 5\nfed.B = 512\nfed.V = 2\n").unwrap();
        assert_eq!(
            (cfg.fed.rounds, cfg.fed.local_epochs, cfg.fed.batch_size, cfg.fed.train_views),
            (200, 5, 512, ViewDraw::Sample(2))
        );
    }

    #[test]
    fn zero_batch_rejected() {
        let (line, key, message) = parse_err("# header\n\nfed.B = 0\n");
        assert_eq!((line, key.as_str()), (3, "fed.B"));
        assert!(message.contains("B must be >= 1"), "{message}");
    }

    #[test]
    fn errors_name_key_and_line() {
        assert_eq!(parse_err("fed.T = 3\nfed.Q = 1").0, 2);
        assert_eq!(parse_err("fed.Q = 1").1, "fed.Q");
        let (line, key, msg) = parse_err("fed.eta = fast");
        assert_eq!((line, key.as_str()), (1, "fed.eta"));
        assert!(msg.contains("number"));
        assert_eq!(parse_err("fed.T = 1\nfed.T = 2").0, 2);
        assert_eq!(parse_err("just words").0, 1);
        let (line, key, _) = parse_err("data.clients = 2\ndata.classes_per_client = 2\nfed.participation = 3");
        assert_eq!((line, key.as_str()), (3, "fed.participation"));
        let (line, key, _) = parse_err("data.classes = 3\ndata.classes_per_client = 4");
        assert_eq!((line, key.as_str()), (2, "data.classes_per_client"));
        assert_eq!(parse_err("privacy.preset = nope").1, "privacy.preset");
        assert_eq!(parse_err("privacy.delta = 1.0").1, "privacy.delta");
    }

    #[test]
    fn preset_applies_before_explicit_keys() {
        let cfg = parse_config_str("privacy.sigma = 0.5\nprivacy.preset = cifar10-eps6-delta1e-2\n").unwrap();
        assert_eq!(cfg.fed.privacy.sigma, 0.5);
        assert_eq!(cfg.fed.privacy.mu, 4.0);
        assert_eq!((cfg.fed.share_start_round, cfg.fed.share_period), (102, 2));
        assert_eq!(cfg.preset.as_deref(), Some("cifar10-eps6-delta1e-2"));
    }

    #[test]
    fn text_round_trip() {
        let text = "fed.V = enumerate\nencoder.hidden = 16, 8\nrun.output_dir = /tmp/x\ndata.noise = 0.15\n\
                    fed.alpha = fixed # inline comment\nrun.methods = fedsc\nprivacy.preset = svhn-eps3-delta1e-4\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.encoder.hidden, vec![16, 8]);
        let mut back = parse_config_str(&cfg.to_text()).unwrap();
        back.preset = cfg.preset.clone();
        assert_eq!(back, cfg);
        let empty_hidden = parse_config_str("encoder.hidden =").unwrap();
        assert_eq!(parse_config_str(&empty_hidden.to_text()).unwrap(), empty_hidden);
    }
}
