//! Flat `key = value` experiment configuration and the end-to-end pipeline
//! (dataset, session stream, training, evaluation, output files).
//!
//! ```text
//! # comment
//! data.num_classes = 20
//! train.ablation = meta
//! train.encoder_widths = 128,64
//! ```
//!
//! Unknown or repeated keys are errors; every value is validated before any
//! work starts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{gen_gaussian_mixture, load_dataset, DatasetFile, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::AttentionMode;
use crate::model::ModelParams;
use crate::numerics::Rng;
use crate::protocol::{make_benchmark_stream, LabeledSet, SessionStream, StreamConfig};
use crate::trainer::{run, Ablation, MetaObjective, RunReport, TrainConfig};

const STREAM_SPLIT: u64 = 2;

/// Environment variable naming the root for relative output paths.
pub const OUT_ROOT_ENV: &str = "CGCD_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    /// Dataset file to load instead of generating one.
    pub dataset_path: Option<PathBuf>,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            dataset_path: None,
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.into(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn ablation_name(a: Ablation) -> Option<&'static str> {
    [
        ("baseline", Ablation::BASELINE),
        ("cn", Ablation::CANDIDATE_NEIGHBORS),
        ("sp", Ablation::SOFT_POSITIVENESS),
        ("meta", Ablation::FULL),
    ]
    .into_iter()
    .find(|&(_, p)| p == a)
    .map(|(n, _)| n)
}

impl ExperimentConfig {
    /// Every recognized key.
    pub const KEYS: &'static [&'static str] = &[
        "data.num_classes",
        "data.dim",
        "data.samples_per_class",
        "data.class_separation",
        "data.seed",
        "data.path",
        "stream.offline_classes",
        "stream.sessions",
        "stream.novel_per_session",
        "stream.train_per_class",
        "stream.test_per_class",
        "stream.offline_fraction",
        "stream.novel_intro_fraction",
        "train.gamma",
        "train.alpha",
        "train.beta",
        "train.warmup_epochs",
        "train.inner_steps",
        "train.outer_steps",
        "train.metatest_steps",
        "train.batch_size",
        "train.episodes",
        "train.ablation",
        "train.use_neighbors",
        "train.use_soft_positiveness",
        "train.use_meta",
        "train.meta_objective",
        "train.augment_strength",
        "train.mask_prob",
        "train.encoder_widths",
        "train.projection_widths",
        "loss.tau",
        "loss.lambda",
        "loss.epsilon",
        "loss.attention",
        "loss.stop_gradient_on_w",
        "episode.sessions",
        "episode.novel_per_session",
        "episode.unlabeled_known",
        "episode.unlabeled_novel",
        "episode.test_per_class",
        "kmeans.restarts",
        "kmeans.max_iter",
        "kmeans.greedy_seeding",
        "seed",
        "out.dir",
    ];

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                reason: format!("line {} is not `key = value`", lineno + 1),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "set more than once".into(),
                });
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data.num_classes" => self.data.num_classes = parse(key, value)?,
            "data.dim" => self.data.dim = parse(key, value)?,
            "data.samples_per_class" => self.data.samples_per_class = parse(key, value)?,
            "data.class_separation" => self.data.class_separation = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.path" => {
                self.dataset_path = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "stream.offline_classes" => self.stream.offline_classes = parse(key, value)?,
            "stream.sessions" => self.stream.sessions = parse(key, value)?,
            "stream.novel_per_session" => self.stream.novel_per_session = parse(key, value)?,
            "stream.train_per_class" => self.stream.train_per_class = parse(key, value)?,
            "stream.test_per_class" => self.stream.test_per_class = parse(key, value)?,
            "stream.offline_fraction" => self.stream.offline_fraction = parse(key, value)?,
            "stream.novel_intro_fraction" => self.stream.novel_intro_fraction = parse(key, value)?,
            "train.gamma" => t.gamma = parse(key, value)?,
            "train.alpha" => t.alpha = parse(key, value)?,
            "train.beta" => t.beta = parse(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.inner_steps" => t.inner_steps = parse(key, value)?,
            "train.outer_steps" => t.outer_steps = parse(key, value)?,
            "train.metatest_steps" => t.metatest_steps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.episodes" => t.episodes = parse(key, value)?,
            "train.ablation" => {
                t.ablation = Ablation::preset(value).ok_or_else(|| Error::Config {
                    key: key.into(),
                    reason: format!("`{value}` is not one of baseline, cn, sp, meta"),
                })?
            }
            "train.use_neighbors" => t.ablation.use_neighbors = parse(key, value)?,
            "train.use_soft_positiveness" => t.ablation.use_soft_positiveness = parse(key, value)?,
            "train.use_meta" => t.ablation.use_meta = parse(key, value)?,
            "train.meta_objective" => {
                t.meta_objective = match value {
                    "supervised" => MetaObjective::Supervised,
                    "unsupervised" => MetaObjective::Unsupervised,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            reason: format!("`{value}` is not supervised or unsupervised"),
                        })
                    }
                }
            }
            "train.augment_strength" => t.augment_strength = parse(key, value)?,
            "train.mask_prob" => t.mask_prob = parse(key, value)?,
            "train.encoder_widths" => t.encoder_widths = parse_list(key, value)?,
            "train.projection_widths" => t.projection_widths = parse_list(key, value)?,
            "loss.tau" => t.loss.tau = parse(key, value)?,
            "loss.lambda" => t.loss.lambda = parse(key, value)?,
            "loss.epsilon" => t.loss.epsilon = parse(key, value)?,
            "loss.attention" => {
                t.loss.attention = match value {
                    "identity" => AttentionMode::Identity,
                    "learned" => AttentionMode::Learned,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            reason: format!("`{value}` is not identity or learned"),
                        })
                    }
                }
            }
            "loss.stop_gradient_on_w" => t.loss.stop_gradient_on_w = parse(key, value)?,
            "episode.sessions" => t.episode.sessions = parse(key, value)?,
            "episode.novel_per_session" => t.episode.novel_per_session = parse(key, value)?,
            "episode.unlabeled_known" => t.episode.unlabeled_known = parse(key, value)?,
            "episode.unlabeled_novel" => t.episode.unlabeled_novel = parse(key, value)?,
            "episode.test_per_class" => t.episode.test_per_class = parse(key, value)?,
            "kmeans.restarts" => t.kmeans.restarts = parse(key, value)?,
            "kmeans.max_iter" => t.kmeans.max_iter = parse(key, value)?,
            "kmeans.greedy_seeding" => t.kmeans.greedy_seeding = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let s = &self.stream;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("data.num_classes", d.num_classes.to_string());
        kv("data.dim", d.dim.to_string());
        kv("data.samples_per_class", d.samples_per_class.to_string());
        kv("data.class_separation", d.class_separation.to_string());
        kv("data.seed", d.seed.to_string());
        if let Some(p) = &self.dataset_path {
            kv("data.path", p.display().to_string());
        }
        kv("stream.offline_classes", s.offline_classes.to_string());
        kv("stream.sessions", s.sessions.to_string());
        kv("stream.novel_per_session", s.novel_per_session.to_string());
        kv("stream.train_per_class", s.train_per_class.to_string());
        kv("stream.test_per_class", s.test_per_class.to_string());
        kv("stream.offline_fraction", s.offline_fraction.to_string());
        kv("stream.novel_intro_fraction", s.novel_intro_fraction.to_string());
        kv("train.gamma", t.gamma.to_string());
        kv("train.alpha", t.alpha.to_string());
        kv("train.beta", t.beta.to_string());
        kv("train.warmup_epochs", t.warmup_epochs.to_string());
        kv("train.inner_steps", t.inner_steps.to_string());
        kv("train.outer_steps", t.outer_steps.to_string());
        kv("train.metatest_steps", t.metatest_steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.episodes", t.episodes.to_string());
        match ablation_name(t.ablation) {
            Some(name) => kv("train.ablation", name.into()),
            None => {
                kv("train.use_neighbors", t.ablation.use_neighbors.to_string());
                kv("train.use_soft_positiveness", t.ablation.use_soft_positiveness.to_string());
                kv("train.use_meta", t.ablation.use_meta.to_string());
            }
        }
        let objective = match t.meta_objective {
            MetaObjective::Supervised => "supervised",
            MetaObjective::Unsupervised => "unsupervised",
        };
        kv("train.meta_objective", objective.into());
        kv("train.augment_strength", t.augment_strength.to_string());
        kv("train.mask_prob", t.mask_prob.to_string());
        kv("train.encoder_widths", join(&t.encoder_widths));
        kv("train.projection_widths", join(&t.projection_widths));
        kv("loss.tau", t.loss.tau.to_string());
        kv("loss.lambda", t.loss.lambda.to_string());
        kv("loss.epsilon", t.loss.epsilon.to_string());
        let attention = match t.loss.attention {
            AttentionMode::Identity => "identity",
            AttentionMode::Learned => "learned",
        };
        kv("loss.attention", attention.into());
        kv("loss.stop_gradient_on_w", t.loss.stop_gradient_on_w.to_string());
        kv("episode.sessions", t.episode.sessions.to_string());
        kv("episode.novel_per_session", t.episode.novel_per_session.to_string());
        kv("episode.unlabeled_known", t.episode.unlabeled_known.to_string());
        kv("episode.unlabeled_novel", t.episode.unlabeled_novel.to_string());
        kv("episode.test_per_class", t.episode.test_per_class.to_string());
        kv("kmeans.restarts", t.kmeans.restarts.to_string());
        kv("kmeans.max_iter", t.kmeans.max_iter.to_string());
        kv("kmeans.greedy_seeding", t.kmeans.greedy_seeding.to_string());
        kv("seed", t.seed.to_string());
        kv("out.dir", self.out_dir.display().to_string());
        out
    }

    /// Checks every value that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        if self.dataset_path.is_none() {
            self.data.validate()?;
            if self.data.num_classes < self.stream.total_classes() {
                return bad(
                    "data.num_classes",
                    format!(
                        "{} classes cannot supply {} offline + {} x {} novel",
                        self.data.num_classes,
                        self.stream.offline_classes,
                        self.stream.sessions,
                        self.stream.novel_per_session
                    ),
                );
            }
            if self.data.samples_per_class < self.stream.train_per_class + self.stream.test_per_class {
                return bad(
                    "data.samples_per_class",
                    format!(
                        "{} samples cannot supply {} train + {} test",
                        self.data.samples_per_class, self.stream.train_per_class, self.stream.test_per_class
                    ),
                );
            }
        }
        let s = &self.stream;
        if s.offline_classes == 0 {
            return bad("stream.offline_classes", "must be at least 1".into());
        }
        if s.train_per_class == 0 {
            return bad("stream.train_per_class", "must be at least 1".into());
        }
        if s.test_per_class == 0 {
            return bad("stream.test_per_class", "must be at least 1".into());
        }
        for (key, v) in [
            ("stream.offline_fraction", s.offline_fraction),
            ("stream.novel_intro_fraction", s.novel_intro_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(key, format!("must lie in (0, 1], got {v}"));
            }
        }
        self.train.validate().map_err(|e| match e {
            Error::Config { key, reason } if !key.contains('.') && key != "seed" => Error::Config {
                key: qualify(&key),
                reason,
            },
            other => other,
        })
    }

    /// Output directory, resolved against [`OUT_ROOT_ENV`] when relative.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }
}

fn qualify(key: &str) -> String {
    let prefix = match key {
        "tau" | "lambda" | "epsilon" | "attention" => "loss",
        "kmeans" => "kmeans",
        _ => "train",
    };
    format!("{prefix}.{key}")
}

/// Loads the configured dataset file or generates the synthetic one.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<LabeledSet> {
    match &cfg.dataset_path {
        Some(path) => Ok(load_dataset(path)?.data),
        None => gen_gaussian_mixture(&cfg.data),
    }
}

pub fn generate_dataset_file(spec: &SyntheticSpec) -> Result<DatasetFile> {
    Ok(DatasetFile {
        seed: Some(spec.seed),
        data: gen_gaussian_mixture(spec)?,
    })
}

pub fn build_stream(data: &LabeledSet, cfg: &ExperimentConfig) -> Result<SessionStream> {
    let mut rng = Rng::new(cfg.train.seed).fork(STREAM_SPLIT);
    make_benchmark_stream(data, &cfg.stream, &mut rng)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub model: ModelParams,
    pub report: RunReport,
    pub stream: SessionStream,
}

/// Validates, builds the stream, trains and evaluates. Writes nothing.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let data = load_or_generate(cfg)?;
    let stream = build_stream(&data, cfg)?;
    let (model, report) = run(&stream, &cfg.train)?;
    Ok(ExperimentOutput { model, report, stream })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";

impl ExperimentOutput {
    /// Writes checkpoint, JSON report, metrics CSV, stream manifest and the
    /// config echo into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(CHECKPOINT_FILE))?;
        self.report.save_json(&dir.join(REPORT_FILE))?;
        let csv = dir.join(METRICS_FILE);
        std::fs::write(&csv, self.report.metrics_csv()).map_err(|e| Error::io(&csv, e))?;
        self.stream.write_manifest(&dir.join(MANIFEST_FILE))?;
        let echo = dir.join(CONFIG_FILE);
        std::fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))
    }
}
