//! Offline warmup, inner unsupervised adaptation, first-order outer
//! meta-update, meta-training over sampled episodes and session evaluation.
//!
//! Training functions only ever receive feature tensors for unlabeled data;
//! hidden session labels stay inside [`crate::protocol::UnlabeledSet`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster_eval::{clustering_acc, kmeans, split_acc, KMeansConfig, SessionMetrics};
use crate::error::{Error, Result};
use crate::losses::{
    attention_logits, candidate_neighbors, identity_logits, labeled_loss, positiveness, scl_loss,
    soft_loss, ucl_loss, AttentionMode, LossConfig, NeighborSet, Positiveness, ViewBatch, Weights,
};
use crate::model::{sgd_step, AdaptedParams, BoundParams, ModelParams};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::protocol::{sample_episode, CumulativeTestSet, EpisodeConfig, LabeledSet, SessionStream};

const STREAM_INIT: u64 = 1;
const STREAM_META_TRAIN: u64 = 3;
const STREAM_META_TEST: u64 = 4;
const STREAM_KMEANS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_neighbors: bool,
    pub use_soft_positiveness: bool,
    pub use_meta: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        use_neighbors: false,
        use_soft_positiveness: false,
        use_meta: false,
    };
    pub const CANDIDATE_NEIGHBORS: Ablation = Ablation {
        use_neighbors: true,
        use_soft_positiveness: false,
        use_meta: false,
    };
    pub const SOFT_POSITIVENESS: Ablation = Ablation {
        use_neighbors: true,
        use_soft_positiveness: true,
        use_meta: false,
    };
    pub const FULL: Ablation = Ablation {
        use_neighbors: true,
        use_soft_positiveness: true,
        use_meta: true,
    };

    /// Parses `baseline`, `cn`, `sp` or `meta`.
    pub fn preset(name: &str) -> Option<Ablation> {
        match name {
            "baseline" => Some(Self::BASELINE),
            "cn" => Some(Self::CANDIDATE_NEIGHBORS),
            "sp" => Some(Self::SOFT_POSITIVENESS),
            "meta" | "full" => Some(Self::FULL),
            _ => None,
        }
    }
}

/// Loss used by the outer update on the cumulative pseudo test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaObjective {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Warmup learning rate.
    pub gamma: f64,
    /// Inner adaptation learning rate, also used at meta-test time.
    pub alpha: f64,
    /// Outer meta-update learning rate.
    pub beta: f64,
    pub warmup_epochs: usize,
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub metatest_steps: usize,
    /// Instances per mini-batch; each contributes two views.
    pub batch_size: usize,
    pub episodes: usize,
    pub ablation: Ablation,
    pub loss: LossConfig,
    pub meta_objective: MetaObjective,
    /// Standard deviation of the feature jitter applied to each view.
    pub augment_strength: f64,
    pub mask_prob: f64,
    /// Hidden and output widths of the encoder (the input width comes from the data).
    pub encoder_widths: Vec<usize>,
    /// Widths of the projection head after the encoder output.
    pub projection_widths: Vec<usize>,
    pub episode: EpisodeConfig,
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            alpha: 0.001,
            beta: 0.0001,
            warmup_epochs: 50,
            inner_steps: 10,
            outer_steps: 1,
            metatest_steps: 20,
            batch_size: 256,
            episodes: 5,
            ablation: Ablation::FULL,
            loss: LossConfig::default(),
            meta_objective: MetaObjective::Supervised,
            augment_strength: 0.5,
            mask_prob: 0.1,
            encoder_widths: vec![128, 64],
            projection_widths: vec![64, 32],
            episode: EpisodeConfig::default(),
            kmeans: KMeansConfig::default(),
            seed: 0,
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(key, format!("must be a finite rate >= 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(config_err("batch_size", "must be at least 2"));
        }
        if !(self.augment_strength.is_finite() && self.augment_strength >= 0.0) {
            return Err(config_err("augment_strength", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(config_err("mask_prob", "must lie in [0, 1)"));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(config_err("encoder_widths", "need at least one positive width"));
        }
        if self.projection_widths.contains(&0) {
            return Err(config_err("projection_widths", "widths must be positive"));
        }
        if self.kmeans.restarts == 0 || self.kmeans.max_iter == 0 {
            return Err(config_err("kmeans", "restarts and max_iter must be >= 1"));
        }
        if self.loss.attention == AttentionMode::Learned && !self.ablation.use_soft_positiveness {
            return Err(config_err("attention", "learned attention requires soft positiveness"));
        }
        self.loss.validate()
    }

    /// Randomly initialized model for inputs of width `input_dim`.
    pub fn init_model(&self, input_dim: usize) -> Result<ModelParams> {
        let mut rng = Rng::new(self.seed).fork(STREAM_INIT);
        let mut enc = vec![input_dim];
        enc.extend_from_slice(&self.encoder_widths);
        let mut proj = vec![*enc.last().unwrap()];
        proj.extend_from_slice(&self.projection_widths);
        let params = ModelParams::init(&enc, &proj, &mut rng)?;
        Ok(match self.loss.attention {
            AttentionMode::Learned => params.with_attention(),
            AttentionMode::Identity => params,
        })
    }
}

/// Two augmented views of `x`, stacked as `[view1; view2]`.
///
/// Each coordinate gets Gaussian noise of standard deviation `strength`, then
/// is dropped with probability `mask_prob` (survivors are scaled by
/// `1 / (1 - mask_prob)`).
pub fn augment_views(x: &Tensor, rng: &mut Rng, strength: f64, mask_prob: f64) -> Result<Tensor> {
    if !(strength.is_finite() && strength >= 0.0) || !(0.0..1.0).contains(&mask_prob) {
        return Err(Error::invalid(format!(
            "augment_views: strength {strength} and mask_prob {mask_prob} out of range"
        )));
    }
    let keep = 1.0 / (1.0 - mask_prob);
    let mut data = Vec::with_capacity(2 * x.len());
    for _ in 0..2 {
        for &v in x.data() {
            let noisy = if strength > 0.0 { v + strength * rng.normal() } else { v };
            let masked = if mask_prob > 0.0 && rng.bernoulli(mask_prob) {
                0.0
            } else {
                noisy * keep
            };
            data.push(masked);
        }
    }
    Tensor::new(vec![2 * x.rows(), x.cols()], data)
}

/// Forward pass on a fresh graph, backward from the returned loss.
fn loss_and_grad(
    params: &ModelParams,
    views: Tensor,
    build: impl FnOnce(&mut Graph, &BoundParams, Var) -> Result<Var>,
) -> Result<(f64, ModelParams)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(views);
    let z = bound.embed(&mut g, x)?;
    let loss = build(&mut g, &bound, z)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Degenerate {
            op: "training step",
            detail: format!("loss evaluated to {value}"),
        });
    }
    g.backward(loss)?;
    Ok((value, bound.gradients(&g, params)?))
}

/// Up to `batch` row indices drawn without replacement; all rows in order if
/// the set is no larger than a batch.
fn draw_batch(n: usize, batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Capacity(format!(
            "a contrastive batch needs at least 2 samples, got {n}"
        )));
    }
    Ok(if n <= batch {
        (0..n).collect()
    } else {
        rng.sample_indices(n, batch)
    })
}

/// Labeled warmup: `warmup_epochs` passes of shuffled mini-batches with the
/// λ-weighted labeled loss at rate `gamma`. Returns the mean loss per epoch.
pub fn offline_warmup(
    params: &ModelParams,
    data: &LabeledSet,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ModelParams, Vec<f64>)> {
    let n = data.len();
    if cfg.warmup_epochs > 0 && n < 2 {
        return Err(Error::Capacity(format!("warmup needs at least 2 samples, got {n}")));
    }
    let mut theta = params.clone();
    let mut trace = Vec::with_capacity(cfg.warmup_epochs);
    for _ in 0..cfg.warmup_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // a trailing single sample cannot form a contrastive batch
        if batches.len() > 1 && batches.last().unwrap().len() < 2 {
            batches.pop();
        }
        let mut total = 0.0;
        for idx in &batches {
            let subset = data.subset(idx);
            let views = augment_views(subset.features(), rng, cfg.augment_strength, cfg.mask_prob)?;
            let labels = subset.labels().to_vec();
            let (loss, grads) = loss_and_grad(&theta, views, |g, _, z| {
                let batch = ViewBatch::new(g, z, Some(labels))?;
                labeled_loss(g, &batch, &cfg.loss)
            })?;
            theta = sgd_step(&theta, &grads, cfg.gamma)?;
            total += loss;
        }
        trace.push(total / batches.len() as f64);
    }
    Ok((theta, trace))
}

/// Loss value, mean neighbor count and gradient of one soft-loss step.
#[derive(Debug, Clone)]
pub struct SoftStep {
    pub loss: f64,
    pub mean_neighbors: f64,
    pub grads: ModelParams,
}

/// Gradient of the soft neighborhood loss on given views, honoring the
/// neighbor and positiveness ablations.
pub fn soft_step(params: &ModelParams, views: Tensor, cfg: &TrainConfig) -> Result<SoftStep> {
    let mut mean_neighbors = 0.0;
    let (loss, grads) = loss_and_grad(params, views, |g, bound, z| {
        let batch = ViewBatch::new(g, z, None)?;
        let zv = g.value(z).clone();
        let nbrs = if cfg.ablation.use_neighbors {
            candidate_neighbors(&zv, cfg.loss.epsilon)?
        } else {
            NeighborSet::paired_only(&zv)
        };
        mean_neighbors = nbrs.mean_size();
        if !cfg.ablation.use_soft_positiveness {
            let w = Positiveness::uniform(&nbrs);
            return soft_loss(g, &batch, &nbrs, Weights::Fixed(&w), &cfg.loss);
        }
        match cfg.loss.attention {
            AttentionMode::Identity => {
                let w = positiveness(&identity_logits(&zv)?, &nbrs)?;
                soft_loss(g, &batch, &nbrs, Weights::Fixed(&w), &cfg.loss)
            }
            AttentionMode::Learned => {
                let maps = bound
                    .attention()
                    .ok_or_else(|| Error::invalid("learned attention needs attention parameters"))?;
                if cfg.loss.stop_gradient_on_w {
                    let zc = g.constant(zv);
                    let a = attention_logits(g, zc, Some(maps))?;
                    let w = positiveness(&g.value(a).clone(), &nbrs)?;
                    soft_loss(g, &batch, &nbrs, Weights::Fixed(&w), &cfg.loss)
                } else {
                    let a = attention_logits(g, z, Some(maps))?;
                    soft_loss(g, &batch, &nbrs, Weights::FromLogits(a), &cfg.loss)
                }
            }
        }
    })?;
    Ok(SoftStep {
        loss,
        mean_neighbors,
        grads,
    })
}

/// Per-step loss and mean neighbor count of one adaptation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub losses: Vec<f64>,
    pub mean_neighbors: Vec<f64>,
}

/// `steps` gradient steps at rate `alpha` on the soft loss over unlabeled
/// features. `params` is left untouched.
pub fn inner_adapt(
    params: &ModelParams,
    x: &Tensor,
    steps: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(AdaptedParams, AdaptTrace)> {
    let mut adapted = AdaptedParams::from_params(params.clone());
    let mut trace = AdaptTrace::default();
    for _ in 0..steps {
        let idx = draw_batch(x.rows(), cfg.batch_size, rng)?;
        let views = augment_views(&x.select_rows(&idx), rng, cfg.augment_strength, cfg.mask_prob)?;
        let step = soft_step(adapted.params(), views, cfg)?;
        adapted = sgd_step(&adapted, &step.grads, cfg.alpha)?;
        trace.losses.push(step.loss);
        trace.mean_neighbors.push(step.mean_neighbors);
    }
    Ok((adapted, trace))
}

/// First-order meta-update: gradient of the meta-objective on batches of `p`
/// evaluated at `adapted`, applied to `params` at rate `beta`.
pub fn outer_meta_update(
    params: &ModelParams,
    adapted: &AdaptedParams,
    p: &CumulativeTestSet,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ModelParams, Vec<f64>)> {
    let pool = p.to_labeled()?;
    let mut theta = params.clone();
    let mut losses = Vec::with_capacity(cfg.outer_steps);
    for _ in 0..cfg.outer_steps {
        let idx = draw_batch(pool.len(), cfg.batch_size, rng)?;
        let subset = pool.subset(&idx);
        let views = augment_views(subset.features(), rng, cfg.augment_strength, cfg.mask_prob)?;
        let labels = subset.labels().to_vec();
        let (loss, grads) = loss_and_grad(adapted.params(), views, |g, _, z| {
            let batch = ViewBatch::new(g, z, Some(labels))?;
            match cfg.meta_objective {
                MetaObjective::Supervised => scl_loss(g, &batch, &cfg.loss),
                MetaObjective::Unsupervised => ucl_loss(g, &batch, &cfg.loss),
            }
        })?;
        theta = sgd_step(&theta, &grads, cfg.beta)?;
        losses.push(loss);
    }
    Ok((theta, losses))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub warmup: Vec<f64>,
    pub inner: Vec<AdaptTrace>,
    pub outer: Vec<Vec<f64>>,
    /// Size of the cumulative pseudo test set after each accumulation,
    /// starting with the warmup test split.
    pub pseudo_test_sizes: Vec<usize>,
}

/// Meta-training over `cfg.episodes` sampled pseudo-incremental sequences.
pub fn meta_train(
    params: &ModelParams,
    s0: &LabeledSet,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ModelParams, Vec<EpisodeTrace>)> {
    let mut theta = params.clone();
    let mut traces = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let episode = sample_episode(s0, &cfg.episode, rng)?;
        let mut trace = EpisodeTrace::default();
        let mut p = CumulativeTestSet::new();
        let (warmed, warm_trace) = offline_warmup(&theta, &episode.warmup, cfg, rng)?;
        theta = warmed;
        trace.warmup = warm_trace;
        p = p.accumulate(&episode.warmup_test);
        trace.pseudo_test_sizes.push(p.len());
        for session in &episode.sessions {
            let (adapted, inner) =
                inner_adapt(&theta, session.train.features(), cfg.inner_steps, cfg, rng)?;
            p = p.accumulate(&session.test);
            trace.pseudo_test_sizes.push(p.len());
            let (updated, outer) = outer_meta_update(&theta, &adapted, &p, cfg, rng)?;
            theta = updated;
            trace.inner.push(inner);
            trace.outer.push(outer);
        }
        traces.push(trace);
    }
    Ok((theta, traces))
}

/// Clusters encoder features of `test` into `k` groups and scores them.
pub fn evaluate(
    params: &ModelParams,
    test: &LabeledSet,
    old: &BTreeSet<usize>,
    new: &BTreeSet<usize>,
    kmeans_cfg: &KMeansConfig,
    seed: u64,
) -> Result<SessionMetrics> {
    let k = old.len() + new.len();
    let features = params.features(test.features())?;
    let mut rng = Rng::new(seed).fork(STREAM_KMEANS);
    let clustering = kmeans(&features, k, &mut rng, kmeans_cfg)?;
    let matched = clustering_acc(test.labels(), &clustering.assignment)?;
    split_acc(&matched, old, new)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub metrics: SessionMetrics,
    /// Mean candidate-neighbor count over this session's adaptation steps.
    pub mean_neighbors: Option<f64>,
    pub adapt: AdaptTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: TrainConfig,
    /// Session 0 (after offline training) first, then every incremental session.
    pub sessions: Vec<SessionReport>,
    pub warmup_losses: Vec<f64>,
    pub episodes: Vec<EpisodeTrace>,
}

/// Adapts `params` session by session, carrying the model forward, and
/// evaluates on everything seen so far after each session.
pub fn meta_test(params: &ModelParams, stream: &SessionStream, cfg: &TrainConfig) -> Result<Vec<SessionReport>> {
    let mut rng = Rng::new(cfg.seed).fork(STREAM_META_TEST);
    let mut theta = params.clone();
    let mut known = stream.offline.classes();
    let mut p = CumulativeTestSet::new().accumulate(&stream.offline_test);
    let mut reports = Vec::with_capacity(stream.sessions.len() + 1);
    let metrics = evaluate(&theta, &p.to_labeled()?, &known, &BTreeSet::new(), &cfg.kmeans, cfg.seed)?;
    reports.push(SessionReport {
        session: 0,
        metrics,
        mean_neighbors: None,
        adapt: AdaptTrace::default(),
    });
    for (t, session) in stream.sessions.iter().enumerate() {
        let (adapted, adapt) =
            inner_adapt(&theta, session.train.features(), cfg.metatest_steps, cfg, &mut rng)?;
        theta = adapted.into_params();
        p = p.accumulate(&session.test);
        let metrics = evaluate(
            &theta,
            &p.to_labeled()?,
            &session.old_classes,
            &session.new_classes,
            &cfg.kmeans,
            cfg.seed,
        )?;
        known.extend(session.new_classes.iter().copied());
        let mean_neighbors = (!adapt.mean_neighbors.is_empty())
            .then(|| adapt.mean_neighbors.iter().sum::<f64>() / adapt.mean_neighbors.len() as f64);
        reports.push(SessionReport {
            session: t + 1,
            metrics,
            mean_neighbors,
            adapt,
        });
    }
    Ok(reports)
}

/// Offline training followed by the continual protocol.
///
/// With `use_meta` and at least one episode the model is meta-trained on the
/// offline set; otherwise it is warmed up on the whole offline set.
pub fn run(stream: &SessionStream, cfg: &TrainConfig) -> Result<(ModelParams, RunReport)> {
    cfg.validate()?;
    let init = cfg.init_model(stream.offline.dim())?;
    let mut rng = Rng::new(cfg.seed).fork(STREAM_META_TRAIN);
    let (theta, warmup_losses, episodes) = if cfg.ablation.use_meta && cfg.episodes > 0 {
        let (theta, episodes) = meta_train(&init, &stream.offline, cfg, &mut rng)?;
        (theta, Vec::new(), episodes)
    } else {
        let (theta, losses) = offline_warmup(&init, &stream.offline, cfg, &mut rng)?;
        (theta, losses, Vec::new())
    };
    let sessions = meta_test(&theta, stream, cfg)?;
    Ok((
        theta,
        RunReport {
            seed: cfg.seed,
            config: cfg.clone(),
            sessions,
            warmup_losses,
            episodes,
        },
    ))
}

pub const METRICS_CSV_HEADER: &str = "session,acc_all,acc_old,acc_new,n_all,n_old,n_new";

impl RunReport {
    pub fn final_metrics(&self) -> &SessionMetrics {
        &self.sessions.last().expect("at least session 0").metrics
    }

    /// Means of All/Old/New over the incremental sessions (session 0 when
    /// there are none).
    pub fn session_means(&self) -> (f64, f64, f64) {
        let incremental: Vec<&SessionMetrics> = match self.sessions.len() {
            1 => vec![&self.sessions[0].metrics],
            _ => self.sessions[1..].iter().map(|s| &s.metrics).collect(),
        };
        let n = incremental.len() as f64;
        let mean = |f: fn(&SessionMetrics) -> f64| incremental.iter().map(|m| f(m)).sum::<f64>() / n;
        (mean(|m| m.acc_all), mean(|m| m.acc_old), mean(|m| m.acc_new))
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_CSV_HEADER}\n");
        for s in &self.sessions {
            let m = &s.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.session, m.acc_all, m.acc_old, m.acc_new, m.n_all, m.n_old, m.n_new
            )
            .unwrap();
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, SyntheticSpec};
    use crate::protocol::{make_benchmark_stream, StreamConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            warmup_epochs: 3,
            inner_steps: 2,
            metatest_steps: 2,
            episodes: 1,
            encoder_widths: vec![16, 8],
            projection_widths: vec![8],
            kmeans: KMeansConfig {
                restarts: 2,
                max_iter: 50,
                ..KMeansConfig::default()
            },
            episode: EpisodeConfig {
                sessions: 2,
                novel_per_session: 1,
                unlabeled_known: 10,
                unlabeled_novel: 10,
                test_per_class: 4,
            },
            ..TrainConfig::default()
        }
    }

    fn blobs(classes: usize, per_class: usize, dim: usize, seed: u64) -> LabeledSet {
        gen_gaussian_mixture(&SyntheticSpec {
            num_classes: classes,
            dim,
            samples_per_class: per_class,
            class_separation: 6.0,
            seed,
        })
        .unwrap()
    }

    fn small_stream(seed: u64) -> SessionStream {
        let data = blobs(8, 40, 6, seed);
        let cfg = StreamConfig {
            offline_classes: 4,
            sessions: 2,
            novel_per_session: 2,
            train_per_class: 30,
            test_per_class: 10,
            ..StreamConfig::default()
        };
        make_benchmark_stream(&data, &cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn clean_views_equal_input() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = augment_views(&x, &mut Rng::new(0), 0.0, 0.0).unwrap();
        assert_eq!(&v.data()[..6], x.data());
        assert_eq!(&v.data()[6..], x.data());
        assert!(augment_views(&x, &mut Rng::new(0), -1.0, 0.0).is_err());
        assert!(augment_views(&x, &mut Rng::new(0), 0.0, 1.0).is_err());
    }

    #[test]
    fn noise_statistics_match_strength() {
        let x = Tensor::zeros(&[100, 50]);
        let v = augment_views(&x, &mut Rng::new(5), 0.3, 0.0).unwrap();
        let n = v.len() as f64;
        let mean = v.sum() / n;
        let sd = (v.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.3).abs() < 0.03, "sample sd {sd}");
    }

    #[test]
    fn mask_rate_and_rescale() {
        let x = Tensor::ones(&[200, 50]);
        let v = augment_views(&x, &mut Rng::new(6), 0.0, 0.1).unwrap();
        let dropped = v.data().iter().filter(|&&a| a == 0.0).count() as f64 / v.len() as f64;
        assert!((dropped - 0.1).abs() < 0.01);
        assert!(v.data().iter().all(|&a| a == 0.0 || (a - 1.0 / 0.9).abs() < 1e-15));
    }

    #[test]
    fn views_differ_under_noise() {
        let x = Tensor::zeros(&[20, 4]);
        for seed in 0..20 {
            let v = augment_views(&x, &mut Rng::new(seed), 0.1, 0.1).unwrap();
            for i in 0..20 {
                assert_ne!(v.row(i), v.row(i + 20));
            }
        }
    }

    #[test]
    fn zero_epochs_leave_params() {
        let cfg = TrainConfig {
            warmup_epochs: 0,
            ..small_cfg()
        };
        let theta = cfg.init_model(6).unwrap();
        let (out, trace) = offline_warmup(&theta, &blobs(4, 10, 6, 1), &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(out, theta);
        assert!(trace.is_empty());
    }

    #[test]
    fn warmup_loss_decreases_on_separable_toy() {
        for seed in 0..5 {
            let cfg = TrainConfig {
                warmup_epochs: 15,
                seed,
                ..small_cfg()
            };
            let theta = cfg.init_model(6).unwrap();
            let data = blobs(4, 24, 6, seed);
            let (_, trace) = offline_warmup(&theta, &data, &cfg, &mut Rng::new(seed)).unwrap();
            assert!(trace.last().unwrap() < trace.first().unwrap(), "seed {seed}: {trace:?}");
        }
    }

    #[test]
    fn zero_inner_steps_is_identity() {
        let cfg = small_cfg();
        let theta = cfg.init_model(6).unwrap();
        let x = blobs(3, 5, 6, 2).features().clone();
        let (adapted, trace) = inner_adapt(&theta, &x, 0, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(adapted.params(), &theta);
        assert!(trace.losses.is_empty());
    }

    #[test]
    fn inner_adapt_is_functional() {
        let cfg = small_cfg();
        let theta = cfg.init_model(6).unwrap();
        let snapshot = theta.clone();
        let x = blobs(3, 5, 6, 2).features().clone();
        let (adapted, _) = inner_adapt(&theta, &x, 3, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(theta, snapshot);
        assert_ne!(adapted.params(), &theta);
    }

    #[test]
    fn ablated_inner_step_follows_ucl_gradient() {
        let cfg = TrainConfig {
            ablation: Ablation::BASELINE,
            ..small_cfg()
        };
        let theta = cfg.init_model(6).unwrap();
        let x = blobs(3, 6, 6, 3).features().clone();
        let (adapted, _) = inner_adapt(&theta, &x, 1, &cfg, &mut Rng::new(9)).unwrap();

        // the batch covers every row, so the rng only drives augmentation
        let views = augment_views(&x, &mut Rng::new(9), cfg.augment_strength, cfg.mask_prob).unwrap();
        let (_, grads) = loss_and_grad(&theta, views, |g, _, z| {
            let batch = ViewBatch::new(g, z, None)?;
            ucl_loss(g, &batch, &cfg.loss)
        })
        .unwrap();
        let manual = sgd_step(&theta, &grads, cfg.alpha).unwrap();
        let diff = adapted
            .params()
            .to_flat()
            .iter()
            .zip(manual.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-9 * cfg.alpha, "{diff}");
    }

    #[test]
    fn zero_beta_keeps_theta() {
        let cfg = TrainConfig {
            beta: 0.0,
            ..small_cfg()
        };
        let theta = cfg.init_model(6).unwrap();
        let p = CumulativeTestSet::new().accumulate(&blobs(3, 4, 6, 1));
        let adapted = AdaptedParams::from_params(theta.clone());
        let (out, _) = outer_meta_update(&theta, &adapted, &p, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn outer_update_without_adaptation_is_plain_scl_step() {
        let cfg = small_cfg();
        let theta = cfg.init_model(6).unwrap();
        let data = blobs(3, 4, 6, 1);
        let p = CumulativeTestSet::new().accumulate(&data);
        let (adapted, _) = inner_adapt(&theta, data.features(), 0, &cfg, &mut Rng::new(0)).unwrap();
        let (out, _) = outer_meta_update(&theta, &adapted, &p, &cfg, &mut Rng::new(1)).unwrap();

        let views = augment_views(data.features(), &mut Rng::new(1), cfg.augment_strength, cfg.mask_prob).unwrap();
        let labels = data.labels().to_vec();
        let (_, grads) = loss_and_grad(&theta, views, |g, _, z| {
            let batch = ViewBatch::new(g, z, Some(labels))?;
            scl_loss(g, &batch, &cfg.loss)
        })
        .unwrap();
        assert_eq!(out, sgd_step(&theta, &grads, cfg.beta).unwrap());
    }

    #[test]
    fn empty_pseudo_test_set_rejected() {
        let cfg = small_cfg();
        let theta = cfg.init_model(6).unwrap();
        let adapted = AdaptedParams::from_params(theta.clone());
        let res = outer_meta_update(&theta, &adapted, &CumulativeTestSet::new(), &cfg, &mut Rng::new(0));
        assert!(matches!(res, Err(Error::EmptyDataset)));
    }

    #[test]
    fn zero_episodes_return_init() {
        let cfg = TrainConfig {
            episodes: 0,
            ..small_cfg()
        };
        let theta = cfg.init_model(6).unwrap();
        let (out, traces) = meta_train(&theta, &blobs(8, 30, 6, 0), &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(out, theta);
        assert!(traces.is_empty());
    }

    #[test]
    fn pseudo_test_set_resets_each_episode() {
        let cfg = TrainConfig {
            episodes: 3,
            ..small_cfg()
        };
        let theta = cfg.init_model(6).unwrap();
        let s0 = blobs(6, 30, 6, 4);
        let (_, traces) = meta_train(&theta, &s0, &cfg, &mut Rng::new(0)).unwrap();
        let tpc = cfg.episode.test_per_class;
        let labeled = 6 - cfg.episode.sessions * cfg.episode.novel_per_session;
        for t in &traces {
            // warmup classes first, then one novel class per session
            assert_eq!(t.pseudo_test_sizes, vec![labeled * tpc, (labeled + 1) * tpc, (labeled + 2) * tpc]);
            let all = t
                .warmup
                .iter()
                .chain(t.inner.iter().flat_map(|i| &i.losses))
                .chain(t.outer.iter().flatten());
            assert!(all.into_iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn idle_sessions_keep_accuracy() {
        let data = blobs(4, 60, 6, 7);
        let scfg = StreamConfig {
            offline_classes: 4,
            sessions: 2,
            novel_per_session: 0,
            train_per_class: 40,
            test_per_class: 20,
            ..StreamConfig::default()
        };
        let stream = make_benchmark_stream(&data, &scfg, &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            metatest_steps: 0,
            ..small_cfg()
        };
        let theta = cfg.init_model(6).unwrap();
        let reports = meta_test(&theta, &stream, &cfg).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports[1..] {
            assert_eq!(r.metrics.acc_all, reports[0].metrics.acc_all);
        }
    }

    #[test]
    fn run_is_deterministic_and_ordered() {
        let stream = small_stream(3);
        let cfg = TrainConfig {
            seed: 11,
            ..small_cfg()
        };
        let (_, a) = run(&stream, &cfg).unwrap();
        let (_, b) = run(&stream, &cfg).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        let order: Vec<usize> = a.sessions.iter().map(|s| s.session).collect();
        assert_eq!(order, vec![0, 1, 2]);
        for s in &a.sessions {
            let m = &s.metrics;
            let weighted = (m.n_old as f64 * m.acc_old + m.n_new as f64 * m.acc_new) / m.n_all as f64;
            assert!((weighted - m.acc_all).abs() < 1e-9);
        }
        assert_eq!(a.metrics_csv().lines().next(), Some(METRICS_CSV_HEADER));
    }

    #[test]
    fn report_json_round_trip() {
        let stream = small_stream(4);
        let (_, report) = run(&stream, &small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        report.save_json(&path).unwrap();
        assert_eq!(RunReport::load_json(&path).unwrap(), report);
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = TrainConfig {
            gamma: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "gamma"));
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn presets() {
        assert_eq!(Ablation::preset("baseline"), Some(Ablation::BASELINE));
        assert_eq!(Ablation::preset("meta"), Some(Ablation::FULL));
        assert_eq!(Ablation::preset("bogus"), None);
    }
}
