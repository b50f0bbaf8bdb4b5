//! Session streams, pseudo-incremental episodes and the cumulative test set.
//!
//! Unlabeled training splits keep their ground-truth labels for bookkeeping,
//! but the only accessor is [`UnlabeledSet::reveal_for_evaluation`]. Training
//! code receives [`UnlabeledSet::features`] and never sees the labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Feature rows with class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Tensor,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Self::build(features, labels)
    }

    /// An empty split of dimension `dim` (a session that adds no classes).
    pub fn empty(dim: usize) -> Self {
        Self {
            features: Tensor::zeros(&[0, dim]),
            labels: Vec::new(),
        }
    }

    fn build(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "labeled set",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    fn concat(parts: &[&LabeledSet], dim: usize) -> LabeledSet {
        if parts.is_empty() {
            return LabeledSet::empty(dim);
        }
        let feats: Vec<&Tensor> = parts.iter().map(|p| &p.features).collect();
        LabeledSet {
            features: Tensor::vstack(&feats).expect("parts share a dimension"),
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        }
    }
}

/// Unlabeled training data whose labels are held back for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Tensor,
    hidden: Vec<usize>,
}

impl UnlabeledSet {
    fn hide(set: LabeledSet) -> Self {
        Self {
            features: set.features,
            hidden: set.labels,
        }
    }

    /// The training-facing view.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    /// Ground truth for scoring; never called from training code.
    pub fn reveal_for_evaluation(&self) -> &[usize] {
        &self.hidden
    }
}

/// One incremental session: unlabeled train data plus a labeled test split
/// covering the classes introduced in this session.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub train: UnlabeledSet,
    pub test: LabeledSet,
    /// Classes known before this session.
    pub old_classes: BTreeSet<usize>,
    /// Classes introduced in this session.
    pub new_classes: BTreeSet<usize>,
}

impl Session {
    pub fn all_classes(&self) -> BTreeSet<usize> {
        self.old_classes.union(&self.new_classes).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub offline: LabeledSet,
    pub offline_test: LabeledSet,
    pub sessions: Vec<Session>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSequence {
    pub warmup: LabeledSet,
    pub warmup_test: LabeledSet,
    pub sessions: Vec<Session>,
}

/// Multiset union of labeled test splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CumulativeTestSet {
    parts: Vec<LabeledSet>,
}

impl CumulativeTestSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(mut self, split: &LabeledSet) -> Self {
        if !split.is_empty() {
            self.parts.push(split.clone());
        }
        self
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(LabeledSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_splits(&self) -> usize {
        self.parts.len()
    }

    pub fn clear(&mut self) {
        self.parts.clear();
    }

    /// All accumulated samples as one labeled set.
    pub fn to_labeled(&self) -> Result<LabeledSet> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let parts: Vec<&LabeledSet> = self.parts.iter().collect();
        Ok(LabeledSet::concat(&parts, self.parts[0].dim()))
    }
}

/// Random disjoint split of the class universe into (pseudo-labeled, pseudo-novel).
pub fn split_pseudo_classes(
    s0: &LabeledSet,
    n_pseudo_novel: usize,
    rng: &mut Rng,
) -> Result<(BTreeSet<usize>, Vec<usize>)> {
    let mut classes: Vec<usize> = s0.classes().into_iter().collect();
    if n_pseudo_novel >= classes.len() {
        return Err(Error::Capacity(format!(
            "{n_pseudo_novel} pseudo-novel classes requested from {} classes; at least one must stay labeled",
            classes.len()
        )));
    }
    rng.shuffle(&mut classes);
    let novel = classes.split_off(classes.len() - n_pseudo_novel);
    Ok((classes.into_iter().collect(), novel))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub sessions: usize,
    pub novel_per_session: usize,
    /// Unlabeled samples drawn from already-known classes per session.
    pub unlabeled_known: usize,
    /// Unlabeled samples drawn from the session's novel classes per session.
    pub unlabeled_novel: usize,
    pub test_per_class: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            sessions: 3,
            novel_per_session: 2,
            unlabeled_known: 40,
            unlabeled_novel: 60,
            test_per_class: 10,
        }
    }
}

/// Takes up to `count` samples round-robin over `classes`, skipping exhausted pools.
fn draw_round_robin(
    pools: &mut BTreeMap<usize, Vec<usize>>,
    classes: &[usize],
    count: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut progressed = false;
        for c in classes {
            if out.len() == count {
                break;
            }
            if let Some(i) = pools.get_mut(c).and_then(Vec::pop) {
                out.push(i);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

/// Samples a pseudo-incremental sequence from the offline labeled set.
pub fn sample_episode(s0: &LabeledSet, cfg: &EpisodeConfig, rng: &mut Rng) -> Result<EpisodeSequence> {
    let n_novel = cfg.sessions * cfg.novel_per_session;
    let (labeled, novel) = split_pseudo_classes(s0, n_novel, rng)?;

    let mut pools = s0.indices_by_class();
    for idx in pools.values_mut() {
        rng.shuffle(idx);
    }
    let mut tests: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&c, idx) in pools.iter_mut() {
        if idx.len() <= cfg.test_per_class {
            return Err(Error::Capacity(format!(
                "class {c} has {} samples; {} are needed for its test split plus at least one for training",
                idx.len(),
                cfg.test_per_class
            )));
        }
        tests.insert(c, idx.split_off(idx.len() - cfg.test_per_class));
    }
    let test_of = |classes: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
        classes.flat_map(|c| tests[&c].iter().copied()).collect()
    };

    let mut known: Vec<usize> = labeled.iter().copied().collect();
    let mut sessions_idx = Vec::with_capacity(cfg.sessions);
    for j in 0..cfg.sessions {
        let fresh = &novel[j * cfg.novel_per_session..(j + 1) * cfg.novel_per_session];
        let mut train = draw_round_robin(&mut pools, fresh, cfg.unlabeled_novel);
        if train.len() < cfg.unlabeled_novel {
            return Err(Error::Capacity(format!(
                "session {}: wanted {} novel samples, only {} available",
                j + 1,
                cfg.unlabeled_novel,
                train.len()
            )));
        }
        let known_draw = draw_round_robin(&mut pools, &known, cfg.unlabeled_known);
        if known_draw.len() < cfg.unlabeled_known {
            return Err(Error::Capacity(format!(
                "session {}: wanted {} known-class samples, only {} available",
                j + 1,
                cfg.unlabeled_known,
                known_draw.len()
            )));
        }
        train.extend(known_draw);
        let old: BTreeSet<usize> = known.iter().copied().collect();
        let new: BTreeSet<usize> = fresh.iter().copied().collect();
        sessions_idx.push((train, test_of(&mut fresh.iter().copied()), old, new));
        known.extend_from_slice(fresh);
    }

    let warmup_idx: Vec<usize> = labeled.iter().flat_map(|c| pools[c].iter().copied()).collect();
    if let Some((j, biggest)) = sessions_idx
        .iter()
        .enumerate()
        .map(|(j, s)| (j, s.0.len()))
        .find(|&(_, n)| n >= warmup_idx.len())
    {
        return Err(Error::Capacity(format!(
            "warmup split has {} samples but session {} has {biggest}; the warmup must be the largest",
            warmup_idx.len(),
            j + 1
        )));
    }
    if warmup_idx.len() < 2 {
        return Err(Error::Capacity("warmup split needs at least two samples".into()));
    }

    let warmup_test = test_of(&mut labeled.iter().copied());
    let sessions = sessions_idx
        .into_iter()
        .map(|(train, test, old_classes, new_classes)| Session {
            train: UnlabeledSet::hide(s0.subset(&train)),
            test: s0.subset(&test),
            old_classes,
            new_classes,
        })
        .collect();
    Ok(EpisodeSequence {
        warmup: s0.subset(&warmup_idx),
        warmup_test: s0.subset(&warmup_test),
        sessions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub offline_classes: usize,
    pub sessions: usize,
    pub novel_per_session: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Share of each known class's training pool that forms the offline set.
    pub offline_fraction: f64,
    /// Share of a novel class's training pool released in its first session;
    /// the rest is spread over later sessions as known-class data.
    pub novel_intro_fraction: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            offline_classes: 14,
            sessions: 3,
            novel_per_session: 2,
            train_per_class: 100,
            test_per_class: 50,
            offline_fraction: 0.8,
            novel_intro_fraction: 0.6,
        }
    }
}

impl StreamConfig {
    pub fn total_classes(&self) -> usize {
        self.offline_classes + self.sessions * self.novel_per_session
    }
}

/// Splits `n` items into `parts` nearly equal consecutive chunks.
fn chunk_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| n / parts + usize::from(i < n % parts))
        .collect()
}

/// Builds the offline set and the unlabeled session stream from a dataset.
pub fn make_benchmark_stream(dataset: &LabeledSet, cfg: &StreamConfig, rng: &mut Rng) -> Result<SessionStream> {
    if !(cfg.offline_fraction > 0.0 && cfg.offline_fraction <= 1.0)
        || !(cfg.novel_intro_fraction > 0.0 && cfg.novel_intro_fraction <= 1.0)
    {
        return Err(Error::invalid("stream fractions must lie in (0, 1]"));
    }
    if cfg.offline_classes == 0 {
        return Err(Error::invalid("at least one offline class is required"));
    }
    let mut classes: Vec<usize> = dataset.classes().into_iter().collect();
    if classes.len() < cfg.total_classes() {
        return Err(Error::Capacity(format!(
            "dataset has {} classes, stream needs {} offline + {} x {} novel = {}",
            classes.len(),
            cfg.offline_classes,
            cfg.sessions,
            cfg.novel_per_session,
            cfg.total_classes()
        )));
    }
    rng.shuffle(&mut classes);
    classes.truncate(cfg.total_classes());

    let by_class = dataset.indices_by_class();
    let mut train_pool = BTreeMap::new();
    let mut test_pool = BTreeMap::new();
    for &c in &classes {
        let mut idx = by_class[&c].clone();
        let need = cfg.train_per_class + cfg.test_per_class;
        if idx.len() < need {
            return Err(Error::Capacity(format!(
                "class {c} has {} samples, needs {} train + {} test",
                idx.len(),
                cfg.train_per_class,
                cfg.test_per_class
            )));
        }
        rng.shuffle(&mut idx);
        test_pool.insert(c, idx[..cfg.test_per_class].to_vec());
        train_pool.insert(c, idx[cfg.test_per_class..need].to_vec());
    }

    let offline: Vec<usize> = classes[..cfg.offline_classes].to_vec();
    let t_max = cfg.sessions;
    // per session: train sample indices
    let mut session_train: Vec<Vec<usize>> = vec![Vec::new(); t_max];
    let mut offline_idx = Vec::new();

    // leftover pool of a class becomes known data in sessions first..=T
    let spread = |pool: &[usize], first: usize, sink: &mut Vec<Vec<usize>>| {
        if first > t_max || first == 0 {
            return;
        }
        let mut offset = 0;
        for (t, size) in (first..=t_max).zip(chunk_sizes(pool.len(), t_max - first + 1)) {
            sink[t - 1].extend_from_slice(&pool[offset..offset + size]);
            offset += size;
        }
    };

    for c in &offline {
        let pool = &train_pool[c];
        let n_off = ((pool.len() as f64) * cfg.offline_fraction).round() as usize;
        let n_off = n_off.clamp(1, pool.len());
        offline_idx.extend_from_slice(&pool[..n_off]);
        spread(&pool[n_off..], 1, &mut session_train);
    }
    let mut known: BTreeSet<usize> = offline.iter().copied().collect();
    let mut sessions = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let fresh = &classes[cfg.offline_classes + (t - 1) * cfg.novel_per_session
            ..cfg.offline_classes + t * cfg.novel_per_session];
        for c in fresh {
            let pool = &train_pool[c];
            let n_intro = ((pool.len() as f64) * cfg.novel_intro_fraction).round() as usize;
            let n_intro = n_intro.clamp(1, pool.len());
            session_train[t - 1].extend_from_slice(&pool[..n_intro]);
            spread(&pool[n_intro..], t + 1, &mut session_train);
        }
        let new: BTreeSet<usize> = fresh.iter().copied().collect();
        let test: Vec<usize> = fresh.iter().flat_map(|c| test_pool[c].iter().copied()).collect();
        sessions.push((new, test, known.clone()));
        known.extend(fresh.iter().copied());
    }

    let offline_test: Vec<usize> = offline.iter().flat_map(|c| test_pool[c].iter().copied()).collect();
    let sessions = sessions
        .into_iter()
        .zip(session_train)
        .enumerate()
        .map(|(t, ((new_classes, test, old_classes), train))| {
            if train.is_empty() {
                return Err(Error::Capacity(format!("session {} has no training data", t + 1)));
            }
            Ok(Session {
                train: UnlabeledSet::hide(dataset.subset(&train)),
                test: if test.is_empty() {
                    LabeledSet::empty(dataset.dim())
                } else {
                    dataset.subset(&test)
                },
                old_classes,
                new_classes,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let offline_test = if offline_test.is_empty() {
        LabeledSet::empty(dataset.dim())
    } else {
        dataset.subset(&offline_test)
    };
    Ok(SessionStream {
        offline: dataset.subset(&offline_idx),
        offline_test,
        sessions,
    })
}

fn join(set: &BTreeSet<usize>) -> String {
    set.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl SessionStream {
    /// Human-readable per-session class lists and sample counts.
    pub fn manifest(&self) -> String {
        let mut out = String::from("# session stream manifest v1\n");
        writeln!(
            out,
            "session 0 classes={} train={} test={}",
            join(&self.offline.classes()),
            self.offline.len(),
            self.offline_test.len()
        )
        .unwrap();
        for (t, s) in self.sessions.iter().enumerate() {
            writeln!(
                out,
                "session {} old={} new={} train={} test={}",
                t + 1,
                join(&s.old_classes),
                join(&s.new_classes),
                s.train.len(),
                s.test.len()
            )
            .unwrap();
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest()).map_err(|e| Error::io(path, e))
    }

    /// Labeled test samples of every class known after session `t` (0 = offline).
    pub fn cumulative_test(&self, t: usize) -> CumulativeTestSet {
        self.sessions[..t]
            .iter()
            .fold(CumulativeTestSet::new().accumulate(&self.offline_test), |p, s| {
                p.accumulate(&s.test)
            })
    }
}
