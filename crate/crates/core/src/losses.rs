//! Contrastive objectives over two-view batches, candidate-neighbor mining
//! and positiveness weighting.
//!
//! Every loss here has the shape
//!
//! ```text
//! L = mean_i [ LSE_i - 1/|P(i)| * sum_{k in P(i)} (z_i.z_k / tau + log w_ik) ]
//! ```
//!
//! where `LSE_i = log sum_{n != i} exp(z_i.z_n / tau)` and only the positive
//! set `P(i)` and the weights `w` differ: the paired view with `w = 1` for the
//! unsupervised loss, all same-label rows with `w = 1` for the supervised
//! loss, and mined neighbors with positiveness weights for the soft loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Term, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Identity,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub attention: AttentionMode,
    pub stop_gradient_on_w: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.35,
            epsilon: 0.85,
            attention: AttentionMode::Identity,
            stop_gradient_on_w: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config {
                key: "tau".into(),
                reason: format!("must be > 0, got {}", self.tau),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config {
                key: "lambda".into(),
                reason: format!("must lie in [0, 1], got {}", self.lambda),
            });
        }
        if !(self.epsilon > -1.0 - 1e-12 && self.epsilon <= 1.0) {
            return Err(Error::Config {
                key: "epsilon".into(),
                reason: format!("must lie in [-1, 1], got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

/// Embeddings of `B` instances in two views, stacked as
/// `[view1 of 0..B; view2 of 0..B]`, so row `i` pairs with row `(i + B) mod 2B`.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub z: Var,
    instances: usize,
    labels: Option<Vec<usize>>,
}

impl ViewBatch {
    pub fn new(g: &Graph, z: Var, labels: Option<Vec<usize>>) -> Result<Self> {
        let shape = g.value(z).shape();
        if shape.len() != 2 || !shape[0].is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "view batch needs an even number of rows, got shape {shape:?}"
            )));
        }
        let instances = shape[0] / 2;
        if let Some(l) = &labels {
            if l.len() != instances {
                return Err(Error::invalid(format!(
                    "{} labels for {} instances",
                    l.len(),
                    instances
                )));
            }
        }
        Ok(Self {
            z,
            instances,
            labels,
        })
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn rows(&self) -> usize {
        2 * self.instances
    }

    pub fn pair_of(&self, row: usize) -> usize {
        (row + self.instances) % self.rows()
    }

    /// Label of a row (both views share the instance label).
    pub fn label_of(&self, row: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[row % self.instances])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    fn require_min_rows(&self) -> Result<()> {
        if self.rows() < 4 {
            return Err(Error::invalid(format!(
                "contrastive losses need at least 4 rows (2 instances), got {}",
                self.rows()
            )));
        }
        Ok(())
    }
}

/// Candidate neighbors per anchor row: indices and their cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub neighbors: Vec<Vec<usize>>,
    pub similarities: Vec<Vec<f64>>,
}

impl NeighborSet {
    /// Each anchor's neighborhood is only its paired view.
    pub fn paired_only(z: &Tensor) -> Self {
        let m = z.rows();
        let b = m / 2;
        let neighbors: Vec<Vec<usize>> = (0..m).map(|i| vec![(i + b) % m]).collect();
        let similarities = neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| vec![cosine(z.row(i), z.row(n[0]))])
            .collect();
        Self {
            neighbors,
            similarities,
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn mean_size(&self) -> f64 {
        if self.neighbors.is_empty() {
            return 0.0;
        }
        self.neighbors.iter().map(Vec::len).sum::<usize>() as f64 / self.neighbors.len() as f64
    }
}

/// Per-anchor weights aligned with a [`NeighborSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Positiveness {
    pub weights: Vec<Vec<f64>>,
}

impl Positiveness {
    /// Binary weighting: every candidate counts fully.
    pub fn uniform(nbrs: &NeighborSet) -> Self {
        Self {
            weights: nbrs.neighbors.iter().map(|n| vec![1.0; n.len()]).collect(),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Rows whose cosine with the anchor is at least `epsilon`, always including
/// the anchor's paired view and never the anchor itself.
pub fn candidate_neighbors(z: &Tensor, epsilon: f64) -> Result<NeighborSet> {
    let m = z.rows();
    if !m.is_multiple_of(2) || m < 2 {
        return Err(Error::invalid(format!(
            "candidate_neighbors needs an even row count, got {m}"
        )));
    }
    let b = m / 2;
    let mut neighbors = Vec::with_capacity(m);
    let mut similarities = Vec::with_capacity(m);
    for i in 0..m {
        let pair = (i + b) % m;
        let (mut idx, mut sims) = (Vec::new(), Vec::new());
        for j in (0..m).filter(|&j| j != i) {
            let c = cosine(z.row(i), z.row(j));
            if c >= epsilon || j == pair {
                idx.push(j);
                sims.push(c);
            }
        }
        neighbors.push(idx);
        similarities.push(sims);
    }
    Ok(NeighborSet {
        neighbors,
        similarities,
    })
}

/// Attention logits `f1(z) f2(z)^T` as a graph node. Identity maps when
/// `attention` is `None`.
pub fn attention_logits(g: &mut Graph, z: Var, attention: Option<(Var, Var)>) -> Result<Var> {
    match attention {
        None => {
            let zt = g.transpose(z)?;
            g.matmul(z, zt)
        }
        Some((q, k)) => {
            let zq = g.matmul(z, q)?;
            let zk = g.matmul(z, k)?;
            let zkt = g.transpose(zk)?;
            g.matmul(zq, zkt)
        }
    }
}

/// Identity-map attention logits `z z^T` computed directly.
pub fn identity_logits(z: &Tensor) -> Result<Tensor> {
    z.matmul(&z.transpose()?)
}

/// Softmax of each anchor's logits over its neighbors, rescaled so the
/// largest weight is exactly 1. That is `w_ik = exp(a_ik - max_k a_ik)`.
pub fn positiveness(logits: &Tensor, nbrs: &NeighborSet) -> Result<Positiveness> {
    let m = logits.rows();
    if logits.shape() != [m, m] || nbrs.len() != m {
        return Err(Error::Dimension {
            op: "positiveness",
            left: logits.shape().to_vec(),
            right: vec![nbrs.len()],
        });
    }
    let weights = nbrs
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.is_empty() {
                return Vec::new();
            }
            let a: Vec<f64> = row.iter().map(|&k| logits.get(i, k)).collect();
            let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // softmax with max subtraction, then divide by the largest entry
            let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = e.iter().sum();
            let soft: Vec<f64> = e.iter().map(|v| v / total).collect();
            let top = soft.iter().copied().fold(0.0, f64::max);
            soft.iter()
                .zip(&a)
                .map(|(s, &ai)| if ai == max { 1.0 } else { s / top })
                .collect()
        })
        .collect();
    Ok(Positiveness { weights })
}

/// Where the soft loss takes its positiveness weights from.
#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    /// Constants with respect to differentiation.
    Fixed(&'a Positiveness),
    /// Recomputed from a logits node; gradients flow through `log w`.
    FromLogits(Var),
}

/// One positive `(row, log w)` list per anchor.
type PositiveSets = Vec<Vec<(usize, f64)>>;

fn contrastive(
    g: &mut Graph,
    batch: &ViewBatch,
    tau: f64,
    positives: &PositiveSets,
    weight_logits: Option<Var>,
) -> Result<Var> {
    let m = batch.rows();
    let zt = g.transpose(batch.z)?;
    let gram = g.matmul(batch.z, zt)?;
    let sim = g.scale(gram, 1.0 / tau);
    let lse = g.off_diagonal_logsumexp(sim)?;

    let inv_m = 1.0 / m as f64;
    let mut sim_terms = Vec::new();
    let mut logit_terms = Vec::new();
    let mut offset = 0.0;
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            return Err(Error::invalid(format!("anchor {i} has no positives")));
        }
        let c = inv_m / pos.len() as f64;
        let argmax = weight_logits.map(|a| {
            let av = g.value(a);
            pos.iter()
                .map(|&(k, _)| k)
                .fold(pos[0].0, |best, k| if av.get(i, k) > av.get(i, best) { k } else { best })
        });
        for &(k, log_w) in pos {
            sim_terms.push(Term {
                row: i,
                col: k,
                coeff: -c,
            });
            match argmax {
                Some(top) => {
                    logit_terms.push(Term {
                        row: i,
                        col: k,
                        coeff: -c,
                    });
                    logit_terms.push(Term {
                        row: i,
                        col: top,
                        coeff: c,
                    });
                }
                None => offset -= c * log_w,
            }
        }
    }
    let lse_terms = (0..m)
        .map(|i| Term {
            row: i,
            col: 0,
            coeff: inv_m,
        })
        .collect();
    let pos_part = g.sparse_sum(sim, sim_terms, offset)?;
    let neg_part = g.sparse_sum(lse, lse_terms, 0.0)?;
    let mut loss = g.add(pos_part, neg_part)?;
    if let Some(a) = weight_logits {
        let w_part = g.sparse_sum(a, logit_terms, 0.0)?;
        loss = g.add(loss, w_part)?;
    }
    Ok(loss)
}

/// Unsupervised contrastive loss: the paired view is the only positive.
pub fn ucl_loss(g: &mut Graph, batch: &ViewBatch, cfg: &LossConfig) -> Result<Var> {
    batch.require_min_rows()?;
    let positives = (0..batch.rows())
        .map(|i| vec![(batch.pair_of(i), 0.0)])
        .collect();
    contrastive(g, batch, cfg.tau, &positives, None)
}

/// Supervised contrastive loss: every other row with the anchor's label is a
/// positive. The paired view always qualifies, so no anchor is left without
/// positives.
pub fn scl_loss(g: &mut Graph, batch: &ViewBatch, cfg: &LossConfig) -> Result<Var> {
    batch.require_min_rows()?;
    if batch.labels.is_none() {
        return Err(Error::invalid("supervised contrastive loss needs labels"));
    }
    let m = batch.rows();
    let positives = (0..m)
        .map(|i| {
            let li = batch.label_of(i);
            (0..m)
                .filter(|&q| q != i && batch.label_of(q) == li)
                .map(|q| (q, 0.0))
                .collect()
        })
        .collect();
    contrastive(g, batch, cfg.tau, &positives, None)
}

/// `(1 - lambda) * ucl + lambda * scl`.
pub fn labeled_loss(g: &mut Graph, batch: &ViewBatch, cfg: &LossConfig) -> Result<Var> {
    let u = ucl_loss(g, batch, cfg)?;
    let s = scl_loss(g, batch, cfg)?;
    let u = g.scale(u, 1.0 - cfg.lambda);
    let s = g.scale(s, cfg.lambda);
    g.add(u, s)
}

/// Soft neighborhood contrastive loss over mined candidate neighbors.
pub fn soft_loss(
    g: &mut Graph,
    batch: &ViewBatch,
    nbrs: &NeighborSet,
    weights: Weights<'_>,
    cfg: &LossConfig,
) -> Result<Var> {
    batch.require_min_rows()?;
    if nbrs.len() != batch.rows() {
        return Err(Error::invalid(format!(
            "neighbor set covers {} rows, batch has {}",
            nbrs.len(),
            batch.rows()
        )));
    }
    let computed;
    let (values, logits) = match weights {
        Weights::Fixed(w) => (w, None),
        Weights::FromLogits(a) => {
            computed = positiveness(g.value(a), nbrs)?;
            (&computed, Some(a))
        }
    };
    if values.weights.len() != nbrs.len() {
        return Err(Error::invalid("positiveness rows do not match neighbor rows"));
    }
    let mut positives = Vec::with_capacity(nbrs.len());
    for (i, (idx, w)) in nbrs.neighbors.iter().zip(&values.weights).enumerate() {
        if idx.len() != w.len() {
            return Err(Error::invalid(format!(
                "anchor {i}: {} weights for {} neighbors",
                w.len(),
                idx.len()
            )));
        }
        if let Some(bad) = w.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Degenerate {
                op: "soft_loss",
                detail: format!("anchor {i} has positiveness weight {bad}"),
            });
        }
        positives.push(idx.iter().zip(w).map(|(&k, &wk)| (k, wk.ln())).collect());
    }
    contrastive(g, batch, cfg.tau, &positives, logits)
}
