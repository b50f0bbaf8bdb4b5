use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Draw `2 + floor(ln k)` candidates per seeding step and keep the one
    /// that lowers the potential most; `false` draws a single candidate.
    pub greedy_seeding: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            greedy_seeding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Tensor,
    pub assignment: Vec<usize>,
    /// Sum of squared distances of every sample to its centroid.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each assignment step of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per sample (ties to the lowest id) and its squared distance.
pub fn assign(features: &Tensor, centroids: &Tensor) -> (Vec<usize>, Vec<f64>) {
    (0..features.rows())
        .map(|i| {
            let x = features.row(i);
            let mut best = (0, sq_dist(x, centroids.row(0)));
            for c in 1..centroids.rows() {
                let d = sq_dist(x, centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

/// Sum of squared distances for a given partition and centroid set.
pub fn objective(features: &Tensor, centroids: &Tensor, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(features.row(i), centroids.row(c)))
        .sum()
}

/// Number of candidates drawn per greedy seeding step.
pub fn greedy_trials(k: usize) -> usize {
    2 + (k as f64).ln().floor() as usize
}

/// Index `i` with probability proportional to `weights[i]` (all weights >= 0,
/// positive total).
fn draw_weighted(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    let target = rng.uniform(0.0, total);
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if w > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave the target past the last positive entry
    weights.iter().rposition(|&w| w > 0.0).unwrap()
}

/// k-means++ seeding: first center uniform, later ones drawn proportional to
/// the squared distance to the nearest chosen center. Each step draws
/// `trials` candidates and keeps the one giving the lowest potential.
pub fn seed_plus_plus(features: &Tensor, k: usize, trials: usize, rng: &mut Rng) -> Tensor {
    let n = features.rows();
    let trials = trials.max(1);
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            // every sample coincides with a chosen center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            chosen.push(free[rng.below(free.len())]);
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = draw_weighted(&dist, total, rng);
            let updated: Vec<f64> = dist
                .iter()
                .enumerate()
                .map(|(i, &d)| d.min(sq_dist(features.row(i), features.row(cand))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, next, updated) = best.unwrap();
        chosen.push(next);
        dist = updated;
    }
    features.select_rows(&chosen)
}

/// Lloyd iterations from `init` until the assignment stops changing or
/// `max_iter` assignment steps have run. Empty clusters are moved onto the
/// sample farthest from its current centroid.
pub fn lloyd(features: &Tensor, init: Tensor, max_iter: usize) -> Clustering {
    let (n, d) = (features.rows(), features.cols());
    let k = init.rows();
    let mut centroids = init;
    let (mut assignment, dists) = assign(features, &centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 1;
    while iterations < max_iter {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        let mut next = sums;
        for c in 0..k {
            if counts[c] > 0 {
                next[c * d..(c + 1) * d]
                    .iter_mut()
                    .for_each(|v| *v /= counts[c] as f64);
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let (_, current) = assign(features, &centroids);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| current[b].total_cmp(&current[a]).then(a.cmp(&b)));
            for (c, &i) in empty.iter().zip(&order) {
                next[c * d..(c + 1) * d].copy_from_slice(features.row(i));
            }
        }
        centroids = Tensor::from_parts(vec![k, d], next);
        let (new_assignment, dists) = assign(features, &centroids);
        trace.push(dists.iter().sum());
        iterations += 1;
        let converged = new_assignment == assignment;
        assignment = new_assignment;
        if converged {
            break;
        }
    }
    let objective = *trace.last().unwrap();
    Clustering {
        centroids,
        assignment,
        objective,
        iterations,
        trace,
    }
}

/// Best of `cfg.restarts` seeded Lloyd runs (lowest objective, ties to the
/// earliest restart).
pub fn kmeans(features: &Tensor, k: usize, rng: &mut Rng, cfg: &KMeansConfig) -> Result<Clustering> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(Error::Capacity(format!(
            "k-means with k = {k} needs at least k samples, got {n}"
        )));
    }
    if cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::invalid("k-means needs restarts >= 1 and max_iter >= 1"));
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..cfg.restarts {
        let trials = if cfg.greedy_seeding { greedy_trials(k) } else { 1 };
        let init = seed_plus_plus(features, k, trials, rng);
        let run = lloyd(features, init, cfg.max_iter);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}
