use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hungarian::hungarian;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Result of matching predicted clusters to classes.
#[derive(Debug, Clone, PartialEq)]
pub struct AccMatch {
    pub acc: f64,
    /// Cluster id to class id, for every cluster that got a real class.
    pub mapping: BTreeMap<usize, usize>,
    y_true: Vec<usize>,
    correct: Vec<bool>,
}

impl AccMatch {
    pub fn n(&self) -> usize {
        self.y_true.len()
    }

    pub fn correct_count(&self) -> usize {
        self.correct.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub acc_all: f64,
    pub acc_old: f64,
    /// Reported as 1.0 when `n_new == 0`.
    pub acc_new: f64,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
    /// Matched `(cluster, class)` pairs.
    pub permutation: Vec<(usize, usize)>,
}

fn dense_ids(values: &[usize]) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let ids: Vec<usize> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let index = ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    (ids, index)
}

/// Accuracy under the best one-to-one relabeling of predicted clusters.
pub fn clustering_acc(y_true: &[usize], y_pred: &[usize]) -> Result<AccMatch> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "clustering_acc: {} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::invalid("clustering_acc: empty input"));
    }
    let (classes, class_idx) = dense_ids(y_true);
    let (clusters, cluster_idx) = dense_ids(y_pred);
    let dim = classes.len().max(clusters.len());

    // negated contingency counts, zero-padded to square
    let mut cost = vec![0.0; dim * dim];
    for (t, p) in y_true.iter().zip(y_pred) {
        cost[cluster_idx[p] * dim + class_idx[t]] -= 1.0;
    }
    let assignment = hungarian(&Tensor::from_parts(vec![dim, dim], cost))?;

    let mapping: BTreeMap<usize, usize> = assignment
        .permutation
        .iter()
        .enumerate()
        .filter(|&(c, &t)| c < clusters.len() && t < classes.len())
        .map(|(c, &t)| (clusters[c], classes[t]))
        .collect();
    let correct: Vec<bool> = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| mapping.get(p) == Some(t))
        .collect();
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(AccMatch {
        acc: hits as f64 / y_true.len() as f64,
        mapping,
        y_true: y_true.to_vec(),
        correct,
    })
}

/// Old/New breakdown using the permutation matched on all samples.
pub fn split_acc(
    m: &AccMatch,
    old_classes: &BTreeSet<usize>,
    new_classes: &BTreeSet<usize>,
) -> Result<SessionMetrics> {
    if let Some(c) = old_classes.intersection(new_classes).next() {
        return Err(Error::invalid(format!(
            "class {c} is declared both old and new"
        )));
    }
    let (mut n_old, mut n_new, mut hit_old, mut hit_new) = (0, 0, 0, 0);
    for (t, &ok) in m.y_true.iter().zip(&m.correct) {
        if old_classes.contains(t) {
            n_old += 1;
            hit_old += usize::from(ok);
        } else if new_classes.contains(t) {
            n_new += 1;
            hit_new += usize::from(ok);
        } else {
            return Err(Error::invalid(format!(
                "class {t} is neither old nor new"
            )));
        }
    }
    let ratio = |hit: usize, n: usize| if n == 0 { 1.0 } else { hit as f64 / n as f64 };
    Ok(SessionMetrics {
        acc_all: m.acc,
        acc_old: ratio(hit_old, n_old),
        acc_new: ratio(hit_new, n_new),
        n_all: m.n(),
        n_old,
        n_new,
        permutation: m.mapping.iter().map(|(&c, &t)| (c, t)).collect(),
    })
}

/// Counts with rows = true class and columns = the class each predicted
/// cluster was matched to (unmatched clusters land in a trailing column).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
    pub unmatched: Vec<usize>,
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], m: &AccMatch) -> ConfusionMatrix {
    let (classes, index) = dense_ids(y_true);
    let k = classes.len();
    let mut counts = vec![vec![0; k]; k];
    let mut unmatched = vec![0; k];
    for (t, p) in y_true.iter().zip(y_pred) {
        match m.mapping.get(p).and_then(|c| index.get(c)) {
            Some(&col) => counts[index[t]][col] += 1,
            None => unmatched[index[t]] += 1,
        }
    }
    ConfusionMatrix {
        classes,
        counts,
        unmatched,
    }
}

impl ConfusionMatrix {
    /// CSV with header `true_class,<class ids...>,unmatched`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        writeln!(out, "true_class,{},unmatched", header.join(",")).unwrap();
        for (i, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(out, "{},{},{}", self.classes[i], cells.join(","), self.unmatched[i]).unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
