//! k-means label assignment and clustering accuracy under optimal matching.

mod hungarian;
mod kmeans;
mod metrics;

pub use hungarian::{hungarian, Assignment};
pub use kmeans::{assign, greedy_trials, kmeans, lloyd, objective, seed_plus_plus, Clustering, KMeansConfig};
pub use metrics::{
    clustering_acc, confusion_matrix, split_acc, AccMatch, ConfusionMatrix, SessionMetrics,
};
