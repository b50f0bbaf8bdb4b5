//! Dense tensors, a reverse-mode tape and a finite-difference oracle.

mod graph;
mod rng;
mod tensor;

pub use graph::{Graph, Term, Var};
pub use rng::Rng;
pub use tensor::Tensor;

/// Rows with a smaller Euclidean norm are rejected by normalization.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Central-difference gradient of `f` at `p`, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, p: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = p.clone();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

/// Largest coordinatewise relative error, with `floor` guarding tiny magnitudes.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
