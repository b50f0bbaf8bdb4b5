//! MLP encoder `f` and projection head `phi`, with embeddings `z = phi(f(x))`.
//!
//! Layers compute `x W + b` with `W` stored `in x out`. A relu sits between
//! consecutive layers inside the encoder and inside the projection head; the
//! encoder output (the clustering feature) and the final projection output
//! are linear.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [1, weight.cols()] {
            return Err(Error::Dimension {
                op: "linear",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], data),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Query/key maps of the learned positiveness attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub query: Tensor,
    pub key: Tensor,
}

/// Meta-parameters: encoder layers, projection layers and optional attention maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Linear>,
    pub projection: Vec<Linear>,
    pub attention: Option<Attention>,
}

/// Parameters produced by inner adaptation; same layout as the [`ModelParams`]
/// they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedParams(ModelParams);

impl AdaptedParams {
    pub fn from_params(params: ModelParams) -> Self {
        Self(params)
    }

    pub fn params(&self) -> &ModelParams {
        &self.0
    }

    pub fn into_params(self) -> ModelParams {
        self.0
    }
}

/// Anything that owns a [`ModelParams`] and can be rebuilt from one.
pub trait ParamSet: Sized {
    fn params(&self) -> &ModelParams;
    fn rebuild(params: ModelParams) -> Self;
}

impl ParamSet for ModelParams {
    fn params(&self) -> &ModelParams {
        self
    }
    fn rebuild(params: ModelParams) -> Self {
        params
    }
}

impl ParamSet for AdaptedParams {
    fn params(&self) -> &ModelParams {
        &self.0
    }
    fn rebuild(params: ModelParams) -> Self {
        AdaptedParams(params)
    }
}

fn check_widths(encoder: &[usize], projection: &[usize]) -> Result<()> {
    if encoder.len() < 2 {
        return Err(Error::invalid(
            "encoder widths need an input and at least one output width",
        ));
    }
    if projection.is_empty() {
        return Err(Error::invalid("projection widths must not be empty"));
    }
    if projection[0] != *encoder.last().unwrap() {
        return Err(Error::invalid(format!(
            "projection input width {} does not match encoder output width {}",
            projection[0],
            encoder.last().unwrap()
        )));
    }
    if encoder.iter().chain(projection).any(|&w| w == 0) {
        return Err(Error::invalid("layer widths must be positive"));
    }
    Ok(())
}

impl ModelParams {
    /// Xavier-initialized network. `encoder` lists widths from the input
    /// dimension to the feature dimension; `projection` starts at the feature
    /// dimension (a single entry means no projection layers).
    pub fn init(encoder: &[usize], projection: &[usize], rng: &mut Rng) -> Result<Self> {
        check_widths(encoder, projection)?;
        let encoder = encoder
            .windows(2)
            .map(|w| Linear::xavier(w[0], w[1], rng))
            .collect();
        let projection = projection
            .windows(2)
            .map(|w| Linear::xavier(w[0], w[1], rng))
            .collect();
        Ok(Self {
            encoder,
            projection,
            attention: None,
        })
    }

    /// Assembles a network from explicit layers, validating that they compose.
    pub fn from_layers(encoder: Vec<Linear>, projection: Vec<Linear>) -> Result<Self> {
        let params = Self {
            encoder,
            projection,
            attention: None,
        };
        params.validate()?;
        Ok(params)
    }

    /// Adds identity-initialized query/key maps for learned positiveness.
    pub fn with_attention(mut self) -> Self {
        let d = self.embedding_dim();
        self.attention = Some(Attention {
            query: Tensor::identity(d),
            key: Tensor::identity(d),
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::invalid("encoder has no layers"));
        }
        let layers: Vec<&Linear> = self.encoder.iter().chain(&self.projection).collect();
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension {
                    op: "compose layers",
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                });
            }
        }
        for l in &layers {
            if l.bias.shape() != [1, l.out_dim()] {
                return Err(Error::Dimension {
                    op: "layer bias",
                    left: l.weight.shape().to_vec(),
                    right: l.bias.shape().to_vec(),
                });
            }
        }
        if let Some(att) = &self.attention {
            let d = self.embedding_dim();
            if att.query.shape() != [d, d] || att.key.shape() != [d, d] {
                return Err(Error::Dimension {
                    op: "attention",
                    left: att.query.shape().to_vec(),
                    right: att.key.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.last().map_or(0, Linear::out_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection
            .last()
            .map_or_else(|| self.feature_dim(), Linear::out_dim)
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.encoder.iter().map(Linear::out_dim))
            .collect()
    }

    pub fn projection_widths(&self) -> Vec<usize> {
        std::iter::once(self.feature_dim())
            .chain(self.projection.iter().map(Linear::out_dim))
            .collect()
    }

    /// All tensors in layer order: encoder (weight, bias)..., projection
    /// (weight, bias)..., then attention query and key.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.projection) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if let Some(att) = &self.attention {
            out.push(&att.query);
            out.push(&att.key);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut().chain(self.projection.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(att) = &mut self.attention {
            out.push(&mut att.query);
            out.push(&mut att.key);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same structure with every tensor replaced by `f(tensor)`.
    pub fn map_tensors(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = f(t);
        }
        out
    }

    /// Flat copy of every parameter in [`ModelParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ModelParams::to_flat`] for a vector of matching length.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Dimension {
                op: "with_flat",
                left: vec![self.num_parameters()],
                right: vec![flat.len()],
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Records every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let bind_layers = |g: &mut Graph, layers: &[Linear]| {
            layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect()
        };
        let encoder = bind_layers(g, &self.encoder);
        let projection = bind_layers(g, &self.projection);
        let attention = self
            .attention
            .as_ref()
            .map(|a| (g.param(a.query.clone()), g.param(a.key.clone())));
        BoundParams {
            encoder,
            projection,
            attention,
        }
    }

    /// Unit-norm embeddings `phi(f(x))`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let z = bound.embed(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    /// Unit-norm encoder features `f(x)`, the clustering input.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let h = bound.features(&mut g, xv)?;
        Ok(g.value(h).clone())
    }

    /// Signs of every pre-activation that feeds a relu, for detecting kinks.
    pub fn activation_pattern(&self, x: &Tensor) -> Result<Vec<bool>> {
        Ok(self
            .preactivations(x)?
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect())
    }

    /// Smallest absolute pre-activation feeding a relu.
    pub fn min_preactivation_margin(&self, x: &Tensor) -> Result<f64> {
        Ok(self
            .preactivations(x)?
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    fn preactivations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        let mut h = x.clone();
        for stack in [&self.encoder, &self.projection] {
            for (i, l) in stack.iter().enumerate() {
                if i > 0 {
                    out.push(h.clone());
                    h = h.map(|v| v.max(0.0));
                }
                h = linear_forward(&h, l)?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = Checkpoint {
            version: CHECKPOINT_VERSION,
            encoder_widths: self.encoder_widths(),
            projection_widths: self.projection_widths(),
            params: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: file.version.to_string(),
                expected: CHECKPOINT_VERSION,
            });
        }
        file.params.validate()?;
        if file.params.encoder_widths() != file.encoder_widths
            || file.params.projection_widths() != file.projection_widths
        {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "declared widths disagree with stored tensors".into(),
            });
        }
        Ok(file.params)
    }
}

/// On-disk checkpoint: JSON object with `version`, `encoder_widths`,
/// `projection_widths` and the parameter tensors in layer order.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    encoder_widths: Vec<usize>,
    projection_widths: Vec<usize>,
    params: ModelParams,
}

fn linear_forward(x: &Tensor, l: &Linear) -> Result<Tensor> {
    let mut out = x.matmul(&l.weight)?;
    let n = out.cols();
    let bias = l.bias.data();
    out.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v += bias[i % n]);
    Ok(out)
}

/// Graph handles for every tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    encoder: Vec<(Var, Var)>,
    projection: Vec<(Var, Var)>,
    attention: Option<(Var, Var)>,
}

impl BoundParams {
    fn apply(g: &mut Graph, x: Var, layer: (Var, Var)) -> Result<Var> {
        let m = g.matmul(x, layer.0)?;
        g.add_row_bias(m, layer.1)
    }

    fn check_input(g: &Graph, x: Var, weight: Var) -> Result<()> {
        let (xs, ws) = (g.value(x).shape(), g.value(weight).shape());
        if xs.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Dimension {
                op: "model input",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        Ok(())
    }

    /// Encoder output before normalization.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Self::check_input(g, x, self.encoder[0].0)?;
        let mut h = x;
        for (i, &layer) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = Self::apply(g, h, layer)?;
        }
        Ok(h)
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.encode(g, x)?;
        g.l2_normalize_rows(h)
    }

    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = self.encode(g, x)?;
        for (i, &layer) in self.projection.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = Self::apply(g, h, layer)?;
        }
        g.l2_normalize_rows(h)
    }

    pub fn attention(&self) -> Option<(Var, Var)> {
        self.attention
    }

    /// Gradients of every bound tensor after `g.backward`, in parameter layout.
    pub fn gradients(&self, g: &Graph, like: &ModelParams) -> Result<ModelParams> {
        let fetch = |v: Var| {
            g.grad(v)
                .cloned()
                .ok_or_else(|| Error::invalid("gradient requested before backward"))
        };
        let layers = |bound: &[(Var, Var)]| -> Result<Vec<Linear>> {
            bound
                .iter()
                .map(|&(w, b)| {
                    Ok(Linear {
                        weight: fetch(w)?,
                        bias: fetch(b)?,
                    })
                })
                .collect()
        };
        let grads = ModelParams {
            encoder: layers(&self.encoder)?,
            projection: layers(&self.projection)?,
            attention: match self.attention {
                Some((q, k)) => Some(Attention {
                    query: fetch(q)?,
                    key: fetch(k)?,
                }),
                None => None,
            },
        };
        if grads.encoder_widths() != like.encoder_widths() {
            return Err(Error::invalid("gradients bound from a different model"));
        }
        Ok(grads)
    }
}

/// Functional gradient step `p - lr * g` on every tensor; `params` is untouched.
pub fn sgd_step<P: ParamSet>(params: &P, grads: &ModelParams, lr: f64) -> Result<P> {
    let p = params.params();
    let (pt, gt) = (p.tensors(), grads.tensors());
    if pt.len() != gt.len() {
        return Err(Error::Dimension {
            op: "sgd_step",
            left: vec![pt.len()],
            right: vec![gt.len()],
        });
    }
    for (a, b) in pt.iter().zip(&gt) {
        a.same_shape(b, "sgd_step")?;
    }
    let mut idx = 0;
    let updated = p.map_tensors(|t| {
        let out = t.add_scaled(gt[idx], -lr).expect("shapes checked");
        idx += 1;
        out
    });
    Ok(P::rebuild(updated))
}
