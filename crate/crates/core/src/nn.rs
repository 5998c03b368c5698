//! Fully-connected networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat vector: for every fully-connected layer the
//! `in_dim × out_dim` weight matrix (row-major, so a layer computes `X·W + b`)
//! followed by the `out_dim` biases; for every group-norm layer the per-feature
//! scale followed by the per-feature shift.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gemm, DenseMatrix, MatRef, RandomStream};

/// Variance floor inside group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-8;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    FullyConnected { in_dim: usize, out_dim: usize },
    Relu { dim: usize },
    SigmoidHead { dim: usize },
    TanhHead { dim: usize },
    GroupNorm { dim: usize, groups: usize },
    Dropout { dim: usize, drop_prob: f64 },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected { in_dim, .. } => in_dim,
            LayerSpec::Relu { dim }
            | LayerSpec::SigmoidHead { dim }
            | LayerSpec::TanhHead { dim }
            | LayerSpec::GroupNorm { dim, .. }
            | LayerSpec::Dropout { dim, .. } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected { out_dim, .. } => out_dim,
            _ => self.in_dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerSpec::GroupNorm { dim, .. } => 2 * dim,
            _ => 0,
        }
    }

    fn is_head(&self) -> bool {
        matches!(self, LayerSpec::SigmoidHead { .. } | LayerSpec::TanhHead { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::FullyConnected { in_dim, out_dim } if in_dim == 0 || out_dim == 0 => Err(
                Error::Usage(format!("fully-connected layer {in_dim}->{out_dim} has a zero dimension")),
            ),
            LayerSpec::GroupNorm { dim, groups } if groups == 0 || dim % groups != 0 => Err(
                Error::Usage(format!("group-norm: {groups} groups do not divide width {dim}")),
            ),
            LayerSpec::Dropout { drop_prob, .. } if !(0.0..1.0).contains(&drop_prob) => {
                Err(Error::Usage(format!("dropout probability {drop_prob} outside [0, 1)")))
            }
            _ if self.in_dim() == 0 => Err(Error::Usage("layer width must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Fully-connected hidden stack `dims[0] → … → dims[last]` with ReLU between
/// layers and no activation after the last one.
pub fn relu_stack(dims: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        layers.push(LayerSpec::FullyConnected {
            in_dim: w[0],
            out_dim: w[1],
        });
        if i + 2 < dims.len() {
            layers.push(LayerSpec::Relu { dim: w[1] });
        }
    }
    layers
}

/// Ratio-model layout: every hidden block is `fc → group-norm → ReLU → dropout`,
/// followed by `fc → 1`. Pair with `final_nonneg = true`.
pub fn ratio_mlp_layers(input_dim: usize, widths: &[usize], groups: usize, drop_prob: f64) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &w in widths {
        layers.push(LayerSpec::FullyConnected {
            in_dim: prev,
            out_dim: w,
        });
        if groups > 0 {
            layers.push(LayerSpec::GroupNorm { dim: w, groups });
        }
        layers.push(LayerSpec::Relu { dim: w });
        if drop_prob > 0.0 {
            layers.push(LayerSpec::Dropout { dim: w, drop_prob });
        }
        prev = w;
    }
    layers.push(LayerSpec::FullyConnected {
        in_dim: prev,
        out_dim: 1,
    });
    layers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Saved {
    Fc { input: DenseMatrix },
    Mask { mask: Vec<f64> },
    Sigmoid { output: Vec<f64> },
    Tanh { output: Vec<f64> },
    GroupNorm { normalized: Vec<f64>, inv_std: Vec<f64> },
}

/// State recorded by [`MlpModel::forward`] for a later [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    mode: Mode,
    rows: usize,
    layers_run: usize,
    saved: Vec<Saved>,
    final_mask: Option<Vec<f64>>,
}

/// Gradients returned by backpropagation.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Aligned with [`MlpModel::params`].
    pub params: Vec<f64>,
    /// Gradient with respect to the network input.
    pub input: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    final_nonneg: bool,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    final_nonneg: bool,
    generation: u64,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.final_nonneg == other.final_nonneg
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl MlpModel {
    /// Randomly initialized model: weights and biases uniform in `±1/√fan_in`,
    /// group-norm scale one and shift zero.
    pub fn new(layers: Vec<LayerSpec>, final_nonneg: bool, rng: &mut RandomStream) -> Result<Self> {
        let mut model = Self::zeros(layers, final_nonneg)?;
        let mut offset = 0;
        for layer in &model.layers {
            match *layer {
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    let bound = 1.0 / (in_dim as f64).sqrt();
                    for w in &mut model.params[offset..offset + (in_dim + 1) * out_dim] {
                        *w = bound * (2.0 * rng.uniform() - 1.0);
                    }
                }
                LayerSpec::GroupNorm { dim, .. } => {
                    model.params[offset..offset + dim].fill(1.0);
                }
                _ => {}
            }
            offset += layer.param_count();
        }
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeros(layers: Vec<LayerSpec>, final_nonneg: bool) -> Result<Self> {
        let n = layers.iter().map(LayerSpec::param_count).sum();
        Self::from_parts(layers, vec![0.0; n], final_nonneg)
    }

    pub fn from_parts(layers: Vec<LayerSpec>, params: Vec<f64>, final_nonneg: bool) -> Result<Self> {
        validate_layers(&layers)?;
        let expected: usize = layers.iter().map(LayerSpec::param_count).sum();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "architecture needs {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self {
            layers,
            params,
            final_nonneg,
            generation: next_generation(),
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn final_nonneg(&self) -> bool {
        self.final_nonneg
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn forward(&self, batch: &DenseMatrix, mode: Mode, rng: &mut RandomStream) -> Result<(DenseMatrix, ForwardCache)> {
        self.run(batch, mode, rng, false)
    }

    /// Like [`forward`](Self::forward) but stops before a trailing sigmoid or
    /// tanh head and skips the terminal ReLU, exposing the pre-activation.
    pub fn forward_logits(&self, batch: &DenseMatrix, mode: Mode, rng: &mut RandomStream) -> Result<(DenseMatrix, ForwardCache)> {
        self.run(batch, mode, rng, true)
    }

    /// Eval-mode output.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        // eval mode never touches the stream
        let mut rng = RandomStream::new(0, 0);
        self.run(batch, Mode::Eval, &mut rng, false).map(|(out, _)| out)
    }

    /// Eval-mode pre-activation of the head.
    pub fn predict_logits(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let mut rng = RandomStream::new(0, 0);
        self.run(batch, Mode::Eval, &mut rng, true).map(|(out, _)| out)
    }

    fn run(&self, batch: &DenseMatrix, mode: Mode, rng: &mut RandomStream, logits: bool) -> Result<(DenseMatrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = batch.rows();
        let layers_run = if logits && self.layers.last().is_some_and(LayerSpec::is_head) {
            self.layers.len() - 1
        } else {
            self.layers.len()
        };
        let mut saved = Vec::with_capacity(layers_run);
        let mut x = batch.clone();
        let mut offset = 0;
        for layer in &self.layers[..layers_run] {
            let np = layer.param_count();
            let p = &self.params[offset..offset + np];
            offset += np;
            match *layer {
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    let (w, b) = p.split_at(in_dim * out_dim);
                    let mut out = DenseMatrix::from_raw(n, out_dim, b.repeat(n));
                    gemm(1.0, MatRef::new(&x), MatRef::from_slice(w, in_dim, out_dim), 1.0, &mut out);
                    saved.push(Saved::Fc { input: x });
                    x = out;
                }
                LayerSpec::Relu { .. } => {
                    let mask: Vec<f64> = x.as_slice().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                    x.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                    saved.push(Saved::Mask { mask });
                }
                LayerSpec::SigmoidHead { .. } => {
                    x.as_mut_slice().iter_mut().for_each(|v| *v = crate::numeric::sigmoid(*v));
                    saved.push(Saved::Sigmoid { output: x.as_slice().to_vec() });
                }
                LayerSpec::TanhHead { .. } => {
                    x.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
                    saved.push(Saved::Tanh { output: x.as_slice().to_vec() });
                }
                LayerSpec::GroupNorm { dim, groups } => {
                    let (gamma, beta) = p.split_at(dim);
                    let size = dim / groups;
                    let mut normalized = vec![0.0; n * dim];
                    let mut inv_std = vec![0.0; n * groups];
                    let data = x.as_mut_slice();
                    for r in 0..n {
                        for g in 0..groups {
                            let start = r * dim + g * size;
                            let seg = &mut data[start..start + size];
                            let mu = seg.iter().sum::<f64>() / size as f64;
                            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / size as f64;
                            let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                            inv_std[r * groups + g] = inv;
                            for (j, v) in seg.iter_mut().enumerate() {
                                let xh = (*v - mu) * inv;
                                normalized[start + j] = xh;
                                let f = g * size + j;
                                *v = gamma[f] * xh + beta[f];
                            }
                        }
                    }
                    saved.push(Saved::GroupNorm { normalized, inv_std });
                }
                LayerSpec::Dropout { drop_prob, .. } => {
                    let mask: Vec<f64> = match mode {
                        Mode::Eval => vec![1.0; x.as_slice().len()],
                        Mode::Train => {
                            let keep = 1.0 / (1.0 - drop_prob);
                            (0..x.as_slice().len())
                                .map(|_| if rng.uniform() < drop_prob { 0.0 } else { keep })
                                .collect()
                        }
                    };
                    x.as_mut_slice().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    saved.push(Saved::Mask { mask });
                }
            }
        }
        let final_mask = if self.final_nonneg && !logits {
            let mask = x.as_slice().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            x.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            Some(mask)
        } else {
            None
        };
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network forward pass"));
        }
        Ok((
            x,
            ForwardCache {
                generation: self.generation,
                mode,
                rows: n,
                layers_run,
                saved,
                final_mask,
            },
        ))
    }

    /// Backpropagates `out_grads` (∂loss/∂output) through the pass recorded in
    /// `cache`.
    pub fn backward(&self, cache: &ForwardCache, out_grads: &DenseMatrix) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Usage("forward cache is stale: parameters changed since the forward pass".into()));
        }
        if cache.mode != Mode::Train {
            return Err(Error::Usage("backward needs a train-mode forward cache".into()));
        }
        let out_dim = self.layers[cache.layers_run - 1].out_dim();
        if out_grads.rows() != cache.rows || out_grads.cols() != out_dim {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, forward produced {}x{}",
                out_grads.rows(),
                out_grads.cols(),
                cache.rows,
                out_dim
            )));
        }
        let n = cache.rows;
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.param_count();
        }
        let mut g = out_grads.clone();
        if let Some(mask) = &cache.final_mask {
            g.as_mut_slice().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        for (idx, saved) in cache.saved.iter().enumerate().rev() {
            let layer = &self.layers[idx];
            let off = offsets[idx];
            match (layer, saved) {
                (&LayerSpec::FullyConnected { in_dim, out_dim }, Saved::Fc { input }) => {
                    let w = &self.params[off..off + in_dim * out_dim];
                    let (gw, gb) = grads[off..off + in_dim * out_dim + out_dim].split_at_mut(in_dim * out_dim);
                    let mut dw = DenseMatrix::zeros(in_dim, out_dim);
                    gemm(1.0, MatRef::new(input).t(), MatRef::new(&g), 0.0, &mut dw);
                    gw.copy_from_slice(dw.as_slice());
                    for row in g.row_iter() {
                        gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                    let mut dx = DenseMatrix::zeros(n, in_dim);
                    gemm(1.0, MatRef::new(&g), MatRef::from_slice(w, in_dim, out_dim).t(), 0.0, &mut dx);
                    g = dx;
                }
                (_, Saved::Mask { mask }) => {
                    g.as_mut_slice().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                }
                (_, Saved::Sigmoid { output }) => {
                    g.as_mut_slice().iter_mut().zip(output).for_each(|(v, s)| *v *= s * (1.0 - s));
                }
                (_, Saved::Tanh { output }) => {
                    g.as_mut_slice().iter_mut().zip(output).for_each(|(v, t)| *v *= 1.0 - t * t);
                }
                (&LayerSpec::GroupNorm { dim, groups }, Saved::GroupNorm { normalized, inv_std }) => {
                    let size = dim / groups;
                    let gamma = &self.params[off..off + dim];
                    let (ggamma, gbeta) = grads[off..off + 2 * dim].split_at_mut(dim);
                    let data = g.as_mut_slice();
                    let mut dxhat = vec![0.0; size];
                    for r in 0..n {
                        for grp in 0..groups {
                            let start = r * dim + grp * size;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..size {
                                let f = grp * size + j;
                                let dy = data[start + j];
                                let xh = normalized[start + j];
                                ggamma[f] += dy * xh;
                                gbeta[f] += dy;
                                dxhat[j] = dy * gamma[f];
                                sum_d += dxhat[j];
                                sum_dx += dxhat[j] * xh;
                            }
                            let inv = inv_std[r * groups + grp];
                            let m = size as f64;
                            for j in 0..size {
                                let xh = normalized[start + j];
                                data[start + j] = inv / m * (m * dxhat[j] - sum_d - xh * sum_dx);
                            }
                        }
                    }
                }
                _ => unreachable!("cache entry does not match layer {idx}"),
            }
        }
        Ok(Gradients { params: grads, input: g })
    }

    /// Applies one Adam update with `grads`.
    pub fn adam_step(&mut self, state: &mut AdamState, grads: &[f64]) -> Result<()> {
        state.step(&mut self.params, grads)?;
        self.generation = next_generation();
        Ok(())
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string(&self.checkpoint_value()).expect("checkpoint serializes")
    }

    pub(crate) fn checkpoint_value(&self) -> serde_json::Value {
        serde_json::to_value(CheckpointFile {
            format_version: 1,
            layers: self.layers.clone(),
            params: self.params.clone(),
            final_nonneg: self.final_nonneg,
        })
        .expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        Self::from_checkpoint(file)
    }

    pub(crate) fn from_checkpoint_value(value: serde_json::Value) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::Parse {
            offset: 0,
            message: e.to_string(),
        })?;
        Self::from_checkpoint(file)
    }

    fn from_checkpoint(file: CheckpointFile) -> Result<Self> {
        if file.format_version != 1 {
            return Err(Error::Usage(format!(
                "unsupported checkpoint format_version {}",
                file.format_version
            )));
        }
        Self::from_parts(file.layers, file.params, file.final_nonneg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Usage("model has no layers".into()));
    }
    for l in layers {
        l.validate()?;
    }
    for (i, w) in layers.windows(2).enumerate() {
        if w[0].out_dim() != w[1].in_dim() {
            return Err(Error::Shape(format!(
                "layer {i} emits {} features but layer {} expects {}",
                w[0].out_dim(),
                i + 1,
                w[1].in_dim()
            )));
        }
    }
    Ok(())
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(in_dim: usize, out_dim: usize) -> LayerSpec {
        LayerSpec::FullyConnected { in_dim, out_dim }
    }

    #[test]
    fn zero_network_with_final_relu_outputs_zero() {
        let model = MlpModel::zeros(ratio_mlp_layers(2, &[8, 4], 4, 0.2), true).unwrap();
        let mut rng = RandomStream::new(0, 0);
        let x = rng.normal_matrix(5, 2, 0.0, 1.0);
        let out = model.predict(&x).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_layer_by_hand() {
        let model = MlpModel::from_parts(vec![fc(1, 1)], vec![2.0, 1.0], false).unwrap();
        let out = model.predict(&DenseMatrix::from_rows(&[[3.0]]).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[7.0]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = RandomStream::new(4, 0);
        let model = MlpModel::new(ratio_mlp_layers(2, &[8, 8], 4, 0.5), true, &mut rng).unwrap();
        let x = rng.normal_matrix(16, 2, 0.0, 1.0);
        let a = model.forward(&x, Mode::Eval, &mut RandomStream::new(1, 0)).unwrap().0;
        let b = model.forward(&x, Mode::Eval, &mut RandomStream::new(2, 0)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = MlpModel::zeros(vec![fc(3, 1)], false).unwrap();
        assert!(matches!(model.predict(&DenseMatrix::zeros(2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_validation() {
        assert!(MlpModel::zeros(vec![], false).is_err());
        assert!(MlpModel::zeros(vec![fc(2, 3), fc(4, 1)], false).is_err());
        assert!(MlpModel::zeros(vec![fc(2, 6), LayerSpec::GroupNorm { dim: 6, groups: 4 }], false).is_err());
        assert!(MlpModel::zeros(vec![fc(2, 6), LayerSpec::Dropout { dim: 6, drop_prob: 1.0 }], false).is_err());
        assert!(MlpModel::zeros(vec![fc(0, 6)], false).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut rng = RandomStream::new(8, 0);
        let model = MlpModel::new(ratio_mlp_layers(3, &[8], 4, 0.0), false, &mut rng).unwrap();
        let x = rng.normal_matrix(4, 3, 0.0, 1.0);
        let (_, cache) = model.forward(&x, Mode::Train, &mut rng).unwrap();
        let g = model.backward(&cache, &DenseMatrix::zeros(4, 1)).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let model = MlpModel::from_parts(vec![fc(3, 2)], vec![0.5; 8], false).unwrap();
        let x = DenseMatrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        let mut rng = RandomStream::new(0, 0);
        let (_, cache) = model.forward(&x, Mode::Train, &mut rng).unwrap();
        let og = DenseMatrix::from_rows(&[[0.25, -4.0]]).unwrap();
        let g = model.backward(&cache, &og).unwrap();
        let expected_w = [0.25, -4.0, -0.5, 8.0, 0.75, -12.0];
        assert_eq!(&g.params[..6], &expected_w);
        assert_eq!(&g.params[6..], &[0.25, -4.0]);
    }

    #[test]
    fn stale_cache_and_eval_cache_are_rejected() {
        let mut rng = RandomStream::new(1, 0);
        let mut model = MlpModel::new(relu_stack(&[2, 4, 1]), false, &mut rng).unwrap();
        let x = rng.normal_matrix(3, 2, 0.0, 1.0);
        let (_, eval_cache) = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert!(matches!(model.backward(&eval_cache, &DenseMatrix::zeros(3, 1)), Err(Error::Usage(_))));
        let (_, cache) = model.forward(&x, Mode::Train, &mut rng).unwrap();
        model.params_mut()[0] += 1.0;
        assert!(matches!(model.backward(&cache, &DenseMatrix::zeros(3, 1)), Err(Error::Usage(_))));
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let dim = 16;
        let groups = 4;
        let layers = vec![LayerSpec::GroupNorm { dim, groups }];
        let mut model = MlpModel::zeros(layers, false).unwrap();
        model.params_mut()[..dim].fill(1.0);
        let mut rng = RandomStream::new(12, 0);
        let x = rng.normal_matrix(32, dim, 3.0, 2.5);
        let out = model.predict(&x).unwrap();
        let size = dim / groups;
        for r in 0..32 {
            for g in 0..groups {
                let seg = &out.row(r)[g * size..(g + 1) * size];
                let mu = seg.iter().sum::<f64>() / size as f64;
                let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / size as f64;
                assert!(mu.abs() < 1e-6, "mean {mu}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn dropout_rate_and_eval_identity() {
        let p = 0.3;
        let layers = vec![LayerSpec::Dropout { dim: 100, drop_prob: p }];
        let model = MlpModel::zeros(layers, false).unwrap();
        let x = DenseMatrix::from_vec(1000, 100, vec![1.0; 100_000]).unwrap();
        let mut rng = RandomStream::new(5, 0);
        let (out, _) = model.forward(&x, Mode::Train, &mut rng).unwrap();
        let zeros = out.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / 100_000.0;
        assert!((zeros - p).abs() < 0.02);
        let kept = out.as_slice().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / (1.0 - p)).abs() < 1e-15);
        assert_eq!(model.predict(&x).unwrap(), x);
    }

    #[test]
    fn final_nonneg_never_negative() {
        let mut rng = RandomStream::new(21, 0);
        let model = MlpModel::new(relu_stack(&[2, 16, 16, 1]), true, &mut rng).unwrap();
        let x = rng.normal_matrix(100_000, 2, 0.0, 3.0);
        assert!(model.predict(&x).unwrap().as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_first_step_matches_reference() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = [0.3, -1e-3, 0.0];
        let mut state = AdamState::new(3, 0.01);
        state.step(&mut params, &grads).unwrap();
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip(grads)
            .map(|(p, g)| p - 0.01 * g / (g.abs() + 1e-8))
            .collect();
        for (p, e) in params.iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_with_zero_gradient_leaves_params() {
        let mut params = vec![1.0, 2.0];
        let mut state = AdamState::new(2, 0.1);
        state.step(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, 2.0]);
        assert!(state.step(&mut params, &[0.0]).is_err());
    }

    #[test]
    fn adam_trajectories_are_reproducible() {
        let run = || {
            let mut params = vec![0.1, 0.2, 0.3];
            let mut state = AdamState::new(3, 1e-3);
            for k in 0..50 {
                let g: Vec<f64> = params.iter().map(|p| p * (k as f64 + 1.0).sin()).collect();
                state.step(&mut params, &g).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = RandomStream::new(31, 0);
        let model = MlpModel::new(ratio_mlp_layers(2, &[8, 4], 4, 0.2), true, &mut rng).unwrap();
        let text = model.to_checkpoint_json();
        let back = MlpModel::from_checkpoint_json(&text).unwrap();
        assert_eq!(back, model);
        let x = rng.normal_matrix(10, 2, 0.0, 1.0);
        assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let model = MlpModel::zeros(relu_stack(&[2, 3, 1]), false).unwrap();
        let text = model.to_checkpoint_json();
        let cut = &text[..text.len() / 2];
        match MlpModel::from_checkpoint_json(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_with_no_layers_is_rejected() {
        let text = r#"{"format_version":1,"layers":[],"params":[],"final_nonneg":true}"#;
        assert!(matches!(MlpModel::from_checkpoint_json(text), Err(Error::Usage(_))));
    }
}
