//! Desk-scale classifier: `dense -> feature norm (frozen stats, adaptable
//! affine) -> tanh`, repeated per hidden layer, then a dense readout to `C`
//! logits. Only the normalization scale/shift vectors are adaptable.

mod io;
mod train;

pub use io::{decode_params, encode_params, params_manifest, ParamsManifest, PARAMS_MAGIC};
pub use train::{train_source, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{argmax, SeededRng};

/// Variance epsilon of the normalization layers.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![32],
            classes: 10,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("architecture needs input_dim > 0 and non-empty positive hidden widths"));
        }
        if self.classes < 2 {
            return Err(invalid("architecture needs at least 2 classes"));
        }
        Ok(())
    }

    pub fn adaptable_count(&self) -> usize {
        self.hidden.iter().map(|w| 2 * w).sum()
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden[layer - 1]
        }
    }
}

/// One `dense -> norm -> tanh` block.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    /// `width x fan_in`, frozen during adaptation.
    pub weights: Matrix,
    /// Adaptable affine scale.
    pub scale: Vec<f64>,
    /// Adaptable affine shift.
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormLayer {
    fn width(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    arch: Architecture,
    pub layers: Vec<NormLayer>,
    /// `classes x last_width`, frozen during adaptation.
    pub output: Matrix,
}

impl ParameterSet {
    /// All-zero weights, unit scales, unit running variance.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = (0..arch.hidden.len())
            .map(|l| {
                let w = arch.hidden[l];
                NormLayer {
                    weights: Matrix::zeros(w, arch.fan_in(l)),
                    scale: vec![1.0; w],
                    shift: vec![0.0; w],
                    running_mean: vec![0.0; w],
                    running_var: vec![1.0; w],
                }
            })
            .collect();
        let last = *arch.hidden.last().unwrap();
        Ok(Self {
            arch: arch.clone(),
            layers,
            output: Matrix::zeros(arch.classes, last),
        })
    }

    /// Gaussian fan-in scaled weights; affine at identity; unit stats.
    pub fn random(arch: &Architecture, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let s = 1.0 / (arch.fan_in(l) as f64).sqrt();
            for v in layer.weights.as_mut_slice() {
                *v = s * rng.normal();
            }
        }
        let s = 1.0 / (*arch.hidden.last().unwrap() as f64).sqrt();
        for v in p.output.as_mut_slice() {
            *v = s * rng.normal();
        }
        Ok(p)
    }

    pub(crate) fn from_parts(arch: Architecture, layers: Vec<NormLayer>, output: Matrix) -> Result<Self> {
        let p = Self { arch, layers, output };
        p.check_consistent()?;
        Ok(p)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn check_consistent(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.hidden.len() {
            return Err(invalid("layer count does not match architecture"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let w = self.arch.hidden[l];
            if layer.weights.shape() != (w, self.arch.fan_in(l))
                || layer.scale.len() != w
                || layer.shift.len() != w
                || layer.running_mean.len() != w
                || layer.running_var.len() != w
            {
                return Err(invalid(format!("layer {l} shape mismatch")));
            }
            if layer.running_var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(invalid(format!("layer {l} running variance must be positive")));
            }
        }
        if self.output.shape() != (self.arch.classes, *self.arch.hidden.last().unwrap()) {
            return Err(invalid("output shape mismatch"));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ParameterSet) -> bool {
        self.arch == other.arch
    }

    fn require_same_shape(&self, other: &ParameterSet) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(invalid("parameter sets have different shapes"))
        }
    }

    /// Adaptable parameters flattened as `[scale_0, shift_0, scale_1, shift_1, ...]`.
    pub fn affine_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.adaptable_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.scale);
            out.extend_from_slice(&layer.shift);
        }
        out
    }

    pub fn set_affine_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.arch.adaptable_count() {
            return Err(invalid("affine vector length mismatch"));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let w = layer.width();
            layer.scale.copy_from_slice(&flat[off..off + w]);
            layer.shift.copy_from_slice(&flat[off + w..off + 2 * w]);
            off += 2 * w;
        }
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + 4 * l.width())
            .sum::<usize>()
            + self.output.as_slice().len()
    }

    /// Copy of `self` with per-tensor scaled Gaussian noise on the dense
    /// backbone weights and the normalization scales. Shifts, running
    /// statistics and the readout are left untouched.
    pub fn perturbed(&self, epsilon: f64, rng: &mut SeededRng) -> ParameterSet {
        let mut out = self.clone();
        if epsilon == 0.0 {
            return out;
        }
        for layer in &mut out.layers {
            add_scaled_noise(layer.weights.as_mut_slice(), epsilon, rng);
            add_scaled_noise(&mut layer.scale, epsilon, rng);
        }
        out
    }

    /// Forward pass recording the intermediates backprop needs.
    pub(crate) fn forward_cached(&self, inputs: &Matrix) -> Result<ForwardCache> {
        if inputs.cols() != self.arch.input_dim {
            return Err(invalid(format!(
                "input dim {} does not match architecture {}",
                inputs.cols(),
                self.arch.input_dim
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut prev = inputs.clone();
        for layer in &self.layers {
            let pre = prev.mul_transposed(&layer.weights);
            let mut normed = pre;
            let mut act = Matrix::zeros(normed.rows(), normed.cols());
            for b in 0..normed.rows() {
                let row = normed.row_mut(b);
                let arow = act.row_mut(b);
                for j in 0..row.len() {
                    let u = (row[j] - layer.running_mean[j]) / (layer.running_var[j] + NORM_EPS).sqrt();
                    row[j] = u;
                    arow[j] = (layer.scale[j] * u + layer.shift[j]).tanh();
                }
            }
            layers.push(LayerCache { normed, act: act.clone() });
            prev = act;
        }
        let logits = prev.mul_transposed(&self.output);
        Ok(ForwardCache { layers, logits })
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.logits)
    }

    /// Gradient w.r.t. the adaptable parameters, in [`affine_flat`](Self::affine_flat) order.
    pub(crate) fn backward_affine_cached(&self, cache: &ForwardCache, dl_dlogits: &Matrix) -> Result<Vec<f64>> {
        if dl_dlogits.shape() != cache.logits.shape() {
            return Err(invalid("upstream gradient shape mismatch"));
        }
        if !dl_dlogits.all_finite() {
            return Err(Error::Numerical("non-finite upstream gradient".into()));
        }
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut d_act = dl_dlogits.mul(&self.output);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[l];
            let w = layer.width();
            let mut d_scale = vec![0.0; w];
            let mut d_shift = vec![0.0; w];
            let mut d_norm_in = Matrix::zeros(d_act.rows(), w);
            for b in 0..d_act.rows() {
                let da_row = d_act.row(b);
                let s = c.act.row(b);
                let u = c.normed.row(b);
                let dh = d_norm_in.row_mut(b);
                for j in 0..w {
                    let da = da_row[j] * (1.0 - s[j] * s[j]);
                    d_scale[j] += da * u[j];
                    d_shift[j] += da;
                    dh[j] = da * layer.scale[j] / (layer.running_var[j] + NORM_EPS).sqrt();
                }
            }
            grads.push((d_scale, d_shift));
            if l > 0 {
                d_act = d_norm_in.mul(&layer.weights);
            }
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.arch.adaptable_count());
        for (s, b) in grads {
            flat.extend(s);
            flat.extend(b);
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite affine gradient".into()));
        }
        Ok(flat)
    }
}

fn add_scaled_noise(tensor: &mut [f64], epsilon: f64, rng: &mut SeededRng) {
    let n = tensor.len() as f64;
    let mean = tensor.iter().sum::<f64>() / n;
    let sigma = (tensor.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // Draws are consumed even for constant tensors so later tensors see the
    // same noise regardless of earlier tensors' spread.
    let noise = rng.gaussian_draw(tensor.len());
    if sigma == 0.0 {
        return;
    }
    for (v, z) in tensor.iter_mut().zip(noise) {
        *v += epsilon * sigma * z;
    }
}

pub(crate) struct LayerCache {
    /// Standardized pre-activation `(h - mean) / sqrt(var + eps)`.
    normed: Matrix,
    act: Matrix,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    pub(crate) logits: Matrix,
}

/// Which parameter copy a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Expert,
    Source,
}

/// Which parameters a restore copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetScope {
    #[default]
    Affine,
    Full,
}

/// Expert parameters plus the frozen source snapshot they started from.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub(crate) params: ParameterSet,
    source: ParameterSet,
}

impl ModelState {
    /// Expert initialized as an exact copy of the source.
    pub fn from_source(source: ParameterSet) -> Self {
        Self {
            params: source.clone(),
            source,
        }
    }

    /// Pairs arbitrary expert parameters with a source snapshot of the same shape.
    pub fn with_snapshot(params: ParameterSet, source: ParameterSet) -> Result<Self> {
        params.require_same_shape(&source)?;
        Ok(Self { params, source })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn source(&self) -> &ParameterSet {
        &self.source
    }

    pub fn arch(&self) -> &Architecture {
        self.params.arch()
    }

    pub fn branch(&self, which: Branch) -> &ParameterSet {
        match which {
            Branch::Expert => &self.params,
            Branch::Source => &self.source,
        }
    }

    pub fn forward(&self, which: Branch, inputs: &Matrix) -> Result<Matrix> {
        self.branch(which).logits(inputs)
    }

    pub fn backward_affine(&self, inputs: &Matrix, dl_dlogits: &Matrix) -> Result<Vec<f64>> {
        let cache = self.params.forward_cached(inputs)?;
        self.params.backward_affine_cached(&cache, dl_dlogits)
    }

    pub fn snapshot(&self) -> ParameterSet {
        self.params.clone()
    }

    pub fn restore(&mut self, snap: &ParameterSet, scope: ResetScope) -> Result<()> {
        self.params.require_same_shape(snap)?;
        match scope {
            ResetScope::Full => self.params = snap.clone(),
            ResetScope::Affine => {
                for (dst, src) in self.params.layers.iter_mut().zip(&snap.layers) {
                    dst.scale.copy_from_slice(&src.scale);
                    dst.shift.copy_from_slice(&src.shift);
                }
            }
        }
        Ok(())
    }

    pub fn reset_to_source(&mut self, scope: ResetScope) {
        let src = self.source.clone();
        self.restore(&src, scope).expect("source snapshot shares the expert's shape");
    }

    /// Degraded copy whose expert and snapshot are both the perturbed source.
    pub fn perturb_weights(&self, epsilon: f64, rng: &mut SeededRng) -> ModelState {
        ModelState::from_source(self.source.perturbed(epsilon, rng))
    }

    pub fn clean_accuracy(&self, which: Branch, data: &Batch) -> Result<f64> {
        clean_accuracy(self.branch(which), data)
    }
}

/// Squared L2 distance between the adaptable subsets.
pub fn l2_distance_sq(a: &ParameterSet, b: &ParameterSet) -> Result<f64> {
    a.require_same_shape(b)?;
    let mut acc = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (x, y) in la.scale.iter().zip(&lb.scale) {
            acc += (x - y) * (x - y);
        }
        for (x, y) in la.shift.iter().zip(&lb.shift) {
            acc += (x - y) * (x - y);
        }
    }
    Ok(acc)
}

/// Reverses each input row. Involutive.
pub fn flip_transform(inputs: &Matrix) -> Matrix {
    let mut out = inputs.clone();
    for b in 0..out.rows() {
        out.row_mut(b).reverse();
    }
    out
}

/// Inputs with labels. Labels exist for measurement only; the adaptation
/// path receives `&Matrix` and never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub eval_labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, eval_labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != eval_labels.len() {
            return Err(invalid("label count does not match input rows"));
        }
        Ok(Self { inputs, eval_labels })
    }

    pub fn len(&self) -> usize {
        self.eval_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eval_labels.is_empty()
    }
}

/// Top-1 accuracy; argmax ties go to the lowest class index.
pub fn clean_accuracy(params: &ParameterSet, data: &Batch) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let logits = params.logits(&data.inputs)?;
    Ok(top1_accuracy(&logits, &data.eval_labels))
}

pub(crate) fn top1_accuracy(scores: &Matrix, labels: &[usize]) -> f64 {
    let hits = scores
        .iter_rows()
        .zip(labels)
        .filter(|(row, y)| argmax(row) == **y)
        .count();
    hits as f64 / labels.len() as f64
}
