//! Source fitting on clean labelled data. Labels are available here and
//! nowhere else in the adaptation path.

use serde::{Deserialize, Serialize};

use super::{Architecture, Batch, ParameterSet, NORM_EPS};
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::numerics::{softmax_raw, SeededRng};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Running statistics are refreshed from the training data every this many epochs.
    pub stats_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            learning_rate: 0.5,
            momentum: 0.9,
            stats_every: 10,
        }
    }
}

/// Sets each layer's running mean/variance to the population statistics of
/// its pre-normalization activations on `inputs`.
fn refresh_stats(p: &mut ParameterSet, inputs: &Matrix) {
    let mut prev = inputs.clone();
    for l in 0..p.layers.len() {
        let pre = prev.mul_transposed(&p.layers[l].weights);
        let n = pre.rows() as f64;
        let layer = &mut p.layers[l];
        for j in 0..pre.cols() {
            let mean = (0..pre.rows()).map(|b| pre.get(b, j)).sum::<f64>() / n;
            let var = (0..pre.rows()).map(|b| (pre.get(b, j) - mean).powi(2)).sum::<f64>() / n;
            layer.running_mean[j] = mean;
            layer.running_var[j] = var.max(1e-6);
        }
        let mut act = pre;
        for b in 0..act.rows() {
            let row = act.row_mut(b);
            for j in 0..row.len() {
                let u = (row[j] - layer.running_mean[j]) / (layer.running_var[j] + NORM_EPS).sqrt();
                row[j] = (layer.scale[j] * u + layer.shift[j]).tanh();
            }
        }
        prev = act;
    }
}

/// Mean cross-entropy and its gradient over every parameter (running
/// statistics held constant).
fn ce_gradient(p: &ParameterSet, data: &Batch) -> Result<(f64, ParameterSet)> {
    let n = data.len() as f64;
    // Forward, keeping inputs to each layer.
    let mut inputs_per_layer = Vec::with_capacity(p.layers.len());
    let mut normed = Vec::with_capacity(p.layers.len());
    let mut acts = Vec::with_capacity(p.layers.len());
    let mut prev = data.inputs.clone();
    for layer in &p.layers {
        let mut u = prev.mul_transposed(&layer.weights);
        let mut a = Matrix::zeros(u.rows(), u.cols());
        for b in 0..u.rows() {
            for j in 0..u.cols() {
                let v = (u.get(b, j) - layer.running_mean[j]) / (layer.running_var[j] + NORM_EPS).sqrt();
                u.set(b, j, v);
                a.set(b, j, (layer.scale[j] * v + layer.shift[j]).tanh());
            }
        }
        inputs_per_layer.push(prev);
        normed.push(u);
        prev = a.clone();
        acts.push(a);
    }
    let logits = prev.mul_transposed(&p.output);
    let mut dz = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for b in 0..logits.rows() {
        let probs = softmax_raw(logits.row(b));
        let y = data.eval_labels[b];
        loss -= probs[y].max(1e-300).ln();
        let row = dz.row_mut(b);
        for (c, pc) in probs.iter().enumerate() {
            row[c] = (pc - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    loss /= n;

    let mut grad = ParameterSet::zeros(p.arch())?;
    grad.output = dz.transposed_mul(acts.last().unwrap());
    let mut d_act = dz.mul(&p.output);
    for l in (0..p.layers.len()).rev() {
        let layer = &p.layers[l];
        let g = &mut grad.layers[l];
        g.scale.iter_mut().for_each(|v| *v = 0.0);
        let mut dh = Matrix::zeros(d_act.rows(), d_act.cols());
        for b in 0..d_act.rows() {
            for j in 0..d_act.cols() {
                let s = acts[l].get(b, j);
                let da = d_act.get(b, j) * (1.0 - s * s);
                g.scale[j] += da * normed[l].get(b, j);
                g.shift[j] += da;
                dh.set(b, j, da * layer.scale[j] / (layer.running_var[j] + NORM_EPS).sqrt());
            }
        }
        g.weights = dh.transposed_mul(&inputs_per_layer[l]);
        if l > 0 {
            d_act = dh.mul(&layer.weights);
        }
    }
    Ok((loss, grad))
}

fn for_each_tensor(p: &mut ParameterSet, mut f: impl FnMut(usize, &mut [f64])) {
    let mut k = 0;
    for layer in &mut p.layers {
        f(k, layer.weights.as_mut_slice());
        f(k + 1, &mut layer.scale);
        f(k + 2, &mut layer.shift);
        k += 3;
    }
    f(k, p.output.as_mut_slice());
}

fn flatten(p: &mut ParameterSet) -> Vec<f64> {
    let mut out = Vec::new();
    for_each_tensor(p, |_, t| out.extend_from_slice(t));
    out
}

/// Fits a source classifier by full-batch gradient descent with momentum on
/// mean cross-entropy. Returns the parameters with running statistics
/// refreshed on the training inputs.
pub fn train_source(arch: &Architecture, data: &Batch, cfg: &TrainConfig, rng: &mut SeededRng) -> Result<ParameterSet> {
    if data.is_empty() {
        return Err(invalid("empty training set"));
    }
    if cfg.stats_every == 0 {
        return Err(invalid("stats_every must be positive"));
    }
    let mut p = ParameterSet::random(arch, rng)?;
    let mut velocity: Option<Vec<f64>> = None;
    for epoch in 0..cfg.epochs {
        if epoch % cfg.stats_every == 0 {
            refresh_stats(&mut p, &data.inputs);
        }
        let (_, mut g) = ce_gradient(&p, data)?;
        let gflat = flatten(&mut g);
        let v = velocity.get_or_insert_with(|| vec![0.0; gflat.len()]);
        for (vi, gi) in v.iter_mut().zip(&gflat) {
            *vi = cfg.momentum * *vi + gi;
        }
        let mut off = 0;
        let lr = cfg.learning_rate;
        let vel = v.clone();
        for_each_tensor(&mut p, |_, t| {
            for x in t.iter_mut() {
                *x -= lr * vel[off];
                off += 1;
            }
        });
    }
    refresh_stats(&mut p, &data.inputs);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::clean_accuracy;

    #[test]
    fn full_gradient_matches_finite_differences() {
        let arch = Architecture {
            input_dim: 4,
            hidden: vec![5, 3],
            classes: 3,
        };
        let mut rng = SeededRng::new(4);
        let mut p = ParameterSet::random(&arch, &mut rng).unwrap();
        let x = Matrix::from_vec(7, 4, rng.gaussian_draw(28)).unwrap();
        refresh_stats(&mut p, &x);
        let data = Batch::new(x, vec![0, 1, 2, 0, 1, 2, 0]).unwrap();
        let (_, mut g) = ce_gradient(&p, &data).unwrap();
        let analytic = flatten(&mut g);
        let base = flatten(&mut p.clone());
        let h = 1e-6;
        for i in (0..base.len()).step_by(3) {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let mut off = 0;
                for_each_tensor(&mut q, |_, t| {
                    for x in t.iter_mut() {
                        if off == i {
                            *x += delta;
                        }
                        off += 1;
                    }
                });
                ce_gradient(&q, &data).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6 + 1e-4 * fd.abs(), "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn training_fits_separable_data() {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![8],
            classes: 2,
        };
        let mut rng = SeededRng::new(9);
        let n = 200;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -1.5 } else { 1.5 };
            rows.push(vec![c + 0.5 * rng.normal(), 0.5 * rng.normal()]);
            labels.push(y);
        }
        let data = Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let p = train_source(&arch, &data, &TrainConfig::default(), &mut rng).unwrap();
        assert!(clean_accuracy(&p, &data).unwrap() > 0.95);
    }
}
