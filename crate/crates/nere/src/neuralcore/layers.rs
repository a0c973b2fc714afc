use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{ger_acc, matvec, matvec_t_acc};
use crate::error::{NereError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

/// Fully connected layer, weights stored row-major (out x in).
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, act: Activation, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Dense {
            w,
            b: vec![0.0; out_dim],
            gw: vec![0.0; in_dim * out_dim],
            gb: vec![0.0; out_dim],
            in_dim,
            out_dim,
            act,
        }
    }

    /// Returns (activated output, pre-activation); the latter is the
    /// backward cache.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.in_dim {
            return Err(NereError::Shape(format!(
                "dense expects input of {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut pre = vec![0.0; self.out_dim];
        matvec(&self.w, self.out_dim, self.in_dim, x, &mut pre);
        for (p, bi) in pre.iter_mut().zip(self.b.iter()) {
            *p += bi;
        }
        let out = match self.act {
            Activation::Linear => pre.clone(),
            Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
        };
        Ok((out, pre))
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &[f64], pre: &[f64], dy: &[f64]) -> Vec<f64> {
        let dpre: Vec<f64> = match self.act {
            Activation::Linear => dy.to_vec(),
            Activation::Relu => dy
                .iter()
                .zip(pre.iter())
                .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
                .collect(),
        };
        ger_acc(&mut self.gw, self.out_dim, self.in_dim, &dpre, x);
        for (g, d) in self.gb.iter_mut().zip(dpre.iter()) {
            *g += d;
        }
        let mut dx = vec![0.0; self.in_dim];
        matvec_t_acc(&self.w, self.out_dim, self.in_dim, &dpre, &mut dx);
        dx
    }
}

/// Embedding table for one categorical field. Columns are the category
/// vectors; column 0 is the reserved unknown index.
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub field: String,
    /// Column-contiguous storage: column j lives at [j*dim, (j+1)*dim).
    pub w: Vec<f64>,
    pub gw: Vec<f64>,
    pub dim: usize,
    /// cardinality + 1 (unknown index included)
    pub cols: usize,
}

impl EmbeddingLayer {
    pub fn new(field: &str, cardinality: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let cols = cardinality + 1;
        // normal(0, 0.05) via Box-Muller on the seeded stream
        let mut w = Vec::with_capacity(cols * dim);
        while w.len() < cols * dim {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            w.push(0.05 * r * th.cos());
            if w.len() < cols * dim {
                w.push(0.05 * r * th.sin());
            }
        }
        EmbeddingLayer {
            field: field.to_string(),
            gw: vec![0.0; cols * dim],
            w,
            dim,
            cols,
        }
    }

    pub fn lookup(&self, index: i64) -> Result<&[f64]> {
        if index < 0 || index as usize >= self.cols {
            return Err(NereError::Index {
                field: self.field.clone(),
                index,
                cardinality: self.cols - 1,
            });
        }
        let j = index as usize;
        Ok(&self.w[j * self.dim..(j + 1) * self.dim])
    }

    /// Gradient of the gathered column accumulates into that column only.
    pub fn accumulate_grad(&mut self, index: usize, dy: &[f64]) {
        let col = &mut self.gw[index * self.dim..(index + 1) * self.dim];
        for (g, d) in col.iter_mut().zip(dy.iter()) {
            *g += d;
        }
    }
}

/// Batch normalization over the leading (row) axis of a flattened
/// [rows, dim] input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub ggamma: Vec<f64>,
    pub gbeta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub rows: usize,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            ggamma: vec![0.0; dim],
            gbeta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            dim,
            momentum: 0.99,
            eps: 1e-8,
        }
    }

    /// Train-mode forward over `rows` stacked feature vectors. Updates the
    /// running moments.
    pub fn forward_train(&mut self, x: &[f64], rows: usize) -> Result<(Vec<f64>, BnCache)> {
        if rows < 2 {
            return Err(NereError::Precondition(
                "batchnorm train mode requires batch >= 2".into(),
            ));
        }
        debug_assert_eq!(x.len(), rows * self.dim);
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..rows {
            for j in 0..d {
                let dv = x[r * d + j] - mean[j];
                var[j] += dv * dv;
            }
        }
        for v in var.iter_mut() {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; rows * d];
        let mut y = vec![0.0; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let h = (x[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                y[r * d + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        for j in 0..d {
            self.running_mean[j] = self.momentum * self.running_mean[j] + (1.0 - self.momentum) * mean[j];
            self.running_var[j] = self.momentum * self.running_var[j] + (1.0 - self.momentum) * var[j];
        }
        Ok((y, BnCache { xhat, inv_std, rows }))
    }

    pub fn forward_infer(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            for j in 0..d {
                let inv = 1.0 / (self.running_var[j] + self.eps).sqrt();
                y[r * d + j] = self.gamma[j] * (x[r * d + j] - self.running_mean[j]) * inv + self.beta[j];
            }
        }
        y
    }

    /// Full backward through the batch statistics.
    pub fn backward(&mut self, cache: &BnCache, dy: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let rows = cache.rows;
        let m = rows as f64;
        let mut sum_dxhat = vec![0.0; d];
        let mut sum_dxhat_xhat = vec![0.0; d];
        for r in 0..rows {
            for j in 0..d {
                let dyv = dy[r * d + j];
                let xh = cache.xhat[r * d + j];
                self.ggamma[j] += dyv * xh;
                self.gbeta[j] += dyv;
                let dxh = dyv * self.gamma[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * xh;
            }
        }
        let mut dx = vec![0.0; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let dxh = dy[r * d + j] * self.gamma[j];
                dx[r * d + j] = cache.inv_std[j] / m
                    * (m * dxh - sum_dxhat[j] - cache.xhat[r * d + j] * sum_dxhat_xhat[j]);
            }
        }
        dx
    }
}

/// Inverted dropout. Train mode zeroes each unit with probability `p` and
/// scales survivors by 1/(1-p); infer mode is the identity.
pub fn dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..len)
        .map(|_| {
            if rng.gen_range(0.0..1.0) < p {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

pub fn apply_mask(x: &[f64], mask: &[f64]) -> Vec<f64> {
    x.iter().zip(mask.iter()).map(|(a, m)| a * m).collect()
}

/// Mean squared error over all elements; returns (loss, dL/dpred).
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(NereError::Shape(format!(
            "mse: pred has {} elements, target {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// λ·Σw² penalty over the given parameter blocks; gradients 2λw are
/// accumulated in place.
pub fn add_l2(lambda: f64, blocks: &mut [(&[f64], &mut [f64])]) -> f64 {
    let mut penalty = 0.0;
    for (w, g) in blocks.iter_mut() {
        for (wi, gi) in w.iter().zip(g.iter_mut()) {
            penalty += lambda * wi * wi;
            *gi += 2.0 * lambda * wi;
        }
    }
    penalty
}
