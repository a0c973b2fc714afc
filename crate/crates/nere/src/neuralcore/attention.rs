use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{ger_acc, matvec, matvec_t_acc};
use crate::error::{NereError, Result};

/// Attention with a learned context vector. For each timestep row h_t of
/// the input, u_t = tanh(W_w h_t + b_w); per-feature scores u_t[f]·u_w[f]
/// are softmax-normalized over the feature axis and reweight the input
/// element-wise. The α matrix is cached for visualization.
#[derive(Debug, Clone)]
pub struct AttentionWithContext {
    pub w_w: Vec<f64>, // F x F
    pub b_w: Vec<f64>,
    pub u_w: Vec<f64>,
    pub gw_w: Vec<f64>,
    pub gb_w: Vec<f64>,
    pub gu_w: Vec<f64>,
    pub dim: usize,
    /// α from the most recent forward pass, rows = timesteps.
    pub last_alpha: Option<Vec<Vec<f64>>>,
}

pub struct AttnCache {
    pub input: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

impl AttentionWithContext {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (2 * dim) as f64).sqrt();
        AttentionWithContext {
            w_w: (0..dim * dim).map(|_| rng.gen_range(-limit..limit)).collect(),
            b_w: vec![0.0; dim],
            u_w: (0..dim).map(|_| rng.gen_range(-limit..limit)).collect(),
            gw_w: vec![0.0; dim * dim],
            gb_w: vec![0.0; dim],
            gu_w: vec![0.0; dim],
            dim,
            last_alpha: None,
        }
    }

    pub fn forward(&mut self, h_in: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, AttnCache)> {
        let f = self.dim;
        let mut us = Vec::with_capacity(h_in.len());
        let mut alphas = Vec::with_capacity(h_in.len());
        let mut out = Vec::with_capacity(h_in.len());
        for h in h_in {
            if h.len() != f {
                return Err(NereError::Shape(format!(
                    "attention expects rows of {}, got {}",
                    f,
                    h.len()
                )));
            }
            let mut pre = vec![0.0; f];
            matvec(&self.w_w, f, f, h, &mut pre);
            let u: Vec<f64> = pre
                .iter()
                .zip(self.b_w.iter())
                .map(|(p, b)| (p + b).tanh())
                .collect();
            let scores: Vec<f64> = u.iter().zip(self.u_w.iter()).map(|(a, b)| a * b).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let alpha: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            let y: Vec<f64> = alpha.iter().zip(h.iter()).map(|(a, x)| a * x).collect();
            us.push(u);
            alphas.push(alpha);
            out.push(y);
        }
        self.last_alpha = Some(alphas.clone());
        Ok((
            out,
            AttnCache {
                input: h_in.to_vec(),
                u: us,
                alpha: alphas,
            },
        ))
    }

    pub fn backward(&mut self, dout: &[Vec<f64>], cache: &AttnCache) -> Vec<Vec<f64>> {
        let f = self.dim;
        let mut dins = Vec::with_capacity(dout.len());
        for (t, dy) in dout.iter().enumerate() {
            let h = &cache.input[t];
            let u = &cache.u[t];
            let alpha = &cache.alpha[t];
            let mut din: Vec<f64> = dy.iter().zip(alpha.iter()).map(|(d, a)| d * a).collect();
            let dalpha: Vec<f64> = dy.iter().zip(h.iter()).map(|(d, x)| d * x).collect();
            // softmax jacobian
            let dot: f64 = alpha.iter().zip(dalpha.iter()).map(|(a, d)| a * d).sum();
            let dscore: Vec<f64> = alpha
                .iter()
                .zip(dalpha.iter())
                .map(|(a, d)| a * (d - dot))
                .collect();
            let du: Vec<f64> = dscore
                .iter()
                .zip(self.u_w.iter())
                .map(|(d, uw)| d * uw)
                .collect();
            for i in 0..f {
                self.gu_w[i] += dscore[i] * u[i];
            }
            let dpre: Vec<f64> = du.iter().zip(u.iter()).map(|(d, ui)| d * (1.0 - ui * ui)).collect();
            ger_acc(&mut self.gw_w, f, f, &dpre, h);
            for (g, d) in self.gb_w.iter_mut().zip(dpre.iter()) {
                *g += d;
            }
            matvec_t_acc(&self.w_w, f, f, &dpre, &mut din);
            dins.push(din);
        }
        dins
    }
}
