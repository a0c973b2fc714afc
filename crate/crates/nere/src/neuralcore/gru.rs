use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{ger_acc, matvec, matvec_t_acc, sigmoid};
use crate::error::{NereError, Result};

/// Gated recurrent unit cell. Input kernels `w_*` are H x D, recurrent
/// kernels `u_*` are H x H.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_z: Vec<f64>,
    pub u_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub w_h: Vec<f64>,
    pub u_h: Vec<f64>,
    pub b_h: Vec<f64>,
    pub gw_z: Vec<f64>,
    pub gu_z: Vec<f64>,
    pub gb_z: Vec<f64>,
    pub gw_r: Vec<f64>,
    pub gu_r: Vec<f64>,
    pub gb_r: Vec<f64>,
    pub gw_h: Vec<f64>,
    pub gu_h: Vec<f64>,
    pub gb_h: Vec<f64>,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Per-step cache for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub hcand: Vec<f64>,
}

impl GruCell {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let init = |fan_in: usize, fan_out: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        };
        GruCell {
            w_z: init(in_dim, hidden, hidden * in_dim, rng),
            u_z: init(hidden, hidden, hidden * hidden, rng),
            b_z: vec![0.0; hidden],
            w_r: init(in_dim, hidden, hidden * in_dim, rng),
            u_r: init(hidden, hidden, hidden * hidden, rng),
            b_r: vec![0.0; hidden],
            w_h: init(in_dim, hidden, hidden * in_dim, rng),
            u_h: init(hidden, hidden, hidden * hidden, rng),
            b_h: vec![0.0; hidden],
            gw_z: vec![0.0; hidden * in_dim],
            gu_z: vec![0.0; hidden * hidden],
            gb_z: vec![0.0; hidden],
            gw_r: vec![0.0; hidden * in_dim],
            gu_r: vec![0.0; hidden * hidden],
            gb_r: vec![0.0; hidden],
            gw_h: vec![0.0; hidden * in_dim],
            gu_h: vec![0.0; hidden * hidden],
            gb_h: vec![0.0; hidden],
            in_dim,
            hidden,
        }
    }

    /// z = σ(W_z x + U_z h + b_z); r = σ(W_r x + U_r h + b_r);
    /// h̃ = tanh(W_h x + U_h (r⊙h) + b_h); h' = (1−z)⊙h + z⊙h̃.
    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        if x.len() != self.in_dim || h_prev.len() != self.hidden {
            return Err(NereError::Shape(format!(
                "gru step expects input {} / hidden {}, got {} / {}",
                self.in_dim,
                self.hidden,
                x.len(),
                h_prev.len()
            )));
        }
        let h = self.hidden;
        let mut az = vec![0.0; h];
        let mut ar = vec![0.0; h];
        let mut ah = vec![0.0; h];
        matvec(&self.w_z, h, self.in_dim, x, &mut az);
        matvec(&self.w_r, h, self.in_dim, x, &mut ar);
        matvec(&self.w_h, h, self.in_dim, x, &mut ah);
        let mut tmp = vec![0.0; h];
        matvec(&self.u_z, h, h, h_prev, &mut tmp);
        for i in 0..h {
            az[i] += tmp[i] + self.b_z[i];
        }
        matvec(&self.u_r, h, h, h_prev, &mut tmp);
        for i in 0..h {
            ar[i] += tmp[i] + self.b_r[i];
        }
        let z: Vec<f64> = az.iter().map(|v| sigmoid(*v)).collect();
        let r: Vec<f64> = ar.iter().map(|v| sigmoid(*v)).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();
        matvec(&self.u_h, h, h, &rh, &mut tmp);
        for i in 0..h {
            ah[i] += tmp[i] + self.b_h[i];
        }
        let hcand: Vec<f64> = ah.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<f64> = (0..h)
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * hcand[i])
            .collect();
        let cache = GruCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            hcand,
        };
        Ok((h_new, cache))
    }

    /// Backward through one step. Accumulates parameter gradients and
    /// returns (dL/dx, dL/dh_prev).
    pub fn step_backward(&mut self, dh: &[f64], cache: &GruCache) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let d = self.in_dim;
        let GruCache {
            x,
            h_prev,
            z,
            r,
            hcand,
        } = cache;

        let mut dh_prev: Vec<f64> = (0..h).map(|i| dh[i] * (1.0 - z[i])).collect();
        let da_z: Vec<f64> = (0..h)
            .map(|i| dh[i] * (hcand[i] - h_prev[i]) * z[i] * (1.0 - z[i]))
            .collect();
        let da_h: Vec<f64> = (0..h)
            .map(|i| dh[i] * z[i] * (1.0 - hcand[i] * hcand[i]))
            .collect();

        ger_acc(&mut self.gw_h, h, d, &da_h, x);
        let rh: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();
        ger_acc(&mut self.gu_h, h, h, &da_h, &rh);
        for (g, d) in self.gb_h.iter_mut().zip(da_h.iter()) {
            *g += d;
        }
        let mut d_rh = vec![0.0; h];
        matvec_t_acc(&self.u_h, h, h, &da_h, &mut d_rh);
        let da_r: Vec<f64> = (0..h)
            .map(|i| d_rh[i] * h_prev[i] * r[i] * (1.0 - r[i]))
            .collect();
        for i in 0..h {
            dh_prev[i] += d_rh[i] * r[i];
        }

        ger_acc(&mut self.gw_z, h, d, &da_z, x);
        ger_acc(&mut self.gu_z, h, h, &da_z, h_prev);
        ger_acc(&mut self.gw_r, h, d, &da_r, x);
        ger_acc(&mut self.gu_r, h, h, &da_r, h_prev);
        for i in 0..h {
            self.gb_z[i] += da_z[i];
            self.gb_r[i] += da_r[i];
        }
        matvec_t_acc(&self.u_z, h, h, &da_z, &mut dh_prev);
        matvec_t_acc(&self.u_r, h, h, &da_r, &mut dh_prev);

        let mut dx = vec![0.0; d];
        matvec_t_acc(&self.w_z, h, d, &da_z, &mut dx);
        matvec_t_acc(&self.w_r, h, d, &da_r, &mut dx);
        matvec_t_acc(&self.w_h, h, d, &da_h, &mut dx);
        (dx, dh_prev)
    }
}

/// Forward/backward GRU pair; outputs per step are the concatenation of
/// the forward state at t with the backward state at t.
#[derive(Debug, Clone)]
pub struct Bidirectional {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

pub struct BidirCache {
    pub fwd: Vec<GruCache>,
    pub bwd: Vec<GruCache>,
}

impl Bidirectional {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Bidirectional {
            fwd: GruCell::new(in_dim, hidden, rng),
            bwd: GruCell::new(in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, seq: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, BidirCache)> {
        if seq.is_empty() {
            return Err(NereError::Precondition(
                "bidirectional forward on empty sequence".into(),
            ));
        }
        let t_len = seq.len();
        let h = self.fwd.hidden;
        let mut fwd_states = Vec::with_capacity(t_len);
        let mut fwd_caches = Vec::with_capacity(t_len);
        let mut state = vec![0.0; h];
        for x in seq {
            let (s, c) = self.fwd.step(x, &state)?;
            state = s.clone();
            fwd_states.push(s);
            fwd_caches.push(c);
        }
        let mut bwd_states = vec![Vec::new(); t_len];
        let mut bwd_caches: Vec<Option<GruCache>> = (0..t_len).map(|_| None).collect();
        let mut state = vec![0.0; h];
        for t in (0..t_len).rev() {
            let (s, c) = self.bwd.step(&seq[t], &state)?;
            state = s.clone();
            bwd_states[t] = s;
            bwd_caches[t] = Some(c);
        }
        let out: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let mut v = fwd_states[t].clone();
                v.extend_from_slice(&bwd_states[t]);
                v
            })
            .collect();
        let cache = BidirCache {
            fwd: fwd_caches,
            bwd: bwd_caches.into_iter().map(|c| c.unwrap()).collect(),
        };
        Ok((out, cache))
    }

    /// `dout[t]` is the gradient of the concatenated output at step t.
    pub fn backward(&mut self, dout: &[Vec<f64>], cache: &BidirCache) -> Vec<Vec<f64>> {
        let t_len = dout.len();
        let h = self.fwd.hidden;
        let mut dx = vec![vec![0.0; self.fwd.in_dim]; t_len];
        // forward chain: walk time backwards carrying dh
        let mut carry = vec![0.0; h];
        for t in (0..t_len).rev() {
            let mut dh: Vec<f64> = dout[t][..h].to_vec();
            for i in 0..h {
                dh[i] += carry[i];
            }
            let (dxi, dprev) = self.fwd.step_backward(&dh, &cache.fwd[t]);
            for (a, b) in dx[t].iter_mut().zip(dxi.iter()) {
                *a += b;
            }
            carry = dprev;
        }
        // backward chain: its "previous" step is t+1, so walk time forwards
        let mut carry = vec![0.0; h];
        for t in 0..t_len {
            let mut dh: Vec<f64> = dout[t][h..].to_vec();
            for i in 0..h {
                dh[i] += carry[i];
            }
            let (dxi, dprev) = self.bwd.step_backward(&dh, &cache.bwd[t]);
            for (a, b) in dx[t].iter_mut().zip(dxi.iter()) {
                *a += b;
            }
            carry = dprev;
        }
        dx
    }
}
