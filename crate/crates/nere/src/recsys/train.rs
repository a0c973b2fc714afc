//! Mini-batch training loop: Adam on MSE with an L2 penalty on the
//! recurrent kernels, row-wise validation split, early stopping with
//! best-checkpoint retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NereError, Result};
use crate::features::SequenceTensorTriple;
use crate::neuralcore::{add_l2, apply_mask, dropout_mask, mse_loss, Adam, GruCell};
use crate::recsys::model::{truncate_recent, window_from_triple, NereModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub dropout: f64,
    pub l2: f64,
    /// number of most recent input steps to feed; 0 means all (t−1)
    pub input_len: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 30,
            lr: 1e-3,
            patience: 5,
            val_fraction: 0.25,
            dropout: 0.5,
            l2: 1e-3,
            input_len: 0,
            rng_seed: 99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(NereError::Config(
                "val_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(NereError::Config("batch_size must be >= 2".into()));
        }
        if self.max_epochs < 1 {
            return Err(NereError::Config("max_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NereError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

pub struct BatchResult {
    /// mean per-sample MSE over the batch
    pub mse: f64,
    /// mse plus the L2 penalty, the quantity the gradients belong to
    pub objective: f64,
}

/// Forward (and optionally backward) over one batch of tensor rows.
/// Dropout masks are drawn from `drop_seed` so repeated calls see the
/// same masks; gradients accumulate into the model when `backward`.
#[allow(clippy::too_many_arguments)]
pub fn batch_forward_backward(
    model: &mut NereModel,
    triple: &SequenceTensorTriple,
    rows: &[usize],
    input_len: usize,
    dropout: f64,
    l2: f64,
    drop_seed: u64,
    backward: bool,
) -> Result<BatchResult> {
    let b = rows.len();
    let seq_len = if input_len == 0 {
        triple.t - 1
    } else {
        input_len
    };
    if b * seq_len < 2 {
        return Err(NereError::Precondition(
            "batch norm needs at least 2 stacked step rows".into(),
        ));
    }
    let d = model.manifest.step_input_dim();
    let h2 = 2 * model.manifest.hidden;

    // stage 1: encode all steps and batch-normalize them together, since
    // the embeddings feeding batch norm are themselves trained
    let mut encodings = Vec::with_capacity(b);
    let mut stacked = Vec::with_capacity(b * seq_len * d);
    for &row in rows {
        let window = truncate_recent(&window_from_triple(triple, row), seq_len)?;
        let mut steps = Vec::with_capacity(seq_len);
        for step in &window.steps {
            let enc = model.encode_step(step)?;
            stacked.extend_from_slice(&enc.x);
            steps.push(enc);
        }
        encodings.push(steps);
    }
    let (bn_out, bn_cache) = model.bn.forward_train(&stacked, b * seq_len)?;

    // stage 2: per-sample recurrent stack
    let mut drop_rng = ChaCha8Rng::seed_from_u64(drop_seed);
    struct SampleFwd {
        seq: Vec<Vec<f64>>,
        rnn_cache: crate::neuralcore::BidirCache,
        masks1: Vec<Vec<f64>>,
        attn_cache: crate::neuralcore::AttnCache,
        masks2: Vec<Vec<f64>>,
        summed: Vec<f64>,
        d1_pre: Vec<f64>,
        d1_out: Vec<f64>,
        d2_pre: Vec<f64>,
        dpred: Vec<f64>,
    }
    let mut total_mse = 0.0;
    let mut fwds = Vec::with_capacity(b);
    for (i, &row) in rows.iter().enumerate() {
        let seq: Vec<Vec<f64>> = (0..seq_len)
            .map(|s| bn_out[(i * seq_len + s) * d..(i * seq_len + s + 1) * d].to_vec())
            .collect();
        let (rnn_out, rnn_cache) = model.rnn.forward(&seq)?;
        let masks1: Vec<Vec<f64>> = (0..seq_len)
            .map(|_| dropout_mask(h2, dropout, &mut drop_rng))
            .collect();
        let dropped1: Vec<Vec<f64>> = rnn_out
            .iter()
            .zip(&masks1)
            .map(|(x, m)| apply_mask(x, m))
            .collect();
        let (attn_out, attn_cache) = model.attn.forward(&dropped1)?;
        let masks2: Vec<Vec<f64>> = (0..seq_len)
            .map(|_| dropout_mask(h2, dropout, &mut drop_rng))
            .collect();
        let dropped2: Vec<Vec<f64>> = attn_out
            .iter()
            .zip(&masks2)
            .map(|(x, m)| apply_mask(x, m))
            .collect();
        let mut summed = vec![0.0; h2];
        for r in &dropped2 {
            for (a, v) in summed.iter_mut().zip(r) {
                *a += v;
            }
        }
        let (d1_out, d1_pre) = model.d1.forward(&summed)?;
        let (pred, d2_pre) = model.d2.forward(&d1_out)?;
        let target = &triple.target[row * triple.content_dim..(row + 1) * triple.content_dim];
        let (mse, dpred) = mse_loss(&pred, target)?;
        total_mse += mse;
        fwds.push(SampleFwd {
            seq,
            rnn_cache,
            masks1,
            attn_cache,
            masks2,
            summed,
            d1_pre,
            d1_out,
            d2_pre,
            dpred,
        });
    }
    let mse = total_mse / b as f64;

    let mut penalty = 0.0;
    if backward {
        let mut d_bn_out = vec![0.0; b * seq_len * d];
        for (i, f) in fwds.iter().enumerate() {
            let dpred: Vec<f64> = f.dpred.iter().map(|v| v / b as f64).collect();
            let dd1 = model.d2.backward(&f.d1_out, &f.d2_pre, &dpred);
            let dsum = model.d1.backward(&f.summed, &f.d1_pre, &dd1);
            let dattn_out: Vec<Vec<f64>> = f.masks2.iter().map(|m| apply_mask(&dsum, m)).collect();
            let ddropped1 = model.attn.backward(&dattn_out, &f.attn_cache);
            let drnn_out: Vec<Vec<f64>> = ddropped1
                .iter()
                .zip(&f.masks1)
                .map(|(g, m)| apply_mask(g, m))
                .collect();
            let dx = model.rnn.backward(&drnn_out, &f.rnn_cache);
            for (s, g) in dx.iter().enumerate() {
                let off = (i * seq_len + s) * d;
                d_bn_out[off..off + d].copy_from_slice(g);
            }
            let _ = &f.seq;
        }
        let d_bn_in = model.bn.backward(&bn_cache, &d_bn_out);
        // scatter into embedding tables; continuous inputs are not
        // parameters, their gradients end here
        for (i, steps) in encodings.iter().enumerate() {
            for (s, enc) in steps.iter().enumerate() {
                let off = (i * seq_len + s) * d;
                for &(is_user, table, col, at) in &enc.emb_slots {
                    let g = &d_bn_in[off + at..off + at + model.manifest.embed_dim];
                    if is_user {
                        model.user_emb[table].accumulate_grad(col, g);
                    } else {
                        model.set_emb[table].accumulate_grad(col, g);
                    }
                }
            }
        }
        if l2 > 0.0 {
            for cell in [&mut model.rnn.fwd, &mut model.rnn.bwd] {
                let GruCell {
                    u_z,
                    u_r,
                    u_h,
                    gu_z,
                    gu_r,
                    gu_h,
                    ..
                } = cell;
                penalty += add_l2(
                    l2,
                    &mut [(u_z, gu_z), (u_r, gu_r), (u_h, gu_h)],
                );
            }
        }
    } else if l2 > 0.0 {
        for cell in [&model.rnn.fwd, &model.rnn.bwd] {
            for block in [&cell.u_z, &cell.u_r, &cell.u_h] {
                penalty += l2 * block.iter().map(|w| w * w).sum::<f64>();
            }
        }
    }
    Ok(BatchResult {
        mse,
        objective: mse + penalty,
    })
}

/// Mean inference-mode MSE over the given rows.
pub fn evaluate_mse(
    model: &mut NereModel,
    triple: &SequenceTensorTriple,
    rows: &[usize],
    input_len: usize,
) -> Result<f64> {
    let seq_len = if input_len == 0 {
        triple.t - 1
    } else {
        input_len
    };
    let mut total = 0.0;
    for &row in rows {
        let window = truncate_recent(&window_from_triple(triple, row), seq_len)?;
        let pred = model.predict_embedding(&window)?;
        let target = &triple.target[row * triple.content_dim..(row + 1) * triple.content_dim];
        let (mse, _) = mse_loss(&pred, target)?;
        total += mse;
    }
    Ok(total / rows.len() as f64)
}

/// Deterministic row split shared by training and evaluation: shuffle
/// 0..n with the given seed, hold out the first ceil(n·val_fraction)
/// rows. Returns (held_out, training).
pub fn split_rows(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).ceil() as usize).max(1);
    if n_val >= n {
        return Err(NereError::Precondition(
            "validation split leaves no training rows".into(),
        ));
    }
    let train = indices.split_off(n_val);
    Ok((indices, train))
}

pub fn train(
    model: &mut NereModel,
    triple: &SequenceTensorTriple,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if triple.n == 0 {
        return Err(NereError::Precondition(
            "cannot train on an empty tensor triple".into(),
        ));
    }
    if config.input_len >= triple.t && config.input_len != 0 {
        return Err(NereError::Config(format!(
            "input_len {} must be below the window length {}",
            config.input_len, triple.t
        )));
    }
    let (val_rows, mut train_rows) = split_rows(triple.n, config.val_fraction, config.rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(1));

    let mut opt = Adam::new(config.lr);
    let mut best = model.snapshot();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad = 0;
    let mut history = Vec::new();
    for epoch in 0..config.max_epochs {
        train_rows.shuffle(&mut rng);
        let mut epoch_mse = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in train_rows.chunks(config.batch_size).enumerate() {
            let seq_len = if config.input_len == 0 {
                triple.t - 1
            } else {
                config.input_len
            };
            if batch.len() * seq_len < 2 {
                continue;
            }
            let drop_seed = config
                .rng_seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((epoch as u64) << 20)
                .wrapping_add(bi as u64);
            model.zero_grads();
            let res = batch_forward_backward(
                model,
                triple,
                batch,
                config.input_len,
                config.dropout,
                config.l2,
                drop_seed,
                true,
            )?;
            let mut params: Vec<(String, &mut Vec<f64>, &Vec<f64>)> = model
                .param_blocks_mut()
                .into_iter()
                .map(|(n, p, g)| (n, p, g as &Vec<f64>))
                .collect();
            opt.step(&mut params);
            drop(params);
            model.zero_grads();
            epoch_mse += res.mse * batch.len() as f64;
            seen += batch.len();
        }
        let train_mse = if seen > 0 { epoch_mse / seen as f64 } else { f64::NAN };
        let val_mse = evaluate_mse(model, triple, &val_rows, config.input_len)?;
        history.push(EpochStats { train_mse, val_mse });
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = model.snapshot();
            bad = 0;
        } else {
            bad += 1;
            if bad >= config.patience {
                break;
            }
        }
    }
    model.restore(&best)?;
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
        best_val_mse: best_val,
    })
}
