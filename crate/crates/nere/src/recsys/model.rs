//! The sequence model: per-categorical embeddings + continuous features +
//! content vectors per timestep, batch norm, bidirectional GRU, attention
//! reweighting, and a two-layer dense head predicting the next set's
//! content vector.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NereError, Result};
use crate::features::{
    SequenceTensorTriple, SET_CATEGORICAL_COLS, SET_CATEGORICAL_FIELDS, SET_META_COLS,
    USER_CATEGORICAL_COLS, USER_CATEGORICAL_FIELDS, USER_META_COLS,
};
use crate::features::CategoricalEncoder;
use crate::neuralcore::{
    Activation, AttentionWithContext, BatchNorm, Bidirectional, Dense, EmbeddingLayer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Both,
    Content,
    Metadata,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Both => "both",
            Variant::Content => "content",
            Variant::Metadata => "metadata",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = NereError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Variant::Both),
            "content" => Ok(Variant::Content),
            "metadata" => Ok(Variant::Metadata),
            other => Err(NereError::Config(format!(
                "unknown variant `{other}`; expected both, content, or metadata"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub field: String,
    pub col: usize,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub variant: Variant,
    pub user_cols: usize,
    pub set_cols: usize,
    pub content_dim: usize,
    pub user_categorical: Vec<CategoricalSpec>,
    pub set_categorical: Vec<CategoricalSpec>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dense_dim: usize,
    pub init_seed: u64,
}

impl ModelManifest {
    pub fn uses_content(&self) -> bool {
        self.variant != Variant::Metadata
    }

    pub fn uses_metadata(&self) -> bool {
        self.variant != Variant::Content
    }

    /// Width of one timestep's concatenated input vector.
    pub fn step_input_dim(&self) -> usize {
        let mut d = 0;
        if self.uses_metadata() {
            d += self.user_cols - self.user_categorical.len()
                + self.user_categorical.len() * self.embed_dim;
            d += self.set_cols - self.set_categorical.len()
                + self.set_categorical.len() * self.embed_dim;
        }
        if self.uses_content() {
            d += self.content_dim;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1 || self.hidden < 1 || self.dense_dim < 1 || self.content_dim < 1 {
            return Err(NereError::Config(
                "embed_dim, hidden, dense_dim, content_dim must all be >= 1".into(),
            ));
        }
        for spec in &self.user_categorical {
            if spec.col >= self.user_cols {
                return Err(NereError::Config(format!(
                    "user categorical column {} out of range",
                    spec.col
                )));
            }
        }
        for spec in &self.set_categorical {
            if spec.col >= self.set_cols {
                return Err(NereError::Config(format!(
                    "set categorical column {} out of range",
                    spec.col
                )));
            }
        }
        Ok(())
    }
}

/// Build a manifest matching the fixed tensor column layouts, taking
/// cardinalities from a fitted encoder.
pub fn manifest_from_encoders(
    enc: &CategoricalEncoder,
    variant: Variant,
    content_dim: usize,
    embed_dim: usize,
    hidden: usize,
    dense_dim: usize,
    init_seed: u64,
) -> ModelManifest {
    let user_categorical = USER_CATEGORICAL_COLS
        .iter()
        .zip(USER_CATEGORICAL_FIELDS)
        .map(|(col, field)| CategoricalSpec {
            field: field.to_string(),
            col: *col,
            cardinality: enc.cardinality(field),
        })
        .collect();
    let set_categorical = SET_CATEGORICAL_COLS
        .iter()
        .zip(SET_CATEGORICAL_FIELDS)
        .map(|(col, field)| CategoricalSpec {
            field: field.to_string(),
            col: *col,
            cardinality: enc.cardinality(field),
        })
        .collect();
    ModelManifest {
        variant,
        user_cols: USER_META_COLS,
        set_cols: SET_META_COLS,
        content_dim,
        user_categorical,
        set_categorical,
        embed_dim,
        hidden,
        dense_dim,
        init_seed,
    }
}

#[derive(Debug, Clone)]
pub struct NereModel {
    pub manifest: ModelManifest,
    /// one table per categorical column, user fields then set fields
    pub user_emb: Vec<EmbeddingLayer>,
    pub set_emb: Vec<EmbeddingLayer>,
    pub bn: BatchNorm,
    pub rnn: Bidirectional,
    pub attn: AttentionWithContext,
    pub d1: Dense,
    pub d2: Dense,
}

pub fn build_model(manifest: &ModelManifest) -> Result<NereModel> {
    manifest.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.init_seed);
    let mut user_emb = Vec::new();
    let mut set_emb = Vec::new();
    if manifest.uses_metadata() {
        for spec in &manifest.user_categorical {
            user_emb.push(EmbeddingLayer::new(
                &spec.field,
                spec.cardinality,
                manifest.embed_dim,
                &mut rng,
            ));
        }
        for spec in &manifest.set_categorical {
            set_emb.push(EmbeddingLayer::new(
                &spec.field,
                spec.cardinality,
                manifest.embed_dim,
                &mut rng,
            ));
        }
    }
    let d = manifest.step_input_dim();
    let bn = BatchNorm::new(d);
    let rnn = Bidirectional::new(d, manifest.hidden, &mut rng);
    let attn = AttentionWithContext::new(2 * manifest.hidden, &mut rng);
    let d1 = Dense::new(
        2 * manifest.hidden,
        manifest.dense_dim,
        Activation::Relu,
        &mut rng,
    );
    let d2 = Dense::new(
        manifest.dense_dim,
        manifest.content_dim,
        Activation::Linear,
        &mut rng,
    );
    Ok(NereModel {
        manifest: manifest.clone(),
        user_emb,
        set_emb,
        bn,
        rnn,
        attn,
        d1,
        d2,
    })
}

/// One window's raw (pre-encoding) step features.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStep {
    pub user: Vec<f64>,
    pub set: Vec<f64>,
    pub content: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub steps: Vec<WindowStep>,
}

/// Input steps (the first t−1 sessions) of one tensor row.
pub fn window_from_triple(triple: &SequenceTensorTriple, row: usize) -> Window {
    let t = triple.t;
    let cd = triple.content_dim;
    let steps = (0..t - 1)
        .map(|s| {
            let base = row * t + s;
            WindowStep {
                user: triple.user_meta[base * USER_META_COLS..(base + 1) * USER_META_COLS].to_vec(),
                set: triple.set_meta[base * SET_META_COLS..(base + 1) * SET_META_COLS].to_vec(),
                content: triple.set_content[base * cd..(base + 1) * cd].to_vec(),
            }
        })
        .collect();
    Window { steps }
}

/// Keep only the most recent `l` steps.
pub fn truncate_recent(window: &Window, l: usize) -> Result<Window> {
    if l < 1 || l > window.steps.len() {
        return Err(NereError::Config(format!(
            "input length {l} must lie in 1..={}",
            window.steps.len()
        )));
    }
    Ok(Window {
        steps: window.steps[window.steps.len() - l..].to_vec(),
    })
}

/// Concatenated step vector plus the embedding gather locations needed to
/// scatter gradients back.
pub struct StepEncoding {
    pub x: Vec<f64>,
    /// (is_user_table, table index, column looked up, offset in x)
    pub emb_slots: Vec<(bool, usize, usize, usize)>,
}

impl NereModel {
    pub fn encode_step(&self, step: &WindowStep) -> Result<StepEncoding> {
        let m = &self.manifest;
        if step.user.len() != m.user_cols
            || step.set.len() != m.set_cols
            || step.content.len() != m.content_dim
        {
            return Err(NereError::Shape(format!(
                "window step has dims ({}, {}, {}), manifest expects ({}, {}, {})",
                step.user.len(),
                step.set.len(),
                step.content.len(),
                m.user_cols,
                m.set_cols,
                m.content_dim
            )));
        }
        let mut x = Vec::with_capacity(m.step_input_dim());
        let mut emb_slots = Vec::new();
        if m.uses_metadata() {
            for c in 0..m.user_cols {
                if let Some(k) = m.user_categorical.iter().position(|s| s.col == c) {
                    let idx = step.user[c] as i64;
                    let v = self.user_emb[k].lookup(idx)?;
                    emb_slots.push((true, k, idx as usize, x.len()));
                    x.extend_from_slice(v);
                } else {
                    x.push(step.user[c]);
                }
            }
            for c in 0..m.set_cols {
                if let Some(k) = m.set_categorical.iter().position(|s| s.col == c) {
                    let idx = step.set[c] as i64;
                    let v = self.set_emb[k].lookup(idx)?;
                    emb_slots.push((false, k, idx as usize, x.len()));
                    x.extend_from_slice(v);
                } else {
                    x.push(step.set[c]);
                }
            }
        }
        if m.uses_content() {
            x.extend_from_slice(&step.content);
        }
        Ok(StepEncoding { x, emb_slots })
    }

    /// Inference forward: running batch-norm statistics, no dropout.
    /// Attention weights are cached on the model for heatmap export.
    pub fn predict_embedding(&mut self, window: &Window) -> Result<Vec<f64>> {
        if window.steps.is_empty() {
            return Err(NereError::Shape("window has no steps".into()));
        }
        let mut seq = Vec::with_capacity(window.steps.len());
        for step in &window.steps {
            let enc = self.encode_step(step)?;
            seq.push(self.bn.forward_infer(&enc.x));
        }
        let (rnn_out, _) = self.rnn.forward(&seq)?;
        let (attn_out, _) = self.attn.forward(&rnn_out)?;
        let mut summed = vec![0.0; 2 * self.manifest.hidden];
        for row in &attn_out {
            for (a, b) in summed.iter_mut().zip(row) {
                *a += b;
            }
        }
        let (h1, _) = self.d1.forward(&summed)?;
        let (out, _) = self.d2.forward(&h1)?;
        for v in &out {
            if !v.is_finite() {
                return Err(NereError::State("non-finite prediction".into()));
            }
        }
        Ok(out)
    }

    /// All trainable parameter blocks with their gradients, in a fixed
    /// deterministic order.
    pub fn param_blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>, &mut Vec<f64>)> = Vec::new();
        for (i, e) in self.user_emb.iter_mut().enumerate() {
            let EmbeddingLayer { w, gw, .. } = e;
            out.push((format!("user_emb.{i}"), w, gw));
        }
        for (i, e) in self.set_emb.iter_mut().enumerate() {
            let EmbeddingLayer { w, gw, .. } = e;
            out.push((format!("set_emb.{i}"), w, gw));
        }
        {
            let BatchNorm {
                gamma,
                beta,
                ggamma,
                gbeta,
                ..
            } = &mut self.bn;
            out.push(("bn.gamma".into(), gamma, ggamma));
            out.push(("bn.beta".into(), beta, gbeta));
        }
        for (tag, cell) in [("rnn.fwd", &mut self.rnn.fwd), ("rnn.bwd", &mut self.rnn.bwd)] {
            let crate::neuralcore::GruCell {
                w_z,
                u_z,
                b_z,
                w_r,
                u_r,
                b_r,
                w_h,
                u_h,
                b_h,
                gw_z,
                gu_z,
                gb_z,
                gw_r,
                gu_r,
                gb_r,
                gw_h,
                gu_h,
                gb_h,
                ..
            } = cell;
            out.push((format!("{tag}.w_z"), w_z, gw_z));
            out.push((format!("{tag}.u_z"), u_z, gu_z));
            out.push((format!("{tag}.b_z"), b_z, gb_z));
            out.push((format!("{tag}.w_r"), w_r, gw_r));
            out.push((format!("{tag}.u_r"), u_r, gu_r));
            out.push((format!("{tag}.b_r"), b_r, gb_r));
            out.push((format!("{tag}.w_h"), w_h, gw_h));
            out.push((format!("{tag}.u_h"), u_h, gu_h));
            out.push((format!("{tag}.b_h"), b_h, gb_h));
        }
        {
            let AttentionWithContext {
                w_w,
                b_w,
                u_w,
                gw_w,
                gb_w,
                gu_w,
                ..
            } = &mut self.attn;
            out.push(("attn.w_w".into(), w_w, gw_w));
            out.push(("attn.b_w".into(), b_w, gb_w));
            out.push(("attn.u_w".into(), u_w, gu_w));
        }
        for (tag, dense) in [("d1", &mut self.d1), ("d2", &mut self.d2)] {
            let Dense { w, b, gw, gb, .. } = dense;
            out.push((format!("{tag}.w"), w, gw));
            out.push((format!("{tag}.b"), b, gb));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, _, g) in self.param_blocks_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Parameter blocks plus batch-norm running statistics: everything a
    /// checkpoint must capture.
    fn state_names(&mut self) -> Vec<String> {
        let mut names: Vec<String> = self
            .param_blocks_mut()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        names.push("bn.running_mean".into());
        names.push("bn.running_var".into());
        names
    }

    fn state_values(&mut self) -> Vec<Vec<f64>> {
        let mut vals: Vec<Vec<f64>> = self
            .param_blocks_mut()
            .into_iter()
            .map(|(_, p, _)| p.clone())
            .collect();
        vals.push(self.bn.running_mean.clone());
        vals.push(self.bn.running_var.clone());
        vals
    }

    fn set_state_values(&mut self, vals: &[Vec<f64>]) -> Result<()> {
        let n_params = {
            let blocks = self.param_blocks_mut();
            if vals.len() != blocks.len() + 2 {
                return Err(NereError::State(format!(
                    "state has {} blocks, model expects {}",
                    vals.len(),
                    blocks.len() + 2
                )));
            }
            let n = blocks.len();
            for ((_, p, _), v) in blocks.into_iter().zip(vals) {
                if p.len() != v.len() {
                    return Err(NereError::State("state block length mismatch".into()));
                }
                p.copy_from_slice(v);
            }
            n
        };
        self.bn.running_mean.copy_from_slice(&vals[n_params]);
        self.bn.running_var.copy_from_slice(&vals[n_params + 1]);
        Ok(())
    }

    /// Snapshot of all state, used for best-epoch retention.
    pub fn snapshot(&mut self) -> Vec<Vec<f64>> {
        self.state_values()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        self.set_state_values(snapshot)
    }
}

/// Checkpoint bytes: `nere-checkpoint v1`, the manifest as one JSON line,
/// per-block name/length lines, then every value as little-endian f64.
pub fn checkpoint_bytes(model: &mut NereModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "nere-checkpoint v1")?;
    writeln!(out, "{}", serde_json::to_string(&model.manifest)?)?;
    let names = model.state_names();
    let values = model.state_values();
    writeln!(out, "blocks {}", names.len())?;
    for (n, v) in names.iter().zip(&values) {
        writeln!(out, "{n} {}", v.len())?;
    }
    let total: usize = values.iter().map(|v| v.len()).sum();
    writeln!(out, "blob {total}")?;
    for v in &values {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &mut NereModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NereModel> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let fmt = |line: usize, msg: String| NereError::Format {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != "nere-checkpoint v1" {
        return Err(fmt(1, "expected `nere-checkpoint v1`".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    let manifest: ModelManifest =
        serde_json::from_str(line.trim_end()).map_err(|e| fmt(2, format!("bad manifest: {e}")))?;
    line.clear();
    r.read_line(&mut line)?;
    let n_blocks: usize = line
        .trim_end()
        .strip_prefix("blocks ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt(3, "expected `blocks <n>`".into()))?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        line.clear();
        r.read_line(&mut line)?;
        let (name, len) = line
            .trim_end()
            .rsplit_once(' ')
            .ok_or_else(|| fmt(4 + i, "expected `<name> <len>`".into()))?;
        let len: usize = len
            .parse()
            .map_err(|_| fmt(4 + i, "bad block length".into()))?;
        blocks.push((name.to_string(), len));
    }
    line.clear();
    r.read_line(&mut line)?;
    let total: usize = line
        .trim_end()
        .strip_prefix("blob ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt(4 + n_blocks, "expected `blob <total>`".into()))?;
    if total != blocks.iter().map(|(_, l)| l).sum::<usize>() {
        return Err(fmt(4 + n_blocks, "blob total disagrees with blocks".into()));
    }
    let mut model = build_model(&manifest)?;
    let expect_names = model.state_names();
    if expect_names.len() != n_blocks
        || !expect_names
            .iter()
            .zip(&blocks)
            .all(|(a, (b, _))| a == b)
    {
        return Err(fmt(3, "checkpoint blocks do not match the manifest".into()));
    }
    let mut values = Vec::with_capacity(n_blocks);
    let mut buf = [0u8; 8];
    for (_, len) in &blocks {
        let mut v = Vec::with_capacity(*len);
        for _ in 0..*len {
            r.read_exact(&mut buf)
                .map_err(|_| fmt(5 + n_blocks, "truncated blob".into()))?;
            v.push(f64::from_le_bytes(buf));
        }
        values.push(v);
    }
    model.set_state_values(&values)?;
    Ok(model)
}

/// FNV-1a over the checkpoint byte serialization.
pub fn model_hash(model: &mut NereModel) -> Result<u64> {
    let bytes = checkpoint_bytes(model)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}
