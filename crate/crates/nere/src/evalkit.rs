//! Evaluation protocol: recall@k against planted next sets, per-dimension
//! R², the variant ablation suite, the input-length sweep, and attention
//! heatmap export.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annindex::KnnGraph;
use crate::error::{NereError, Result};
use crate::features::SequenceTensorTriple;
use crate::recsys::{
    build_model, recommend, train, window_from_triple, ModelManifest, NereModel, TrainConfig,
    TrainHistory, Variant,
};

/// Fraction of test rows whose true next set id appears in the top-k list
/// produced by `recommend_fn(row) -> ordered set ids`.
pub fn recall_at_k<F>(
    mut recommend_fn: F,
    test_rows: &[usize],
    truths: &BTreeMap<usize, u64>,
    k: usize,
) -> Result<f64>
where
    F: FnMut(usize) -> Result<Vec<u64>>,
{
    if k < 1 {
        return Err(NereError::Config("recall k must be >= 1".into()));
    }
    if test_rows.is_empty() {
        return Err(NereError::Precondition(
            "recall over an empty test set is undefined".into(),
        ));
    }
    let mut hits = 0usize;
    for &row in test_rows {
        let truth = truths.get(&row).ok_or_else(|| {
            NereError::Precondition(format!("no truth id for test row {row}"))
        })?;
        let recs = recommend_fn(row)?;
        if recs.iter().take(k).any(|id| id == truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_rows.len() as f64)
}

/// Per-dimension coefficient of determination, uniformly averaged.
/// Dimensions with zero variance in the truth contribute 0.
pub fn r_squared(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(NereError::Shape(format!(
            "r_squared got {} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(NereError::Precondition(
            "r_squared needs at least 2 rows".into(),
        ));
    }
    let d = truth[0].len();
    if pred.iter().chain(truth).any(|v| v.len() != d) {
        return Err(NereError::Shape("ragged rows in r_squared".into()));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean: f64 = truth.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let ss_tot: f64 = truth.iter().map(|r| (r[j] - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            continue; // contributes 0
        }
        let ss_res: f64 = pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (t[j] - p[j]).powi(2))
            .sum();
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub r_squared: f64,
    pub recall_at_100: f64,
    pub n_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthResult {
    pub input_len: usize,
    pub r_squared: f64,
    pub recall_at_100: f64,
    pub n_evaluated: usize,
}

/// Everything a single trained configuration needs for scoring: the
/// model plus the retrieval graph over catalog content vectors.
pub struct EvalContext<'a> {
    pub triple: &'a SequenceTensorTriple,
    pub graph: &'a KnnGraph,
    /// graph point index -> catalog set id
    pub catalog_ids: &'a [u64],
    pub test_rows: &'a [usize],
    /// test row -> true next set id
    pub truths: &'a BTreeMap<usize, u64>,
    pub k: usize,
}

/// Score one trained model: recall@k through the graph and R² of raw
/// predictions, both over the context's test rows.
pub fn evaluate_model(
    model: &mut NereModel,
    ctx: &EvalContext,
    input_len: usize,
) -> Result<(f64, f64)> {
    let seq_len = if input_len == 0 {
        ctx.triple.t - 1
    } else {
        input_len
    };
    let mut preds = Vec::with_capacity(ctx.test_rows.len());
    let mut truth_vecs = Vec::with_capacity(ctx.test_rows.len());
    let mut rec_lists: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for &row in ctx.test_rows {
        let window = crate::recsys::truncate_recent(&window_from_triple(ctx.triple, row), seq_len)?;
        let pred = model.predict_embedding(&window)?;
        let recs = recommend(model, ctx.graph, ctx.catalog_ids, &window, ctx.k)?;
        rec_lists.insert(row, recs.into_iter().map(|(id, _)| id).collect());
        truth_vecs.push(
            ctx.triple.target[row * ctx.triple.content_dim..(row + 1) * ctx.triple.content_dim]
                .to_vec(),
        );
        preds.push(pred);
    }
    let recall = recall_at_k(
        |row| Ok(rec_lists[&row].clone()),
        ctx.test_rows,
        ctx.truths,
        ctx.k,
    )?;
    let r2 = r_squared(&preds, &truth_vecs)?;
    Ok((recall, r2))
}

/// Train and evaluate one model per variant on identical data and seeds.
pub fn ablation_suite(
    base_manifest: &ModelManifest,
    train_config: &TrainConfig,
    ctx: &EvalContext,
    train_triple: &SequenceTensorTriple,
    variants: &[Variant],
) -> Result<Vec<(VariantResult, TrainHistory)>> {
    let mut seen = Vec::new();
    for v in variants {
        if seen.contains(v) {
            return Err(NereError::Config(format!(
                "variant `{}` listed twice",
                v.as_str()
            )));
        }
        seen.push(*v);
    }
    let mut out = Vec::new();
    for &variant in variants {
        let mut manifest = base_manifest.clone();
        manifest.variant = variant;
        let mut model = build_model(&manifest)?;
        let history = train(&mut model, train_triple, train_config)?;
        let (recall, r2) = evaluate_model(&mut model, ctx, train_config.input_len)?;
        out.push((
            VariantResult {
                variant: variant.as_str().to_string(),
                r_squared: r2,
                recall_at_100: recall,
                n_evaluated: ctx.test_rows.len(),
            },
            history,
        ));
    }
    Ok(out)
}

/// Train one model per input length, truncating windows to their most
/// recent L steps.
pub fn sequence_length_sweep(
    base_manifest: &ModelManifest,
    train_config: &TrainConfig,
    ctx: &EvalContext,
    train_triple: &SequenceTensorTriple,
    lengths: &[usize],
) -> Result<Vec<(LengthResult, TrainHistory)>> {
    let t = train_triple.t;
    let mut out = Vec::new();
    for &l in lengths {
        if l >= t {
            return Err(NereError::Config(format!(
                "input length {l} must be below the window length {t}"
            )));
        }
        if l < 1 {
            return Err(NereError::Config("input length must be >= 1".into()));
        }
        let mut cfg = train_config.clone();
        cfg.input_len = l;
        let mut model = build_model(base_manifest)?;
        let history = train(&mut model, train_triple, &cfg)?;
        let (recall, r2) = evaluate_model(&mut model, ctx, l)?;
        out.push((
            LengthResult {
                input_len: l,
                r_squared: r2,
                recall_at_100: recall,
                n_evaluated: ctx.test_rows.len(),
            },
            history,
        ));
    }
    Ok(out)
}

/// The attention weights cached by the model's most recent forward pass:
/// rows are timesteps, columns features.
pub fn attention_heatmap(model: &NereModel) -> Result<Vec<Vec<f64>>> {
    model
        .attn
        .last_alpha
        .clone()
        .ok_or_else(|| NereError::State("no forward pass has been run yet".into()))
}

/// Write the heatmap as a plain-text grid and an 8-bit portable graymap
/// with brightness proportional to α.
pub fn export_heatmap(alpha: &[Vec<f64>], txt_path: &Path, pgm_path: &Path) -> Result<()> {
    if alpha.is_empty() || alpha[0].is_empty() {
        return Err(NereError::Precondition("empty attention matrix".into()));
    }
    let cols = alpha[0].len();
    if alpha.iter().any(|r| r.len() != cols) {
        return Err(NereError::Shape("ragged attention matrix".into()));
    }
    let mut txt = BufWriter::new(std::fs::File::create(txt_path)?);
    for row in alpha {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(txt, "{}", line.join(" "))?;
    }
    drop(txt);

    let max = alpha
        .iter()
        .flat_map(|r| r.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut pgm = BufWriter::new(std::fs::File::create(pgm_path)?);
    writeln!(pgm, "P2")?;
    writeln!(pgm, "{} {}", cols, alpha.len())?;
    writeln!(pgm, "255")?;
    for row in alpha {
        let line: Vec<String> = row
            .iter()
            .map(|v| {
                let px = if max > 0.0 {
                    (v / max * 255.0).round() as i64
                } else {
                    0
                };
                px.clamp(0, 255).to_string()
            })
            .collect();
        writeln!(pgm, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Per-row binomial standard error of a recall estimate.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recall_perfect_recommender_is_one() {
        let rows: Vec<usize> = (0..10).collect();
        let truths: BTreeMap<usize, u64> = rows.iter().map(|&r| (r, r as u64 + 100)).collect();
        let recall = recall_at_k(
            |row| Ok(vec![row as u64 + 100, 1, 2]),
            &rows,
            &truths,
            3,
        )
        .unwrap();
        assert_eq!(recall, 1.0);
    }

    #[test]
    fn recall_random_recommender_matches_chance() {
        let n_sets = 200u64;
        let k = 20usize;
        let trials = 10_000usize;
        let rows: Vec<usize> = (0..trials).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truths: BTreeMap<usize, u64> = rows
            .iter()
            .map(|&r| (r, rng.gen_range(0..n_sets)))
            .collect();
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let recall = recall_at_k(
            |_row| {
                let mut ids: Vec<u64> = (0..n_sets).collect();
                for i in (1..ids.len()).rev() {
                    let j = rng2.gen_range(0..=i);
                    ids.swap(i, j);
                }
                ids.truncate(k);
                Ok(ids)
            },
            &rows,
            &truths,
            k,
        )
        .unwrap();
        let p = k as f64 / n_sets as f64;
        let se = binomial_se(p, trials);
        assert!(
            (recall - p).abs() < 3.0 * se,
            "recall {recall}, chance {p}, se {se}"
        );
    }

    #[test]
    fn recall_errors() {
        let truths = BTreeMap::new();
        assert!(matches!(
            recall_at_k(|_| Ok(vec![]), &[], &truths, 10),
            Err(NereError::Precondition(_))
        ));
        assert!(matches!(
            recall_at_k(|_| Ok(vec![]), &[0], &truths, 0),
            Err(NereError::Config(_))
        ));
    }

    #[test]
    fn recall_monotone_in_k() {
        let rows: Vec<usize> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truths: BTreeMap<usize, u64> =
            rows.iter().map(|&r| (r, rng.gen_range(0..30))).collect();
        let lists: BTreeMap<usize, Vec<u64>> = rows
            .iter()
            .map(|&r| {
                let mut ids: Vec<u64> = (0..30).collect();
                for i in (1..ids.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    ids.swap(i, j);
                }
                (r, ids)
            })
            .collect();
        let mut prev = 0.0;
        for k in [1, 3, 10, 30] {
            let recall =
                recall_at_k(|row| Ok(lists[&row].clone()), &rows, &truths, k).unwrap();
            assert!(recall >= prev);
            prev = recall;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn r_squared_perfect_and_mean_predictions() {
        let truth = vec![vec![1.0, 5.0], vec![2.0, 7.0], vec![3.0, 9.0]];
        assert!((r_squared(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
        let means = vec![vec![2.0, 7.0]; 3];
        assert!(r_squared(&means, &truth).unwrap().abs() < 1e-12);
    }

    #[test]
    fn r_squared_hand_computed_case() {
        // dim 0: truth 1,2,3  pred 1.1,1.9,3.2; mean 2, ss_tot 2
        //   ss_res = 0.01+0.01+0.04 = 0.06 -> r2 = 1 - 0.03 = 0.97
        // dim 1: truth 4,4,4 (zero variance) -> contributes 0
        let truth = vec![vec![1.0, 4.0], vec![2.0, 4.0], vec![3.0, 4.0]];
        let pred = vec![vec![1.1, 0.0], vec![1.9, 9.0], vec![3.2, 4.0]];
        let got = r_squared(&pred, &truth).unwrap();
        assert!((got - 0.97 / 2.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn r_squared_shift_invariance_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let pred: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let base = r_squared(&pred, &truth).unwrap();
        let shift = [0.7, -2.0, 5.0];
        let shifted_pred: Vec<Vec<f64>> = pred
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(v, s)| v + s).collect())
            .collect();
        let shifted_truth: Vec<Vec<f64>> = truth
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(v, s)| v + s).collect())
            .collect();
        let moved = r_squared(&shifted_pred, &shifted_truth).unwrap();
        assert!((base - moved).abs() < 1e-9);
        assert!(r_squared(&pred[..1], &truth[..1]).is_err());
    }

    #[test]
    fn heatmap_requires_forward_pass() {
        let manifest = crate::recsys::ModelManifest {
            variant: Variant::Content,
            user_cols: 13,
            set_cols: 12,
            content_dim: 4,
            user_categorical: vec![],
            set_categorical: vec![],
            embed_dim: 2,
            hidden: 3,
            dense_dim: 4,
            init_seed: 1,
        };
        let model = build_model(&manifest).unwrap();
        assert!(matches!(
            attention_heatmap(&model),
            Err(NereError::State(_))
        ));
    }

    #[test]
    fn heatmap_rows_sum_to_one_and_export_argmax_matches() {
        let manifest = crate::recsys::ModelManifest {
            variant: Variant::Content,
            user_cols: 13,
            set_cols: 12,
            content_dim: 6,
            user_categorical: vec![],
            set_categorical: vec![],
            embed_dim: 2,
            hidden: 4,
            dense_dim: 5,
            init_seed: 2,
        };
        let mut model = build_model(&manifest).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let window = crate::recsys::Window {
            steps: (0..4)
                .map(|_| crate::recsys::WindowStep {
                    user: vec![0.0; 13],
                    set: vec![0.0; 12],
                    content: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect(),
        };
        model.predict_embedding(&window).unwrap();
        let alpha = attention_heatmap(&model).unwrap();
        assert_eq!(alpha.len(), 4);
        for row in &alpha {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("alpha.txt");
        let pgm = dir.path().join("alpha.pgm");
        export_heatmap(&alpha, &txt, &pgm).unwrap();

        // argmax of the exported pixels equals argmax of the matrix
        let body = std::fs::read_to_string(&pgm).unwrap();
        let pixels: Vec<i64> = body
            .lines()
            .skip(3)
            .flat_map(|l| l.split_whitespace().map(|v| v.parse().unwrap()))
            .collect();
        let flat: Vec<f64> = alpha.iter().flatten().cloned().collect();
        let arg_px = pixels
            .iter()
            .enumerate()
            .max_by_key(|(_, v)| **v)
            .unwrap()
            .0;
        let arg_mat = flat
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(arg_px, arg_mat);
        assert_eq!(pixels[arg_px], 255);
        let grid = std::fs::read_to_string(&txt).unwrap();
        assert_eq!(grid.lines().count(), 4);
    }

    #[test]
    fn duplicate_variants_rejected() {
        let manifest = crate::recsys::ModelManifest {
            variant: Variant::Both,
            user_cols: 13,
            set_cols: 12,
            content_dim: 4,
            user_categorical: vec![],
            set_categorical: vec![],
            embed_dim: 2,
            hidden: 3,
            dense_dim: 4,
            init_seed: 1,
        };
        let triple = SequenceTensorTriple {
            t: 5,
            content_dim: 4,
            ..Default::default()
        };
        let truths = BTreeMap::new();
        let points = vec![vec![1.0, 0.0, 0.0, 0.0]; 6];
        let graph = crate::annindex::build(
            &points,
            &crate::annindex::IndexConfig {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let ids = vec![0u64; 6];
        let ctx = EvalContext {
            triple: &triple,
            graph: &graph,
            catalog_ids: &ids,
            test_rows: &[],
            truths: &truths,
            k: 2,
        };
        let err = ablation_suite(
            &manifest,
            &TrainConfig::default(),
            &ctx,
            &triple,
            &[Variant::Both, Variant::Both],
        )
        .unwrap_err();
        assert!(matches!(err, NereError::Config(_)));
    }

    #[test]
    fn sweep_rejects_length_at_or_above_window() {
        let manifest = crate::recsys::ModelManifest {
            variant: Variant::Both,
            user_cols: 13,
            set_cols: 12,
            content_dim: 4,
            user_categorical: vec![],
            set_categorical: vec![],
            embed_dim: 2,
            hidden: 3,
            dense_dim: 4,
            init_seed: 1,
        };
        let triple = SequenceTensorTriple {
            t: 5,
            content_dim: 4,
            ..Default::default()
        };
        let truths = BTreeMap::new();
        let points = vec![vec![1.0, 0.0, 0.0, 0.0]; 6];
        let graph = crate::annindex::build(
            &points,
            &crate::annindex::IndexConfig {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let ids = vec![0u64; 6];
        let ctx = EvalContext {
            triple: &triple,
            graph: &graph,
            catalog_ids: &ids,
            test_rows: &[],
            truths: &truths,
            k: 2,
        };
        let err = sequence_length_sweep(
            &manifest,
            &TrainConfig::default(),
            &ctx,
            &triple,
            &[5],
        )
        .unwrap_err();
        assert!(matches!(err, NereError::Config(_)));
    }
}
