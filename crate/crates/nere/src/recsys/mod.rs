//! Recommendation system assembly: the sequence model, its training
//! loop, graph-backed recommendation with a file cache, and the
//! matrix-factorization baseline.

pub mod cache;
pub mod mf;
pub mod model;
pub mod train;

pub use cache::{export_cache, load_cache, recommend, CacheEntry};
pub use mf::{mf_recommend, train_mf_baseline, MfBaseline, MfConfig};
pub use model::{
    build_model, checkpoint_bytes, load_checkpoint, manifest_from_encoders, model_hash,
    save_checkpoint, truncate_recent, window_from_triple, CategoricalSpec, ModelManifest,
    NereModel, Variant, Window, WindowStep,
};
pub use train::{
    batch_forward_backward, evaluate_mse, split_rows, train, BatchResult, EpochStats,
    TrainConfig, TrainHistory,
};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::annindex;
    use crate::error::NereError;
    use crate::features::{SequenceTensorTriple, SET_META_COLS, USER_META_COLS};

    fn test_manifest(variant: Variant) -> ModelManifest {
        ModelManifest {
            variant,
            user_cols: USER_META_COLS,
            set_cols: SET_META_COLS,
            content_dim: 8,
            user_categorical: [0usize, 5, 6, 7]
                .iter()
                .map(|&col| CategoricalSpec {
                    field: format!("u{col}"),
                    col,
                    cardinality: 6,
                })
                .collect(),
            set_categorical: [0usize, 3, 4, 8, 9]
                .iter()
                .map(|&col| CategoricalSpec {
                    field: format!("s{col}"),
                    col,
                    cardinality: 6,
                })
                .collect(),
            embed_dim: 4,
            hidden: 6,
            dense_dim: 10,
            init_seed: 21,
        }
    }

    fn test_triple(n: usize, t: usize, seed: u64) -> SequenceTensorTriple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cd = 8;
        let mut triple = SequenceTensorTriple {
            n,
            t,
            content_dim: cd,
            ..Default::default()
        };
        for row in 0..n {
            for _step in 0..t {
                for c in 0..USER_META_COLS {
                    triple.user_meta.push(if [0, 5, 6, 7].contains(&c) {
                        rng.gen_range(0..=6) as f64
                    } else {
                        rng.gen_range(0.0..1.0)
                    });
                }
                for c in 0..SET_META_COLS {
                    triple.set_meta.push(if [0, 3, 4, 8, 9].contains(&c) {
                        rng.gen_range(0..=6) as f64
                    } else {
                        rng.gen_range(0.0..1.0)
                    });
                }
                for _ in 0..cd {
                    triple.set_content.push(rng.gen_range(-1.0..1.0));
                }
            }
            for _ in 0..cd {
                triple.target.push(rng.gen_range(-1.0..1.0));
            }
            triple.row_keys.push((row as u64, "x".to_string()));
            triple.step_set_ids.push((0..t as u64).collect());
        }
        triple
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let m = test_manifest(Variant::Both);
        let mut a = build_model(&m).unwrap();
        let mut b = build_model(&m).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn variant_dimensions_and_containment() {
        let both = test_manifest(Variant::Both);
        let content = test_manifest(Variant::Content);
        let metadata = test_manifest(Variant::Metadata);
        assert_eq!(content.step_input_dim() + metadata.step_input_dim(), both.step_input_dim());
        assert_eq!(content.step_input_dim(), 8);
        let model = build_model(&content).unwrap();
        assert!(model.user_emb.is_empty() && model.set_emb.is_empty());
        // metadata variant runs a full forward with the content stream
        // excluded from its computational graph
        let mut model = build_model(&metadata).unwrap();
        assert!(!model.manifest.uses_content());
        let triple = test_triple(3, 5, 1);
        let w = window_from_triple(&triple, 0);
        let enc = model.encode_step(&w.steps[0]).unwrap();
        assert_eq!(enc.x.len(), metadata.step_input_dim());
        let out = model.predict_embedding(&w).unwrap();
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn out_of_cardinality_index_errors_at_forward() {
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        let triple = test_triple(2, 5, 2);
        let mut w = window_from_triple(&triple, 0);
        w.steps[0].user[0] = 9.0; // cardinality is 6
        let err = model.predict_embedding(&w).unwrap_err();
        assert!(matches!(err, NereError::Index { .. }));
    }

    #[test]
    fn lr_zero_leaves_parameters_unchanged() {
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        let before = model.snapshot();
        let triple = test_triple(12, 5, 3);
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 3,
            batch_size: 4,
            patience: 10,
            dropout: 0.0,
            l2: 0.0,
            ..Default::default()
        };
        let history = train(&mut model, &triple, &cfg).unwrap();
        // params identical up to batch-norm running moments, which are
        // statistics rather than optimized parameters
        let after = model.snapshot();
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            if i < before.len() - 2 {
                assert_eq!(a, b, "block {i} changed");
            }
        }
        assert!(history.epochs.len() <= 3);
    }

    #[test]
    fn history_bounded_by_max_epochs_and_early_stop() {
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        let triple = test_triple(12, 5, 4);
        let cfg = TrainConfig {
            max_epochs: 8,
            batch_size: 4,
            patience: 2,
            dropout: 0.0,
            ..Default::default()
        };
        let history = train(&mut model, &triple, &cfg).unwrap();
        assert!(history.epochs.len() <= 8);
        assert!(history.best_epoch < history.epochs.len());
        let best_seen = history
            .epochs
            .iter()
            .map(|e| e.val_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(history.best_val_mse, best_seen);
    }

    #[test]
    fn empty_tensors_rejected() {
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        let triple = test_triple(0, 5, 5);
        assert!(matches!(
            train(&mut model, &triple, &TrainConfig::default()),
            Err(NereError::Precondition(_))
        ));
    }

    #[test]
    fn predict_is_deterministic_with_correct_shape() {
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        let triple = test_triple(2, 5, 6);
        let w = window_from_triple(&triple, 1);
        let a = model.predict_embedding(&w).unwrap();
        let b = model.predict_embedding(&w).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn zero_parameters_predict_zero() {
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        for (_, p, _) in model.param_blocks_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let triple = test_triple(1, 5, 7);
        let out = model
            .predict_embedding(&window_from_triple(&triple, 0))
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_model_memorizes_tiny_dataset() {
        let mut m = test_manifest(Variant::Both);
        m.hidden = 8;
        let mut model = build_model(&m).unwrap();
        let triple = test_triple(8, 5, 8);
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 200,
            lr: 3e-3,
            patience: 200,
            val_fraction: 0.13, // one validation row
            dropout: 0.0,
            l2: 0.0,
            input_len: 0,
            rng_seed: 5,
        };
        let history = train(&mut model, &triple, &cfg).unwrap();
        let last = history.epochs.last().unwrap();
        let first = history.epochs.first().unwrap();
        assert!(
            last.train_mse < 0.1 * first.train_mse,
            "train mse {} -> {}",
            first.train_mse,
            last.train_mse
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        // perturb away from init so the test is not vacuous
        let triple = test_triple(8, 5, 9);
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            patience: 5,
            dropout: 0.0,
            ..Default::default()
        };
        train(&mut model, &triple, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&mut model, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.manifest, model.manifest);
        assert_eq!(loaded.snapshot(), model.snapshot());
        assert_eq!(
            model_hash(&mut loaded).unwrap(),
            model_hash(&mut model).unwrap()
        );
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NereError::Format { .. })
        ));
    }

    #[test]
    fn cache_round_trip_truncation_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recs.cache");
        let entries = vec![
            CacheEntry {
                user_id: 4,
                subject: "biology".into(),
                set_ids: vec![9, 2, 5],
                distances: vec![0.1, 0.4, 0.45],
            },
            CacheEntry {
                user_id: 7,
                subject: "us_history".into(),
                set_ids: vec![1],
                distances: vec![0.9],
            },
        ];
        export_cache(&path, 0xabcd, "tag-1", &entries).unwrap();
        let (hash, tag, loaded) = load_cache(&path).unwrap();
        assert_eq!(hash, 0xabcd);
        assert_eq!(tag, "tag-1");
        assert_eq!(loaded, entries);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        assert!(matches!(load_cache(&path), Err(NereError::Format { .. })));

        export_cache(&path, 1, "t", &[]).unwrap();
        let (_, _, empty) = load_cache(&path).unwrap();
        assert!(empty.is_empty());

        let bad = CacheEntry {
            user_id: 1,
            subject: "x".into(),
            set_ids: vec![1, 2],
            distances: vec![0.5, 0.4],
        };
        assert!(export_cache(&path, 1, "t", &[bad]).is_err());
    }

    #[test]
    fn recommend_returns_unique_in_catalog_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let graph = annindex::build(
            &points,
            &annindex::IndexConfig {
                k: 6,
                ..Default::default()
            },
        )
        .unwrap();
        let ids: Vec<u64> = (0..40u64).map(|i| 1000 + i).collect();
        let m = test_manifest(Variant::Both);
        let mut model = build_model(&m).unwrap();
        let triple = test_triple(1, 5, 11);
        let w = window_from_triple(&triple, 0);
        let recs = recommend(&mut model, &graph, &ids, &w, 10).unwrap();
        assert_eq!(recs.len(), 10);
        let mut seen: Vec<u64> = recs.iter().map(|(id, _)| *id).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        assert!(seen.iter().all(|id| ids.contains(id)));
        assert!(recs.windows(2).all(|p| p[0].1 <= p[1].1));
        assert!(recommend(&mut model, &graph, &ids, &w, 41).is_err());
    }

    #[test]
    fn mf_single_positive_ranks_first() {
        let interactions = vec![(1u64, 7u64), (1, 7)];
        // give the single user some unrelated candidate items via fake
        // interactions from other users
        let mut all = interactions.clone();
        for j in 0..10u64 {
            all.push((100 + j, j));
        }
        let cfg = MfConfig {
            d: 8,
            epochs: 80,
            ..Default::default()
        };
        let model = train_mf_baseline(&all, &BTreeMap::new(), &BTreeMap::new(), &cfg).unwrap();
        let top = mf_recommend(&model, 1, 1).unwrap();
        assert_eq!(top, vec![7]);
    }

    #[test]
    fn mf_config_and_precondition_errors() {
        let cfg = MfConfig {
            d: 0,
            ..Default::default()
        };
        assert!(matches!(
            train_mf_baseline(&[(1, 1)], &BTreeMap::new(), &BTreeMap::new(), &cfg),
            Err(NereError::Config(_))
        ));
        assert!(matches!(
            train_mf_baseline(&[], &BTreeMap::new(), &BTreeMap::new(), &MfConfig::default()),
            Err(NereError::Precondition(_))
        ));
        let model = train_mf_baseline(
            &[(1, 1), (1, 2)],
            &BTreeMap::new(),
            &BTreeMap::new(),
            &MfConfig::default(),
        )
        .unwrap();
        assert!(mf_recommend(&model, 1, 3).is_err());
        assert!(matches!(
            mf_recommend(&model, 99, 1),
            Err(NereError::State(_))
        ));
    }

    #[test]
    fn truncate_recent_keeps_last_steps() {
        let triple = test_triple(1, 5, 12);
        let w = window_from_triple(&triple, 0);
        assert_eq!(w.steps.len(), 4);
        let t2 = truncate_recent(&w, 2).unwrap();
        assert_eq!(t2.steps, w.steps[2..].to_vec());
        assert!(truncate_recent(&w, 0).is_err());
        assert!(truncate_recent(&w, 5).is_err());
    }
}
