//! Pipeline entry point: synth → embed → features → train → index →
//! recommend → evaluate, plus the ablation and sequence-length studies.
//! Every stage logs its effective configuration to a run manifest and
//! reads/writes only the documented artifact formats.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use nere::annindex;
use nere::config::{Artifacts, RunConfig};
use nere::error::{NereError, Result};
use nere::evalkit;
use nere::features;
use nere::recsys;
use nere::synthgen::{self, SetRecord, UserSessionRecord};
use nere::textvec;

#[derive(Parser)]
#[command(name = "nere", about = "Sequential study-set recommendation pipeline")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the global seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override a single config value, e.g. --set train.lr=0.01
    #[arg(long = "set", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog and session log
    Synth,
    /// Train token embeddings and store the set-vector table
    Embed,
    /// Assemble the aligned input tensors
    Features,
    /// Train the sequence model
    Train,
    /// Build the approximate nearest-neighbor graph over set vectors
    Index,
    /// Produce per-user recommendation lists into the cache file
    Recommend,
    /// Score the trained model on held-out windows
    Evaluate,
    /// Train and score the both/content/metadata variants
    Ablate,
    /// Train and score one model per input sequence length
    Sweep,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out.display().to_string();
    }
    let art = Artifacts::new(&cfg.out_dir());
    std::fs::create_dir_all(&art.dir)?;
    let name = match cli.command {
        Command::Synth => "synth",
        Command::Embed => "embed",
        Command::Features => "features",
        Command::Train => "train",
        Command::Index => "index",
        Command::Recommend => "recommend",
        Command::Evaluate => "evaluate",
        Command::Ablate => "ablate",
        Command::Sweep => "sweep",
    };
    std::fs::write(art.manifest(name), cfg.to_toml_string()?)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &art),
        Command::Embed => cmd_embed(&cfg, &art),
        Command::Features => cmd_features(&cfg, &art),
        Command::Train => cmd_train(&cfg, &art),
        Command::Index => cmd_index(&cfg, &art),
        Command::Recommend => cmd_recommend(&cfg, &art),
        Command::Evaluate => cmd_evaluate(&cfg, &art),
        Command::Ablate => cmd_ablate(&cfg, &art),
        Command::Sweep => cmd_sweep(&cfg, &art),
    }
}

fn effective_synth(cfg: &RunConfig) -> synthgen::SynthConfig {
    let mut s = cfg.synth.clone();
    s.rng_seed = cfg.stage_seed(s.rng_seed);
    s
}

fn effective_train(cfg: &RunConfig) -> recsys::TrainConfig {
    let mut t = cfg.train.clone();
    t.rng_seed = cfg.stage_seed(t.rng_seed);
    t
}

fn cmd_synth(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    let sc = effective_synth(cfg);
    let catalog = synthgen::generate_catalog(&sc)?;
    let sessions = synthgen::generate_sessions(&sc, &catalog)?;
    synthgen::write_jsonl(&catalog, &art.catalog())?;
    synthgen::write_jsonl(&sessions, &art.sessions())?;
    eprintln!(
        "synth: {} sets, {} sessions -> {}",
        catalog.len(),
        sessions.len(),
        art.dir.display()
    );
    Ok(())
}

fn load_catalog(art: &Artifacts) -> Result<Vec<SetRecord>> {
    art.require(&art.catalog(), "synth")?;
    synthgen::read_jsonl(&art.catalog())
}

fn load_sessions(art: &Artifacts) -> Result<Vec<UserSessionRecord>> {
    art.require(&art.sessions(), "synth")?;
    synthgen::read_jsonl(&art.sessions())
}

fn cmd_embed(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    let catalog = load_catalog(art)?;
    let corpus: Vec<Vec<String>> = catalog
        .iter()
        .map(|s| {
            let mut doc = textvec::tokenize(&s.terms);
            doc.extend(textvec::tokenize(&s.definitions));
            doc
        })
        .collect();
    let vocab = textvec::Vocabulary::build(&corpus);
    let matrix = textvec::build_cooccurrence(&corpus, &vocab, cfg.embed.window)?;
    let mut gc = cfg.embed.glove.clone();
    gc.seed = cfg.stage_seed(gc.seed);
    let (table, losses) = textvec::train_glove(&matrix, &vocab, &gc)?;
    textvec::save_table(&table, &art.glove())?;
    eprintln!(
        "embed: vocab {} -> {} (final loss {:.4})",
        vocab.len(),
        art.glove().display(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_set_vectors(
    art: &Artifacts,
    catalog: &[SetRecord],
) -> Result<BTreeMap<u64, Vec<f64>>> {
    art.require(&art.glove(), "embed")?;
    let table = textvec::load_table(&art.glove())?;
    Ok(catalog
        .iter()
        .map(|s| (s.set_id, textvec::unit(&textvec::set_vector(s, &table))))
        .collect())
}

fn cmd_features(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    let catalog = load_catalog(art)?;
    let sessions = load_sessions(art)?;
    let vectors = load_set_vectors(art, &catalog)?;
    let (enc, scaler) = features::fit_encoders(&sessions, &catalog)?;
    let triple = features::assemble_sequences(
        &sessions,
        &catalog,
        &vectors,
        &enc,
        &scaler,
        cfg.features.window,
    )?;
    let t = triple.t;
    features::save_tensor(
        &art.user_meta(),
        &[triple.n, t, features::USER_META_COLS],
        &triple.user_meta,
    )?;
    features::save_tensor(
        &art.set_meta(),
        &[triple.n, t, features::SET_META_COLS],
        &triple.set_meta,
    )?;
    features::save_tensor(
        &art.content(),
        &[triple.n, t, triple.content_dim],
        &triple.set_content,
    )?;
    features::save_tensor(&art.target(), &[triple.n, triple.content_dim], &triple.target)?;
    features::save_row_keys(&art.row_keys(), &triple.row_keys)?;
    let step_ids: Vec<f64> = triple
        .step_set_ids
        .iter()
        .flat_map(|r| r.iter().map(|&v| v as f64))
        .collect();
    features::save_tensor(&art.step_ids(), &[triple.n, t], &step_ids)?;
    eprintln!("features: {} windows of {} sessions", triple.n, t);
    Ok(())
}

fn load_triple(art: &Artifacts) -> Result<features::SequenceTensorTriple> {
    for p in [
        art.user_meta(),
        art.set_meta(),
        art.content(),
        art.target(),
        art.row_keys(),
        art.step_ids(),
    ] {
        art.require(&p, "features")?;
    }
    let (us, user_meta) = features::load_tensor(&art.user_meta())?;
    let (ss, set_meta) = features::load_tensor(&art.set_meta())?;
    let (cs, set_content) = features::load_tensor(&art.content())?;
    let (ts, target) = features::load_tensor(&art.target())?;
    let (is, step_ids_flat) = features::load_tensor(&art.step_ids())?;
    let row_keys = features::load_row_keys(&art.row_keys())?;
    if us.len() != 3 || ss.len() != 3 || cs.len() != 3 || ts.len() != 2 || is.len() != 2 {
        return Err(NereError::Shape("tensor ranks do not match the layout".into()));
    }
    let (n, t) = (us[0], us[1]);
    if ss[0] != n || cs[0] != n || ts[0] != n || is[0] != n || row_keys.len() != n {
        return Err(NereError::Shape("tensor row counts disagree".into()));
    }
    if ss[1] != t || cs[1] != t || is[1] != t {
        return Err(NereError::Shape("tensor window lengths disagree".into()));
    }
    let content_dim = cs[2];
    let step_set_ids: Vec<Vec<u64>> = (0..n)
        .map(|r| {
            step_ids_flat[r * t..(r + 1) * t]
                .iter()
                .map(|&v| v as u64)
                .collect()
        })
        .collect();
    Ok(features::SequenceTensorTriple {
        user_meta,
        set_meta,
        set_content,
        target,
        row_keys,
        step_set_ids,
        n,
        t,
        content_dim,
    })
}

fn build_manifest(
    cfg: &RunConfig,
    art: &Artifacts,
    content_dim: usize,
) -> Result<recsys::ModelManifest> {
    let catalog = load_catalog(art)?;
    let sessions = load_sessions(art)?;
    let (enc, _) = features::fit_encoders(&sessions, &catalog)?;
    Ok(recsys::manifest_from_encoders(
        &enc,
        recsys::Variant::from_str(&cfg.model.variant)?,
        content_dim,
        cfg.model.embed_dim,
        cfg.model.hidden,
        cfg.model.dense_dim,
        cfg.stage_seed(cfg.model.init_seed),
    ))
}

fn cmd_train(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    let triple = load_triple(art)?;
    let manifest = build_manifest(cfg, art, triple.content_dim)?;
    let mut model = recsys::build_model(&manifest)?;
    let tc = effective_train(cfg);
    let history = recsys::train(&mut model, &triple, &tc)?;
    recsys::save_checkpoint(&mut model, &art.checkpoint())?;
    let mut text = serde_json::to_string_pretty(&history)?;
    text.push('\n');
    std::fs::write(art.history(), text)?;
    eprintln!(
        "train: {} epochs, best validation mse {:.6} (epoch {})",
        history.epochs.len(),
        history.best_val_mse,
        history.best_epoch
    );
    Ok(())
}

fn cmd_index(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    let catalog = load_catalog(art)?;
    let vectors = load_set_vectors(art, &catalog)?;
    let points: Vec<Vec<f64>> = vectors.values().cloned().collect();
    let mut ic = cfg.index.clone();
    ic.rng_seed = cfg.stage_seed(ic.rng_seed);
    let graph = annindex::build(&points, &ic)?;
    annindex::save_graph(&graph, &art.graph())?;
    eprintln!("index: {} points, k = {}", graph.len(), graph.k);
    Ok(())
}

/// Catalog ids and content points in the fixed (ascending set id) order
/// the graph was built over.
fn graph_inputs(
    art: &Artifacts,
    catalog: &[SetRecord],
) -> Result<(Vec<u64>, Vec<Vec<f64>>)> {
    let vectors = load_set_vectors(art, catalog)?;
    let ids: Vec<u64> = vectors.keys().copied().collect();
    let points: Vec<Vec<f64>> = vectors.values().cloned().collect();
    Ok((ids, points))
}

fn cmd_recommend(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    art.require(&art.checkpoint(), "train")?;
    art.require(&art.graph(), "index")?;
    let catalog = load_catalog(art)?;
    let sessions = load_sessions(art)?;
    let (ids, points) = graph_inputs(art, &catalog)?;
    let graph = annindex::load_graph(&art.graph(), &points, cfg.stage_seed(cfg.index.rng_seed))?;
    let mut model = recsys::load_checkpoint(&art.checkpoint())?;
    let hash = recsys::model_hash(&mut model)?;
    let vectors = load_set_vectors(art, &catalog)?;
    let (enc, scaler) = features::fit_encoders(&sessions, &catalog)?;
    let windows = features::latest_windows(
        &sessions,
        &catalog,
        &vectors,
        &enc,
        &scaler,
        cfg.features.window - 1,
    )?;
    let mut entries = Vec::with_capacity(windows.len());
    for lw in &windows {
        let window = recsys::Window {
            steps: (0..lw.user.len())
                .map(|s| recsys::WindowStep {
                    user: lw.user[s].clone(),
                    set: lw.set[s].clone(),
                    content: lw.content[s].clone(),
                })
                .collect(),
        };
        let recs = recsys::recommend(&mut model, &graph, &ids, &window, cfg.recommend.m)?;
        entries.push(recsys::CacheEntry {
            user_id: lw.user_id,
            subject: lw.subject.clone(),
            set_ids: recs.iter().map(|(id, _)| *id).collect(),
            distances: recs.iter().map(|(_, d)| *d).collect(),
        });
    }
    let tag = format!("seed-{:016x}", cfg.seed);
    recsys::export_cache(&art.cache(), hash, &tag, &entries)?;
    eprintln!(
        "recommend: {} user-subject lists of {} -> {}",
        entries.len(),
        cfg.recommend.m,
        art.cache().display()
    );
    Ok(())
}

struct EvalSetup {
    triple: features::SequenceTensorTriple,
    graph: annindex::KnnGraph,
    ids: Vec<u64>,
    test_rows: Vec<usize>,
    truths: BTreeMap<usize, u64>,
}

fn eval_setup(cfg: &RunConfig, art: &Artifacts) -> Result<EvalSetup> {
    art.require(&art.graph(), "index")?;
    let triple = load_triple(art)?;
    let catalog = load_catalog(art)?;
    let (ids, points) = graph_inputs(art, &catalog)?;
    let graph = annindex::load_graph(&art.graph(), &points, cfg.stage_seed(cfg.index.rng_seed))?;
    let tc = effective_train(cfg);
    let (test_rows, _) = recsys::split_rows(triple.n, tc.val_fraction, tc.rng_seed)?;
    let truths: BTreeMap<usize, u64> = test_rows
        .iter()
        .map(|&r| (r, triple.step_set_ids[r][triple.t - 1]))
        .collect();
    Ok(EvalSetup {
        triple,
        graph,
        ids,
        test_rows,
        truths,
    })
}

fn cmd_evaluate(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    art.require(&art.checkpoint(), "train")?;
    let setup = eval_setup(cfg, art)?;
    let mut model = recsys::load_checkpoint(&art.checkpoint())?;
    let ctx = evalkit::EvalContext {
        triple: &setup.triple,
        graph: &setup.graph,
        catalog_ids: &setup.ids,
        test_rows: &setup.test_rows,
        truths: &setup.truths,
        k: cfg.recommend.m,
    };
    let (recall, r2) = evalkit::evaluate_model(&mut model, &ctx, cfg.train.input_len)?;
    let alpha = evalkit::attention_heatmap(&model)?;
    evalkit::export_heatmap(&alpha, &art.heatmap_txt(), &art.heatmap_pgm())?;
    let chance = cfg.recommend.m as f64 / setup.ids.len() as f64;
    let report = serde_json::json!({
        "k": cfg.recommend.m,
        "recall_at_k": recall,
        "r_squared": r2,
        "n_evaluated": setup.test_rows.len(),
        "catalog_size": setup.ids.len(),
        "chance_recall": chance,
    });
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(art.report_json(), json)?;
    let txt = format!(
        "recall@{} = {:.6} (chance {:.6})\nr_squared = {:.6}\nn_evaluated = {}\ncatalog_size = {}\n",
        cfg.recommend.m,
        recall,
        chance,
        r2,
        setup.test_rows.len(),
        setup.ids.len(),
    );
    std::fs::write(art.report_txt(), &txt)?;
    eprint!("{txt}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    let setup = eval_setup(cfg, art)?;
    let manifest = build_manifest(cfg, art, setup.triple.content_dim)?;
    let ctx = evalkit::EvalContext {
        triple: &setup.triple,
        graph: &setup.graph,
        catalog_ids: &setup.ids,
        test_rows: &setup.test_rows,
        truths: &setup.truths,
        k: cfg.recommend.m,
    };
    let tc = effective_train(cfg);
    let results = evalkit::ablation_suite(
        &manifest,
        &tc,
        &ctx,
        &setup.triple,
        &[
            recsys::Variant::Both,
            recsys::Variant::Content,
            recsys::Variant::Metadata,
        ],
    )?;
    let summary: Vec<&evalkit::VariantResult> = results.iter().map(|(r, _)| r).collect();
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(art.ablation_json(), json)?;
    for r in &summary {
        eprintln!(
            "ablate: {:9} recall@{} = {:.4}, r_squared = {:.4}",
            r.variant, cfg.recommend.m, r.recall_at_100, r.r_squared
        );
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    let setup = eval_setup(cfg, art)?;
    let manifest = build_manifest(cfg, art, setup.triple.content_dim)?;
    let ctx = evalkit::EvalContext {
        triple: &setup.triple,
        graph: &setup.graph,
        catalog_ids: &setup.ids,
        test_rows: &setup.test_rows,
        truths: &setup.truths,
        k: cfg.recommend.m,
    };
    let tc = effective_train(cfg);
    let lengths: Vec<usize> = (1..setup.triple.t).collect();
    let results = evalkit::sequence_length_sweep(&manifest, &tc, &ctx, &setup.triple, &lengths)?;
    let summary: Vec<&evalkit::LengthResult> = results.iter().map(|(r, _)| r).collect();
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(art.sweep_json(), json)?;
    for r in &summary {
        eprintln!(
            "sweep: L = {} recall@{} = {:.4}, r_squared = {:.4}",
            r.input_len, cfg.recommend.m, r.recall_at_100, r.r_squared
        );
    }
    Ok(())
}
