//! `xlel` — command-line front end for the entity-linking toolkit.
//!
//! Every command reads a TOML run manifest (`--config`); flags only select
//! the operation and override the seed, so a manifest plus a seed fully
//! reproduces any run. Failures print a single `error: …` line; usage
//! mistakes (including a missing manifest file) exit with code 2, runtime
//! failures with 1.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use xlel_core::baselines::{train_model1, MODEL1_DEFAULT_ITERATIONS};
use xlel_core::encoder::{
    load_checkpoint, save_checkpoint, train, EncoderParams, ParallelTitleCorpus,
};
use xlel_core::eval::{evaluate, ingest, EvalMode, RunManifest, SystemKind};
use xlel_core::linker::{
    multi_pivot_topk, KbIndex, KnowledgeBase, LinkMode, PivotArm, Weighting,
};
use xlel_core::repr::{FeatureTable, ReprKind};

#[derive(Parser)]
#[command(name = "xlel", version, about = "Cross-lingual entity linking toolkit")]
struct Cli {
    /// Path to the TOML run manifest.
    #[arg(long, global = true, value_name = "MANIFEST")]
    config: Option<PathBuf>,

    /// Override the manifest's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the similarity encoder and write a checkpoint.
    Train,
    /// Encode the KB with a trained checkpoint and cache the index.
    BuildIndex {
        /// Where to write the index cache.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank KB entries for a single mention.
    Link {
        /// Mention text (or IPA, for phonetic representations).
        #[arg(long)]
        mention: String,
        /// How many candidates to print.
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Score the manifest's test set and write the report.
    Evaluate,
    /// Induce a translation lexicon from the training corpus.
    BuildLexicon {
        /// Where to write the lexicon; defaults to paths.lexicon.
        #[arg(long)]
        out: Option<PathBuf>,
        /// EM iterations.
        #[arg(long, default_value_t = MODEL1_DEFAULT_ITERATIONS)]
        iterations: usize,
    },
    /// Parse and cross-validate every artifact the manifest references.
    IngestCheck,
}

/// A mistake in how the tool was invoked, as opposed to a runtime failure;
/// exits with code 2 like clap's own usage errors.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        let code = if e.is::<Usage>() { 2 } else { 1 };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli
        .config
        .clone()
        .ok_or_else(|| Usage("--config <MANIFEST> is required".into()))?;
    let mut manifest = RunManifest::load(&config)
        .map_err(|e| anyhow!(Usage(format!("cannot load manifest: {e}"))))?;
    if let Some(seed) = cli.seed {
        manifest.seed = seed;
    }
    match cli.command {
        Command::Train => cmd_train(&manifest),
        Command::BuildIndex { out } => cmd_build_index(&manifest, &out),
        Command::Link { mention, k } => cmd_link(&manifest, &mention, k),
        Command::Evaluate => cmd_evaluate(&manifest),
        Command::BuildLexicon { out, iterations } => cmd_build_lexicon(&manifest, out, iterations),
        Command::IngestCheck => cmd_ingest_check(&manifest),
    }
}

fn train_section(manifest: &RunManifest) -> Result<&xlel_core::eval::TrainSection> {
    manifest
        .train
        .as_ref()
        .ok_or_else(|| anyhow!(Usage("manifest has no [train] section".into())))
}

fn load_table(manifest: &RunManifest) -> Result<Option<FeatureTable>> {
    match &manifest.paths.feature_table {
        Some(p) => Ok(Some(FeatureTable::load(p)?)),
        None => {
            if manifest.representation != ReprKind::Grapheme {
                return Err(anyhow!(Usage(format!(
                    "representation {} needs paths.feature_table",
                    manifest.representation
                ))));
            }
            Ok(None)
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating output directory {}", dir.display()))?;
        }
    }
    Ok(())
}

fn cmd_train(manifest: &RunManifest) -> Result<()> {
    let section = train_section(manifest)?;
    let corpus = ParallelTitleCorpus::load(&section.corpus, &manifest.train_corpus_lang()?)?;
    let mut extras = Vec::new();
    for p in &section.extra_corpora {
        extras.push(ParallelTitleCorpus::load(p, &manifest.source_lang)?);
    }
    let table = load_table(manifest)?;
    let config = section.training_config(manifest.seed);
    config.validate()?;

    let (params, history) = train(
        manifest.representation,
        &config,
        &corpus,
        &extras,
        table.as_ref(),
    )?;
    create_parent(&section.checkpoint_out)?;
    save_checkpoint(&params, &section.checkpoint_out)?;
    if let Some(out) = &section.history_out {
        create_parent(out)?;
        let mut json = serde_json::to_string_pretty(&history)?;
        json.push('\n');
        fs::write(out, json)?;
    }
    println!(
        "trained {} epochs (best dev accuracy {:.6} at epoch {})",
        history.epochs.len(),
        history.best_dev_accuracy,
        history.best_epoch
    );
    println!("checkpoint {}", section.checkpoint_out.display());
    Ok(())
}

/// The checkpoint + pivot language of arm `i`, loaded and validated against
/// the manifest's representation and feature table.
fn load_arm(
    manifest: &RunManifest,
    table: Option<&FeatureTable>,
    i: usize,
) -> Result<(EncoderParams, String)> {
    let path = manifest
        .paths
        .checkpoints
        .get(i)
        .ok_or_else(|| anyhow!(Usage("manifest lists no checkpoint for this run".into())))?;
    let params = load_checkpoint(path)?;
    params.expect_kind(manifest.representation)?;
    if let Some(t) = table {
        params.validate_table(t)?;
    }
    let lang = manifest
        .pivot_langs
        .get(i)
        .cloned()
        .unwrap_or_default();
    Ok((params, lang))
}

fn cmd_build_index(manifest: &RunManifest, out: &Path) -> Result<()> {
    let kb = KnowledgeBase::load(&manifest.paths.kb)?;
    let table = load_table(manifest)?;
    let (params, lang) = load_arm(manifest, table.as_ref(), 0)?;
    let index = KbIndex::build(&params, &kb, &lang, table.as_ref())?;
    create_parent(out)?;
    index.save_cache(out)?;
    println!(
        "indexed {} entries ({} with {:?} titles, dim {})",
        index.len(),
        index.entry_ids().iter().filter(|&&id| index.has_pivot(id)).count(),
        index.pivot_lang(),
        index.dim()
    );
    println!("index {}", out.display());
    Ok(())
}

fn cmd_link(manifest: &RunManifest, mention: &str, k: usize) -> Result<()> {
    let kb = KnowledgeBase::load(&manifest.paths.kb)?;
    let table = load_table(manifest)?;
    let ranked = if manifest.mode == EvalMode::Multi {
        let phylo = match &manifest.paths.phylo {
            Some(p) => Some(xlel_core::linker::PhyloWeights::load(p)?),
            None => None,
        };
        let mut arms_data = Vec::new();
        for i in 0..manifest.paths.checkpoints.len() {
            let (params, lang) = load_arm(manifest, table.as_ref(), i)?;
            let index = KbIndex::build(&params, &kb, &lang, table.as_ref())?;
            let seq = params.prepare_src(mention, table.as_ref())?;
            let q = params.encode_src(&seq)?.data().to_vec();
            let weight = match manifest.weighting {
                Weighting::Uniform => 1.0,
                Weighting::Phylo => phylo
                    .as_ref()
                    .map(|p| p.weight(&manifest.source_lang, &lang, Weighting::Phylo))
                    .unwrap_or(0.0),
            };
            arms_data.push((index, q, weight));
        }
        let arms: Vec<PivotArm<'_>> = arms_data
            .iter()
            .map(|(index, q, weight)| PivotArm {
                index,
                mention_vec: q.clone(),
                weight: *weight,
            })
            .collect();
        multi_pivot_topk(&arms, k)?
    } else {
        let (params, lang) = load_arm(manifest, table.as_ref(), 0)?;
        let index = KbIndex::build(&params, &kb, &lang, table.as_ref())?;
        let seq = params.prepare_src(mention, table.as_ref())?;
        let q = params.encode_src(&seq)?.data().to_vec();
        let mode = if manifest.mode == EvalMode::DirectOnly {
            LinkMode::DirectOnly
        } else {
            LinkMode::Pivot
        };
        index.topk(&q, mode, k)?
    };
    for (rank, (id, score)) in ranked.iter().enumerate() {
        let title = kb.get(*id).map(|e| e.en_title.as_str()).unwrap_or("?");
        println!("{}\t{}\t{:.6}\t{}", rank + 1, id, score, title);
    }
    Ok(())
}

fn cmd_evaluate(manifest: &RunManifest) -> Result<()> {
    let report = evaluate(manifest)?;
    let out = manifest
        .paths
        .report
        .as_ref()
        .ok_or_else(|| anyhow!(Usage("manifest names no paths.report".into())))?;
    create_parent(out)?;
    fs::write(out, report.emit(manifest.report_format))?;
    println!("accuracy {:.6} over {} mentions", report.accuracy, report.test_size);
    println!("report {}", out.display());
    Ok(())
}

fn cmd_build_lexicon(
    manifest: &RunManifest,
    out: Option<PathBuf>,
    iterations: usize,
) -> Result<()> {
    let section = train_section(manifest)?;
    let corpus = ParallelTitleCorpus::load(&section.corpus, &manifest.train_corpus_lang()?)?;
    let iterations = section.model1_iterations.unwrap_or(iterations);
    let lexicon = train_model1(&corpus, iterations)?;
    let out = out
        .or_else(|| manifest.paths.lexicon.clone())
        .ok_or_else(|| anyhow!(Usage("no lexicon output path (--out or paths.lexicon)".into())))?;
    create_parent(&out)?;
    lexicon.save(&out)?;
    println!(
        "lexicon covers {} source words ({} EM iterations over {} pairs)",
        lexicon.len(),
        iterations,
        corpus.len()
    );
    println!("lexicon {}", out.display());
    Ok(())
}

fn cmd_ingest_check(manifest: &RunManifest) -> Result<()> {
    let ingested = ingest(manifest)?;
    println!("kb: {} entries", ingested.kb.len());
    if let Some(test) = &ingested.test {
        println!("test: {} records", test.len());
    }
    if let Some(corpus) = &ingested.corpus {
        println!("train corpus: {} pairs ({})", corpus.len(), corpus.src_lang());
    }
    for extra in &ingested.extra_corpora {
        println!("extra corpus: {} pairs ({})", extra.len(), extra.src_lang());
    }
    if let Some(table) = &ingested.table {
        println!("feature table: {} segments", table.len());
    }
    if ingested.phylo.is_some() {
        println!("phylo distances: ok");
    }
    if let Some(lexicon) = &ingested.lexicon {
        println!("lexicon: {} source words", lexicon.len());
    }
    if manifest.system == SystemKind::Encoder {
        for path in &manifest.paths.checkpoints {
            let params = load_checkpoint(path)?;
            params.expect_kind(manifest.representation)?;
            println!(
                "checkpoint {}: {} / {} ({} parameters)",
                path.display(),
                params.kind(),
                params.src_lang(),
                params.param_count()
            );
        }
    }
    println!("ok");
    Ok(())
}
