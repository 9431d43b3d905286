use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{EncoderParams, InputSpec, ParallelTitleCorpus, TrainingConfig};
use crate::error::{Error, Result};
use crate::numerics::{clip_global_norm, Adam, AdamConfig};
use crate::repr::{self, FeatureTable, ReprKind, SeqRepr};

/// Global gradient-norm ceiling; hinge losses occasionally spike when a batch
/// is full of near-duplicate titles.
const MAX_GRAD_NORM: f32 = 5.0;

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub dev_accuracy: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned: highest dev accuracy, breaking
    /// ties toward the lowest mean training loss.
    pub best_epoch: usize,
    pub best_dev_accuracy: f32,
}

/// Train an encoder pair, returning the parameters of the best-dev epoch.
///
/// The dev split is drawn from `corpus` only; `extra_corpora` (for example
/// small low-resource samples joined to the high-resource data) go entirely
/// into the training pool. All stochasticity — dev split, per-epoch shuffles,
/// weight initialization — comes from one PRNG seeded with `config.seed`.
pub fn train(
    kind: ReprKind,
    config: &TrainingConfig,
    corpus: &ParallelTitleCorpus,
    extra_corpora: &[ParallelTitleCorpus],
    table: Option<&FeatureTable>,
) -> Result<(EncoderParams, TrainHistory)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Hold out a dev fraction of the main corpus.
    let n = corpus.len();
    let dev_count = ((n as f64 * config.dev_fraction).floor() as usize).max(1);
    if dev_count >= n {
        return Err(Error::InsufficientData(format!(
            "{n} pairs cannot spare a dev split of {dev_count}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let dev_set: HashSet<usize> = indices[..dev_count].iter().copied().collect();
    let dev_pairs: Vec<&(String, String)> = indices[..dev_count]
        .iter()
        .map(|&i| &corpus.pairs()[i])
        .collect();

    let mut pool: Vec<(String, String)> = corpus
        .pairs()
        .iter()
        .enumerate()
        .filter(|(i, _)| !dev_set.contains(i))
        .map(|(_, p)| p.clone())
        .collect();
    let mut seen: HashSet<(String, String)> = pool.iter().cloned().collect();
    let held_out: HashSet<&(String, String)> = dev_pairs.iter().copied().collect();
    for extra in extra_corpora {
        for pair in extra.pairs() {
            if !held_out.contains(pair) && seen.insert(pair.clone()) {
                pool.push(pair.clone());
            }
        }
    }
    if pool.len() < config.batch_size {
        return Err(Error::InsufficientData(format!(
            "training pool of {} is smaller than one batch of {}",
            pool.len(),
            config.batch_size
        )));
    }

    // Vocabulary covers the training pool; dev symbols outside it map to the
    // unknown id, exactly as unseen test symbols will later.
    let spec = match kind {
        ReprKind::Grapheme => {
            let pool_corpus = ParallelTitleCorpus::new(corpus.src_lang(), pool.clone())?;
            let (src_vocab, en_vocab) = repr::build_vocab(&pool_corpus, kind, None)?;
            InputSpec::Grapheme { src_vocab, en_vocab }
        }
        ReprKind::Phoneme => InputSpec::Phoneme {
            table: table.ok_or(Error::EmptyInput("feature table"))?,
        },
        ReprKind::Articulatory => InputSpec::Articulatory {
            table: table.ok_or(Error::EmptyInput("feature table"))?,
        },
    };
    let mut params = EncoderParams::init(
        corpus.src_lang(),
        config.margin,
        config.embed_dim,
        config.hidden_dim,
        spec,
        &mut rng,
    )?;

    let prepped: Vec<(SeqRepr, SeqRepr)> = pool
        .iter()
        .map(|(src, en)| Ok((params.prepare_src(src, table)?, params.prepare_en(en, table)?)))
        .collect::<Result<_>>()?;
    let dev: Vec<(SeqRepr, String)> = dev_pairs
        .iter()
        .map(|(src, en)| Ok((params.prepare_src(src, table)?, en.clone())))
        .collect::<Result<_>>()?;
    let dev_titles = unique_titles(&dev_pairs);
    let dev_title_seqs: Vec<SeqRepr> = dev_titles
        .iter()
        .map(|t| params.prepare_en(t, table))
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        &sizes,
    );

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_accuracy: f32::NEG_INFINITY,
    };
    let mut best_params = params.clone();
    let mut best_loss = f32::INFINITY;
    let mut stall = 0usize;
    let mut order: Vec<usize> = (0..prepped.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // a lone tail pair has no in-batch negative
            }
            let batch: Vec<(SeqRepr, SeqRepr)> =
                chunk.iter().map(|&i| prepped[i].clone()).collect();
            let (loss, mut grads) = params.loss_and_grads(&batch, config.margin)?;
            let mut grad_refs: Vec<&mut [f32]> =
                grads.iter_mut().map(|g| g.as_mut_slice()).collect();
            clip_global_norm(&mut grad_refs, MAX_GRAD_NORM);
            let grad_slices: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut tensors = params.tensors_mut();
            let mut param_slices: Vec<&mut [f32]> =
                tensors.iter_mut().map(|t| t.data_mut()).collect();
            adam.step(&mut param_slices, &grad_slices)?;
            loss_sum += loss as f64;
            batches += 1;
        }

        let dev_accuracy = dev_retrieval_accuracy(&params, &dev, &dev_titles, &dev_title_seqs)?;
        let mean_loss = (loss_sum / batches.max(1) as f64) as f32;
        history.epochs.push(EpochStats {
            epoch,
            mean_loss,
            dev_accuracy,
        });
        if dev_accuracy > history.best_dev_accuracy {
            history.best_dev_accuracy = dev_accuracy;
            history.best_epoch = epoch;
            best_loss = mean_loss;
            best_params = params.clone();
            stall = 0;
        } else {
            // Small dev splits saturate quickly; among equal-dev epochs keep
            // the one that optimized the training objective furthest. The
            // patience clock still runs on dev accuracy alone.
            if dev_accuracy == history.best_dev_accuracy && mean_loss < best_loss {
                history.best_epoch = epoch;
                best_loss = mean_loss;
                best_params = params.clone();
            }
            stall += 1;
            if stall >= config.patience {
                break;
            }
        }
    }
    Ok((best_params, history))
}

fn unique_titles(dev_pairs: &[&(String, String)]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut titles = Vec::new();
    for (_, en) in dev_pairs {
        if seen.insert(en.clone()) {
            titles.push(en.clone());
        }
    }
    titles
}

/// Fraction of dev mentions whose top-1 English title (by cosine, over the
/// unique dev titles) is their gold title. Ties keep the earliest title.
fn dev_retrieval_accuracy(
    params: &EncoderParams,
    dev: &[(SeqRepr, String)],
    titles: &[String],
    title_seqs: &[SeqRepr],
) -> Result<f32> {
    let title_vecs = params.encode_en_batch(title_seqs)?;
    let src_vecs =
        params.encode_src_batch(&dev.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>())?;
    let mut correct = 0usize;
    for ((_, gold), src) in dev.iter().zip(&src_vecs) {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, title_vec) in title_vecs.iter().enumerate() {
            let (dot, na, nb) = crate::numerics::cosine_parts(src.data(), title_vec.data());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::DegenerateVector);
            }
            let sim = dot / (na * nb);
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        if &titles[best] == gold {
            correct += 1;
        }
    }
    Ok(correct as f32 / dev.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_corpus() -> ParallelTitleCorpus {
        // A transparent structure: source title is the English title with
        // each letter shifted by one.
        let pairs = [
            "alma", "brno", "cadiz", "delhi", "essen", "faro", "gdansk", "hilo", "izmir", "jena",
            "kobe", "lima", "metz", "nara", "osaka", "pula",
        ]
        .iter()
        .map(|en| {
            let src: String = en
                .chars()
                .map(|c| ((c as u8 - b'a' + 1) % 26 + b'a') as char)
                .collect();
            (src, (*en).to_owned())
        })
        .collect();
        ParallelTitleCorpus::new("xx", pairs).unwrap()
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            batch_size: 4,
            max_epochs: 2,
            embed_dim: 4,
            hidden_dim: 3,
            dev_fraction: 0.2,
            seed: 11,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let corpus = toy_corpus();
        let cfg = tiny_config();
        let (a, ha) = train(ReprKind::Grapheme, &cfg, &corpus, &[], None).unwrap();
        let (b, hb) = train(ReprKind::Grapheme, &cfg, &corpus, &[], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.best_epoch, hb.best_epoch);
        let last = |h: &TrainHistory| {
            h.epochs
                .iter()
                .map(|e| (e.mean_loss, e.dev_accuracy))
                .collect::<Vec<_>>()
        };
        assert_eq!(last(&ha), last(&hb));
    }

    #[test]
    fn history_tracks_the_returned_checkpoint() {
        let corpus = toy_corpus();
        let (_, history) = train(ReprKind::Grapheme, &tiny_config(), &corpus, &[], None).unwrap();
        assert!(!history.epochs.is_empty());
        assert!(history.best_epoch >= 1);
        assert!(history.best_epoch <= history.epochs.len());
        let best_seen = history
            .epochs
            .iter()
            .map(|e| e.dev_accuracy)
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(history.best_dev_accuracy, best_seen);
    }

    #[test]
    fn extra_corpora_extend_the_vocabulary() {
        let corpus = toy_corpus();
        let extra = ParallelTitleCorpus::new(
            "yy",
            vec![("qqq1".into(), "qqq2".into()), ("qq3".into(), "qq4".into())],
        )
        .unwrap();
        let (params, _) =
            train(ReprKind::Grapheme, &tiny_config(), &corpus, &[extra], None).unwrap();
        let seq = params.prepare_src("q1", None).unwrap();
        let SeqRepr::Grapheme { ids } = seq else { unreachable!() };
        assert!(ids.iter().all(|&id| id != 0), "extra symbols must be in-vocab");
    }

    #[test]
    fn training_needs_at_least_one_batch() {
        let corpus = ParallelTitleCorpus::new(
            "xx",
            vec![("ab".into(), "cd".into()), ("ef".into(), "gh".into())],
        )
        .unwrap();
        let cfg = TrainingConfig {
            batch_size: 32,
            ..tiny_config()
        };
        assert!(matches!(
            train(ReprKind::Grapheme, &cfg, &corpus, &[], None),
            Err(Error::InsufficientData(_))
        ));
    }
}
