//! Randomized invariants: score bounds and ranking consistency on synthetic
//! indexes, loss non-negativity, lexicon pruning contracts, and segmentation
//! reconstruction.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xlel_core::baselines::train_model1;
use xlel_core::encoder::{EncoderParams, InputSpec, ParallelTitleCorpus};
use xlel_core::linker::{KbIndex, LinkMode};
use xlel_core::repr::{FeatureTable, ReprKind, SymbolVocab, FEATURE_DIM};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Cosine scores stay in [-1, 1] (up to f32 rounding), top-k lists are
    /// prefixes of longer top-k lists, the single-best link equals top-1, and
    /// the parallel scan is bit-identical to the serial one.
    #[test]
    fn index_scores_bounded_and_rankings_consistent(
        n in 2usize..32,
        dim in 3usize..10,
        seed in any::<u64>(),
        k_frac in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            loop {
                let v: Vec<f32> = (0..dim).map(|_| rand::Rng::gen_range(rng, -1.0f32..1.0)).collect();
                if v.iter().map(|x| (x * x) as f64).sum::<f64>() > 1e-6 {
                    return v;
                }
            }
        };
        let entries: Vec<(u32, Vec<f32>)> =
            (1..=n as u32).map(|id| (id, gen(&mut rng))).collect();
        let pivots: Vec<(u32, Vec<f32>)> = entries
            .iter()
            .filter(|(id, _)| id % 2 == 0)
            .map(|(id, _)| (*id, gen(&mut rng)))
            .collect();
        let index = KbIndex::from_embeddings("hi", "hash", entries, pivots).unwrap();
        let query = gen(&mut rng);

        for mode in [LinkMode::DirectOnly, LinkMode::Pivot] {
            let scores = index.scores(&query, mode).unwrap();
            prop_assert_eq!(scores.len(), n);
            for &s in &scores {
                prop_assert!(s.is_finite());
                prop_assert!(s.abs() <= 1.0 + 1e-4, "cosine {} out of range", s);
            }
            prop_assert_eq!(index.par_scores(&query, mode).unwrap(), scores.clone());

            let full = index.topk(&query, mode, n).unwrap();
            let k = 1 + (k_frac * (n - 1) as f64) as usize;
            let partial = index.topk(&query, mode, k).unwrap();
            prop_assert_eq!(&full[..k], &partial[..]);
            let (best_id, best_score) = index.link(&query, mode).unwrap();
            prop_assert_eq!((best_id, best_score), full[0]);
        }
    }

    /// The batch hinge objective is a mean of relu terms: finite and >= 0 for
    /// any parameters and any well-formed batch.
    #[test]
    fn batch_loss_is_finite_and_nonnegative(
        seed in any::<u64>(),
        margin in 0.05f32..2.0,
        words in prop::collection::vec(("[a-d!]{1,6}", "[w-z!]{1,6}"), 2..5),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = |s: &str| SymbolVocab::from_symbols(
            ReprKind::Grapheme,
            s.chars().map(|c| c.to_string()).collect(),
        ).unwrap();
        let params = EncoderParams::init(
            "xx", margin, 4, 4,
            InputSpec::Grapheme { src_vocab: vocab("abcd"), en_vocab: vocab("wxyz") },
            &mut rng,
        ).unwrap();
        let batch: Vec<_> = words
            .iter()
            .map(|(s, e)| (
                params.prepare_src(s, None).unwrap(),
                params.prepare_en(e, None).unwrap(),
            ))
            .collect();
        let loss = params.batch_loss(&batch, margin).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert!(loss >= 0.0);
    }

    /// Alignment lexicons honor the pruning contract for every covered word:
    /// at most three translations, probabilities descending, each >= the
    /// pruning floor, summing to at most one.
    #[test]
    fn model1_lexicon_respects_pruning_contract(
        pairs in prop::collection::vec(("[a-e]( [a-e]){0,2}", "[x-z]( [x-z]){0,2}"), 2..7),
        iterations in 1usize..4,
    ) {
        let corpus = ParallelTitleCorpus::new("xx", pairs.clone()).unwrap();
        let lexicon = train_model1(&corpus, iterations).unwrap();
        let mut src_words: Vec<&str> = pairs
            .iter()
            .flat_map(|(s, _)| s.split_whitespace())
            .collect();
        src_words.sort_unstable();
        src_words.dedup();
        for word in src_words {
            if let Some(translations) = lexicon.translations(word) {
                prop_assert!(!translations.is_empty());
                prop_assert!(translations.len() <= 3);
                let mut sum = 0.0;
                for window in translations.windows(2) {
                    prop_assert!(window[0].1 >= window[1].1, "probabilities not descending");
                }
                for (en, p) in translations {
                    prop_assert!(!en.is_empty());
                    prop_assert!(*p >= 0.05 && *p <= 1.0 + 1e-9, "prob {} out of contract", p);
                    sum += p;
                }
                prop_assert!(sum <= 1.0 + 1e-9, "probabilities sum to {}", sum);
            }
        }
    }

    /// Greedy longest-match segmentation always reconstructs its input:
    /// concatenating the segments gives back the NFC form, whether or not
    /// every piece is in the inventory.
    #[test]
    fn segmentation_reconstructs_the_input(
        tokens in prop::collection::vec(
            prop::sample::select(vec!["a", "e", "i", "t", "k", "s", "tʃ", "aː", "ʃ", "q", "x", "ʒ"]),
            1..12,
        ),
    ) {
        let inventory = ["a", "e", "i", "t", "k", "s", "tʃ", "aː", "ʃ"];
        let rows: Vec<(String, [i8; FEATURE_DIM])> = inventory
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                let mut feats = [0i8; FEATURE_DIM];
                feats[i % FEATURE_DIM] = 1;
                (seg.to_string(), feats)
            })
            .collect();
        let table = FeatureTable::from_rows(rows).unwrap();
        let text: String = tokens.concat();
        let segments = table.segment(&text).unwrap();
        prop_assert_eq!(segments.concat(), text);
    }
}
