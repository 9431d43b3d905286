//! Non-neural comparison systems: exact string match and word-by-word
//! translation through a bilingual lexicon induced with IBM Model 1.
//!
//! Model 1 is trained by EM over whitespace-tokenized title pairs. Each
//! source token aligns to one English token or to a NULL token, uniformly a
//! priori; the translation table `t(src | en)` starts uniform over the
//! source vocabulary. The published lexicon is the posterior alignment
//! distribution of each source word under the trained model, renormalized
//! over real (non-NULL) English words, then pruned to the three most likely
//! translations with probability at least 0.05.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linker::KnowledgeBase;
use crate::encoder::ParallelTitleCorpus;
use crate::repr::nfc;

/// EM iterations used when the caller does not choose a count.
pub const MODEL1_DEFAULT_ITERATIONS: usize = 5;
/// Keep at most this many translations per source word…
const PRUNE_TOP_K: usize = 3;
/// …and only those at least this likely.
const PRUNE_MIN_PROB: f64 = 0.05;

/// Link a mention to the entry whose English title matches it exactly after
/// NFC normalization and lower-casing. With `pivot_lang` set, parallel
/// titles in that language are matched too. Several matches resolve to the
/// lowest entity id.
pub fn exact_link(mention: &str, kb: &KnowledgeBase, pivot_lang: Option<&str>) -> Option<u32> {
    let needle = fold(mention);
    for entry in kb.entries() {
        if fold(&entry.en_title) == needle {
            return Some(entry.id);
        }
        if let Some(lang) = pivot_lang {
            if let Some(title) = entry.pivot_titles.get(lang) {
                if fold(title) == needle {
                    return Some(entry.id);
                }
            }
        }
    }
    None
}

fn fold(s: &str) -> String {
    nfc(s).to_lowercase()
}

/// Translate a mention word by word with the lexicon's best translations
/// (unknown words pass through unchanged), then exact-match the result.
pub fn translate_link(
    mention: &str,
    lexicon: &AlignmentLexicon,
    kb: &KnowledgeBase,
    pivot_lang: Option<&str>,
) -> Option<u32> {
    let joined: String = nfc(mention)
        .split_whitespace()
        .map(|w| lexicon.best(w).unwrap_or(w).to_owned())
        .collect::<Vec<String>>()
        .join(" ");
    exact_link(&joined, kb, pivot_lang)
}

/// Per-source-word translation candidates, probabilities descending.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLexicon {
    map: BTreeMap<String, Vec<(String, f64)>>,
}

impl AlignmentLexicon {
    pub fn new(entries: Vec<(String, Vec<(String, f64)>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (src, translations) in entries {
            if translations.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "source word {src:?} has no translations"
                )));
            }
            let sum: f64 = translations.iter().map(|(_, p)| p).sum();
            if sum > 1.0 + 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "probabilities for {src:?} sum to {sum}"
                )));
            }
            for pair in translations.windows(2) {
                if pair[1].1 > pair[0].1 {
                    return Err(Error::InvalidArgument(format!(
                        "translations for {src:?} are not sorted by descending probability"
                    )));
                }
            }
            if translations.iter().any(|(_, p)| !(*p > 0.0 && *p <= 1.0 + 1e-6)) {
                return Err(Error::InvalidArgument(format!(
                    "translation probability for {src:?} outside (0, 1]"
                )));
            }
            if map.insert(src.clone(), translations).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate source word {src:?}")));
            }
        }
        Ok(AlignmentLexicon { map })
    }

    /// All candidates for a source word, best first.
    pub fn translations(&self, word: &str) -> Option<&[(String, f64)]> {
        self.map.get(word).map(|v| v.as_slice())
    }

    /// The single most likely translation.
    pub fn best(&self, word: &str) -> Option<&str> {
        self.map.get(word).map(|v| v[0].0.as_str())
    }

    /// Number of covered source words.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Emit the TSV form: `src_word<TAB>en_word<TAB>probability`, sorted by
    /// source word, candidates in descending probability.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (src, translations) in &self.map {
            for (en, p) in translations {
                out.push_str(&format!("{src}\t{en}\t{p:.9}\n"));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut entries: Vec<(String, Vec<(String, f64)>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(
                    file,
                    lineno,
                    "expected `src_word<TAB>en_word<TAB>probability`",
                ));
            }
            let p: f64 = cols[2]
                .parse()
                .map_err(|_| Error::parse(file, lineno, format!("bad probability {:?}", cols[2])))?;
            match entries.last_mut() {
                Some((src, translations)) if src == cols[0] => {
                    translations.push((cols[1].to_owned(), p));
                }
                _ => entries.push((cols[0].to_owned(), vec![(cols[1].to_owned(), p)])),
            }
        }
        AlignmentLexicon::new(entries).map_err(|e| match e {
            Error::InvalidArgument(reason) => Error::parse(file, 0, reason),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        AlignmentLexicon::parse(&text, &path.display().to_string())
    }
}

/// Train the lexicon with the default iteration count.
pub fn train_model1(corpus: &ParallelTitleCorpus, iterations: usize) -> Result<AlignmentLexicon> {
    Ok(train_model1_with_ll(corpus, iterations)?.0)
}

/// As [`train_model1`], also returning the corpus log-likelihood measured at
/// the start of each EM iteration (so entry i is the likelihood under the
/// parameters produced by iteration i−1).
pub fn train_model1_with_ll(
    corpus: &ParallelTitleCorpus,
    iterations: usize,
) -> Result<(AlignmentLexicon, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("alignment corpus"));
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument("Model 1 needs at least one EM iteration".into()));
    }

    // Tokenize once; intern tokens in first-occurrence order so every run of
    // the trainer walks vocabularies in the same order. NULL takes English
    // id 0.
    let mut src_ids: HashMap<String, usize> = HashMap::new();
    let mut src_words: Vec<String> = Vec::new();
    let mut en_ids: HashMap<String, usize> = HashMap::new();
    let mut en_words: Vec<String> = vec![String::new()]; // id 0 = NULL
    let mut sentences: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (src, en) in corpus.pairs() {
        let s: Vec<usize> = nfc(src)
            .split_whitespace()
            .map(|w| intern(w, &mut src_ids, &mut src_words))
            .collect();
        let e: Vec<usize> = nfc(en)
            .split_whitespace()
            .map(|w| intern(w, &mut en_ids, &mut en_words))
            .collect();
        if s.is_empty() || e.is_empty() {
            continue;
        }
        sentences.push((s, e));
    }
    if sentences.is_empty() {
        return Err(Error::EmptyInput("alignment corpus"));
    }

    // Restrict the table to co-occurring (english, source) pairs; everything
    // else keeps zero mass after the first M-step anyway.
    let mut cand: Vec<Vec<usize>> = vec![Vec::new(); en_words.len()];
    for (s, e) in &sentences {
        for &f in s {
            cand[0].push(f); // NULL co-occurs with everything
            for &ei in e {
                cand[ei].push(f);
            }
        }
    }
    for list in &mut cand {
        list.sort_unstable();
        list.dedup();
    }

    let uniform = 1.0 / src_words.len() as f64;
    let mut t: Vec<Vec<f64>> = cand.iter().map(|c| vec![uniform; c.len()]).collect();
    let lookup = |t: &Vec<Vec<f64>>, e: usize, f: usize| -> f64 {
        match cand[e].binary_search(&f) {
            Ok(i) => t[e][i],
            Err(_) => 0.0,
        }
    };

    let mut lls = Vec::with_capacity(iterations);
    let mut counts: Vec<Vec<f64>> = cand.iter().map(|c| vec![0.0; c.len()]).collect();
    for _ in 0..iterations {
        for row in &mut counts {
            row.iter_mut().for_each(|c| *c = 0.0);
        }
        let mut ll = 0.0f64;
        for (s, e) in &sentences {
            let prior = 1.0 / (e.len() + 1) as f64;
            for &f in s {
                let mut denom = lookup(&t, 0, f);
                for &ei in e {
                    denom += lookup(&t, ei, f);
                }
                ll += (denom * prior).ln();
                // Posterior over alignment targets, accumulated as expected
                // counts.
                let add = |counts: &mut Vec<Vec<f64>>, e: usize, f: usize, v: f64| {
                    let i = cand[e].binary_search(&f).expect("co-occurring pair");
                    counts[e][i] += v;
                };
                add(&mut counts, 0, f, lookup(&t, 0, f) / denom);
                for &ei in e {
                    add(&mut counts, ei, f, lookup(&t, ei, f) / denom);
                }
            }
        }
        lls.push(ll);
        for (row_t, row_c) in t.iter_mut().zip(&counts) {
            let total: f64 = row_c.iter().sum();
            if total > 0.0 {
                for (tv, cv) in row_t.iter_mut().zip(row_c) {
                    *tv = cv / total;
                }
            }
        }
    }

    // One more expectation pass under the final parameters gives each source
    // word's posterior alignment counts, which become the lexicon.
    let mut src_counts: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); src_words.len()];
    for (s, e) in &sentences {
        for &f in s {
            let mut denom = lookup(&t, 0, f);
            for &ei in e {
                denom += lookup(&t, ei, f);
            }
            for &ei in e {
                *src_counts[f].entry(ei).or_insert(0.0) += lookup(&t, ei, f) / denom;
            }
            // NULL mass is dropped: the lexicon conditions on the word being
            // translated at all.
        }
    }

    let mut entries = Vec::with_capacity(src_words.len());
    for (f, word_counts) in src_counts.iter().enumerate() {
        let total: f64 = word_counts.values().sum();
        if total <= 0.0 {
            continue;
        }
        let mut translations: Vec<(String, f64)> = word_counts
            .iter()
            .map(|(&ei, &c)| (en_words[ei].clone(), c / total))
            .collect();
        translations.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        translations.truncate(PRUNE_TOP_K);
        translations.retain(|(_, p)| *p >= PRUNE_MIN_PROB);
        if !translations.is_empty() {
            entries.push((src_words[f].clone(), translations));
        }
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((AlignmentLexicon::new(entries)?, lls))
}

fn intern(w: &str, ids: &mut HashMap<String, usize>, words: &mut Vec<String>) -> usize {
    *ids.entry(w.to_owned()).or_insert_with(|| {
        words.push(w.to_owned());
        words.len() - 1
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::parse(
            "1\tPoland\tLOC\thi=polska\n\
             2\tWarsaw\tLOC\t\n\
             3\tNorth Pole\tLOC\t\n",
            "mem",
        )
        .unwrap()
    }

    #[test]
    fn exact_link_normalizes_both_sides() {
        let kb = kb();
        assert_eq!(exact_link("Poland", &kb, None), Some(1));
        assert_eq!(exact_link("poland", &kb, None), Some(1));
        assert_eq!(exact_link("WARSAW", &kb, None), Some(2));
        assert_eq!(exact_link("north pole", &kb, None), Some(3));
        assert_eq!(exact_link("Polska", &kb, None), None);
        assert_eq!(exact_link("पोलैंड", &kb, None), None, "non-Latin script cannot match");
    }

    #[test]
    fn exact_link_composed_and_decomposed_forms_match() {
        let kb = KnowledgeBase::parse("7\tŻoliborz\tLOC\t\n", "mem").unwrap();
        // Decomposed Z + combining dot above.
        assert_eq!(exact_link("Z\u{0307}oliborz", &kb, None), Some(7));
    }

    #[test]
    fn exact_link_pivot_variant_searches_parallel_titles() {
        let kb = kb();
        assert_eq!(exact_link("polska", &kb, Some("hi")), Some(1));
        assert_eq!(exact_link("polska", &kb, Some("lo")), None);
    }

    #[test]
    fn exact_link_prefers_the_lowest_id() {
        let kb = KnowledgeBase::parse("4\tAmazon\tORG\t\n2\tAmazon\tLOC\t\n", "mem").unwrap();
        assert_eq!(exact_link("amazon", &kb, None), Some(2));
    }

    fn corpus(pairs: &[(&str, &str)]) -> ParallelTitleCorpus {
        ParallelTitleCorpus::new(
            "xx",
            pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_corpus_converges_to_certainty() {
        let pairs: Vec<(String, String)> = (0..10).map(|i| (format!("x{}", i % 2), format!("x{}", i % 2))).collect();
        let c = ParallelTitleCorpus::new("xx", pairs).unwrap();
        let lex = train_model1(&c, MODEL1_DEFAULT_ITERATIONS).unwrap();
        let p = lex.translations("x0").unwrap();
        assert_eq!(p[0].0, "x0");
        assert!(p[0].1 > 0.999, "p = {}", p[0].1);
    }

    /// Frozen values from running EM by hand on the two-pair corpus
    /// {(a b, x y), (a c, x z)} with uniform 1/3 initialization:
    /// after one iteration the posterior-count lexicon for "a" is
    /// (x 1/2, y 1/4, z 1/4); after two it sharpens to (x 10/17, …).
    #[test]
    fn toy_corpus_matches_hand_run_em() {
        let c = corpus(&[("a b", "x y"), ("a c", "x z")]);

        let (lex1, _) = train_model1_with_ll(&c, 1).unwrap();
        let a1 = lex1.translations("a").unwrap();
        assert_eq!(a1[0].0, "x");
        assert!((a1[0].1 - 0.5).abs() < 1e-9, "{}", a1[0].1);
        assert!((a1[1].1 - 0.25).abs() < 1e-9);
        assert!((a1[2].1 - 0.25).abs() < 1e-9);
        let b1 = lex1.translations("b").unwrap();
        assert!((b1[0].1 - 2.0 / 3.0).abs() < 1e-9, "p(y|b) = {}", b1[0].1);
        assert_eq!(b1[0].0, "y");
        assert!((b1[1].1 - 1.0 / 3.0).abs() < 1e-9);

        let (lex2, lls) = train_model1_with_ll(&c, 2).unwrap();
        let a2 = lex2.translations("a").unwrap();
        assert_eq!(a2[0].0, "x");
        assert!((a2[0].1 - 10.0 / 17.0).abs() < 1e-9, "{}", a2[0].1);
        assert!(lls[1] >= lls[0] - 1e-9);

        // Longer training keeps the same argmax.
        let lex5 = train_model1(&c, 5).unwrap();
        assert_eq!(lex5.best("a"), Some("x"));
    }

    #[test]
    fn log_likelihood_is_monotone_non_decreasing() {
        let c = corpus(&[
            ("nowa wieś", "new village"),
            ("stara wieś", "old village"),
            ("nowa huta", "new mill"),
            ("wielka wieś", "great village"),
            ("stara huta", "old mill"),
        ]);
        let (_, lls) = train_model1_with_ll(&c, 10).unwrap();
        assert_eq!(lls.len(), 10);
        for w in lls.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood dropped: {w:?}");
        }
    }

    #[test]
    fn lexicon_is_pruned_and_normalized() {
        let c = corpus(&[
            ("w a", "p q"),
            ("w b", "r s"),
            ("w c", "t u"),
            ("w d", "v z"),
        ]);
        let lex = train_model1(&c, 5).unwrap();
        for word in ["w", "a", "b", "c", "d"] {
            if let Some(tr) = lex.translations(word) {
                assert!(tr.len() <= 3, "{word} kept {} translations", tr.len());
                assert!(tr.iter().all(|(_, p)| *p >= 0.05));
                let sum: f64 = tr.iter().map(|(_, p)| p).sum();
                assert!(sum <= 1.0 + 1e-6);
                for pair in tr.windows(2) {
                    assert!(pair[0].1 >= pair[1].1);
                }
            }
        }
    }

    #[test]
    fn lexicon_tsv_round_trip_is_stable() {
        let c = corpus(&[("a b", "x y"), ("a c", "x z")]);
        let lex = train_model1(&c, 3).unwrap();
        let text = lex.to_tsv();
        let back = AlignmentLexicon::parse(&text, "mem").unwrap();
        assert_eq!(back.to_tsv(), text, "emission is deterministic across a round trip");
        assert_eq!(back.best("a"), lex.best("a"));
    }

    #[test]
    fn lexicon_validates_invariants() {
        assert!(AlignmentLexicon::parse("a\tx\t0.9\na\ty\t0.2\n", "mem").is_err(), "sum > 1");
        assert!(AlignmentLexicon::parse("a\tx\t0.2\na\ty\t0.5\n", "mem").is_err(), "not sorted");
        assert!(AlignmentLexicon::parse("a\tx\n", "mem").is_err(), "missing column");
        assert!(AlignmentLexicon::parse("a\tx\tq\n", "mem").is_err(), "bad probability");
    }

    #[test]
    fn translate_link_translates_word_by_word() {
        let kb = kb();
        let lex = AlignmentLexicon::new(vec![
            ("północny".into(), vec![("North".into(), 0.9)]),
            ("biegun".into(), vec![("Pole".into(), 0.8)]),
            ("polska".into(), vec![("Poland".into(), 0.95)]),
        ])
        .unwrap();
        assert_eq!(translate_link("północny biegun", &lex, &kb, None), Some(3));
        assert_eq!(translate_link("polska", &lex, &kb, None), Some(1));
        // Untranslated words pass through; "Warsaw" is already English.
        assert_eq!(translate_link("Warsaw", &lex, &kb, None), Some(2));
        // A miss stays a miss.
        assert_eq!(translate_link("błędny biegun", &lex, &kb, None), None);
    }

    #[test]
    fn translate_link_with_identity_lexicon_equals_exact_link() {
        let kb = kb();
        let mut entries = Vec::new();
        for entry in kb.entries() {
            for word in entry.en_title.split_whitespace() {
                entries.push((word.to_owned(), vec![(word.to_owned(), 1.0)]));
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        let lex = AlignmentLexicon::new(entries).unwrap();
        for mention in ["Poland", "warsaw", "North Pole", "nowhere"] {
            assert_eq!(
                translate_link(mention, &lex, &kb, None),
                exact_link(mention, &kb, None)
            );
        }
    }

    #[test]
    fn empty_corpus_and_zero_iterations_are_rejected() {
        let c = corpus(&[("a", "x")]);
        assert!(train_model1(&c, 0).is_err());
        assert!(matches!(
            ParallelTitleCorpus::new("xx", vec![]),
            Err(Error::EmptyInput(_))
        ));
    }
}
