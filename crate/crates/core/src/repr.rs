//! Surface strings as symbol-id sequences.
//!
//! Three schemes are supported: graphemes (one id per Unicode scalar after
//! NFC), phonemes (greedy longest-match IPA segmentation against a feature
//! table's inventory), and articulatory rows (one 21-dim {-1,0,+1} vector per
//! phoneme segment). Id 0 is reserved for unknown symbols in both id-based
//! schemes; unknown segments featurize to the all-zero row.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::encoder::ParallelTitleCorpus;
use crate::error::{Error, Result};

/// Width of an articulatory feature vector.
pub const FEATURE_DIM: usize = 21;

/// Input scheme for the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReprKind {
    Grapheme,
    Phoneme,
    Articulatory,
}

impl ReprKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReprKind::Grapheme => "grapheme",
            ReprKind::Phoneme => "phoneme",
            ReprKind::Articulatory => "articulatory",
        }
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grapheme" => Ok(ReprKind::Grapheme),
            "phoneme" => Ok(ReprKind::Phoneme),
            "articulatory" => Ok(ReprKind::Articulatory),
            other => Err(Error::InvalidArgument(format!(
                "unknown representation kind {other:?} (expected grapheme, phoneme or articulatory)"
            ))),
        }
    }
}

/// NFC-normalize a string (composed form).
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Ordered symbol inventory with id 0 reserved for unknowns: symbol i of the
/// list has id i+1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolVocab {
    kind: ReprKind,
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl SymbolVocab {
    /// Build from an ordered symbol list. Symbols must be unique, non-empty
    /// and free of line breaks (the serialized form is line-oriented).
    pub fn from_symbols(kind: ReprKind, symbols: Vec<String>) -> Result<Self> {
        if kind == ReprKind::Articulatory {
            return Err(Error::InvalidArgument(
                "articulatory inputs carry feature rows, not a symbol vocabulary".into(),
            ));
        }
        if symbols.is_empty() {
            return Err(Error::EmptyInput("symbol vocabulary"));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, sym) in symbols.iter().enumerate() {
            if sym.is_empty() || sym.contains('\n') || sym.contains('\r') {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary symbol {i} is empty or contains a line break"
                )));
            }
            if index.insert(sym.clone(), (i + 1) as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary symbol {sym:?}"
                )));
            }
        }
        Ok(SymbolVocab {
            kind,
            symbols,
            index,
        })
    }

    pub fn kind(&self) -> ReprKind {
        self.kind
    }

    /// Id of a symbol, or 0 for anything outside the inventory.
    pub fn lookup(&self, symbol: &str) -> u32 {
        self.index.get(symbol).copied().unwrap_or(0)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        if id == 0 {
            None
        } else {
            self.symbols.get(id as usize - 1).map(String::as_str)
        }
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Number of distinct ids including the reserved unknown id 0; this is
    /// the required embedding-table row count.
    pub fn id_count(&self) -> usize {
        self.symbols.len() + 1
    }

    /// One symbol per line; the line number equals id - 1.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_line_format())?;
        Ok(())
    }

    pub fn read_from(path: &Path, kind: ReprKind) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        SymbolVocab::from_lines(kind, &text)
    }

    pub fn from_lines(kind: ReprKind, text: &str) -> Result<Self> {
        let symbols: Vec<String> = text.lines().map(str::to_owned).collect();
        SymbolVocab::from_symbols(kind, symbols)
    }

    pub fn to_line_format(&self) -> String {
        let mut out = String::new();
        for sym in &self.symbols {
            out.push_str(sym);
            out.push('\n');
        }
        out
    }

    /// Content hash used to detect checkpoint/vocabulary drift.
    pub fn sha256_hex(&self) -> String {
        hex_digest(self.to_line_format().as_bytes())
    }
}

/// IPA segment inventory with one 21-dim articulatory vector per segment.
/// Also owns the phoneme [`SymbolVocab`] so that segment ids and feature rows
/// always describe the same inventory.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    /// Sorted by segment string for deterministic ids and hashing.
    rows: Vec<(String, [i8; FEATURE_DIM])>,
    index: HashMap<String, usize>,
    /// Longest segment length in Unicode scalars, bounding the greedy match.
    max_segment_scalars: usize,
    vocab: SymbolVocab,
}

impl FeatureTable {
    pub fn from_rows(rows: Vec<(String, [i8; FEATURE_DIM])>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("feature table"));
        }
        let mut rows: Vec<(String, [i8; FEATURE_DIM])> = rows
            .into_iter()
            .map(|(seg, feats)| (nfc(&seg), feats))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut index = HashMap::with_capacity(rows.len());
        let mut max_segment_scalars = 0;
        for (i, (seg, feats)) in rows.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::InvalidArgument("empty feature-table segment".into()));
            }
            if feats.iter().any(|&v| !(-1..=1).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "feature values for segment {seg:?} outside {{-1,0,1}}"
                )));
            }
            if index.insert(seg.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate feature-table segment {seg:?}"
                )));
            }
            max_segment_scalars = max_segment_scalars.max(seg.chars().count());
        }
        let vocab = SymbolVocab::from_symbols(
            ReprKind::Phoneme,
            rows.iter().map(|(seg, _)| seg.clone()).collect(),
        )?;
        Ok(FeatureTable {
            rows,
            index,
            max_segment_scalars,
            vocab,
        })
    }

    /// Parse the TSV form: `segment<TAB>f1,f2,…,f21` with values in {-1,0,1}.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        FeatureTable::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let (seg, feats) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(file, lineno, "expected `segment<TAB>features`"))?;
            if seg.is_empty() {
                return Err(Error::parse(file, lineno, "empty segment"));
            }
            let values: Vec<&str> = feats.split(',').collect();
            if values.len() != FEATURE_DIM {
                return Err(Error::parse(
                    file,
                    lineno,
                    format!("expected {FEATURE_DIM} feature values, got {}", values.len()),
                ));
            }
            let mut row = [0i8; FEATURE_DIM];
            for (i, v) in values.iter().enumerate() {
                row[i] = match v.trim() {
                    "-1" => -1,
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(Error::parse(
                            file,
                            lineno,
                            format!("feature value {other:?} not in {{-1,0,1}}"),
                        ))
                    }
                };
            }
            rows.push((seg.to_owned(), row));
        }
        FeatureTable::from_rows(rows).map_err(|e| match e {
            Error::InvalidArgument(reason) => Error::Parse {
                file: file.to_owned(),
                line: 0,
                reason,
            },
            other => other,
        })
    }

    pub fn get(&self, segment: &str) -> Option<&[i8; FEATURE_DIM]> {
        self.index.get(segment).map(|&i| &self.rows[i].1)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|(seg, _)| seg.as_str())
    }

    /// Phoneme vocabulary over this inventory (ids follow sorted segment
    /// order).
    pub fn vocab(&self) -> &SymbolVocab {
        &self.vocab
    }

    /// Greedy longest-match segmentation of an NFC-normalized IPA string.
    /// Runs of scalars that match no inventory segment come back as
    /// single-scalar segments (which [`SymbolVocab::lookup`] maps to 0).
    pub fn segment(&self, ipa: &str) -> Result<Vec<String>> {
        let text = nfc(ipa);
        if text.is_empty() {
            return Err(Error::EmptyInput("ipa string"));
        }
        let chars: Vec<char> = text.chars().collect();
        let mut segments = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let max_len = self.max_segment_scalars.min(chars.len() - pos);
            let mut matched = None;
            for len in (1..=max_len).rev() {
                let candidate: String = chars[pos..pos + len].iter().collect();
                if self.index.contains_key(&candidate) {
                    matched = Some((candidate, len));
                    break;
                }
            }
            match matched {
                Some((seg, len)) => {
                    segments.push(seg);
                    pos += len;
                }
                None => {
                    segments.push(chars[pos].to_string());
                    pos += 1;
                }
            }
        }
        Ok(segments)
    }

    /// Content hash of the sorted canonical TSV form.
    pub fn sha256_hex(&self) -> String {
        let mut canonical = String::new();
        for (seg, feats) in &self.rows {
            canonical.push_str(seg);
            canonical.push('\t');
            for (i, v) in feats.iter().enumerate() {
                if i > 0 {
                    canonical.push(',');
                }
                canonical.push_str(&v.to_string());
            }
            canonical.push('\n');
        }
        hex_digest(canonical.as_bytes())
    }
}

/// A mention or title ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum SeqRepr {
    Grapheme { ids: Vec<u32> },
    Phoneme { ids: Vec<u32> },
    Articulatory { rows: Vec<[i8; FEATURE_DIM]> },
}

impl SeqRepr {
    pub fn kind(&self) -> ReprKind {
        match self {
            SeqRepr::Grapheme { .. } => ReprKind::Grapheme,
            SeqRepr::Phoneme { .. } => ReprKind::Phoneme,
            SeqRepr::Articulatory { .. } => ReprKind::Articulatory,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SeqRepr::Grapheme { ids } | SeqRepr::Phoneme { ids } => ids.len(),
            SeqRepr::Articulatory { rows } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One id per Unicode scalar of the NFC form; unseen scalars map to id 0.
pub fn graphemes(text: &str, vocab: &SymbolVocab) -> Result<SeqRepr> {
    if vocab.kind() != ReprKind::Grapheme {
        return Err(Error::KindMismatch {
            expected: ReprKind::Grapheme.to_string(),
            got: vocab.kind().to_string(),
        });
    }
    let normalized = nfc(text);
    if normalized.is_empty() {
        return Err(Error::EmptyInput("text"));
    }
    let ids = normalized
        .chars()
        .map(|c| vocab.lookup(c.encode_utf8(&mut [0u8; 4])))
        .collect();
    Ok(SeqRepr::Grapheme { ids })
}

/// Segment an IPA string against the table inventory and map each segment to
/// its phoneme id (0 for segments outside the inventory).
pub fn phonemes(ipa: &str, table: &FeatureTable) -> Result<SeqRepr> {
    let ids = table
        .segment(ipa)?
        .iter()
        .map(|seg| table.vocab().lookup(seg))
        .collect();
    Ok(SeqRepr::Phoneme { ids })
}

/// Replace each phoneme id by its articulatory row; id 0 becomes the zero
/// row.
pub fn featurize(seq: &SeqRepr, table: &FeatureTable) -> Result<SeqRepr> {
    let ids = match seq {
        SeqRepr::Phoneme { ids } => ids,
        other => {
            return Err(Error::KindMismatch {
                expected: ReprKind::Phoneme.to_string(),
                got: other.kind().to_string(),
            })
        }
    };
    let rows = ids
        .iter()
        .map(|&id| match table.vocab().symbol(id) {
            Some(seg) => *table
                .get(seg)
                .expect("vocabulary and table share the same inventory"),
            None => [0i8; FEATURE_DIM],
        })
        .collect();
    Ok(SeqRepr::Articulatory { rows })
}

/// Convert a title to the sequence form a given encoder side expects.
pub fn prepare(
    text: &str,
    kind: ReprKind,
    vocab: Option<&SymbolVocab>,
    table: Option<&FeatureTable>,
) -> Result<SeqRepr> {
    match kind {
        ReprKind::Grapheme => {
            let vocab = vocab.ok_or(Error::EmptyInput("grapheme vocabulary"))?;
            graphemes(text, vocab)
        }
        ReprKind::Phoneme => {
            let table = table.ok_or(Error::EmptyInput("feature table"))?;
            phonemes(text, table)
        }
        ReprKind::Articulatory => {
            let table = table.ok_or(Error::EmptyInput("feature table"))?;
            let seq = phonemes(text, table)?;
            featurize(&seq, table)
        }
    }
}

/// Per-side vocabularies covering every training symbol.
///
/// Grapheme vocabularies list each side's NFC scalars sorted by codepoint, so
/// the result is independent of corpus order. Phoneme vocabularies are fixed
/// by the feature table's inventory (both sides share it: training data on
/// both sides is IPA).
pub fn build_vocab(
    corpus: &ParallelTitleCorpus,
    kind: ReprKind,
    table: Option<&FeatureTable>,
) -> Result<(SymbolVocab, SymbolVocab)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    match kind {
        ReprKind::Grapheme => {
            let side = |pick: fn(&(String, String)) -> &str| -> Result<SymbolVocab> {
                let mut chars: Vec<char> =
                    corpus.pairs().iter().flat_map(|p| nfc(pick(p)).chars().collect::<Vec<_>>()).collect();
                chars.sort_unstable();
                chars.dedup();
                SymbolVocab::from_symbols(
                    ReprKind::Grapheme,
                    chars.into_iter().map(String::from).collect(),
                )
            };
            Ok((side(|p| &p.0)?, side(|p| &p.1)?))
        }
        ReprKind::Phoneme => {
            let table = table.ok_or(Error::EmptyInput("feature table"))?;
            Ok((table.vocab().clone(), table.vocab().clone()))
        }
        ReprKind::Articulatory => Err(Error::InvalidArgument(
            "articulatory inputs use feature rows directly; no vocabulary to build".into(),
        )),
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
