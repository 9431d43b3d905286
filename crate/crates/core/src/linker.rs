//! Knowledge-base scoring and retrieval.
//!
//! A [`KnowledgeBase`] holds entries with an English title and optional
//! per-language parallel titles. A [`KbIndex`] precomputes unit-normalized
//! encoder embeddings for every English title and every available parallel
//! title of one pivot language, so a mention can be scored against the whole
//! KB with plain dot products. An entry's score is its direct (English)
//! similarity, or in pivot mode the maximum of direct and pivot similarity —
//! entries without a parallel title keep their direct score, as if the pivot
//! similarity were negative infinity. Ties always resolve to the lowest
//! entity id so runs are reproducible.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::repr::{FeatureTable, SeqRepr};

/// Rows scored per work unit; chosen so a partition fits comfortably in
/// cache while leaving enough units to parallelize over.
pub const SCAN_CHUNK: usize = 4096;

/// Coarse entity category carried by KB entries and test records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "LOC")]
    Loc,
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityType::Per => "PER",
            EntityType::Org => "ORG",
            EntityType::Loc => "LOC",
        })
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PER" => Ok(EntityType::Per),
            "ORG" => Ok(EntityType::Org),
            "LOC" => Ok(EntityType::Loc),
            other => Err(Error::InvalidArgument(format!(
                "unknown entity type {other:?} (expected PER, ORG or LOC)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub id: u32,
    pub en_title: String,
    pub entity_type: Option<EntityType>,
    /// Parallel titles keyed by language code.
    pub pivot_titles: BTreeMap<String, String>,
}

/// Entries sorted by unique entity id.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
}

impl KnowledgeBase {
    pub fn new(mut entries: Vec<KbEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("knowledge base"));
        }
        entries.sort_by_key(|e| e.id);
        for pair in entries.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::InvalidArgument(format!(
                    "duplicate entity id {}",
                    pair[0].id
                )));
            }
        }
        for e in &entries {
            if e.en_title.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "entity {} has an empty English title",
                    e.id
                )));
            }
            if e.pivot_titles.values().any(|t| t.is_empty()) {
                return Err(Error::InvalidArgument(format!(
                    "entity {} has an empty parallel title",
                    e.id
                )));
            }
        }
        Ok(KnowledgeBase { entries })
    }

    /// Parse the TSV form:
    /// `entity_id<TAB>english_title<TAB>type<TAB>lang=title;…`
    /// The type column may be `-` (or empty) and the final column may be
    /// empty or missing entirely.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(cols.len() == 3 || cols.len() == 4) {
                return Err(Error::parse(
                    file,
                    lineno,
                    format!("expected 3 or 4 columns, got {}", cols.len()),
                ));
            }
            let id: u32 = cols[0]
                .parse()
                .map_err(|_| Error::parse(file, lineno, format!("bad entity id {:?}", cols[0])))?;
            if cols[1].is_empty() {
                return Err(Error::parse(file, lineno, "empty English title"));
            }
            let entity_type = match cols[2] {
                "" | "-" => None,
                t => Some(
                    t.parse::<EntityType>()
                        .map_err(|e| Error::parse(file, lineno, e.to_string()))?,
                ),
            };
            let mut pivot_titles = BTreeMap::new();
            if cols.len() == 4 && !cols[3].is_empty() {
                for item in cols[3].split(';') {
                    let (lang, title) = item.split_once('=').ok_or_else(|| {
                        Error::parse(file, lineno, format!("bad pivot item {item:?}"))
                    })?;
                    if lang.is_empty() || title.is_empty() {
                        return Err(Error::parse(
                            file,
                            lineno,
                            format!("empty language or title in {item:?}"),
                        ));
                    }
                    if pivot_titles.insert(lang.to_owned(), title.to_owned()).is_some() {
                        return Err(Error::parse(
                            file,
                            lineno,
                            format!("duplicate pivot language {lang:?}"),
                        ));
                    }
                }
            }
            entries.push(KbEntry {
                id,
                en_title: cols[1].to_owned(),
                entity_type,
                pivot_titles,
            });
        }
        KnowledgeBase::new(entries).map_err(|e| match e {
            Error::InvalidArgument(reason) => Error::parse(file, 0, reason),
            Error::EmptyInput(_) => Error::parse(file, 0, "empty knowledge base"),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        KnowledgeBase::parse(&text, &path.display().to_string())
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn get(&self, id: u32) -> Option<&KbEntry> {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Whether scoring may use parallel-title similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkMode {
    DirectOnly,
    Pivot,
}

impl FromStr for LinkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct-only" => Ok(LinkMode::DirectOnly),
            "pivot" => Ok(LinkMode::Pivot),
            other => Err(Error::InvalidArgument(format!(
                "unknown link mode {other:?} (expected direct-only or pivot)"
            ))),
        }
    }
}

/// Precomputed unit-row embedding matrices for one (model, pivot language)
/// pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KbIndex {
    pivot_lang: String,
    /// Metadata hash of the checkpoint this index was built from.
    params_hash: String,
    dim: usize,
    /// Ascending entity ids, one per KB entry.
    entry_ids: Vec<u32>,
    /// `len(entry_ids) x dim` unit rows, English titles.
    en: Vec<f32>,
    /// `len(pivot_entry) x dim` unit rows, parallel titles.
    pivot: Vec<f32>,
    /// Entity id of each pivot row (ascending; subset of `entry_ids`).
    pivot_entry: Vec<u32>,
    /// Position of each pivot row's entry within `entry_ids`.
    pivot_pos: Vec<u32>,
}

fn normalize_into(v: &[f32], out: &mut Vec<f32>) -> Result<()> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateVector);
    }
    out.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc as f32
}

impl KbIndex {
    /// Encode every English title and every `pivot_lang` parallel title.
    pub fn build(
        params: &EncoderParams,
        kb: &KnowledgeBase,
        pivot_lang: &str,
        table: Option<&FeatureTable>,
    ) -> Result<KbIndex> {
        let dim = params.output_dim();
        let en_seqs: Vec<SeqRepr> = kb
            .entries()
            .iter()
            .map(|e| params.prepare_en(&e.en_title, table))
            .collect::<Result<_>>()?;
        let mut pivot_entry = Vec::new();
        let mut pivot_seqs = Vec::new();
        for e in kb.entries() {
            if let Some(title) = e.pivot_titles.get(pivot_lang) {
                pivot_entry.push(e.id);
                // Parallel titles are in the model's source language, so they
                // go through the source-side encoder — the same path mentions
                // take at query time.
                pivot_seqs.push(params.prepare_src(title, table)?);
            }
        }

        let mut en = Vec::with_capacity(kb.len() * dim);
        for v in params.encode_en_batch(&en_seqs)? {
            normalize_into(v.data(), &mut en)?;
        }
        let mut pivot = Vec::with_capacity(pivot_seqs.len() * dim);
        for v in params.encode_src_batch(&pivot_seqs)? {
            normalize_into(v.data(), &mut pivot)?;
        }

        let entry_ids: Vec<u32> = kb.entries().iter().map(|e| e.id).collect();
        KbIndex::from_parts(
            pivot_lang.to_owned(),
            params.meta_hash(),
            dim,
            entry_ids,
            en,
            pivot,
            pivot_entry,
        )
    }

    /// Build directly from raw (not necessarily unit) embedding vectors;
    /// intended for synthetic fixtures and tests.
    pub fn from_embeddings(
        pivot_lang: &str,
        params_hash: &str,
        entry_rows: Vec<(u32, Vec<f32>)>,
        pivot_rows: Vec<(u32, Vec<f32>)>,
    ) -> Result<KbIndex> {
        if entry_rows.is_empty() {
            return Err(Error::EmptyInput("knowledge base embeddings"));
        }
        let dim = entry_rows[0].1.len();
        let mut entry_ids = Vec::with_capacity(entry_rows.len());
        let mut en = Vec::with_capacity(entry_rows.len() * dim);
        for (id, v) in &entry_rows {
            if v.len() != dim {
                return Err(Error::shape(
                    "index",
                    format!("entry {id} has dim {}, expected {dim}", v.len()),
                ));
            }
            entry_ids.push(*id);
            normalize_into(v, &mut en)?;
        }
        let mut pivot_entry = Vec::with_capacity(pivot_rows.len());
        let mut pivot = Vec::with_capacity(pivot_rows.len() * dim);
        for (id, v) in &pivot_rows {
            if v.len() != dim {
                return Err(Error::shape(
                    "index",
                    format!("pivot row {id} has dim {}, expected {dim}", v.len()),
                ));
            }
            pivot_entry.push(*id);
            normalize_into(v, &mut pivot)?;
        }
        KbIndex::from_parts(
            pivot_lang.to_owned(),
            params_hash.to_owned(),
            dim,
            entry_ids,
            en,
            pivot,
            pivot_entry,
        )
    }

    fn from_parts(
        pivot_lang: String,
        params_hash: String,
        dim: usize,
        entry_ids: Vec<u32>,
        en: Vec<f32>,
        pivot: Vec<f32>,
        pivot_entry: Vec<u32>,
    ) -> Result<KbIndex> {
        if dim == 0 || entry_ids.is_empty() {
            return Err(Error::EmptyInput("index"));
        }
        if entry_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "index entry ids must be strictly ascending".into(),
            ));
        }
        if en.len() != entry_ids.len() * dim || pivot.len() != pivot_entry.len() * dim {
            return Err(Error::shape("index", "matrix sizes disagree with id lists"));
        }
        let mut pivot_pos = Vec::with_capacity(pivot_entry.len());
        for pair in pivot_entry.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidArgument(
                    "pivot row ids must be strictly ascending".into(),
                ));
            }
        }
        for &id in &pivot_entry {
            let pos = entry_ids
                .binary_search(&id)
                .map_err(|_| Error::InvalidArgument(format!("pivot row {id} not in the KB")))?;
            pivot_pos.push(pos as u32);
        }
        let index = KbIndex {
            pivot_lang,
            params_hash,
            dim,
            entry_ids,
            en,
            pivot,
            pivot_entry,
            pivot_pos,
        };
        index.check_unit_rows()?;
        Ok(index)
    }

    fn check_unit_rows(&self) -> Result<()> {
        let check = |m: &[f32], what: &str| -> Result<()> {
            for row in m.chunks_exact(self.dim) {
                let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::Format(format!(
                        "{what} row has norm {norm}, expected 1"
                    )));
                }
            }
            Ok(())
        };
        check(&self.en, "english")?;
        check(&self.pivot, "pivot")
    }

    pub fn pivot_lang(&self) -> &str {
        &self.pivot_lang
    }

    pub fn params_hash(&self) -> &str {
        &self.params_hash
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entry_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_ids.is_empty()
    }

    pub fn entry_ids(&self) -> &[u32] {
        &self.entry_ids
    }

    /// Does this entry have a parallel title in the index's pivot language?
    pub fn has_pivot(&self, id: u32) -> bool {
        self.pivot_entry.binary_search(&id).is_ok()
    }

    /// Reject use with a model other than the one the index was built from.
    pub fn validate_params(&self, params: &EncoderParams) -> Result<()> {
        if self.params_hash != params.meta_hash() {
            return Err(Error::Format(
                "index was built from a different checkpoint (metadata hash mismatch)".into(),
            ));
        }
        if self.dim != params.output_dim() {
            return Err(Error::shape(
                "index",
                format!("dim {} vs encoder output {}", self.dim, params.output_dim()),
            ));
        }
        Ok(())
    }

    fn unit_query(&self, mention_vec: &[f32]) -> Result<Vec<f32>> {
        if mention_vec.len() != self.dim {
            return Err(Error::shape(
                "score",
                format!("mention dim {} vs index dim {}", mention_vec.len(), self.dim),
            ));
        }
        let mut q = Vec::with_capacity(self.dim);
        normalize_into(mention_vec, &mut q)?;
        Ok(q)
    }

    /// Scores for every entry, in `entry_ids` order.
    pub fn scores(&self, mention_vec: &[f32], mode: LinkMode) -> Result<Vec<f32>> {
        let q = self.unit_query(mention_vec)?;
        Ok(self.scores_unit(&q, mode, false))
    }

    /// Identical to [`KbIndex::scores`] but scans fixed-size row partitions
    /// in parallel. Each row's dot product is computed exactly as in the
    /// sequential path, so results are bit-identical.
    pub fn par_scores(&self, mention_vec: &[f32], mode: LinkMode) -> Result<Vec<f32>> {
        let q = self.unit_query(mention_vec)?;
        Ok(self.scores_unit(&q, mode, true))
    }

    fn scores_unit(&self, q: &[f32], mode: LinkMode, parallel: bool) -> Vec<f32> {
        let mut out = vec![0.0f32; self.entry_ids.len()];
        if parallel {
            out.par_chunks_mut(SCAN_CHUNK)
                .zip(self.en.par_chunks(SCAN_CHUNK * self.dim))
                .for_each(|(scores, rows)| {
                    for (s, row) in scores.iter_mut().zip(rows.chunks_exact(self.dim)) {
                        *s = dot(row, q);
                    }
                });
        } else {
            for (s, row) in out.iter_mut().zip(self.en.chunks_exact(self.dim)) {
                *s = dot(row, q);
            }
        }
        if mode == LinkMode::Pivot {
            let sims: Vec<f32> = if parallel {
                self.pivot
                    .par_chunks(SCAN_CHUNK * self.dim)
                    .flat_map_iter(|rows| {
                        rows.chunks_exact(self.dim).map(|row| dot(row, q)).collect::<Vec<_>>()
                    })
                    .collect()
            } else {
                self.pivot.chunks_exact(self.dim).map(|row| dot(row, q)).collect()
            };
            for (&pos, sim) in self.pivot_pos.iter().zip(sims) {
                let slot = &mut out[pos as usize];
                if sim > *slot {
                    *slot = sim;
                }
            }
        }
        out
    }

    /// Score of a single entry.
    pub fn score_entry(&self, mention_vec: &[f32], id: u32, mode: LinkMode) -> Result<f32> {
        let q = self.unit_query(mention_vec)?;
        let pos = self
            .entry_ids
            .binary_search(&id)
            .map_err(|_| Error::InvalidArgument(format!("entity {id} not in the index")))?;
        let direct = dot(&self.en[pos * self.dim..(pos + 1) * self.dim], &q);
        if mode == LinkMode::DirectOnly {
            return Ok(direct);
        }
        match self.pivot_entry.binary_search(&id) {
            Ok(j) => {
                let sim = dot(&self.pivot[j * self.dim..(j + 1) * self.dim], &q);
                Ok(direct.max(sim))
            }
            Err(_) => Ok(direct),
        }
    }

    /// Highest-scoring entry; ties go to the lowest entity id.
    pub fn link(&self, mention_vec: &[f32], mode: LinkMode) -> Result<(u32, f32)> {
        let scores = self.scores(mention_vec, mode)?;
        Ok(argmax_by_id(&self.entry_ids, &scores))
    }

    /// The k best entries, scores descending, entity id ascending on ties.
    pub fn topk(&self, mention_vec: &[f32], mode: LinkMode, k: usize) -> Result<Vec<(u32, f32)>> {
        let scores = self.scores(mention_vec, mode)?;
        topk_from_scores(&self.entry_ids, &scores, k)
    }

    /// Parallel-scan variant of [`KbIndex::topk`]; bit-identical results.
    pub fn par_topk(
        &self,
        mention_vec: &[f32],
        mode: LinkMode,
        k: usize,
    ) -> Result<Vec<(u32, f32)>> {
        let scores = self.par_scores(mention_vec, mode)?;
        topk_from_scores(&self.entry_ids, &scores, k)
    }

    // ── Cache file ──────────────────────────────────────────────────────

    /// Write the index as a versioned binary cache.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&CacheMeta {
            pivot_lang: self.pivot_lang.clone(),
            checkpoint_sha256: self.params_hash.clone(),
            dim: self.dim,
            entries: self.entry_ids.len(),
            pivot_rows: self.pivot_entry.len(),
        })?;
        let mut buf = Vec::with_capacity(
            10 + meta.len() + 4 * (self.entry_ids.len() + self.pivot_entry.len())
                + 4 * (self.en.len() + self.pivot.len()),
        );
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        for &id in &self.entry_ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for &id in &self.pivot_entry {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for &v in &self.en {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.pivot {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<KbIndex> {
        let bytes =
            fs::read(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
        if bytes.len() < 10 || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Format("not an index cache file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported index cache version {version} (expected {CACHE_VERSION})"
            )));
        }
        let meta_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let meta_end = 10usize
            .checked_add(meta_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated index cache metadata".into()))?;
        let meta: CacheMeta = serde_json::from_slice(&bytes[10..meta_end])?;

        let mut offset = meta_end;
        let read_u32s = |count: usize, offset: &mut usize| -> Result<Vec<u32>> {
            let end = offset
                .checked_add(count * 4)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| Error::Format("truncated index cache".into()))?;
            let out = bytes[*offset..end]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *offset = end;
            Ok(out)
        };
        let entry_ids = read_u32s(meta.entries, &mut offset)?;
        let pivot_entry = read_u32s(meta.pivot_rows, &mut offset)?;
        let read_f32s = |count: usize, offset: &mut usize| -> Result<Vec<f32>> {
            let end = offset
                .checked_add(count * 4)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| Error::Format("truncated index cache".into()))?;
            let out = bytes[*offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *offset = end;
            Ok(out)
        };
        let en = read_f32s(meta.entries * meta.dim, &mut offset)?;
        let pivot = read_f32s(meta.pivot_rows * meta.dim, &mut offset)?;
        if offset != bytes.len() {
            return Err(Error::Format("trailing bytes in index cache".into()));
        }
        KbIndex::from_parts(
            meta.pivot_lang,
            meta.checkpoint_sha256,
            meta.dim,
            entry_ids,
            en,
            pivot,
            pivot_entry,
        )
    }
}

const CACHE_MAGIC: &[u8; 4] = b"PBIX";
const CACHE_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    pivot_lang: String,
    checkpoint_sha256: String,
    dim: usize,
    entries: usize,
    pivot_rows: usize,
}

fn argmax_by_id(ids: &[u32], scores: &[f32]) -> (u32, f32) {
    let mut best = 0usize;
    for i in 1..scores.len() {
        // Strict comparison keeps the earliest (= lowest-id) entry on ties.
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (ids[best], scores[best])
}

fn topk_from_scores(ids: &[u32], scores: &[f32], k: usize) -> Result<Vec<(u32, f32)>> {
    if k == 0 || k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range 1..={}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(ids[a].cmp(&ids[b]))
    });
    Ok(order[..k].iter().map(|&i| (ids[i], scores[i])).collect())
}

/// A checkpoint paired with an index built from it.
pub struct Linker {
    params: EncoderParams,
    index: KbIndex,
}

impl Linker {
    pub fn new(params: EncoderParams, index: KbIndex) -> Result<Self> {
        index.validate_params(&params)?;
        Ok(Linker { params, index })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn index(&self) -> &KbIndex {
        &self.index
    }

    pub fn encode_mention(&self, mention: &SeqRepr) -> Result<Vec<f32>> {
        Ok(self.params.encode_src(mention)?.data().to_vec())
    }

    pub fn link(&self, mention: &SeqRepr, mode: LinkMode) -> Result<(u32, f32)> {
        let q = self.encode_mention(mention)?;
        self.index.link(&q, mode)
    }

    pub fn topk(&self, mention: &SeqRepr, mode: LinkMode, k: usize) -> Result<Vec<(u32, f32)>> {
        let q = self.encode_mention(mention)?;
        self.index.topk(&q, mode, k)
    }

    pub fn scores(&self, mention: &SeqRepr, mode: LinkMode) -> Result<Vec<f32>> {
        let q = self.encode_mention(mention)?;
        self.index.scores(&q, mode)
    }
}

// ── Multi-pivot combination ─────────────────────────────────────────────

/// How to weight each pivot model's scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Uniform,
    Phylo,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "phylo" => Ok(Weighting::Phylo),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting {other:?} (expected uniform or phylo)"
            ))),
        }
    }
}

/// Symmetric language distances in [0, 1].
#[derive(Debug, Clone, Default)]
pub struct PhyloWeights {
    dist: HashMap<(String, String), f64>,
}

impl PhyloWeights {
    pub fn new(entries: Vec<(String, String, f64)>) -> Result<Self> {
        let mut dist = HashMap::with_capacity(entries.len() * 2);
        for (a, b, d) in entries {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidArgument(format!(
                    "distance {d} for ({a}, {b}) outside [0, 1]"
                )));
            }
            dist.insert((a.clone(), b.clone()), d);
            dist.insert((b, a), d);
        }
        Ok(PhyloWeights { dist })
    }

    /// Parse the TSV form: `lang_a<TAB>lang_b<TAB>distance`.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(file, lineno, "expected `lang_a<TAB>lang_b<TAB>distance`"));
            }
            let d: f64 = cols[2]
                .parse()
                .map_err(|_| Error::parse(file, lineno, format!("bad distance {:?}", cols[2])))?;
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::parse(file, lineno, format!("distance {d} outside [0, 1]")));
            }
            entries.push((cols[0].to_owned(), cols[1].to_owned(), d));
        }
        PhyloWeights::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        PhyloWeights::parse(&text, &path.display().to_string())
    }

    pub fn distance(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return Some(0.0);
        }
        self.dist.get(&(a.to_owned(), b.to_owned())).copied()
    }

    /// Multiplicative trust in a pivot model: uniform → 1; phylogenetic →
    /// 1 − distance, and 0 when the distance is unknown (no guessing).
    pub fn weight(&self, src_lang: &str, pivot_lang: &str, weighting: Weighting) -> f64 {
        match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Phylo => match self.distance(src_lang, pivot_lang) {
                Some(d) => 1.0 - d,
                None => 0.0,
            },
        }
    }
}

/// One pivot model's contribution to a combined run: its index, the mention
/// encoded by that model, and the model's weight.
pub struct PivotArm<'a> {
    pub index: &'a KbIndex,
    pub mention_vec: Vec<f32>,
    pub weight: f64,
}

fn validate_arms(arms: &[PivotArm<'_>]) -> Result<()> {
    if arms.is_empty() {
        return Err(Error::EmptyInput("pivot arms"));
    }
    for arm in &arms[1..] {
        if arm.index.entry_ids() != arms[0].index.entry_ids() {
            return Err(Error::InvalidArgument(
                "pivot indices cover different knowledge bases".into(),
            ));
        }
    }
    Ok(())
}

/// Combined per-entry scores: `max` over arms of `weight * score`, where each
/// arm's score already includes its own direct/pivot maximum.
pub fn multi_pivot_scores(arms: &[PivotArm<'_>]) -> Result<Vec<f32>> {
    validate_arms(arms)?;
    let mut combined: Option<Vec<f32>> = None;
    for arm in arms {
        let scores = arm.index.scores(&arm.mention_vec, LinkMode::Pivot)?;
        let weighted: Vec<f32> = scores.iter().map(|&s| (arm.weight * s as f64) as f32).collect();
        combined = Some(match combined {
            None => weighted,
            Some(mut acc) => {
                for (a, w) in acc.iter_mut().zip(weighted) {
                    if w > *a {
                        *a = w;
                    }
                }
                acc
            }
        });
    }
    Ok(combined.unwrap())
}

pub fn multi_pivot_link(arms: &[PivotArm<'_>]) -> Result<(u32, f32)> {
    let scores = multi_pivot_scores(arms)?;
    Ok(argmax_by_id(arms[0].index.entry_ids(), &scores))
}

pub fn multi_pivot_topk(arms: &[PivotArm<'_>], k: usize) -> Result<Vec<(u32, f32)>> {
    let scores = multi_pivot_scores(arms)?;
    topk_from_scores(arms[0].index.entry_ids(), &scores, k)
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn kb_text() -> &'static str {
        "1\tPoland\tLOC\thi=polska\n\
         2\tWarsaw\tLOC\t\n\
         3\tMarie Curie\tPER\thi=curie;id=kiri\n\
         4\tUnesco\t-\n"
    }

    #[test]
    fn kb_parses_types_and_pivot_lists() {
        let kb = KnowledgeBase::parse(kb_text(), "mem").unwrap();
        assert_eq!(kb.len(), 4);
        let poland = kb.get(1).unwrap();
        assert_eq!(poland.entity_type, Some(EntityType::Loc));
        assert_eq!(poland.pivot_titles.get("hi").unwrap(), "polska");
        assert!(kb.get(2).unwrap().pivot_titles.is_empty());
        assert_eq!(kb.get(3).unwrap().pivot_titles.len(), 2);
        assert_eq!(kb.get(4).unwrap().entity_type, None);
        assert!(kb.get(99).is_none());
    }

    #[test]
    fn kb_rejects_malformed_lines_with_line_numbers() {
        for (text, line) in [
            ("1\tPoland\n", 1),                        // too few columns
            ("1\tPoland\tCITY\t\n", 1),                // unknown type
            ("x\tPoland\tLOC\t\n", 1),                 // bad id
            ("1\t\tLOC\t\n", 1),                       // empty title
            ("1\tA\tLOC\t\n2\tB\tLOC\thi=\n", 2),      // empty pivot title
            ("1\tA\tLOC\thi=a;hi=b\n", 1),             // duplicate pivot lang
        ] {
            let err = KnowledgeBase::parse(text, "mem").unwrap_err();
            assert!(
                matches!(err, Error::Parse { line: l, .. } if l == line),
                "{text:?} → {err}"
            );
        }
        // Duplicate ids are caught after parsing, without a line number.
        assert!(KnowledgeBase::parse("1\tA\tLOC\t\n1\tB\tLOC\t\n", "mem").is_err());
    }

    /// Index over hand-picked 2-d vectors: entry 1 aligned with the query
    /// directly, entry 2 orthogonal directly but aligned through its pivot
    /// title, entry 3 without any pivot title.
    fn hand_index() -> KbIndex {
        KbIndex::from_embeddings(
            "hi",
            "h",
            vec![
                (1, vec![1.0, 0.0]),
                (2, vec![0.0, 1.0]),
                (3, vec![0.6, 0.8]),
            ],
            vec![(2, vec![1.0, 0.0])],
        )
        .unwrap()
    }

    #[test]
    fn pivot_mode_takes_the_maximum_of_both_similarities() {
        let index = hand_index();
        let q = [1.0f32, 0.0];
        assert!((index.score_entry(&q, 2, LinkMode::DirectOnly).unwrap() - 0.0).abs() < 1e-6);
        assert!((index.score_entry(&q, 2, LinkMode::Pivot).unwrap() - 1.0).abs() < 1e-6);
        // No pivot title: both modes see the same (direct) score.
        let d3 = index.score_entry(&q, 3, LinkMode::DirectOnly).unwrap();
        let p3 = index.score_entry(&q, 3, LinkMode::Pivot).unwrap();
        assert_eq!(d3.to_bits(), p3.to_bits());
        assert!((d3 - 0.6).abs() < 1e-5);
    }

    #[test]
    fn scores_and_score_entry_agree() {
        let index = hand_index();
        let q = [0.3f32, -0.9];
        for mode in [LinkMode::DirectOnly, LinkMode::Pivot] {
            let all = index.scores(&q, mode).unwrap();
            for (i, &id) in index.entry_ids().iter().enumerate() {
                let one = index.score_entry(&q, id, mode).unwrap();
                assert_eq!(all[i].to_bits(), one.to_bits());
            }
        }
    }

    #[test]
    fn link_breaks_ties_by_lowest_id() {
        let index = KbIndex::from_embeddings(
            "hi",
            "h",
            vec![(5, vec![1.0, 0.0]), (9, vec![1.0, 0.0])],
            vec![],
        )
        .unwrap();
        let (id, _) = index.link(&[2.0, 0.0], LinkMode::Pivot).unwrap();
        assert_eq!(id, 5);
    }

    #[test]
    fn topk_orders_and_bounds() {
        let index = hand_index();
        let q = [1.0f32, 0.2];
        let all = index.topk(&q, LinkMode::Pivot, 3).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all[0].1 >= all[1].1 && all[1].1 >= all[2].1);
        // top-1 agrees with link, and shorter lists are prefixes.
        let (id, score) = index.link(&q, LinkMode::Pivot).unwrap();
        assert_eq!((all[0].0, all[0].1.to_bits()), (id, score.to_bits()));
        let two = index.topk(&q, LinkMode::Pivot, 2).unwrap();
        assert_eq!(&all[..2], two.as_slice());

        assert!(index.topk(&q, LinkMode::Pivot, 0).is_err());
        assert!(index.topk(&q, LinkMode::Pivot, 4).is_err());
    }

    fn random_index(n: usize, dim: usize, seed: u64) -> (KbIndex, Vec<(u32, Vec<f32>)>, Vec<(u32, Vec<f32>)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut pivots = Vec::new();
        for i in 0..n {
            let id = (i * 2 + 1) as u32; // non-contiguous on purpose
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            entries.push((id, v));
            if i % 3 == 0 {
                let p: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                pivots.push((id, p));
            }
        }
        let index =
            KbIndex::from_embeddings("hi", "h", entries.clone(), pivots.clone()).unwrap();
        (index, entries, pivots)
    }

    /// The production scan must match a direct per-entry f64 cosine loop.
    #[test]
    fn scan_matches_brute_force_cosines() {
        let (index, entries, pivots) = random_index(50, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let cosine = |a: &[f32], b: &[f32]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let scores = index.scores(&q, LinkMode::Pivot).unwrap();
        for (i, (id, en_vec)) in entries.iter().enumerate() {
            let mut expected = cosine(en_vec, &q);
            if let Some((_, p)) = pivots.iter().find(|(pid, _)| pid == id) {
                expected = expected.max(cosine(p, &q));
            }
            assert!(
                (scores[i] as f64 - expected).abs() < 1e-5,
                "entry {id}: scan {} vs oracle {expected}",
                scores[i]
            );
        }
    }

    #[test]
    fn parallel_scan_is_bit_identical() {
        let (index, _, _) = random_index(500, 16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for mode in [LinkMode::DirectOnly, LinkMode::Pivot] {
            let seq: Vec<u32> = index.scores(&q, mode).unwrap().iter().map(|s| s.to_bits()).collect();
            let par: Vec<u32> = index.par_scores(&q, mode).unwrap().iter().map(|s| s.to_bits()).collect();
            assert_eq!(seq, par);
        }
        let a = index.topk(&q, LinkMode::Pivot, 20).unwrap();
        let b = index.par_topk(&q, LinkMode::Pivot, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pivot_mode_never_scores_below_direct_mode() {
        let (index, _, _) = random_index(200, 8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let direct = index.scores(&q, LinkMode::DirectOnly).unwrap();
        let pivot = index.scores(&q, LinkMode::Pivot).unwrap();
        for (i, &id) in index.entry_ids().iter().enumerate() {
            assert!(pivot[i] >= direct[i]);
            if !index.has_pivot(id) {
                assert_eq!(pivot[i].to_bits(), direct[i].to_bits());
            }
        }
    }

    #[test]
    fn zero_query_is_degenerate() {
        let index = hand_index();
        assert!(matches!(
            index.scores(&[0.0, 0.0], LinkMode::Pivot),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn cache_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let (index, _, _) = random_index(40, 6, 12);
        index.save_cache(&path).unwrap();
        let first = std::fs::read(&path).unwrap();

        let loaded = KbIndex::load_cache(&path).unwrap();
        assert_eq!(loaded, index);

        let path2 = dir.path().join("index2.bin");
        loaded.save_cache(&path2).unwrap();
        assert_eq!(std::fs::read(&path2).unwrap(), first);
    }

    #[test]
    fn cache_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let (index, _, _) = random_index(10, 4, 13);
        index.save_cache(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(KbIndex::load_cache(&path), Err(Error::Format(_))));

        index.save_cache(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(KbIndex::load_cache(&path), Err(Error::Format(_))));
    }

    #[test]
    fn multi_pivot_with_unit_weight_degenerates_to_single_link() {
        let (index, _, _) = random_index(60, 8, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let single = index.link(&q, LinkMode::Pivot).unwrap();
            let arms = [PivotArm {
                index: &index,
                mention_vec: q.clone(),
                weight: 1.0,
            }];
            let multi = multi_pivot_link(&arms).unwrap();
            assert_eq!(single.0, multi.0);
        }
    }

    #[test]
    fn multi_pivot_matches_brute_force_over_arms() {
        let (ia, _, _) = random_index(30, 4, 16);
        let (ib, _, _) = random_index(30, 4, 17);
        let (ic, _, _) = random_index(30, 4, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let qs: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let weights = [1.0, 0.4, 0.7];
        let arms: Vec<PivotArm<'_>> = [&ia, &ib, &ic]
            .iter()
            .zip(&qs)
            .zip(weights)
            .map(|((index, q), weight)| PivotArm {
                index,
                mention_vec: q.clone(),
                weight,
            })
            .collect();
        let combined = multi_pivot_scores(&arms).unwrap();

        for (i, _) in ia.entry_ids().iter().enumerate() {
            let mut expected = f64::NEG_INFINITY;
            for (arm, w) in arms.iter().zip(weights) {
                let s = arm.index.scores(&arm.mention_vec, LinkMode::Pivot).unwrap()[i];
                expected = expected.max(w * s as f64);
            }
            assert!((combined[i] as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn multi_pivot_validates_arm_compatibility() {
        let (ia, _, _) = random_index(10, 4, 20);
        let (ib, _, _) = random_index(12, 4, 21);
        let arms = [
            PivotArm {
                index: &ia,
                mention_vec: vec![1.0, 0.0, 0.0, 0.0],
                weight: 1.0,
            },
            PivotArm {
                index: &ib,
                mention_vec: vec![1.0, 0.0, 0.0, 0.0],
                weight: 1.0,
            },
        ];
        assert!(multi_pivot_scores(&arms).is_err());
        assert!(multi_pivot_scores(&[]).is_err());
    }

    #[test]
    fn phylo_weights_parse_and_default_rules() {
        let w = PhyloWeights::parse("lo\thi\t0.25\nti\tam\t0.1\n", "mem").unwrap();
        assert_eq!(w.distance("lo", "hi"), Some(0.25));
        assert_eq!(w.distance("hi", "lo"), Some(0.25), "distances are symmetric");
        assert_eq!(w.distance("lo", "lo"), Some(0.0), "same language is distance 0");
        assert_eq!(w.distance("lo", "zz"), None);

        assert_eq!(w.weight("lo", "hi", Weighting::Phylo), 0.75);
        assert_eq!(w.weight("lo", "zz", Weighting::Phylo), 0.0);
        assert_eq!(w.weight("lo", "zz", Weighting::Uniform), 1.0);

        assert!(PhyloWeights::parse("a\tb\t1.5\n", "mem").is_err());
        assert!(PhyloWeights::parse("a\tb\n", "mem").is_err());
    }
}
