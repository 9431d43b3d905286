//! Experiment orchestration: test-set ingestion, run manifests, metric
//! computation, and report emission.
//!
//! A run is described entirely by a declarative TOML manifest, so every
//! experiment — single-pivot linking, multi-pivot combination, baselines,
//! joint-training sweeps — is a manifest variation rather than a flag soup.
//! [`evaluate`] loads and cross-validates every referenced artifact, scores
//! each test record with the configured system, and returns an
//! [`EvalReport`] whose internal consistency ([`EvalReport::validate`]) is
//! checked before it is handed back.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{exact_link, translate_link, AlignmentLexicon};
use crate::encoder::{load_checkpoint, EncoderParams, ParallelTitleCorpus, TrainingConfig};
use crate::error::{Error, Result};
use crate::linker::{
    multi_pivot_topk, EntityType, KbIndex, KnowledgeBase, LinkMode, PhyloWeights, PivotArm,
    Weighting,
};
use crate::repr::{FeatureTable, ReprKind};

// ── Test set ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TestRecord {
    /// Orthographic mention, or a precomputed IPA string for phonetic
    /// representations.
    pub mention: String,
    pub lang: String,
    pub gold: u32,
    pub entity_type: EntityType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    records: Vec<TestRecord>,
}

impl TestSet {
    /// Parse the TSV form: `mention<TAB>lang<TAB>gold_entity_id<TAB>type`.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse(
                    file,
                    lineno,
                    format!("expected 4 columns, got {}", cols.len()),
                ));
            }
            if cols[0].is_empty() || cols[1].is_empty() {
                return Err(Error::parse(file, lineno, "empty mention or language"));
            }
            let gold: u32 = cols[2]
                .parse()
                .map_err(|_| Error::parse(file, lineno, format!("bad entity id {:?}", cols[2])))?;
            let entity_type = cols[3]
                .parse::<EntityType>()
                .map_err(|e| Error::parse(file, lineno, e.to_string()))?;
            records.push(TestRecord {
                mention: cols[0].to_owned(),
                lang: cols[1].to_owned(),
                gold,
                entity_type,
            });
        }
        if records.is_empty() {
            return Err(Error::parse(file, 0, "empty test set"));
        }
        Ok(TestSet { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        TestSet::parse(&text, &path.display().to_string())
    }

    /// Every gold id must resolve against the KB.
    pub fn validate_against(&self, kb: &KnowledgeBase) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if kb.get(r.gold).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "test record {} ({:?}) references entity {} absent from the KB",
                    i + 1,
                    r.mention,
                    r.gold
                )));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[TestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

// ── Manifest ────────────────────────────────────────────────────────────

/// Which system scores the test records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    /// The trained similarity encoder.
    Encoder,
    /// Exact string match against English titles.
    Exact,
    /// Exact string match against English and pivot titles.
    ExactPivot,
    /// Word-by-word lexicon translation, then exact match.
    Translate,
    /// As `translate`, matching pivot titles too.
    TranslatePivot,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::Encoder => "encoder",
            SystemKind::Exact => "exact",
            SystemKind::ExactPivot => "exact-pivot",
            SystemKind::Translate => "translate",
            SystemKind::TranslatePivot => "translate-pivot",
        })
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(SystemKind::Encoder),
            "exact" => Ok(SystemKind::Exact),
            "exact-pivot" => Ok(SystemKind::ExactPivot),
            "translate" => Ok(SystemKind::Translate),
            "translate-pivot" => Ok(SystemKind::TranslatePivot),
            other => Err(Error::InvalidArgument(format!("unknown system {other:?}"))),
        }
    }
}

/// How encoder scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    DirectOnly,
    Pivot,
    Multi,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::DirectOnly => "direct-only",
            EvalMode::Pivot => "pivot",
            EvalMode::Multi => "multi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPaths {
    pub kb: PathBuf,
    pub test: Option<PathBuf>,
    /// One checkpoint per pivot language, in the same order.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    pub feature_table: Option<PathBuf>,
    pub phylo: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Training options for the `train` and `build-lexicon` commands. Absent
/// hyperparameters fall back to [`TrainingConfig::default`].
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: PathBuf,
    /// Language of the training corpus; defaults to the first pivot
    /// language.
    pub corpus_lang: Option<String>,
    /// Additional corpora for joint training, all in the run's source
    /// language.
    #[serde(default)]
    pub extra_corpora: Vec<PathBuf>,
    pub checkpoint_out: PathBuf,
    pub history_out: Option<PathBuf>,
    pub margin: Option<f32>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub dev_fraction: Option<f64>,
    pub learning_rate: Option<f32>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub model1_iterations: Option<usize>,
}

impl TrainSection {
    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        let mut c = TrainingConfig {
            seed,
            ..TrainingConfig::default()
        };
        if let Some(v) = self.margin {
            c.margin = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.dev_fraction {
            c.dev_fraction = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.embed_dim {
            c.embed_dim = v;
        }
        if let Some(v) = self.hidden_dim {
            c.hidden_dim = v;
        }
        c
    }
}

fn default_system() -> SystemKind {
    SystemKind::Encoder
}

fn default_mode() -> EvalMode {
    EvalMode::Pivot
}

fn default_weighting() -> Weighting {
    Weighting::Uniform
}

fn default_recall() -> Vec<usize> {
    vec![1]
}

fn default_format() -> ReportFormat {
    ReportFormat::Json
}

/// A complete, declarative experiment description.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub seed: u64,
    pub representation: ReprKind,
    /// Language of the test mentions.
    pub source_lang: String,
    #[serde(default = "default_system")]
    pub system: SystemKind,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    #[serde(default)]
    pub pivot_langs: Vec<String>,
    #[serde(default = "default_recall")]
    pub recall_at: Vec<usize>,
    /// Include per-mention ranked candidates in the report (KB-sized
    /// output, so opt-in).
    #[serde(default)]
    pub dump_candidates: bool,
    #[serde(default = "default_format")]
    pub report_format: ReportFormat,
    pub paths: ManifestPaths,
    pub train: Option<TrainSection>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m: RunManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_owned()))?;
        m.recall_at.sort_unstable();
        m.recall_at.dedup();
        Ok(m)
    }

    /// Read a manifest and resolve its relative paths against the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let mut m = RunManifest::parse(&text)?;
        if let Some(base) = path.parent() {
            m.resolve_paths(base);
        }
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.paths.kb);
        self.paths.test.iter_mut().for_each(&resolve);
        self.paths.checkpoints.iter_mut().for_each(&resolve);
        self.paths.feature_table.iter_mut().for_each(&resolve);
        self.paths.phylo.iter_mut().for_each(&resolve);
        self.paths.lexicon.iter_mut().for_each(&resolve);
        self.paths.report.iter_mut().for_each(&resolve);
        if let Some(train) = &mut self.train {
            resolve(&mut train.corpus);
            train.extra_corpora.iter_mut().for_each(&resolve);
            resolve(&mut train.checkpoint_out);
            train.history_out.iter_mut().for_each(&resolve);
        }
    }

    /// Structural consistency and existence of referenced input files.
    pub fn validate(&self) -> Result<()> {
        if self.recall_at.is_empty() || self.recall_at[0] == 0 {
            return Err(Error::Manifest("recall_at needs at least one k ≥ 1".into()));
        }
        match (self.system, self.mode) {
            (SystemKind::Encoder, EvalMode::DirectOnly) => {
                if self.paths.checkpoints.len() != 1 || self.pivot_langs.len() > 1 {
                    return Err(Error::Manifest(
                        "direct-only runs take exactly one checkpoint and at most one pivot language"
                            .into(),
                    ));
                }
            }
            (SystemKind::Encoder, EvalMode::Pivot) => {
                if self.paths.checkpoints.len() != 1 || self.pivot_langs.len() != 1 {
                    return Err(Error::Manifest(
                        "pivot runs take exactly one checkpoint and one pivot language".into(),
                    ));
                }
            }
            (SystemKind::Encoder, EvalMode::Multi) => {
                if self.pivot_langs.is_empty()
                    || self.paths.checkpoints.len() != self.pivot_langs.len()
                {
                    return Err(Error::Manifest(
                        "multi runs need one checkpoint per pivot language".into(),
                    ));
                }
            }
            (SystemKind::ExactPivot | SystemKind::TranslatePivot, _) => {
                if self.pivot_langs.is_empty() {
                    return Err(Error::Manifest(
                        "pivot-matching baselines need at least one pivot language".into(),
                    ));
                }
            }
            _ => {}
        }
        if matches!(self.system, SystemKind::Translate | SystemKind::TranslatePivot)
            && self.paths.lexicon.is_none()
        {
            return Err(Error::Manifest("translation baselines need paths.lexicon".into()));
        }
        if self.system == SystemKind::Encoder
            && self.mode == EvalMode::Multi
            && self.weighting == Weighting::Phylo
            && self.paths.phylo.is_none()
        {
            return Err(Error::Manifest("phylo weighting needs paths.phylo".into()));
        }
        if matches!(self.representation, ReprKind::Phoneme | ReprKind::Articulatory)
            && self.paths.feature_table.is_none()
        {
            return Err(Error::Manifest(format!(
                "representation {} needs paths.feature_table",
                self.representation
            )));
        }
        // Only inputs this run consumes must exist; other named paths may
        // be output slots a later command fills in (e.g. paths.lexicon
        // before `build-lexicon` has run).
        let mut required: Vec<&Path> = vec![&self.paths.kb];
        if let Some(p) = &self.paths.test {
            required.push(p);
        }
        if self.system == SystemKind::Encoder {
            for p in &self.paths.checkpoints {
                required.push(p);
            }
        }
        if let Some(p) = &self.paths.feature_table {
            required.push(p);
        }
        if self.system == SystemKind::Encoder
            && self.mode == EvalMode::Multi
            && self.weighting == Weighting::Phylo
        {
            if let Some(p) = &self.paths.phylo {
                required.push(p);
            }
        }
        if matches!(self.system, SystemKind::Translate | SystemKind::TranslatePivot) {
            if let Some(p) = &self.paths.lexicon {
                required.push(p);
            }
        }
        if let Some(train) = &self.train {
            required.push(&train.corpus);
            for p in &train.extra_corpora {
                required.push(p);
            }
        }
        for p in required {
            if !p.exists() {
                return Err(Error::MissingFile(p.display().to_string()));
            }
        }
        Ok(())
    }

    /// The corpus language for training: explicit override or the first
    /// pivot language.
    pub fn train_corpus_lang(&self) -> Result<String> {
        let train = self
            .train
            .as_ref()
            .ok_or_else(|| Error::Manifest("manifest has no [train] section".into()))?;
        if let Some(lang) = &train.corpus_lang {
            return Ok(lang.clone());
        }
        self.pivot_langs
            .first()
            .cloned()
            .ok_or_else(|| Error::Manifest("train.corpus_lang or pivot_langs required".into()))
    }
}

// ── Ingestion ───────────────────────────────────────────────────────────

/// Everything a run references, parsed and cross-validated.
pub struct Ingested {
    pub kb: KnowledgeBase,
    pub test: Option<TestSet>,
    pub corpus: Option<ParallelTitleCorpus>,
    pub extra_corpora: Vec<ParallelTitleCorpus>,
    pub table: Option<FeatureTable>,
    pub phylo: Option<PhyloWeights>,
    pub lexicon: Option<AlignmentLexicon>,
}

/// Load every artifact the manifest references, with line-numbered
/// diagnostics from the individual parsers, and check referential
/// integrity of the test set against the KB.
pub fn ingest(manifest: &RunManifest) -> Result<Ingested> {
    manifest.validate()?;
    let kb = KnowledgeBase::load(&manifest.paths.kb)?;
    let test = match &manifest.paths.test {
        Some(p) => {
            let t = TestSet::load(p)?;
            t.validate_against(&kb)?;
            Some(t)
        }
        None => None,
    };
    let corpus = match &manifest.train {
        Some(train) => Some(ParallelTitleCorpus::load(
            &train.corpus,
            &manifest.train_corpus_lang()?,
        )?),
        None => None,
    };
    let mut extra_corpora = Vec::new();
    if let Some(train) = &manifest.train {
        for p in &train.extra_corpora {
            extra_corpora.push(ParallelTitleCorpus::load(p, &manifest.source_lang)?);
        }
    }
    // Named-but-absent optional artifacts are output slots, not errors;
    // validate() already insisted on the ones this run consumes.
    let table = match &manifest.paths.feature_table {
        Some(p) => Some(FeatureTable::load(p)?),
        None => None,
    };
    let phylo = match &manifest.paths.phylo {
        Some(p) if p.exists() => Some(PhyloWeights::load(p)?),
        _ => None,
    };
    let lexicon = match &manifest.paths.lexicon {
        Some(p) if p.exists() => Some(AlignmentLexicon::load(p)?),
        _ => None,
    };
    Ok(Ingested {
        kb,
        test,
        corpus,
        extra_corpora,
        table,
        phylo,
        lexicon,
    })
}

// ── Report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetric {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl SplitMetric {
    fn new(count: usize, correct: usize) -> Self {
        let accuracy = if count == 0 {
            0.0
        } else {
            correct as f64 / count as f64
        };
        SplitMetric {
            count,
            correct,
            accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub correct: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSplit {
    /// Records whose gold entry has a pivot-language parallel title.
    pub covered: SplitMetric,
    pub uncovered: SplitMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u32,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionOutcome {
    pub mention: String,
    pub gold: u32,
    /// Ranked candidates; baselines emit at most one, with score 1.
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: SystemKind,
    pub mode: EvalMode,
    pub representation: ReprKind,
    pub source_lang: String,
    pub seed: u64,
    pub kb_size: usize,
    pub test_size: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub recall: Vec<RecallPoint>,
    pub by_type: BTreeMap<String, SplitMetric>,
    pub coverage: CoverageSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<MentionOutcome>>,
}

impl EvalReport {
    /// The metric laws every report must satisfy. Violations are bugs, so
    /// this runs on every evaluation before the report is returned.
    pub fn validate(&self) -> Result<()> {
        let fail = |what: String| Err(Error::Format(format!("inconsistent report: {what}")));
        if self.test_size == 0 {
            return fail("empty test set".into());
        }
        if self.accuracy != self.correct as f64 / self.test_size as f64 {
            return fail("accuracy is not correct/test_size".into());
        }
        let mut prev_k = 0usize;
        let mut prev_correct = 0usize;
        for p in &self.recall {
            if p.k <= prev_k {
                return fail(format!("recall ks not strictly ascending at k={}", p.k));
            }
            if p.recall != p.correct as f64 / self.test_size as f64 {
                return fail(format!("recall@{} is not correct/test_size", p.k));
            }
            if p.correct < prev_correct {
                return fail(format!("recall decreases at k={}", p.k));
            }
            if p.k == 1 && p.correct != self.correct {
                return fail("recall@1 differs from accuracy".into());
            }
            if p.k >= self.kb_size && p.correct != self.test_size {
                return fail(format!("recall@{} below 1 with every gold id in the KB", p.k));
            }
            prev_k = p.k;
            prev_correct = p.correct;
        }
        let type_count: usize = self.by_type.values().map(|m| m.count).sum();
        let type_correct: usize = self.by_type.values().map(|m| m.correct).sum();
        if type_count != self.test_size || type_correct != self.correct {
            return fail("per-type splits do not partition the test set".into());
        }
        for (name, m) in &self.by_type {
            if m.accuracy != m.correct as f64 / m.count as f64 {
                return fail(format!("accuracy for type {name} inconsistent"));
            }
        }
        let cov = &self.coverage;
        if cov.covered.count + cov.uncovered.count != self.test_size
            || cov.covered.correct + cov.uncovered.correct != self.correct
        {
            return fail("coverage splits do not partition the test set".into());
        }
        let weighted = (cov.covered.accuracy * cov.covered.count as f64
            + cov.uncovered.accuracy * cov.uncovered.count as f64)
            / self.test_size as f64;
        if (weighted - self.accuracy).abs() > 1e-9 {
            return fail("coverage splits do not aggregate to overall accuracy".into());
        }
        if let Some(c) = &self.candidates {
            if c.len() != self.test_size {
                return fail("candidate dump size differs from test size".into());
            }
        }
        Ok(())
    }

    /// Pretty JSON with stable field order; parses back to an equal report.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Stable-ordered TSV summary with a recall-curve block; omits the
    /// per-mention candidate dump.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("# run\n");
        out.push_str(&format!("system\t{}\n", self.system));
        out.push_str(&format!("mode\t{}\n", self.mode));
        out.push_str(&format!("representation\t{}\n", self.representation));
        out.push_str(&format!("source_lang\t{}\n", self.source_lang));
        out.push_str(&format!("seed\t{}\n", self.seed));
        out.push_str(&format!("kb_size\t{}\n", self.kb_size));
        out.push_str(&format!("test_size\t{}\n", self.test_size));
        out.push_str("# metrics\n");
        out.push_str(&format!("accuracy\t{:.6}\n", self.accuracy));
        out.push_str("# recall\n");
        out.push_str("k\trecall\n");
        for p in &self.recall {
            out.push_str(&format!("{}\t{:.6}\n", p.k, p.recall));
        }
        out.push_str("# by_type\n");
        out.push_str("type\tcount\tcorrect\taccuracy\n");
        for (name, m) in &self.by_type {
            out.push_str(&format!("{name}\t{}\t{}\t{:.6}\n", m.count, m.correct, m.accuracy));
        }
        out.push_str("# coverage\n");
        out.push_str("split\tcount\tcorrect\taccuracy\n");
        for (name, m) in [("covered", &self.coverage.covered), ("uncovered", &self.coverage.uncovered)] {
            out.push_str(&format!("{name}\t{}\t{}\t{:.6}\n", m.count, m.correct, m.accuracy));
        }
        out
    }

    pub fn emit(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Tsv => self.to_tsv(),
        }
    }
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// One scored test record, ready for aggregation.
struct Outcome {
    mention: String,
    gold: u32,
    entity_type: EntityType,
    covered: bool,
    /// Ranked candidates, best first; baselines contribute at most one.
    candidates: Vec<Candidate>,
    /// 1-based position of the gold entry among the candidates.
    gold_rank: Option<usize>,
}

/// Run the manifest's system over its test set and compute all metrics.
pub fn evaluate(manifest: &RunManifest) -> Result<EvalReport> {
    let ingested = ingest(manifest)?;
    let kb = &ingested.kb;
    let test = ingested
        .test
        .as_ref()
        .ok_or_else(|| Error::Manifest("evaluation needs paths.test".into()))?;
    let max_k = *manifest.recall_at.last().unwrap();
    if max_k > kb.len() {
        return Err(Error::Manifest(format!(
            "recall_at contains k = {max_k} but the KB has only {} entries",
            kb.len()
        )));
    }

    let covered = |gold: u32| -> bool {
        let entry = kb.get(gold).expect("referential integrity checked at ingest");
        manifest
            .pivot_langs
            .iter()
            .any(|lang| entry.pivot_titles.contains_key(lang))
    };

    let outcomes: Vec<Outcome> = match manifest.system {
        SystemKind::Encoder => {
            let table = ingested.table.as_ref();
            // One (model, index, weight) arm per pivot language.
            let mut arms: Vec<(EncoderParams, KbIndex, f64)> = Vec::new();
            let langs: Vec<String> = if manifest.pivot_langs.is_empty() {
                vec![String::new()] // direct-only without a pivot language
            } else {
                manifest.pivot_langs.clone()
            };
            for (path, lang) in manifest.paths.checkpoints.iter().zip(&langs) {
                let params = load_checkpoint(path)?;
                params.expect_kind(manifest.representation)?;
                if let Some(t) = table {
                    params.validate_table(t)?;
                }
                let index = KbIndex::build(&params, kb, lang, table)?;
                let weight = match manifest.weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::Phylo => ingested
                        .phylo
                        .as_ref()
                        .map(|p| p.weight(&manifest.source_lang, lang, Weighting::Phylo))
                        .unwrap_or(0.0),
                };
                arms.push((params, index, weight));
            }
            let mode = match manifest.mode {
                EvalMode::DirectOnly => LinkMode::DirectOnly,
                _ => LinkMode::Pivot,
            };
            let mut outcomes = Vec::with_capacity(test.len());
            for r in test.records() {
                let ranked = if manifest.mode == EvalMode::Multi {
                    let built: Vec<PivotArm<'_>> = arms
                        .iter()
                        .map(|(params, index, weight)| {
                            let seq = params.prepare_src(&r.mention, table)?;
                            Ok(PivotArm {
                                index,
                                mention_vec: params.encode_src(&seq)?.data().to_vec(),
                                weight: *weight,
                            })
                        })
                        .collect::<Result<_>>()?;
                    multi_pivot_topk(&built, max_k)?
                } else {
                    let (params, index, _) = &arms[0];
                    let seq = params.prepare_src(&r.mention, table)?;
                    let q = params.encode_src(&seq)?.data().to_vec();
                    index.topk(&q, mode, max_k)?
                };
                let gold_rank = ranked.iter().position(|(id, _)| *id == r.gold).map(|i| i + 1);
                outcomes.push(Outcome {
                    mention: r.mention.clone(),
                    gold: r.gold,
                    entity_type: r.entity_type,
                    covered: covered(r.gold),
                    candidates: ranked.into_iter().map(|(id, score)| Candidate { id, score }).collect(),
                    gold_rank,
                });
            }
            outcomes
        }
        baseline => {
            let pivot_lang = match baseline {
                SystemKind::ExactPivot | SystemKind::TranslatePivot => {
                    Some(manifest.pivot_langs[0].as_str())
                }
                _ => None,
            };
            let lexicon = ingested.lexicon.as_ref();
            test.records()
                .iter()
                .map(|r| {
                    let predicted = match baseline {
                        SystemKind::Exact | SystemKind::ExactPivot => {
                            exact_link(&r.mention, kb, pivot_lang)
                        }
                        _ => translate_link(
                            &r.mention,
                            lexicon.expect("validated by manifest"),
                            kb,
                            pivot_lang,
                        ),
                    };
                    // A prediction of "none" counts as incorrect.
                    let gold_rank = match predicted {
                        Some(id) if id == r.gold => Some(1),
                        _ => None,
                    };
                    Outcome {
                        mention: r.mention.clone(),
                        gold: r.gold,
                        entity_type: r.entity_type,
                        covered: covered(r.gold),
                        candidates: predicted
                            .into_iter()
                            .map(|id| Candidate { id, score: 1.0 })
                            .collect(),
                        gold_rank,
                    }
                })
                .collect()
        }
    };

    // Baselines produce a single prediction, so only recall@1 is
    // meaningful; ranking systems report the full requested curve.
    let recall_at: Vec<usize> = if manifest.system == SystemKind::Encoder {
        manifest.recall_at.clone()
    } else {
        vec![1]
    };
    let report = aggregate(manifest, kb.len(), &recall_at, outcomes);
    report.validate()?;
    Ok(report)
}

fn aggregate(
    manifest: &RunManifest,
    kb_size: usize,
    recall_at: &[usize],
    outcomes: Vec<Outcome>,
) -> EvalReport {
    let n = outcomes.len();
    let correct = outcomes.iter().filter(|o| o.gold_rank == Some(1)).count();
    let recall = recall_at
        .iter()
        .map(|&k| {
            let hits = outcomes
                .iter()
                .filter(|o| o.gold_rank.map_or(false, |r| r <= k))
                .count();
            RecallPoint {
                k,
                correct: hits,
                recall: hits as f64 / n as f64,
            }
        })
        .collect();
    let mut by_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for o in &outcomes {
        let slot = by_type.entry(o.entity_type.to_string()).or_insert((0, 0));
        slot.0 += 1;
        slot.1 += usize::from(o.gold_rank == Some(1));
    }
    let mut cov = (0usize, 0usize);
    let mut uncov = (0usize, 0usize);
    for o in &outcomes {
        let slot = if o.covered { &mut cov } else { &mut uncov };
        slot.0 += 1;
        slot.1 += usize::from(o.gold_rank == Some(1));
    }
    let candidates = manifest.dump_candidates.then(|| {
        outcomes
            .iter()
            .map(|o| MentionOutcome {
                mention: o.mention.clone(),
                gold: o.gold,
                candidates: o.candidates.clone(),
            })
            .collect()
    });
    EvalReport {
        system: manifest.system,
        mode: manifest.mode,
        representation: manifest.representation,
        source_lang: manifest.source_lang.clone(),
        seed: manifest.seed,
        kb_size,
        test_size: n,
        correct,
        accuracy: correct as f64 / n as f64,
        recall,
        by_type: by_type
            .into_iter()
            .map(|(k, (count, correct))| (k, SplitMetric::new(count, correct)))
            .collect(),
        coverage: CoverageSplit {
            covered: SplitMetric::new(cov.0, cov.1),
            uncovered: SplitMetric::new(uncov.0, uncov.1),
        },
        candidates,
    }
}
