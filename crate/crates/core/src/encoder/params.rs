use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{lstm_cell, Graph, LstmCellWeights, NodeId, Tensor};
use crate::repr::{self, FeatureTable, ReprKind, SeqRepr, SymbolVocab, FEATURE_DIM};

/// Half-open initialization range for all weights except the forget-gate
/// bias, which starts at 1.0 to keep early gradients flowing through time.
const INIT_RANGE: f32 = 0.08;

/// Titles encoded per tape; bounds graph memory while amortizing the cost of
/// registering the (large) weight tensors as leaves.
const ENCODE_CHUNK: usize = 32;

/// One direction of an LSTM: gate rows ordered input, forget, candidate,
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    fn init<R: Rng>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = Tensor::uniform(vec![4 * hidden, in_dim], -INIT_RANGE, INIT_RANGE, rng);
        let w_h = Tensor::uniform(vec![4 * hidden, hidden], -INIT_RANGE, INIT_RANGE, rng);
        let mut bias = Tensor::uniform(vec![4 * hidden], -INIT_RANGE, INIT_RANGE, rng);
        for b in &mut bias.data_mut()[hidden..2 * hidden] {
            *b = 1.0;
        }
        LstmParams {
            w_x: w_x.with_requires_grad(),
            w_h: w_h.with_requires_grad(),
            bias: bias.with_requires_grad(),
        }
    }
}

/// How raw symbols become embedding vectors on one side.
#[derive(Debug, Clone, PartialEq)]
pub enum InputLayer {
    /// Lookup table of `id_count x embed_dim`; row 0 is the unknown symbol.
    Embeddings { table: Tensor },
    /// Linear map of a 21-dim articulatory row: `x = weight · f + bias`.
    Projection { weight: Tensor, bias: Tensor },
}

/// All trainable tensors of one encoder side.
#[derive(Debug, Clone, PartialEq)]
pub struct SideParams {
    pub input: InputLayer,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// Vocabulary / feature-table identity baked into a trained model.
#[derive(Debug, Clone, PartialEq)]
pub enum InputMeta {
    Grapheme {
        src_vocab: SymbolVocab,
        en_vocab: SymbolVocab,
    },
    Phoneme {
        vocab: SymbolVocab,
        table_hash: String,
    },
    Articulatory {
        table_hash: String,
    },
}

/// What to build input layers from at initialization time.
pub enum InputSpec<'a> {
    Grapheme {
        src_vocab: SymbolVocab,
        en_vocab: SymbolVocab,
    },
    Phoneme {
        table: &'a FeatureTable,
    },
    Articulatory {
        table: &'a FeatureTable,
    },
}

/// A trained (or initializing) encoder pair with everything needed to encode
/// both sides and to verify that inputs were prepared consistently.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    kind: ReprKind,
    src_lang: String,
    /// Margin the model was (or will be) trained with; informational after
    /// training but kept so checkpoints describe their own provenance.
    margin: f32,
    embed_dim: usize,
    hidden_dim: usize,
    pub(crate) src: SideParams,
    pub(crate) en: SideParams,
    pub(crate) input_meta: InputMeta,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        src_lang: &str,
        margin: f32,
        embed_dim: usize,
        hidden_dim: usize,
        spec: InputSpec<'_>,
        rng: &mut R,
    ) -> Result<Self> {
        if embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidArgument("zero model dimension".into()));
        }
        let embed_table = |rows: usize, rng: &mut R| InputLayer::Embeddings {
            table: Tensor::uniform(vec![rows, embed_dim], -INIT_RANGE, INIT_RANGE, rng)
                .with_requires_grad(),
        };
        let projection = |rng: &mut R| InputLayer::Projection {
            weight: Tensor::uniform(vec![embed_dim, FEATURE_DIM], -INIT_RANGE, INIT_RANGE, rng)
                .with_requires_grad(),
            bias: Tensor::uniform(vec![embed_dim], -INIT_RANGE, INIT_RANGE, rng)
                .with_requires_grad(),
        };

        let (kind, src_input, en_input, input_meta) = match spec {
            InputSpec::Grapheme { src_vocab, en_vocab } => {
                let src = embed_table(src_vocab.id_count(), rng);
                let en = embed_table(en_vocab.id_count(), rng);
                (
                    ReprKind::Grapheme,
                    src,
                    en,
                    InputMeta::Grapheme { src_vocab, en_vocab },
                )
            }
            InputSpec::Phoneme { table } => {
                let vocab = table.vocab().clone();
                let src = embed_table(vocab.id_count(), rng);
                let en = embed_table(vocab.id_count(), rng);
                (
                    ReprKind::Phoneme,
                    src,
                    en,
                    InputMeta::Phoneme {
                        vocab,
                        table_hash: table.sha256_hex(),
                    },
                )
            }
            InputSpec::Articulatory { table } => (
                ReprKind::Articulatory,
                projection(rng),
                projection(rng),
                InputMeta::Articulatory {
                    table_hash: table.sha256_hex(),
                },
            ),
        };

        Ok(EncoderParams {
            kind,
            src_lang: src_lang.to_owned(),
            margin,
            embed_dim,
            hidden_dim,
            src: SideParams {
                input: src_input,
                fwd: LstmParams::init(embed_dim, hidden_dim, rng),
                bwd: LstmParams::init(embed_dim, hidden_dim, rng),
            },
            en: SideParams {
                input: en_input,
                fwd: LstmParams::init(embed_dim, hidden_dim, rng),
                bwd: LstmParams::init(embed_dim, hidden_dim, rng),
            },
            input_meta,
        })
    }

    pub(crate) fn from_parts(
        kind: ReprKind,
        src_lang: String,
        margin: f32,
        embed_dim: usize,
        hidden_dim: usize,
        src: SideParams,
        en: SideParams,
        input_meta: InputMeta,
    ) -> Self {
        EncoderParams {
            kind,
            src_lang,
            margin,
            embed_dim,
            hidden_dim,
            src,
            en,
            input_meta,
        }
    }

    pub fn kind(&self) -> ReprKind {
        self.kind
    }

    pub fn src_lang(&self) -> &str {
        &self.src_lang
    }

    pub fn margin(&self) -> f32 {
        self.margin
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Dimension of encoded vectors: forward and backward final states
    /// concatenated.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn expect_kind(&self, kind: ReprKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: kind.to_string(),
                got: self.kind.to_string(),
            })
        }
    }

    /// Check that a feature table is the one this model was trained against.
    pub fn validate_table(&self, table: &FeatureTable) -> Result<()> {
        let stored = match &self.input_meta {
            InputMeta::Phoneme { table_hash, .. } | InputMeta::Articulatory { table_hash } => {
                table_hash
            }
            InputMeta::Grapheme { .. } => return Ok(()),
        };
        if stored == &table.sha256_hex() {
            Ok(())
        } else {
            Err(Error::Format(
                "feature table does not match the one the checkpoint was trained with".into(),
            ))
        }
    }

    /// Convert a source-side title into this model's input representation.
    pub fn prepare_src(&self, text: &str, table: Option<&FeatureTable>) -> Result<SeqRepr> {
        self.prepare(text, true, table)
    }

    /// Convert an English-side title into this model's input representation.
    pub fn prepare_en(&self, text: &str, table: Option<&FeatureTable>) -> Result<SeqRepr> {
        self.prepare(text, false, table)
    }

    fn prepare(&self, text: &str, src_side: bool, table: Option<&FeatureTable>) -> Result<SeqRepr> {
        if let Some(table) = table {
            self.validate_table(table)?;
        }
        let vocab = match &self.input_meta {
            InputMeta::Grapheme { src_vocab, en_vocab } => {
                Some(if src_side { src_vocab } else { en_vocab })
            }
            InputMeta::Phoneme { vocab, .. } => Some(vocab),
            InputMeta::Articulatory { .. } => None,
        };
        repr::prepare(text, self.kind, vocab, table)
    }

    /// Named tensors in checkpoint declaration order; also the optimizer slot
    /// order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(16);
        for (side_name, side) in [("src", &self.src), ("en", &self.en)] {
            match &side.input {
                InputLayer::Embeddings { table } => {
                    out.push((format!("{side_name}.embeddings"), table));
                }
                InputLayer::Projection { weight, bias } => {
                    out.push((format!("{side_name}.proj.weight"), weight));
                    out.push((format!("{side_name}.proj.bias"), bias));
                }
            }
            for (dir_name, dir) in [("fwd", &side.fwd), ("bwd", &side.bwd)] {
                out.push((format!("{side_name}.{dir_name}.w_x"), &dir.w_x));
                out.push((format!("{side_name}.{dir_name}.w_h"), &dir.w_h));
                out.push((format!("{side_name}.{dir_name}.bias"), &dir.bias));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable access in the same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(16);
        for side in [&mut self.src, &mut self.en] {
            match &mut side.input {
                InputLayer::Embeddings { table } => out.push(table),
                InputLayer::Projection { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
            }
            for dir in [&mut side.fwd, &mut side.bwd] {
                out.push(&mut dir.w_x);
                out.push(&mut dir.w_h);
                out.push(&mut dir.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    // ── Encoding ────────────────────────────────────────────────────────

    /// Encode one source-side sequence to a `2 * hidden_dim` vector.
    pub fn encode_src(&self, seq: &SeqRepr) -> Result<Tensor> {
        Ok(self.encode_src_batch(std::slice::from_ref(seq))?.pop().unwrap())
    }

    /// Encode one English-side sequence.
    pub fn encode_en(&self, seq: &SeqRepr) -> Result<Tensor> {
        Ok(self.encode_en_batch(std::slice::from_ref(seq))?.pop().unwrap())
    }

    pub fn encode_src_batch(&self, seqs: &[SeqRepr]) -> Result<Vec<Tensor>> {
        self.encode_batch(&self.src, seqs)
    }

    pub fn encode_en_batch(&self, seqs: &[SeqRepr]) -> Result<Vec<Tensor>> {
        self.encode_batch(&self.en, seqs)
    }

    fn encode_batch(&self, side: &SideParams, seqs: &[SeqRepr]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(ENCODE_CHUNK) {
            let mut g = Graph::new();
            let bound = BoundSide::bind(&mut g, side, false);
            for seq in chunk {
                self.check_seq(seq)?;
                let id = bound.encode(&mut g, seq, self.hidden_dim)?;
                out.push(g.value(id).detached());
            }
        }
        Ok(out)
    }

    fn check_seq(&self, seq: &SeqRepr) -> Result<()> {
        if seq.kind() != self.kind {
            return Err(Error::KindMismatch {
                expected: self.kind.to_string(),
                got: seq.kind().to_string(),
            });
        }
        if seq.is_empty() {
            return Err(Error::EmptyInput("sequence"));
        }
        Ok(())
    }

    /// Mean over pairs i of mean over j != i of
    /// `hinge(cos(src_i, en_i), cos(src_i, en_j), margin)` — every other
    /// English title in the batch serves as a negative sample.
    pub fn batch_loss(&self, batch: &[(SeqRepr, SeqRepr)], margin: f32) -> Result<f32> {
        let mut g = Graph::new();
        let (loss, _) = self.build_batch_loss(&mut g, batch, margin, false)?;
        Ok(g.scalar_value(loss))
    }

    /// Loss value and gradients for every tensor, in
    /// [`EncoderParams::tensors`] order.
    pub fn loss_and_grads(
        &self,
        batch: &[(SeqRepr, SeqRepr)],
        margin: f32,
    ) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut g = Graph::new();
        let (loss, leaves) = self.build_batch_loss(&mut g, batch, margin, true)?;
        g.backward(loss)?;
        g.assert_finite()?;
        let grads = leaves
            .iter()
            .map(|&id| g.grad(id).expect("parameter leaves are tracked").to_vec())
            .collect();
        Ok((g.scalar_value(loss), grads))
    }

    fn build_batch_loss(
        &self,
        g: &mut Graph,
        batch: &[(SeqRepr, SeqRepr)],
        margin: f32,
        train: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if batch.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "batch of {} cannot provide in-batch negatives",
                batch.len()
            )));
        }
        let src_bound = BoundSide::bind(g, &self.src, train);
        let en_bound = BoundSide::bind(g, &self.en, train);
        let mut src_vecs = Vec::with_capacity(batch.len());
        let mut en_vecs = Vec::with_capacity(batch.len());
        for (src_seq, en_seq) in batch {
            self.check_seq(src_seq)?;
            self.check_seq(en_seq)?;
            src_vecs.push(src_bound.encode(g, src_seq, self.hidden_dim)?);
            en_vecs.push(en_bound.encode(g, en_seq, self.hidden_dim)?);
        }

        let mut sims = Vec::with_capacity(batch.len() * batch.len());
        for &src in &src_vecs {
            for &en in &en_vecs {
                sims.push(g.cosine(src, en)?);
            }
        }
        let n = batch.len();
        let mut per_pair = Vec::with_capacity(n);
        for i in 0..n {
            let pos = sims[i * n + i];
            let mut hinges = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j != i {
                    hinges.push(g.hinge(pos, sims[i * n + j], margin)?);
                }
            }
            per_pair.push(g.mean(&hinges)?);
        }
        let loss = g.mean(&per_pair)?;
        let mut leaves = src_bound.leaves;
        leaves.extend(en_bound.leaves);
        Ok((loss, leaves))
    }
}

/// Parameter tensors registered as leaves on one tape, with their node ids
/// remembered in [`EncoderParams::tensors`] order.
struct BoundSide {
    input: BoundInput,
    fwd: LstmCellWeights,
    bwd: LstmCellWeights,
    leaves: Vec<NodeId>,
}

enum BoundInput {
    Embeddings(NodeId),
    Projection { weight: NodeId, bias: NodeId },
}

impl BoundSide {
    /// Register a side's tensors on the tape. With `train` false the leaves
    /// are detached so backward never tracks them.
    fn bind(g: &mut Graph, side: &SideParams, train: bool) -> BoundSide {
        fn leaf(g: &mut Graph, leaves: &mut Vec<NodeId>, t: &Tensor, train: bool) -> NodeId {
            let id = if train {
                g.leaf(t.clone())
            } else {
                g.leaf(t.detached())
            };
            leaves.push(id);
            id
        }
        let mut leaves = Vec::with_capacity(8);
        let input = match &side.input {
            InputLayer::Embeddings { table } => {
                BoundInput::Embeddings(leaf(g, &mut leaves, table, train))
            }
            InputLayer::Projection { weight, bias } => BoundInput::Projection {
                weight: leaf(g, &mut leaves, weight, train),
                bias: leaf(g, &mut leaves, bias, train),
            },
        };
        let dir = |g: &mut Graph, leaves: &mut Vec<NodeId>, d: &LstmParams| LstmCellWeights {
            w_x: leaf(g, leaves, &d.w_x, train),
            w_h: leaf(g, leaves, &d.w_h, train),
            bias: leaf(g, leaves, &d.bias, train),
        };
        let fwd = dir(g, &mut leaves, &side.fwd);
        let bwd = dir(g, &mut leaves, &side.bwd);
        BoundSide {
            input,
            fwd,
            bwd,
            leaves,
        }
    }

    fn input_node(&self, g: &mut Graph, seq: &SeqRepr, step: usize) -> Result<NodeId> {
        match (&self.input, seq) {
            (BoundInput::Embeddings(table), SeqRepr::Grapheme { ids })
            | (BoundInput::Embeddings(table), SeqRepr::Phoneme { ids }) => {
                g.row(*table, ids[step] as usize)
            }
            (BoundInput::Projection { weight, bias }, SeqRepr::Articulatory { rows }) => {
                let feats = g.constant(rows[step].iter().map(|&v| v as f32).collect());
                let projected = g.matvec(*weight, feats)?;
                g.add(projected, *bias)
            }
            _ => Err(Error::KindMismatch {
                expected: "input layer matching the sequence kind".into(),
                got: seq.kind().to_string(),
            }),
        }
    }

    fn run_direction(
        &self,
        g: &mut Graph,
        seq: &SeqRepr,
        hidden: usize,
        weights: &LstmCellWeights,
        reversed: bool,
    ) -> Result<NodeId> {
        let mut h = g.constant(vec![0.0; hidden]);
        let mut c = g.constant(vec![0.0; hidden]);
        let len = seq.len();
        for step in 0..len {
            let idx = if reversed { len - 1 - step } else { step };
            let x = self.input_node(g, seq, idx)?;
            (h, c) = lstm_cell(g, x, h, c, weights)?;
        }
        Ok(h)
    }

    /// Concatenation of the forward and backward final hidden states.
    fn encode(&self, g: &mut Graph, seq: &SeqRepr, hidden: usize) -> Result<NodeId> {
        let fwd = self.run_direction(g, seq, hidden, &self.fwd, false)?;
        let bwd = self.run_direction(g, seq, hidden, &self.bwd, true)?;
        g.concat(fwd, bwd)
    }
}
