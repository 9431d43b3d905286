//! Binary checkpoint format.
//!
//! Layout: 4-byte magic, little-endian u16 format version, little-endian u32
//! metadata length, UTF-8 JSON metadata, then every tensor's elements as
//! little-endian f32 in metadata declaration order. The metadata carries
//! enough (kind, dims, vocabularies, hashes) to rebuild the model and to
//! refuse mismatched inputs later.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::params::{InputLayer, InputMeta, LstmParams, SideParams};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::repr::{hex_digest, ReprKind, SymbolVocab, FEATURE_DIM};

const MAGIC: &[u8; 4] = b"PBEL";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    repr: ReprKind,
    src_lang: String,
    margin: f32,
    embed_dim: usize,
    hidden_dim: usize,
    input: InputMetaFile,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum InputMetaFile {
    Grapheme {
        src_vocab: Vec<String>,
        en_vocab: Vec<String>,
        src_vocab_sha256: String,
        en_vocab_sha256: String,
    },
    Phoneme {
        vocab: Vec<String>,
        vocab_sha256: String,
        feature_table_sha256: String,
    },
    Articulatory {
        feature_table_sha256: String,
    },
}

fn build_meta(params: &EncoderParams) -> CheckpointMeta {
    let input = match &params.input_meta {
        InputMeta::Grapheme { src_vocab, en_vocab } => InputMetaFile::Grapheme {
            src_vocab: src_vocab.symbols().to_vec(),
            en_vocab: en_vocab.symbols().to_vec(),
            src_vocab_sha256: src_vocab.sha256_hex(),
            en_vocab_sha256: en_vocab.sha256_hex(),
        },
        InputMeta::Phoneme { vocab, table_hash } => InputMetaFile::Phoneme {
            vocab: vocab.symbols().to_vec(),
            vocab_sha256: vocab.sha256_hex(),
            feature_table_sha256: table_hash.clone(),
        },
        InputMeta::Articulatory { table_hash } => InputMetaFile::Articulatory {
            feature_table_sha256: table_hash.clone(),
        },
    };
    CheckpointMeta {
        repr: params.kind(),
        src_lang: params.src_lang().to_owned(),
        margin: params.margin(),
        embed_dim: params.embed_dim(),
        hidden_dim: params.hidden_dim(),
        input,
        tensors: params
            .named_tensors()
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

impl EncoderParams {
    /// Hash of the checkpoint metadata block; anything derived from a model
    /// (index caches in particular) stores this to detect stale pairings.
    pub fn meta_hash(&self) -> String {
        let meta = serde_json::to_vec(&build_meta(self)).expect("metadata serializes");
        hex_digest(&meta)
    }
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&build_meta(params))?;
    let payload: usize = params.tensors().iter().map(|t| t.numel() * 4).sum();
    let mut buf = Vec::with_capacity(4 + 2 + 4 + meta.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    for t in params.tensors() {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes =
        fs::read(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let meta_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let meta_end = 10usize
        .checked_add(meta_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[10..meta_end])?;

    if !(meta.margin.is_finite() && meta.margin > 0.0) {
        return Err(Error::Format(format!("invalid stored margin {}", meta.margin)));
    }
    let expected = expected_tensor_names(meta.repr);
    let actual: Vec<String> = meta.tensors.iter().map(|t| t.name.clone()).collect();
    if actual != expected {
        return Err(Error::Format(format!(
            "unexpected tensor list {actual:?} for a {} checkpoint",
            meta.repr
        )));
    }

    let mut offset = meta_end;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for tm in &meta.tensors {
        let numel: usize = tm.shape.iter().product();
        let end = offset
            .checked_add(numel * 4)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated tensor data for {:?}", tm.name))
            })?;
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(tm.shape.clone(), data)?.with_requires_grad());
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }

    let input_meta = rebuild_input_meta(meta.repr, meta.input)?;
    let params = assemble(
        meta.repr,
        meta.src_lang,
        meta.margin,
        meta.embed_dim,
        meta.hidden_dim,
        tensors,
        input_meta,
    )?;
    validate_shapes(&params)?;
    Ok(params)
}

fn rebuild_input_meta(kind: ReprKind, input: InputMetaFile) -> Result<InputMeta> {
    let check = |label: &str, vocab: &SymbolVocab, stored: &str| -> Result<()> {
        if vocab.sha256_hex() == stored {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{label} vocabulary hash does not match its symbol list"
            )))
        }
    };
    match (kind, input) {
        (
            ReprKind::Grapheme,
            InputMetaFile::Grapheme {
                src_vocab,
                en_vocab,
                src_vocab_sha256,
                en_vocab_sha256,
            },
        ) => {
            let src_vocab = SymbolVocab::from_symbols(ReprKind::Grapheme, src_vocab)?;
            let en_vocab = SymbolVocab::from_symbols(ReprKind::Grapheme, en_vocab)?;
            check("source", &src_vocab, &src_vocab_sha256)?;
            check("english", &en_vocab, &en_vocab_sha256)?;
            Ok(InputMeta::Grapheme { src_vocab, en_vocab })
        }
        (
            ReprKind::Phoneme,
            InputMetaFile::Phoneme {
                vocab,
                vocab_sha256,
                feature_table_sha256,
            },
        ) => {
            let vocab = SymbolVocab::from_symbols(ReprKind::Phoneme, vocab)?;
            check("phoneme", &vocab, &vocab_sha256)?;
            Ok(InputMeta::Phoneme {
                vocab,
                table_hash: feature_table_sha256,
            })
        }
        (ReprKind::Articulatory, InputMetaFile::Articulatory { feature_table_sha256 }) => {
            Ok(InputMeta::Articulatory {
                table_hash: feature_table_sha256,
            })
        }
        (kind, _) => Err(Error::Format(format!(
            "input metadata does not match representation kind {kind}"
        ))),
    }
}

fn expected_tensor_names(kind: ReprKind) -> Vec<String> {
    let mut names = Vec::with_capacity(16);
    for side in ["src", "en"] {
        match kind {
            ReprKind::Grapheme | ReprKind::Phoneme => names.push(format!("{side}.embeddings")),
            ReprKind::Articulatory => {
                names.push(format!("{side}.proj.weight"));
                names.push(format!("{side}.proj.bias"));
            }
        }
        for dir in ["fwd", "bwd"] {
            for part in ["w_x", "w_h", "bias"] {
                names.push(format!("{side}.{dir}.{part}"));
            }
        }
    }
    names
}

fn assemble(
    kind: ReprKind,
    src_lang: String,
    margin: f32,
    embed_dim: usize,
    hidden_dim: usize,
    tensors: Vec<Tensor>,
    input_meta: InputMeta,
) -> Result<EncoderParams> {
    let mut it = tensors.into_iter();
    let side = |it: &mut std::vec::IntoIter<Tensor>| -> Result<SideParams> {
        let input = match kind {
            ReprKind::Grapheme | ReprKind::Phoneme => InputLayer::Embeddings {
                table: it.next().unwrap(),
            },
            ReprKind::Articulatory => InputLayer::Projection {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            },
        };
        let dir = |it: &mut std::vec::IntoIter<Tensor>| LstmParams {
            w_x: it.next().unwrap(),
            w_h: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        Ok(SideParams {
            input,
            fwd: dir(it),
            bwd: dir(it),
        })
    };
    let src = side(&mut it)?;
    let en = side(&mut it)?;
    Ok(EncoderParams::from_parts(
        kind, src_lang, margin, embed_dim, hidden_dim, src, en, input_meta,
    ))
}

/// Cross-check every tensor shape against the declared dimensions.
fn validate_shapes(params: &EncoderParams) -> Result<()> {
    let (embed, hidden) = (params.embed_dim(), params.hidden_dim());
    let bad = |name: &str, t: &Tensor| {
        Err(Error::Format(format!(
            "tensor {name} has shape {:?}, inconsistent with embed {embed} / hidden {hidden}",
            t.shape()
        )))
    };
    for (name, t) in params.named_tensors() {
        let shape = t.shape();
        let ok = if name.ends_with(".embeddings") {
            let rows = match (&params.input_meta, name.starts_with("src")) {
                (InputMeta::Grapheme { src_vocab, .. }, true) => src_vocab.id_count(),
                (InputMeta::Grapheme { en_vocab, .. }, false) => en_vocab.id_count(),
                (InputMeta::Phoneme { vocab, .. }, _) => vocab.id_count(),
                (InputMeta::Articulatory { .. }, _) => return bad(&name, t),
            };
            shape == [rows, embed]
        } else if name.ends_with(".proj.weight") {
            shape == [embed, FEATURE_DIM]
        } else if name.ends_with(".proj.bias") {
            shape == [embed]
        } else if name.ends_with(".w_x") {
            shape == [4 * hidden, embed]
        } else if name.ends_with(".w_h") {
            shape == [4 * hidden, hidden]
        } else {
            shape == [4 * hidden]
        };
        if !ok {
            return bad(&name, t);
        }
    }
    Ok(())
}
