//! Cross-lingual entity linking against an English knowledge base, for
//! low-resource source languages with zero bilingual resources.
//!
//! The toolkit trains a pair of character-level BiLSTM encoders on parallel
//! entity names between a high-resource "pivot" language and English, then
//! transfers the trained encoders unchanged to a related low-resource
//! language. A mention is linked by scoring it against every KB entry, both
//! directly (mention vs. English title) and through the pivot (mention vs.
//! the entry's pivot-language title), taking the higher of the two scores.
//!
//! Modules:
//! - [`numerics`]: dense f32 tensors, a reverse-mode autodiff tape and Adam.
//! - [`repr`]: grapheme / IPA-phoneme / articulatory-feature input encodings.
//! - [`encoder`]: the similarity model, max-margin training, checkpoints.
//! - [`linker`]: KB indexing, direct + pivot scoring, k-best retrieval,
//!   multi-pivot combination with phylogenetic weights.
//! - [`baselines`]: exact string match and lexicon-based translation linking
//!   (IBM Model 1 alignment).
//! - [`eval`]: test-set ingestion, experiment manifests, metrics and reports.

pub mod baselines;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linker;
pub mod numerics;
pub mod repr;

pub use error::{Error, Result};
