//! Shared fixtures for the integration suites: a deterministic substitution
//! cipher that stands in for a related language pair, and an independent f64
//! reference implementation of the encoder loss used to finite-difference
//! check the production gradients.
#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use xlel_core::encoder::{EncoderParams, ParallelTitleCorpus};
use xlel_core::repr::SeqRepr;

// ---------------------------------------------------------------------------
// Cipher-language fixtures
// ---------------------------------------------------------------------------

/// Shift every ASCII lowercase letter forward by one (z wraps to a). A
/// bijective character substitution: the "source language" spelling of an
/// English word that a character encoder can learn to invert.
pub fn rot1(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_lowercase() {
                (((c as u8 - b'a' + 1) % 26) + b'a') as char
            } else {
                c
            }
        })
        .collect()
}

/// `n` distinct pseudo-words of 4..=8 lowercase letters.
pub fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    while words.len() < n {
        let len = rng.gen_range(4..=8);
        let w: String = (0..len)
            .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Parallel corpus pairing each word's ciphered form with the word itself.
pub fn cipher_corpus(src_lang: &str, words: &[String]) -> ParallelTitleCorpus {
    let pairs = words
        .iter()
        .map(|w| (rot1(w), w.clone()))
        .collect::<Vec<_>>();
    ParallelTitleCorpus::new(src_lang, pairs).expect("cipher corpus is well-formed")
}

/// Raw (unnormalized) random embedding rows with ids 1..=n, for building
/// synthetic indexes.
pub fn random_embedding_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<(u32, Vec<f32>)> {
    (1..=n as u32)
        .map(|id| {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            (id, v)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// f64 reference forward pass
// ---------------------------------------------------------------------------
//
// A from-scratch re-implementation of the siamese hinge loss, computed
// entirely in f64 from the production parameter tensors. It shares no code
// with the autodiff tape, so agreement between its finite differences and
// the tape's analytic gradients checks both.

struct RefDir<'a> {
    wx: &'a [f32], // [4h x in]
    wh: &'a [f32], // [4h x h]
    b: &'a [f32],  // [4h]
}

enum RefInput<'a> {
    /// Embedding table, row-major, `cols` columns; sequence ids index rows.
    Emb { data: &'a [f32], cols: usize },
    /// Feature projection `w` [embed x 21] plus bias, applied to ternary
    /// feature rows.
    Proj { w: &'a [f32], b: &'a [f32] },
}

struct RefSide<'a> {
    input: RefInput<'a>,
    fwd: RefDir<'a>,
    bwd: RefDir<'a>,
}

fn split_sides(params: &EncoderParams) -> (RefSide<'_>, RefSide<'_>) {
    let tensors = params.tensors();
    let embed = params.embed_dim();
    let input_tensors = match params.kind() {
        xlel_core::repr::ReprKind::Articulatory => 2,
        _ => 1,
    };
    let per_side = input_tensors + 6;
    assert_eq!(tensors.len(), 2 * per_side, "unexpected tensor layout");
    let side = |offset: usize| -> RefSide<'_> {
        let input = if input_tensors == 1 {
            RefInput::Emb {
                data: tensors[offset].data(),
                cols: embed,
            }
        } else {
            RefInput::Proj {
                w: tensors[offset].data(),
                b: tensors[offset + 1].data(),
            }
        };
        let dir = |i: usize| RefDir {
            wx: tensors[i].data(),
            wh: tensors[i + 1].data(),
            b: tensors[i + 2].data(),
        };
        RefSide {
            input,
            fwd: dir(offset + input_tensors),
            bwd: dir(offset + input_tensors + 3),
        }
    };
    (side(0), side(per_side))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn input_vec(input: &RefInput<'_>, seq: &SeqRepr, t: usize, embed: usize) -> Vec<f64> {
    match (input, seq) {
        (RefInput::Emb { data, cols }, SeqRepr::Grapheme { ids })
        | (RefInput::Emb { data, cols }, SeqRepr::Phoneme { ids }) => {
            let row = ids[t] as usize;
            data[row * cols..(row + 1) * cols]
                .iter()
                .map(|&v| v as f64)
                .collect()
        }
        (RefInput::Proj { w, b }, SeqRepr::Articulatory { rows }) => {
            let feats = &rows[t];
            (0..embed)
                .map(|r| {
                    let row = &w[r * feats.len()..(r + 1) * feats.len()];
                    let mut acc = b[r] as f64;
                    for (wv, fv) in row.iter().zip(feats.iter()) {
                        acc += *wv as f64 * *fv as f64;
                    }
                    acc
                })
                .collect()
        }
        _ => panic!("input layer does not match sequence kind"),
    }
}

/// Final hidden state of one LSTM direction over the sequence.
fn run_dir(
    side: &RefSide<'_>,
    dir: &RefDir<'_>,
    seq: &SeqRepr,
    embed: usize,
    hidden: usize,
    reversed: bool,
) -> Vec<f64> {
    let len = seq.len();
    let in_dim = dir.wx.len() / (4 * hidden);
    let mut h = vec![0.0f64; hidden];
    let mut c = vec![0.0f64; hidden];
    for step in 0..len {
        let idx = if reversed { len - 1 - step } else { step };
        let x = input_vec(&side.input, seq, idx, embed);
        assert_eq!(x.len(), in_dim);
        // gates = wx . x + wh . h + b, blocks ordered [input, forget,
        // candidate, output].
        let mut gates = vec![0.0f64; 4 * hidden];
        for r in 0..4 * hidden {
            let mut acc = dir.b[r] as f64;
            let wx_row = &dir.wx[r * in_dim..(r + 1) * in_dim];
            for (w, xv) in wx_row.iter().zip(&x) {
                acc += *w as f64 * xv;
            }
            let wh_row = &dir.wh[r * hidden..(r + 1) * hidden];
            for (w, hv) in wh_row.iter().zip(&h) {
                acc += *w as f64 * hv;
            }
            gates[r] = acc;
        }
        let mut new_c = vec![0.0f64; hidden];
        let mut new_h = vec![0.0f64; hidden];
        for k in 0..hidden {
            let i = sigmoid(gates[k]);
            let f = sigmoid(gates[hidden + k]);
            let g = gates[2 * hidden + k].tanh();
            let o = sigmoid(gates[3 * hidden + k]);
            new_c[k] = f * c[k] + i * g;
            new_h[k] = o * new_c[k].tanh();
        }
        h = new_h;
        c = new_c;
    }
    h
}

fn ref_encode(side: &RefSide<'_>, seq: &SeqRepr, embed: usize, hidden: usize) -> Vec<f64> {
    let mut out = run_dir(side, &side.fwd, seq, embed, hidden, false);
    out.extend(run_dir(side, &side.bwd, seq, embed, hidden, true));
    out
}

fn ref_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// The batch hinge loss in f64: mean over pairs i of the mean over j != i of
/// max(0, margin - cos(src_i, en_i) + cos(src_i, en_j)).
pub fn reference_loss(params: &EncoderParams, batch: &[(SeqRepr, SeqRepr)], margin: f64) -> f64 {
    let (src, en) = split_sides(params);
    let embed = params.embed_dim();
    let hidden = params.hidden_dim();
    let src_vecs: Vec<Vec<f64>> = batch
        .iter()
        .map(|(s, _)| ref_encode(&src, s, embed, hidden))
        .collect();
    let en_vecs: Vec<Vec<f64>> = batch
        .iter()
        .map(|(_, e)| ref_encode(&en, e, embed, hidden))
        .collect();
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = ref_cos(&src_vecs[i], &en_vecs[i]);
        let mut pair = 0.0;
        for (j, en_vec) in en_vecs.iter().enumerate() {
            if j != i {
                pair += (margin - pos + ref_cos(&src_vecs[i], en_vec)).max(0.0);
            }
        }
        total += pair / (n - 1) as f64;
    }
    total / n as f64
}

/// Smallest |margin - pos + neg| over all hinge terms. Finite differences
/// are only meaningful when no term sits within the probe step of the relu
/// kink.
pub fn min_hinge_gap(params: &EncoderParams, batch: &[(SeqRepr, SeqRepr)], margin: f64) -> f64 {
    let (src, en) = split_sides(params);
    let embed = params.embed_dim();
    let hidden = params.hidden_dim();
    let src_vecs: Vec<Vec<f64>> = batch
        .iter()
        .map(|(s, _)| ref_encode(&src, s, embed, hidden))
        .collect();
    let en_vecs: Vec<Vec<f64>> = batch
        .iter()
        .map(|(_, e)| ref_encode(&en, e, embed, hidden))
        .collect();
    let n = batch.len();
    let mut gap = f64::INFINITY;
    for i in 0..n {
        let pos = ref_cos(&src_vecs[i], &en_vecs[i]);
        for (j, en_vec) in en_vecs.iter().enumerate() {
            if j != i {
                gap = gap.min((margin - pos + ref_cos(&src_vecs[i], en_vec)).abs());
            }
        }
    }
    gap
}

// ---------------------------------------------------------------------------
// Finite-difference comparison
// ---------------------------------------------------------------------------

pub struct GradReport {
    pub checked: usize,
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

/// Central finite differences of [`reference_loss`] against the production
/// analytic gradients, parameter by parameter. A parameter passes when
/// |fd - analytic| <= atol + rtol * max(|fd|, |analytic|). The probe step is
/// measured from the actually-stored f32 values so rounding of the step
/// itself cancels out.
pub fn check_gradients(
    params: &mut EncoderParams,
    batch: &[(SeqRepr, SeqRepr)],
    margin: f32,
    h: f64,
    atol: f64,
    rtol: f64,
) -> GradReport {
    let (loss, grads) = params
        .loss_and_grads(batch, margin)
        .expect("production loss evaluates");
    let ref_loss = reference_loss(params, batch, margin as f64);
    assert!(
        (ref_loss - loss as f64).abs() <= 1e-4 * ref_loss.abs().max(1.0),
        "reference forward disagrees with production loss: {ref_loss} vs {loss}"
    );

    let gap = min_hinge_gap(params, batch, margin as f64);
    assert!(
        gap > 20.0 * h,
        "a hinge term sits within the probe window of its kink (gap {gap:.2e}); \
         pick a different seed or batch"
    );

    let n_tensors = params.tensors().len();
    assert_eq!(grads.len(), n_tensors);
    let mut report = GradReport {
        checked: 0,
        max_abs_diff: 0.0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for ti in 0..n_tensors {
        let numel = params.tensors()[ti].numel();
        for k in 0..numel {
            let orig = params.tensors()[ti].data()[k];
            let plus = (orig as f64 + h) as f32;
            let minus = (orig as f64 - h) as f32;

            params.tensors_mut()[ti].data_mut()[k] = plus;
            let loss_plus = reference_loss(params, batch, margin as f64);
            params.tensors_mut()[ti].data_mut()[k] = minus;
            let loss_minus = reference_loss(params, batch, margin as f64);
            params.tensors_mut()[ti].data_mut()[k] = orig;

            let step = plus as f64 - minus as f64;
            let fd = (loss_plus - loss_minus) / step;
            let analytic = grads[ti][k] as f64;
            let diff = (fd - analytic).abs();
            let scale = fd.abs().max(analytic.abs());
            report.checked += 1;
            report.max_abs_diff = report.max_abs_diff.max(diff);
            if scale > atol {
                report.max_rel_err = report.max_rel_err.max(diff / scale);
            }
            if diff > atol + rtol * scale {
                report.failures.push(format!(
                    "tensor {ti} element {k}: fd {fd:.6e} vs analytic {analytic:.6e}"
                ));
            }
        }
    }
    report
}
