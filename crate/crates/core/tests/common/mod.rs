//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylematch::compat::{bce_loss, siamese_backward, siamese_forward, ModelGrads, StyleModel};
use stylematch::nnops::{FeatureMatrix, Mode};
use stylematch::sentmodel::{EncoderHyperParams, LevelSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Zero-extended sliding window, one output cell at a time, accumulated in f64.
pub fn naive_wide_conv(s: &FeatureMatrix<f32>, f: &FeatureMatrix<f32>, b: &[f32]) -> Vec<Vec<f64>> {
    let (d, len) = s.shape();
    let m = f.cols() as isize;
    let mut out = vec![vec![0.0; len + f.cols() - 1]; d];
    for r in 0..d {
        for j in 0..(len as isize + m - 1) {
            let mut acc = b[r] as f64;
            for t in 0..m {
                let idx = j - m + 1 + t;
                if idx >= 0 && (idx as usize) < len {
                    acc += f.get(r, t as usize) as f64 * s.get(r, idx as usize) as f64;
                }
            }
            out[r][j as usize] = acc;
        }
    }
    out
}

/// Selects the top-k by value (earliest index on ties) by repeated linear
/// scans, then emits in index order and zero-pads.
pub fn naive_kmax(a: &[f32], k: usize) -> Vec<f32> {
    let mut chosen = vec![false; a.len()];
    for _ in 0..k.min(a.len()) {
        let mut best: Option<usize> = None;
        for i in 0..a.len() {
            if chosen[i] {
                continue;
            }
            if best.is_none_or(|b| a[i] > a[b]) {
                best = Some(i);
            }
        }
        chosen[best.unwrap()] = true;
    }
    let mut out: Vec<f32> = (0..a.len()).filter(|&i| chosen[i]).map(|i| a[i]).collect();
    out.resize(k, 0.0);
    out
}

pub fn tiny_hypers() -> EncoderHyperParams {
    EncoderHyperParams {
        embed_dim: 6,
        levels: vec![LevelSpec::new(3, 4, 3), LevelSpec::new(2, 2, 3)],
        repr_dim: 5,
        dropout: 0.0,
    }
}

/// A model with every parameter drawn at a scale that keeps activations away
/// from zero and the sigmoid away from saturation.
pub fn spread_model(h: EncoderHyperParams, vocab: usize, seed: u64) -> StyleModel<f64> {
    let mut r = rng(seed);
    let mut model = StyleModel::<f64>::zeros(h, vocab);
    let scales: Vec<f64> = model
        .tensors()
        .iter()
        .map(|t| {
            if t.name == "embedding" {
                1.0
            } else if t.name.contains(".filter.") {
                0.6
            } else if t.name.contains(".bias.") {
                0.5
            } else if t.name == "dense" || t.name == "compat.matrix" {
                0.3
            } else {
                0.2
            }
        })
        .collect();
    for (slot, scale) in model.tensors_mut().into_iter().zip(scales) {
        for v in slot.iter_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
    model
}

/// Smallest distance of any ReLU pre-activation from 0 and of any pair of
/// distinct positive activations within a pooled row.
pub fn degeneracy_margin(model: &StyleModel<f64>, tokens: &[u32]) -> f64 {
    let (_, tape) = stylematch::sentmodel::encode_sentence(
        &model.encoder,
        &model.hyper,
        tokens,
        Mode::Infer,
        &mut rng(0),
    )
    .unwrap();
    let mut margin = f64::INFINITY;
    for level in &tape.levels {
        for pre in &level.pre_activation {
            for r in 0..pre.rows() {
                let row = pre.row(r);
                for &v in row {
                    margin = margin.min(v.abs());
                }
                let pos: Vec<f64> = row.iter().copied().filter(|&v| v > 0.0).collect();
                for i in 0..pos.len() {
                    for j in i + 1..pos.len() {
                        margin = margin.min((pos[i] - pos[j]).abs());
                    }
                }
            }
        }
    }
    margin
}

pub fn pair_loss(model: &StyleModel<f64>, q: &[u32], c: &[u32], label: u8) -> f64 {
    let (p, _) = siamese_forward(model, q, c, Mode::Infer, &mut rng(0)).unwrap();
    bce_loss(p, label)
}

pub fn analytic_grads(model: &StyleModel<f64>, q: &[u32], c: &[u32], label: u8) -> Vec<Vec<f64>> {
    let (p, tape) = siamese_forward(model, q, c, Mode::Train, &mut rng(0)).unwrap();
    let mut g = ModelGrads::new(model);
    siamese_backward(model, &tape, p, label, &mut g).unwrap();
    g.tensors().iter().map(|t| t.to_vec()).collect()
}

/// Central differences of the pair loss over every parameter scalar.
pub fn numeric_grads(
    model: &StyleModel<f64>,
    q: &[u32],
    c: &[u32],
    label: u8,
    step: f64,
) -> Vec<Vec<f64>> {
    let mut work = model.clone();
    let lens: Vec<usize> = model.tensors().iter().map(|t| t.data.len()).collect();
    let mut out = Vec::with_capacity(lens.len());
    for (ti, &len) in lens.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.tensors_mut()[ti][i];
            work.tensors_mut()[ti][i] = orig + step;
            let plus = pair_loss(&work, q, c, label);
            work.tensors_mut()[ti][i] = orig - step;
            let minus = pair_loss(&work, q, c, label);
            work.tensors_mut()[ti][i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

pub fn random_sentence<R: Rng>(
    r: &mut R,
    vocab: usize,
    min_len: usize,
    max_len: usize,
) -> Vec<u32> {
    let len = r.gen_range(min_len..=max_len);
    (0..len).map(|_| r.gen_range(2..vocab as u32)).collect()
}

/// Denominator floor for relative error. Central differences at step 1e-5
/// carry ~1e-11 absolute roundoff in f64, which no gradient smaller than
/// ~1e-5 can be resolved against at 1e-6 relative.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

pub type Instance = (StyleModel<f64>, Vec<u32>, Vec<u32>, u8);

/// Draws (model, query, candidate, label) instances whose ReLU and k-max
/// decisions are at least `margin` away from switching.
pub fn nondegenerate_instances(
    h: &EncoderHyperParams,
    vocab: usize,
    count: usize,
    min_len: usize,
    max_len: usize,
    margin: f64,
    seed: u64,
) -> Vec<Instance> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut model_seed = seed.wrapping_mul(1_000_003);
    while out.len() < count {
        model_seed += 1;
        let model = spread_model(h.clone(), vocab, model_seed);
        let q = random_sentence(&mut r, vocab, min_len, max_len);
        let c = random_sentence(&mut r, vocab, min_len, max_len);
        if degeneracy_margin(&model, &q) < margin || degeneracy_margin(&model, &c) < margin {
            continue;
        }
        let label = (out.len() % 2) as u8;
        out.push((model, q, c, label));
    }
    out
}
