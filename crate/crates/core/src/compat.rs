//! Bilinear compatibility head and the full Siamese model.
//!
//! `P(y=1 | q, c) = σ(x_qᵀ M x_c + b)` where both `x` come from the same
//! encoder. `M` is not constrained to be symmetric, so pairs are ordered.

use rand::Rng;

use crate::corpus::PretrainedTable;
use crate::error::{Error, Result};
use crate::nnops::{FeatureMatrix, Mode};
use crate::real::Real;
use crate::sentmodel::{
    init_encoder_with, EncodeTape, EncoderGrads, EncoderHyperParams, EncoderParams, InitScales,
    PreparedEncoder,
};

/// Probability clamp used inside the loss only.
pub const LOSS_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityParams<T> {
    /// `n × n` compatibility matrix `M`.
    pub matrix: FeatureMatrix<T>,
    pub bias: T,
}

impl<T: Real> CompatibilityParams<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            matrix: FeatureMatrix::zeros(n, n),
            bias: T::zero(),
        }
    }

    /// Identity plus uniform ±0.01 noise, zero bias.
    pub fn init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut matrix = FeatureMatrix::identity(n);
        for v in matrix.as_mut_slice() {
            *v += T::from_acc(rng.gen_range(-0.01..0.01));
        }
        Self {
            matrix,
            bias: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

/// `x_qᵀ M x_c` accumulated in `f64`, without the bias.
pub(crate) fn bilinear<T: Real>(x_q: &[T], m: &FeatureMatrix<T>, x_c: &[T]) -> f64 {
    x_q.iter()
        .enumerate()
        .map(|(i, &q)| {
            let row: f64 = m
                .row(i)
                .iter()
                .zip(x_c)
                .map(|(&a, &c)| a.to_acc() * c.to_acc())
                .sum();
            q.to_acc() * row
        })
        .sum()
}

fn check_pair<T: Real>(x_q: &[T], x_c: &[T], params: &CompatibilityParams<T>) -> Result<()> {
    let n = params.dim();
    if x_q.len() != n || x_c.len() != n || params.matrix.cols() != n {
        return Err(Error::shape(
            "match_score",
            format!("vectors of length {n}"),
            format!("{} and {}", x_q.len(), x_c.len()),
        ));
    }
    Ok(())
}

/// Logit `x_qᵀ M x_c + b`.
pub fn match_score<T: Real>(x_q: &[T], x_c: &[T], params: &CompatibilityParams<T>) -> Result<T> {
    check_pair(x_q, x_c, params)?;
    Ok(T::from_acc(
        bilinear(x_q, &params.matrix, x_c) + params.bias.to_acc(),
    ))
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn match_probability<T: Real>(
    x_q: &[T],
    x_c: &[T],
    params: &CompatibilityParams<T>,
) -> Result<T> {
    check_pair(x_q, x_c, params)?;
    let z = bilinear(x_q, &params.matrix, x_c) + params.bias.to_acc();
    Ok(T::from_acc(sigmoid(z)))
}

/// Binary cross-entropy of one example, with `p` clamped to `[ε, 1−ε]`.
pub fn bce_loss(p: f64, label: u8) -> f64 {
    let p = p.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Encoder hyper-parameters and both parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleModel<T> {
    pub hyper: EncoderHyperParams,
    pub encoder: EncoderParams<T>,
    pub compat: CompatibilityParams<T>,
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct TensorView<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Real> StyleModel<T> {
    pub fn init<R: Rng + ?Sized>(
        hyper: EncoderHyperParams,
        vocab_size: usize,
        rng: &mut R,
        pretrained: Option<&PretrainedTable>,
    ) -> Result<Self> {
        Self::init_with(hyper, vocab_size, rng, pretrained, &InitScales::default())
    }

    pub fn init_with<R: Rng + ?Sized>(
        hyper: EncoderHyperParams,
        vocab_size: usize,
        rng: &mut R,
        pretrained: Option<&PretrainedTable>,
        scales: &InitScales,
    ) -> Result<Self> {
        let encoder = init_encoder_with(&hyper, vocab_size, rng, pretrained, scales)?;
        let compat = CompatibilityParams::init(hyper.repr_dim, rng);
        Ok(Self {
            hyper,
            encoder,
            compat,
        })
    }

    pub fn zeros(hyper: EncoderHyperParams, vocab_size: usize) -> Self {
        let encoder = EncoderParams::zeros(&hyper, vocab_size);
        let compat = CompatibilityParams::zeros(hyper.repr_dim);
        Self {
            hyper,
            encoder,
            compat,
        }
    }

    pub fn repr_dim(&self) -> usize {
        self.hyper.repr_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab_size()
    }

    /// Inference-mode representation of a title.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<T>> {
        self.prepare()?.encode(tokens)
    }

    /// Packs the encoder once for repeated forward and backward passes.
    pub fn prepare(&self) -> Result<PreparedModel<'_, T>> {
        Ok(PreparedModel {
            model: self,
            encoder: PreparedEncoder::new(&self.encoder, &self.hyper)?,
        })
    }

    /// All parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let mut out = Vec::new();
        let emb = &self.encoder.embedding;
        out.push(TensorView {
            name: "embedding".into(),
            dims: vec![emb.rows(), emb.cols()],
            data: emb.as_slice(),
        });
        for (i, lp) in self.encoder.levels.iter().enumerate() {
            for (j, (fs, bs)) in lp.filters.iter().zip(&lp.biases).enumerate() {
                for (k, (f, b)) in fs.iter().zip(bs).enumerate() {
                    out.push(TensorView {
                        name: format!("level{i}.filter.{j}.{k}"),
                        dims: vec![f.rows(), f.cols()],
                        data: f.as_slice(),
                    });
                    out.push(TensorView {
                        name: format!("level{i}.bias.{j}.{k}"),
                        dims: vec![b.len()],
                        data: b,
                    });
                }
            }
        }
        let h = &self.encoder.dense;
        out.push(TensorView {
            name: "dense".into(),
            dims: vec![h.rows(), h.cols()],
            data: h.as_slice(),
        });
        let m = &self.compat.matrix;
        out.push(TensorView {
            name: "compat.matrix".into(),
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice(),
        });
        out.push(TensorView {
            name: "compat.bias".into(),
            dims: vec![],
            data: std::slice::from_ref(&self.compat.bias),
        });
        out
    }

    /// Mutable slices in the same order as [`StyleModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        out.push(self.encoder.embedding.as_mut_slice());
        for lp in &mut self.encoder.levels {
            for (fs, bs) in lp.filters.iter_mut().zip(lp.biases.iter_mut()) {
                for (f, b) in fs.iter_mut().zip(bs.iter_mut()) {
                    out.push(f.as_mut_slice());
                    out.push(b.as_mut_slice());
                }
            }
        }
        out.push(self.encoder.dense.as_mut_slice());
        out.push(self.compat.matrix.as_mut_slice());
        out.push(std::slice::from_mut(&mut self.compat.bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

/// Gradient buffers for a whole [`StyleModel`].
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub encoder: EncoderGrads<T>,
    pub compat: CompatibilityParams<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn new(model: &StyleModel<T>) -> Self {
        Self {
            encoder: EncoderGrads::new(&model.hyper, model.vocab_size()),
            compat: CompatibilityParams::zeros(model.repr_dim()),
        }
    }

    pub fn zero(&mut self) {
        self.encoder.zero();
        self.compat.matrix.fill_zero();
        self.compat.bias = T::zero();
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.encoder.merge(&other.encoder)?;
        self.compat.matrix.add_assign(&other.compat.matrix)?;
        self.compat.bias += other.compat.bias;
        Ok(())
    }

    /// Gradient tensors laid out like [`StyleModel::tensors`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let g = &self.encoder.grads;
        let mut out: Vec<&[T]> = vec![g.embedding.as_slice()];
        for lp in &g.levels {
            for (fs, bs) in lp.filters.iter().zip(&lp.biases) {
                for (f, b) in fs.iter().zip(bs) {
                    out.push(f.as_slice());
                    out.push(b);
                }
            }
        }
        out.push(g.dense.as_slice());
        out.push(self.compat.matrix.as_slice());
        out.push(std::slice::from_ref(&self.compat.bias));
        out
    }
}

/// Both towers and the head of one forward pass.
#[derive(Clone, Debug)]
pub struct SiameseTape<T> {
    pub query: EncodeTape<T>,
    pub cand: EncodeTape<T>,
    pub x_q: Vec<T>,
    pub x_c: Vec<T>,
    pub logit: f64,
}

/// Encodes both titles with the shared encoder and returns `P(y=1 | q, c)`.
/// The two towers draw independent dropout masks from `rng`.
pub fn siamese_forward<T: Real, R: Rng + ?Sized>(
    model: &StyleModel<T>,
    q_tokens: &[u32],
    c_tokens: &[u32],
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, SiameseTape<T>)> {
    model.prepare()?.forward(q_tokens, c_tokens, mode, rng)
}

/// Accumulates the gradient of `bce_loss(p, label)` for one pair into `grads`.
pub fn siamese_backward<T: Real>(
    model: &StyleModel<T>,
    tape: &SiameseTape<T>,
    p: f64,
    label: u8,
    grads: &mut ModelGrads<T>,
) -> Result<()> {
    model.prepare()?.backward(tape, p, label, grads)
}

/// A [`StyleModel`] with its encoder packed for repeated use.
pub struct PreparedModel<'a, T> {
    model: &'a StyleModel<T>,
    encoder: PreparedEncoder<'a, T>,
}

impl<T: Real> PreparedModel<'_, T> {
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<T>> {
        self.encoder.encode(tokens)
    }

    /// See [`siamese_forward`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        q_tokens: &[u32],
        c_tokens: &[u32],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, SiameseTape<T>)> {
        let model = self.model;
        let (x_q, query) = self.encoder.forward(q_tokens, mode, rng)?;
        let (x_c, cand) = self.encoder.forward(c_tokens, mode, rng)?;
        check_pair(&x_q, &x_c, &model.compat)?;
        let logit = bilinear(&x_q, &model.compat.matrix, &x_c) + model.compat.bias.to_acc();
        Ok((
            sigmoid(logit),
            SiameseTape {
                query,
                cand,
                x_q,
                x_c,
                logit,
            },
        ))
    }

    /// See [`siamese_backward`].
    pub fn backward(
        &self,
        tape: &SiameseTape<T>,
        p: f64,
        label: u8,
        grads: &mut ModelGrads<T>,
    ) -> Result<()> {
        let model = self.model;
        let n = model.repr_dim();
        if tape.x_q.len() != n || tape.x_c.len() != n {
            return Err(Error::shape("siamese_backward", n, tape.x_q.len()));
        }
        let delta = p - label as f64;
        if delta == 0.0 {
            return Ok(());
        }
        let m = &model.compat.matrix;

        // dM = δ · x_q x_cᵀ
        for (i, &q) in tape.x_q.iter().enumerate() {
            let dq = delta * q.to_acc();
            for (g, &c) in grads.compat.matrix.row_mut(i).iter_mut().zip(&tape.x_c) {
                *g = T::from_acc(g.to_acc() + dq * c.to_acc());
            }
        }
        grads.compat.bias = T::from_acc(grads.compat.bias.to_acc() + delta);

        // dx_q = δ · M x_c,  dx_c = δ · Mᵀ x_q
        let dx_q: Vec<T> = (0..n)
            .map(|i| {
                let acc: f64 = m
                    .row(i)
                    .iter()
                    .zip(&tape.x_c)
                    .map(|(&a, &c)| a.to_acc() * c.to_acc())
                    .sum();
                T::from_acc(delta * acc)
            })
            .collect();
        let mut dx_c_acc = vec![0f64; n];
        for (i, &q) in tape.x_q.iter().enumerate() {
            let q = q.to_acc();
            for (acc, &a) in dx_c_acc.iter_mut().zip(m.row(i)) {
                *acc += a.to_acc() * q;
            }
        }
        let dx_c: Vec<T> = dx_c_acc
            .into_iter()
            .map(|v| T::from_acc(delta * v))
            .collect();

        self.encoder
            .backward(&tape.query, &dx_q, &mut grads.encoder)?;
        self.encoder
            .backward(&tape.cand, &dx_c, &mut grads.encoder)?;
        Ok(())
    }
}
