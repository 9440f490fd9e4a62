//! The convolutional sentence encoder `φ(·)`.
//!
//! A title is looked up into a `d × |s|` sentence matrix, passed through one or
//! more levels of (summed wide convolutions → ReLU → k-max pooling) with
//! several feature maps per level, flattened, and projected to `n` dimensions.
//! Sentences are encoded one at a time without padding.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PretrainedTable;
use crate::error::{Error, Result};
use crate::nnops::{
    self, dense_backward, dense_forward, dropout, kmax_backward, kmax_pool_matrix, relu_backward,
    BiasBank, DenseMatrix, FeatureMatrix, FilterBank, KmaxSelection, Mode,
};
use crate::real::Real;

/// One convolution → ReLU → k-max stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// Filter width `m`.
    pub filter_size: usize,
    /// Pool size `k`.
    pub pool_size: usize,
    /// Number of feature maps `K` produced by the level.
    pub maps: usize,
}

impl LevelSpec {
    pub const fn new(filter_size: usize, pool_size: usize, maps: usize) -> Self {
        Self {
            filter_size,
            pool_size,
            maps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderHyperParams {
    pub embed_dim: usize,
    pub levels: Vec<LevelSpec>,
    pub repr_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderHyperParams {
    fn default() -> Self {
        Self {
            embed_dim: 100,
            levels: vec![LevelSpec::new(3, 5, 100), LevelSpec::new(2, 3, 100)],
            repr_dim: 100,
            dropout: 0.2,
        }
    }
}

impl EncoderHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.repr_dim == 0 {
            return Err(Error::Config(
                "embedding and representation dimensions must be >= 1".into(),
            ));
        }
        if self.levels.is_empty() {
            return Err(Error::Config(
                "at least one convolution level is required".into(),
            ));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.filter_size == 0 || l.pool_size == 0 || l.maps == 0 {
                return Err(Error::Config(format!(
                    "level {}: m, k and K must all be >= 1",
                    i + 1
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Length of the flattened top-level representation, `K_h·d·k_h`.
    pub fn flat_dim(&self) -> usize {
        let top = self.levels.last().expect("validated hyper-parameters");
        top.maps * self.embed_dim * top.pool_size
    }

    /// Number of input maps of level `i` (`K_0 = 1`).
    pub fn input_maps(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.levels[level - 1].maps
        }
    }
}

/// Filter and bias banks of one level, indexed `[output map][input map]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams<T> {
    pub filters: Vec<Vec<FilterBank<T>>>,
    pub biases: Vec<Vec<BiasBank<T>>>,
}

/// Encoder parameters: embedding `W` (`d × |V|`, one column per token), the
/// per-level banks, and the dense projection `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub embedding: FeatureMatrix<T>,
    pub levels: Vec<LevelParams<T>>,
    pub dense: DenseMatrix<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros(h: &EncoderHyperParams, vocab_size: usize) -> Self {
        let d = h.embed_dim;
        let levels = h
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let k_in = h.input_maps(i);
                LevelParams {
                    filters: (0..l.maps)
                        .map(|_| {
                            (0..k_in)
                                .map(|_| FeatureMatrix::zeros(d, l.filter_size))
                                .collect()
                        })
                        .collect(),
                    biases: (0..l.maps)
                        .map(|_| (0..k_in).map(|_| vec![T::zero(); d]).collect())
                        .collect(),
                }
            })
            .collect();
        Self {
            embedding: FeatureMatrix::zeros(d, vocab_size),
            levels,
            dense: FeatureMatrix::zeros(h.flat_dim(), h.repr_dim),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.rows()
    }

    /// Checks every tensor shape against `h`.
    pub fn check_shapes(&self, h: &EncoderHyperParams) -> Result<()> {
        let d = h.embed_dim;
        if self.embedding.rows() != d {
            return Err(Error::shape("embedding rows", d, self.embedding.rows()));
        }
        if self.levels.len() != h.levels.len() {
            return Err(Error::shape(
                "level count",
                h.levels.len(),
                self.levels.len(),
            ));
        }
        for (i, (lp, spec)) in self.levels.iter().zip(&h.levels).enumerate() {
            let k_in = h.input_maps(i);
            if lp.filters.len() != spec.maps || lp.biases.len() != spec.maps {
                return Err(Error::shape("output maps", spec.maps, lp.filters.len()));
            }
            for (fs, bs) in lp.filters.iter().zip(&lp.biases) {
                if fs.len() != k_in || bs.len() != k_in {
                    return Err(Error::shape("input maps", k_in, fs.len()));
                }
                if fs.iter().any(|f| f.shape() != (d, spec.filter_size))
                    || bs.iter().any(|b| b.len() != d)
                {
                    return Err(Error::shape(
                        "filter bank",
                        format!("{d}x{}", spec.filter_size),
                        "other",
                    ));
                }
            }
        }
        if self.dense.shape() != (h.flat_dim(), h.repr_dim) {
            return Err(Error::shape(
                "dense matrix",
                format!("{}x{}", h.flat_dim(), h.repr_dim),
                format!("{}x{}", self.dense.rows(), self.dense.cols()),
            ));
        }
        Ok(())
    }
}

fn uniform_fill<T: Real, R: Rng + ?Sized>(values: &mut [T], limit: f64, rng: &mut R) {
    if limit == 0.0 {
        values.fill(T::zero());
        return;
    }
    for v in values {
        *v = T::from_acc(rng.gen_range(-limit..limit));
    }
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Ranges used by [`init_encoder_with`]. The default is a ±0.05 embedding
/// range and plain Glorot-uniform filters and `H`; the gains multiply the
/// Glorot limits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScales {
    pub embedding_range: f64,
    pub filter_gain: f64,
    pub dense_gain: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        Self {
            embedding_range: 0.05,
            filter_gain: 1.0,
            dense_gain: 1.0,
        }
    }
}

impl InitScales {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.embedding_range) && ok(self.filter_gain) && ok(self.dense_gain)) {
            return Err(Error::Config(
                "initialisation ranges and gains must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Random initialisation with the default [`InitScales`]: embedding columns
/// are uniform in ±0.05 unless a pretrained vector exists for the token;
/// filters and `H` are Glorot-uniform; biases start at zero.
pub fn init_encoder<T: Real, R: Rng + ?Sized>(
    h: &EncoderHyperParams,
    vocab_size: usize,
    rng: &mut R,
    pretrained: Option<&PretrainedTable>,
) -> Result<EncoderParams<T>> {
    init_encoder_with(h, vocab_size, rng, pretrained, &InitScales::default())
}

pub fn init_encoder_with<T: Real, R: Rng + ?Sized>(
    h: &EncoderHyperParams,
    vocab_size: usize,
    rng: &mut R,
    pretrained: Option<&PretrainedTable>,
    scales: &InitScales,
) -> Result<EncoderParams<T>> {
    scales.validate()?;
    h.validate()?;
    let mut params = EncoderParams::zeros(h, vocab_size);
    uniform_fill(params.embedding.as_mut_slice(), scales.embedding_range, rng);
    if let Some(table) = pretrained {
        if table.dim != h.embed_dim {
            return Err(Error::Config(format!(
                "pretrained embeddings have dimension {}, model uses {}",
                table.dim, h.embed_dim
            )));
        }
        for (id, vector) in &table.vectors {
            let col = *id as usize;
            if col >= vocab_size {
                return Err(Error::Data(format!(
                    "pretrained token id {id} outside vocabulary"
                )));
            }
            for (r, &v) in vector.iter().enumerate() {
                params.embedding.set(r, col, T::from_acc(v as f64));
            }
        }
    }
    for (i, (lp, spec)) in params.levels.iter_mut().zip(&h.levels).enumerate() {
        let limit = scales.filter_gain
            * glorot_limit(
                h.input_maps(i) * spec.filter_size,
                spec.maps * spec.filter_size,
            );
        for f in lp.filters.iter_mut().flatten() {
            uniform_fill(f.as_mut_slice(), limit, rng);
        }
    }
    let limit = scales.dense_gain * glorot_limit(h.flat_dim(), h.repr_dim);
    uniform_fill(params.dense.as_mut_slice(), limit, rng);
    Ok(params)
}

/// Column `i` is the embedding of `tokens[i]`.
pub fn build_sentence_matrix<T: Real>(
    embedding: &FeatureMatrix<T>,
    tokens: &[u32],
) -> Result<FeatureMatrix<T>> {
    if tokens.is_empty() {
        return Err(Error::Data("cannot encode an empty sentence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= embedding.cols()) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {}",
            embedding.cols()
        )));
    }
    let mut s = FeatureMatrix::zeros(embedding.rows(), tokens.len());
    for r in 0..embedding.rows() {
        let src = embedding.row(r);
        for (dst, &t) in s.row_mut(r).iter_mut().zip(tokens) {
            *dst = src[t as usize];
        }
    }
    Ok(s)
}

/// Intermediates of one level, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LevelTape<T> {
    /// Summed convolutions before the activation, one per output map.
    pub pre_activation: Vec<FeatureMatrix<T>>,
    pub selections: Vec<KmaxSelection>,
    pub outputs: Vec<FeatureMatrix<T>>,
}

/// Filters of one level rearranged so that every output cell is a single
/// contiguous dot product. For output map `j` and row `r` the `m × K_in`
/// taps are stored tap-major; biases are pre-summed over input maps.
#[derive(Clone, Debug)]
struct PackedLevel {
    rows: usize,
    width: usize,
    k_in: usize,
    taps: Vec<f64>,
    bias: Vec<f64>,
}

impl PackedLevel {
    fn new<T: Real>(
        params: &LevelParams<T>,
        spec: &LevelSpec,
        rows: usize,
        k_in: usize,
    ) -> Result<Self> {
        let m = spec.filter_size;
        if params.filters.len() != spec.maps
            || params.biases.len() != spec.maps
            || params
                .filters
                .iter()
                .zip(&params.biases)
                .any(|(f, b)| f.len() != k_in || b.len() != k_in)
        {
            return Err(Error::shape(
                "encode_level banks",
                format!("{} x {k_in}", spec.maps),
                format!(
                    "{} x {}",
                    params.filters.len(),
                    params.filters.first().map_or(0, Vec::len)
                ),
            ));
        }
        let span = m * k_in;
        let mut taps = vec![0f64; spec.maps * rows * span];
        let mut bias = vec![0f64; spec.maps * rows];
        for (j, (filters, biases)) in params.filters.iter().zip(&params.biases).enumerate() {
            for (k, (f, b)) in filters.iter().zip(biases).enumerate() {
                if f.shape() != (rows, m) || b.len() != rows {
                    return Err(Error::shape(
                        "encode_level filter",
                        format!("{rows}x{m}"),
                        format!("{:?}", f.shape()),
                    ));
                }
                for r in 0..rows {
                    let dst = &mut taps[(j * rows + r) * span..][..span];
                    for (t, &v) in f.row(r).iter().enumerate() {
                        dst[t * k_in + k] = v.to_acc();
                    }
                    bias[j * rows + r] += b[r].to_acc();
                }
            }
        }
        Ok(Self {
            rows,
            width: m,
            k_in,
            taps,
            bias,
        })
    }

    fn span(&self) -> usize {
        self.width * self.k_in
    }
}

/// Input maps interleaved as `[row][position][map]` with `m − 1` zero
/// positions on both sides. Returns the buffer and the padded length.
fn pad_inputs<T: Real>(inputs: &[FeatureMatrix<T>], m: usize) -> (Vec<f64>, usize) {
    let (d, len) = inputs[0].shape();
    let k_in = inputs.len();
    let padded = len + 2 * (m - 1);
    let mut buf = vec![0f64; d * padded * k_in];
    for (k, input) in inputs.iter().enumerate() {
        for r in 0..d {
            let base = (r * padded + m - 1) * k_in + k;
            for (i, &v) in input.row(r).iter().enumerate() {
                buf[base + i * k_in] = v.to_acc();
            }
        }
    }
    (buf, padded)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn check_inputs<T: Real>(inputs: &[FeatureMatrix<T>]) -> Result<(usize, usize)> {
    let (d, len) = inputs
        .first()
        .map(FeatureMatrix::shape)
        .ok_or_else(|| Error::shape("encode_level", "at least one input map", 0))?;
    if inputs.iter().any(|m| m.shape() != (d, len)) {
        return Err(Error::shape(
            "encode_level inputs",
            format!("{d}x{len}"),
            "mixed shapes",
        ));
    }
    if d == 0 || len == 0 {
        return Err(Error::shape(
            "encode_level inputs",
            "non-empty maps",
            format!("{d}x{len}"),
        ));
    }
    Ok((d, len))
}

fn forward_level<T: Real>(
    inputs: &[FeatureMatrix<T>],
    packed: &PackedLevel,
    spec: &LevelSpec,
) -> Result<LevelTape<T>> {
    let (d, len) = check_inputs(inputs)?;
    if d != packed.rows || inputs.len() != packed.k_in {
        return Err(Error::shape(
            "encode_level inputs",
            format!("{} maps of {} rows", packed.k_in, packed.rows),
            format!("{} maps of {d} rows", inputs.len()),
        ));
    }
    let m = spec.filter_size;
    let k_in = packed.k_in;
    let span = packed.span();
    let (pad, padded) = pad_inputs(inputs, m);
    let conv_len = len + m - 1;
    let mut tape = LevelTape {
        pre_activation: Vec::with_capacity(spec.maps),
        selections: Vec::with_capacity(spec.maps),
        outputs: Vec::with_capacity(spec.maps),
    };
    for j in 0..spec.maps {
        let mut sum = FeatureMatrix::zeros(d, conv_len);
        for r in 0..d {
            let taps = &packed.taps[(j * d + r) * span..][..span];
            let b = packed.bias[j * d + r];
            let row = &pad[r * padded * k_in..(r + 1) * padded * k_in];
            for (c, out) in sum.row_mut(r).iter_mut().enumerate() {
                *out = T::from_acc(b + dot(taps, &row[c * k_in..c * k_in + span]));
            }
        }
        let mut act = sum.clone();
        nnops::relu_in_place(&mut act);
        let (pooled, sel) = kmax_pool_matrix(&act, spec.pool_size);
        tape.pre_activation.push(sum);
        tape.selections.push(sel);
        tape.outputs.push(pooled);
    }
    Ok(tape)
}

/// Back-propagates one level. Accumulates filter and bias gradients into
/// `grads` and returns the gradient with respect to each input map.
fn backward_level<T: Real>(
    inputs: &[FeatureMatrix<T>],
    tape: &LevelTape<T>,
    packed: &PackedLevel,
    spec: &LevelSpec,
    upstream: &[FeatureMatrix<T>],
    grads: &mut LevelParams<T>,
) -> Result<Vec<FeatureMatrix<T>>> {
    let (d, len) = check_inputs(inputs)?;
    let m = spec.filter_size;
    let k_in = packed.k_in;
    let span = packed.span();
    let (pad, padded) = pad_inputs(inputs, m);
    let mut d_pad = vec![0f64; pad.len()];
    let mut d_taps = vec![0f64; span];
    for j in 0..spec.maps {
        let d_act = kmax_backward(&tape.selections[j], &upstream[j])?;
        let d_pre = relu_backward(&tape.pre_activation[j], &d_act)?;
        for r in 0..d {
            let taps = &packed.taps[(j * d + r) * span..][..span];
            let lo = r * padded * k_in;
            let row = &pad[lo..lo + padded * k_in];
            let d_row = &mut d_pad[lo..lo + padded * k_in];
            d_taps.fill(0.0);
            let mut d_bias = 0.0;
            let mut any = false;
            for (c, &g) in d_pre.row(r).iter().enumerate() {
                let g = g.to_acc();
                if g == 0.0 {
                    continue;
                }
                any = true;
                d_bias += g;
                axpy(&mut d_taps, g, &row[c * k_in..c * k_in + span]);
                axpy(&mut d_row[c * k_in..c * k_in + span], g, taps);
            }
            if !any {
                continue;
            }
            for k in 0..k_in {
                let df = grads.filters[j][k].row_mut(r);
                for (t, v) in df.iter_mut().enumerate() {
                    *v = T::from_acc(v.to_acc() + d_taps[t * k_in + k]);
                }
                let db = &mut grads.biases[j][k][r];
                *db = T::from_acc(db.to_acc() + d_bias);
            }
        }
    }
    let mut d_inputs: Vec<FeatureMatrix<T>> =
        (0..k_in).map(|_| FeatureMatrix::zeros(d, len)).collect();
    for (k, di) in d_inputs.iter_mut().enumerate() {
        for r in 0..d {
            let base = (r * padded + m - 1) * k_in + k;
            for (i, v) in di.row_mut(r).iter_mut().enumerate() {
                *v = T::from_acc(d_pad[base + i * k_in]);
            }
        }
    }
    Ok(d_inputs)
}

/// `P^i_j = kmax(relu(Σ_k conv(P^{i−1}_k, F_{j,k}, B_{j,k})))` for each output map `j`.
pub fn encode_level<T: Real>(
    inputs: &[FeatureMatrix<T>],
    params: &LevelParams<T>,
    spec: &LevelSpec,
) -> Result<Vec<FeatureMatrix<T>>> {
    let (d, _) = check_inputs(inputs)?;
    let packed = PackedLevel::new(params, spec, d, inputs.len())?;
    forward_level(inputs, &packed, spec).map(|t| t.outputs)
}

/// Everything the backward pass of one sentence needs.
#[derive(Clone, Debug)]
pub struct EncodeTape<T> {
    pub tokens: Vec<u32>,
    pub sentence: FeatureMatrix<T>,
    pub levels: Vec<LevelTape<T>>,
    /// Flattened top-level maps before dropout.
    pub flat: Vec<T>,
    pub dropout_mask: Vec<T>,
    /// Input to the dense projection.
    pub dropped: Vec<T>,
}

/// Flattening is map-major, then row-major within each map.
fn flatten<T: Real>(maps: &[FeatureMatrix<T>]) -> Vec<T> {
    maps.iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect()
}

/// Encoder parameters bound to their hyper-parameters, with the convolution
/// banks pre-packed. Build once per parameter version and reuse it for every
/// sentence.
#[derive(Clone, Debug)]
pub struct PreparedEncoder<'a, T> {
    params: &'a EncoderParams<T>,
    hyper: &'a EncoderHyperParams,
    levels: Vec<PackedLevel>,
}

impl<'a, T: Real> PreparedEncoder<'a, T> {
    pub fn new(params: &'a EncoderParams<T>, hyper: &'a EncoderHyperParams) -> Result<Self> {
        params.check_shapes(hyper)?;
        let d = hyper.embed_dim;
        let levels = params
            .levels
            .iter()
            .zip(&hyper.levels)
            .enumerate()
            .map(|(i, (lp, spec))| PackedLevel::new(lp, spec, d, hyper.input_maps(i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            hyper,
            levels,
        })
    }

    pub fn params(&self) -> &'a EncoderParams<T> {
        self.params
    }

    pub fn hyper(&self) -> &'a EncoderHyperParams {
        self.hyper
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tokens: &[u32],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<T>, EncodeTape<T>)> {
        let sentence = build_sentence_matrix(&self.params.embedding, tokens)?;
        let mut levels: Vec<LevelTape<T>> = Vec::with_capacity(self.levels.len());
        for (packed, spec) in self.levels.iter().zip(&self.hyper.levels) {
            let inputs = match levels.last() {
                Some(prev) => prev.outputs.as_slice(),
                None => std::slice::from_ref(&sentence),
            };
            let tape = forward_level(inputs, packed, spec)?;
            levels.push(tape);
        }
        let flat = flatten(&levels.last().expect("at least one level").outputs);
        let (dropped, dropout_mask) = dropout(&flat, self.hyper.dropout, rng, mode)?;
        let x = dense_forward(&dropped, &self.params.dense)?;
        Ok((
            x,
            EncodeTape {
                tokens: tokens.to_vec(),
                sentence,
                levels,
                flat,
                dropout_mask,
                dropped,
            },
        ))
    }

    /// Inference-mode encoding without keeping the tape.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<T>> {
        // the stream is never drawn from in inference mode
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.forward(tokens, Mode::Infer, &mut rng).map(|(x, _)| x)
    }

    /// Back-propagates `dx` through one encoded sentence, accumulating into `out`.
    pub fn backward(
        &self,
        tape: &EncodeTape<T>,
        dx: &[T],
        out: &mut EncoderGrads<T>,
    ) -> Result<()> {
        let h = self.hyper;
        let params = self.params;
        if dx.len() != h.repr_dim
            || tape.levels.len() != h.levels.len()
            || tape.dropped.len() != h.flat_dim()
        {
            return Err(Error::shape(
                "encode_backward",
                format!(
                    "dx {} / {} levels / flat {}",
                    h.repr_dim,
                    h.levels.len(),
                    h.flat_dim()
                ),
                format!(
                    "dx {} / {} levels / flat {}",
                    dx.len(),
                    tape.levels.len(),
                    tape.dropped.len()
                ),
            ));
        }
        let d_dropped = dense_backward(&tape.dropped, &params.dense, dx, &mut out.grads.dense)?;
        let d_flat: Vec<T> = d_dropped
            .iter()
            .zip(&tape.dropout_mask)
            .map(|(&g, &m)| g * m)
            .collect();

        let d = h.embed_dim;
        let top = h.levels.last().expect("validated");
        let block = d * top.pool_size;
        let mut upstream: Vec<FeatureMatrix<T>> = d_flat
            .chunks(block)
            .map(|c| FeatureMatrix::from_vec(d, top.pool_size, c.to_vec()))
            .collect::<Result<_>>()?;

        for (i, level_tape) in tape.levels.iter().enumerate().rev() {
            let inputs = if i == 0 {
                std::slice::from_ref(&tape.sentence)
            } else {
                tape.levels[i - 1].outputs.as_slice()
            };
            upstream = backward_level(
                inputs,
                level_tape,
                &self.levels[i],
                &h.levels[i],
                &upstream,
                &mut out.grads.levels[i],
            )?;
        }

        let d_sentence = &upstream[0];
        let emb = &mut out.grads.embedding;
        for (col, &tok) in tape.tokens.iter().enumerate() {
            let t = tok as usize;
            for r in 0..d {
                let v = emb.get(r, t) + d_sentence.get(r, col);
                emb.set(r, t, v);
            }
            out.touched.insert(tok);
        }
        Ok(())
    }
}

/// Single-sentence forward pass. Prefer [`PreparedEncoder`] when encoding
/// many sentences with the same parameters.
pub fn encode_sentence<T: Real, R: Rng + ?Sized>(
    params: &EncoderParams<T>,
    h: &EncoderHyperParams,
    tokens: &[u32],
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<T>, EncodeTape<T>)> {
    PreparedEncoder::new(params, h)?.forward(tokens, mode, rng)
}

/// Inference-mode encoding without keeping the tape.
pub fn encode<T: Real>(
    params: &EncoderParams<T>,
    h: &EncoderHyperParams,
    tokens: &[u32],
) -> Result<Vec<T>> {
    PreparedEncoder::new(params, h)?.encode(tokens)
}

/// Gradient buffers shaped like [`EncoderParams`], tracking which embedding
/// columns have been written.
#[derive(Clone, Debug)]
pub struct EncoderGrads<T> {
    pub grads: EncoderParams<T>,
    touched: BTreeSet<u32>,
}

impl<T: Real> EncoderGrads<T> {
    pub fn new(h: &EncoderHyperParams, vocab_size: usize) -> Self {
        Self {
            grads: EncoderParams::zeros(h, vocab_size),
            touched: BTreeSet::new(),
        }
    }

    /// Embedding columns with possibly non-zero gradient, ascending.
    pub fn touched_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.touched.iter().copied()
    }

    pub fn zero(&mut self) {
        let emb = &mut self.grads.embedding;
        for &t in &self.touched {
            for r in 0..emb.rows() {
                emb.set(r, t as usize, T::zero());
            }
        }
        self.touched.clear();
        for lp in &mut self.grads.levels {
            lp.filters
                .iter_mut()
                .flatten()
                .for_each(FeatureMatrix::fill_zero);
            for b in lp.biases.iter_mut().flatten() {
                b.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self.grads.dense.fill_zero();
    }

    /// `self += other`.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        let emb = &mut self.grads.embedding;
        if emb.shape() != other.grads.embedding.shape() {
            return Err(Error::shape(
                "EncoderGrads::merge",
                format!("{:?}", emb.shape()),
                format!("{:?}", other.grads.embedding.shape()),
            ));
        }
        for &t in &other.touched {
            for r in 0..emb.rows() {
                let v = emb.get(r, t as usize) + other.grads.embedding.get(r, t as usize);
                emb.set(r, t as usize, v);
            }
            self.touched.insert(t);
        }
        for (a, b) in self.grads.levels.iter_mut().zip(&other.grads.levels) {
            for (fa, fb) in a
                .filters
                .iter_mut()
                .flatten()
                .zip(b.filters.iter().flatten())
            {
                fa.add_assign(fb)?;
            }
            for (ba, bb) in a.biases.iter_mut().flatten().zip(b.biases.iter().flatten()) {
                for (x, &y) in ba.iter_mut().zip(bb) {
                    *x += y;
                }
            }
        }
        self.grads.dense.add_assign(&other.grads.dense)
    }
}

/// Back-propagates `dx` through one encoded sentence, accumulating into `out`.
pub fn encode_backward<T: Real>(
    params: &EncoderParams<T>,
    h: &EncoderHyperParams,
    tape: &EncodeTape<T>,
    dx: &[T],
    out: &mut EncoderGrads<T>,
) -> Result<()> {
    PreparedEncoder::new(params, h)?.backward(tape, dx, out)
}
