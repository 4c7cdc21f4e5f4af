//! Deterministic toy decoder-only transformer.
//!
//! Layer layout (pre-norm, frozen by golden files):
//!
//! ```text
//! x = embed[token]
//! per layer:
//!     h = rmsnorm(x) * attn_gain
//!     q, k, v = h Wq, h Wk, h Wv          (rotary on q and k, per head)
//!     x = x + attention(q, k, v, mask) Wo
//!     h = rmsnorm(x) * ffn_gain
//!     x = x + silu(h W1) W2
//! logits = (rmsnorm(x) * final_gain) U
//! ```
//!
//! Weights come from ChaCha20 (`rand_chacha::ChaCha20Rng::seed_from_u64`).
//! Each parameter draws one `u32`, maps it to `u = (x >> 8) * 2^-24` in
//! `[0, 1)` and stores `(2u - 1) / sqrt(fan_in)`. Fill order: embedding
//! (row-major, fan_in = d_model), then per layer Wq, Wk, Wv, Wo, W1, W2,
//! then the unembedding. Norm gains are 1.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::rope::{apply_angles, PositionMap, RotaryConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 4, head_dim: 16, vocab_size: 64, ffn_mult: 2, seed: 42, rope_base: 10_000.0 }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn d_ffn(&self) -> usize {
        self.ffn_mult * self.d_model()
    }

    pub fn rotary(&self) -> RotaryConfig {
        RotaryConfig { head_dim: self.head_dim, base: self.rope_base }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        self.rotary().validate()
    }
}

/// Row-major `[rows][cols]` matrix; `x W` multiplies a row vector of length
/// `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha20Rng) -> Self {
        let scale = 1.0 / (fan_in as f32).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                let u = (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0);
                (2.0 * u - 1.0) * scale
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = x W`, accumulated over input index in ascending order.
    pub fn vec_mul(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_gain: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_gain: Vec<f32>,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f32>,
    pub unembedding: Matrix,
}

pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.d_model();
    let f = config.d_ffn();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let embedding = Matrix::random(config.vocab_size, d, d, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_gain: vec![1.0; d],
            wq: Matrix::random(d, d, d, &mut rng),
            wk: Matrix::random(d, d, d, &mut rng),
            wv: Matrix::random(d, d, d, &mut rng),
            wo: Matrix::random(d, d, d, &mut rng),
            ffn_gain: vec![1.0; d],
            w1: Matrix::random(d, f, d, &mut rng),
            w2: Matrix::random(f, d, f, &mut rng),
        })
        .collect();
    let unembedding = Matrix::random(d, config.vocab_size, d, &mut rng);
    Ok(ModelWeights { config: *config, embedding, layers, final_gain: vec![1.0; d], unembedding })
}

impl ModelWeights {
    /// Random parameters in fill order; the constant norm gains are left out.
    fn parameters(&self) -> impl Iterator<Item = &f32> {
        let layers = self.layers.iter().flat_map(|l| {
            [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2].into_iter().flat_map(|m| m.data.iter())
        });
        self.embedding.data.iter().chain(layers).chain(self.unembedding.data.iter())
    }

    /// SHA-256 over the little-endian bytes of all random parameters.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.parameters() {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub(crate) fn embed(&self, token: u32) -> Result<Vec<f32>> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(Error::Shape(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(self.embedding.row(t).to_vec())
    }
}

pub(crate) fn rmsnorm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Projections of one token at one layer; q and k rotated per head.
pub(crate) struct TokenProjection {
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

pub(crate) fn project(layer: &LayerWeights, x: &[f32], angles: &[(f32, f32)], head_dim: usize) -> TokenProjection {
    let h = rmsnorm(x, &layer.attn_gain);
    let d = x.len();
    let (mut q, mut k, mut v) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    layer.wq.vec_mul(&h, &mut q);
    layer.wk.vec_mul(&h, &mut k);
    layer.wv.vec_mul(&h, &mut v);
    for head in q.chunks_exact_mut(head_dim).chain(k.chunks_exact_mut(head_dim)) {
        apply_angles(head, angles);
    }
    TokenProjection { q, k, v }
}

/// Residual update after attention: `x += attn Wo`, then the FFN block.
pub(crate) fn finish_layer(layer: &LayerWeights, x: &mut [f32], attn: &[f32]) {
    let d = x.len();
    let mut o = vec![0.0; d];
    layer.wo.vec_mul(attn, &mut o);
    x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
    let h = rmsnorm(x, &layer.ffn_gain);
    let mut mid = vec![0.0; layer.w1.cols];
    layer.w1.vec_mul(&h, &mut mid);
    mid.iter_mut().for_each(|m| *m = silu(*m));
    let mut out = vec![0.0; d];
    layer.w2.vec_mul(&mid, &mut out);
    x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
}

pub(crate) fn unembed(weights: &ModelWeights, x: &[f32]) -> Vec<f32> {
    let h = rmsnorm(x, &weights.final_gain);
    let mut logits = vec![0.0; weights.config.vocab_size];
    weights.unembedding.vec_mul(&h, &mut logits);
    logits
}

/// `rows x vocab` next-token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

/// Post-softmax attention probabilities, `[layer][head]` each `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub n: usize,
    pub probs: Vec<Vec<Vec<f32>>>,
}

pub fn forward(tokens: &[u32], mask: &MaskMatrix, positions: &PositionMap, weights: &ModelWeights) -> Result<Logits> {
    forward_impl(tokens, mask, positions, weights, false).map(|(l, _)| l)
}

pub fn forward_traced(
    tokens: &[u32],
    mask: &MaskMatrix,
    positions: &PositionMap,
    weights: &ModelWeights,
) -> Result<(Logits, AttentionTrace)> {
    forward_impl(tokens, mask, positions, weights, true).map(|(l, t)| (l, t.expect("trace requested")))
}

fn forward_impl(
    tokens: &[u32],
    mask: &MaskMatrix,
    positions: &PositionMap,
    weights: &ModelWeights,
    trace: bool,
) -> Result<(Logits, Option<AttentionTrace>)> {
    let n = tokens.len();
    if n == 0 || mask.n() != n || positions.len() != n {
        return Err(Error::Shape(format!(
            "{n} tokens, {}x{0} mask, {} positions",
            mask.n(),
            positions.len()
        )));
    }
    let cfg = &weights.config;
    let (hd, nh) = (cfg.head_dim, cfg.n_heads);
    let scale = 1.0 / (hd as f32).sqrt();
    let rotary = cfg.rotary();
    let angles: Vec<_> = positions.ids.iter().map(|p| rotary.angles(*p)).collect();

    let mut xs = tokens.iter().map(|t| weights.embed(*t)).collect::<Result<Vec<_>>>()?;
    let mut traces = Vec::new();
    for layer in &weights.layers {
        let proj: Vec<_> = xs.iter().zip(&angles).map(|(x, a)| project(layer, x, a, hd)).collect();
        let mut layer_probs = vec![vec![0.0f32; if trace { n * n } else { 0 }]; nh];
        for (i, x) in xs.iter_mut().enumerate() {
            let mask_row = mask.row(i);
            let mut attn = vec![0.0f32; cfg.d_model()];
            for h in 0..nh {
                let r = h * hd..(h + 1) * hd;
                let q = &proj[i].q[r.clone()];
                let scores: Vec<f32> = proj
                    .iter()
                    .zip(mask_row)
                    .map(|(p, m)| q.iter().zip(&p.k[r.clone()]).map(|(a, b)| a * b).sum::<f32>() * scale + m)
                    .collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f32 = exps.iter().sum();
                let out = &mut attn[r.clone()];
                for (e, p) in exps.iter().zip(&proj) {
                    let w = e / sum;
                    for (o, v) in out.iter_mut().zip(&p.v[r.clone()]) {
                        *o += w * v;
                    }
                }
                if trace {
                    for (j, e) in exps.iter().enumerate() {
                        layer_probs[h][i * n + j] = e / sum;
                    }
                }
            }
            finish_layer(layer, x, &attn);
        }
        if trace {
            traces.push(layer_probs);
        }
    }
    let mut data = Vec::with_capacity(n * cfg.vocab_size);
    for x in &xs {
        data.extend(unembed(weights, x));
    }
    let logits = Logits { rows: n, vocab: cfg.vocab_size, data };
    Ok((logits, trace.then_some(AttentionTrace { n, probs: traces })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Greedy,
    #[default]
    Sample,
}

/// Decoding parameters; defaults follow the reference decoding setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub temperature: f32,
    pub top_p: f32,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplingMode::Sample, temperature: 0.6, top_p: 0.95, top_k: 20, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self { mode: SamplingMode::Greedy, ..Default::default() }
    }
}

pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha20Rng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Self {
        Self { config, rng: ChaCha20Rng::seed_from_u64(config.seed) }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Greedy: argmax, lowest id on ties. Sample: top-k, then nucleus
    /// truncation on the softmax of the kept logits, then a temperature
    /// softmax over the survivors and one seeded draw.
    pub fn next_token(&mut self, row: &[f32]) -> Result<u32> {
        if row.iter().any(|v| v.is_nan()) || row.iter().all(|v| *v == f32::NEG_INFINITY) || row.is_empty() {
            return Err(Error::AllMasked);
        }
        let mut order: Vec<usize> = (0..row.len()).filter(|&i| row[i] > f32::NEG_INFINITY).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        if self.config.mode == SamplingMode::Greedy {
            return Ok(order[0] as u32);
        }
        order.truncate(self.config.top_k.max(1));
        let probs = softmax(order.iter().map(|&i| row[i]));
        let mut cum = 0.0;
        let mut keep = order.len();
        for (n, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= self.config.top_p {
                keep = n + 1;
                break;
            }
        }
        order.truncate(keep);
        let temp = self.config.temperature.max(1e-6);
        let probs = softmax(order.iter().map(|&i| row[i] / temp));
        let u: f32 = self.rng.random();
        let mut cum = 0.0;
        for (id, p) in order.iter().zip(&probs) {
            cum += p;
            if u < cum {
                return Ok(*id as u32);
            }
        }
        Ok(*order.last().unwrap() as u32)
    }
}

fn softmax(xs: impl Iterator<Item = f32>) -> Vec<f32> {
    let v: Vec<f32> = xs.collect();
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
