//! Rotary position encoding with grouped streaming position ids.
//!
//! Pair layout is interleaved: components `(2i, 2i+1)` rotate together by
//! `position * base^(-2i / head_dim)`. Position ids are 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{AlignmentMap, SegmentLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    pub head_dim: usize,
    pub base: f64,
}

impl Default for RotaryConfig {
    fn default() -> Self {
        Self { head_dim: 16, base: 10_000.0 }
    }
}

impl RotaryConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        let c = Self { head_dim, base };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim must be even and positive, got {}", self.head_dim)));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    /// `(cos, sin)` for every pair at `position`.
    pub fn angles(&self, position: u32) -> Vec<(f32, f32)> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 2)
            .map(|i| {
                let theta = f64::from(position) * self.base.powf(-2.0 * i as f64 / d);
                (theta.cos() as f32, theta.sin() as f32)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionGrouping {
    /// `0..n` over the concatenated sequence.
    Vanilla,
    /// Input and reasoning streams each counted from zero.
    #[default]
    StreamingGrouped,
}

/// How reasoning tokens are numbered under grouped positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningIds {
    /// One running counter over the reasoning stream.
    #[default]
    RunningCounter,
    /// Every token of reasoning unit `t` takes the id of the first token of
    /// its aligned input unit. Answer tokens continue after the largest id.
    SentenceShared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    pub ids: Vec<u32>,
    pub grouping: PositionGrouping,
}

impl PositionMap {
    pub fn vanilla(n: usize) -> Self {
        Self { ids: (0..n as u32).collect(), grouping: PositionGrouping::Vanilla }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Position ids over input ++ reasoning ++ answer with running counters.
pub fn grouped_positions(layout: &SegmentLayout, grouping: PositionGrouping) -> PositionMap {
    let n = layout.total_len();
    match grouping {
        PositionGrouping::Vanilla => PositionMap::vanilla(n),
        PositionGrouping::StreamingGrouped => {
            let t = layout.input_len() as u32;
            let rest = (n - layout.input_len()) as u32;
            let ids = (0..t).chain(0..rest).collect();
            PositionMap { ids, grouping }
        }
    }
}

/// Grouped positions with an explicit reasoning numbering scheme.
pub fn grouped_positions_with(
    layout: &SegmentLayout,
    alignment: &AlignmentMap,
    scheme: ReasoningIds,
) -> Result<PositionMap> {
    if scheme == ReasoningIds::RunningCounter {
        return Ok(grouped_positions(layout, PositionGrouping::StreamingGrouped));
    }
    if alignment.len() != layout.reasoning().len() {
        return Err(Error::Alignment("alignment does not cover the reasoning stream".into()));
    }
    let mut starts = vec![0u32];
    starts.extend(layout.input_unit_ends().iter().map(|e| *e as u32));
    let mut ids: Vec<u32> = (0..layout.input_len() as u32).collect();
    let mut max_id = 0;
    for (unit, &(_, visible)) in layout.reasoning().iter().zip(&alignment.pairs) {
        let id = starts[visible - 1];
        max_id = max_id.max(id);
        ids.extend(std::iter::repeat_n(id, unit.len()));
    }
    let next = if layout.reasoning().is_empty() { 0 } else { max_id + 1 };
    ids.extend((0..layout.answer().len() as u32).map(|k| next + k));
    Ok(PositionMap { ids, grouping: PositionGrouping::StreamingGrouped })
}

/// Rotates `vec` in place by `position`.
pub fn rotate_in_place(vec: &mut [f32], position: u32, config: &RotaryConfig) -> Result<()> {
    if vec.len() != config.head_dim {
        return Err(Error::Dimension { expected: config.head_dim, got: vec.len() });
    }
    apply_angles(vec, &config.angles(position));
    Ok(())
}

pub(crate) fn apply_angles(vec: &mut [f32], angles: &[(f32, f32)]) {
    for (pair, &(c, s)) in vec.chunks_exact_mut(2).zip(angles) {
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * c - x1 * s;
        pair[1] = x0 * s + x1 * c;
    }
}

pub fn rotate(vec: &[f32], position: u32, config: &RotaryConfig) -> Result<Vec<f32>> {
    let mut out = vec.to_vec();
    rotate_in_place(&mut out, position, config)?;
    Ok(out)
}

/// `dot(rotate(q, pos_q), rotate(k, pos_k))`, evaluated in f64.
pub fn attention_score(q: &[f32], k: &[f32], pos_q: u32, pos_k: u32, config: &RotaryConfig) -> Result<f32> {
    if q.len() != k.len() {
        return Err(Error::Dimension { expected: q.len(), got: k.len() });
    }
    if q.len() != config.head_dim {
        return Err(Error::Dimension { expected: config.head_dim, got: q.len() });
    }
    let d = config.head_dim as f64;
    let mut score = 0.0f64;
    for (i, (qp, kp)) in q.chunks_exact(2).zip(k.chunks_exact(2)).enumerate() {
        let freq = config.base.powf(-2.0 * i as f64 / d);
        let (sq, cq) = (f64::from(pos_q) * freq).sin_cos();
        let (sk, ck) = (f64::from(pos_k) * freq).sin_cos();
        let (q0, q1) = (f64::from(qp[0]), f64::from(qp[1]));
        let (k0, k1) = (f64::from(kp[0]), f64::from(kp[1]));
        let rq = (q0 * cq - q1 * sq, q0 * sq + q1 * cq);
        let rk = (k0 * ck - k1 * sk, k0 * sk + k1 * ck);
        score += rq.0 * rk.0 + rq.1 * rk.1;
    }
    Ok(score as f32)
}
