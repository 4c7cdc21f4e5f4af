//! Additive attention masks: causal, the literal token-level streaming
//! predicate, and the segment-level streaming mask.
//!
//! Rows and columns are 1-based in the public API to match the predicate's
//! indexing; storage is row-major and 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{AlignmentMap, SegmentLayout};

/// Finite stand-in for negative infinity. `exp(x - max)` underflows to
/// exactly `0.0_f32` for any realistic score range.
pub const DEFAULT_MASK_SENTINEL: f32 = -1.0e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Causal,
    StreamingLiteral,
    StreamingSegment,
}

/// Dense `n x n` additive mask; every entry is `0.0` or the sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    n: usize,
    sentinel: f32,
    entries: Vec<f32>,
}

impl MaskMatrix {
    fn from_predicate(n: usize, sentinel: f32, visible: impl Fn(usize, usize) -> bool) -> Self {
        let mut entries = vec![sentinel; n * n];
        for i in 1..=n {
            for j in 1..=i {
                if visible(i, j) {
                    entries[(i - 1) * n + (j - 1)] = 0.0;
                }
            }
        }
        Self { n, sentinel, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sentinel(&self) -> f32 {
        self.sentinel
    }

    /// Entry at 1-based `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.entries[(i - 1) * self.n + (j - 1)]
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == 0.0
    }

    /// 0-based row slice.
    pub fn row(&self, i0: usize) -> &[f32] {
        &self.entries[i0 * self.n..(i0 + 1) * self.n]
    }

    pub fn masked_count(&self) -> usize {
        self.entries.iter().filter(|v| **v != 0.0).count()
    }

    /// Text grid: `.` visible, `#` masked, one line per row.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 1..=self.n {
            for j in 1..=self.n {
                s.push(if self.is_visible(i, j) { '.' } else { '#' });
            }
            s.push('\n');
        }
        s
    }

    /// Matrix as nested rows; masked cells are written as the sentinel.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f32>> = (0..self.n).map(|i| self.row(i).to_vec()).collect();
        serde_json::json!({ "n": self.n, "sentinel": self.sentinel, "entries": rows })
    }
}

/// Lower-triangular causal mask.
pub fn causal_mask(n: usize) -> Result<MaskMatrix> {
    causal_mask_with(n, DEFAULT_MASK_SENTINEL)
}

pub fn causal_mask_with(n: usize, sentinel: f32) -> Result<MaskMatrix> {
    if n == 0 {
        return Err(Error::Size("mask length must be at least 1".into()));
    }
    Ok(MaskMatrix::from_predicate(n, sentinel, |_, _| true))
}

/// The token-level streaming indicator, evaluated verbatim on 1-based
/// indices: `i > T && j < T && j > i - T + 1`.
pub fn literal_indicator(input_len: usize, i: usize, j: usize) -> bool {
    let (t, i, j) = (input_len as i64, i as i64, j as i64);
    i > t && j < t && j > i - t + 1
}

/// Causal mask over `T + L` positions with the literal streaming indicator
/// applied on top. Column `T` stays visible to every row; this edge
/// behaviour is kept as written.
pub fn streaming_mask_literal(input_len: usize, reasoning_len: usize) -> Result<MaskMatrix> {
    streaming_mask_literal_with(input_len, reasoning_len, DEFAULT_MASK_SENTINEL)
}

pub fn streaming_mask_literal_with(input_len: usize, reasoning_len: usize, sentinel: f32) -> Result<MaskMatrix> {
    if input_len == 0 {
        return Err(Error::Size("literal streaming mask needs T >= 1".into()));
    }
    let n = input_len + reasoning_len;
    Ok(MaskMatrix::from_predicate(n, sentinel, |i, j| !literal_indicator(input_len, i, j)))
}

/// Visibility predicate of the segment-level streaming mask, usable without
/// materializing the matrix.
///
/// Sequence order is input (arrival order), reasoning, answer. A reasoning
/// token of unit `t` sees input units `1..=alignment(t)` and every earlier
/// reasoning token; input rows are causal; answer rows see everything before
/// them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentVisibility {
    input_len: usize,
    /// Per reasoning token (0-based within the reasoning stream): visible
    /// input prefix length.
    reasoning_prefix: Vec<usize>,
    total: usize,
}

impl SegmentVisibility {
    pub fn new(layout: &SegmentLayout, alignment: &AlignmentMap) -> Result<Self> {
        let reasoning = layout.reasoning();
        if alignment.len() != reasoning.len() {
            return Err(Error::Alignment(format!(
                "alignment covers {} reasoning units, layout has {}",
                alignment.len(),
                reasoning.len()
            )));
        }
        let ends = layout.input_unit_ends();
        let mut reasoning_prefix = Vec::with_capacity(layout.reasoning_len());
        for (unit, &(_, visible)) in reasoning.iter().zip(&alignment.pairs) {
            let prefix = *ends
                .get(visible.wrapping_sub(1))
                .ok_or_else(|| Error::Alignment(format!("input unit {visible} does not exist")))?;
            reasoning_prefix.extend(std::iter::repeat_n(prefix, unit.len()));
        }
        Ok(Self { input_len: layout.input_len(), reasoning_prefix, total: layout.total_len() })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Whether 1-based row `i` may attend to column `j`.
    pub fn visible(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        let r = i - 1;
        if r < self.input_len || j > self.input_len {
            return true;
        }
        match self.reasoning_prefix.get(r - self.input_len) {
            Some(prefix) => j <= *prefix,
            None => true,
        }
    }

    pub fn to_matrix(&self, sentinel: f32) -> Result<MaskMatrix> {
        if self.total == 0 {
            return Err(Error::Size("empty layout".into()));
        }
        Ok(MaskMatrix::from_predicate(self.total, sentinel, |i, j| self.visible(i, j)))
    }
}

/// Segment-level streaming mask over input ++ reasoning ++ answer.
pub fn streaming_mask_segment(layout: &SegmentLayout, alignment: &AlignmentMap) -> Result<MaskMatrix> {
    SegmentVisibility::new(layout, alignment)?.to_matrix(DEFAULT_MASK_SENTINEL)
}

/// Columns (1-based, ascending) visible from row `i`.
pub fn visible_set(mask: &MaskMatrix, i: usize) -> Result<Vec<usize>> {
    if i == 0 || i > mask.n {
        return Err(Error::RowOutOfRange { row: i, n: mask.n });
    }
    Ok((1..=mask.n).filter(|&j| mask.is_visible(i, j)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{InputRole, ReservedIds, SentenceUnit, Terminator, Token, TokenKind};

    #[test]
    fn causal_basics() {
        let m = causal_mask(1).unwrap();
        assert_eq!(m.get(1, 1), 0.0);
        let m = causal_mask(3).unwrap();
        assert_eq!(m.masked_count(), 3);
        assert_eq!(m.to_grid(), ".##\n..#\n...\n");
        for n in 1..10 {
            assert_eq!(causal_mask(n).unwrap().masked_count(), n * (n - 1) / 2);
        }
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn literal_without_reasoning_is_causal() {
        assert_eq!(streaming_mask_literal(4, 0).unwrap(), causal_mask(4).unwrap());
    }

    #[test]
    fn literal_small_case() {
        // Brute-force enumeration of the indicator for T=4, L=3: rows 5..7.
        let m = streaming_mask_literal(4, 3).unwrap();
        let extra: Vec<(usize, usize)> = (1..=7)
            .flat_map(|i| (1..=i).map(move |j| (i, j)))
            .filter(|&(i, j)| !m.is_visible(i, j))
            .collect();
        assert_eq!(extra, vec![(5, 3)]);
        assert_eq!(visible_set(&m, 5).unwrap(), vec![1, 2, 4, 5]);
    }

    #[test]
    fn visible_set_bounds() {
        let m = causal_mask(3).unwrap();
        assert_eq!(visible_set(&m, 2).unwrap(), vec![1, 2]);
        assert_eq!(visible_set(&m, 1).unwrap(), vec![1]);
        assert!(visible_set(&m, 0).is_err());
        assert!(visible_set(&m, 4).is_err());
    }

    fn unit(index: usize, n: usize, t: Terminator) -> SentenceUnit {
        let body = (0..n - 1).map(|k| Token::content(10 + k as u32, "w")).collect();
        SentenceUnit::new(index, "", body, t, &ReservedIds::default())
    }

    fn layout(inputs: &[usize], reasoning: &[usize]) -> SegmentLayout {
        SegmentLayout {
            context_units: inputs.iter().enumerate().map(|(i, n)| unit(i + 1, *n, Terminator::Eos)).collect(),
            reasoning_units: Some(reasoning.iter().enumerate().map(|(i, n)| unit(i + 1, *n, Terminator::Eot)).collect()),
            ..Default::default()
        }
    }

    #[test]
    fn segment_single_unit_is_causal() {
        let l = layout(&[3], &[2]);
        let m = streaming_mask_segment(&l, &AlignmentMap::identity(1)).unwrap();
        assert_eq!(m, causal_mask(5).unwrap());
    }

    #[test]
    fn segment_three_by_two() {
        // Reasoning unit 1 (positions 7-8) sees input unit 1 only (1-2).
        let l = layout(&[2, 2, 2], &[2, 2, 2]);
        let m = streaming_mask_segment(&l, &AlignmentMap::identity(3)).unwrap();
        assert_eq!(visible_set(&m, 7).unwrap(), vec![1, 2, 7]);
        assert_eq!(visible_set(&m, 8).unwrap(), vec![1, 2, 7, 8]);
        assert_eq!(visible_set(&m, 9).unwrap(), vec![1, 2, 3, 4, 7, 8, 9]);
        assert_eq!(visible_set(&m, 12).unwrap(), (1..=12).collect::<Vec<_>>());
        for i in 1..=6 {
            assert_eq!(visible_set(&m, i).unwrap(), (1..=i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn segment_context_first_question_sees_all() {
        let reserved = ReservedIds::default();
        let q = SentenceUnit::new(1, "", vec![Token::content(9, "q")], Terminator::Eoq, &reserved);
        let mut l = layout(&[2, 2], &[1, 1]);
        l.order = crate::layout::InputOrder::ContextFirst;
        l.question_units = vec![q];
        let mut r = l.reasoning_units.take().unwrap();
        r.push(SentenceUnit::new(3, "", vec![Token::content(8, "r")], Terminator::Eoq, &reserved));
        l.reasoning_units = Some(r);
        let a = crate::layout::build_alignment(&l).unwrap();
        let m = streaming_mask_segment(&l, &a).unwrap();
        // input 6 tokens, reasoning 1,1,2 -> R_q at rows 9-10
        assert_eq!(visible_set(&m, 9).unwrap(), vec![1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let _ = InputRole::Context;
    }

    #[test]
    fn answer_rows_see_everything() {
        let mut l = layout(&[2, 2], &[1, 1]);
        l.answer_tokens = Some(vec![Token::content(11, "a"), Token { id: 12, text: None, kind: TokenKind::Content }]);
        let m = streaming_mask_segment(&l, &AlignmentMap::identity(2)).unwrap();
        assert_eq!(visible_set(&m, 7).unwrap(), (1..=7).collect::<Vec<_>>());
        assert_eq!(visible_set(&m, 8).unwrap(), (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn alignment_length_mismatch() {
        let l = layout(&[2, 2], &[1, 1]);
        assert!(streaming_mask_segment(&l, &AlignmentMap::identity(1)).is_err());
    }

    #[test]
    fn sentinel_underflows_in_f32() {
        let x = (DEFAULT_MASK_SENTINEL - 50.0_f32).exp();
        assert_eq!(x, 0.0);
    }
}
