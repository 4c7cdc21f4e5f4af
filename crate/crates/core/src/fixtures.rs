//! Random well-formed sessions for tests, benches and the CLI harnesses.

use rand::Rng;

use crate::layout::{InputOrder, ReservedIds, SegmentLayout, SentenceUnit, Terminator, Token, TokenKind};

fn random_unit(
    rng: &mut impl Rng,
    index: usize,
    max_len: usize,
    terminator: Terminator,
    reserved: &ReservedIds,
    vocab: u32,
) -> SentenceUnit {
    let low = reserved.all().iter().max().map_or(0, |m| m + 1);
    let n = rng.random_range(0..max_len.max(1));
    let body = (0..n).map(|_| Token::content(rng.random_range(low..vocab), "w")).collect();
    SentenceUnit::new(index, "", body, terminator, reserved)
}

/// A layout with an optional question, `1..=max_context` context units of at
/// most `max_len` tokens each, one reasoning unit per input unit, a depth
/// tail and a short answer. Either input order may be drawn.
pub fn random_layout(
    rng: &mut impl Rng,
    max_context: usize,
    max_len: usize,
    reserved: &ReservedIds,
    vocab: u32,
) -> SegmentLayout {
    let n_c = rng.random_range(1..=max_context.max(1));
    let has_q = rng.random_bool(0.5);
    let order = if rng.random_bool(0.5) { InputOrder::QuestionFirst } else { InputOrder::ContextFirst };
    let unit = |rng: &mut _, i, t| random_unit(rng, i, max_len, t, reserved, vocab);
    let question_units: Vec<_> = if has_q { vec![unit(rng, 1, Terminator::Eoq)] } else { Vec::new() };
    let context_units: Vec<_> = (1..=n_c).map(|i| unit(rng, i, Terminator::Eos)).collect();
    let mut terms = Vec::new();
    if has_q && order == InputOrder::QuestionFirst {
        terms.push(Terminator::Eoq);
    }
    terms.extend(std::iter::repeat_n(Terminator::Eot, n_c));
    if has_q && order == InputOrder::ContextFirst {
        terms.push(Terminator::Eoq);
    }
    terms.push(Terminator::Eor);
    let mut reasoning: Vec<_> = terms.into_iter().enumerate().map(|(k, t)| unit(rng, k + 1, t)).collect();
    // Occasionally a streaming unit is a skip marker.
    if rng.random_bool(0.3) {
        let k = rng.random_range(0..reasoning.len() - 1);
        let u = &reasoning[k];
        reasoning[k] = SentenceUnit::new(u.index, "", vec![reserved.token(TokenKind::Skip)], u.terminator, reserved);
    }
    let n_answer = rng.random_range(1..=3);
    let answer = (0..n_answer).map(|_| Token::content(rng.random_range(5..vocab), "a")).collect();
    SegmentLayout {
        question_units,
        context_units,
        order,
        reasoning_units: Some(reasoning),
        answer_tokens: Some(answer),
    }
}
