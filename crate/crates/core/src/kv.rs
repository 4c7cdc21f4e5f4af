//! Parallel KV caches for streaming decoding.
//!
//! A source cache receives sentence prefill in arrival order; a target cache
//! receives reasoning tokens. Before a reasoning unit decodes, the two are
//! merged into a view exposing a unit-aligned slice of the source followed
//! by the whole target; after the unit's terminator the view is split again.
//! The merged view is a visible-length bound over the two caches, never a
//! copy, so merge and split leave stored keys and values untouched.
//!
//! Keys are stored already rotated at their grouped position id.

use std::sync::{Condvar, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    build_alignment, AlignmentMap, InputOrder, ReasoningRole, ReservedIds, SegmentLayout, SentenceUnit, Terminator,
    TokenKind,
};
use crate::mask::streaming_mask_segment;
use crate::model::{finish_layer, forward, project, unembed, Logits, ModelConfig, ModelWeights, Sampler};
use crate::rope::{grouped_positions_with, ReasoningIds};

/// Keys and values of one layer, `width = n_heads * head_dim` per position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl LayerKv {
    pub fn new(width: usize) -> Self {
        Self { width, keys: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, pos: usize) -> &[f32] {
        &self.keys[pos * self.width..(pos + 1) * self.width]
    }

    pub fn value(&self, pos: usize) -> &[f32] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }

    fn push(&mut self, k: &[f32], v: &[f32]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }

    /// Raw bit patterns of keys then values.
    pub fn bits(&self) -> Vec<u32> {
        self.keys.iter().chain(&self.values).map(|f| f.to_bits()).collect()
    }
}

/// One [`LayerKv`] per model layer; all layers always hold the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self { layers: (0..config.n_layers).map(|_| LayerKv::new(config.d_model())).collect() }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs one token through the model, appending its keys and values to
/// `target`. The token attends to `prefix` (the first `n` positions of the
/// given cache), then to every position of `target` including itself.
pub(crate) fn feed_token(
    weights: &ModelWeights,
    token: u32,
    position: u32,
    prefix: Option<(&KvCache, usize)>,
    target: &mut KvCache,
) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    let (hd, nh) = (cfg.head_dim, cfg.n_heads);
    let scale = 1.0 / (hd as f32).sqrt();
    let angles = cfg.rotary().angles(position);
    let mut x = weights.embed(token)?;
    for (l, layer) in weights.layers.iter().enumerate() {
        let p = project(layer, &x, &angles, hd);
        target.layers[l].push(&p.k, &p.v);
        let own = &target.layers[l];
        let pre: Option<(&LayerKv, usize)> = prefix.map(|(c, n)| (&c.layers[l], n));
        let keys = || {
            let pre_iter = pre.into_iter().flat_map(|(c, n)| (0..n).map(move |i| (c, i)));
            pre_iter.chain((0..own.len()).map(move |i| (own, i)))
        };
        let mut attn = vec![0.0f32; cfg.d_model()];
        for h in 0..nh {
            let r = h * hd..(h + 1) * hd;
            let q = &p.q[r.clone()];
            let scores: Vec<f32> = keys()
                .map(|(c, i)| q.iter().zip(&c.key(i)[r.clone()]).map(|(a, b)| a * b).sum::<f32>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f32 = exps.iter().sum();
            let out = &mut attn[r.clone()];
            for (e, (c, i)) in exps.iter().zip(keys()) {
                let w = e / sum;
                for (o, v) in out.iter_mut().zip(&c.value(i)[r.clone()]) {
                    *o += w * v;
                }
            }
        }
        finish_layer(layer, &mut x, &attn);
    }
    Ok(unembed(weights, &x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Split,
    Merged,
}

/// Descriptor of the currently merged view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergedView {
    pub visible_input_len: usize,
    pub output_len: usize,
}

/// Source cache, target cache and the scheduling counters.
#[derive(Debug, Clone)]
pub struct DualKvState {
    pub input_cache: KvCache,
    pub output_cache: KvCache,
    mode: CacheMode,
    merged_visible_len: usize,
    n_eos_seen: usize,
    n_eot_done: usize,
    input_unit_ends: Vec<usize>,
    reserved: ReservedIds,
}

impl DualKvState {
    pub fn new(config: &ModelConfig, reserved: ReservedIds) -> Self {
        Self {
            input_cache: KvCache::new(config),
            output_cache: KvCache::new(config),
            mode: CacheMode::Split,
            merged_visible_len: 0,
            n_eos_seen: 0,
            n_eot_done: 0,
            input_unit_ends: Vec::new(),
            reserved,
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn merged_visible_len(&self) -> usize {
        self.merged_visible_len
    }

    pub fn n_eos_seen(&self) -> usize {
        self.n_eos_seen
    }

    pub fn n_eot_done(&self) -> usize {
        self.n_eot_done
    }

    pub fn prefilled_units(&self) -> usize {
        self.input_unit_ends.len()
    }

    pub fn input_unit_ends(&self) -> &[usize] {
        &self.input_unit_ends
    }

    /// Appends one input unit to the source cache. Returns the logits of the
    /// unit's last token.
    pub fn prefill_unit(&mut self, weights: &ModelWeights, unit: &SentenceUnit, positions: &[u32]) -> Result<Vec<f32>> {
        if self.mode == CacheMode::Merged {
            return Err(Error::CacheState("prefill while merged; split first".into()));
        }
        let expected = self.input_unit_ends.len() + 1;
        if unit.index != expected {
            return Err(Error::OutOfOrder { expected, got: unit.index });
        }
        self.prefill_tokens(weights, &unit.tokens.iter().map(|t| t.id).collect::<Vec<_>>(), positions)
            .map(|rows| rows.into_iter().last().unwrap_or_default())
    }

    /// Prefills raw token ids as the next unit; returns every row's logits.
    pub fn prefill_tokens(&mut self, weights: &ModelWeights, tokens: &[u32], positions: &[u32]) -> Result<Vec<Vec<f32>>> {
        if self.mode == CacheMode::Merged {
            return Err(Error::CacheState("prefill while merged; split first".into()));
        }
        if tokens.len() != positions.len() || tokens.is_empty() {
            return Err(Error::Shape(format!("{} tokens with {} positions", tokens.len(), positions.len())));
        }
        let rows = tokens
            .iter()
            .zip(positions)
            .map(|(t, p)| feed_token(weights, *t, *p, None, &mut self.input_cache))
            .collect::<Result<Vec<_>>>()?;
        self.input_unit_ends.push(self.input_cache.len());
        if matches!(self.reserved.kind_of(*tokens.last().unwrap()), TokenKind::Eos | TokenKind::Eoq) {
            self.n_eos_seen += 1;
        }
        Ok(rows)
    }

    /// Exposes the first `visible_input_len` source positions plus the whole
    /// target cache to subsequent decode steps.
    pub fn merge(&mut self, visible_input_len: usize) -> Result<MergedView> {
        if self.mode == CacheMode::Merged {
            return Err(Error::CacheState("already merged".into()));
        }
        if !self.input_unit_ends.contains(&visible_input_len) {
            return Err(Error::SliceBoundary { len: visible_input_len });
        }
        self.mode = CacheMode::Merged;
        self.merged_visible_len = visible_input_len;
        Ok(MergedView { visible_input_len, output_len: self.output_cache.len() })
    }

    pub fn split(&mut self) -> Result<()> {
        if self.mode == CacheMode::Split {
            return Err(Error::CacheState("split while not merged".into()));
        }
        self.mode = CacheMode::Split;
        self.merged_visible_len = 0;
        Ok(())
    }

    /// Feeds one reasoning or answer token through the merged view. Feeding
    /// a reasoning terminator completes the unit: `n_eot_done` increments and
    /// the view splits.
    pub fn feed(&mut self, weights: &ModelWeights, token: u32, position: u32) -> Result<Vec<f32>> {
        if self.mode != CacheMode::Merged {
            return Err(Error::CacheState("decode while split".into()));
        }
        let logits = feed_token(
            weights,
            token,
            position,
            Some((&self.input_cache, self.merged_visible_len)),
            &mut self.output_cache,
        )?;
        if self.reserved.kind_of(token).ends_reasoning_unit() {
            self.n_eot_done += 1;
            self.split()?;
        }
        Ok(logits)
    }

    /// One decode step: feed `last_token`, then choose the next token.
    pub fn decode_step(
        &mut self,
        weights: &ModelWeights,
        last_token: u32,
        position: u32,
        sampler: &mut Sampler,
    ) -> Result<u32> {
        let logits = self.feed(weights, last_token, position)?;
        sampler.next_token(&logits)
    }
}

/// Input units with the time (seconds) their last token arrives.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSchedule {
    pub events: Vec<(f64, SentenceUnit)>,
}

impl ArrivalSchedule {
    pub fn new(events: Vec<(f64, SentenceUnit)>) -> Result<Self> {
        for (k, w) in events.windows(2).enumerate() {
            if w[1].0 < w[0].0 {
                return Err(Error::Layout(format!("arrival times decrease at unit {}", k + 2)));
            }
        }
        Ok(Self { events })
    }

    /// Input units of `layout` arriving at `tokens_per_second`, starting at
    /// t = 0. Infinite rates make everything arrive at once. Units are
    /// renumbered 1..n in arrival order.
    pub fn from_layout(layout: &SegmentLayout, tokens_per_second: f64) -> Self {
        let mut t = 0.0;
        let events = layout
            .input_units()
            .into_iter()
            .enumerate()
            .map(|(k, u)| {
                t += u.len() as f64 / tokens_per_second;
                (t, SentenceUnit { index: k + 1, ..u.clone() })
            })
            .collect();
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_arrival(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.0)
    }
}

/// Token source for one reasoning unit or the answer.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitTokens {
    /// Teacher-forced ids, terminator included for reasoning units.
    Forced(Vec<u32>),
    /// Sampled; the unit is cut with its terminator at `max_tokens`.
    Free { max_tokens: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedUnit {
    pub index: usize,
    pub visible_inputs: usize,
    pub role: ReasoningRole,
    pub tokens: UnitTokens,
}

impl PlannedUnit {
    fn terminator(&self) -> Terminator {
        match self.role {
            ReasoningRole::Question => Terminator::Eoq,
            ReasoningRole::Context => Terminator::Eot,
            ReasoningRole::Tail => Terminator::Eor,
        }
    }
}

/// What the decoder produces and which input prefix each unit may see.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodePlan {
    pub units: Vec<PlannedUnit>,
    pub answer: UnitTokens,
    pub position_ids: ReasoningIds,
}

impl DecodePlan {
    /// Teacher-forced plan replaying a layout's reasoning and answer tokens.
    pub fn forced(layout: &SegmentLayout, alignment: &AlignmentMap) -> Result<Self> {
        if alignment.len() != layout.reasoning().len() {
            return Err(Error::Alignment("alignment does not cover the reasoning stream".into()));
        }
        let units = layout
            .reasoning()
            .iter()
            .zip(&alignment.pairs)
            .map(|(u, &(index, visible))| PlannedUnit {
                index,
                visible_inputs: visible,
                role: ReasoningRole::of(u),
                tokens: UnitTokens::Forced(u.tokens.iter().map(|t| t.id).collect()),
            })
            .collect();
        Ok(Self {
            units,
            answer: UnitTokens::Forced(layout.answer().iter().map(|t| t.id).collect()),
            position_ids: ReasoningIds::RunningCounter,
        })
    }

    /// Sampled plan: question interpretation (if any), one unit per context
    /// sentence, then the depth tail and `answer_tokens` answer tokens.
    pub fn free_running(
        n_question: usize,
        n_context: usize,
        order: InputOrder,
        max_unit_tokens: usize,
        answer_tokens: usize,
    ) -> Self {
        let all = n_question + n_context;
        let mut roles = Vec::new();
        let q = (n_question > 0).then_some(ReasoningRole::Question);
        let ctx = (1..=n_context).map(|t| (ReasoningRole::Context, t));
        match order {
            InputOrder::QuestionFirst => {
                roles.extend(q.map(|r| (r, n_question)));
                roles.extend(ctx.map(|(r, t)| (r, n_question + t)));
            }
            InputOrder::ContextFirst => {
                roles.extend(ctx);
                roles.extend(q.map(|r| (r, all)));
            }
        }
        roles.push((ReasoningRole::Tail, all));
        let units = roles
            .into_iter()
            .enumerate()
            .map(|(k, (role, visible_inputs))| PlannedUnit {
                index: k + 1,
                visible_inputs,
                role,
                tokens: UnitTokens::Free { max_tokens: max_unit_tokens.max(1) },
            })
            .collect();
        Self { units, answer: UnitTokens::Free { max_tokens: answer_tokens }, position_ids: ReasoningIds::RunningCounter }
    }

    pub fn with_position_ids(mut self, scheme: ReasoningIds) -> Self {
        self.position_ids = scheme;
        self
    }
}

/// Virtual-time costs of the decoder and prefill roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeTiming {
    /// Decode tokens per second; `f64::INFINITY` for instantaneous decode.
    pub decode_rate: f64,
    /// Prefill tokens per second; `f64::INFINITY` for instantaneous prefill.
    pub prefill_rate: f64,
}

impl DecodeTiming {
    pub fn new(decode_rate: f64) -> Self {
        Self { decode_rate, prefill_rate: f64::INFINITY }
    }

    fn decode_cost(&self, tokens: usize) -> f64 {
        if tokens == 0 {
            0.0
        } else {
            tokens as f64 / self.decode_rate
        }
    }

    fn prefill_cost(&self, tokens: usize) -> f64 {
        tokens as f64 / self.prefill_rate
    }
}

/// Fault-injection hooks for testing the equivalence harness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeHooks {
    /// Widen every streaming unit's slice by this many input units.
    pub slice_unit_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Prefill,
    Merge,
    Decode,
    Split,
    Wait,
}

/// One line of the event log. `unit` is the input unit for prefill events
/// and the reasoning unit otherwise; the answer is logged as reasoning unit
/// `n + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub event: EventKind,
    pub unit: usize,
    pub tokens: usize,
}

/// Event log as line-delimited JSON.
pub fn events_to_jsonl(events: &[Event]) -> String {
    events.iter().map(|e| serde_json::to_string(e).expect("event serializes") + "\n").collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamingRun {
    /// Reasoning tokens fed to the target cache, in order.
    pub reasoning_tokens: Vec<u32>,
    pub answer_tokens: Vec<u32>,
    /// Logits of every prefilled input token, in arrival order.
    pub prefill_logits: Vec<Vec<f32>>,
    /// Logits of every fed reasoning and answer token.
    pub decode_logits: Vec<Vec<f32>>,
    pub events: Vec<Event>,
    pub first_answer_time: Option<f64>,
    pub last_arrival: f64,
    /// Position ids assigned to input, reasoning and answer tokens.
    pub position_ids: Vec<u32>,
}

impl StreamingRun {
    /// All rows in sequence order (input, reasoning, answer).
    pub fn logits(&self, vocab: usize) -> Logits {
        let rows = self.prefill_logits.len() + self.decode_logits.len();
        let data = self.prefill_logits.iter().chain(&self.decode_logits).flatten().copied().collect();
        Logits { rows, vocab, data }
    }

    /// Time from the last input arrival to the first answer token.
    pub fn first_answer_delay(&self) -> Option<f64> {
        self.first_answer_time.map(|t| t - self.last_arrival)
    }
}

/// Tracks grouped position ids as tokens are fed.
struct PositionCounter {
    scheme: ReasoningIds,
    input_next: u32,
    reasoning_next: u32,
    shared_max: Option<u32>,
}

impl PositionCounter {
    fn new(scheme: ReasoningIds) -> Self {
        Self { scheme, input_next: 0, reasoning_next: 0, shared_max: None }
    }

    fn input(&mut self, n: usize) -> Vec<u32> {
        let ids = (self.input_next..self.input_next + n as u32).collect();
        self.input_next += n as u32;
        ids
    }

    fn reasoning(&mut self, unit_start: u32) -> u32 {
        match self.scheme {
            ReasoningIds::RunningCounter => {
                self.reasoning_next += 1;
                self.reasoning_next - 1
            }
            ReasoningIds::SentenceShared => {
                self.shared_max = Some(self.shared_max.map_or(unit_start, |m| m.max(unit_start)));
                unit_start
            }
        }
    }

    fn answer(&mut self) -> u32 {
        if self.scheme == ReasoningIds::SentenceShared {
            self.reasoning_next = self.reasoning_next.max(self.shared_max.map_or(0, |m| m + 1));
            self.shared_max = None;
        }
        self.reasoning_next += 1;
        self.reasoning_next - 1
    }
}

/// Shared driver state between the event loop's decode stages.
struct UnitDecoder<'a> {
    weights: &'a ModelWeights,
    reserved: ReservedIds,
    sampler: &'a mut Sampler,
    positions: PositionCounter,
    run: StreamingRun,
    /// Logits of the last fed token; source of a sampled unit's first token.
    pending: Option<Vec<f32>>,
}

impl UnitDecoder<'_> {
    /// Feeds one unit's tokens through `feed`; returns the number fed.
    fn decode_unit(
        &mut self,
        tokens: &UnitTokens,
        terminator: Option<Terminator>,
        unit_start: Option<u32>,
        mut feed: impl FnMut(u32, u32) -> Result<Vec<f32>>,
    ) -> Result<Vec<u32>> {
        let term_id = terminator.map(|t| self.reserved.id(t.kind()).expect("terminator id"));
        let mut fed = Vec::new();
        let mut push = |me: &mut Self, tok: u32| -> Result<()> {
            let pos = match unit_start {
                Some(s) => me.positions.reasoning(s),
                None => me.positions.answer(),
            };
            me.run.position_ids.push(pos);
            let logits = feed(tok, pos)?;
            me.pending = Some(logits.clone());
            me.run.decode_logits.push(logits);
            fed.push(tok);
            Ok(())
        };
        match tokens {
            UnitTokens::Forced(ids) => {
                for &t in ids {
                    push(self, t)?;
                }
            }
            UnitTokens::Free { max_tokens } => {
                for step in 0..*max_tokens {
                    let row = self.pending.as_ref().ok_or(Error::CacheState("nothing to sample from".into()))?;
                    let mut tok = self.sampler.next_token(row)?;
                    let kind = self.reserved.kind_of(tok);
                    let last = step + 1 == *max_tokens;
                    if let Some(term) = term_id {
                        if kind.ends_reasoning_unit() || last {
                            tok = term;
                        }
                    }
                    push(self, tok)?;
                    if Some(tok) == term_id {
                        break;
                    }
                }
            }
        }
        Ok(fed)
    }
}

/// Streaming decode in virtual time: the prefill role consumes each input
/// unit when it arrives, the decode role starts reasoning unit `k` once the
/// source cache holds every input unit `k` may see (`N_EOS >= N_EOT + 1` in
/// the canonical case) and waits otherwise. After the streaming units the
/// depth tail and the answer decode over the full input.
///
/// Sampled units draw their first token from the logits of the most recently
/// fed token, or for the first unit from the last token of its visible input.
pub fn run_streaming_decode(
    weights: &ModelWeights,
    schedule: &ArrivalSchedule,
    plan: &DecodePlan,
    sampler: &mut Sampler,
    timing: DecodeTiming,
    reserved: ReservedIds,
) -> Result<StreamingRun> {
    run_streaming_decode_with_hooks(weights, schedule, plan, sampler, timing, reserved, DecodeHooks::default())
}

pub fn run_streaming_decode_with_hooks(
    weights: &ModelWeights,
    schedule: &ArrivalSchedule,
    plan: &DecodePlan,
    sampler: &mut Sampler,
    timing: DecodeTiming,
    reserved: ReservedIds,
    hooks: DecodeHooks,
) -> Result<StreamingRun> {
    let n_inputs = schedule.len();
    if n_inputs == 0 {
        return Err(Error::Layout("empty arrival schedule".into()));
    }
    for u in &plan.units {
        if u.visible_inputs > n_inputs || u.visible_inputs == 0 {
            return Err(Error::Deadlock { unit: u.index, needed: u.visible_inputs, available: n_inputs });
        }
    }
    let mut pc = Vec::with_capacity(n_inputs);
    let mut prev = 0.0f64;
    for (t, u) in &schedule.events {
        prev = prev.max(*t) + timing.prefill_cost(u.len());
        pc.push(prev);
    }

    let mut state = DualKvState::new(&weights.config, reserved);
    let mut events = Vec::new();
    let mut unit_last_logits: Vec<Vec<f32>> = Vec::new();
    let mut unit_starts: Vec<u32> = Vec::new();
    let mut dec = UnitDecoder {
        weights,
        reserved,
        sampler,
        positions: PositionCounter::new(plan.position_ids),
        run: StreamingRun {
            reasoning_tokens: Vec::new(),
            answer_tokens: Vec::new(),
            prefill_logits: Vec::new(),
            decode_logits: Vec::new(),
            events: Vec::new(),
            first_answer_time: None,
            last_arrival: schedule.last_arrival(),
            position_ids: Vec::new(),
        },
        pending: None,
    };
    let mut next_in = 0usize;
    let mut input_ids: Vec<u32> = Vec::new();
    let mut prefill_until = |time: f64,
                             state: &mut DualKvState,
                             dec: &mut UnitDecoder,
                             events: &mut Vec<Event>,
                             unit_last: &mut Vec<Vec<f32>>,
                             starts: &mut Vec<u32>|
     -> Result<()> {
        while next_in < n_inputs && pc[next_in] <= time {
            let unit = &schedule.events[next_in].1;
            starts.push(dec.positions.input_next);
            let ids = dec.positions.input(unit.len());
            let tokens: Vec<u32> = unit.tokens.iter().map(|t| t.id).collect();
            let rows = state.prefill_tokens(dec.weights, &tokens, &ids)?;
            input_ids.extend(&ids);
            unit_last.push(rows.last().cloned().unwrap_or_default());
            dec.run.prefill_logits.extend(rows);
            events.push(Event { t: pc[next_in], event: EventKind::Prefill, unit: next_in + 1, tokens: unit.len() });
            next_in += 1;
        }
        Ok(())
    };

    let mut t_dec = 0.0f64;
    let n_units = plan.units.len();
    let all_inputs_ready = pc[n_inputs - 1];
    for unit in &plan.units {
        let streaming = unit.role != ReasoningRole::Tail;
        let need = if streaming {
            (unit.visible_inputs + hooks.slice_unit_offset).min(n_inputs)
        } else {
            n_inputs
        };
        let ready = pc[need - 1];
        if ready > t_dec {
            events.push(Event { t: t_dec, event: EventKind::Wait, unit: unit.index, tokens: 0 });
        }
        let start = t_dec.max(ready);
        prefill_until(start, &mut state, &mut dec, &mut events, &mut unit_last_logits, &mut unit_starts)?;
        debug_assert!(state.n_eos_seen() >= need.min(state.prefilled_units()));
        if streaming && state.prefilled_units() < state.n_eot_done() + 1 {
            return Err(Error::CacheState(format!("gate closed for reasoning unit {}", unit.index)));
        }
        let slice = state.input_unit_ends()[need - 1];
        state.merge(slice)?;
        events.push(Event { t: start, event: EventKind::Merge, unit: unit.index, tokens: slice });
        if dec.pending.is_none() {
            dec.pending = Some(unit_last_logits[need - 1].clone());
        }
        let shared_start = unit_starts[unit.visible_inputs.min(n_inputs) - 1];
        let weights = dec.weights;
        let fed = {
            let st = &mut state;
            dec.decode_unit(&unit.tokens, Some(unit.terminator()), Some(shared_start), |tok, pos| {
                st.feed(weights, tok, pos)
            })?
        };
        if state.mode() == CacheMode::Merged {
            state.split()?;
        }
        let end = start + timing.decode_cost(fed.len());
        events.push(Event { t: start, event: EventKind::Decode, unit: unit.index, tokens: fed.len() });
        events.push(Event { t: end, event: EventKind::Split, unit: unit.index, tokens: state.output_cache.len() });
        dec.run.reasoning_tokens.extend(fed);
        t_dec = end;
    }

    let answer_len = match &plan.answer {
        UnitTokens::Forced(ids) => ids.len(),
        UnitTokens::Free { max_tokens } => *max_tokens,
    };
    if answer_len > 0 {
        let start = t_dec.max(all_inputs_ready);
        if all_inputs_ready > t_dec {
            events.push(Event { t: t_dec, event: EventKind::Wait, unit: n_units + 1, tokens: 0 });
        }
        prefill_until(start, &mut state, &mut dec, &mut events, &mut unit_last_logits, &mut unit_starts)?;
        let slice = state.input_cache.len();
        state.merge(slice)?;
        events.push(Event { t: start, event: EventKind::Merge, unit: n_units + 1, tokens: slice });
        if dec.pending.is_none() {
            dec.pending = unit_last_logits.last().cloned();
        }
        let weights = dec.weights;
        let fed = {
            let st = &mut state;
            dec.decode_unit(&plan.answer, None, None, |tok, pos| st.feed(weights, tok, pos))?
        };
        if state.mode() == CacheMode::Merged {
            state.split()?;
        }
        let end = start + timing.decode_cost(fed.len());
        dec.run.first_answer_time = Some(start + timing.decode_cost(1));
        events.push(Event { t: start, event: EventKind::Decode, unit: n_units + 1, tokens: fed.len() });
        events.push(Event { t: end, event: EventKind::Split, unit: n_units + 1, tokens: state.output_cache.len() });
        dec.run.answer_tokens = fed;
    }
    prefill_until(f64::INFINITY, &mut state, &mut dec, &mut events, &mut unit_last_logits, &mut unit_starts)?;

    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut run = dec.run;
    run.events = events;
    input_ids.append(&mut run.position_ids);
    run.position_ids = input_ids;
    Ok(run)
}

/// Same decode as [`run_streaming_decode`] with prefill and decode running
/// on two threads. The source cache sits behind a read-write lock (prefill
/// takes the write side per unit, each decode step reads its slice); the
/// gate counter is a mutex-guarded count with a condition variable. Produces
/// the same tokens and logits as the event-loop driver.
pub fn run_streaming_decode_concurrent(
    weights: &ModelWeights,
    schedule: &ArrivalSchedule,
    plan: &DecodePlan,
    sampler: &mut Sampler,
    reserved: ReservedIds,
) -> Result<StreamingRun> {
    let n_inputs = schedule.len();
    for u in &plan.units {
        if u.visible_inputs > n_inputs || u.visible_inputs == 0 {
            return Err(Error::Deadlock { unit: u.index, needed: u.visible_inputs, available: n_inputs });
        }
    }
    struct Source {
        cache: KvCache,
        ends: Vec<usize>,
        starts: Vec<u32>,
        last_logits: Vec<Vec<f32>>,
        rows: Vec<Vec<f32>>,
        ids: Vec<u32>,
    }
    let source = RwLock::new(Source {
        cache: KvCache::new(&weights.config),
        ends: Vec::new(),
        starts: Vec::new(),
        last_logits: Vec::new(),
        rows: Vec::new(),
        ids: Vec::new(),
    });
    // Number of input units fully prefilled, or an error from the producer.
    let gate: (Mutex<std::result::Result<usize, String>>, Condvar) = (Mutex::new(Ok(0)), Condvar::new());

    let wait_for = |need: usize| -> Result<()> {
        let (lock, cv) = &gate;
        let mut g = lock.lock().expect("gate lock");
        loop {
            match &*g {
                Err(e) => return Err(Error::CacheState(format!("prefill failed: {e}"))),
                Ok(n) if *n >= need => return Ok(()),
                Ok(_) => g = cv.wait(g).expect("gate wait"),
            }
        }
    };

    std::thread::scope(|scope| -> Result<StreamingRun> {
        scope.spawn(|| {
            let mut next_id = 0u32;
            for (k, (_, unit)) in schedule.events.iter().enumerate() {
                let mut src = source.write().expect("source lock");
                let start = next_id;
                let mut last = Vec::new();
                let mut res = Ok(());
                for t in &unit.tokens {
                    match feed_token(weights, t.id, next_id, None, &mut src.cache) {
                        Ok(l) => {
                            src.rows.push(l.clone());
                            src.ids.push(next_id);
                            last = l;
                        }
                        Err(e) => {
                            res = Err(e.to_string());
                            break;
                        }
                    }
                    next_id += 1;
                }
                let len = src.cache.len();
                src.ends.push(len);
                src.starts.push(start);
                src.last_logits.push(last);
                drop(src);
                let (lock, cv) = &gate;
                *lock.lock().expect("gate lock") = res.map(|_| k + 1);
                cv.notify_all();
            }
        });

        let mut target = KvCache::new(&weights.config);
        let mut dec = UnitDecoder {
            weights,
            reserved,
            sampler,
            positions: PositionCounter::new(plan.position_ids),
            run: StreamingRun {
                reasoning_tokens: Vec::new(),
                answer_tokens: Vec::new(),
                prefill_logits: Vec::new(),
                decode_logits: Vec::new(),
                events: Vec::new(),
                first_answer_time: None,
                last_arrival: schedule.last_arrival(),
                position_ids: Vec::new(),
            },
            pending: None,
        };
        let mut reasoning_ids = Vec::new();
        let decode_with = |dec: &mut UnitDecoder,
                           target: &mut KvCache,
                           need: usize,
                           tokens: &UnitTokens,
                           term: Option<Terminator>,
                           shared: bool|
         -> Result<Vec<u32>> {
            wait_for(need)?;
            let (slice, start, first) = {
                let src = source.read().expect("source lock");
                (src.ends[need - 1], src.starts[need - 1], src.last_logits[need - 1].clone())
            };
            if dec.pending.is_none() {
                dec.pending = Some(first);
            }
            dec.decode_unit(tokens, term, shared.then_some(start), |tok, pos| {
                let src = source.read().expect("source lock");
                feed_token(weights, tok, pos, Some((&src.cache, slice)), target)
            })
        };
        for unit in &plan.units {
            let fed =
                decode_with(&mut dec, &mut target, unit.visible_inputs, &unit.tokens, Some(unit.terminator()), true)?;
            reasoning_ids.extend(fed);
        }
        let has_answer = !matches!(&plan.answer, UnitTokens::Forced(v) if v.is_empty())
            && !matches!(&plan.answer, UnitTokens::Free { max_tokens: 0 });
        if has_answer {
            dec.run.answer_tokens = decode_with(&mut dec, &mut target, n_inputs, &plan.answer, None, false)?;
        }
        wait_for(n_inputs)?;
        let mut run = dec.run;
        run.reasoning_tokens = reasoning_ids;
        let src = source.read().expect("source lock");
        run.prefill_logits = src.rows.clone();
        let decode_ids = std::mem::take(&mut run.position_ids);
        run.position_ids = src.ids.iter().copied().chain(decode_ids).collect();
        Ok(run)
    })
}

/// Single forward pass over input ++ reasoning ++ answer under the segment
/// streaming mask and grouped positions.
pub fn batch_oracle_forward(
    weights: &ModelWeights,
    layout: &SegmentLayout,
    alignment: &AlignmentMap,
    scheme: ReasoningIds,
) -> Result<Logits> {
    let tokens: Vec<u32> = layout.full_sequence().iter().map(|t| t.id).collect();
    let mask = streaming_mask_segment(layout, alignment)?;
    let positions = grouped_positions_with(layout, alignment, scheme)?;
    forward(&tokens, &mask, &positions, weights)
}

/// Teacher-forced streaming decode of `layout` compared against the batch
/// oracle; returns the max-abs logit deviation over all rows.
pub fn equivalence_deviation(
    weights: &ModelWeights,
    layout: &SegmentLayout,
    reserved: ReservedIds,
    timing: DecodeTiming,
    hooks: DecodeHooks,
) -> Result<f32> {
    let alignment = build_alignment(layout)?;
    let oracle = batch_oracle_forward(weights, layout, &alignment, ReasoningIds::RunningCounter)?;
    let plan = DecodePlan::forced(layout, &alignment)?;
    let schedule = ArrivalSchedule::from_layout(layout, 4.0);
    let mut sampler = Sampler::new(crate::model::SamplerConfig::greedy());
    let run = run_streaming_decode_with_hooks(weights, &schedule, &plan, &mut sampler, timing, reserved, hooks)?;
    let logits = run.logits(weights.vocab_size());
    if logits.rows != oracle.rows {
        return Err(Error::Shape(format!("{} streamed rows vs {} oracle rows", logits.rows, oracle.rows)));
    }
    Ok(logits.max_abs_diff(&oracle))
}
