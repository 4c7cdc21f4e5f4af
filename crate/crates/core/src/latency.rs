//! Virtual-time latency model for batch, interleaved and streaming thinking.
//!
//! Token counts are real-valued so that dataset averages can be replayed
//! directly. Input arrives as a steady token stream; the first-answer delay
//! is measured from the moment the last input token would arrive with no
//! pausing (`T_in`), for every paradigm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{ArrivalSchedule, EventKind};
use crate::layout::{build_alignment, DepthLevel, ReasoningRole, SegmentLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArrivalModel {
    pub words_per_minute: f64,
    pub tokens_per_word: f64,
}

impl Default for ArrivalModel {
    fn default() -> Self {
        Self { words_per_minute: 150.0, tokens_per_word: 1.3 }
    }
}

impl ArrivalModel {
    pub fn tokens_per_second(&self) -> f64 {
        self.words_per_minute * self.tokens_per_word / 60.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.words_per_minute > 0.0 && self.tokens_per_word > 0.0) {
            return Err(Error::Config("arrival rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeModel {
    pub tokens_per_second: f64,
    /// Prefill throughput; absent means prefill is instantaneous.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_tokens_per_second: Option<f64>,
}

impl DecodeModel {
    pub fn new(tokens_per_second: f64) -> Self {
        Self { tokens_per_second, prefill_tokens_per_second: None }
    }

    /// Rate reproducing `delay_s` when `tokens` are decoded up to and
    /// including the first answer token.
    pub fn fit(tokens: f64, delay_s: f64) -> Result<Self> {
        if !(tokens > 0.0 && delay_s > 0.0) {
            return Err(Error::Config("decode fit needs positive tokens and delay".into()));
        }
        Ok(Self::new(tokens / delay_s))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tokens_per_second > 0.0) || self.prefill_tokens_per_second.is_some_and(|p| !(p > 0.0)) {
            return Err(Error::Config("decode rates must be positive".into()));
        }
        Ok(())
    }

    fn prefill_cost(&self, tokens: f64) -> f64 {
        self.prefill_tokens_per_second.map_or(0.0, |p| tokens / p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Batch,
    Interleaved,
    Streaming,
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(Paradigm::Batch),
            "interleaved" => Ok(Paradigm::Interleaved),
            "streaming" => Ok(Paradigm::Streaming),
            other => Err(Error::Config(format!("unknown paradigm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParadigmKind {
    pub kind: Paradigm,
    pub depth: DepthLevel,
}

impl ParadigmKind {
    pub fn new(kind: Paradigm, depth: DepthLevel) -> Self {
        Self { kind, depth }
    }

    pub fn label(&self) -> String {
        match self.kind {
            Paradigm::Batch => "Batch".to_string(),
            Paradigm::Interleaved => format!("Interleaved, {}", self.depth.label()),
            Paradigm::Streaming => format!("Streaming, {}", self.depth.label()),
        }
    }
}

/// When the interleaved paradigm lets the next input unit in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterleavedMode {
    /// The next unit's arrival clock starts once the current reasoning ends.
    #[default]
    Strict,
    /// Arrival continues; processing of the next unit blocks on reasoning.
    BlockingProcessing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub arrival: ArrivalModel,
    pub decode: DecodeModel,
    #[serde(default)]
    pub interleaved: InterleavedMode,
}

impl SimulationConfig {
    pub fn new(arrival: ArrivalModel, decode: DecodeModel) -> Self {
        Self { arrival, decode, interleaved: InterleavedMode::Strict }
    }
}

/// Reasoning decoded for the inputs up to `visible_inputs` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReasoningSpan {
    pub tokens: f64,
    pub visible_inputs: usize,
}

/// Post-reading reasoning tokens per depth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TailTokens {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl TailTokens {
    pub fn uniform(tokens: f64) -> Self {
        Self { d1: tokens, d2: tokens, d3: tokens }
    }

    pub fn get(&self, depth: DepthLevel) -> f64 {
        match depth {
            DepthLevel::DirectAnswer => self.d1,
            DepthLevel::GlobalThinking => self.d2,
            DepthLevel::GlobalReflection => self.d3,
        }
    }
}

/// Token counts driving the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    /// Input unit lengths in arrival order.
    pub input_units: Vec<f64>,
    /// Streaming reasoning units with their visible input prefix.
    pub reasoning: Vec<ReasoningSpan>,
    pub tail: TailTokens,
    pub answer_tokens: f64,
    /// Pre-answer tokens of the batch baseline when it differs from the
    /// streaming trace (e.g. an unmodified model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_reasoning_tokens: Option<f64>,
}

impl LatencyProfile {
    /// Profile of a session layout. Unit lengths include boundary tokens;
    /// the layout's single depth tail stands in for every depth.
    pub fn from_layout(layout: &SegmentLayout) -> Result<Self> {
        let alignment = build_alignment(layout)?;
        let mut reasoning = Vec::new();
        let mut tail = 0.0;
        for (u, &(_, visible)) in layout.reasoning().iter().zip(&alignment.pairs) {
            if ReasoningRole::of(u) == ReasoningRole::Tail {
                tail = u.len() as f64;
            } else {
                reasoning.push(ReasoningSpan { tokens: u.len() as f64, visible_inputs: visible });
            }
        }
        let profile = Self {
            input_units: layout.input_unit_lens().into_iter().map(|l| l as f64).collect(),
            reasoning,
            tail: TailTokens::uniform(tail),
            answer_tokens: layout.answer().len().max(1) as f64,
            batch_reasoning_tokens: None,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_units.is_empty() {
            return Err(Error::CountMismatch("profile has no input units".into()));
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !self.input_units.iter().all(|u| u.is_finite() && *u > 0.0) {
            return Err(Error::CountMismatch("input unit lengths must be positive".into()));
        }
        let n = self.input_units.len();
        let mut prev = 1;
        for (k, s) in self.reasoning.iter().enumerate() {
            if !finite_nonneg(s.tokens) {
                return Err(Error::CountMismatch(format!("reasoning unit {} has invalid length", k + 1)));
            }
            if s.visible_inputs == 0 || s.visible_inputs > n || s.visible_inputs < prev {
                return Err(Error::CountMismatch(format!(
                    "reasoning unit {} sees input {} of {n}",
                    k + 1,
                    s.visible_inputs
                )));
            }
            prev = s.visible_inputs;
        }
        let tails = [self.tail.d1, self.tail.d2, self.tail.d3];
        if !tails.iter().all(|t| finite_nonneg(*t))
            || !(self.answer_tokens >= 1.0 && self.answer_tokens.is_finite())
            || self.batch_reasoning_tokens.is_some_and(|b| !finite_nonneg(b))
        {
            return Err(Error::CountMismatch("tail, answer or batch counts invalid".into()));
        }
        Ok(())
    }

    pub fn total_input_tokens(&self) -> f64 {
        self.input_units.iter().sum()
    }

    pub fn streaming_reasoning_tokens(&self) -> f64 {
        self.reasoning.iter().map(|s| s.tokens).sum()
    }

    fn batch_pre_answer(&self, depth: DepthLevel) -> f64 {
        self.batch_reasoning_tokens.unwrap_or_else(|| self.streaming_reasoning_tokens() + self.tail.get(depth))
    }
}

/// A simulator timeline entry; `tokens` is real-valued.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub t: f64,
    pub event: EventKind,
    pub unit: usize,
    pub tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub paradigm: ParadigmKind,
    pub ttft_tokens: f64,
    pub first_answer_delay_s: f64,
    pub first_answer_time_s: f64,
    pub input_end_s: f64,
    pub timeline: Vec<TimelineEvent>,
}

/// Input tokens observed before reasoning may begin.
pub fn ttft_tokens(profile: &LatencyProfile, paradigm: Paradigm) -> Result<f64> {
    profile.validate()?;
    Ok(match paradigm {
        Paradigm::Batch => profile.total_input_tokens(),
        Paradigm::Interleaved | Paradigm::Streaming => {
            let upto = profile.reasoning.first().map_or(profile.input_units.len(), |s| s.visible_inputs);
            profile.input_units[..upto].iter().sum()
        }
    })
}

/// Natural arrival end time of each input unit.
fn arrival_ends(profile: &LatencyProfile, rate: f64) -> Vec<f64> {
    profile
        .input_units
        .iter()
        .scan(0.0, |acc, u| {
            *acc += u / rate;
            Some(*acc)
        })
        .collect()
}

/// Prefill completion times for units arriving at `ends`.
fn prefill_completions(profile: &LatencyProfile, ends: &[f64], decode: &DecodeModel) -> Vec<f64> {
    let mut prev = 0.0f64;
    ends.iter()
        .zip(&profile.input_units)
        .map(|(a, u)| {
            prev = prev.max(*a) + decode.prefill_cost(*u);
            prev
        })
        .collect()
}

pub fn simulate(profile: &LatencyProfile, paradigm: ParadigmKind, config: &SimulationConfig) -> Result<LatencyReport> {
    profile.validate()?;
    config.arrival.validate()?;
    config.decode.validate()?;
    let rate = config.arrival.tokens_per_second();
    let d = config.decode.tokens_per_second;
    let n = profile.input_units.len();
    let ends = arrival_ends(profile, rate);
    let t_in = ends[n - 1];
    let tail = profile.tail.get(paradigm.depth);
    let mut timeline = Vec::new();
    let mut push = |t: f64, event: EventKind, unit: usize, tokens: f64| {
        timeline.push(TimelineEvent { t, event, unit, tokens });
    };
    let answer_unit = profile.reasoning.len() + 2;
    let tail_unit = profile.reasoning.len() + 1;

    let answer_start = match paradigm.kind {
        Paradigm::Batch => {
            let pc = prefill_completions(profile, &ends, &config.decode);
            for (k, t) in pc.iter().enumerate() {
                push(*t, EventKind::Prefill, k + 1, profile.input_units[k]);
            }
            let start = pc[n - 1];
            let pre = profile.batch_pre_answer(paradigm.depth);
            push(start, EventKind::Decode, 1, pre);
            start + pre / d
        }
        Paradigm::Interleaved => {
            let mut t = 0.0f64;
            let mut spans = profile.reasoning.iter().enumerate().peekable();
            for k in 0..n {
                let u = profile.input_units[k];
                t = match config.interleaved {
                    InterleavedMode::Strict => t + u / rate,
                    InterleavedMode::BlockingProcessing => t.max(ends[k]),
                } + config.decode.prefill_cost(u);
                push(t, EventKind::Prefill, k + 1, u);
                while let Some((j, s)) = spans.next_if(|(_, s)| s.visible_inputs == k + 1) {
                    push(t, EventKind::Decode, j + 1, s.tokens);
                    t += s.tokens / d;
                }
            }
            push(t, EventKind::Decode, tail_unit, tail);
            t + tail / d
        }
        Paradigm::Streaming => {
            let pc = prefill_completions(profile, &ends, &config.decode);
            for (k, t) in pc.iter().enumerate() {
                push(*t, EventKind::Prefill, k + 1, profile.input_units[k]);
            }
            let mut t = 0.0f64;
            for (j, s) in profile.reasoning.iter().enumerate() {
                let ready = pc[s.visible_inputs - 1];
                if ready > t {
                    push(t, EventKind::Wait, j + 1, 0.0);
                }
                t = t.max(ready);
                push(t, EventKind::Decode, j + 1, s.tokens);
                t += s.tokens / d;
            }
            let ready = pc[n - 1];
            if ready > t {
                push(t, EventKind::Wait, tail_unit, 0.0);
            }
            t = t.max(ready);
            push(t, EventKind::Decode, tail_unit, tail);
            t + tail / d
        }
    };
    push(answer_start, EventKind::Decode, answer_unit, profile.answer_tokens);
    let first = answer_start + 1.0 / d;
    timeline.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(LatencyReport {
        paradigm,
        ttft_tokens: ttft_tokens(profile, paradigm.kind)?,
        first_answer_delay_s: first - t_in,
        first_answer_time_s: first,
        input_end_s: t_in,
        timeline,
    })
}

/// Arrival schedule matching the simulator's arrival model, for driving the
/// streaming decode engine with the same clock.
pub fn coupled_schedule(layout: &SegmentLayout, arrival: &ArrivalModel) -> ArrivalSchedule {
    ArrivalSchedule::from_layout(layout, arrival.tokens_per_second())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub report: LatencyReport,
    /// Percent reduction relative to the batch row, when one is present.
    pub ttft_reduction_pct: Option<f64>,
    pub delay_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn reduction_pct(baseline: f64, value: f64) -> f64 {
    100.0 * (1.0 - value / baseline)
}

pub fn compare(profile: &LatencyProfile, paradigms: &[ParadigmKind], config: &SimulationConfig) -> Result<Comparison> {
    if paradigms.len() < 2 {
        return Err(Error::Config("comparison needs at least two paradigms".into()));
    }
    let reports = paradigms.iter().map(|p| simulate(profile, *p, config)).collect::<Result<Vec<_>>>()?;
    let base = reports.iter().find(|r| r.paradigm.kind == Paradigm::Batch).cloned();
    let rows = reports
        .into_iter()
        .map(|r| ComparisonRow {
            label: r.paradigm.label(),
            ttft_reduction_pct: base.as_ref().map(|b| reduction_pct(b.ttft_tokens, r.ttft_tokens)),
            delay_reduction_pct: base.as_ref().map(|b| reduction_pct(b.first_answer_delay_s, r.first_answer_delay_s)),
            report: r,
        })
        .collect();
    Ok(Comparison { rows })
}

/// Batch, then interleaved and streaming at every depth.
pub fn standard_paradigms() -> Vec<ParadigmKind> {
    let mut v = vec![ParadigmKind::new(Paradigm::Batch, DepthLevel::GlobalReflection)];
    for kind in [Paradigm::Interleaved, Paradigm::Streaming] {
        v.extend(DepthLevel::ALL.iter().map(|d| ParadigmKind::new(kind, *d)));
    }
    v
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let pct = |p: Option<f64>| p.map_or("-".to_string(), |v| format!("{v:.1}%"));
        let mut out = String::from("| Method | TTFT | Delay (s) | TTFT reduction | Delay reduction |\n");
        out.push_str("|---|---:|---:|---:|---:|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {} | {} |\n",
                r.label,
                r.report.ttft_tokens,
                r.report.first_answer_delay_s,
                pct(r.ttft_reduction_pct),
                pct(r.delay_reduction_pct)
            ));
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}
