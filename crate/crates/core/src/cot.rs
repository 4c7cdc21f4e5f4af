//! Streaming CoT quality: granularity, sequential consistency, Pass@2
//! filtering, depth intervention prompts and similarity maps.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    build_alignment, fnv1a64, AlignmentMap, DepthLevel, InputOrder, ReasoningRole, SegmentLayout, SentenceUnit,
    Terminator, Token, TokenKind, WordTokenizer,
};

pub const D1_TEMPLATE: &str = include_str!("../templates/d1.txt");
pub const D2_TEMPLATE: &str = include_str!("../templates/d2.txt");
pub const D3_GLOBAL_TEMPLATE: &str = include_str!("../templates/d3_global.txt");
pub const D3_REFLECTION_TEMPLATE: &str = include_str!("../templates/d3_reflection.txt");
pub const GENERATION_TEMPLATE: &str = include_str!("../templates/generation_instruct.txt");
pub const TEACHER_TEMPLATE: &str = include_str!("../templates/teacher_reconstruction.txt");

const SKIP_TEXT: &str = "<Skip>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityThresholds {
    pub granularity_target: f64,
    pub granularity_tolerance: f64,
    pub consistency_min: f64,
    /// Score `<Skip>` units against their input sentence.
    pub include_skip: bool,
    /// Score the question interpretation against the question.
    pub include_question: bool,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            granularity_target: 1.0,
            granularity_tolerance: 0.0,
            consistency_min: 0.5,
            include_skip: false,
            include_question: false,
        }
    }
}

impl QualityThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.consistency_min) {
            return Err(Error::Config(format!("consistency_min {} outside [-1, 1]", self.consistency_min)));
        }
        if !(self.granularity_tolerance >= 0.0) {
            return Err(Error::Config("granularity_tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `count(<EOS>) / count(<EOT>)`.
pub fn granularity_score(layout: &SegmentLayout) -> Result<f64> {
    let eot = layout.count_reasoning(TokenKind::Eot);
    if eot == 0 {
        return Err(Error::NoEot);
    }
    Ok(layout.count_input(TokenKind::Eos) as f64 / eot as f64)
}

/// Reasoning text for one or more units mapped to the same input unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapsedSegment {
    /// Arrival index of the paired input unit; for the question, its last unit.
    pub input_unit: usize,
    pub reasoning_units: Vec<usize>,
    pub text: String,
    pub skip: bool,
    pub question: bool,
}

fn unit_text(u: &SentenceUnit) -> String {
    if u.is_skip() {
        SKIP_TEXT.to_string()
    } else if u.text.is_empty() {
        u.content_text().trim().to_string()
    } else {
        u.text.clone()
    }
}

fn question_anchor(layout: &SegmentLayout) -> usize {
    match layout.order {
        InputOrder::QuestionFirst => layout.question_units.len(),
        InputOrder::ContextFirst => layout.input_unit_count(),
    }
}

/// Concatenates reasoning units mapped to the same input unit, in order.
/// The depth tail is not paired with any input unit and is left out.
pub fn collapse_reasoning_segments(layout: &SegmentLayout, alignment: &AlignmentMap) -> Result<Vec<CollapsedSegment>> {
    if alignment.len() != layout.reasoning().len() {
        return Err(Error::Alignment("alignment does not cover the reasoning stream".into()));
    }
    let mut out: Vec<CollapsedSegment> = Vec::new();
    for (u, &(r, v)) in layout.reasoning().iter().zip(&alignment.pairs) {
        let role = ReasoningRole::of(u);
        if role == ReasoningRole::Tail {
            continue;
        }
        let question = role == ReasoningRole::Question;
        let target = if question { question_anchor(layout) } else { v };
        let text = unit_text(u);
        match out.iter_mut().find(|s| s.input_unit == target && s.question == question) {
            Some(seg) => {
                seg.text.push(' ');
                seg.text.push_str(&text);
                seg.reasoning_units.push(r);
                seg.skip &= u.is_skip();
            }
            None => out.push(CollapsedSegment {
                input_unit: target,
                reasoning_units: vec![r],
                text,
                skip: u.is_skip(),
                question,
            }),
        }
    }
    Ok(out)
}

/// Pairs the k-th `<EOT>` unit with the k-th context sentence and the
/// question interpretation with the question, clamping where counts differ.
/// Used when boundary counts disagree and the structural alignment fails.
pub fn positional_alignment(layout: &SegmentLayout) -> Result<AlignmentMap> {
    let n_q = layout.question_units.len();
    let n_c = layout.context_units.len();
    let all = n_q + n_c;
    if all == 0 {
        return Err(Error::Layout("no input units".into()));
    }
    let mut pairs = Vec::new();
    let mut ctx = 0;
    let mut prev = 1;
    for (k, u) in layout.reasoning().iter().enumerate() {
        let v = match ReasoningRole::of(u) {
            ReasoningRole::Context => {
                ctx += 1;
                let t = ctx.min(n_c.max(1));
                match layout.order {
                    InputOrder::QuestionFirst => (n_q + t).min(all),
                    InputOrder::ContextFirst => t.min(all),
                }
            }
            ReasoningRole::Question => match layout.order {
                InputOrder::QuestionFirst => n_q.max(1),
                InputOrder::ContextFirst => all,
            },
            ReasoningRole::Tail => all,
        };
        prev = v.max(prev);
        pairs.push((k + 1, prev));
    }
    AlignmentMap::from_pairs(pairs, all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteService,
    LocalDeterministic,
}

/// Maps texts to unit-norm vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
    fn kind(&self) -> ProviderKind;
}

fn normalize(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Remote("embedding has zero or non-finite norm".into()));
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), got: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Hashed word unigram and bigram counts, unit-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalEmbedding {
    pub dim: usize,
}

impl Default for LocalEmbedding {
    fn default() -> Self {
        Self { dim: 4096 }
    }
}

impl LocalEmbedding {
    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        let mut v = vec![0.0f32; self.dim];
        let mut bump = |key: &str| v[(fnv1a64(key.as_bytes()) % self.dim as u64) as usize] += 1.0;
        if words.is_empty() {
            bump(text.trim());
        }
        for w in &words {
            bump(&format!("1:{w}"));
        }
        for pair in words.windows(2) {
            bump(&format!("2:{} {}", pair[0], pair[1]));
        }
        normalize(&mut v).expect("nonzero count vector");
        v
    }
}

impl EmbeddingProvider for LocalEmbedding {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::LocalDeterministic
    }
}

/// Endpoint settings shared by the HTTP clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), timeout_ms: default_timeout_ms(), retries: default_retries() }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.timeout_ms)))
            .build()
            .into()
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}/{}", self.base_url.trim_end_matches('/'), path);
        let agent = self.agent();
        let mut last = String::new();
        for _ in 0..=self.retries {
            match agent.post(&url).send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<Resp>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("{url}: bad response: {e}"),
                },
                Err(e) => last = format!("{url}: {e}"),
            }
        }
        Err(Error::Remote(format!("{last} (after {} attempts)", self.retries + 1)))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// `POST {base}/embed` with `{"texts": [...]}` returning `{"vectors": [[...]]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEmbedding {
    pub config: RemoteConfig,
}

impl EmbeddingProvider for RemoteEmbedding {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let resp: EmbedResponse = self.config.post("embed", &EmbedRequest { texts })?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Remote(format!("{} vectors for {} texts", resp.vectors.len(), texts.len())));
        }
        resp.vectors
            .into_iter()
            .map(|mut v| {
                normalize(&mut v)?;
                Ok(v)
            })
            .collect()
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::RemoteService
    }
}

/// Cosine similarity per (input, reasoning) text pair. Provider failures
/// carry the 1-based pair index.
pub fn consistency_scores(inputs: &[String], segments: &[String], provider: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    if inputs.len() != segments.len() {
        return Err(Error::CountMismatch(format!("{} input units vs {} reasoning segments", inputs.len(), segments.len())));
    }
    inputs
        .iter()
        .zip(segments)
        .enumerate()
        .map(|(k, (a, b))| {
            let wrap = |e: Error| Error::Provider { unit: k + 1, message: e.to_string() };
            let v = provider.embed(&[a.clone(), b.clone()]).map_err(wrap)?;
            if v.len() != 2 {
                return Err(wrap(Error::Remote("wrong vector count".into())));
            }
            cosine(&v[0], &v[1]).map_err(wrap)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub granularity: f64,
    /// Scores of the scored pairs, aligned with `scored_units`.
    pub per_unit_consistency: Vec<f64>,
    /// Input unit (arrival index) of each scored pair.
    pub scored_units: Vec<usize>,
    /// Paired but left out of scoring (question pair, skip units).
    pub excluded_units: Vec<usize>,
    /// Input units without any reasoning segment.
    pub missing_units: Vec<usize>,
    pub mean_consistency: Option<f64>,
    pub pass: bool,
    pub failures: Vec<usize>,
    pub thresholds: QualityThresholds,
}

/// Scores a reasoning trace. Uses the structural alignment when boundary
/// counts agree and [`positional_alignment`] otherwise.
pub fn evaluate(
    layout: &SegmentLayout,
    thresholds: &QualityThresholds,
    provider: &dyn EmbeddingProvider,
) -> Result<QualityReport> {
    thresholds.validate()?;
    let granularity = granularity_score(layout)?;
    let alignment = match build_alignment(layout) {
        Ok(a) => a,
        Err(Error::BoundaryMismatch { .. }) => positional_alignment(layout)?,
        Err(e) => return Err(e),
    };
    let segments = collapse_reasoning_segments(layout, &alignment)?;

    // Input side: the question (merged) and each context sentence.
    let mut entries: Vec<(usize, String, bool)> = Vec::new();
    if !layout.question_units.is_empty() {
        let text = layout.question_units.iter().map(unit_text).collect::<Vec<_>>().join(" ");
        entries.push((question_anchor(layout), text, true));
    }
    let offset = match layout.order {
        InputOrder::QuestionFirst => layout.question_units.len(),
        InputOrder::ContextFirst => 0,
    };
    for (k, u) in layout.context_units.iter().enumerate() {
        entries.push((offset + k + 1, unit_text(u), false));
    }
    entries.sort_by_key(|e| (e.0, !e.2));

    let mut inputs = Vec::new();
    let mut reasoning = Vec::new();
    let mut scored_units = Vec::new();
    let mut excluded_units = Vec::new();
    let mut missing_units = Vec::new();
    for (unit, text, question) in &entries {
        match segments.iter().find(|s| s.input_unit == *unit && s.question == *question) {
            None => missing_units.push(*unit),
            Some(s) if (s.question && !thresholds.include_question) || (s.skip && !thresholds.include_skip) => {
                excluded_units.push(*unit)
            }
            Some(s) => {
                inputs.push(text.clone());
                reasoning.push(s.text.clone());
                scored_units.push(*unit);
            }
        }
    }
    let scores = consistency_scores(&inputs, &reasoning, provider)?;
    let mut failures: Vec<usize> = scored_units
        .iter()
        .zip(&scores)
        .filter(|(_, s)| **s < thresholds.consistency_min)
        .map(|(u, _)| *u)
        .chain(missing_units.iter().copied())
        .collect();
    failures.sort_unstable();
    let mean_consistency = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    let pass =
        (granularity - thresholds.granularity_target).abs() <= thresholds.granularity_tolerance && failures.is_empty();
    Ok(QualityReport {
        granularity,
        per_unit_consistency: scores,
        scored_units,
        excluded_units,
        missing_units,
        mean_consistency,
        pass,
        failures,
        thresholds: *thresholds,
    })
}

/// Scores many traces with at most `max_concurrency` provider calls in flight.
pub fn evaluate_many(
    layouts: &[SegmentLayout],
    thresholds: &QualityThresholds,
    provider: &dyn EmbeddingProvider,
    max_concurrency: usize,
) -> Vec<Result<QualityReport>> {
    let width = max_concurrency.max(1);
    let mut out = Vec::with_capacity(layouts.len());
    for chunk in layouts.chunks(width) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|l| s.spawn(move || evaluate(l, thresholds, provider))).collect();
            handles.into_iter().map(|h| h.join().expect("scoring thread")).collect()
        });
        out.extend(results);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationAttempt {
    pub attempt_index: usize,
    pub trace: SegmentLayout,
    pub report: QualityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub attempt_index: usize,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The error came from a remote service.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub remote_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum FilterOutcome {
    Accepted { attempt: Box<GenerationAttempt> },
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub outcome: FilterOutcome,
    pub calls: usize,
    pub history: Vec<AttemptLog>,
}

/// Accepts the first passing attempt, regenerating once. A callback error
/// counts as a failed attempt. The callback is never invoked a third time.
pub fn pass_at_2_filter(mut generate: impl FnMut(usize) -> Result<GenerationAttempt>) -> FilterResult {
    let mut history = Vec::new();
    for attempt_index in 1..=2 {
        match generate(attempt_index) {
            Ok(a) if a.report.pass => {
                history.push(AttemptLog { attempt_index, passed: true, error: None, remote_failure: false });
                return FilterResult {
                    outcome: FilterOutcome::Accepted { attempt: Box::new(a) },
                    calls: attempt_index,
                    history,
                };
            }
            Ok(_) => history.push(AttemptLog { attempt_index, passed: false, error: None, remote_failure: false }),
            Err(e) => history.push(AttemptLog {
                attempt_index,
                passed: false,
                remote_failure: e.is_remote(),
                error: Some(e.to_string()),
            }),
        }
    }
    FilterResult { outcome: FilterOutcome::Discarded, calls: 2, history }
}

/// Replaces every `{key}` with its value.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    values.iter().fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

/// Question text closed with `<EOQ>` and context sentences closed with
/// `<EOS>`, as presented to a generator.
pub fn marked_input(layout: &SegmentLayout) -> (String, String) {
    let join = |units: &[SentenceUnit], marker: &str| {
        units.iter().map(|u| format!("{}{marker}", u.text)).collect::<Vec<_>>().join(" ")
    };
    (join(&layout.question_units, "<EOQ>"), join(&layout.context_units, "<EOS>"))
}

pub fn generation_prompt(layout: &SegmentLayout, example: &str) -> String {
    let (q, c) = marked_input(layout);
    fill_template(GENERATION_TEMPLATE, &[("question", &q), ("context", &c), ("example", example)])
}

pub fn teacher_prompt(layout: &SegmentLayout, example: &str, reasoning: &str) -> String {
    let (q, c) = marked_input(layout);
    fill_template(TEACHER_TEMPLATE, &[("question", &q), ("context", &c), ("example", example), ("reasoning", reasoning)])
}

/// Streaming units of a trace with their boundary markers, tail excluded.
pub fn streaming_content(layout: &SegmentLayout) -> String {
    layout
        .reasoning()
        .iter()
        .filter(|u| ReasoningRole::of(u) != ReasoningRole::Tail)
        .map(|u| format!("{}{}", unit_text(u), u.terminator.kind().marker().unwrap()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// The depth tail's text, if the trace has one.
pub fn global_content(layout: &SegmentLayout) -> Option<String> {
    layout.reasoning().iter().find(|u| ReasoningRole::of(u) == ReasoningRole::Tail).map(unit_text)
}

/// Chat prompt steering the transition from streaming thoughts to the
/// answer at `depth`. D3 needs the global thinking content.
pub fn depth_intervention(input: &str, content: &str, depth: DepthLevel, global: Option<&str>) -> Result<String> {
    let head = format!("<|im_start|>user\n{input}<|im_end|>\n<|im_start|>assistant\n<think>{content}");
    Ok(match depth {
        DepthLevel::DirectAnswer => format!("{head}. {D1_TEMPLATE}"),
        DepthLevel::GlobalThinking => format!("{head}. {D2_TEMPLATE}"),
        DepthLevel::GlobalReflection => {
            let g = global.filter(|g| !g.trim().is_empty()).ok_or(Error::MissingGlobalContent("D3"))?;
            format!("{head}{D3_GLOBAL_TEMPLATE} {g}. {D3_REFLECTION_TEMPLATE}")
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    /// Arrival index of each input unit (rows).
    pub input_units: Vec<usize>,
    /// Input unit each collapsed segment is paired with (columns).
    pub segment_units: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

/// Cosine similarity of every input unit against every collapsed segment.
pub fn similarity_map(
    layout: &SegmentLayout,
    alignment: &AlignmentMap,
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityMap> {
    let segments = collapse_reasoning_segments(layout, alignment)?;
    let inputs: Vec<String> = layout.input_units().into_iter().map(unit_text).collect();
    let texts: Vec<String> = inputs.iter().cloned().chain(segments.iter().map(|s| s.text.clone())).collect();
    let vectors = provider.embed(&texts).map_err(|e| Error::Provider { unit: 0, message: e.to_string() })?;
    let (iv, sv) = vectors.split_at(inputs.len());
    let values =
        iv.iter().map(|a| sv.iter().map(|b| cosine(a, b)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    Ok(SimilarityMap {
        input_units: (1..=inputs.len()).collect(),
        segment_units: segments.iter().map(|s| s.input_unit).collect(),
        values,
    })
}

/// Text generator behind the pipeline.
pub trait Generator {
    fn generate(&mut self, prompt: &str, params: &serde_json::Value) -> Result<String>;
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    params: &'a serde_json::Value,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// `POST {base}/generate` with `{"prompt", "params"}` returning `{"text"}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteGenerator {
    pub config: RemoteConfig,
}

impl Generator for RemoteGenerator {
    fn generate(&mut self, prompt: &str, params: &serde_json::Value) -> Result<String> {
        let r: GenerateResponse = self.config.post("generate", &GenerateRequest { prompt, params })?;
        Ok(r.text)
    }
}

/// Canned responses served in file-name order: `*.txt` files are returned
/// as text, `*.err` files as failures with their content as the message.
#[derive(Debug, Clone, PartialEq)]
pub struct StubGenerator {
    responses: Vec<std::result::Result<String, String>>,
    pub calls: usize,
}

impl StubGenerator {
    pub fn new(responses: Vec<std::result::Result<String, String>>) -> Self {
        Self { responses, calls: 0 }
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("txt" | "err")))
            .collect();
        paths.sort();
        let responses = paths
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p)?;
                Ok(if p.extension().is_some_and(|e| e == "err") { Err(text.trim().to_string()) } else { Ok(text) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(responses))
    }
}

impl Generator for StubGenerator {
    fn generate(&mut self, _prompt: &str, _params: &serde_json::Value) -> Result<String> {
        let k = self.calls;
        self.calls += 1;
        match self.responses.get(k) {
            Some(Ok(t)) => Ok(t.clone()),
            Some(Err(m)) => Err(Error::Remote(m.clone())),
            None => Err(Error::Remote(format!("no canned response for call {}", k + 1))),
        }
    }
}

/// Splits generated text into reasoning units at `<EOQ>`, `<EOT>` and
/// `<EOR>`; text after the final marker becomes the answer. `<think>`
/// tags are ignored.
pub fn parse_reasoning_response(text: &str, tokenizer: &WordTokenizer) -> (Vec<SentenceUnit>, Option<Vec<Token>>) {
    let cleaned = text.replace("<think>", "").replace("</think>", "");
    let markers = [("<EOQ>", Terminator::Eoq), ("<EOT>", Terminator::Eot), ("<EOR>", Terminator::Eor)];
    let mut units = Vec::new();
    let mut rest = cleaned.as_str();
    loop {
        let next = markers.iter().filter_map(|(m, t)| rest.find(m).map(|i| (i, *m, *t))).min_by_key(|x| x.0);
        let Some((i, m, t)) = next else { break };
        let body = rest[..i].trim();
        units.push(crate::layout::reasoning_unit(units.len() + 1, body, t, tokenizer));
        rest = &rest[i + m.len()..];
    }
    let tail = rest.trim();
    let answer = (!tail.is_empty()).then(|| tokenizer.encode(tail));
    (units, answer)
}

/// Attaches a parsed response to the input side of `layout`.
pub fn trace_from_response(layout: &SegmentLayout, text: &str, tokenizer: &WordTokenizer) -> SegmentLayout {
    let (units, answer) = parse_reasoning_response(text, tokenizer);
    SegmentLayout {
        question_units: layout.question_units.clone(),
        context_units: layout.context_units.clone(),
        order: layout.order,
        reasoning_units: Some(units),
        answer_tokens: answer,
    }
}

/// Full offline flow for one sample: prompt, generate, parse, score, with
/// Pass@2 regeneration.
pub fn run_pipeline(
    layout: &SegmentLayout,
    tokenizer: &WordTokenizer,
    generator: &mut dyn Generator,
    thresholds: &QualityThresholds,
    provider: &dyn EmbeddingProvider,
    params: &serde_json::Value,
    example: &str,
) -> FilterResult {
    let prompt = generation_prompt(layout, example);
    pass_at_2_filter(|attempt_index| {
        let text = generator.generate(&prompt, params)?;
        let trace = trace_from_response(layout, &text, tokenizer);
        let report = evaluate(&trace, thresholds, provider)?;
        Ok(GenerationAttempt { attempt_index, trace, report })
    })
}
