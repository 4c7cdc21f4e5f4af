//! Streaming session layout: sentence units, boundary tokens and the
//! visibility alignment between reasoning units and the input prefix.
//!
//! Unit indices are 1-based everywhere. Input units are numbered jointly in
//! arrival order when an alignment refers to them, so with a question-first
//! layout input unit 1 is the (first) question sentence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of a token: ordinary content or one of the five reserved markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Content,
    Eos,
    Eoq,
    Eot,
    Eor,
    Skip,
}

impl TokenKind {
    pub const RESERVED: [TokenKind; 5] = [
        TokenKind::Eos,
        TokenKind::Eoq,
        TokenKind::Eot,
        TokenKind::Eor,
        TokenKind::Skip,
    ];

    /// Surface form of a reserved marker.
    pub fn marker(self) -> Option<&'static str> {
        match self {
            TokenKind::Content => None,
            TokenKind::Eos => Some("<EOS>"),
            TokenKind::Eoq => Some("<EOQ>"),
            TokenKind::Eot => Some("<EOT>"),
            TokenKind::Eor => Some("<EOR>"),
            TokenKind::Skip => Some("<Skip>"),
        }
    }

    pub fn is_reserved(self) -> bool {
        self != TokenKind::Content
    }

    /// Markers that close a reasoning unit.
    pub fn ends_reasoning_unit(self) -> bool {
        matches!(self, TokenKind::Eot | TokenKind::Eoq | TokenKind::Eor)
    }
}

/// Fixed vocabulary ids of the reserved markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReservedIds {
    pub eos: u32,
    pub eoq: u32,
    pub eot: u32,
    pub eor: u32,
    pub skip: u32,
}

impl Default for ReservedIds {
    fn default() -> Self {
        Self { eos: 0, eoq: 1, eot: 2, eor: 3, skip: 4 }
    }
}

impl ReservedIds {
    pub fn id(&self, kind: TokenKind) -> Option<u32> {
        match kind {
            TokenKind::Content => None,
            TokenKind::Eos => Some(self.eos),
            TokenKind::Eoq => Some(self.eoq),
            TokenKind::Eot => Some(self.eot),
            TokenKind::Eor => Some(self.eor),
            TokenKind::Skip => Some(self.skip),
        }
    }

    pub fn kind_of(&self, id: u32) -> TokenKind {
        TokenKind::RESERVED
            .into_iter()
            .find(|k| self.id(*k) == Some(id))
            .unwrap_or(TokenKind::Content)
    }

    pub fn all(&self) -> [u32; 5] {
        [self.eos, self.eoq, self.eot, self.eor, self.skip]
    }

    /// Ids must be distinct and inside the vocabulary.
    pub fn validate(&self, vocab_size: u32) -> Result<()> {
        let ids = self.all();
        for (i, a) in ids.iter().enumerate() {
            if *a >= vocab_size {
                return Err(Error::ReservedIds(format!("id {a} outside vocabulary of {vocab_size}")));
            }
            if ids[i + 1..].contains(a) {
                return Err(Error::ReservedIds(format!("id {a} assigned twice")));
            }
        }
        if vocab_size <= 5 {
            return Err(Error::ReservedIds("vocabulary leaves no room for content tokens".into()));
        }
        Ok(())
    }

    pub fn token(&self, kind: TokenKind) -> Token {
        Token {
            id: self.id(kind).expect("reserved kind"),
            text: kind.marker().map(str::to_owned),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub text: Option<String>,
    pub kind: TokenKind,
}

impl Token {
    pub fn content(id: u32, text: impl Into<String>) -> Self {
        Self { id, text: Some(text.into()), kind: TokenKind::Content }
    }
}

/// Marker closing a sentence unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminator {
    Eos,
    Eoq,
    Eot,
    Eor,
}

impl Terminator {
    pub fn kind(self) -> TokenKind {
        match self {
            Terminator::Eos => TokenKind::Eos,
            Terminator::Eoq => TokenKind::Eoq,
            Terminator::Eot => TokenKind::Eot,
            Terminator::Eor => TokenKind::Eor,
        }
    }

    pub fn from_kind(kind: TokenKind) -> Option<Self> {
        match kind {
            TokenKind::Eos => Some(Terminator::Eos),
            TokenKind::Eoq => Some(Terminator::Eoq),
            TokenKind::Eot => Some(Terminator::Eot),
            TokenKind::Eor => Some(Terminator::Eor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamRole {
    Question,
    Context,
    Reasoning,
}

impl StreamRole {
    fn allows(self, t: Terminator) -> bool {
        match self {
            StreamRole::Context => t == Terminator::Eos,
            StreamRole::Question => t == Terminator::Eoq,
            StreamRole::Reasoning => matches!(t, Terminator::Eot | Terminator::Eoq | Terminator::Eor),
        }
    }
}

/// One sentence of a stream. `tokens` ends with the terminator token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceUnit {
    pub index: usize,
    pub text: String,
    pub tokens: Vec<Token>,
    pub terminator: Terminator,
}

impl SentenceUnit {
    /// Builds a unit from body tokens, appending the terminator marker.
    pub fn new(
        index: usize,
        text: impl Into<String>,
        mut body: Vec<Token>,
        terminator: Terminator,
        reserved: &ReservedIds,
    ) -> Self {
        body.push(reserved.token(terminator.kind()));
        Self { index, text: text.into(), tokens: body, terminator }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn body(&self) -> &[Token] {
        &self.tokens[..self.tokens.len().saturating_sub(1)]
    }

    pub fn is_skip(&self) -> bool {
        self.body().iter().all(|t| t.kind == TokenKind::Skip) && !self.body().is_empty()
    }

    /// Concatenated surface text of the content tokens.
    pub fn content_text(&self) -> String {
        self.tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Content)
            .filter_map(|t| t.text.as_deref())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputOrder {
    #[default]
    QuestionFirst,
    ContextFirst,
}

/// Reasoning depth requested for the post-reading tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum DepthLevel {
    #[serde(rename = "d1")]
    DirectAnswer,
    #[serde(rename = "d2")]
    GlobalThinking,
    #[default]
    #[serde(rename = "d3")]
    GlobalReflection,
}

impl DepthLevel {
    pub const ALL: [DepthLevel; 3] =
        [DepthLevel::DirectAnswer, DepthLevel::GlobalThinking, DepthLevel::GlobalReflection];

    pub fn label(self) -> &'static str {
        match self {
            DepthLevel::DirectAnswer => "D1",
            DepthLevel::GlobalThinking => "D2",
            DepthLevel::GlobalReflection => "D3",
        }
    }
}

impl std::str::FromStr for DepthLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Ok(DepthLevel::DirectAnswer),
            "d2" => Ok(DepthLevel::GlobalThinking),
            "d3" => Ok(DepthLevel::GlobalReflection),
            other => Err(Error::Config(format!("unknown depth {other:?}"))),
        }
    }
}

/// Input and reasoning streams of one session.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub question_units: Vec<SentenceUnit>,
    pub context_units: Vec<SentenceUnit>,
    pub order: InputOrder,
    pub reasoning_units: Option<Vec<SentenceUnit>>,
    pub answer_tokens: Option<Vec<Token>>,
}

impl SegmentLayout {
    /// Input units in arrival order.
    pub fn input_units(&self) -> Vec<&SentenceUnit> {
        let (first, second) = match self.order {
            InputOrder::QuestionFirst => (&self.question_units, &self.context_units),
            InputOrder::ContextFirst => (&self.context_units, &self.question_units),
        };
        first.iter().chain(second.iter()).collect()
    }

    pub fn input_unit_count(&self) -> usize {
        self.question_units.len() + self.context_units.len()
    }

    /// Token lengths of the input units in arrival order.
    pub fn input_unit_lens(&self) -> Vec<usize> {
        self.input_units().iter().map(|u| u.len()).collect()
    }

    /// Cumulative token offset after each input unit (arrival order).
    pub fn input_unit_ends(&self) -> Vec<usize> {
        self.input_unit_lens()
            .iter()
            .scan(0, |acc, l| {
                *acc += l;
                Some(*acc)
            })
            .collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_unit_lens().iter().sum()
    }

    pub fn reasoning(&self) -> &[SentenceUnit] {
        self.reasoning_units.as_deref().unwrap_or(&[])
    }

    pub fn answer(&self) -> &[Token] {
        self.answer_tokens.as_deref().unwrap_or(&[])
    }

    pub fn reasoning_len(&self) -> usize {
        self.reasoning().iter().map(SentenceUnit::len).sum()
    }

    pub fn input_tokens(&self) -> Vec<Token> {
        self.input_units().into_iter().flat_map(|u| u.tokens.iter().cloned()).collect()
    }

    pub fn reasoning_tokens(&self) -> Vec<Token> {
        self.reasoning().iter().flat_map(|u| u.tokens.iter().cloned()).collect()
    }

    /// Input, then reasoning, then answer tokens.
    pub fn full_sequence(&self) -> Vec<Token> {
        let mut seq = self.input_tokens();
        seq.extend(self.reasoning_tokens());
        seq.extend(self.answer().iter().cloned());
        seq
    }

    pub fn total_len(&self) -> usize {
        self.input_len() + self.reasoning_len() + self.answer().len()
    }

    pub fn count_input(&self, kind: TokenKind) -> usize {
        self.input_units().iter().flat_map(|u| u.tokens.iter()).filter(|t| t.kind == kind).count()
    }

    pub fn count_reasoning(&self, kind: TokenKind) -> usize {
        self.reasoning().iter().flat_map(|u| u.tokens.iter()).filter(|t| t.kind == kind).count()
    }
}

/// Visibility relation: reasoning unit index -> last visible input unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub pairs: Vec<(usize, usize)>,
    pub monotone: bool,
}

impl AlignmentMap {
    /// Validates explicit pairs: reasoning indices 1..=n in order, visible
    /// prefixes nondecreasing, each within `1..=input_units`.
    pub fn from_pairs(pairs: Vec<(usize, usize)>, input_units: usize) -> Result<Self> {
        let mut prev = 0;
        for (pos, &(r, v)) in pairs.iter().enumerate() {
            if r != pos + 1 {
                return Err(Error::Alignment(format!("reasoning index {r} at position {}", pos + 1)));
            }
            if v == 0 || v > input_units {
                return Err(Error::Alignment(format!(
                    "reasoning unit {r} maps to input unit {v}, only {input_units} exist"
                )));
            }
            if v < prev {
                return Err(Error::Alignment(format!(
                    "non-monotone: reasoning unit {r} sees {v} after a predecessor saw {prev}"
                )));
            }
            prev = v;
        }
        Ok(Self { pairs, monotone: true })
    }

    /// Canonical 1:1 alignment for `n` single-stream units.
    pub fn identity(n: usize) -> Self {
        Self { pairs: (1..=n).map(|t| (t, t)).collect(), monotone: true }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Last visible input unit for reasoning unit `unit` (1-based).
    pub fn visible_inputs(&self, unit: usize) -> Option<usize> {
        self.pairs.get(unit.checked_sub(1)?).map(|p| p.1)
    }
}

/// Role of a reasoning unit, read from its terminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReasoningRole {
    /// Closes with `<EOQ>`: interpretation of the question.
    Question,
    /// Closes with `<EOT>`: thinking about one context sentence.
    Context,
    /// Closes with `<EOR>`: the depth-controlled tail.
    Tail,
}

impl ReasoningRole {
    pub fn of(unit: &SentenceUnit) -> Self {
        match unit.terminator {
            Terminator::Eoq => ReasoningRole::Question,
            Terminator::Eor => ReasoningRole::Tail,
            _ => ReasoningRole::Context,
        }
    }
}

/// Structural alignment of a layout's reasoning stream to its input.
pub fn build_alignment(layout: &SegmentLayout) -> Result<AlignmentMap> {
    let reasoning = layout
        .reasoning_units
        .as_ref()
        .ok_or_else(|| Error::Alignment("layout has no reasoning units".into()))?;
    let n_q = layout.question_units.len();
    let n_c = layout.context_units.len();
    let eos = layout.count_input(TokenKind::Eos);
    let eot = reasoning.iter().filter(|u| u.terminator == Terminator::Eot).count();
    if eos != eot {
        return Err(Error::BoundaryMismatch { eos, eot });
    }
    let all = n_q + n_c;
    let mut pairs = Vec::with_capacity(reasoning.len());
    let mut seen_context = 0;
    let mut seen_question = false;
    for (pos, unit) in reasoning.iter().enumerate() {
        let r = pos + 1;
        let visible = match ReasoningRole::of(unit) {
            ReasoningRole::Context => {
                seen_context += 1;
                match layout.order {
                    InputOrder::QuestionFirst => n_q + seen_context,
                    InputOrder::ContextFirst => {
                        if seen_question {
                            return Err(Error::Alignment(format!(
                                "context reasoning unit {r} follows the question interpretation"
                            )));
                        }
                        seen_context
                    }
                }
            }
            ReasoningRole::Question => {
                if n_q == 0 {
                    return Err(Error::Alignment(format!("reasoning unit {r} interprets a missing question")));
                }
                if seen_question {
                    return Err(Error::Alignment("more than one question interpretation".into()));
                }
                seen_question = true;
                match layout.order {
                    InputOrder::QuestionFirst => {
                        if seen_context > 0 {
                            return Err(Error::Alignment(format!(
                                "question interpretation at unit {r} follows context reasoning"
                            )));
                        }
                        n_q
                    }
                    InputOrder::ContextFirst => all,
                }
            }
            ReasoningRole::Tail => {
                if r != reasoning.len() {
                    return Err(Error::Alignment(format!("<EOR> unit {r} is not the final reasoning unit")));
                }
                all
            }
        };
        pairs.push((r, visible));
    }
    AlignmentMap::from_pairs(pairs, all)
}

/// One invariant breach found by [`validate_layout`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    NonContiguousIndex { stream: StreamRole, position: usize, index: usize },
    DuplicateIndex { stream: StreamRole, index: usize },
    EmptyUnit { stream: StreamRole, index: usize },
    WrongTerminator { stream: StreamRole, index: usize, terminator: Terminator },
    TerminatorNotLast { stream: StreamRole, index: usize },
    ReservedInBody { stream: StreamRole, index: usize, kind: TokenKind },
    EorNotFinal { index: usize },
    ReservedInAnswer { position: usize },
    CountMismatch { what: &'static str, expected: usize, found: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Layout(format!("{:?}", self.violations)))
        }
    }
}

fn check_stream(role: StreamRole, units: &[SentenceUnit], out: &mut Vec<Violation>) {
    let mut seen = std::collections::HashSet::new();
    for (pos, u) in units.iter().enumerate() {
        if !seen.insert(u.index) {
            out.push(Violation::DuplicateIndex { stream: role, index: u.index });
        } else if u.index != pos + 1 {
            out.push(Violation::NonContiguousIndex { stream: role, position: pos + 1, index: u.index });
        }
        let Some(last) = u.tokens.last() else {
            out.push(Violation::EmptyUnit { stream: role, index: u.index });
            continue;
        };
        if !role.allows(u.terminator) {
            out.push(Violation::WrongTerminator { stream: role, index: u.index, terminator: u.terminator });
        }
        if last.kind != u.terminator.kind() {
            out.push(Violation::TerminatorNotLast { stream: role, index: u.index });
        }
        for t in u.body() {
            let ok = t.kind == TokenKind::Content || (role == StreamRole::Reasoning && t.kind == TokenKind::Skip);
            if !ok {
                out.push(Violation::ReservedInBody { stream: role, index: u.index, kind: t.kind });
            }
        }
    }
}

/// Collects every invariant violation; never fails.
pub fn validate_layout(layout: &SegmentLayout) -> ValidationReport {
    let mut v = Vec::new();
    check_stream(StreamRole::Question, &layout.question_units, &mut v);
    check_stream(StreamRole::Context, &layout.context_units, &mut v);
    let eos = layout.count_input(TokenKind::Eos);
    if eos != layout.context_units.len() {
        v.push(Violation::CountMismatch { what: "<EOS> vs context units", expected: layout.context_units.len(), found: eos });
    }
    let eoq = layout.count_input(TokenKind::Eoq);
    if eoq != layout.question_units.len() {
        v.push(Violation::CountMismatch { what: "<EOQ> vs question units", expected: layout.question_units.len(), found: eoq });
    }
    if let Some(reasoning) = &layout.reasoning_units {
        check_stream(StreamRole::Reasoning, reasoning, &mut v);
        let n = reasoning.len();
        for (pos, u) in reasoning.iter().enumerate() {
            if u.terminator == Terminator::Eor && pos + 1 != n {
                v.push(Violation::EorNotFinal { index: u.index });
            }
        }
    }
    for (pos, t) in layout.answer().iter().enumerate() {
        if t.kind.is_reserved() {
            v.push(Violation::ReservedInAnswer { position: pos });
        }
    }
    ValidationReport { violations: v }
}

/// Deterministic rule-based sentence splitting policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationPolicy {
    pub delimiters: Vec<char>,
    /// Words ending in `.` that never close a sentence.
    pub abbreviations: Vec<String>,
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        Self {
            delimiters: vec!['.', '?', '!', '\n'],
            abbreviations: ["Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "Sr.", "Jr.", "St.", "vs.", "e.g.", "i.e.", "Fig.", "No."]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

/// A sentence of raw text before boundary markers are attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSegment {
    pub index: usize,
    pub text: String,
}

const CLOSERS: [char; 5] = ['"', '\'', ')', ']', '\u{201d}'];

/// Splits text into sentences at `.`, `?`, `!` and newlines.
///
/// A `.`/`?`/`!` only closes a sentence when followed by whitespace or the
/// end of text (so `3.5` and `e.g.` survive), and never after a listed
/// abbreviation. Trailing delimiter runs and closing quotes stay attached.
pub fn segment_text(text: &str, policy: &SegmentationPolicy) -> Result<Vec<TextSegment>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut buf = String::new();
    let flush = |buf: &mut String, out: &mut Vec<TextSegment>| {
        let t = buf.trim();
        if !t.is_empty() {
            out.push(TextSegment { index: out.len() + 1, text: t.to_owned() });
        }
        buf.clear();
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' && policy.delimiters.contains(&'\n') {
            flush(&mut buf, &mut out);
            i += 1;
            continue;
        }
        buf.push(c);
        i += 1;
        if !policy.delimiters.contains(&c) {
            continue;
        }
        while i < chars.len() && (CLOSERS.contains(&chars[i]) || (chars[i] != '\n' && policy.delimiters.contains(&chars[i]))) {
            buf.push(chars[i]);
            i += 1;
        }
        let at_break = i >= chars.len() || chars[i].is_whitespace();
        if !at_break {
            continue;
        }
        if c == '.' {
            let last_word = buf.split_whitespace().last().unwrap_or("");
            if policy.abbreviations.iter().any(|a| a == last_word) {
                continue;
            }
        }
        flush(&mut buf, &mut out);
    }
    flush(&mut buf, &mut out);
    Ok(out)
}

/// Whitespace-preserving word tokenizer hashing pieces into the content
/// part of a small vocabulary.
///
/// A piece is optional leading whitespace followed by either a run of
/// alphanumerics or a single other character. Reserved markers written
/// literally (`<EOS>`, `<Skip>`, ...) map to their reserved ids. Content ids
/// are `content_ids[fnv1a64(trimmed piece) % content_ids.len()]`, where
/// `content_ids` lists the non-reserved ids in increasing order.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    reserved: ReservedIds,
    content_ids: Vec<u32>,
}

impl WordTokenizer {
    pub fn new(reserved: ReservedIds, vocab_size: u32) -> Result<Self> {
        reserved.validate(vocab_size)?;
        let taken = reserved.all();
        let content_ids = (0..vocab_size).filter(|id| !taken.contains(id)).collect();
        Ok(Self { reserved, content_ids })
    }

    pub fn reserved(&self) -> &ReservedIds {
        &self.reserved
    }

    pub fn encode(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let ws_len = rest.len() - rest.trim_start().len();
            let after_ws = &rest[ws_len..];
            if after_ws.is_empty() {
                // trailing whitespace: fold into the previous token.
                if let Some(Token { text: Some(t), kind: TokenKind::Content, .. }) = out.last_mut() {
                    t.push_str(rest);
                } else {
                    out.push(Token::content(self.content_id(""), rest));
                }
                break;
            }
            if let Some(kind) = TokenKind::RESERVED.into_iter().find(|k| after_ws.starts_with(k.marker().unwrap())) {
                let m = kind.marker().unwrap();
                if ws_len > 0 {
                    out.push(Token::content(self.content_id(""), &rest[..ws_len]));
                }
                out.push(self.reserved.token(kind));
                rest = &after_ws[m.len()..];
                continue;
            }
            let first = after_ws.chars().next().unwrap();
            let word_len = if first.is_alphanumeric() {
                after_ws.find(|c: char| !c.is_alphanumeric()).unwrap_or(after_ws.len())
            } else {
                first.len_utf8()
            };
            let piece = &rest[..ws_len + word_len];
            out.push(Token::content(self.content_id(&after_ws[..word_len]), piece));
            rest = &rest[ws_len + word_len..];
        }
        out
    }

    fn content_id(&self, piece: &str) -> u32 {
        let h = fnv1a64(piece.as_bytes());
        self.content_ids[(h % self.content_ids.len() as u64) as usize]
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Input stream role for boundary insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRole {
    Context,
    Question,
}

/// Units with their flattened token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedStream {
    pub units: Vec<SentenceUnit>,
    pub tokens: Vec<Token>,
}

/// Tokenizes each segment and closes it with `<EOS>` (context) or `<EOQ>`
/// (question).
pub fn insert_boundary_tokens(
    segments: &[TextSegment],
    role: InputRole,
    tokenizer: &WordTokenizer,
) -> Result<BoundedStream> {
    let terminator = match role {
        InputRole::Context => Terminator::Eos,
        InputRole::Question => Terminator::Eoq,
    };
    let mut units = Vec::with_capacity(segments.len());
    for seg in segments {
        let body = tokenizer.encode(&seg.text);
        if let Some(t) = body.iter().find(|t| t.kind.is_reserved()) {
            return Err(Error::ReservedInBody { index: seg.index, marker: t.kind.marker().unwrap() });
        }
        units.push(SentenceUnit::new(seg.index, seg.text.clone(), body, terminator, tokenizer.reserved()));
    }
    let tokens = units.iter().flat_map(|u| u.tokens.iter().cloned()).collect();
    Ok(BoundedStream { units, tokens })
}

/// Tokenizes one reasoning unit's text; `<Skip>` in the text becomes the
/// skip marker.
pub fn reasoning_unit(index: usize, text: &str, terminator: Terminator, tokenizer: &WordTokenizer) -> SentenceUnit {
    SentenceUnit::new(index, text, tokenizer.encode(text), terminator, tokenizer.reserved())
}
