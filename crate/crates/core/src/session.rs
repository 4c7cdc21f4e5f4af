//! Line-delimited JSON session files.
//!
//! One record per line. Unit records carry
//! `{"stream": "context|question|reasoning|answer", "index", "text", "terminator": "EOS|EOQ|EOT|EOR|none"}`.
//! A `{"session_config": {...}}` record declares reserved-marker ids, input
//! order, vocabulary size and depth; a `{"latency_profile": {...}}` record may
//! supply real-valued token counts for the latency simulator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::LatencyProfile;
use crate::layout::{
    reasoning_unit, validate_layout, DepthLevel, InputOrder, ReservedIds, SegmentLayout, SentenceUnit, Terminator,
    Token, TokenKind, WordTokenizer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionHeader {
    pub reserved_ids: ReservedIds,
    pub order: InputOrder,
    pub vocab_size: u32,
    pub depth: DepthLevel,
}

impl Default for SessionHeader {
    fn default() -> Self {
        Self { reserved_ids: ReservedIds::default(), order: InputOrder::default(), vocab_size: 64, depth: DepthLevel::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamName {
    Context,
    Question,
    Reasoning,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminatorName {
    #[serde(rename = "EOS")]
    Eos,
    #[serde(rename = "EOQ")]
    Eoq,
    #[serde(rename = "EOT")]
    Eot,
    #[serde(rename = "EOR")]
    Eor,
    #[serde(rename = "none")]
    None,
}

impl TerminatorName {
    fn terminator(self) -> Option<Terminator> {
        match self {
            TerminatorName::Eos => Some(Terminator::Eos),
            TerminatorName::Eoq => Some(Terminator::Eoq),
            TerminatorName::Eot => Some(Terminator::Eot),
            TerminatorName::Eor => Some(Terminator::Eor),
            TerminatorName::None => None,
        }
    }

    fn of(t: Terminator) -> Self {
        match t {
            Terminator::Eos => TerminatorName::Eos,
            Terminator::Eoq => TerminatorName::Eoq,
            Terminator::Eot => TerminatorName::Eot,
            Terminator::Eor => TerminatorName::Eor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitRecord {
    pub stream: StreamName,
    pub index: usize,
    pub text: String,
    pub terminator: TerminatorName,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum Record {
    Config { session_config: SessionHeader },
    Profile { latency_profile: LatencyProfile },
    Unit(UnitRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub header: SessionHeader,
    pub records: Vec<UnitRecord>,
    pub layout: SegmentLayout,
    pub latency_profile: Option<LatencyProfile>,
}

impl Session {
    pub fn tokenizer(&self) -> Result<WordTokenizer> {
        WordTokenizer::new(self.header.reserved_ids, self.header.vocab_size)
    }

    /// Explicit latency profile if present, else one derived from the units.
    pub fn profile(&self) -> Result<LatencyProfile> {
        match &self.latency_profile {
            Some(p) => {
                p.validate()?;
                Ok(p.clone())
            }
            None => LatencyProfile::from_layout(&self.layout),
        }
    }

    pub fn has_units(&self) -> bool {
        !self.records.is_empty()
    }
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Session { line, message: message.into() }
}

pub fn parse_session(text: &str) -> Result<Session> {
    let mut header: Option<SessionHeader> = None;
    let mut profile = None;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        match rec {
            Record::Config { session_config } => {
                if header.is_some() {
                    return Err(err(line, "duplicate session_config record"));
                }
                if !records.is_empty() {
                    return Err(err(line, "session_config must precede unit records"));
                }
                header = Some(session_config);
            }
            Record::Profile { latency_profile } => profile = Some(latency_profile),
            Record::Unit(u) => {
                records.push(u);
                lines.push(line);
            }
        }
    }
    let header = header.unwrap_or_default();
    let tokenizer = WordTokenizer::new(header.reserved_ids, header.vocab_size)?;
    let mut layout = SegmentLayout { order: header.order, ..Default::default() };
    let mut reasoning = Vec::new();
    let mut answer: Vec<Token> = Vec::new();
    let mut has_answer = false;
    for (rec, &line) in records.iter().zip(&lines) {
        let term = rec.terminator.terminator();
        let allowed: &[Option<Terminator>] = match rec.stream {
            StreamName::Context => &[Some(Terminator::Eos)],
            StreamName::Question => &[Some(Terminator::Eoq)],
            StreamName::Reasoning => &[Some(Terminator::Eot), Some(Terminator::Eoq), Some(Terminator::Eor)],
            StreamName::Answer => &[None],
        };
        if !allowed.contains(&term) {
            return Err(err(line, format!("{:?} record cannot end with {:?}", rec.stream, rec.terminator)));
        }
        let body = tokenizer.encode(&rec.text);
        match rec.stream {
            StreamName::Context | StreamName::Question => {
                if let Some(t) = body.iter().find(|t| t.kind.is_reserved()) {
                    return Err(err(line, format!("reserved marker {} in input text", t.kind.marker().unwrap())));
                }
                let unit = SentenceUnit::new(rec.index, rec.text.clone(), body, term.unwrap(), &header.reserved_ids);
                if rec.stream == StreamName::Context {
                    layout.context_units.push(unit);
                } else {
                    layout.question_units.push(unit);
                }
            }
            StreamName::Reasoning => {
                if let Some(t) = body.iter().find(|t| t.kind.is_reserved() && t.kind != TokenKind::Skip) {
                    return Err(err(line, format!("reserved marker {} inside reasoning text", t.kind.marker().unwrap())));
                }
                reasoning.push(reasoning_unit(rec.index, &rec.text, term.unwrap(), &tokenizer));
            }
            StreamName::Answer => {
                has_answer = true;
                answer.extend(body);
            }
        }
    }
    if !reasoning.is_empty() {
        layout.reasoning_units = Some(reasoning);
    }
    if has_answer {
        layout.answer_tokens = Some(answer);
    }
    if !records.is_empty() {
        validate_layout(&layout).into_result()?;
    }
    Ok(Session { header, records, layout, latency_profile: profile })
}

pub fn read_session(path: &Path) -> Result<Session> {
    parse_session(&std::fs::read_to_string(path)?)
}

/// Serializes a header and layout back into session lines.
pub fn session_to_jsonl(header: &SessionHeader, layout: &SegmentLayout) -> String {
    let mut out = serde_json::json!({ "session_config": header }).to_string() + "\n";
    let unit_line = |stream, u: &SentenceUnit| {
        let r = UnitRecord {
            stream,
            index: u.index,
            text: u.text.clone(),
            terminator: TerminatorName::of(u.terminator),
        };
        serde_json::to_string(&r).expect("record serializes") + "\n"
    };
    for u in &layout.question_units {
        out += &unit_line(StreamName::Question, u);
    }
    for u in &layout.context_units {
        out += &unit_line(StreamName::Context, u);
    }
    for u in layout.reasoning() {
        out += &unit_line(StreamName::Reasoning, u);
    }
    if let Some(a) = &layout.answer_tokens {
        let text: String = a.iter().filter_map(|t| t.text.as_deref()).collect();
        let r = UnitRecord { stream: StreamName::Answer, index: 1, text, terminator: TerminatorName::None };
        out += &(serde_json::to_string(&r).expect("record serializes") + "\n");
    }
    out
}
