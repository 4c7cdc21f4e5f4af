//! Replay of the bundled reference latency table through the simulator.
//!
//! The batch decode rate is fitted so the batch row's pre-answer tokens
//! (first answer token included) take exactly the reference batch delay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::latency::{
    compare, reduction_pct, standard_paradigms, ttft_tokens, ArrivalModel, Comparison, DecodeModel, LatencyProfile,
    Paradigm, ReasoningSpan, SimulationConfig, TailTokens,
};

pub const REFERENCE_LATENCY_JSON: &str = include_str!("../replay/reference_latency.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTtft {
    pub name: String,
    pub batch_ttft: f64,
    pub streaming_ttft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsmProfile {
    pub batch_delay_s: f64,
    pub batch_pre_answer_tokens: f64,
    pub question_tokens: f64,
    pub context_tokens: f64,
    pub context_units: usize,
    pub streaming_reasoning_tokens: f64,
    pub tail_tokens: TailTokens,
    pub answer_tokens: f64,
    #[serde(default)]
    pub reference_delays_s: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub description: String,
    pub datasets: Vec<DatasetTtft>,
    pub gsm: GsmProfile,
}

impl ReferenceTable {
    pub fn bundled() -> Result<Self> {
        Ok(serde_json::from_str(REFERENCE_LATENCY_JSON)?)
    }
}

impl GsmProfile {
    /// Question unit, evenly split context units, one streaming reasoning
    /// unit per input unit, depth tails and the batch baseline.
    pub fn profile(&self) -> LatencyProfile {
        let mut input_units = vec![self.question_tokens];
        input_units.extend(std::iter::repeat_n(self.context_tokens / self.context_units as f64, self.context_units));
        let n = input_units.len();
        let reasoning = (1..=n)
            .map(|k| ReasoningSpan { tokens: self.streaming_reasoning_tokens / n as f64, visible_inputs: k })
            .collect();
        LatencyProfile {
            input_units,
            reasoning,
            tail: self.tail_tokens,
            answer_tokens: self.answer_tokens,
            batch_reasoning_tokens: Some(self.batch_pre_answer_tokens - 1.0),
        }
    }

    pub fn fitted_decode(&self) -> Result<DecodeModel> {
        DecodeModel::fit(self.batch_pre_answer_tokens, self.batch_delay_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftReplay {
    pub name: String,
    pub batch_ttft: f64,
    pub streaming_ttft: f64,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ttft: Vec<TtftReplay>,
    pub mean_ttft_reduction_pct: f64,
    pub fitted_decode_rate: f64,
    pub gsm: Comparison,
    pub reference_delays_s: BTreeMap<String, f64>,
}

pub fn replay(table: &ReferenceTable, arrival: ArrivalModel) -> Result<ReplayReport> {
    let ttft = table
        .datasets
        .iter()
        .map(|d| {
            let p = LatencyProfile {
                input_units: vec![d.streaming_ttft, d.batch_ttft - d.streaming_ttft],
                reasoning: vec![ReasoningSpan { tokens: 1.0, visible_inputs: 1 }],
                tail: TailTokens::default(),
                answer_tokens: 1.0,
                batch_reasoning_tokens: None,
            };
            let b = ttft_tokens(&p, Paradigm::Batch)?;
            let s = ttft_tokens(&p, Paradigm::Streaming)?;
            Ok(TtftReplay { name: d.name.clone(), batch_ttft: b, streaming_ttft: s, reduction_pct: reduction_pct(b, s) })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = ttft.iter().map(|t| t.reduction_pct).sum::<f64>() / ttft.len().max(1) as f64;
    let decode = table.gsm.fitted_decode()?;
    let gsm = compare(&table.gsm.profile(), &standard_paradigms(), &SimulationConfig::new(arrival, decode))?;
    Ok(ReplayReport {
        ttft,
        mean_ttft_reduction_pct: mean,
        fitted_decode_rate: decode.tokens_per_second,
        gsm,
        reference_delays_s: table.gsm.reference_delays_s.clone(),
    })
}

impl ReplayReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset | Batch TTFT | Streaming TTFT | TTFT reduction |\n|---|---:|---:|---:|\n");
        for t in &self.ttft {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.1}% |\n",
                t.name, t.batch_ttft, t.streaming_ttft, t.reduction_pct
            ));
        }
        out.push_str(&format!("| Mean | | | {:.1}% |\n\n", self.mean_ttft_reduction_pct));
        out.push_str(&format!("GSM-Symbolic, decode rate {:.2} tok/s\n\n", self.fitted_decode_rate));
        out.push_str("| Method | TTFT | Delay (s) | Reference delay (s) | Delay reduction |\n|---|---:|---:|---:|---:|\n");
        for r in &self.gsm.rows {
            let reference = self.reference_delays_s.get(&r.label).map_or("-".into(), |v| format!("{v:.2}"));
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {} | {} |\n",
                r.label,
                r.report.ttft_tokens,
                r.report.first_answer_delay_s,
                reference,
                r.delay_reduction_pct.map_or("-".into(), |v| format!("{v:.1}%"))
            ));
        }
        out
    }
}
