//! Streaming inference toolkit: sentence-unit layouts, streaming attention
//! masks, grouped rotary positions, a toy transformer, dual KV caches with a
//! streaming decode loop, a latency simulator and streaming CoT scoring.

pub mod config;
pub mod cot;
pub mod error;
pub mod fixtures;
pub mod kv;
pub mod latency;
pub mod layout;
pub mod mask;
pub mod model;
pub mod replay;
pub mod rope;
pub mod session;

pub use config::SessionConfig;
pub use cot::{
    depth_intervention, evaluate, granularity_score, pass_at_2_filter, similarity_map, EmbeddingProvider,
    FilterOutcome, LocalEmbedding, QualityReport, QualityThresholds,
};
pub use error::{Error, Result};
pub use kv::{
    batch_oracle_forward, equivalence_deviation, run_streaming_decode, run_streaming_decode_concurrent,
    ArrivalSchedule, CacheMode, DecodeHooks, DecodePlan, DecodeTiming, DualKvState, Event, EventKind, KvCache,
    StreamingRun, UnitTokens,
};
pub use latency::{
    compare, simulate, ttft_tokens, ArrivalModel, Comparison, DecodeModel, LatencyProfile, LatencyReport, Paradigm,
    ParadigmKind, SimulationConfig,
};
pub use layout::{
    build_alignment, segment_text, validate_layout, AlignmentMap, DepthLevel, InputOrder, ReservedIds,
    SegmentLayout, SentenceUnit, Terminator, Token, TokenKind, WordTokenizer,
};
pub use mask::{causal_mask, streaming_mask_literal, streaming_mask_segment, MaskMatrix, MaskMode};
pub use model::{forward, init_weights, Logits, ModelConfig, ModelWeights, Sampler, SamplerConfig, SamplingMode};
pub use rope::{grouped_positions, grouped_positions_with, PositionGrouping, PositionMap, ReasoningIds, RotaryConfig};
pub use session::{parse_session, read_session, Session, SessionHeader};
