use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use streamthink::cot::{RemoteEmbedding, RemoteGenerator, StubGenerator};
use streamthink::fixtures::random_layout;
use streamthink::latency::{compare, standard_paradigms};
use streamthink::layout::{build_alignment, DepthLevel, ReservedIds};
use streamthink::mask::{causal_mask, streaming_mask_literal, streaming_mask_segment, MaskMatrix};
use streamthink::model::init_weights;
use streamthink::replay::{replay, ReferenceTable};
use streamthink::rope::{attention_score, rotate, RotaryConfig};
use streamthink::{
    equivalence_deviation, evaluate, read_session, simulate, ArrivalModel, DecodeHooks, DecodeModel, DecodeTiming,
    EmbeddingProvider, FilterOutcome, LocalEmbedding, Paradigm, ParadigmKind, Session, SessionConfig,
    SimulationConfig,
};

const EQUIVALENCE_TOL: f32 = 1e-5;
const ROPE_TOL: f32 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "streamthink", version, about = "Streaming reasoning toolkit")]
struct Cli {
    /// JSON run configuration; unset fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attention mask dumps.
    Mask {
        #[command(subcommand)]
        action: MaskAction,
    },
    /// Rotary position checks.
    Rope {
        #[command(subcommand)]
        action: RopeAction,
    },
    /// Streamed decode against the batch oracle over seeded fixtures.
    Equivalence(EquivalenceArgs),
    /// Latency of one paradigm on a session.
    Simulate(SimulateArgs),
    /// Latency table across paradigms.
    Compare(CompareArgs),
    /// Granularity and consistency of a session's reasoning.
    Score(ScoreArgs),
    /// Generation and Pass@2 filtering.
    Pipeline {
        #[command(subcommand)]
        action: PipelineAction,
    },
}

#[derive(Subcommand, Debug)]
enum MaskAction {
    /// Print a mask as a grid (`.` visible, `#` masked) and as JSON.
    Dump(MaskArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskMode {
    Causal,
    Literal,
    Segment,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long, value_enum)]
    mode: MaskMode,
    /// Input length.
    #[arg(long = "T", value_name = "T")]
    t: Option<usize>,
    /// Reasoning length.
    #[arg(long = "L", value_name = "L", default_value_t = 0)]
    l: usize,
    #[arg(long, value_name = "FILE", conflicts_with = "t")]
    session: Option<PathBuf>,
    /// JSON only.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum RopeAction {
    /// Shift invariance over random (q, k, offset) trials.
    Check {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct EquivalenceArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Largest number of context units per fixture.
    #[arg(long, default_value_t = 5)]
    max_units: usize,
    /// Largest unit length in tokens.
    #[arg(long, default_value_t = 8)]
    max_unit_len: usize,
    #[arg(long, hide = true)]
    inject_off_by_one: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug, Clone)]
struct RateArgs {
    /// Input arrival in words per minute.
    #[arg(long)]
    wpm: Option<f64>,
    /// Decode throughput in tokens per second.
    #[arg(long)]
    decode_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_name = "FILE")]
    session: PathBuf,
    #[arg(long, value_parser = parse_paradigm)]
    paradigm: Paradigm,
    #[arg(long, value_parser = parse_depth, default_value = "d3")]
    depth: DepthLevel,
    #[command(flatten)]
    rates: RateArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long, value_name = "FILE", required_unless_present = "replay")]
    session: Option<PathBuf>,
    /// Use the bundled reference token counts.
    #[arg(long, conflicts_with = "session")]
    replay: bool,
    #[command(flatten)]
    rates: RateArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderChoice {
    Local,
    Remote,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long, value_name = "FILE")]
    session: PathBuf,
    #[arg(long, value_enum, default_value_t = ProviderChoice::Local)]
    provider: ProviderChoice,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum PipelineAction {
    /// Generate a trace for the session's input, score it, regenerate once.
    Run(PipelineArgs),
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, value_name = "FILE")]
    session: PathBuf,
    /// Directory of canned generator responses instead of the remote service.
    #[arg(long, value_name = "DIR")]
    stub_responses: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProviderChoice::Local)]
    provider: ProviderChoice,
    /// File holding the worked example for the generation prompt.
    #[arg(long, value_name = "FILE")]
    example: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn parse_paradigm(s: &str) -> Result<Paradigm, String> {
    s.parse().map_err(|e: streamthink::Error| e.to_string())
}

fn parse_depth(s: &str) -> Result<DepthLevel, String> {
    s.parse().map_err(|e: streamthink::Error| e.to_string())
}

/// Exit-code carrying failure.
#[derive(Debug)]
enum Failure {
    Check(String),
    Input(anyhow::Error),
    Remote(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Input(_) => 2,
            Failure::Remote(_) => 3,
        }
    }
}

impl From<streamthink::Error> for Failure {
    fn from(e: streamthink::Error) -> Self {
        if e.is_remote() {
            Failure::Remote(e.into())
        } else {
            Failure::Input(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<streamthink::Error>() {
            Ok(e) => e.into(),
            Err(e) => Failure::Input(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> anyhow::Result<SessionConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SessionConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => SessionConfig::default(),
    };
    Ok(cfg.with_env())
}

fn load_session(path: &Path) -> anyhow::Result<Session> {
    read_session(path).with_context(|| format!("session {}", path.display()))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn cmd_mask(args: &MaskArgs) -> CmdResult {
    let m: MaskMatrix = match (&args.session, args.mode) {
        (Some(path), mode) => {
            let s = load_session(path)?;
            match mode {
                MaskMode::Causal => causal_mask(s.layout.total_len())?,
                MaskMode::Literal => streaming_mask_literal(s.layout.input_len(), s.layout.reasoning_len())?,
                MaskMode::Segment => streaming_mask_segment(&s.layout, &build_alignment(&s.layout)?)?,
            }
        }
        (None, MaskMode::Segment) => return Err(Failure::Input(anyhow!("segment mode needs --session"))),
        (None, mode) => {
            let t = args.t.ok_or_else(|| Failure::Input(anyhow!("--T or --session is required")))?;
            match mode {
                MaskMode::Causal => causal_mask(t + args.l)?,
                _ => streaming_mask_literal(t, args.l)?,
            }
        }
    };
    if !args.json {
        print!("{}", m.to_grid());
    }
    println!("{}", m.to_json());
    Ok(())
}

fn cmd_rope(trials: usize, seed: u64, json: bool) -> CmdResult {
    let cfg = RotaryConfig::new(16, 10_000.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shift = 0.0f32;
    let mut identity = 0.0f32;
    for _ in 0..trials {
        let q: Vec<f32> = (0..cfg.head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..cfg.head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (m, n, d) = (rng.random_range(0..512), rng.random_range(0..512), rng.random_range(0..4096));
        let a = attention_score(&q, &k, m, n, &cfg)?;
        let b = attention_score(&q, &k, m + d, n + d, &cfg)?;
        shift = shift.max((a - b).abs());
        let r = rotate(&q, 0, &cfg)?;
        identity = q.iter().zip(&r).map(|(x, y)| (x - y).abs()).fold(identity, f32::max);
    }
    let pass = shift <= ROPE_TOL && identity <= ROPE_TOL;
    if json {
        print_json(&json!({
            "trials": trials,
            "seed": seed,
            "max_deviation": shift,
            "identity_deviation": identity,
            "pass": pass,
        }));
    } else {
        println!("{trials} trials, max shift deviation {shift:.3e}, offset-0 deviation {identity:.3e}");
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("rotary deviation above {ROPE_TOL:e}")))
    }
}

fn cmd_equivalence(args: &EquivalenceArgs, cfg: &SessionConfig) -> CmdResult {
    if args.seeds == 0 || args.max_units == 0 || args.max_units > 16 || args.max_unit_len == 0 || args.max_unit_len > 32 {
        return Err(Failure::Input(anyhow!("seeds >= 1, 1 <= max-units <= 16, 1 <= max-unit-len <= 32")));
    }
    let weights = init_weights(&cfg.model)?;
    let reserved = ReservedIds::default();
    reserved.validate(cfg.model.vocab_size as u32)?;
    let hooks = DecodeHooks { slice_unit_offset: usize::from(args.inject_off_by_one) };
    let mut rows = Vec::new();
    for seed in args.first_seed..args.first_seed + args.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = random_layout(&mut rng, args.max_units, args.max_unit_len, &reserved, cfg.model.vocab_size as u32);
        let dev = equivalence_deviation(&weights, &layout, reserved, DecodeTiming::new(cfg.decode.tokens_per_second), hooks)?;
        if !args.json {
            println!("seed {seed}: max |dlogit| {dev:.3e} over {} tokens", layout.total_len());
        }
        rows.push((seed, dev));
    }
    let worst = rows.iter().map(|r| r.1).fold(0.0f32, f32::max);
    let pass = worst <= EQUIVALENCE_TOL;
    if args.json {
        let seeds: Vec<Value> = rows
            .iter()
            .map(|(s, d)| json!({ "seed": s, "max_abs_deviation": d, "pass": *d <= EQUIVALENCE_TOL }))
            .collect();
        print_json(&json!({ "seeds": seeds, "max_abs_deviation": worst, "tolerance": EQUIVALENCE_TOL, "pass": pass }));
    } else if rows.len() > 1 {
        println!("{} seeds, max |dlogit| {worst:.3e} ({})", rows.len(), if pass { "ok" } else { "FAILED" });
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("deviation {worst:e} above {EQUIVALENCE_TOL:e}")))
    }
}

fn sim_config(cfg: &SessionConfig, rates: &RateArgs) -> anyhow::Result<SimulationConfig> {
    let mut arrival = cfg.arrival;
    if let Some(w) = rates.wpm {
        arrival = ArrivalModel { words_per_minute: w, ..arrival };
    }
    let mut decode = cfg.decode;
    if let Some(r) = rates.decode_rate {
        decode = DecodeModel { tokens_per_second: r, ..decode };
    }
    arrival.validate()?;
    decode.validate()?;
    Ok(SimulationConfig::new(arrival, decode))
}

fn cmd_simulate(args: &SimulateArgs, cfg: &SessionConfig) -> CmdResult {
    let session = load_session(&args.session)?;
    let report = simulate(&session.profile()?, ParadigmKind::new(args.paradigm, args.depth), &sim_config(cfg, &args.rates)?)?;
    if args.json {
        print_json(&report);
    } else {
        println!(
            "{}: TTFT {:.2} tokens, first answer token {:.3} s after input end (at {:.3} s)",
            report.paradigm.label(),
            report.ttft_tokens,
            report.first_answer_delay_s,
            report.first_answer_time_s
        );
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs, cfg: &SessionConfig) -> CmdResult {
    if args.replay {
        let table = ReferenceTable::bundled()?;
        let report = replay(&table, sim_config(cfg, &args.rates)?.arrival)?;
        if args.json {
            print_json(&report);
        } else {
            print!("{}", report.to_markdown());
        }
        return Ok(());
    }
    let session = load_session(args.session.as_deref().expect("clap requires --session"))?;
    let table = compare(&session.profile()?, &standard_paradigms(), &sim_config(cfg, &args.rates)?)?;
    if args.json {
        print_json(&table);
    } else {
        print!("{}", table.to_markdown());
    }
    Ok(())
}

fn provider(choice: ProviderChoice, cfg: &SessionConfig) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    match choice {
        ProviderChoice::Local => Ok(Box::new(LocalEmbedding::default())),
        ProviderChoice::Remote => {
            let config = cfg.embed_endpoint.clone().ok_or_else(|| {
                Failure::Input(anyhow!("remote provider needs embed_endpoint in the config or {}", streamthink::config::EMBED_URL_ENV))
            })?;
            Ok(Box::new(RemoteEmbedding { config }))
        }
    }
}

fn cmd_score(args: &ScoreArgs, cfg: &SessionConfig) -> CmdResult {
    let session = load_session(&args.session)?;
    let provider = provider(args.provider, cfg)?;
    let report = evaluate(&session.layout, &cfg.thresholds, provider.as_ref())?;
    if args.json {
        print_json(&report);
    } else {
        println!("granularity {:.3}", report.granularity);
        for (u, s) in report.scored_units.iter().zip(&report.per_unit_consistency) {
            println!("input unit {u}: consistency {s:.4}");
        }
        match report.mean_consistency {
            Some(m) => println!("mean consistency {m:.4}"),
            None => println!("no scored units"),
        }
        println!("{}", if report.pass { "pass" } else { "fail" });
    }
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("quality check failed for input units {:?}", report.failures)))
    }
}

fn cmd_pipeline(args: &PipelineArgs, cfg: &SessionConfig) -> CmdResult {
    let session = load_session(&args.session)?;
    let tokenizer = session.tokenizer()?;
    let provider = provider(args.provider, cfg)?;
    let example = match &args.example {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut generator: Box<dyn streamthink::cot::Generator> = match (&args.stub_responses, &cfg.generate_endpoint) {
        (Some(dir), _) => Box::new(
            StubGenerator::from_dir(dir).with_context(|| format!("stub responses {}", dir.display()))?,
        ),
        (None, Some(endpoint)) => Box::new(RemoteGenerator { config: endpoint.clone() }),
        (None, None) => {
            return Err(Failure::Input(anyhow!(
                "no generator: pass --stub-responses or set generate_endpoint / {}",
                streamthink::config::GENERATE_URL_ENV
            )))
        }
    };
    let params = json!({ "seed": cfg.seed, "sampler": cfg.sampler });
    let result = streamthink::cot::run_pipeline(
        &session.layout,
        &tokenizer,
        generator.as_mut(),
        &cfg.thresholds,
        provider.as_ref(),
        &params,
        &example,
    );
    if args.json {
        print_json(&result);
    } else {
        for a in &result.history {
            let status = match (&a.error, a.passed) {
                (Some(e), _) => format!("error: {e}"),
                (None, true) => "pass".into(),
                (None, false) => "fail".into(),
            };
            println!("attempt {}: {status}", a.attempt_index);
        }
        match &result.outcome {
            FilterOutcome::Accepted { attempt } => println!("accepted attempt {}", attempt.attempt_index),
            FilterOutcome::Discarded => println!("discarded after {} attempts", result.calls),
        }
    }
    if matches!(result.outcome, FilterOutcome::Discarded) && result.history.iter().all(|a| a.remote_failure) {
        return Err(Failure::Remote(anyhow!("generator or embedding service failed on every attempt")));
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli.config.as_deref())?;
    eprintln!("resolved config: {}", serde_json::to_string(&cfg).expect("config serializes"));
    match &cli.command {
        Command::Mask { action: MaskAction::Dump(a) } => cmd_mask(a),
        Command::Rope { action: RopeAction::Check { trials, seed, json } } => cmd_rope(*trials, *seed, *json),
        Command::Equivalence(a) => cmd_equivalence(a, &cfg),
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::Compare(a) => cmd_compare(a, &cfg),
        Command::Score(a) => cmd_score(a, &cfg),
        Command::Pipeline { action: PipelineAction::Run(a) } => cmd_pipeline(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(m) => eprintln!("check failed: {m}"),
                Failure::Input(e) => eprintln!("error: {e:#}"),
                Failure::Remote(e) => eprintln!("remote failure: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
