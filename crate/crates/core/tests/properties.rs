use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streamthink::fixtures::random_layout;
use streamthink::latency::{ReasoningSpan, TailTokens};
use streamthink::layout::{
    build_alignment, validate_layout, DepthLevel, ReservedIds, SegmentLayout, SentenceUnit, Terminator, Token,
};
use streamthink::mask::{literal_indicator, streaming_mask_literal, streaming_mask_segment};
use streamthink::model::{forward, init_weights, ModelConfig, ModelWeights, Sampler, SamplerConfig};
use streamthink::rope::{attention_score, PositionMap, RotaryConfig};
use streamthink::{
    evaluate, granularity_score, run_streaming_decode, simulate, ttft_tokens, ArrivalModel, DecodeModel, DecodePlan,
    DecodeTiming, DualKvState, EmbeddingProvider, EventKind, LatencyProfile, LocalEmbedding, Paradigm, ParadigmKind,
    QualityThresholds, SimulationConfig,
};

fn layout_from_seed(seed: u64, max_context: usize, max_len: usize) -> SegmentLayout {
    random_layout(&mut ChaCha8Rng::seed_from_u64(seed), max_context, max_len, &ReservedIds::default(), 64)
}

fn one_layer() -> ModelWeights {
    init_weights(&ModelConfig { n_layers: 1, ..ModelConfig::default() }).unwrap()
}

fn profile_strategy() -> impl Strategy<Value = LatencyProfile> {
    (1usize..=6)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(1u32..=40, n),
                prop::collection::vec((0u32..=30, 1usize..=n), 1..=6),
                (0u32..=8, 0u32..=40, 0u32..=80),
                1u32..=3,
            )
        })
        .prop_map(|(inputs, mut spans, (d1, d2, d3), answer)| {
            spans.sort_by_key(|s| s.1);
            LatencyProfile {
                input_units: inputs.into_iter().map(f64::from).collect(),
                reasoning: spans
                    .into_iter()
                    .map(|(t, v)| ReasoningSpan { tokens: f64::from(t), visible_inputs: v })
                    .collect(),
                tail: TailTokens { d1: f64::from(d1), d2: f64::from(d2), d3: f64::from(d3) },
                answer_tokens: f64::from(answer),
                batch_reasoning_tokens: None,
            }
        })
}

fn paradigm() -> impl Strategy<Value = ParadigmKind> {
    (prop_oneof![Just(Paradigm::Batch), Just(Paradigm::Interleaved), Just(Paradigm::Streaming)], 0usize..3)
        .prop_map(|(p, d)| ParadigmKind::new(p, DepthLevel::ALL[d]))
}

fn config(wpm_exp: i32, decode_exp: i32) -> SimulationConfig {
    let arrival = ArrivalModel { words_per_minute: 60.0 * 2f64.powi(wpm_exp), tokens_per_word: 1.0 };
    SimulationConfig::new(arrival, DecodeModel::new(2f64.powi(decode_exp)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn literal_mask_is_causal_superset(t in 1usize..16, l in 0usize..16) {
        let m = streaming_mask_literal(t, l).unwrap();
        for i in 1..=t + l {
            for j in 1..=t + l {
                prop_assert_eq!(m.is_visible(i, j), j <= i && !literal_indicator(t, i, j));
            }
            prop_assert!(m.is_visible(i, i));
        }
    }

    /// With one layer, a hidden cell's token cannot reach the row's logits.
    #[test]
    fn literal_masked_cells_do_not_leak(t in 2usize..8, l in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let w = one_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t + l;
        let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(5..64)).collect();
        let mask = streaming_mask_literal(t, l).unwrap();
        let pos = PositionMap::vanilla(n);
        let base = forward(&tokens, &mask, &pos, &w).unwrap();
        for i in 1..=n {
            for j in 1..i {
                if mask.is_visible(i, j) {
                    continue;
                }
                let mut other = tokens.clone();
                other[j - 1] = if other[j - 1] == 5 { 6 } else { 5 };
                let out = forward(&other, &mask, &pos, &w).unwrap();
                prop_assert_eq!(out.row(i - 1), base.row(i - 1));
            }
        }
    }

    #[test]
    fn segment_rows_see_a_growing_input_prefix(seed in any::<u64>()) {
        let layout = layout_from_seed(seed, 6, 6);
        let alignment = build_alignment(&layout).unwrap();
        let m = streaming_mask_segment(&layout, &alignment).unwrap();
        let t_in = layout.input_len();
        let mut prev = 0;
        for i in t_in + 1..=t_in + layout.reasoning_len() {
            let seen = (1..=t_in).take_while(|&j| m.is_visible(i, j)).count();
            prop_assert_eq!((1..=t_in).filter(|&j| m.is_visible(i, j)).count(), seen);
            prop_assert!(seen >= prev);
            prop_assert!(layout.input_unit_ends().contains(&seen));
            prev = seen;
        }
        for i in t_in + layout.reasoning_len() + 1..=layout.total_len() {
            prop_assert!((1..=i).all(|j| m.is_visible(i, j)));
        }
    }

    #[test]
    fn validation_never_panics(seed in any::<u64>(), drop in 0usize..12, swap in 0usize..12, retag in 0usize..12) {
        let mut layout = layout_from_seed(seed, 5, 5);
        let reserved = ReservedIds::default();
        let r = layout.reasoning_units.as_mut().unwrap();
        if drop < r.len() {
            r.remove(drop);
        }
        if swap + 1 < r.len() {
            r.swap(swap, swap + 1);
        }
        if retag < layout.context_units.len() {
            let u = &layout.context_units[retag];
            layout.context_units[retag] = SentenceUnit::new(u.index + 1, "", Vec::new(), Terminator::Eot, &reserved);
        }
        let _ = validate_layout(&layout);
        let _ = build_alignment(&layout);
    }

    #[test]
    fn rope_scores_depend_on_offset_only(
        q in prop::collection::vec(-2.0f32..2.0, 16),
        k in prop::collection::vec(-2.0f32..2.0, 16),
        m in 0u32..2048,
        n in 0u32..2048,
        d in 0u32..65536,
    ) {
        let cfg = RotaryConfig::new(16, 10_000.0).unwrap();
        let a = attention_score(&q, &k, m, n, &cfg).unwrap();
        let b = attention_score(&q, &k, m + d, n + d, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
    }

    #[test]
    fn merge_split_restores_cache_bits(lens in prop::collection::vec(1usize..5, 1..5), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..8)) {
        let config = ModelConfig::default();
        let w = init_weights(&config).unwrap();
        let mut state = DualKvState::new(&config, ReservedIds::default());
        let mut pos = 0u32;
        for len in lens {
            let mut toks: Vec<u32> = (0..len as u32).map(|x| 5 + x).collect();
            toks.push(0);
            let ids: Vec<u32> = (pos..pos + toks.len() as u32).collect();
            pos += toks.len() as u32;
            state.prefill_tokens(&w, &toks, &ids).unwrap();
        }
        let bits = |s: &DualKvState| s.input_cache.layers.iter().chain(&s.output_cache.layers).map(|l| l.bits()).collect::<Vec<_>>();
        let before = bits(&state);
        let ends = state.input_unit_ends().to_vec();
        for p in picks {
            state.merge(ends[p.index(ends.len())]).unwrap();
            state.split().unwrap();
        }
        prop_assert_eq!(bits(&state), before);
    }

    #[test]
    fn paradigm_ordering(profile in profile_strategy(), depth in 0usize..3, wpm in -2i32..4, dec in 0i32..6) {
        let cfg = config(wpm, dec);
        let depth = DepthLevel::ALL[depth];
        let delay = |p| simulate(&profile, ParadigmKind::new(p, depth), &cfg).unwrap().first_answer_delay_s;
        let (b, i, s) = (delay(Paradigm::Batch), delay(Paradigm::Interleaved), delay(Paradigm::Streaming));
        prop_assert!(s <= i && i <= b, "S={} I={} B={}", s, i, b);
        prop_assert_eq!(i, b);
        let tt = |p| ttft_tokens(&profile, p).unwrap();
        prop_assert_eq!(tt(Paradigm::Streaming), tt(Paradigm::Interleaved));
        prop_assert!(tt(Paradigm::Interleaved) <= tt(Paradigm::Batch));
    }

    #[test]
    fn delay_nonincreasing_in_decode_rate(profile in profile_strategy(), p in paradigm(), wpm in -2i32..4, dec in 0i32..6) {
        let slow = simulate(&profile, p, &config(wpm, dec)).unwrap();
        let fast = simulate(&profile, p, &config(wpm, dec + 1)).unwrap();
        prop_assert!(fast.first_answer_delay_s <= slow.first_answer_delay_s);
    }

    /// Faster arrival never makes the answer come later in absolute time.
    #[test]
    fn answer_time_nonincreasing_in_arrival_rate(profile in profile_strategy(), p in paradigm(), wpm in -2i32..4, dec in 0i32..6) {
        let slow = simulate(&profile, p, &config(wpm, dec)).unwrap();
        let fast = simulate(&profile, p, &config(wpm + 1, dec)).unwrap();
        prop_assert!(fast.first_answer_time_s <= slow.first_answer_time_s);
    }

    #[test]
    fn timeline_is_sorted(profile in profile_strategy(), p in paradigm()) {
        let r = simulate(&profile, p, &config(1, 3)).unwrap();
        prop_assert!(r.timeline.windows(2).all(|w| w[0].t <= w[1].t));
        prop_assert!(r.first_answer_time_s >= r.input_end_s || p.kind != Paradigm::Batch);
    }

    #[test]
    fn granularity_ignores_text(seed in any::<u64>(), word in "[a-z]{1,8}") {
        let mut layout = layout_from_seed(seed, 6, 5);
        let g = granularity_score(&layout).unwrap();
        let reserved = ReservedIds::default();
        for u in layout.reasoning_units.as_mut().unwrap() {
            let body = vec![Token::content(9, word.clone())];
            *u = SentenceUnit::new(u.index, word.clone(), body, u.terminator, &reserved);
        }
        prop_assert_eq!(granularity_score(&layout).unwrap(), g);
    }

    #[test]
    fn stricter_threshold_never_passes_more(words in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,4}", 2..5), hi in 0.0f64..1.0, lo in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let tok = streamthink::layout::WordTokenizer::new(ReservedIds::default(), 4096).unwrap();
        let reserved = ReservedIds::default();
        let context_units = words.iter().enumerate()
            .map(|(k, t)| SentenceUnit::new(k + 1, t.clone(), tok.encode(t), Terminator::Eos, &reserved))
            .collect();
        let mut reasoning: Vec<_> = words.iter().rev().enumerate()
            .map(|(k, t)| streamthink::layout::reasoning_unit(k + 1, t, Terminator::Eot, &tok))
            .collect();
        reasoning.push(streamthink::layout::reasoning_unit(words.len() + 1, "done", Terminator::Eor, &tok));
        let layout = SegmentLayout { context_units, reasoning_units: Some(reasoning), ..Default::default() };
        let at = |c| evaluate(&layout, &QualityThresholds { consistency_min: c, ..Default::default() }, &LocalEmbedding::default()).unwrap().pass;
        prop_assert!(!at(hi) || at(lo));
    }

    #[test]
    fn local_embedding_is_pure_and_unit_norm(text in "\\PC{0,60}") {
        let e = LocalEmbedding::default();
        let a = e.embed(std::slice::from_ref(&text)).unwrap();
        let b = e.embed(std::slice::from_ref(&text)).unwrap();
        prop_assert_eq!(&a, &b);
        let norm: f64 = a[0].iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5 || text.trim().is_empty() && norm.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Prefill events precede every decode that depends on them, and the engine
    /// agrees with the simulator's streaming timeline.
    #[test]
    fn coupled_engine_matches_simulator(seed in any::<u64>(), wpm in 30.0f64..400.0, rate in 1.0f64..50.0) {
        let layout = layout_from_seed(seed, 4, 5);
        let w = init_weights(&ModelConfig::default()).unwrap();
        let alignment = build_alignment(&layout).unwrap();
        let arrival = ArrivalModel { words_per_minute: wpm, tokens_per_word: 1.3 };
        let schedule = streamthink::latency::coupled_schedule(&layout, &arrival);
        let plan = DecodePlan::forced(&layout, &alignment).unwrap();
        let mut sampler = Sampler::new(SamplerConfig::greedy());
        let run = run_streaming_decode(&w, &schedule, &plan, &mut sampler, DecodeTiming::new(rate), ReservedIds::default()).unwrap();
        prop_assert!(run.events.windows(2).all(|e| e[0].t <= e[1].t));
        let mut prefilled = 0;
        for e in &run.events {
            match e.event {
                EventKind::Prefill => prefilled += 1,
                EventKind::Decode => {
                    let need = plan.units.get(e.unit - 1).map_or(layout.input_unit_count(), |u| u.visible_inputs);
                    prop_assert!(prefilled >= need);
                }
                _ => {}
            }
        }
        let sim = simulate(
            &LatencyProfile::from_layout(&layout).unwrap(),
            ParadigmKind::new(Paradigm::Streaming, DepthLevel::GlobalThinking),
            &SimulationConfig::new(arrival, DecodeModel::new(rate)),
        ).unwrap();
        let t = run.first_answer_time.unwrap();
        prop_assert!((t - sim.first_answer_time_s).abs() <= 1e-9 * t.max(1.0));
    }
}
