use roundattn::engine::{Model, ModelConfig};
use roundattn::pipeline::{Mode, PipelineConfig, Session};
use roundattn::report::{cmd_compare, cmd_run, RunSettings};
use roundattn::selection::{DropPolicy, SelectionPolicy, Strategy};
use roundattn::store::{BlockKey, ConversationId, Half, Residency, StoreGeometry, TieredStore, DEFAULT_DEVICE_CAPACITY};
use roundattn::synthetic::synthetic_conversation;
use roundattn::Conversation;

fn small_model() -> ModelConfig {
    ModelConfig {
        num_layers: 6,
        num_heads: 2,
        d_model: 16,
        ..ModelConfig::default()
    }
}

fn top(fraction: f64) -> SelectionPolicy {
    SelectionPolicy::new(Strategy::TopPercent { fraction }).unwrap()
}

fn run_session(model: &Model, store: &mut TieredStore, id: u64, mode: Mode, conv: &Conversation) -> Vec<roundattn::TurnOutput> {
    let mut cfg = PipelineConfig::new(store.geometry().watershed, mode);
    cfg.max_decode_steps = 6;
    let mut s = Session::new(model, ConversationId(id), cfg).unwrap();
    conv.exchanges
        .iter()
        .map(|ex| s.run_turn(store, &ex.question, ex.answer.as_deref()).unwrap())
        .collect()
}

#[test]
fn top_percent_never_uses_more_device_memory_than_all() {
    let model = Model::new(small_model()).unwrap();
    let conv = synthetic_conversation(8, 10, 9, 4).unwrap();
    let geometry = StoreGeometry::new(6, 2, 16).unwrap();
    let mut a = TieredStore::new(geometry, DEFAULT_DEVICE_CAPACITY);
    let mut b = TieredStore::new(geometry, DEFAULT_DEVICE_CAPACITY);
    let pruned = run_session(&model, &mut a, 0, Mode::Round { policy: top(0.25) }, &conv);
    let full = run_session(&model, &mut b, 0, Mode::Round { policy: SelectionPolicy::new(Strategy::All).unwrap() }, &conv);
    for (p, f) in pruned.iter().zip(&full) {
        assert!(p.metrics.transfers.device_peak_bytes <= f.metrics.transfers.device_peak_bytes);
        assert!(p.metrics.upper_keys_attended <= f.metrics.upper_keys_attended);
    }
    let last = pruned.last().unwrap();
    assert!(last.metrics.upper_keys_attended < full.last().unwrap().metrics.upper_keys_attended);
}

#[test]
fn dropped_rounds_leave_the_store_and_the_candidate_set() {
    let model = Model::new(small_model()).unwrap();
    let conv = synthetic_conversation(12, 8, 8, 5).unwrap();
    let geometry = StoreGeometry::new(6, 2, 16).unwrap();
    let mut store = TieredStore::new(geometry, DEFAULT_DEVICE_CAPACITY);
    let mut cfg = PipelineConfig::new(2, Mode::Round { policy: top(0.1) });
    cfg.drop = DropPolicy {
        window: Some(2),
        protect_recent: 1,
    };
    cfg.max_decode_steps = 3;
    let mut s = Session::new(&model, ConversationId(9), cfg).unwrap();
    let mut dropped = Vec::new();
    for ex in &conv.exchanges {
        let out = s.run_turn(&mut store, &ex.question, ex.answer.as_deref()).unwrap();
        for k in &out.metrics.kept {
            assert!(!dropped.contains(k), "dropped round {k} was selected");
        }
        assert_eq!(out.metrics.candidate_rounds + dropped.len(), out.metrics.history_rounds);
        dropped.extend(out.metrics.dropped.iter().copied());
    }
    assert!(!dropped.is_empty());
    for &r in &dropped {
        let key = BlockKey::new(ConversationId(9), r, Half::Upper);
        assert_eq!(store.residency(&key), Some(Residency::Dropped));
        let lower = BlockKey::new(ConversationId(9), r, Half::Lower);
        assert_eq!(store.residency(&lower), Some(Residency::Device));
    }
    store.check_accounting().unwrap();
}

#[test]
fn generated_history_still_matches_baseline_under_all() {
    let model = Model::new(small_model()).unwrap();
    let conv = synthetic_conversation(4, 6, 6, 8).unwrap();
    let geometry = StoreGeometry::new(6, 3, 16).unwrap();
    let mut store = TieredStore::new(geometry, DEFAULT_DEVICE_CAPACITY);
    let all = Mode::Round {
        policy: SelectionPolicy::new(Strategy::All).unwrap(),
    };
    let mut a = Session::new(&model, ConversationId(0), PipelineConfig::new(3, all)).unwrap();
    let mut b = Session::new(&model, ConversationId(1), PipelineConfig::new(3, Mode::Baseline)).unwrap();
    for ex in &conv.exchanges {
        let x = a.run_turn(&mut store, &ex.question, None).unwrap();
        let y = b.run_turn(&mut store, &ex.question, None).unwrap();
        assert_eq!(x.answer, y.answer);
        assert_eq!(x.step_logits, y.step_logits);
    }
    assert_eq!(a.tokens(), b.tokens());
}

#[test]
fn compare_all_and_baseline_do_not_diverge() {
    let conv = synthetic_conversation(4, 8, 7, 2).unwrap();
    let settings = RunSettings::new(small_model(), 2, top(0.1));
    let out = cmd_compare(
        &settings,
        &[("c".into(), conv)],
        &[
            Mode::Round {
                policy: SelectionPolicy::new(Strategy::All).unwrap(),
            },
            Mode::Baseline,
        ],
    )
    .unwrap();
    for p in &out.report.policies {
        assert_eq!(p.divergence_tokens, 0, "{}", p.policy);
    }
}

#[test]
fn round_versus_token_granularity_on_four_rounds() {
    let conv = synthetic_conversation(4, 9, 9, 6).unwrap();
    let settings = RunSettings::new(small_model(), 2, top(0.5));
    let out = cmd_compare(
        &settings,
        &[("c".into(), conv)],
        &[Mode::Round { policy: top(0.5) }, Mode::Token],
    )
    .unwrap();
    let round = &out.report.policies[0];
    let token = &out.report.policies[1];
    assert_eq!(round.totals.max_h2d_events_per_turn, 1);
    assert_eq!(round.totals.upper_h2d_events, 3);
    assert!(token.totals.token_segments >= 3);
    assert!(token.totals.layer_touches >= 3 * 4);
}

#[test]
fn fifty_rounds_top_tenth_hides_most_history() {
    let conv = synthetic_conversation(50, 15, 14, 12).unwrap();
    let mut settings = RunSettings::new(ModelConfig::default(), 3, top(0.1));
    settings.max_decode_steps = 2;
    settings.drop = DropPolicy::disabled();
    let out = cmd_run(&settings, &[("long".into(), conv)]).unwrap();
    let t = &out.report.totals;
    let reduction = 1.0 - t.upper_history_tokens as f64 / t.history_tokens as f64;
    // K = ceil(0.1 * (n - 1)) of n - 1 prior rounds, all 32 tokens long
    let kept: usize = (1..50).map(|n: usize| (n as f64 * 0.1 - 1e-9).ceil() as usize).sum();
    let hist: usize = (1..50).sum();
    assert!((reduction - (1.0 - kept as f64 / hist as f64)).abs() < 1e-12);
    let last = out.report.conversations[0].turns.last().unwrap();
    assert_eq!(last.k, 5);
    let last_reduction = 1.0 - (last.upper_keys_attended - last.query_tokens) as f64 / last.history_tokens as f64;
    assert!(last_reduction >= 0.8, "{last_reduction}");
    assert_eq!(t.upper_h2d_events, 49);
}

#[test]
fn run_tokens_attended_below_baseline() {
    let conv = synthetic_conversation(6, 10, 10, 1).unwrap();
    let settings = RunSettings::new(small_model(), 2, top(0.2));
    let pruned = cmd_run(&settings, &[("c".into(), conv.clone())]).unwrap();
    let model = Model::new(small_model()).unwrap();
    let base = roundattn::report::run_mode(&model, &settings, Mode::Baseline, &[("c".into(), conv)]).unwrap();
    let p = &pruned.report.conversations[0].turns;
    let b = &base.report.conversations[0].turns;
    for (x, y) in p.iter().zip(b).skip(2) {
        assert!(x.upper_keys_attended < y.upper_keys_attended);
        assert_eq!(x.lower_keys_attended, y.lower_keys_attended);
    }
}
