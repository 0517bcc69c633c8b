use proptest::prelude::*;

use roundattn::conversation::{Round, Span};
use roundattn::engine::LayerAttention;
use roundattn::memory::{footprint_report, memory_ratio, FootprintParams};
use roundattn::selection::{
    select, select_adaptive, select_fixed, select_top_percent, top_percent_count,
    update_activity_and_drop, ActivityLedger, DropPolicy, SelectionPolicy, Strategy as Pick,
};
use roundattn::stats::{
    aggregate_round_attention, detect_watershed, kl_curve, kl_divergence, normalize, spearman,
    KlCurve, RoundDistribution, Segment, WatershedCriterion, KL_EPSILON,
};
use roundattn::store::{ConversationId, Half, StoreGeometry, TieredStore};

fn dist(raw: Vec<f64>) -> RoundDistribution {
    let n = raw.len();
    RoundDistribution::new(3, Segment::Question, (0..n).collect(), raw).unwrap()
}

fn raw_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, 1..40)
}

fn prob_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
        let z: f64 = v.iter().sum();
        v.into_iter().map(|x| x / z).collect()
    })
}

fn rounds_from(lens: &[(usize, usize)]) -> Vec<Round> {
    let mut pos = 0;
    lens.iter()
        .enumerate()
        .map(|(index, &(q, a))| {
            let r = Round {
                index,
                q_span: Span::new(pos, pos + q),
                a_span: Span::new(pos + q, pos + q + a),
            };
            pos += q + a;
            r
        })
        .collect()
}

proptest! {
    #[test]
    fn normalized_masses_sum_to_one(raw in raw_vec()) {
        let (m, degenerate) = normalize(&raw).unwrap();
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(degenerate, raw.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(p in prob_vec(7), q in prob_vec(7)) {
        prop_assert!(kl_divergence(&p, &q, KL_EPSILON).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p, KL_EPSILON).unwrap(), 0.0);
    }

    #[test]
    fn kl_curve_is_non_negative(layers in prop::collection::vec(prob_vec(5), 2..8)) {
        let c = kl_curve(&layers).unwrap();
        prop_assert_eq!(c.values.len(), layers.len() - 1);
        prop_assert!(c.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn spearman_is_bounded(a in prop::collection::vec(0.0f64..1.0, 2..20), seed in 0u64..1000) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| (x * 7.0 + (i as f64) * (seed as f64 % 3.0)).sin()).collect();
        let r = spearman(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_threshold_is_monotone(raw in raw_vec(), v1 in 0.01f64..0.5, dv in 0.0f64..0.4) {
        let d = dist(raw);
        let lo = select_fixed(&d, v1);
        let hi = select_fixed(&d, v1 + dv);
        if !hi.fell_back {
            prop_assert!(hi.kept.iter().all(|k| lo.kept.contains(k)));
        }
        prop_assert!(!lo.kept.is_empty());
    }

    #[test]
    fn selection_is_scale_invariant(raw in raw_vec(), scale in 0.01f64..100.0) {
        let scaled: Vec<f64> = raw.iter().map(|x| x * scale).collect();
        let (a, b) = (dist(raw), dist(scaled));
        for s in [
            Pick::Fixed { v: 0.1 },
            Pick::TopPercent { fraction: 0.3 },
            Pick::Adaptive { kappa: 1.0 },
        ] {
            let p = SelectionPolicy::new(s).unwrap();
            prop_assert_eq!(select(&a, &p).kept, select(&b, &p).kept);
        }
    }

    #[test]
    fn top_percent_size_and_nesting(raw in raw_vec(), f1 in 0.01f64..1.0, df in 0.0f64..1.0, min in 1usize..4) {
        let d = dist(raw);
        let f2 = (f1 + df).min(1.0);
        let a = select_top_percent(&d, f1, min);
        let b = select_top_percent(&d, f2, min);
        let n = d.len();
        prop_assert_eq!(a.k(), top_percent_count(f1, n, min));
        prop_assert_eq!(a.k(), ((f1 * n as f64 - 1e-9).ceil() as usize).max(min).min(n));
        prop_assert!(a.kept.iter().all(|k| b.kept.contains(k)));
    }

    #[test]
    fn adaptive_kappa_is_monotone(raw in raw_vec(), k1 in -1.0f64..2.0, dk in 0.0f64..2.0) {
        let d = dist(raw);
        let lo = select_adaptive(&d, k1);
        let hi = select_adaptive(&d, k1 + dk);
        if !hi.fell_back {
            prop_assert!(hi.kept.iter().all(|k| lo.kept.contains(k)));
        }
    }

    #[test]
    fn aggregation_conserves_mass(
        lens in prop::collection::vec((1usize..4, 1usize..4), 2..5),
        seed in 0u32..10_000,
    ) {
        let rounds = rounds_from(&lens);
        let n = rounds.len() - 1;
        let seq = rounds[n].a_span.end;
        let scores: Vec<f32> = (0..seq * seq)
            .map(|c| {
                let (i, j) = (c / seq, c % seq);
                if j <= i { (((c as u32).wrapping_mul(2_654_435_761) ^ seed) % 1000) as f32 / 1000.0 } else { 0.0 }
            })
            .collect();
        let cap = LayerAttention::full(0, seq, scores);
        for seg in [Segment::Question, Segment::Answer] {
            let raw = aggregate_round_attention(&cap, &rounds, seg, n).unwrap();
            let span = seg.span(&rounds[n]);
            let prior_end = rounds[n].q_span.start;
            let mut total = 0.0;
            for i in span.range() {
                for j in 0..prior_end {
                    total += f64::from(cap.row(i)[j]);
                }
            }
            prop_assert!((raw.iter().sum::<f64>() - total).abs() < 1e-9);
            prop_assert!(raw.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn watershed_ignores_corpus_order(
        curves in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 6), 1..8),
        rot in 0usize..8,
    ) {
        let mk = |v: &Vec<f64>| KlCurve { num_layers: 7, values: v.clone() };
        let a: Vec<KlCurve> = curves.iter().map(mk).collect();
        let mut b = a.clone();
        b.reverse();
        let r = rot % b.len();
        b.rotate_left(r);
        for crit in [WatershedCriterion::LargestDrop, WatershedCriterion::Threshold { tau: 0.5 }] {
            let x = detect_watershed(&a, crit).unwrap();
            let y = detect_watershed(&b, crit).unwrap();
            prop_assert_eq!(x.layer, y.layer);
            prop_assert!(x.layer >= 1 && x.layer < 7);
        }
    }

    #[test]
    fn memory_identity(l in 2usize..100, w in 1usize..99, t in 1usize..200, k in 0usize..200, s in 1usize..4096, h in 1usize..4096) {
        prop_assume!(w < l && k <= t);
        let f = footprint_report(&FootprintParams { batch: 1, seq_len: s, hidden: h, layers: l, watershed: w, kept: k, total: t }).unwrap();
        prop_assert!((f.ratio - memory_ratio(l, w, k, t).unwrap()).abs() < 1e-12);
        prop_assert!(f.m_round <= f.m_orig as f64);
    }

    #[test]
    fn kept_rounds_are_never_dropped(
        picks in prop::collection::vec(prop::collection::vec(0usize..30, 0..3), 1..30),
        window in 1usize..6,
        protect in 0usize..3,
    ) {
        let mut ledger = ActivityLedger::new();
        let policy = DropPolicy { window: Some(window), protect_recent: protect };
        for (turn, pick) in picks.iter().enumerate() {
            ledger.register(turn, turn);
            let live = ledger.live_rounds(turn);
            let kept: Vec<usize> = pick.iter().filter(|k| live.contains(k)).copied().collect();
            let dropped = update_activity_and_drop(&mut ledger, &kept, turn, &policy);
            for d in &dropped {
                prop_assert!(!kept.contains(d));
                prop_assert!(*d + protect < ledger.len());
                prop_assert!(turn - ledger.last_active(*d).unwrap() >= window);
            }
        }
    }

    #[test]
    fn store_accounting_holds(ops in prop::collection::vec((0u8..5, 0usize..6, 1usize..5), 1..40)) {
        let g = StoreGeometry::new(6, 2, 4).unwrap();
        let mut store = TieredStore::new(g, 1 << 20);
        let c = ConversationId(3);
        let mut next = 0;
        for (op, r, tokens) in ops {
            let existing: Vec<usize> = (0..next).filter(|&x| x == r % next.max(1)).collect();
            let _ = match op {
                0 => {
                    let lower = vec![0.5; g.payload_len(Half::Lower, tokens)];
                    let upper = vec![0.25; g.payload_len(Half::Upper, tokens)];
                    let res = store.put_round(c, next, tokens, lower, upper);
                    if res.is_ok() { next += 1; }
                    res.map(|_| 0)
                }
                1 => store.fetch_upper(c, &existing),
                2 => store.writeback_upper(c, &existing),
                3 => store.drop_upper(c, &existing).map(|_| 0),
                _ => store.fetch_lower_all(c, &existing),
            };
            store.check_accounting().unwrap();
        }
        let ledger = store.ledger();
        let h2d: u64 = ledger.events.iter().filter(|e| e.direction == roundattn::store::Direction::H2d).map(|e| e.bytes).sum();
        prop_assert_eq!(h2d, ledger.h2d_bytes);
    }
}
