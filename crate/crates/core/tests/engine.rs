use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use trendscope_core::engine::StoreKind;
use trendscope_core::intake::{CoarseNoiseParams, ProjectedEmbedding, ProjectionMatrix};
use trendscope_core::mpc::OpenFault;
use trendscope_core::synth::{brute_force_count, generate_corpus, near, prepare_all, CorpusSpec};
use trendscope_core::{
    Engine, EngineConfig, EngineError, EpochOutcome, EpochRange, MpcError, NoiseMode, QueryKind,
    QueryRequest,
};

const K: usize = 16;
const ELL: usize = 32;

fn zero_noise() -> NoiseMode {
    NoiseMode::zero().expect("test builds support zero noise")
}

fn engine(n: usize, eps_f_max: f64, noise: NoiseMode, macs: bool) -> Engine {
    let mut cfg = EngineConfig::new(n, K, eps_f_max);
    cfg.noise = noise;
    cfg.macs = macs;
    cfg.dealer_seed = 99;
    Engine::new(cfg).unwrap()
}

fn load(engine: &mut Engine, pes: &[ProjectedEmbedding]) {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for pe in pes {
        engine.donate(pe, &mut rng).unwrap();
    }
}

fn projected(
    spec: &CorpusSpec,
    seed: u64,
    params: &CoarseNoiseParams,
) -> (Vec<f64>, Vec<ProjectedEmbedding>, ProjectionMatrix) {
    let p = ProjectionMatrix::generate(spec.dim, K, 7);
    let corpus = generate_corpus(spec, seed);
    let pes = prepare_all(&corpus.messages, &p, params, seed).unwrap();
    let q = unit(p.project(&corpus.topic));
    (q, pes, p)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn req(kind: QueryKind, q: &[f64], radius: f64, epochs: EpochRange) -> QueryRequest {
    QueryRequest {
        kind,
        q: q.to_vec(),
        radius,
        threshold: None,
        epochs,
        eps: kind.is_fine().then_some(0.6),
    }
}

fn spec(epochs: usize, background: usize, topic: usize) -> CorpusSpec {
    CorpusSpec {
        dim: ELL,
        first_epoch: 1000,
        epochs,
        background_per_epoch: background,
        topic_per_epoch: topic,
        topic_spread: 0.35,
        spike: None,
    }
}

fn count(outcome: &EpochOutcome) -> f64 {
    match outcome {
        EpochOutcome::Count { value } => *value,
        EpochOutcome::Exact { count } => *count as f64,
        other => panic!("expected a count, got {other:?}"),
    }
}

fn bit(outcome: &EpochOutcome) -> bool {
    match outcome {
        EpochOutcome::Bit { fired } => *fired,
        other => panic!("expected a bit, got {other:?}"),
    }
}

#[test]
fn empty_store_counts_zero() {
    let mut e = engine(3, 1.0, zero_noise(), true);
    let q = unit(vec![1.0; K]);
    let fc = e
        .run_fc(&req(QueryKind::Fc, &q, 1.0, EpochRange::single(5)))
        .unwrap();
    assert_eq!(count(&fc.results[0].outcome), 0.0);
    let cc = e
        .run_cc(&req(QueryKind::Cc, &q, 1.0, EpochRange::single(5)))
        .unwrap();
    assert_eq!(count(&cc.results[0].outcome), 0.0);
}

#[test]
fn stored_query_point_matches_itself() {
    let (_, pes, _) = projected(&spec(1, 1, 0), 1, &CoarseNoiseParams::noiseless());
    let q: Vec<f64> = pes[0].x.iter().map(|v| v.decode()).collect();
    let mut e = engine(3, 1.0, zero_noise(), true);
    load(&mut e, &pes);
    let cc = e
        .run_cc(&req(QueryKind::Cc, &unit(q), 0.1, EpochRange::single(1000)))
        .unwrap();
    assert_eq!(count(&cc.results[0].outcome), 1.0);
}

#[test]
fn counts_match_brute_force_on_random_vectors() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let (_, pes, _) = projected(&spec(1, 200, 0), 2, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 10.0, zero_noise(), true);
    load(&mut e, &pes);
    for _ in 0..3 {
        let near_one = &pes[rand::Rng::random_range(&mut rng, 0..pes.len())];
        let q = unit(near_one.x.iter().map(|v| v.decode()).collect());
        let r = req(QueryKind::Fc, &q, 1.2, EpochRange::single(1000));
        let expect = brute_force_count(&pes, 1000, &r.q_fixed(), r.radius_sq_double(), false);
        assert!(expect > 0);
        let got = e.run_fc(&r).unwrap();
        assert_eq!(count(&got.results[0].outcome), expect as f64);
    }
}

#[test]
fn five_of_twenty_match() {
    let (q, pes, _) = projected(&spec(1, 15, 5), 4, &CoarseNoiseParams::noiseless());
    let r = req(QueryKind::Fc, &q, 0.9, EpochRange::single(1000));
    assert_eq!(
        brute_force_count(&pes, 1000, &r.q_fixed(), r.radius_sq_double(), false),
        5
    );
    let mut e = engine(3, 1.0, zero_noise(), true);
    load(&mut e, &pes);
    assert_eq!(count(&e.run_fc(&r).unwrap().results[0].outcome), 5.0);
}

#[test]
fn insufficient_budget_is_refused() {
    let mut e = engine(3, 1.0, NoiseMode::Live, true);
    let q = unit(vec![1.0; K]);
    let r = req(QueryKind::Fc, &q, 1.0, EpochRange::single(7));
    e.run_fc(&r).unwrap();
    let mut other = r.clone();
    other.radius = 0.5;
    let resp = e.run_fc(&other).unwrap();
    assert!(resp.any_refused());
    assert_eq!(
        resp.results[0].outcome,
        EpochOutcome::Refused {
            requested: 0.6,
            remaining: 0.4
        }
    );
    assert_eq!(e.ledger(0).remaining(7).as_f64(), 0.4);
}

#[test]
fn repeated_count_is_cached_and_charged_once() {
    let (q, pes, _) = projected(&spec(1, 10, 5), 5, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 1.0, NoiseMode::Live, true);
    load(&mut e, &pes);
    let r = req(QueryKind::Fc, &q, 0.9, EpochRange::single(1000));
    let a = e.run_fc(&r).unwrap();
    let b = e.run_fc(&r).unwrap();
    assert_eq!(count(&a.results[0].outcome), count(&b.results[0].outcome));
    assert!(b.results[0].cached);
    assert_eq!(b.total_charged, 0.0);
    for p in 0..3 {
        assert_eq!(e.ledger(p).charged(1000).as_f64(), 0.6);
    }
}

#[test]
fn threshold_queries_far_from_the_threshold() {
    let (q, pes, _) = projected(&spec(1, 0, 100), 6, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 5.0, NoiseMode::Live, true);
    load(&mut e, &pes);
    let mut low = req(QueryKind::Ft, &q, 2.0, EpochRange::single(1000));
    low.eps = Some(1.0);
    low.threshold = Some(10);
    let fired = e.run_ft(&low).unwrap();
    assert!(bit(&fired.results[0].outcome));
    assert_eq!(fired.total_charged, 1.0);

    let mut empty = low.clone();
    empty.epochs = EpochRange::single(2000);
    let quiet = e.run_ft(&empty).unwrap();
    assert!(!bit(&quiet.results[0].outcome));
    assert_eq!(quiet.total_charged, 0.0);
    assert_eq!(e.ledger(0).remaining(2000), e.ledger(0).eps_f_max());
}

#[test]
fn fired_threshold_draws_a_fresh_noisy_threshold() {
    let (q, pes, _) = projected(&spec(1, 0, 100), 7, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 5.0, NoiseMode::Live, true);
    load(&mut e, &pes);
    let mut r = req(QueryKind::Ft, &q, 2.0, EpochRange::single(1000));
    r.eps = Some(1.0);
    r.threshold = Some(10);
    e.run_ft(&r).unwrap();
    assert_eq!(e.pool().laplace_draws(0, 2.0), 1);
    assert!(e.state(0).thresholds.is_empty());
    e.run_ft(&r).unwrap();
    assert_eq!(e.pool().laplace_draws(0, 2.0), 2);
}

#[test]
fn below_threshold_alerts_are_free_and_reuse_one_draw() {
    let mut e = engine(2, 1.0, NoiseMode::Live, true);
    let q = unit(vec![1.0; K]);
    let mut r = req(QueryKind::Ft, &q, 0.5, EpochRange::single(3));
    r.eps = Some(1.0);
    r.threshold = Some(100);
    for _ in 0..200 {
        let resp = e.run_ft(&r).unwrap();
        assert!(!bit(&resp.results[0].outcome));
    }
    assert_eq!(e.ledger(0).charged(3).nanos(), 0);
    assert_eq!(e.pool().laplace_draws(0, 2.0), 1);
    assert_eq!(e.pool().laplace_draws(0, 4.0), 200);
}

#[test]
fn changing_eps_on_an_open_alert_is_rejected() {
    let mut e = engine(2, 1.0, NoiseMode::Live, true);
    let q = unit(vec![1.0; K]);
    let mut r = req(QueryKind::Ft, &q, 0.5, EpochRange::single(3));
    r.eps = Some(1.0);
    r.threshold = Some(100);
    e.run_ft(&r).unwrap();
    r.eps = Some(0.5);
    assert!(matches!(
        e.run_ft(&r),
        Err(EngineError::Mpc(MpcError::Malformed(_)))
    ));
}

#[test]
fn noiseless_coarse_equals_fine() {
    let (q, pes, _) = projected(&spec(2, 20, 6), 8, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 2.0, zero_noise(), true);
    load(&mut e, &pes);
    let range = EpochRange {
        from: 1000,
        to: 1001,
    };
    let fc = e.run_fc(&req(QueryKind::Fc, &q, 1.0, range)).unwrap();
    let cc = e.run_cc(&req(QueryKind::Cc, &q, 1.0, range)).unwrap();
    for (f, c) in fc.results.iter().zip(&cc.results) {
        assert_eq!(count(&f.outcome), count(&c.outcome));
    }
}

#[test]
fn coarse_queries_never_touch_the_ledger() {
    let (q, pes, _) = projected(&spec(1, 5, 3), 9, &CoarseNoiseParams::noiseless());
    let mut e = engine(2, 1.0, NoiseMode::Live, false);
    load(&mut e, &pes);
    let before = e.ledger(0).snapshot();
    let r = req(QueryKind::Cc, &q, 1.0, EpochRange::single(1000));
    for _ in 0..1000 {
        assert_eq!(e.run_cc(&r).unwrap().total_charged, 0.0);
    }
    assert_eq!(e.ledger(0).snapshot(), before);
}

#[test]
fn coarse_threshold_is_strict_and_consistent_with_count() {
    let (q, pes, _) = projected(&spec(1, 0, 6), 10, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 1.0, zero_noise(), true);
    // Five donations first, then the sixth.
    load(&mut e, &pes[..5]);
    let mut ct = req(QueryKind::Ct, &q, 2.0, EpochRange::single(1000));
    ct.threshold = Some(5);
    assert!(!bit(&e.run_ct(&ct).unwrap().results[0].outcome));
    load(&mut e, &pes[5..]);
    assert!(bit(&e.run_ct(&ct).unwrap().results[0].outcome));

    let (q2, pes2, _) = projected(
        &spec(4, 10, 4),
        11,
        &CoarseNoiseParams::new(2.0, 1e-5, 1.0).unwrap(),
    );
    let mut e = engine(3, 1.0, zero_noise(), true);
    load(&mut e, &pes2);
    let range = EpochRange {
        from: 1000,
        to: 1003,
    };
    for t in [1, 3, 4, 5, 8] {
        let mut ct = req(QueryKind::Ct, &q2, 1.2, range);
        ct.threshold = Some(t);
        let bits = e.run_ct(&ct).unwrap();
        let counts = e.run_cc(&req(QueryKind::Cc, &q2, 1.2, range)).unwrap();
        for (b, c) in bits.results.iter().zip(&counts.results) {
            assert_eq!(bit(&b.outcome), count(&c.outcome) > t as f64);
        }
    }
}

#[test]
fn seven_epoch_trend_charges_each_epoch() {
    let (q, pes, _) = projected(&spec(7, 3, 2), 12, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 1.0, NoiseMode::Live, true);
    load(&mut e, &pes);
    let range = EpochRange {
        from: 1000,
        to: 1006,
    };
    let fc = e.run_trend(&req(QueryKind::Fc, &q, 1.0, range)).unwrap();
    assert_eq!(fc.results.len(), 7);
    assert!((fc.total_charged - 4.2).abs() < 1e-12);
    let total: u64 = (1000..1007).map(|ep| e.ledger(1).charged(ep).nanos()).sum();
    assert_eq!(total, 4_200_000_000);
    let cc = e.run_trend(&req(QueryKind::Cc, &q, 1.0, range)).unwrap();
    assert_eq!(cc.results.len(), 7);
    assert_eq!(cc.total_charged, 0.0);
}

#[test]
fn exhausted_epoch_deletes_fine_store_only() {
    let (q, pes, _) = projected(&spec(1, 5, 5), 13, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 1.2, NoiseMode::Live, true);
    load(&mut e, &pes);
    let r = req(QueryKind::Fc, &q, 1.0, EpochRange::single(1000));
    e.run_fc(&r).unwrap();
    let mut r2 = r.clone();
    r2.radius = 0.8;
    let last = e.run_fc(&r2).unwrap();
    assert_eq!(last.total_charged, 0.6);
    for p in 0..3 {
        assert!(e.ledger(p).is_deleted(1000));
        assert!(e.state(p).store.epoch(1000).unwrap().fine.is_none());
    }
    let mut r3 = r.clone();
    r3.radius = 0.7;
    assert_eq!(
        e.run_fc(&r3).unwrap().results[0].outcome,
        EpochOutcome::Deleted
    );
    let mut ft = r3.clone();
    ft.kind = QueryKind::Ft;
    ft.threshold = Some(2);
    assert_eq!(
        e.run_ft(&ft).unwrap().results[0].outcome,
        EpochOutcome::Deleted
    );
    let cc_req = req(QueryKind::Cc, &q, 1.0, EpochRange::single(1000));
    let expect = brute_force_count(
        &pes,
        1000,
        &cc_req.q_fixed(),
        cc_req.radius_sq_double(),
        true,
    );
    let cc = e.run_cc(&cc_req).unwrap();
    assert_eq!(count(&cc.results[0].outcome), expect as f64);
}

#[test]
fn counts_grow_with_radius() {
    let (q, pes, _) = projected(
        &spec(1, 40, 20),
        14,
        &CoarseNoiseParams::new(4.0, 1e-5, 1.0).unwrap(),
    );
    let mut e = engine(2, 100.0, zero_noise(), false);
    load(&mut e, &pes);
    let mut last = (0.0, 0.0);
    for radius in [0.2, 0.5, 0.8, 1.0, 1.2, 1.4, 2.0] {
        let r = req(QueryKind::Fc, &q, radius, EpochRange::single(1000));
        let f = count(&e.run_fc(&r).unwrap().results[0].outcome);
        let c = count(
            &e.run_cc(&req(QueryKind::Cc, &q, radius, EpochRange::single(1000)))
                .unwrap()
                .results[0]
                .outcome,
        );
        assert!(f >= last.0 && c >= last.1, "radius {radius}");
        last = (f, c);
    }
    assert_eq!(last, (60.0, 60.0));
}

#[test]
fn ledger_charges_always_add_up() {
    let (q, pes, _) = projected(&spec(3, 5, 5), 15, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 2.0, NoiseMode::Live, true);
    load(&mut e, &pes);
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    for i in 0..25 {
        let kind = [QueryKind::Fc, QueryKind::Ft, QueryKind::Cc, QueryKind::Ct][i % 4];
        let from = 1000 + (i % 3) as i64;
        let mut r = req(
            kind,
            &q,
            0.5 + (i % 5) as f64 * 0.3,
            EpochRange { from, to: 1002 },
        );
        r.eps = match kind {
            QueryKind::Fc => Some([0.3, 0.5, 0.7][i % 3]),
            QueryKind::Ft => Some(0.5),
            _ => None,
        };
        r.threshold = kind.is_threshold().then_some(1 + (i % 4) as u64);
        r.q = near(&mut rng, &q, 0.05);
        e.run(&r).unwrap();
    }
    for p in 0..3 {
        let l = e.ledger(p);
        for ep in 1000..1003 {
            assert_eq!(
                l.charged(ep).nanos() + l.remaining(ep).nanos(),
                l.eps_f_max().nanos()
            );
        }
        assert_eq!(l.budget_digest(), e.ledger(0).budget_digest());
    }
}

#[test]
fn tampered_stored_share_aborts_without_output_or_charge() {
    let (q, pes, _) = projected(&spec(1, 5, 5), 17, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 2.0, NoiseMode::Live, true);
    load(&mut e, &pes);
    // First query attaches MACs to the stored shares.
    e.run_cc(&req(QueryKind::Cc, &q, 1.0, EpochRange::single(1000)))
        .unwrap();
    e.run_fc(&req(QueryKind::Fc, &q, 1.0, EpochRange::single(1000)))
        .unwrap();
    assert!(e.tamper_stored_share(1, 1000, StoreKind::Fine, 3, 0, 1 << 16));
    let before = e.ledger(0).snapshot();
    let mut r = req(QueryKind::Fc, &q, 0.7, EpochRange::single(1000));
    r.eps = Some(0.5);
    assert!(matches!(
        e.run_fc(&r),
        Err(EngineError::Mpc(MpcError::IntegrityFailure(_)))
    ));
    assert_eq!(e.ledger(0).snapshot(), before);
}

#[test]
fn tampered_opening_aborts() {
    let (q, pes, _) = projected(&spec(1, 5, 5), 18, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 2.0, NoiseMode::Live, true);
    load(&mut e, &pes);
    for open_index in [0, 1, 2] {
        e.inject_open_fault(
            2,
            OpenFault {
                open_index,
                element: 0,
                delta: 1,
            },
        );
        let r = req(QueryKind::Fc, &q, 1.0, EpochRange::single(1000));
        assert!(
            matches!(
                e.run_fc(&r),
                Err(EngineError::Mpc(MpcError::IntegrityFailure(_)))
            ),
            "open {open_index}"
        );
    }
    assert_eq!(e.ledger(0).charged(1000).nanos(), 0);
}

#[test]
fn without_macs_tampering_goes_unnoticed() {
    let (q, pes, _) = projected(&spec(1, 0, 4), 19, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 2.0, zero_noise(), false);
    load(&mut e, &pes);
    let r = req(QueryKind::Cc, &q, 1.2, EpochRange::single(1000));
    assert_eq!(
        brute_force_count(&pes, 1000, &r.q_fixed(), r.radius_sq_double(), true),
        4
    );
    assert_eq!(count(&e.run_cc(&r).unwrap().results[0].outcome), 4.0);
    // The stored square is untouched, so shifting x by d moves the distance
    // by -2 q.d; push against the largest query coordinate.
    let (coord, qc) = q
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap();
    assert!(8.0 * qc.abs() > 1.44);
    let shift = if qc > 0.0 {
        (4u128 << 16).wrapping_neg()
    } else {
        4 << 16
    };
    assert!(e.tamper_stored_share(0, 1000, StoreKind::Coarse, 0, coord, shift));
    assert_eq!(count(&e.run_cc(&r).unwrap().results[0].outcome), 3.0);
}

#[test]
fn restarted_server_is_reauthenticated_with_its_peers() {
    let (q, pes, _) = projected(&spec(1, 6, 6), 21, &CoarseNoiseParams::noiseless());
    let mut e = engine(3, 2.0, zero_noise(), true);
    load(&mut e, &pes);
    let r = req(QueryKind::Cc, &q, 1.0, EpochRange::single(1000));
    let before = count(&e.run_cc(&r).unwrap().results[0].outcome);
    // One server forgets its MACs, as after a reload from disk.
    for el in e
        .state_mut(2)
        .store
        .elements_mut(1000, StoreKind::Coarse)
        .unwrap()
        .values_mut()
    {
        el.authenticated = false;
        for s in el.x.iter_mut().chain(el.x_sq.iter_mut()) {
            s.mac = 0;
        }
    }
    assert_eq!(count(&e.run_cc(&r).unwrap().results[0].outcome), before);
    assert!(e
        .state(2)
        .store
        .elements(1000, StoreKind::Coarse)
        .unwrap()
        .values()
        .all(|el| el.authenticated));
}
