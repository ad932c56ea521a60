//! Fixtures for the criterion benchmarks: an in-process deployment holding
//! one epoch of donations, and the queries run against it.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use trendscope_core::intake::{CoarseNoiseParams, ProjectionMatrix};
use trendscope_core::synth::{generate_corpus, prepare_all, CorpusSpec};
use trendscope_core::{Engine, EngineConfig, Epoch, EpochRange, QueryKind, QueryRequest};

pub const EPOCH: Epoch = 19_000;

pub struct Fixture {
    pub engine: Engine,
    /// Projected, unit-length topic direction.
    pub q: Vec<f64>,
}

pub fn corpus_spec(ell: usize, elements: usize) -> CorpusSpec {
    CorpusSpec {
        dim: ell,
        first_epoch: EPOCH,
        epochs: 1,
        background_per_epoch: elements - elements / 10,
        topic_per_epoch: elements / 10,
        topic_spread: 0.35,
        spike: None,
    }
}

/// `parties` servers with `elements` donations of dimension `k` in [`EPOCH`].
pub fn fixture(parties: usize, k: usize, elements: usize, seed: u64) -> Fixture {
    let ell = 2 * k;
    let p = ProjectionMatrix::generate(ell, k, seed);
    let corpus = generate_corpus(&corpus_spec(ell, elements), seed);
    let mut cfg = EngineConfig::new(parties, k, 1e6);
    cfg.dealer_seed = seed;
    let mut engine = Engine::new(cfg).expect("valid engine config");
    let params = engine
        .setup_coarse(2.0, 1e-5, p.omega2())
        .expect("valid coarse params");
    let pes = prepare_all(&corpus.messages, &p, &params, seed).expect("unit corpus");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for pe in &pes {
        engine.donate(pe, &mut rng).expect("well-formed donation");
    }
    let q = p.project(&corpus.topic);
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    Fixture {
        engine,
        q: q.into_iter().map(|x| x / n).collect(),
    }
}

pub fn request(kind: QueryKind, q: &[f64], radius: f64) -> QueryRequest {
    QueryRequest {
        kind,
        q: q.to_vec(),
        radius,
        threshold: kind.is_threshold().then_some(10),
        epochs: EpochRange::single(EPOCH),
        eps: kind.is_fine().then_some(1e-3),
    }
}

/// Noise parameters for donor-side benchmarks.
pub fn coarse_params(p: &ProjectionMatrix) -> CoarseNoiseParams {
    CoarseNoiseParams::new(2.0, 1e-5, p.omega2()).expect("valid budget")
}
