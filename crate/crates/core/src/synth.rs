//! Synthetic corpora and a plaintext reference count.
//!
//! A corpus is background noise (uniform random unit vectors) plus one
//! topic cluster around a fixed center, with an optional spike epoch.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::epoch::Epoch;
use crate::fixed::RingElement;
use crate::intake::{
    message_rng, prepare_message, CoarseNoiseParams, IntakeError, ProjectedEmbedding,
    ProjectionMatrix, RawEmbedding,
};

pub fn random_unit<R: RngCore + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A unit vector scattered around `center` with per-coordinate noise
/// `spread / sqrt(dim)`.
pub fn near<R: RngCore + ?Sized>(rng: &mut R, center: &[f64], spread: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, spread / (center.len() as f64).sqrt()).expect("finite spread");
    let v: Vec<f64> = center.iter().map(|c| c + normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub dim: usize,
    pub first_epoch: Epoch,
    pub epochs: usize,
    pub background_per_epoch: usize,
    pub topic_per_epoch: usize,
    pub topic_spread: f64,
    /// `(epoch offset, factor)`: that epoch carries `factor` times the
    /// usual number of topic messages.
    pub spike: Option<(usize, usize)>,
}

impl CorpusSpec {
    pub fn topic_count(&self, offset: usize) -> usize {
        match self.spike {
            Some((at, factor)) if at == offset => self.topic_per_epoch * factor,
            _ => self.topic_per_epoch,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub topic: Vec<f64>,
    pub messages: Vec<RawEmbedding>,
}

fn day_start(epoch: Epoch) -> DateTime<Utc> {
    DateTime::from_timestamp(epoch * 86_400, 0).expect("epoch in range")
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Corpus {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let topic = random_unit(&mut rng, spec.dim);
    let mut messages = Vec::new();
    for offset in 0..spec.epochs {
        let epoch = spec.first_epoch + offset as Epoch;
        let topical = spec.topic_count(offset);
        for i in 0..spec.background_per_epoch + topical {
            let v = if i < topical {
                near(&mut rng, &topic, spec.topic_spread)
            } else {
                random_unit(&mut rng, spec.dim)
            };
            messages.push(RawEmbedding {
                message_id: format!("s{seed}-e{epoch}-{i}"),
                timestamp: day_start(epoch) + Duration::seconds(i as i64 % 86_400),
                x_prime: v,
            });
        }
    }
    Corpus { topic, messages }
}

/// Runs the donor pipeline on every message with per-message randomness.
pub fn prepare_all(
    messages: &[RawEmbedding],
    p: &ProjectionMatrix,
    params: &CoarseNoiseParams,
    donor_seed: u64,
) -> Result<Vec<ProjectedEmbedding>, IntakeError> {
    messages
        .iter()
        .map(|m| prepare_message(m, p, params, &mut message_rng(donor_seed, &m.message_id)))
        .collect()
}

/// Squared distance between a stored fixed-point vector and the query, at
/// double scale, exactly as the servers compute it.
pub fn squared_distance_raw(x: &[RingElement], q: &[RingElement]) -> i64 {
    x.iter()
        .zip(q)
        .map(|(a, b)| {
            let d = a.signed() - b.signed();
            d * d
        })
        .sum()
}

/// Plaintext count of stored vectors within `a` of `q` (strict), in
/// one epoch, over the fine or perturbed copy.
pub fn brute_force_count(
    pes: &[ProjectedEmbedding],
    epoch: Epoch,
    q: &[RingElement],
    radius_sq_double: u64,
    coarse: bool,
) -> usize {
    pes.iter()
        .filter(|pe| pe.epoch == epoch)
        .filter(|pe| {
            let x = if coarse { &pe.x_tilde } else { &pe.x };
            squared_distance_raw(x, q) < radius_sq_double as i64
        })
        .count()
}
