//! Trusted preprocessing dealer.
//!
//! The dealer hands every party a consistent tape of correlated randomness:
//! multiplication triples, random shared bits and shared Laplace samples.
//! Parties consume their tapes in the same order, so the `i`-th triple on
//! one tape pairs with the `i`-th triple on every other tape.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::share::{share_authenticated, split, AuthShare, MacKey};
use super::MpcError;
use crate::fixed::{RingElement, MAX_MAGNITUDE};

/// Whether the dealer's Laplace samples are real or forced to zero.
///
/// The zero mode exists for oracle-equivalence tests and is compiled out of
/// release builds unless the `zero-noise` feature is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoiseMode {
    #[default]
    Live,
    #[cfg(any(debug_assertions, feature = "zero-noise"))]
    Zero,
}

impl NoiseMode {
    pub fn is_zero(self) -> bool {
        match self {
            NoiseMode::Live => false,
            #[cfg(any(debug_assertions, feature = "zero-noise"))]
            NoiseMode::Zero => true,
        }
    }

    /// Zero mode if this build supports it.
    pub fn zero() -> Option<NoiseMode> {
        #[cfg(any(debug_assertions, feature = "zero-noise"))]
        {
            Some(NoiseMode::Zero)
        }
        #[cfg(not(any(debug_assertions, feature = "zero-noise")))]
        {
            None
        }
    }
}

/// A multiplication triple `c = a * b` over `Z_{2^128}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub a: AuthShare,
    pub b: AuthShare,
    pub c: AuthShare,
}

/// How many records of each kind to generate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DealerCounts {
    pub triples: usize,
    pub bits: usize,
    /// `(scale, count)` pairs of Laplace samples.
    pub laplace: Vec<(f64, usize)>,
}

impl DealerCounts {
    pub fn laplace_total(&self) -> usize {
        self.laplace.iter().map(|(_, c)| c).sum()
    }
}

/// Key for a Laplace scale (the `f64` bit pattern; scales are positive).
pub fn scale_key(scale: f64) -> u64 {
    scale.to_bits()
}

/// Samples `Lap(scale)` by inverting the CDF.
pub fn sample_laplace<R: RngCore + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u == -0.5 {
            continue;
        }
        let magnitude = -(1.0 - 2.0 * u.abs()).ln() * scale;
        return if u < 0.0 { -magnitude } else { magnitude };
    }
}

/// A noise share handed out for a requested scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseShare {
    /// A sample of `Lap(requested scale)` at single fixed-point scale.
    Exact(AuthShare),
    /// A sample of `Lap(1)`; the caller multiplies by the public scale.
    Unit(AuthShare),
}

/// Source of correlated randomness for one party.
pub trait Preprocessing: Send {
    fn party_id(&self) -> usize;
    fn n_parties(&self) -> usize;
    /// This party's share of the global MAC key, if MACs are enabled.
    fn mac_key_share(&self) -> Option<u128>;
    fn triples(&mut self, count: usize) -> Result<Vec<Triple>, MpcError>;
    fn bits(&mut self, count: usize) -> Result<Vec<AuthShare>, MpcError>;
    fn laplace(&mut self, scale: f64, count: usize) -> Result<Vec<NoiseShare>, MpcError>;
}

/// The trusted dealer: a seeded generator that knows the MAC key.
pub struct Dealer {
    n: usize,
    key: Option<MacKey>,
    rng: ChaCha20Rng,
    noise: NoiseMode,
    seed_commitment: [u8; 32],
}

impl Dealer {
    pub fn new(n: usize, seed: u64, macs: bool, noise: NoiseMode) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = macs.then(|| MacKey::random(n, &mut rng));
        Dealer {
            n,
            key,
            rng,
            noise,
            seed_commitment: seed_commitment(seed),
        }
    }

    pub fn n_parties(&self) -> usize {
        self.n
    }

    pub fn mac_key(&self) -> Option<&MacKey> {
        self.key.as_ref()
    }

    pub fn seed_commitment(&self) -> [u8; 32] {
        self.seed_commitment
    }

    /// Position in the underlying random stream.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// A dealer that continues from `position` of the stream seeded by `seed`.
    pub fn resume(n: usize, seed: u64, macs: bool, noise: NoiseMode, position: u128) -> Self {
        let mut d = Dealer::new(n, seed, macs, noise);
        d.rng.set_word_pos(position);
        d
    }

    fn deal(&mut self, value: u128) -> Vec<AuthShare> {
        match &self.key {
            Some(key) => share_authenticated(value, key, &mut self.rng),
            None => split(value, self.n, &mut self.rng)
                .into_iter()
                .map(|value| AuthShare { value, mac: 0 })
                .collect(),
        }
    }

    pub fn triple(&mut self) -> Vec<Triple> {
        let a: u128 = self.rng.random();
        let b: u128 = self.rng.random();
        let sa = self.deal(a);
        let sb = self.deal(b);
        let sc = self.deal(a.wrapping_mul(b));
        (0..self.n)
            .map(|i| Triple {
                a: sa[i],
                b: sb[i],
                c: sc[i],
            })
            .collect()
    }

    pub fn bit(&mut self) -> Vec<AuthShare> {
        let b = self.rng.random::<bool>() as u128;
        self.deal(b)
    }

    /// Shares of one `Lap(scale)` sample encoded at single scale.
    pub fn laplace(&mut self, scale: f64) -> Vec<AuthShare> {
        let sample = if self.noise.is_zero() {
            0.0
        } else {
            sample_laplace(&mut self.rng, scale).clamp(-(MAX_MAGNITUDE - 1.0), MAX_MAGNITUDE - 1.0)
        };
        self.deal(RingElement::encode(sample).0 as u128)
    }

    /// Produces one tape per party.
    pub fn generate(&mut self, counts: &DealerCounts) -> Vec<DealerTape> {
        let mut tapes: Vec<DealerTape> = (0..self.n)
            .map(|party_id| DealerTape {
                party_id,
                n_parties: self.n,
                mac_key_share: self.key.as_ref().map(|k| k.share(party_id)),
                seed_commitment: self.seed_commitment,
                triples: Vec::with_capacity(counts.triples),
                bits: Vec::with_capacity(counts.bits),
                laplace: BTreeMap::new(),
                cursor: TapeCursor::default(),
            })
            .collect();
        for _ in 0..counts.triples {
            for (tape, t) in tapes.iter_mut().zip(self.triple()) {
                tape.triples.push(t);
            }
        }
        for _ in 0..counts.bits {
            for (tape, b) in tapes.iter_mut().zip(self.bit()) {
                tape.bits.push(b);
            }
        }
        for &(scale, count) in &counts.laplace {
            for _ in 0..count {
                for (tape, s) in tapes.iter_mut().zip(self.laplace(scale)) {
                    tape.laplace.entry(scale_key(scale)).or_default().push(s);
                }
            }
        }
        tapes
    }
}

pub fn seed_commitment(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dealer-seed");
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// Generates consistent tapes for `n` parties.
pub fn dealer_generate(n: usize, counts: &DealerCounts, seed: u64, macs: bool) -> Vec<DealerTape> {
    Dealer::new(n, seed, macs, NoiseMode::Live).generate(counts)
}

/// Read positions into a tape; persisted so restarts never reuse records.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeCursor {
    pub triples: usize,
    pub bits: usize,
    pub laplace: BTreeMap<u64, usize>,
}

/// One party's finite tape of preprocessed material.
#[derive(Clone, Debug, PartialEq)]
pub struct DealerTape {
    pub party_id: usize,
    pub n_parties: usize,
    pub mac_key_share: Option<u128>,
    pub seed_commitment: [u8; 32],
    pub triples: Vec<Triple>,
    pub bits: Vec<AuthShare>,
    pub laplace: BTreeMap<u64, Vec<AuthShare>>,
    pub cursor: TapeCursor,
}

impl DealerTape {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty() && self.bits.is_empty() && self.laplace.values().all(Vec::is_empty)
    }

    pub fn remaining_triples(&self) -> usize {
        self.triples.len() - self.cursor.triples
    }

    pub fn remaining_bits(&self) -> usize {
        self.bits.len() - self.cursor.bits
    }

    fn remaining_laplace(&self, key: u64) -> usize {
        let total = self.laplace.get(&key).map_or(0, Vec::len);
        total - self.cursor.laplace.get(&key).copied().unwrap_or(0)
    }

    fn take_laplace(&mut self, key: u64, count: usize) -> Vec<AuthShare> {
        let at = self.cursor.laplace.entry(key).or_insert(0);
        let out = self.laplace[&key][*at..*at + count].to_vec();
        *at += count;
        out
    }
}

impl Preprocessing for DealerTape {
    fn party_id(&self) -> usize {
        self.party_id
    }

    fn n_parties(&self) -> usize {
        self.n_parties
    }

    fn mac_key_share(&self) -> Option<u128> {
        self.mac_key_share
    }

    fn triples(&mut self, count: usize) -> Result<Vec<Triple>, MpcError> {
        if self.remaining_triples() < count {
            return Err(MpcError::DealerExhausted("triples"));
        }
        let at = self.cursor.triples;
        self.cursor.triples += count;
        Ok(self.triples[at..at + count].to_vec())
    }

    fn bits(&mut self, count: usize) -> Result<Vec<AuthShare>, MpcError> {
        if self.remaining_bits() < count {
            return Err(MpcError::DealerExhausted("bits"));
        }
        let at = self.cursor.bits;
        self.cursor.bits += count;
        Ok(self.bits[at..at + count].to_vec())
    }

    fn laplace(&mut self, scale: f64, count: usize) -> Result<Vec<NoiseShare>, MpcError> {
        let exact = scale_key(scale);
        if self.remaining_laplace(exact) >= count {
            return Ok(self
                .take_laplace(exact, count)
                .into_iter()
                .map(NoiseShare::Exact)
                .collect());
        }
        let unit = scale_key(1.0);
        if self.remaining_laplace(unit) >= count {
            return Ok(self
                .take_laplace(unit, count)
                .into_iter()
                .map(NoiseShare::Unit)
                .collect());
        }
        Err(MpcError::DealerExhausted("laplace"))
    }
}

#[derive(Default)]
struct PartyQueues {
    triples: VecDeque<Triple>,
    bits: VecDeque<AuthShare>,
    laplace: BTreeMap<u64, VecDeque<AuthShare>>,
}

struct PoolInner {
    dealer: Dealer,
    queues: Vec<PartyQueues>,
    batch: usize,
    laplace_draws: Vec<BTreeMap<u64, u64>>,
}

/// An on-demand dealer shared by in-process parties.
///
/// Whenever a party runs short, a batch is generated for every party at
/// once, which keeps all queues aligned.
#[derive(Clone)]
pub struct DealerPool {
    inner: Arc<Mutex<PoolInner>>,
    mac_key: Option<MacKey>,
}

impl DealerPool {
    pub fn new(dealer: Dealer) -> Self {
        let n = dealer.n_parties();
        let mac_key = dealer.mac_key().cloned();
        DealerPool {
            inner: Arc::new(Mutex::new(PoolInner {
                dealer,
                queues: (0..n).map(|_| PartyQueues::default()).collect(),
                batch: 4096,
                laplace_draws: vec![BTreeMap::new(); n],
            })),
            mac_key,
        }
    }

    pub fn handle(&self, party: usize) -> PoolHandle {
        PoolHandle {
            party,
            n: self
                .inner
                .lock()
                .expect("dealer pool poisoned")
                .queues
                .len(),
            mac_key_share: self.mac_key.as_ref().map(|k| k.share(party)),
            inner: Arc::clone(&self.inner),
        }
    }

    pub fn mac_key(&self) -> Option<&MacKey> {
        self.mac_key.as_ref()
    }

    /// Laplace samples of `scale` consumed by `party` so far.
    pub fn laplace_draws(&self, party: usize, scale: f64) -> u64 {
        let inner = self.inner.lock().expect("dealer pool poisoned");
        inner.laplace_draws[party]
            .get(&scale_key(scale))
            .copied()
            .unwrap_or(0)
    }
}

/// Preprocessing for a server that runs its own copy of the dealer and
/// keeps only its own shares.
///
/// Every server seeded alike sees the same stream, so material lines up as
/// long as all servers make the same sequence of requests, which the
/// protocol guarantees. Anyone holding the seed learns every share, so
/// this only suits test deployments; production servers read tapes.
pub struct SeededDealer {
    dealer: Dealer,
    party: usize,
    laplace_draws: BTreeMap<u64, u64>,
}

impl SeededDealer {
    pub fn new(party: usize, dealer: Dealer) -> Self {
        SeededDealer {
            dealer,
            party,
            laplace_draws: BTreeMap::new(),
        }
    }

    pub fn position(&self) -> u128 {
        self.dealer.position()
    }

    pub fn laplace_draws(&self, scale: f64) -> u64 {
        self.laplace_draws
            .get(&scale_key(scale))
            .copied()
            .unwrap_or(0)
    }
}

impl Preprocessing for SeededDealer {
    fn party_id(&self) -> usize {
        self.party
    }

    fn n_parties(&self) -> usize {
        self.dealer.n_parties()
    }

    fn mac_key_share(&self) -> Option<u128> {
        self.dealer.mac_key().map(|k| k.share(self.party))
    }

    fn triples(&mut self, count: usize) -> Result<Vec<Triple>, MpcError> {
        Ok((0..count)
            .map(|_| self.dealer.triple()[self.party])
            .collect())
    }

    fn bits(&mut self, count: usize) -> Result<Vec<AuthShare>, MpcError> {
        Ok((0..count).map(|_| self.dealer.bit()[self.party]).collect())
    }

    fn laplace(&mut self, scale: f64, count: usize) -> Result<Vec<NoiseShare>, MpcError> {
        *self.laplace_draws.entry(scale_key(scale)).or_insert(0) += count as u64;
        Ok((0..count)
            .map(|_| NoiseShare::Exact(self.dealer.laplace(scale)[self.party]))
            .collect())
    }
}

/// One party's view of a [`DealerPool`].
pub struct PoolHandle {
    party: usize,
    n: usize,
    mac_key_share: Option<u128>,
    inner: Arc<Mutex<PoolInner>>,
}

impl Preprocessing for PoolHandle {
    fn party_id(&self) -> usize {
        self.party
    }

    fn n_parties(&self) -> usize {
        self.n
    }

    fn mac_key_share(&self) -> Option<u128> {
        self.mac_key_share
    }

    fn triples(&mut self, count: usize) -> Result<Vec<Triple>, MpcError> {
        let mut inner = self.inner.lock().expect("dealer pool poisoned");
        let have = inner.queues[self.party].triples.len();
        if have < count {
            let make = (count - have).max(inner.batch);
            for _ in 0..make {
                let t = inner.dealer.triple();
                for (q, t) in inner.queues.iter_mut().zip(t) {
                    q.triples.push_back(t);
                }
            }
        }
        Ok(inner.queues[self.party].triples.drain(..count).collect())
    }

    fn bits(&mut self, count: usize) -> Result<Vec<AuthShare>, MpcError> {
        let mut inner = self.inner.lock().expect("dealer pool poisoned");
        let have = inner.queues[self.party].bits.len();
        if have < count {
            let make = (count - have).max(inner.batch);
            for _ in 0..make {
                let b = inner.dealer.bit();
                for (q, b) in inner.queues.iter_mut().zip(b) {
                    q.bits.push_back(b);
                }
            }
        }
        Ok(inner.queues[self.party].bits.drain(..count).collect())
    }

    fn laplace(&mut self, scale: f64, count: usize) -> Result<Vec<NoiseShare>, MpcError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let key = scale_key(scale);
        let mut inner = self.inner.lock().expect("dealer pool poisoned");
        let have = inner.queues[self.party]
            .laplace
            .get(&key)
            .map_or(0, VecDeque::len);
        // Laplace samples are generated exactly on demand: the draw count is
        // observable and must match the mechanism's consumption.
        for _ in have..count {
            let s = inner.dealer.laplace(scale);
            for (q, s) in inner.queues.iter_mut().zip(s) {
                q.laplace.entry(key).or_default().push_back(s);
            }
        }
        *inner.laplace_draws[self.party].entry(key).or_insert(0) += count as u64;
        let queue = inner.queues[self.party]
            .laplace
            .get_mut(&key)
            .expect("queue filled above");
        Ok(queue.drain(..count).map(NoiseShare::Exact).collect())
    }
}
