//! Additive shares with optional information-theoretic MACs.
//!
//! Shares live in `Z_{2^128}` while the data ring is `Z_{2^64}`: the low 64
//! bits of a reconstructed payload are the [`RingElement`], and the upper 64
//! bits give the MAC relation its slack (the SPDZ2k layout with k = s = 64).
//! A single additive tamper whose effect reaches the low 64 bits survives the
//! MAC relation only with probability at most `2^-64`.

use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::MpcError;
use crate::fixed::RingElement;

/// One party's share of a value together with its MAC share.
///
/// `mac` is zero (and ignored) when the computation runs without MACs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthShare {
    pub value: u128,
    pub mac: u128,
}

impl AuthShare {
    pub const ZERO: AuthShare = AuthShare { value: 0, mac: 0 };

    pub fn new(value: u128, mac: u128) -> Self {
        AuthShare { value, mac }
    }

    /// Multiplies by a public ring constant.
    pub fn scale(self, c: u128) -> Self {
        AuthShare {
            value: self.value.wrapping_mul(c),
            mac: self.mac.wrapping_mul(c),
        }
    }
}

impl Add for AuthShare {
    type Output = AuthShare;
    fn add(self, rhs: AuthShare) -> AuthShare {
        AuthShare {
            value: self.value.wrapping_add(rhs.value),
            mac: self.mac.wrapping_add(rhs.mac),
        }
    }
}

impl AddAssign for AuthShare {
    fn add_assign(&mut self, rhs: AuthShare) {
        *self = *self + rhs;
    }
}

impl Sub for AuthShare {
    type Output = AuthShare;
    fn sub(self, rhs: AuthShare) -> AuthShare {
        AuthShare {
            value: self.value.wrapping_sub(rhs.value),
            mac: self.mac.wrapping_sub(rhs.mac),
        }
    }
}

impl SubAssign for AuthShare {
    fn sub_assign(&mut self, rhs: AuthShare) {
        *self = *self - rhs;
    }
}

impl Neg for AuthShare {
    type Output = AuthShare;
    fn neg(self) -> AuthShare {
        AuthShare {
            value: self.value.wrapping_neg(),
            mac: self.mac.wrapping_neg(),
        }
    }
}

impl std::iter::Sum for AuthShare {
    fn sum<I: Iterator<Item = AuthShare>>(iter: I) -> AuthShare {
        iter.fold(AuthShare::ZERO, |acc, s| acc + s)
    }
}

/// A share tagged with the party that holds it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub party_id: usize,
    pub payload: u128,
    pub mac: Option<u128>,
}

/// The global MAC key `alpha`, held only as per-party shares.
///
/// Each share is uniform in `[0, 2^64)`; the key is their sum in `Z_{2^128}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacKey {
    shares: Vec<u128>,
}

impl MacKey {
    pub fn random<R: RngCore>(n: usize, rng: &mut R) -> Self {
        MacKey {
            shares: (0..n).map(|_| rng.random::<u64>() as u128).collect(),
        }
    }

    pub fn from_shares(shares: Vec<u128>) -> Self {
        MacKey { shares }
    }

    pub fn share(&self, party: usize) -> u128 {
        self.shares[party]
    }

    pub fn n_parties(&self) -> usize {
        self.shares.len()
    }

    pub fn global(&self) -> u128 {
        self.shares
            .iter()
            .fold(0u128, |acc, s| acc.wrapping_add(*s))
    }
}

/// Uniform additive shares of a 128-bit value.
pub(crate) fn split<R: RngCore>(value: u128, n: usize, rng: &mut R) -> Vec<u128> {
    let mut out = Vec::with_capacity(n);
    let mut acc = 0u128;
    for _ in 1..n {
        let r: u128 = rng.random();
        acc = acc.wrapping_add(r);
        out.push(r);
    }
    out.push(value.wrapping_sub(acc));
    out
}

/// Shares a value with MACs under `key`.
pub fn share_authenticated<R: RngCore>(value: u128, key: &MacKey, rng: &mut R) -> Vec<AuthShare> {
    let n = key.n_parties();
    let values = split(value, n, rng);
    let macs = split(value.wrapping_mul(key.global()), n, rng);
    values
        .into_iter()
        .zip(macs)
        .map(|(value, mac)| AuthShare { value, mac })
        .collect()
}

/// Additively shares `value` among `n` parties without MACs.
pub fn share<R: RngCore>(
    value: RingElement,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Share>, MpcError> {
    if n < 2 {
        return Err(MpcError::TooFewParties(n));
    }
    Ok(split(value.0 as u128, n, rng)
        .into_iter()
        .enumerate()
        .map(|(party_id, payload)| Share {
            party_id,
            payload,
            mac: None,
        })
        .collect())
}

/// Sums one share per party. With a key, the MAC relation is verified first.
pub fn reconstruct(shares: &[Share], key: Option<&MacKey>) -> Result<RingElement, MpcError> {
    let mut seen = vec![false; shares.len()];
    for s in shares {
        if s.party_id >= shares.len() || std::mem::replace(&mut seen[s.party_id], true) {
            return Err(MpcError::Malformed(format!(
                "expected one share per party, got party {} twice or out of range",
                s.party_id
            )));
        }
    }
    let payload = shares
        .iter()
        .fold(0u128, |acc, s| acc.wrapping_add(s.payload));
    if let Some(key) = key {
        if key.n_parties() != shares.len() {
            return Err(MpcError::Malformed("MAC key party count mismatch".into()));
        }
        let mut mac = 0u128;
        for s in shares {
            let m = s
                .mac
                .ok_or_else(|| MpcError::IntegrityFailure("share without MAC".into()))?;
            mac = mac.wrapping_add(m);
        }
        if mac != payload.wrapping_mul(key.global()) {
            return Err(MpcError::IntegrityFailure(
                "MAC relation does not hold".into(),
            ));
        }
    }
    Ok(RingElement(payload as u64))
}

/// Converts per-party authenticated shares into tagged [`Share`]s.
pub fn tag(shares: &[AuthShare], with_macs: bool) -> Vec<Share> {
    shares
        .iter()
        .enumerate()
        .map(|(party_id, s)| Share {
            party_id,
            payload: s.value,
            mac: with_macs.then_some(s.mac),
        })
        .collect()
}

/// Sums a per-party slice of 128-bit values.
pub fn open_sum(values: &[u128]) -> u128 {
    values.iter().fold(0u128, |acc, v| acc.wrapping_add(*v))
}
