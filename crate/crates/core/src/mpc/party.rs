//! Online protocol, written from one party's point of view.
//!
//! All operations are vectorized: a call processes a batch of independent
//! instances and spends one communication round per protocol layer, no
//! matter how large the batch is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::channel::Channel;
use super::dealer::{NoiseShare, Preprocessing, Triple};
use super::share::AuthShare;
use super::MpcError;
use crate::fixed::{RingElement, FRAC_BITS};

/// Magnitude limit for [`Party::secure_less_than`] operands (decoded units).
pub const COMPARISON_RANGE: f64 = (1u64 << 30) as f64;

/// Fault injected into this party's outgoing openings (test hook for the
/// malicious-detection path).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpenFault {
    /// Index of the `open` call to corrupt, counted from zero per session.
    pub open_index: usize,
    /// Element of that batch to corrupt.
    pub element: usize,
    pub delta: u128,
}

/// What a party sends the querier for one output value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OutputShare {
    pub party_id: usize,
    /// The opened value `y + a`, identical on every honest party.
    pub opened: u128,
    /// This party's payload shares of the mask triple `(a, b, c)`.
    pub mask: [u128; 3],
}

pub struct Party<'a> {
    id: usize,
    n: usize,
    chan: &'a mut dyn Channel,
    prep: &'a mut dyn Preprocessing,
    mac_key: Option<u128>,
    pending: Vec<(u128, u128)>,
    opens: usize,
    faults: Vec<OpenFault>,
}

impl<'a> Party<'a> {
    pub fn new(
        chan: &'a mut dyn Channel,
        prep: &'a mut dyn Preprocessing,
    ) -> Result<Self, MpcError> {
        if chan.party_id() != prep.party_id() || chan.n_parties() != prep.n_parties() {
            return Err(MpcError::Malformed(format!(
                "channel is party {}/{} but preprocessing is party {}/{}",
                chan.party_id(),
                chan.n_parties(),
                prep.party_id(),
                prep.n_parties()
            )));
        }
        if chan.n_parties() < 2 {
            return Err(MpcError::TooFewParties(chan.n_parties()));
        }
        Ok(Party {
            id: chan.party_id(),
            n: chan.n_parties(),
            mac_key: prep.mac_key_share(),
            chan,
            prep,
            pending: Vec::new(),
            opens: 0,
            faults: Vec::new(),
        })
    }

    pub fn with_faults(mut self, faults: Vec<OpenFault>) -> Self {
        self.faults = faults;
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn n_parties(&self) -> usize {
        self.n
    }

    pub fn macs_enabled(&self) -> bool {
        self.mac_key.is_some()
    }

    /// Shares of a public constant: party 0 holds the value.
    pub fn constant(&self, c: u128) -> AuthShare {
        AuthShare {
            value: if self.id == 0 { c } else { 0 },
            mac: self.mac_key.map_or(0, |k| k.wrapping_mul(c)),
        }
    }

    pub fn add_public(&self, x: AuthShare, c: u128) -> AuthShare {
        x + self.constant(c)
    }

    /// Broadcasts public values and returns every party's vector.
    pub fn exchange_public(&mut self, values: &[u128]) -> Result<Vec<Vec<u128>>, MpcError> {
        self.chan.exchange(values)
    }

    /// Exchanges payloads without recording them for the MAC check.
    fn open_raw(&mut self, values: Vec<u128>) -> Result<Vec<u128>, MpcError> {
        let all = self.chan.exchange(&values)?;
        let mut out = vec![0u128; values.len()];
        for (party, vs) in all.iter().enumerate() {
            if vs.len() != out.len() {
                return Err(MpcError::Malformed(format!(
                    "party {party} opened {} values, expected {}",
                    vs.len(),
                    out.len()
                )));
            }
            for (o, v) in out.iter_mut().zip(vs) {
                *o = o.wrapping_add(*v);
            }
        }
        Ok(out)
    }

    /// Opens shared values; each opening is checked at the next MAC check.
    pub fn open(&mut self, xs: &[AuthShare]) -> Result<Vec<u128>, MpcError> {
        let mut values: Vec<u128> = xs.iter().map(|s| s.value).collect();
        for f in self.faults.iter().filter(|f| f.open_index == self.opens) {
            if let Some(v) = values.get_mut(f.element) {
                *v = v.wrapping_add(f.delta);
            }
        }
        self.opens += 1;
        let opened = self.open_raw(values)?;
        if self.mac_key.is_some() {
            self.pending
                .extend(opened.iter().zip(xs).map(|(v, s)| (*v, s.mac)));
        }
        Ok(opened)
    }

    /// Batched MAC check over every value opened since the last check.
    pub fn check_macs(&mut self) -> Result<(), MpcError> {
        let Some(alpha) = self.mac_key else {
            return Ok(());
        };
        if self.pending.is_empty() {
            return Ok(());
        }
        let seed = self.coin_toss()?;
        let mut coins = ChaCha20Rng::from_seed(seed);
        let mut combined_value = 0u128;
        let mut combined_mac = 0u128;
        for (v, m) in self.pending.drain(..) {
            let chi = coins.random::<u64>() as u128;
            combined_value = combined_value.wrapping_add(chi.wrapping_mul(v));
            combined_mac = combined_mac.wrapping_add(chi.wrapping_mul(m));
        }
        let sigma = combined_mac.wrapping_sub(alpha.wrapping_mul(combined_value));
        let sigmas = self.commit_reveal(b"sigma", sigma)?;
        if sigmas.iter().fold(0u128, |a, s| a.wrapping_add(*s)) != 0 {
            return Err(MpcError::IntegrityFailure(
                "MAC check failed on opened values".into(),
            ));
        }
        Ok(())
    }

    fn coin_toss(&mut self) -> Result<[u8; 32], MpcError> {
        let mine: u128 = rand::rng().random();
        let seeds = self.commit_reveal(b"coin", mine)?;
        let mut h = Sha256::new();
        for s in seeds {
            h.update(s.to_le_bytes());
        }
        Ok(h.finalize().into())
    }

    /// Commits to a value, then reveals it; peers' openings are verified
    /// against their commitments.
    fn commit_reveal(&mut self, domain: &[u8], value: u128) -> Result<Vec<u128>, MpcError> {
        let nonce: u128 = rand::rng().random();
        let commit = |party: usize, value: u128, nonce: u128| -> [u128; 2] {
            let mut h = Sha256::new();
            h.update(domain);
            h.update((party as u64).to_le_bytes());
            h.update(value.to_le_bytes());
            h.update(nonce.to_le_bytes());
            let d: [u8; 32] = h.finalize().into();
            [
                u128::from_le_bytes(d[..16].try_into().expect("16 bytes")),
                u128::from_le_bytes(d[16..].try_into().expect("16 bytes")),
            ]
        };
        let commitments = self.chan.exchange(&commit(self.id, value, nonce))?;
        let reveals = self.chan.exchange(&[value, nonce])?;
        let mut out = Vec::with_capacity(self.n);
        for (party, (c, r)) in commitments.iter().zip(&reveals).enumerate() {
            if r.len() != 2 || c.as_slice() != commit(party, r[0], r[1]) {
                return Err(MpcError::IntegrityFailure(format!(
                    "party {party} opened a value that does not match its commitment"
                )));
            }
            out.push(r[0]);
        }
        Ok(out)
    }

    /// Beaver multiplication over the full ring (no rescaling).
    pub fn mul(&mut self, xs: &[AuthShare], ys: &[AuthShare]) -> Result<Vec<AuthShare>, MpcError> {
        assert_eq!(xs.len(), ys.len(), "mul operands differ in length");
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let triples = self.prep.triples(xs.len())?;
        let masked: Vec<AuthShare> = xs
            .iter()
            .zip(&triples)
            .map(|(x, t)| *x - t.a)
            .chain(ys.iter().zip(&triples).map(|(y, t)| *y - t.b))
            .collect();
        let opened = self.open(&masked)?;
        let (eps, delta) = opened.split_at(xs.len());
        Ok(triples
            .iter()
            .zip(eps.iter().zip(delta))
            .map(|(t, (e, d))| {
                t.c + t.b.scale(*e) + t.a.scale(*d) + self.constant(e.wrapping_mul(*d))
            })
            .collect())
    }

    /// Fixed-point multiplication: Beaver product followed by exact floor
    /// truncation, so the result is within `2^-FRAC_BITS` of the real product.
    ///
    /// Operands must satisfy `|x * y| < 2^(62 - 2 * FRAC_BITS)` in decoded units.
    pub fn beaver_multiply(
        &mut self,
        xs: &[AuthShare],
        ys: &[AuthShare],
    ) -> Result<Vec<AuthShare>, MpcError> {
        let products = self.mul(xs, ys)?;
        self.truncate(&products)
    }

    /// Uniformly random authenticated elements (the `a` leg of fresh triples).
    pub fn random_elements(&mut self, count: usize) -> Result<Vec<AuthShare>, MpcError> {
        Ok(self.prep.triples(count)?.into_iter().map(|t| t.a).collect())
    }

    /// Arithmetic shift right by `FRAC_BITS` of signed values `|z| < 2^62`.
    pub fn truncate(&mut self, zs: &[AuthShare]) -> Result<Vec<AuthShare>, MpcError> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let f = FRAC_BITS as usize;
        let bias: u128 = 1 << 62;
        let bits = self.prep.bits(zs.len() * 64)?;
        let rho = self.random_elements(zs.len())?;
        let masked: Vec<AuthShare> = zs
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let r: AuthShare = bits[j * 64..(j + 1) * 64]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.scale(1u128 << i))
                    .sum();
                self.add_public(*z, bias) + r + rho[j].scale(1u128 << 64)
            })
            .collect();
        let opened: Vec<u64> = self.open(&masked)?.into_iter().map(|c| c as u64).collect();
        let low_mask = (1u64 << f) - 1;
        let low_public: Vec<u64> = opened.iter().map(|c| c & low_mask).collect();
        let low_bits: Vec<&[AuthShare]> =
            (0..zs.len()).map(|j| &bits[j * 64..j * 64 + f]).collect();
        let low_borrow = self.bitwise_less_than(&low_public, &low_bits, f)?;
        let all_bits: Vec<&[AuthShare]> =
            (0..zs.len()).map(|j| &bits[j * 64..(j + 1) * 64]).collect();
        let wrap = self.bitwise_less_than(&opened, &all_bits, 64)?;
        Ok((0..zs.len())
            .map(|j| {
                let r_high: AuthShare = bits[j * 64 + f..(j + 1) * 64]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.scale(1u128 << i))
                    .sum();
                let c_high = (opened[j] >> f) as u128;
                self.constant(c_high.wrapping_sub(bias >> f)) - r_high - low_borrow[j]
                    + wrap[j].scale(1u128 << (64 - f))
            })
            .collect())
    }

    /// Shares of `[public < shared]` where the shared side is given as `m`
    /// bit shares (least significant first) per instance.
    fn bitwise_less_than(
        &mut self,
        public: &[u64],
        bits: &[&[AuthShare]],
        m: usize,
    ) -> Result<Vec<AuthShare>, MpcError> {
        debug_assert!((1..=64).contains(&m));
        let one = self.constant(1);
        // (less, equal) per bit, most significant first.
        let mut nodes: Vec<Vec<(AuthShare, AuthShare)>> = public
            .iter()
            .zip(bits)
            .map(|(p, bs)| {
                (0..m)
                    .rev()
                    .map(|i| {
                        if (p >> i) & 1 == 1 {
                            (AuthShare::ZERO, bs[i])
                        } else {
                            (bs[i], one - bs[i])
                        }
                    })
                    .collect()
            })
            .collect();
        let mut width = m;
        while width > 1 {
            let pairs = width / 2;
            let odd = width % 2 == 1;
            let root = pairs + odd as usize == 1;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for inst in &nodes {
                for p in 0..pairs {
                    let (hi, lo) = (inst[2 * p], inst[2 * p + 1]);
                    xs.push(hi.1);
                    ys.push(lo.0);
                    if !root {
                        xs.push(hi.1);
                        ys.push(lo.1);
                    }
                }
            }
            let prods = self.mul(&xs, &ys)?;
            let per_pair = if root { 1 } else { 2 };
            let mut it = prods.into_iter();
            for inst in nodes.iter_mut() {
                let mut next = Vec::with_capacity(pairs + odd as usize);
                for p in 0..pairs {
                    let hi = inst[2 * p];
                    let less = hi.0 + it.next().expect("product per pair");
                    let equal = if per_pair == 2 {
                        it.next().expect("equality product")
                    } else {
                        AuthShare::ZERO
                    };
                    next.push((less, equal));
                }
                if odd {
                    next.push(inst[width - 1]);
                }
                *inst = next;
            }
            width = pairs + odd as usize;
        }
        Ok(nodes.into_iter().map(|inst| inst[0].0).collect())
    }

    /// Shares of the sign bit `[z < 0]` for values with `|z| < 2^(width-1)`
    /// (in raw ring units).
    pub fn less_than_zero(
        &mut self,
        zs: &[AuthShare],
        width: u32,
    ) -> Result<Vec<AuthShare>, MpcError> {
        assert!(
            (2..=64).contains(&width),
            "comparison width {width} out of range"
        );
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let w = width as usize;
        let m = w - 1;
        let shift = 64 - w;
        let bits = self.prep.bits(zs.len() * w)?;
        let rho = self.random_elements(zs.len())?;
        let masked: Vec<AuthShare> = zs
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let r: AuthShare = bits[j * w..(j + 1) * w]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.scale(1u128 << (shift + i)))
                    .sum();
                z.scale(1u128 << shift) + r + rho[j].scale(1u128 << 64)
            })
            .collect();
        let public: Vec<u64> = self
            .open(&masked)?
            .into_iter()
            .map(|c| (c as u64) >> shift)
            .collect();
        let low_mask = if m == 64 { u64::MAX } else { (1u64 << m) - 1 };
        let low_public: Vec<u64> = public.iter().map(|p| p & low_mask).collect();
        let low_bits: Vec<&[AuthShare]> = (0..zs.len()).map(|j| &bits[j * w..j * w + m]).collect();
        let borrow = self.bitwise_less_than(&low_public, &low_bits, m)?;
        let tops: Vec<AuthShare> = (0..zs.len()).map(|j| bits[j * w + m]).collect();
        let both = self.mul(&tops, &borrow)?;
        let one = self.constant(1);
        Ok((0..zs.len())
            .map(|j| {
                let xor = tops[j] + borrow[j] - both[j].scale(2);
                if (public[j] >> m) & 1 == 1 {
                    one - xor
                } else {
                    xor
                }
            })
            .collect())
    }

    /// `[d < c]` for single-scale fixed-point `d` and public `c`.
    ///
    /// `d_bound` is public metadata bounding `|decode(d)|`; the protocol is
    /// only valid while `|d - c| < 2^30`.
    pub fn secure_less_than(
        &mut self,
        ds: &[AuthShare],
        c: RingElement,
        d_bound: f64,
    ) -> Result<Vec<AuthShare>, MpcError> {
        let reach = d_bound.abs() + c.decode().abs();
        if !(reach < COMPARISON_RANGE) {
            return Err(MpcError::RangeViolation {
                bound: reach,
                limit: COMPARISON_RANGE,
            });
        }
        let neg_c = (c.0 as u128).wrapping_neg();
        let zs: Vec<AuthShare> = ds.iter().map(|d| self.add_public(*d, neg_c)).collect();
        self.less_than_zero(&zs, 30 + FRAC_BITS + 1)
    }

    /// Shares of `Lap(scale)` samples encoded at double scale.
    pub fn laplace_double(&mut self, scale: f64, count: usize) -> Result<Vec<AuthShare>, MpcError> {
        let lift = RingElement::encode(scale).0 as u128;
        Ok(self
            .prep
            .laplace(scale, count)?
            .into_iter()
            .map(|s| match s {
                NoiseShare::Exact(s) => s.scale(1u128 << FRAC_BITS),
                NoiseShare::Unit(s) => s.scale(lift),
            })
            .collect())
    }

    /// Turns plain additive input shares into authenticated ones.
    ///
    /// Each input is masked by a fresh random authenticated element and the
    /// difference `e = x - a` is opened. Value shares stay as they were;
    /// only the MAC shares `mac(a) + alpha_i e` are new, so a party that
    /// reloads its raw shares can be re-authenticated alongside its peers.
    pub fn authenticate_inputs(&mut self, raw: &[u128]) -> Result<Vec<AuthShare>, MpcError> {
        if self.mac_key.is_none() {
            return Ok(raw
                .iter()
                .map(|v| AuthShare { value: *v, mac: 0 })
                .collect());
        }
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        let masks = self.random_elements(raw.len())?;
        let diffs: Vec<u128> = raw
            .iter()
            .zip(&masks)
            .map(|(x, a)| x.wrapping_sub(a.value))
            .collect();
        let opened = self.open_raw(diffs)?;
        Ok(raw
            .iter()
            .zip(&masks)
            .zip(opened)
            .map(|((x, a), e)| AuthShare {
                value: *x,
                mac: a.mac.wrapping_add(self.constant(e).mac),
            })
            .collect())
    }

    /// Opens values to every party after a successful MAC check.
    pub fn reveal(&mut self, ys: &[AuthShare]) -> Result<Vec<u128>, MpcError> {
        let opened = self.open(ys)?;
        self.check_macs()?;
        Ok(opened)
    }

    /// Prepares outputs for the querier: each value is opened under a
    /// one-time mask whose triple the querier verifies and strips. Nothing
    /// leaves this party unless the MAC check passes.
    pub fn output_to_querier(&mut self, ys: &[AuthShare]) -> Result<Vec<OutputShare>, MpcError> {
        let masks: Vec<Triple> = self.prep.triples(ys.len())?;
        let masked: Vec<AuthShare> = ys.iter().zip(&masks).map(|(y, t)| *y + t.a).collect();
        let opened = self.open(&masked)?;
        self.check_macs()?;
        Ok(opened
            .into_iter()
            .zip(masks)
            .map(|(opened, t)| OutputShare {
                party_id: self.id,
                opened,
                mask: [t.a.value, t.b.value, t.c.value],
            })
            .collect())
    }
}

/// Querier side of [`Party::output_to_querier`].
///
/// `per_party[p]` holds party `p`'s output shares. Fails with
/// [`MpcError::IntegrityFailure`] if the parties disagree on an opened value
/// or a mask triple does not multiply out.
pub fn receive_outputs(per_party: &[Vec<OutputShare>]) -> Result<Vec<RingElement>, MpcError> {
    let Some(first) = per_party.first() else {
        return Err(MpcError::Malformed("no output shares".into()));
    };
    let len = first.len();
    for (p, shares) in per_party.iter().enumerate() {
        if shares.len() != len || shares.iter().any(|s| s.party_id != p) {
            return Err(MpcError::Malformed(format!(
                "party {p} sent a malformed output bundle"
            )));
        }
    }
    (0..len)
        .map(|j| {
            let opened = per_party[0][j].opened;
            let mut mask = [0u128; 3];
            for shares in per_party {
                if shares[j].opened != opened {
                    return Err(MpcError::IntegrityFailure(
                        "servers disagree on an opened output".into(),
                    ));
                }
                for (m, s) in mask.iter_mut().zip(shares[j].mask) {
                    *m = m.wrapping_add(s);
                }
            }
            if mask[0].wrapping_mul(mask[1]) != mask[2] {
                return Err(MpcError::IntegrityFailure(
                    "output mask triple is inconsistent".into(),
                ));
            }
            Ok(RingElement(opened.wrapping_sub(mask[0]) as u64))
        })
        .collect()
}
