use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use trendscope_core::mpc::{
    reconstruct, run_local, share, share_authenticated, AuthShare, Dealer, DealerPool, MpcError,
    NoiseMode, Party, PoolHandle, Share,
};
use trendscope_core::RingElement;

/// Runs `f` on every party with its shares of `inputs` and returns party 0's result.
fn session<T, F>(n: usize, seed: u64, inputs: &[RingElement], f: F) -> Result<T, MpcError>
where
    T: Send,
    F: Fn(&mut Party<'_>, &[AuthShare]) -> Result<T, MpcError> + Sync,
{
    let pool = DealerPool::new(Dealer::new(n, seed, true, NoiseMode::Live));
    let key = pool.mac_key().cloned().expect("macs on");
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let mut per_party = vec![Vec::new(); n];
    for v in inputs {
        for (p, s) in share_authenticated(v.0 as u128, &key, &mut rng)
            .into_iter()
            .enumerate()
        {
            per_party[p].push(s);
        }
    }
    let mut states: Vec<(PoolHandle, Vec<AuthShare>)> = (0..n)
        .map(|p| (pool.handle(p), per_party[p].clone()))
        .collect();
    run_local(&mut states, |(prep, mine), chan| {
        let mut party = Party::new(chan, prep)?;
        f(&mut party, mine)
    })
    .into_iter()
    .next()
    .unwrap()
}

fn parties() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![2usize, 3, 5])
}

fn fixed(range: f64) -> impl Strategy<Value = RingElement> {
    (-range..range).prop_map(RingElement::encode)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sharing_round_trips(n in parties(), v in any::<u64>(), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shares = share(RingElement(v), n, &mut rng).unwrap();
        prop_assert_eq!(shares.len(), n);
        prop_assert_eq!(reconstruct(&shares, None).unwrap(), RingElement(v));
    }

    #[test]
    fn addition_is_local(n in parties(), a in fixed(1e4), b in fixed(1e4), seed in any::<u64>()) {
        let out = session(n, seed, &[a, b], |p, s| p.reveal(&[s[0] + s[1]])).unwrap();
        prop_assert_eq!(RingElement(out[0] as u64), RingElement(a.0.wrapping_add(b.0)));
    }

    #[test]
    fn multiplication_matches_plaintext(n in parties(), a in fixed(100.0), b in fixed(100.0), seed in any::<u64>()) {
        let out = session(n, seed, &[a, b], |p, s| {
            let prod = p.beaver_multiply(&s[..1], &s[1..])?;
            p.reveal(&prod)
        })
        .unwrap();
        prop_assert_eq!(RingElement(out[0] as u64), a.fixed_mul(b));
    }

    #[test]
    fn comparison_matches_plaintext(n in parties(), d in fixed(5e4), c in fixed(5e4), seed in any::<u64>()) {
        let out = session(n, seed, &[d], |p, s| {
            let bit = p.secure_less_than(s, c, 5e4)?;
            p.reveal(&bit)
        })
        .unwrap();
        prop_assert_eq!(out[0], (d.signed() < c.signed()) as u128);
    }

    #[test]
    fn tampered_opening_never_reveals(n in parties(), a in fixed(10.0), seed in any::<u64>(), delta in 1u128..u128::MAX) {
        let pool = DealerPool::new(Dealer::new(n, seed, true, NoiseMode::Live));
        let key = pool.mac_key().cloned().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shares = share_authenticated(a.0 as u128, &key, &mut rng);
        let mut states: Vec<(PoolHandle, AuthShare)> = (0..n).map(|p| (pool.handle(p), shares[p])).collect();
        let results = run_local(&mut states, |(prep, mine), chan| {
            let mut party = Party::new(chan, prep)?;
            let mut s = *mine;
            if party.id() == n - 1 {
                s.value = s.value.wrapping_add(delta);
            }
            party.reveal(&[s])
        });
        prop_assert!(results.iter().all(|r| r.is_err()));
    }
}

#[test]
fn shares_look_uniform() {
    // Low byte of one party's share of a fixed secret: 256 equiprobable bins.
    const SAMPLES: usize = 256 * 200;
    for n in [2, 3, 5] {
        let mut rng = ChaCha20Rng::seed_from_u64(n as u64);
        let mut bins = [0u64; 256];
        for _ in 0..SAMPLES {
            let shares: Vec<Share> = share(RingElement::encode(0.75), n, &mut rng).unwrap();
            bins[(shares[n - 1].payload & 0xff) as usize] += 1;
        }
        let expect = SAMPLES as f64 / 256.0;
        let stat: f64 = bins
            .iter()
            .map(|&o| (o as f64 - expect).powi(2) / expect)
            .sum();
        let p = 1.0 - ChiSquared::new(255.0).unwrap().cdf(stat);
        assert!(p > 1e-3, "n={n}: chi2 {stat:.1}, p {p:.2e}");
    }
}

#[test]
fn shares_of_different_secrets_are_indistinguishable_in_isolation() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let draw =
        |v: f64, rng: &mut ChaCha20Rng| share(RingElement::encode(v), 3, rng).unwrap()[0].payload;
    let mean_bit = |v: f64, rng: &mut ChaCha20Rng| {
        (0..20_000).map(|_| (draw(v, rng) >> 63) & 1).sum::<u128>() as f64 / 20_000.0
    };
    let zero = mean_bit(0.0, &mut rng);
    let big = mean_bit(-1e6, &mut rng);
    assert!(
        (zero - 0.5).abs() < 0.015 && (big - 0.5).abs() < 0.015,
        "{zero} {big}"
    );
}
