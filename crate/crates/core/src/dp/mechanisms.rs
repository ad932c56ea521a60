//! Laplace and sparse-vector mechanisms evaluated on shared counts.
//!
//! Counts enter as integers (scale 1) and leave at double fixed-point scale
//! so that the noise keeps its full `2^-32` resolution.

use crate::fixed::FRAC_BITS;
use crate::mpc::{AuthShare, MpcError, Party};

/// Comparison width for `count + noise - threshold` at double scale:
/// counts and thresholds stay below `2^20`, noise below `2^15`.
pub const SVT_COMPARE_WIDTH: u32 = 21 + 2 * FRAC_BITS + 1;

/// Largest threshold the sparse-vector comparison supports.
pub const MAX_THRESHOLD: u64 = 1 << 20;

fn lift(count: AuthShare) -> AuthShare {
    count.scale(1u128 << (2 * FRAC_BITS))
}

/// `[c + s]` with `s ~ Lap(1/eps_c)`, at double scale.
pub fn laplace_count(
    party: &mut Party<'_>,
    counts: &[AuthShare],
    eps_c: f64,
) -> Result<Vec<AuthShare>, MpcError> {
    let noise = party.laplace_double(1.0 / eps_c, counts.len())?;
    Ok(counts
        .iter()
        .zip(noise)
        .map(|(c, s)| lift(*c) + s)
        .collect())
}

/// `[t + u]` with `u ~ Lap(2/eps_t)`, at double scale.
pub fn noised_threshold(party: &mut Party<'_>, t: u64, eps_t: f64) -> Result<AuthShare, MpcError> {
    let u = party.laplace_double(2.0 / eps_t, 1)?[0];
    Ok(party.add_public(u, (t as u128) << (2 * FRAC_BITS)))
}

/// `[c + v >= t_hat]` with fresh `v ~ Lap(4/eps_t)` per comparison.
pub fn svt_threshold(
    party: &mut Party<'_>,
    counts: &[AuthShare],
    t_hat: &[AuthShare],
    eps_t: f64,
) -> Result<Vec<AuthShare>, MpcError> {
    assert_eq!(counts.len(), t_hat.len(), "one threshold per count");
    let v = party.laplace_double(4.0 / eps_t, counts.len())?;
    let diffs: Vec<AuthShare> = counts
        .iter()
        .zip(&v)
        .zip(t_hat)
        .map(|((c, v), t)| lift(*c) + *v - *t)
        .collect();
    let below = party.less_than_zero(&diffs, SVT_COMPARE_WIDTH)?;
    let one = party.constant(1);
    Ok(below.into_iter().map(|b| one - b).collect())
}
