//! Binary encoding of share bundles for the wire and the store logs.
//!
//! ```text
//! u8 flags | u32 party | u64 donation_id | i64 epoch | u32 k | k x u128 per vector
//! ```
//!
//! Vectors follow in the order `x_tilde, x_tilde_sq, x, x_sq`; the fine
//! pair is present only when bit 0 of `flags` is set.

use trendscope_core::ShareBundle;

use crate::wire::WireError;

const HAS_FINE: u8 = 1;
const FIXED: usize = 1 + 4 + 8 + 8 + 4;

pub fn encode_bundle(b: &ShareBundle) -> Vec<u8> {
    encode(b, true)
}

/// Drops the fine vectors; used once an epoch's fine store is deleted.
pub fn encode_coarse_only(b: &ShareBundle) -> Vec<u8> {
    encode(b, false)
}

fn encode(b: &ShareBundle, fine: bool) -> Vec<u8> {
    let k = b.x_tilde.len();
    let vectors = if fine { 4 } else { 2 };
    let mut out = Vec::with_capacity(FIXED + vectors * 16 * k);
    out.push(if fine { HAS_FINE } else { 0 });
    out.extend_from_slice(&(b.party_id as u32).to_le_bytes());
    out.extend_from_slice(&b.donation_id.to_le_bytes());
    out.extend_from_slice(&b.epoch.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    let mut put = |v: &[u128]| {
        v.iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
    };
    put(&b.x_tilde);
    put(&b.x_tilde_sq);
    if fine {
        put(&b.x);
        put(&b.x_sq);
    }
    out
}

/// Decodes a bundle. A coarse-only record comes back with empty fine vectors.
pub fn decode_bundle(buf: &[u8]) -> Result<ShareBundle, WireError> {
    if buf.len() < FIXED {
        return Err(WireError::Truncated {
            needed: FIXED,
            got: buf.len(),
        });
    }
    let flags = buf[0];
    if flags & !HAS_FINE != 0 {
        return Err(WireError::Body(format!("unknown bundle flags {flags:#x}")));
    }
    let party_id = u32::from_le_bytes(buf[1..5].try_into().expect("4 bytes")) as usize;
    let donation_id = u64::from_le_bytes(buf[5..13].try_into().expect("8 bytes"));
    let epoch = i64::from_le_bytes(buf[13..21].try_into().expect("8 bytes"));
    let k = u32::from_le_bytes(buf[21..25].try_into().expect("4 bytes")) as usize;
    let vectors = if flags & HAS_FINE != 0 { 4 } else { 2 };
    let needed = FIXED + vectors * 16 * k;
    if buf.len() != needed {
        return Err(WireError::Body(format!(
            "bundle of dimension {k} needs {needed} bytes, got {}",
            buf.len()
        )));
    }
    let mut words = buf[FIXED..]
        .chunks_exact(16)
        .map(|c| u128::from_le_bytes(c.try_into().expect("16 bytes")));
    let mut take = |n: usize| -> Vec<u128> { words.by_ref().take(n).collect() };
    let x_tilde = take(k);
    let x_tilde_sq = take(k);
    let (x, x_sq) = if vectors == 4 {
        (take(k), take(k))
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ShareBundle {
        party_id,
        donation_id,
        epoch,
        x,
        x_sq,
        x_tilde,
        x_tilde_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bundle(k: usize, seed: u128) -> ShareBundle {
        let v = |o: u128| {
            (0..k as u128)
                .map(|i| seed.wrapping_mul(31).wrapping_add(i * 7 + o))
                .collect()
        };
        ShareBundle {
            party_id: 2,
            donation_id: seed as u64,
            epoch: -3,
            x: v(1),
            x_sq: v(2),
            x_tilde: v(3),
            x_tilde_sq: v(4),
        }
    }

    #[test]
    fn coarse_only_drops_fine_vectors() {
        let b = bundle(4, 9);
        let c = decode_bundle(&encode_coarse_only(&b)).unwrap();
        assert!(c.x.is_empty() && c.x_sq.is_empty());
        assert_eq!((c.x_tilde, c.x_tilde_sq), (b.x_tilde, b.x_tilde_sq));
    }

    #[test]
    fn truncated_or_padded_bundles_are_rejected() {
        let bytes = encode_bundle(&bundle(3, 1));
        assert!(decode_bundle(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_bundle(&long).is_err());
        let mut flagged = bytes;
        flagged[0] = 0x80;
        assert!(decode_bundle(&flagged).is_err());
    }

    proptest! {
        #[test]
        fn bundles_round_trip(k in 0usize..40, seed in any::<u128>()) {
            let b = bundle(k, seed);
            prop_assert_eq!(decode_bundle(&encode_bundle(&b)).unwrap(), b);
        }
    }
}
