//! Fixed-point encoding over the ring `Z_{2^64}`.
//!
//! Values carry [`FRAC_BITS`] fractional bits. A product of two encoded
//! values carries twice as many; the query path keeps such products at
//! double scale instead of truncating them (see [`DOUBLE_SCALE`]).

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Number of fractional bits in the fixed-point encoding.
pub const FRAC_BITS: u32 = 16;

/// `2^FRAC_BITS` as a float.
pub const SCALE: f64 = (1u64 << FRAC_BITS) as f64;

/// Scale of a product of two single-scale values, `2^(2 * FRAC_BITS)`.
pub const DOUBLE_SCALE: f64 = (1u64 << (2 * FRAC_BITS)) as f64;

/// Largest magnitude an in-scope value may decode to.
pub const MAX_MAGNITUDE: f64 = (1u64 << 15) as f64;

/// An element of `Z_{2^64}` interpreted as a signed fixed-point number.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RingElement(pub u64);

impl RingElement {
    pub const ZERO: RingElement = RingElement(0);
    pub const ONE: RingElement = RingElement(1 << FRAC_BITS);

    /// Encodes a real at single scale, rounding to nearest.
    pub fn encode(value: f64) -> Self {
        RingElement((value * SCALE).round() as i64 as u64)
    }

    /// Encodes a real at double scale (the scale of a product).
    pub fn encode_double(value: f64) -> Self {
        RingElement((value * DOUBLE_SCALE).round() as i64 as u64)
    }

    /// Encodes an integer at scale 1 (raw ring integer).
    pub fn from_int(value: i64) -> Self {
        RingElement(value as u64)
    }

    pub fn decode(self) -> f64 {
        self.signed() as f64 / SCALE
    }

    pub fn decode_double(self) -> f64 {
        self.signed() as f64 / DOUBLE_SCALE
    }

    /// Two's-complement reading of the ring element.
    pub fn signed(self) -> i64 {
        self.0 as i64
    }

    /// Plaintext fixed-point product with floor truncation, the reference
    /// for shared multiplication.
    pub fn fixed_mul(self, other: RingElement) -> RingElement {
        let wide = (self.signed() as i128) * (other.signed() as i128);
        RingElement((wide >> FRAC_BITS) as i64 as u64)
    }
}

impl fmt::Debug for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RingElement({} ~ {})", self.signed(), self.decode())
    }
}

impl Add for RingElement {
    type Output = RingElement;
    fn add(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for RingElement {
    type Output = RingElement;
    fn sub(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_sub(rhs.0))
    }
}

impl Neg for RingElement {
    type Output = RingElement;
    fn neg(self) -> RingElement {
        RingElement(self.0.wrapping_neg())
    }
}

/// Raw ring product (no rescaling).
impl Mul for RingElement {
    type Output = RingElement;
    fn mul(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_mul(rhs.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_known_values() {
        assert_eq!(RingElement::encode(1.0), RingElement::ONE);
        assert_eq!(RingElement::encode(1.5).0, 98304);
        assert_eq!(RingElement::encode(-1.0).signed(), -65536);
        assert_eq!(RingElement::encode(0.25).decode(), 0.25);
    }

    #[test]
    fn fixed_mul_floors() {
        let half = RingElement::encode(0.5);
        assert_eq!(half.fixed_mul(half).decode(), 0.25);
        let tiny = RingElement(1);
        assert_eq!(tiny.fixed_mul(RingElement(-1i64 as u64)).signed(), -1);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(raw in -(1i64 << 31)..(1i64 << 31)) {
            let v = RingElement::from_int(raw);
            prop_assert_eq!(RingElement::encode(v.decode()), v);
        }
    }
}
