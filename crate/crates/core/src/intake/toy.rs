//! Deterministic bag-of-trigrams embedder for tests and desk demos.

use super::IntakeError;

/// Output dimension of [`toy_embed`].
pub const TOY_DIM: usize = 256;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Hashes lowercase character trigrams (with word-boundary padding) into
/// `TOY_DIM` signed buckets and normalizes to unit length.
pub fn toy_embed(text: &str) -> Result<Vec<f64>, IntakeError> {
    let normalized: String = text.trim().to_lowercase();
    if normalized.is_empty() {
        return Err(IntakeError::EmptyMessage);
    }
    let chars: Vec<char> = format!("  {normalized} ").chars().collect();
    let mut v = vec![0.0f64; TOY_DIM];
    let mut buf = [0u8; 12];
    for w in chars.windows(3) {
        let mut len = 0;
        for c in w {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        let h = fnv1a(&buf[..len]);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % TOY_DIM as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(IntakeError::DegenerateVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
