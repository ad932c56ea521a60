//! Binary tape file format.
//!
//! Little-endian throughout:
//!
//! ```text
//! header   magic "SYNTAPE1" | n_parties u8 | triples u64 | bits u64 | laplace u64 | seed commitment [32]
//! party    party_id u8 | flags u8 (bit 0: MACs) | mac key share u128
//! records  triples (a, b, c as value u128, mac u128) | bits (value, mac) | laplace (scale f64, value, mac)
//! trailer  SHA-256 over every preceding byte
//! ```
//!
//! The header is identical on every party's tape; [`header_digest`] is what
//! peers compare to confirm they hold tapes from the same dealer run.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::dealer::{DealerTape, TapeCursor, Triple};
use super::share::AuthShare;
use super::MpcError;

pub const MAGIC: &[u8; 8] = b"SYNTAPE1";
const HEADER_LEN: usize = 8 + 1 + 24 + 32;

/// Serializes a tape. Consumption state is not part of the file.
pub fn encode(tape: &DealerTape) -> Vec<u8> {
    let laplace_total: usize = tape.laplace.values().map(Vec::len).sum();
    let mut out = Vec::with_capacity(
        HEADER_LEN + 18 + tape.triples.len() * 96 + tape.bits.len() * 32 + laplace_total * 40 + 32,
    );
    out.extend_from_slice(&header(tape));
    out.push(tape.party_id as u8);
    out.push(tape.mac_key_share.is_some() as u8);
    out.extend_from_slice(&tape.mac_key_share.unwrap_or(0).to_le_bytes());
    for t in &tape.triples {
        for s in [t.a, t.b, t.c] {
            put_share(&mut out, s);
        }
    }
    for b in &tape.bits {
        put_share(&mut out, *b);
    }
    for (key, shares) in &tape.laplace {
        for s in shares {
            out.extend_from_slice(&key.to_le_bytes());
            put_share(&mut out, *s);
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

fn header(tape: &DealerTape) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(MAGIC);
    h[8] = tape.n_parties as u8;
    h[9..17].copy_from_slice(&(tape.triples.len() as u64).to_le_bytes());
    h[17..25].copy_from_slice(&(tape.bits.len() as u64).to_le_bytes());
    let laplace_total: usize = tape.laplace.values().map(Vec::len).sum();
    h[25..33].copy_from_slice(&(laplace_total as u64).to_le_bytes());
    h[33..65].copy_from_slice(&tape.seed_commitment);
    h
}

/// Digest of the shared header; equal across all parties of one dealer run.
pub fn header_digest(tape: &DealerTape) -> [u8; 32] {
    Sha256::digest(header(tape)).into()
}

fn put_share(out: &mut Vec<u8>, s: AuthShare) {
    out.extend_from_slice(&s.value.to_le_bytes());
    out.extend_from_slice(&s.mac.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], MpcError> {
        if self.buf.len() - self.at < n {
            return Err(MpcError::Malformed("tape file truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, MpcError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn u128(&mut self) -> Result<u128, MpcError> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }

    fn share(&mut self) -> Result<AuthShare, MpcError> {
        Ok(AuthShare {
            value: self.u128()?,
            mac: self.u128()?,
        })
    }
}

pub fn decode(buf: &[u8]) -> Result<DealerTape, MpcError> {
    if buf.len() < HEADER_LEN + 18 + 32 {
        return Err(MpcError::Malformed("tape file too short".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let expected: [u8; 32] = Sha256::digest(body).into();
    if expected.as_slice() != digest {
        return Err(MpcError::Malformed("tape file digest mismatch".into()));
    }
    let mut r = Reader { buf: body, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(MpcError::Malformed("bad tape magic".into()));
    }
    let n_parties = r.take(1)?[0] as usize;
    let n_triples = r.u64()? as usize;
    let n_bits = r.u64()? as usize;
    let n_laplace = r.u64()? as usize;
    let seed_commitment: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let party_id = r.take(1)?[0] as usize;
    let flags = r.take(1)?[0];
    let key = r.u128()?;
    let expected_len = HEADER_LEN + 18 + n_triples * 96 + n_bits * 32 + n_laplace * 40;
    if body.len() != expected_len {
        return Err(MpcError::Malformed(format!(
            "tape body is {} bytes, header implies {expected_len}",
            body.len()
        )));
    }
    let mut triples = Vec::with_capacity(n_triples);
    for _ in 0..n_triples {
        triples.push(Triple {
            a: r.share()?,
            b: r.share()?,
            c: r.share()?,
        });
    }
    let mut bits = Vec::with_capacity(n_bits);
    for _ in 0..n_bits {
        bits.push(r.share()?);
    }
    let mut laplace = std::collections::BTreeMap::<u64, Vec<AuthShare>>::new();
    for _ in 0..n_laplace {
        let key = r.u64()?;
        laplace.entry(key).or_default().push(r.share()?);
    }
    Ok(DealerTape {
        party_id,
        n_parties,
        mac_key_share: (flags & 1 == 1).then_some(key),
        seed_commitment,
        triples,
        bits,
        laplace,
        cursor: TapeCursor::default(),
    })
}

pub fn write(path: &Path, tape: &DealerTape) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(tape))?;
    f.sync_all()
}

pub fn read(path: &Path) -> Result<DealerTape, MpcError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| MpcError::Malformed(format!("cannot read tape {}: {e}", path.display())))?;
    decode(&buf)
}
