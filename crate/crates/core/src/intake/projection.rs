//! Seeded Gaussian random projection and its on-disk form.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::IntakeError;

const MAGIC: &[u8; 8] = b"TSPROJ01";
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8;

/// An `ell x k` matrix with i.i.d. `N(0, 1/k)` entries, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    ell: usize,
    k: usize,
    seed: u64,
    omega2: f64,
    data: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn generate(ell: usize, k: usize, seed: u64) -> Self {
        assert!(ell >= 1 && k >= 1, "projection dimensions must be positive");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("finite std dev");
        let data: Vec<f64> = (0..ell * k).map(|_| normal.sample(&mut rng)).collect();
        let omega2 = max_row_norm(&data, k);
        ProjectionMatrix {
            ell,
            k,
            seed,
            omega2,
            data,
        }
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Largest row norm `max_i |e_i P|_2`.
    pub fn omega2(&self) -> f64 {
        self.omega2
    }

    pub fn sigma_p(&self) -> f64 {
        1.0 / (self.k as f64).sqrt()
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// Computes `x P` for a row vector of length `ell`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ell, "input dimension mismatch");
        let mut out = vec![0.0; self.k];
        for (xi, row) in x.iter().zip(self.data.chunks_exact(self.k)) {
            if *xi == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(row) {
                *o += xi * p;
            }
        }
        out
    }

    /// Binary layout (little-endian): magic "TSPROJ01", ell u32, k u32,
    /// seed u64, omega2 f64, entries f64 row-major, SHA-256 trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.ell as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.omega2.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, IntakeError> {
        let bad = |m: &str| IntakeError::Malformed(format!("projection file: {m}"));
        if buf.len() < HEADER_LEN + 32 || &buf[..8] != MAGIC {
            return Err(bad("bad magic or too short"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch"));
        }
        let u32_at =
            |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes")) as usize;
        let ell = u32_at(8);
        let k = u32_at(12);
        let seed = u64::from_le_bytes(body[16..24].try_into().expect("8 bytes"));
        let omega2 = f64::from_le_bytes(body[24..32].try_into().expect("8 bytes"));
        if ell == 0 || k == 0 || body.len() != HEADER_LEN + ell * k * 8 {
            return Err(bad("dimensions do not match body length"));
        }
        let data: Vec<f64> = body[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if max_row_norm(&data, k) != omega2 {
            return Err(bad("stored omega2 does not match the matrix"));
        }
        Ok(ProjectionMatrix {
            ell,
            k,
            seed,
            omega2,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IntakeError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| IntakeError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IntakeError> {
        let buf =
            std::fs::read(path).map_err(|e| IntakeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}

fn max_row_norm(data: &[f64], k: usize) -> f64 {
    data.chunks_exact(k)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}
