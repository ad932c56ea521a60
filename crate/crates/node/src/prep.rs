//! Preprocessing sources for a server process and their positions.

use serde::{Deserialize, Serialize};
use trendscope_core::mpc::dealer::{
    seed_commitment, DealerTape, NoiseShare, Preprocessing, TapeCursor, Triple,
};
use trendscope_core::mpc::{tape_file, AuthShare, Dealer, SeededDealer};
use trendscope_core::{MpcError, NoiseMode};

use crate::config::{PrepSource, ServerConfig};
use crate::NodeError;

/// How far a server has read into its preprocessing stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepPosition {
    Seeded {
        #[serde(with = "decimal")]
        word: u128,
    },
    Tape {
        cursor: TapeCursor,
    },
}

impl PrepPosition {
    /// The furthest of several positions: material any server may have
    /// consumed is never handed out again.
    pub fn furthest(all: &[PrepPosition]) -> Result<PrepPosition, MpcError> {
        let mut it = all.iter();
        let mut best = it
            .next()
            .cloned()
            .ok_or_else(|| MpcError::Malformed("no positions".into()))?;
        for p in it {
            best = match (best, p) {
                (PrepPosition::Seeded { word: a }, PrepPosition::Seeded { word: b }) => {
                    PrepPosition::Seeded { word: a.max(*b) }
                }
                (PrepPosition::Tape { cursor: mut a }, PrepPosition::Tape { cursor: b }) => {
                    a.triples = a.triples.max(b.triples);
                    a.bits = a.bits.max(b.bits);
                    for (k, v) in &b.laplace {
                        let e = a.laplace.entry(*k).or_insert(0);
                        *e = (*e).max(*v);
                    }
                    PrepPosition::Tape { cursor: a }
                }
                _ => {
                    return Err(MpcError::Malformed(
                        "servers use different preprocessing sources".into(),
                    ))
                }
            };
        }
        Ok(best)
    }
}

/// u128 as a decimal string, which JSON readers without big integers keep exact.
mod decimal {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

pub enum Prep {
    Seeded {
        dealer: SeededDealer,
        seed: u64,
        n: usize,
        macs: bool,
        noise: NoiseMode,
    },
    Tape(Box<DealerTape>),
}

impl Prep {
    /// Opens the configured source, resuming from a saved position.
    pub fn open(cfg: &ServerConfig, saved: Option<PrepPosition>) -> Result<Self, NodeError> {
        let noise = if cfg.zero_noise {
            NoiseMode::zero().ok_or_else(|| {
                NodeError::Config("zero_noise needs a build with the zero-noise feature".into())
            })?
        } else {
            NoiseMode::Live
        };
        let n = cfg.n_parties();
        let mut prep = match &cfg.preprocessing {
            PrepSource::Seeded { seed } => Prep::Seeded {
                dealer: SeededDealer::new(cfg.party_id, Dealer::new(n, *seed, cfg.macs, noise)),
                seed: *seed,
                n,
                macs: cfg.macs,
                noise,
            },
            PrepSource::Tape { path } => {
                if cfg.zero_noise {
                    return Err(NodeError::Config(
                        "zero_noise is only available with seeded preprocessing".into(),
                    ));
                }
                let tape = tape_file::read(path)
                    .map_err(|e| NodeError::Config(format!("{}: {e}", path.display())))?;
                if tape.party_id != cfg.party_id || tape.n_parties != n {
                    return Err(NodeError::Config(format!(
                        "tape is for party {} of {}, this is party {} of {n}",
                        tape.party_id, tape.n_parties, cfg.party_id
                    )));
                }
                if tape.mac_key_share.is_some() != cfg.macs {
                    return Err(NodeError::Config(
                        "tape MAC setting differs from config".into(),
                    ));
                }
                Prep::Tape(Box::new(tape))
            }
        };
        if let Some(pos) = saved {
            prep.advance_to(&pos)
                .map_err(|e| NodeError::Config(e.to_string()))?;
        }
        Ok(prep)
    }

    /// Identifies the stream; equal on all servers of one deployment.
    pub fn commitment(&self) -> String {
        match self {
            Prep::Seeded { seed, .. } => hex::encode(seed_commitment(*seed)),
            Prep::Tape(t) => hex::encode(t.seed_commitment),
        }
    }

    pub fn position(&self) -> PrepPosition {
        match self {
            Prep::Seeded { dealer, .. } => PrepPosition::Seeded {
                word: dealer.position(),
            },
            Prep::Tape(t) => PrepPosition::Tape {
                cursor: t.cursor.clone(),
            },
        }
    }

    pub fn advance_to(&mut self, pos: &PrepPosition) -> Result<(), MpcError> {
        match (self, pos) {
            (
                Prep::Seeded {
                    dealer,
                    seed,
                    n,
                    macs,
                    noise,
                },
                PrepPosition::Seeded { word },
            ) => {
                if *word != dealer.position() {
                    let party = dealer.party_id();
                    *dealer =
                        SeededDealer::new(party, Dealer::resume(*n, *seed, *macs, *noise, *word));
                }
                Ok(())
            }
            (Prep::Tape(t), PrepPosition::Tape { cursor }) => {
                t.cursor = cursor.clone();
                Ok(())
            }
            _ => Err(MpcError::Malformed(
                "preprocessing position of the wrong source".into(),
            )),
        }
    }

    fn inner(&mut self) -> &mut dyn Preprocessing {
        match self {
            Prep::Seeded { dealer, .. } => dealer,
            Prep::Tape(t) => t.as_mut(),
        }
    }

    fn inner_ref(&self) -> &dyn Preprocessing {
        match self {
            Prep::Seeded { dealer, .. } => dealer,
            Prep::Tape(t) => t.as_ref(),
        }
    }
}

impl Preprocessing for Prep {
    fn party_id(&self) -> usize {
        self.inner_ref().party_id()
    }

    fn n_parties(&self) -> usize {
        self.inner_ref().n_parties()
    }

    fn mac_key_share(&self) -> Option<u128> {
        self.inner_ref().mac_key_share()
    }

    fn triples(&mut self, count: usize) -> Result<Vec<Triple>, MpcError> {
        self.inner().triples(count)
    }

    fn bits(&mut self, count: usize) -> Result<Vec<AuthShare>, MpcError> {
        self.inner().bits(count)
    }

    fn laplace(&mut self, scale: f64, count: usize) -> Result<Vec<NoiseShare>, MpcError> {
        self.inner().laplace(scale, count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn furthest_takes_componentwise_maximum() {
        let tape = |t, b, l: &[(u64, usize)]| PrepPosition::Tape {
            cursor: TapeCursor {
                triples: t,
                bits: b,
                laplace: l.iter().copied().collect::<BTreeMap<_, _>>(),
            },
        };
        let f = PrepPosition::furthest(&[tape(5, 1, &[(1, 2)]), tape(3, 9, &[(1, 1), (2, 4)])])
            .unwrap();
        assert_eq!(f, tape(5, 9, &[(1, 2), (2, 4)]));
        let s = PrepPosition::furthest(&[
            PrepPosition::Seeded { word: 4 },
            PrepPosition::Seeded { word: 9 },
        ])
        .unwrap();
        assert_eq!(s, PrepPosition::Seeded { word: 9 });
        assert!(PrepPosition::furthest(&[s, tape(0, 0, &[])]).is_err());
    }

    #[test]
    fn positions_survive_json() {
        for p in [
            PrepPosition::Seeded {
                word: u128::MAX - 3,
            },
            PrepPosition::Tape {
                cursor: TapeCursor {
                    triples: 7,
                    bits: 8,
                    laplace: [(u64::MAX, 3)].into_iter().collect(),
                },
            },
        ] {
            let text = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<PrepPosition>(&text).unwrap(), p);
        }
    }
}
