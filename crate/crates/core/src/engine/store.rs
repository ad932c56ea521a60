//! One server's share stores, keyed by epoch and donation id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::epoch::Epoch;
use crate::intake::ShareBundle;
use crate::mpc::AuthShare;

/// Shares of one stored vector and its elementwise square.
///
/// Donations arrive as plain additive shares; MACs are attached jointly
/// the first time the element takes part in a query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementShares {
    pub x: Vec<AuthShare>,
    pub x_sq: Vec<AuthShare>,
    pub authenticated: bool,
}

impl ElementShares {
    fn raw(x: &[u128], x_sq: &[u128]) -> Self {
        let wrap = |v: &[u128]| v.iter().map(|s| AuthShare::new(*s, 0)).collect();
        ElementShares {
            x: wrap(x),
            x_sq: wrap(x_sq),
            authenticated: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochStore {
    /// `None` once the epoch's fine budget is exhausted.
    pub fine: Option<BTreeMap<u64, ElementShares>>,
    pub coarse: BTreeMap<u64, ElementShares>,
}

impl EpochStore {
    fn new() -> Self {
        EpochStore {
            fine: Some(BTreeMap::new()),
            coarse: BTreeMap::new(),
        }
    }

    /// Number of donated messages, `n_e`.
    pub fn count(&self) -> usize {
        self.coarse.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreKind {
    Fine,
    Coarse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOutcome {
    pub fine_stored: bool,
    /// The donation id was already present; nothing changed.
    pub duplicate: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyStore {
    k: usize,
    epochs: BTreeMap<Epoch, EpochStore>,
}

impl PartyStore {
    pub fn new(k: usize) -> Self {
        PartyStore {
            k,
            epochs: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Files one bundle. The fine half is dropped for deleted epochs.
    pub fn ingest(&mut self, bundle: &ShareBundle) -> Result<IngestOutcome, String> {
        if !bundle.is_well_formed(self.k) {
            return Err(format!("bundle vectors must all have {} entries", self.k));
        }
        let store = self
            .epochs
            .entry(bundle.epoch)
            .or_insert_with(EpochStore::new);
        if store.coarse.contains_key(&bundle.donation_id) {
            return Ok(IngestOutcome {
                fine_stored: false,
                duplicate: true,
            });
        }
        store.coarse.insert(
            bundle.donation_id,
            ElementShares::raw(&bundle.x_tilde, &bundle.x_tilde_sq),
        );
        let fine_stored = match store.fine.as_mut() {
            Some(fine) => {
                fine.insert(
                    bundle.donation_id,
                    ElementShares::raw(&bundle.x, &bundle.x_sq),
                );
                true
            }
            None => false,
        };
        Ok(IngestOutcome {
            fine_stored,
            duplicate: false,
        })
    }

    /// Marks an epoch's fine store deleted, creating the epoch if needed.
    pub fn delete_fine(&mut self, epoch: Epoch) {
        self.epochs
            .entry(epoch)
            .or_insert_with(EpochStore::new)
            .fine = None;
    }

    pub fn epoch(&self, epoch: Epoch) -> Option<&EpochStore> {
        self.epochs.get(&epoch)
    }

    pub fn epochs(&self) -> impl Iterator<Item = (&Epoch, &EpochStore)> {
        self.epochs.iter()
    }

    pub fn elements(&self, epoch: Epoch, kind: StoreKind) -> Option<&BTreeMap<u64, ElementShares>> {
        let s = self.epochs.get(&epoch)?;
        match kind {
            StoreKind::Fine => s.fine.as_ref(),
            StoreKind::Coarse => Some(&s.coarse),
        }
    }

    pub fn elements_mut(
        &mut self,
        epoch: Epoch,
        kind: StoreKind,
    ) -> Option<&mut BTreeMap<u64, ElementShares>> {
        let s = self.epochs.get_mut(&epoch)?;
        match kind {
            StoreKind::Fine => s.fine.as_mut(),
            StoreKind::Coarse => Some(&mut s.coarse),
        }
    }

    /// Donation ids present in a store, ascending.
    pub fn ids(&self, epoch: Epoch, kind: StoreKind) -> Vec<u64> {
        self.elements(epoch, kind)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Adds `delta` to one stored share without touching its MAC.
    pub fn tamper(
        &mut self,
        epoch: Epoch,
        kind: StoreKind,
        element: usize,
        coord: usize,
        delta: u128,
    ) -> bool {
        let Some(map) = self.elements_mut(epoch, kind) else {
            return false;
        };
        let Some(e) = map.values_mut().nth(element) else {
            return false;
        };
        match e.x.get_mut(coord) {
            Some(s) => {
                s.value = s.value.wrapping_add(delta);
                true
            }
            None => false,
        }
    }
}
