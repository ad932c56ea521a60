//! Open sparse-vector queries: one noised threshold per `(q, a, t, epoch)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Epsilon;
use crate::epoch::Epoch;
use crate::mpc::AuthShare;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenThresholdEntry {
    /// Hash of `(q, a, t, epoch)`.
    pub key: String,
    pub epoch: Epoch,
    pub t: u64,
    pub eps_t: Epsilon,
    /// This server's share of `t_hat = t + u`.
    pub t_hat: AuthShare,
}

/// One server's open threshold queries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdBook {
    entries: BTreeMap<String, OpenThresholdEntry>,
}

impl ThresholdBook {
    pub fn get(&self, key: &str) -> Option<&OpenThresholdEntry> {
        self.entries.get(key)
    }

    pub fn open(&mut self, entry: OpenThresholdEntry) {
        self.entries.insert(entry.key.clone(), entry);
    }

    /// Closes the entry after it fired.
    pub fn close(&mut self, key: &str) -> Option<OpenThresholdEntry> {
        self.entries.remove(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &OpenThresholdEntry> {
        self.entries.values()
    }

    /// Drops entries for an epoch whose fine store is gone.
    pub fn drop_epoch(&mut self, epoch: Epoch) {
        self.entries.retain(|_, e| e.epoch != epoch);
    }
}
