//! Per-epoch fine budget, coarse one-time charge, FC result cache.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DpError, Epsilon};
use crate::epoch::Epoch;
use crate::intake::{compute_sigma_delta, CoarseNoiseParams};
use crate::mpc::AuthShare;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Fc,
    Ft,
    CoarseSetup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultKind {
    /// A noisy count was released.
    Count,
    /// A threshold query fired.
    Fired,
    /// The coarse store parameters were fixed.
    Setup,
}

/// One line of the append-only ledger log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<Epoch>,
    pub query_hash: String,
    pub kind: RecordKind,
    pub eps: Epsilon,
    pub result_kind: ResultKind,
    /// This server's share of a cached FC answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached: Option<AuthShare>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseCharge {
    pub eps_p: f64,
    pub delta_p: f64,
}

/// Outcome of a successful charge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeReceipt {
    pub epoch: Epoch,
    pub charged: Epsilon,
    pub remaining: Epsilon,
    /// The epoch's budget reached zero: its fine store must be deleted.
    pub delete_fine_store: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochBudget {
    pub epoch: Epoch,
    pub remaining: f64,
    pub spent: f64,
    pub deleted: bool,
}

/// Budget summary served to queriers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetView {
    pub eps_f_max: f64,
    pub epochs: Vec<EpochBudget>,
    pub coarse: Option<CoarseCharge>,
    pub total_eps: f64,
    pub total_delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetLedger {
    eps_f_max: Epsilon,
    remaining: BTreeMap<Epoch, Epsilon>,
    deleted: BTreeSet<Epoch>,
    records: Vec<LedgerRecord>,
    coarse: Option<CoarseCharge>,
    fc_cache: BTreeMap<String, AuthShare>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    eps_f_max: Epsilon,
    remaining: &'a BTreeMap<Epoch, Epsilon>,
    deleted: &'a BTreeSet<Epoch>,
    coarse: &'a Option<CoarseCharge>,
    fc_cache: &'a BTreeMap<String, AuthShare>,
    next_seq: u64,
}

impl BudgetLedger {
    pub fn new(eps_f_max: Epsilon) -> Self {
        BudgetLedger {
            eps_f_max,
            remaining: BTreeMap::new(),
            deleted: BTreeSet::new(),
            records: Vec::new(),
            coarse: None,
            fc_cache: BTreeMap::new(),
        }
    }

    pub fn eps_f_max(&self) -> Epsilon {
        self.eps_f_max
    }

    /// Remaining fine budget; untouched epochs hold the full allowance.
    pub fn remaining(&self, epoch: Epoch) -> Epsilon {
        self.remaining
            .get(&epoch)
            .copied()
            .unwrap_or(self.eps_f_max)
    }

    pub fn is_deleted(&self, epoch: Epoch) -> bool {
        self.deleted.contains(&epoch)
    }

    pub fn deleted_epochs(&self) -> impl Iterator<Item = Epoch> + '_ {
        self.deleted.iter().copied()
    }

    /// Admission check for a fine query costing `eps`.
    pub fn check(&self, epoch: Epoch, eps: Epsilon) -> Result<(), DpError> {
        if self.is_deleted(epoch) {
            return Err(DpError::EpochDeleted(epoch));
        }
        if eps.is_zero() {
            return Err(DpError::InvalidEps(0.0));
        }
        let remaining = self.remaining(epoch);
        if eps > remaining {
            return Err(DpError::Refusal {
                epoch,
                requested: eps,
                remaining,
            });
        }
        Ok(())
    }

    /// Deducts `eps` from `epoch`, recording the charge. A charge that
    /// exhausts the epoch marks it deleted.
    pub fn charge(
        &mut self,
        epoch: Epoch,
        eps: Epsilon,
        kind: RecordKind,
        query_hash: &str,
        cached: Option<AuthShare>,
    ) -> Result<ChargeReceipt, DpError> {
        self.check(epoch, eps)?;
        let result_kind = match kind {
            RecordKind::Fc => ResultKind::Count,
            RecordKind::Ft => ResultKind::Fired,
            RecordKind::CoarseSetup => {
                return Err(DpError::Replay(
                    "coarse setup is not an epoch charge".into(),
                ))
            }
        };
        let record = LedgerRecord {
            seq: self.records.len() as u64,
            epoch: Some(epoch),
            query_hash: query_hash.to_owned(),
            kind,
            eps,
            result_kind,
            cached,
            delta: None,
        };
        Ok(self.apply(record)?.expect("epoch charge yields a receipt"))
    }

    fn apply(&mut self, record: LedgerRecord) -> Result<Option<ChargeReceipt>, DpError> {
        if record.seq != self.records.len() as u64 {
            return Err(DpError::Replay(format!(
                "expected seq {}, found {}",
                self.records.len(),
                record.seq
            )));
        }
        let receipt = match record.kind {
            RecordKind::CoarseSetup => {
                if self.coarse.is_some() {
                    return Err(DpError::OneTimeOnly);
                }
                self.coarse = Some(CoarseCharge {
                    eps_p: record.eps.as_f64(),
                    delta_p: record
                        .delta
                        .ok_or_else(|| DpError::Replay("coarse record without delta".into()))?,
                });
                None
            }
            RecordKind::Fc | RecordKind::Ft => {
                let epoch = record
                    .epoch
                    .ok_or_else(|| DpError::Replay("fine charge without epoch".into()))?;
                self.check(epoch, record.eps)?;
                let left = self
                    .remaining(epoch)
                    .checked_sub(record.eps)
                    .expect("admission check bounds the charge");
                self.remaining.insert(epoch, left);
                if left.is_zero() {
                    self.deleted.insert(epoch);
                }
                if let Some(share) = record.cached {
                    self.fc_cache.insert(record.query_hash.clone(), share);
                }
                Some(ChargeReceipt {
                    epoch,
                    charged: record.eps,
                    remaining: left,
                    delete_fine_store: left.is_zero(),
                })
            }
        };
        self.records.push(record);
        Ok(receipt)
    }

    /// This server's share of a previously released FC answer.
    pub fn cached(&self, query_hash: &str) -> Option<AuthShare> {
        self.fc_cache.get(query_hash).copied()
    }

    /// Fixes the coarse-store noise parameters; allowed exactly once.
    pub fn coarse_params(
        &mut self,
        eps_p: f64,
        delta_p: f64,
        omega2: f64,
    ) -> Result<CoarseNoiseParams, DpError> {
        if self.coarse.is_some() {
            return Err(DpError::OneTimeOnly);
        }
        let sigma_delta = compute_sigma_delta(eps_p, delta_p, omega2)?;
        let eps = Epsilon::from_f64(eps_p)?;
        self.apply(LedgerRecord {
            seq: self.records.len() as u64,
            epoch: None,
            query_hash: String::new(),
            kind: RecordKind::CoarseSetup,
            eps,
            result_kind: ResultKind::Setup,
            cached: None,
            delta: Some(delta_p),
        })?;
        Ok(CoarseNoiseParams {
            eps_p,
            delta_p,
            sigma_delta,
        })
    }

    pub fn coarse_charge(&self) -> Option<CoarseCharge> {
        self.coarse
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    /// Sum of fine charges recorded against `epoch`.
    pub fn charged(&self, epoch: Epoch) -> Epsilon {
        self.records
            .iter()
            .filter(|r| r.epoch == Some(epoch) && r.kind != RecordKind::CoarseSetup)
            .map(|r| r.eps)
            .sum()
    }

    /// Total spend as `(sum of eps, delta)`; only the coarse store uses delta.
    pub fn total_spent(&self) -> (f64, f64) {
        let fine: Epsilon = self
            .records
            .iter()
            .filter(|r| r.kind != RecordKind::CoarseSetup)
            .map(|r| r.eps)
            .sum();
        let (eps_p, delta_p) = self.coarse.map_or((0.0, 0.0), |c| (c.eps_p, c.delta_p));
        (fine.as_f64() + eps_p, delta_p)
    }

    /// Rebuilds a ledger from its log.
    pub fn replay(
        eps_f_max: Epsilon,
        records: impl IntoIterator<Item = LedgerRecord>,
    ) -> Result<Self, DpError> {
        let mut ledger = BudgetLedger::new(eps_f_max);
        for r in records {
            ledger.apply(r)?;
        }
        Ok(ledger)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("ledger record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(eps_f_max: Epsilon, log: &str) -> Result<Self, DpError> {
        let records = log
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| DpError::Replay(e.to_string())))
            .collect::<Result<Vec<LedgerRecord>, _>>()?;
        Self::replay(eps_f_max, records)
    }

    /// Canonical byte form of the full state, for equality across restarts.
    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(&Snapshot {
            eps_f_max: self.eps_f_max,
            remaining: &self.remaining,
            deleted: &self.deleted,
            coarse: &self.coarse,
            fc_cache: &self.fc_cache,
            next_seq: self.records.len() as u64,
        })
        .expect("snapshot serializes")
    }

    /// Budget-only state: identical on every server, since cached shares
    /// are excluded.
    pub fn budget_digest(&self) -> Vec<u8> {
        let charges: Vec<(Option<Epoch>, &str, Epsilon)> = self
            .records
            .iter()
            .map(|r| (r.epoch, r.query_hash.as_str(), r.eps))
            .collect();
        serde_json::to_vec(&(&self.remaining, &self.deleted, &self.coarse, charges))
            .expect("digest serializes")
    }

    pub fn view(&self, epochs: impl IntoIterator<Item = Epoch>) -> BudgetView {
        let (total_eps, total_delta) = self.total_spent();
        BudgetView {
            eps_f_max: self.eps_f_max.as_f64(),
            epochs: epochs
                .into_iter()
                .map(|epoch| EpochBudget {
                    epoch,
                    remaining: self.remaining(epoch).as_f64(),
                    spent: self.charged(epoch).as_f64(),
                    deleted: self.is_deleted(epoch),
                })
                .collect(),
            coarse: self.coarse,
            total_eps,
            total_delta,
        }
    }

    /// Epochs with any recorded activity.
    pub fn touched_epochs(&self) -> Vec<Epoch> {
        self.remaining.keys().copied().collect()
    }
}
