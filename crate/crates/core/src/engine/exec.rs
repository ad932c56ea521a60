//! One server's side of a query, and the querier's reassembly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{PartyStore, StoreKind};
use super::EngineError;
use crate::dp::{
    laplace_count, noised_threshold, svt_threshold, BudgetLedger, ChargeReceipt, Epsilon,
    OpenThresholdEntry, RecordKind, ThresholdBook,
};
use crate::epoch::Epoch;
use crate::fixed::FRAC_BITS;
use crate::mpc::{receive_outputs, AuthShare, MpcError, OutputShare, Party};
use crate::query::{EpochOutcome, EpochResult, QueryError, QueryKind, QueryRequest, QueryResponse};

/// Comparison width for `d - a^2` at double scale (`|d|, a^2 < 2^35`).
pub const DISTANCE_WIDTH: u32 = 3 + 2 * FRAC_BITS + 2;

/// Comparison width for `t - count` on integer counts below `2^20`.
pub const COUNT_WIDTH: u32 = 23;

/// Elements compared per protocol batch; bounds preprocessing memory.
const COMPARE_CHUNK: usize = 4096;

/// Everything one server keeps between queries.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyState {
    pub id: usize,
    pub store: PartyStore,
    pub ledger: BudgetLedger,
    pub thresholds: ThresholdBook,
}

impl PartyState {
    pub fn new(id: usize, k: usize, eps_f_max: Epsilon) -> Self {
        PartyState {
            id,
            store: PartyStore::new(k),
            ledger: BudgetLedger::new(eps_f_max),
            thresholds: ThresholdBook::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochReply {
    /// A value released to the querier under a one-time mask.
    Masked {
        output: OutputShare,
        charged: Epsilon,
        cached: bool,
    },
    /// A threshold bit the servers learned.
    Bit {
        fired: bool,
        charged: Epsilon,
    },
    Refused {
        requested: Epsilon,
        remaining: Epsilon,
    },
    Deleted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartyReply {
    pub party_id: usize,
    pub kind: QueryKind,
    pub epochs: Vec<(Epoch, EpochReply)>,
    pub receipts: Vec<ChargeReceipt>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Plan {
    Deleted,
    Refused {
        requested: Epsilon,
        remaining: Epsilon,
    },
    Cached(AuthShare),
    Compute,
}

impl Plan {
    fn tag(&self) -> u8 {
        match self {
            Plan::Deleted => 0,
            Plan::Refused { .. } => 1,
            Plan::Cached(_) => 2,
            Plan::Compute => 3,
        }
    }
}

fn plan_epoch(
    state: &PartyState,
    req: &QueryRequest,
    epoch: Epoch,
    eps: Epsilon,
) -> Result<Plan, EngineError> {
    if !req.kind.is_fine() {
        return Ok(Plan::Compute);
    }
    if state.ledger.is_deleted(epoch) {
        return Ok(Plan::Deleted);
    }
    if req.kind == QueryKind::Fc {
        if let Some(share) = state.ledger.cached(&req.count_key(epoch)) {
            return Ok(Plan::Cached(share));
        }
    } else if let Some(entry) = state.thresholds.get(&req.threshold_key(epoch)) {
        if entry.eps_t != eps {
            return Err(QueryError(format!(
                "an open threshold query for epoch {epoch} uses eps {}, not {eps}",
                entry.eps_t
            ))
            .into());
        }
    }
    let remaining = state.ledger.remaining(epoch);
    if eps > remaining {
        return Ok(Plan::Refused {
            requested: eps,
            remaining,
        });
    }
    Ok(Plan::Compute)
}

/// Confirms every server reached the same admission decisions.
fn agree_on_plan(party: &mut Party<'_>, epochs: &[Epoch], plans: &[Plan]) -> Result<(), MpcError> {
    let mut h = Sha256::new();
    for (e, p) in epochs.iter().zip(plans) {
        h.update(e.to_le_bytes());
        h.update([p.tag()]);
    }
    let d = h.finalize();
    let mine = u128::from_le_bytes(d[..16].try_into().expect("16 bytes"));
    let all = party.exchange_public(&[mine])?;
    if all.iter().any(|v| v.as_slice() != [mine]) {
        return Err(MpcError::IntegrityFailure(
            "servers disagree on budget state".into(),
        ));
    }
    Ok(())
}

/// Donation ids held by every server, per epoch.
fn aligned_ids(
    party: &mut Party<'_>,
    store: &PartyStore,
    epochs: &[Epoch],
    kind: StoreKind,
) -> Result<Vec<Vec<u64>>, MpcError> {
    let mut msg = Vec::new();
    let local: Vec<Vec<u64>> = epochs.iter().map(|e| store.ids(*e, kind)).collect();
    for ids in &local {
        msg.push(ids.len() as u128);
        msg.extend(ids.iter().map(|i| *i as u128));
    }
    let all = party.exchange_public(&msg)?;
    let mut common: Vec<BTreeSet<u64>> =
        local.iter().map(|v| v.iter().copied().collect()).collect();
    for (p, theirs) in all.iter().enumerate() {
        let mut at = 0;
        for set in common.iter_mut() {
            let len = *theirs
                .get(at)
                .ok_or_else(|| MpcError::Malformed(format!("party {p} sent a short id list")))?
                as usize;
            let ids: BTreeSet<u64> = theirs
                .get(at + 1..at + 1 + len)
                .ok_or_else(|| MpcError::Malformed(format!("party {p} sent a short id list")))?
                .iter()
                .map(|v| *v as u64)
                .collect();
            set.retain(|i| ids.contains(i));
            at += 1 + len;
        }
    }
    Ok(common
        .into_iter()
        .map(|s| s.into_iter().collect())
        .collect())
}

/// Attaches MACs to stored elements that have never been queried.
///
/// Parties agree on the union of their pending sets first: a server that
/// restarted has lost its MACs while its peers still hold theirs, and
/// re-authenticating an element only refreshes its MAC.
fn authenticate_pending(
    party: &mut Party<'_>,
    store: &mut PartyStore,
    epochs: &[Epoch],
    groups: &[Vec<u64>],
    kind: StoreKind,
) -> Result<(), MpcError> {
    let mut local: Vec<u128> = Vec::new();
    for (e, ids) in epochs.iter().zip(groups) {
        let Some(map) = store.elements(*e, kind) else {
            continue;
        };
        local.extend(
            ids.iter()
                .filter(|id| !map[*id].authenticated)
                .map(|id| pending_key(*e, *id)),
        );
    }
    if !party.macs_enabled() {
        for (e, id) in local.into_iter().map(split_pending_key) {
            if let Some(el) = store.elements_mut(e, kind).and_then(|m| m.get_mut(&id)) {
                el.authenticated = true;
            }
        }
        return Ok(());
    }
    let mut pending: Vec<u128> = party
        .exchange_public(&local)?
        .into_iter()
        .flatten()
        .collect();
    pending.sort_unstable();
    pending.dedup();
    let mut raw: Vec<u128> = Vec::with_capacity(pending.len() * 2 * store.k());
    for (e, id) in pending.iter().copied().map(split_pending_key) {
        let el = store
            .elements(e, kind)
            .and_then(|m| m.get(&id))
            .ok_or_else(|| {
                MpcError::Malformed(format!("peer lists unknown element {id} in epoch {e}"))
            })?;
        raw.extend(el.x.iter().chain(&el.x_sq).map(|s| s.value));
    }
    let authed = party.authenticate_inputs(&raw)?;
    let k = store.k();
    for (i, (e, id)) in pending.into_iter().map(split_pending_key).enumerate() {
        let el = store
            .elements_mut(e, kind)
            .and_then(|m| m.get_mut(&id))
            .expect("pending element exists");
        let chunk = &authed[i * 2 * k..(i + 1) * 2 * k];
        el.x.copy_from_slice(&chunk[..k]);
        el.x_sq.copy_from_slice(&chunk[k..]);
        el.authenticated = true;
    }
    Ok(())
}

fn pending_key(epoch: Epoch, id: u64) -> u128 {
    ((epoch as u64 as u128) << 64) | id as u128
}

fn split_pending_key(key: u128) -> (Epoch, u64) {
    ((key >> 64) as u64 as Epoch, key as u64)
}

/// Shared counts `|{x : |x - q|^2 < a^2}|`, one per group (integer scale).
///
/// `d = sum x_j^2 - 2 sum q_j x_j + sum q_j^2` needs only public scalings,
/// and everything sits at double scale so no truncation is involved.
pub fn shared_match_counts(
    party: &mut Party<'_>,
    store: &PartyStore,
    epochs: &[Epoch],
    groups: &[Vec<u64>],
    kind: StoreKind,
    req: &QueryRequest,
) -> Result<Vec<AuthShare>, MpcError> {
    let q: Vec<i64> = req.q_fixed().iter().map(|v| v.signed()).collect();
    let minus_two_q: Vec<u128> = q
        .iter()
        .map(|v| (v.wrapping_mul(-2)) as u64 as u128)
        .collect();
    let qq: i64 = q.iter().map(|v| v * v).sum();
    let offset = (qq.wrapping_sub(req.radius_sq_double() as i64)) as u64 as u128;
    let mut diffs = Vec::new();
    let mut owner = Vec::new();
    for (g, (e, ids)) in epochs.iter().zip(groups).enumerate() {
        let Some(map) = store.elements(*e, kind) else {
            continue;
        };
        for id in ids {
            let el = &map[id];
            let mut d = party.constant(offset);
            for (j, (x, sq)) in el.x.iter().zip(&el.x_sq).enumerate() {
                d += *sq + x.scale(minus_two_q[j]);
            }
            diffs.push(d);
            owner.push(g);
        }
    }
    let mut counts = vec![AuthShare::ZERO; groups.len()];
    let mut at = 0;
    for chunk in diffs.chunks(COMPARE_CHUNK) {
        for b in party.less_than_zero(chunk, DISTANCE_WIDTH)? {
            counts[owner[at]] += b;
            at += 1;
        }
    }
    Ok(counts)
}

/// Runs `req` from one server's point of view and settles its budget.
///
/// Nothing is charged unless every epoch's computation succeeded.
pub fn execute(
    party: &mut Party<'_>,
    state: &mut PartyState,
    req: &QueryRequest,
) -> Result<PartyReply, EngineError> {
    req.validate(state.store.k())?;
    let epochs: Vec<Epoch> = req.epochs.iter().collect();
    let eps = match req.eps {
        Some(e) if req.kind.is_fine() => Epsilon::from_f64(e)?,
        _ => Epsilon::ZERO,
    };
    let plans = epochs
        .iter()
        .map(|e| plan_epoch(state, req, *e, eps))
        .collect::<Result<Vec<_>, _>>()?;
    agree_on_plan(party, &epochs, &plans)?;
    let compute: Vec<Epoch> = epochs
        .iter()
        .zip(&plans)
        .filter(|(_, p)| **p == Plan::Compute)
        .map(|(e, _)| *e)
        .collect();
    let kind = if req.kind.is_fine() {
        StoreKind::Fine
    } else {
        StoreKind::Coarse
    };
    let groups = aligned_ids(party, &state.store, &compute, kind)?;
    authenticate_pending(party, &mut state.store, &compute, &groups, kind)?;
    let counts = shared_match_counts(party, &state.store, &compute, &groups, kind, req)?;

    let mut computed: Vec<EpochReply> = Vec::new();
    let mut receipts = Vec::new();
    match req.kind {
        QueryKind::Fc => {
            let noisy = laplace_count(party, &counts, eps.as_f64())?;
            let mut released = Vec::new();
            let mut fresh = noisy.iter();
            for p in &plans {
                match p {
                    Plan::Compute => {
                        released.push(*fresh.next().expect("one noisy count per computed epoch"))
                    }
                    Plan::Cached(s) => released.push(*s),
                    _ => {}
                }
            }
            let outputs = party.output_to_querier(&released)?;
            let mut outs = outputs.into_iter();
            let mut fresh = compute.iter().zip(&noisy);
            for p in &plans {
                match p {
                    Plan::Compute => {
                        let (e, share) = fresh.next().expect("computed epoch");
                        let r = state.ledger.charge(
                            *e,
                            eps,
                            RecordKind::Fc,
                            &req.count_key(*e),
                            Some(*share),
                        )?;
                        receipts.push(r);
                        computed.push(EpochReply::Masked {
                            output: outs.next().expect("output per release"),
                            charged: eps,
                            cached: false,
                        });
                    }
                    Plan::Cached(_) => computed.push(EpochReply::Masked {
                        output: outs.next().expect("output per release"),
                        charged: Epsilon::ZERO,
                        cached: true,
                    }),
                    _ => {}
                }
            }
        }
        QueryKind::Ft => {
            let t = req.threshold.expect("validated threshold");
            let mut t_hats = Vec::with_capacity(compute.len());
            for e in &compute {
                let key = req.threshold_key(*e);
                let t_hat = match state.thresholds.get(&key) {
                    Some(entry) => entry.t_hat,
                    None => {
                        let t_hat = noised_threshold(party, t, eps.as_f64())?;
                        state.thresholds.open(OpenThresholdEntry {
                            key,
                            epoch: *e,
                            t,
                            eps_t: eps,
                            t_hat,
                        });
                        t_hat
                    }
                };
                t_hats.push(t_hat);
            }
            let ge = svt_threshold(party, &counts, &t_hats, eps.as_f64())?;
            let tau = party.reveal(&ge)?;
            for (e, bit) in compute.iter().zip(tau) {
                let fired = bit as u64 == 1;
                let charged = if fired {
                    let key = req.threshold_key(*e);
                    receipts.push(state.ledger.charge(*e, eps, RecordKind::Ft, &key, None)?);
                    state.thresholds.close(&key);
                    eps
                } else {
                    Epsilon::ZERO
                };
                computed.push(EpochReply::Bit { fired, charged });
            }
        }
        QueryKind::Cc | QueryKind::Ct => {
            let released = if req.kind == QueryKind::Ct {
                let t = req.threshold.expect("validated threshold") as u128;
                let diffs: Vec<AuthShare> = counts.iter().map(|c| party.constant(t) - *c).collect();
                party.less_than_zero(&diffs, COUNT_WIDTH)?
            } else {
                counts
            };
            for output in party.output_to_querier(&released)? {
                computed.push(EpochReply::Masked {
                    output,
                    charged: Epsilon::ZERO,
                    cached: false,
                });
            }
        }
    }
    for r in &receipts {
        if r.delete_fine_store {
            state.store.delete_fine(r.epoch);
            state.thresholds.drop_epoch(r.epoch);
        }
    }

    let mut computed = computed.into_iter();
    let replies = epochs
        .iter()
        .zip(plans)
        .map(|(e, p)| {
            let reply = match p {
                Plan::Deleted => EpochReply::Deleted,
                Plan::Refused {
                    requested,
                    remaining,
                } => EpochReply::Refused {
                    requested,
                    remaining,
                },
                Plan::Cached(_) | Plan::Compute => {
                    computed.next().expect("reply per answered epoch")
                }
            };
            (*e, reply)
        })
        .collect();
    Ok(PartyReply {
        party_id: party.id(),
        kind: req.kind,
        epochs: replies,
        receipts,
    })
}

/// Combines every server's reply into the querier's answer.
pub fn assemble(replies: &[PartyReply]) -> Result<QueryResponse, EngineError> {
    let disagree = || {
        EngineError::Mpc(MpcError::IntegrityFailure(
            "servers disagree on the reply".into(),
        ))
    };
    let first = replies
        .first()
        .ok_or_else(|| EngineError::Malformed("no replies".into()))?;
    for (p, r) in replies.iter().enumerate() {
        if r.party_id != p || r.kind != first.kind || r.epochs.len() != first.epochs.len() {
            return Err(disagree());
        }
    }
    let mut results = Vec::with_capacity(first.epochs.len());
    let mut total = Epsilon::ZERO;
    for (i, (epoch, head)) in first.epochs.iter().enumerate() {
        let column: Vec<&EpochReply> = replies
            .iter()
            .map(|r| {
                let (e, reply) = &r.epochs[i];
                if e == epoch {
                    Ok(reply)
                } else {
                    Err(disagree())
                }
            })
            .collect::<Result<_, _>>()?;
        let result = match head {
            EpochReply::Masked {
                charged, cached, ..
            } => {
                let outputs: Vec<Vec<OutputShare>> = column
                    .iter()
                    .map(|r| match r {
                        EpochReply::Masked {
                            output,
                            charged: c,
                            cached: k,
                        } if c == charged && k == cached => Ok(vec![*output]),
                        _ => Err(disagree()),
                    })
                    .collect::<Result<_, _>>()?;
                let value = receive_outputs(&outputs)?[0];
                let outcome = match first.kind {
                    QueryKind::Fc => EpochOutcome::Count {
                        value: value.decode_double(),
                    },
                    QueryKind::Cc => EpochOutcome::Exact {
                        count: value.signed(),
                    },
                    QueryKind::Ct => EpochOutcome::Bit {
                        fired: value.0 == 1,
                    },
                    QueryKind::Ft => return Err(disagree()),
                };
                total = total + *charged;
                EpochResult {
                    epoch: *epoch,
                    outcome,
                    charged: charged.as_f64(),
                    cached: *cached,
                }
            }
            other => {
                if column.iter().any(|r| *r != other) {
                    return Err(disagree());
                }
                let (outcome, charged) = match other {
                    EpochReply::Bit { fired, charged } => {
                        total = total + *charged;
                        (EpochOutcome::Bit { fired: *fired }, charged.as_f64())
                    }
                    EpochReply::Refused {
                        requested,
                        remaining,
                    } => (
                        EpochOutcome::Refused {
                            requested: requested.as_f64(),
                            remaining: remaining.as_f64(),
                        },
                        0.0,
                    ),
                    EpochReply::Deleted => (EpochOutcome::Deleted, 0.0),
                    EpochReply::Masked { .. } => unreachable!("handled above"),
                };
                EpochResult {
                    epoch: *epoch,
                    outcome,
                    charged,
                    cached: false,
                }
            }
        };
        results.push(result);
    }
    Ok(QueryResponse {
        kind: first.kind,
        results,
        total_charged: total.as_f64(),
    })
}
