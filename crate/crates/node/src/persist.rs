//! On-disk state of one server.
//!
//! ```text
//! <store_dir>/epochs/<epoch>.log   append-only share records
//! <store_dir>/ledger.jsonl         append-only budget records
//! <store_dir>/thresholds.json      open threshold queries (rewritten)
//! <store_dir>/prep.json            preprocessing position (rewritten)
//! ```
//!
//! Share records are `u32 len | bundle | 8-byte SHA-256 prefix`. A torn
//! tail left by a crash fails its checksum and is cut off on open; it was
//! never acknowledged.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};
use trendscope_core::dp::{BudgetLedger, LedgerRecord, ThresholdBook};
use trendscope_core::{Epoch, Epsilon, ShareBundle};

use crate::codec::{decode_bundle, encode_bundle, encode_coarse_only};
use crate::NodeError;

pub struct StoreDir {
    root: PathBuf,
    logs: BTreeMap<Epoch, File>,
    ledger_records: usize,
}

fn checksum(body: &[u8]) -> [u8; 8] {
    Sha256::digest(body)[..8].try_into().expect("8 bytes")
}

fn record(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&checksum(body));
    out
}

/// Splits a log into intact records; returns them and the intact length.
fn parse_records(buf: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut at = 0;
    while buf.len() - at >= 4 {
        let len = u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes")) as usize;
        let end = at + 4 + len + 8;
        if end > buf.len() {
            break;
        }
        let body = &buf[at + 4..at + 4 + len];
        if checksum(body) != buf[at + 4 + len..end] {
            break;
        }
        out.push(body);
        at = end;
    }
    (out, at)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

impl StoreDir {
    pub fn open(root: &Path) -> Result<Self, NodeError> {
        fs::create_dir_all(root.join("epochs"))?;
        Ok(StoreDir {
            root: root.to_path_buf(),
            logs: BTreeMap::new(),
            ledger_records: 0,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn epoch_path(&self, epoch: Epoch) -> PathBuf {
        self.root.join("epochs").join(format!("{epoch}.log"))
    }

    /// Durably appends one donation. With `fine == false` only the coarse
    /// vectors reach the disk.
    pub fn append(&mut self, bundle: &ShareBundle, fine: bool) -> Result<(), NodeError> {
        let path = self.epoch_path(bundle.epoch);
        let f = match self.logs.entry(bundle.epoch) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(OpenOptions::new().create(true).append(true).open(path)?)
            }
        };
        let body = if fine {
            encode_bundle(bundle)
        } else {
            encode_coarse_only(bundle)
        };
        f.write_all(&record(&body))?;
        f.sync_data()?;
        Ok(())
    }

    /// Every intact donation on disk, epoch by epoch. Torn tails are
    /// truncated away.
    pub fn replay_shares(&mut self) -> Result<Vec<ShareBundle>, NodeError> {
        let mut out = Vec::new();
        let mut entries: Vec<(Epoch, PathBuf)> = Vec::new();
        for entry in fs::read_dir(self.root.join("epochs"))? {
            let path = entry?.path();
            let epoch = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".log"))
                .and_then(|n| n.parse::<Epoch>().ok());
            if let Some(epoch) = epoch {
                entries.push((epoch, path));
            }
        }
        entries.sort();
        for (epoch, path) in entries {
            let mut buf = Vec::new();
            File::open(&path)?.read_to_end(&mut buf)?;
            let (records, intact) = parse_records(&buf);
            for body in records {
                let b = decode_bundle(body)
                    .map_err(|e| NodeError::Persist(format!("{}: {e}", path.display())))?;
                if b.epoch != epoch {
                    return Err(NodeError::Persist(format!(
                        "{} holds a record for epoch {}",
                        path.display(),
                        b.epoch
                    )));
                }
                out.push(b);
            }
            if intact < buf.len() {
                self.logs.remove(&epoch);
                OpenOptions::new()
                    .write(true)
                    .open(&path)?
                    .set_len(intact as u64)?;
            }
        }
        Ok(out)
    }

    /// Rewrites an epoch's log without its fine vectors.
    pub fn strip_fine(&mut self, epoch: Epoch) -> Result<(), NodeError> {
        let path = self.epoch_path(epoch);
        self.logs.remove(&epoch);
        let buf = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let (records, _) = parse_records(&buf);
        let mut out = Vec::with_capacity(buf.len() / 2);
        for body in records {
            let b = decode_bundle(body).map_err(|e| NodeError::Persist(e.to_string()))?;
            out.extend(record(&encode_coarse_only(&b)));
        }
        write_atomic(&path, &out)?;
        Ok(())
    }

    fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }

    /// Replays the ledger log. An unterminated last line is a torn write
    /// and is dropped.
    pub fn load_ledger(&mut self, eps_f_max: Epsilon) -> Result<BudgetLedger, NodeError> {
        let path = self.ledger_path();
        let mut text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            text.truncate(keep);
            OpenOptions::new()
                .write(true)
                .open(&path)?
                .set_len(keep as u64)?;
        }
        let ledger = BudgetLedger::from_jsonl(eps_f_max, &text)?;
        self.ledger_records = ledger.records().len();
        Ok(ledger)
    }

    /// Appends the records added since the last sync.
    pub fn sync_ledger(&mut self, ledger: &BudgetLedger) -> Result<(), NodeError> {
        let fresh: &[LedgerRecord] =
            &ledger.records()[self.ledger_records.min(ledger.records().len())..];
        if fresh.is_empty() {
            return Ok(());
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.ledger_path())?;
        let mut text = String::new();
        for r in fresh {
            text.push_str(&serde_json::to_string(r).expect("ledger record serializes"));
            text.push('\n');
        }
        f.write_all(text.as_bytes())?;
        f.sync_data()?;
        self.ledger_records = ledger.records().len();
        Ok(())
    }

    pub fn load_thresholds(&self) -> Result<ThresholdBook, NodeError> {
        Ok(self.load_json("thresholds.json")?.unwrap_or_default())
    }

    pub fn save_thresholds(&self, book: &ThresholdBook) -> Result<(), NodeError> {
        self.save_json("thresholds.json", book)
    }

    pub fn load_json<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>, NodeError> {
        match fs::read(self.root.join(name)) {
            Ok(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| NodeError::Persist(format!("{name}: {e}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), NodeError> {
        write_atomic(
            &self.root.join(name),
            &serde_json::to_vec(value).expect("state serializes"),
        )?;
        Ok(())
    }
}
