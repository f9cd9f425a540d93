//! Outbound sync of add/drop operations to the campus registration system.
//!
//! Delivery is at-least-once. The remote keeps a watermark of the highest
//! sequence number it has applied: anything at or below it is acknowledged
//! without effect, the next number is applied, and anything further ahead is
//! refused so operations are never applied out of order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const ATTEMPT_BUDGET: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncOp {
    Add,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncStatus {
    Pending,
    Acked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub seq: u64,
    pub op: SyncOp,
    pub student_id: String,
    pub course_code: String,
    pub status: SyncStatus,
}

pub type EnrollmentSet = BTreeSet<(String, String)>;

fn apply_op(set: &mut EnrollmentSet, rec: &SyncRecord) {
    let key = (rec.student_id.clone(), rec.course_code.clone());
    match rec.op {
        SyncOp::Add => {
            set.insert(key);
        }
        SyncOp::Drop => {
            set.remove(&key);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemoteError {
    #[error("remote unavailable")]
    RemoteUnavailable,
    #[error("out of order: remote expects seq {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
}

/// What a real client for the registration system would implement.
pub trait OdusRemote {
    fn apply(&mut self, rec: &SyncRecord) -> Result<(), RemoteError>;
    fn enrollments(&self) -> EnrollmentSet;
}

/// In-process stand-in with seeded failure injection. Each `apply` consumes
/// exactly one draw; a draw below `failure_prob` fails without touching state.
#[derive(Debug, Clone)]
pub struct MockOdus {
    set: EnrollmentSet,
    watermark: u64,
    failure_prob: f64,
    rng: SplitMix64,
}

impl MockOdus {
    pub fn new(failure_prob: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&failure_prob), "failure_prob out of range");
        MockOdus {
            set: EnrollmentSet::new(),
            watermark: 0,
            failure_prob,
            rng: SplitMix64::new(seed),
        }
    }

    pub fn watermark(&self) -> u64 {
        self.watermark
    }
}

impl OdusRemote for MockOdus {
    fn apply(&mut self, rec: &SyncRecord) -> Result<(), RemoteError> {
        if self.rng.chance(self.failure_prob) {
            return Err(RemoteError::RemoteUnavailable);
        }
        if rec.seq <= self.watermark {
            return Ok(());
        }
        if rec.seq != self.watermark + 1 {
            return Err(RemoteError::OutOfOrder {
                expected: self.watermark + 1,
                got: rec.seq,
            });
        }
        apply_op(&mut self.set, rec);
        self.watermark = rec.seq;
        Ok(())
    }

    fn enrollments(&self) -> EnrollmentSet {
        self.set.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("no record with seq {0}")]
    UnknownRecord(u64),
    #[error("{remaining} records still pending after retry budget")]
    Unreconciled { remaining: usize },
}

#[derive(Debug)]
pub struct OdusBridge<R> {
    records: Vec<SyncRecord>,
    remote: R,
}

impl<R: OdusRemote> OdusBridge<R> {
    pub fn new(remote: R) -> Self {
        OdusBridge {
            records: Vec::new(),
            remote,
        }
    }

    pub fn remote(&self) -> &R {
        &self.remote
    }

    pub fn records(&self) -> &[SyncRecord] {
        &self.records
    }

    /// Queue an operation; sequence numbers start at 1.
    pub fn record(&mut self, op: SyncOp, student_id: &str, course_code: &str) -> u64 {
        let seq = self.records.len() as u64 + 1;
        self.records.push(SyncRecord {
            seq,
            op,
            student_id: student_id.to_owned(),
            course_code: course_code.to_owned(),
            status: SyncStatus::Pending,
        });
        seq
    }

    pub fn pending(&self) -> usize {
        self.records.iter().filter(|r| r.status == SyncStatus::Pending).count()
    }

    /// The local view: every queued operation applied in order.
    pub fn local_enrollments(&self) -> EnrollmentSet {
        let mut set = EnrollmentSet::new();
        for r in &self.records {
            apply_op(&mut set, r);
        }
        set
    }

    /// One delivery attempt. Pushing an already acked record is a no-op.
    pub fn push(&mut self, seq: u64) -> Result<(), BridgeError> {
        let idx = seq
            .checked_sub(1)
            .map(|i| i as usize)
            .filter(|i| *i < self.records.len())
            .ok_or(BridgeError::UnknownRecord(seq))?;
        if self.records[idx].status == SyncStatus::Acked {
            return Ok(());
        }
        self.remote.apply(&self.records[idx])?;
        self.records[idx].status = SyncStatus::Acked;
        Ok(())
    }

    /// Retry pending records in seq order, up to the budget each. Stops at
    /// the first record that exhausts its budget so later records never
    /// overtake it.
    pub fn reconcile(&mut self) -> Result<usize, BridgeError> {
        let mut flushed = 0;
        let pending: Vec<u64> = self
            .records
            .iter()
            .filter(|r| r.status == SyncStatus::Pending)
            .map(|r| r.seq)
            .collect();
        for seq in pending {
            let mut acked = false;
            for _ in 0..ATTEMPT_BUDGET {
                match self.push(seq) {
                    Ok(()) => {
                        acked = true;
                        break;
                    }
                    Err(BridgeError::Remote(e)) => log::debug!("sync seq {seq}: {e}"),
                    Err(e) => return Err(e),
                }
            }
            if !acked {
                return Err(BridgeError::Unreconciled {
                    remaining: self.pending(),
                });
            }
            flushed += 1;
        }
        Ok(flushed)
    }
}
