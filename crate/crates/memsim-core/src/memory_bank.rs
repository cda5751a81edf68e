//! The external memory store and its deterministic transition operator.
//!
//! Banks are immutable values: [`apply`] consumes nothing and returns a new
//! bank plus a record of skipped operations. Snapshots wrap a bank value, so
//! restoring is total and snapshots can be shared freely across workers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::reward::normalize_token;
use crate::synth_env::QAItem;

/// Hard cap on entry content length, enforced by truncation on write.
pub const MAX_CONTENT_TOKENS: usize = 20;

/// Identifier of a bank entry. Rendered as a decimal string on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MemoryId(pub u64);

impl fmt::Display for MemoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryEntry {
    pub memory_id: MemoryId,
    pub speaker: String,
    pub content: Vec<String>,
    pub session_time: u64,
    pub dia_ids: BTreeSet<String>,
}

/// The evolving store; `entries` keeps insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryBank {
    pub entries: Vec<MemoryEntry>,
    pub id_counter: u64,
}

/// One edit of the bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemoryOperation {
    Insert {
        speaker: String,
        content: Vec<String>,
        dia_id: String,
        session_time: u64,
    },
    Update {
        target_id: MemoryId,
        content: Vec<String>,
        dia_id: String,
    },
    Delete {
        target_id: MemoryId,
    },
    Noop,
}

impl MemoryOperation {
    pub fn target(&self) -> Option<MemoryId> {
        match self {
            MemoryOperation::Update { target_id, .. } | MemoryOperation::Delete { target_id } => {
                Some(*target_id)
            }
            _ => None,
        }
    }
}

/// Why an operation in an [`apply`] call was not executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// UPDATE/DELETE names an id that does not exist in the starting bank.
    InvalidTarget,
    /// A second operation on a target already edited in this call.
    DuplicateTarget,
}

/// Outcome of applying a batch of operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApplyOutcome {
    pub bank: MemoryBank,
    /// `(index into ops, reason)` for every skipped operation.
    pub skipped: Vec<(usize, SkipReason)>,
}

impl ApplyOutcome {
    /// True when any operation named an unknown target; rollouts flag the
    /// step so it can be excluded from the training objective.
    pub fn had_invalid_target(&self) -> bool {
        self.skipped
            .iter()
            .any(|(_, r)| *r == SkipReason::InvalidTarget)
    }
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: MemoryId) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.memory_id == id)
    }

    /// Total content tokens over all entries.
    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|e| e.content.len()).sum()
    }

    /// Union of dia_ids over all entries.
    pub fn dia_ids(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .flat_map(|e| e.dia_ids.iter().map(String::as_str))
            .collect()
    }
}

/// Applies `ops` in order and returns the successor bank.
///
/// INSERT appends with a fresh id; UPDATE replaces content (truncated to the
/// length cap) and adds the new dia_id, keeping the entry's id; DELETE removes
/// the entry; NOOP does nothing. At most one operation touches a given id per
/// call; later duplicates are skipped. Targets must exist in the *starting*
/// bank, so ids created within the call cannot be edited by it.
pub fn apply(bank: &MemoryBank, ops: &[MemoryOperation]) -> ApplyOutcome {
    let preexisting: BTreeSet<MemoryId> = bank.entries.iter().map(|e| e.memory_id).collect();
    let mut next = bank.clone();
    let mut touched: BTreeSet<MemoryId> = BTreeSet::new();
    let mut skipped = Vec::new();

    for (idx, op) in ops.iter().enumerate() {
        if let Some(target) = op.target() {
            if !preexisting.contains(&target) {
                skipped.push((idx, SkipReason::InvalidTarget));
                continue;
            }
            if !touched.insert(target) {
                skipped.push((idx, SkipReason::DuplicateTarget));
                continue;
            }
        }
        match op {
            MemoryOperation::Insert {
                speaker,
                content,
                dia_id,
                session_time,
            } => {
                let id = MemoryId(next.id_counter);
                next.id_counter += 1;
                let mut content = content.clone();
                content.truncate(MAX_CONTENT_TOKENS);
                let mut dia_ids = BTreeSet::new();
                dia_ids.insert(dia_id.clone());
                next.entries.push(MemoryEntry {
                    memory_id: id,
                    speaker: speaker.clone(),
                    content,
                    session_time: *session_time,
                    dia_ids,
                });
            }
            MemoryOperation::Update {
                target_id,
                content,
                dia_id,
            } => {
                let entry = next
                    .entries
                    .iter_mut()
                    .find(|e| e.memory_id == *target_id)
                    .expect("target existence checked above");
                let mut content = content.clone();
                content.truncate(MAX_CONTENT_TOKENS);
                entry.content = content;
                entry.dia_ids.insert(dia_id.clone());
            }
            MemoryOperation::Delete { target_id } => {
                next.entries.retain(|e| e.memory_id != *target_id);
            }
            MemoryOperation::Noop => {}
        }
    }
    ApplyOutcome {
        bank: next,
        skipped,
    }
}

/// An entry scored against a query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub entry: MemoryEntry,
    pub similarity: f64,
}

fn token_bag(tokens: &[String]) -> BTreeMap<String, usize> {
    let mut bag = BTreeMap::new();
    for tok in tokens {
        let norm = normalize_token(tok);
        if !norm.is_empty() {
            *bag.entry(norm).or_insert(0) += 1;
        }
    }
    bag
}

/// Token-bag cosine similarity over normalized tokens; 0 when either side is
/// empty.
pub fn cosine_similarity(a: &[String], b: &[String]) -> f64 {
    let (ba, bb) = (token_bag(a), token_bag(b));
    let dot: f64 = ba
        .iter()
        .filter_map(|(tok, ca)| bb.get(tok).map(|cb| (*ca * *cb) as f64))
        .sum();
    if dot == 0.0 {
        return 0.0;
    }
    let na: f64 = ba.values().map(|c| (*c * *c) as f64).sum();
    let nb: f64 = bb.values().map(|c| (*c * *c) as f64).sum();
    dot / (crate::math::sqrt(na) * crate::math::sqrt(nb))
}

/// Per-speaker retrieval: entries with similarity >= `threshold`, sorted by
/// similarity descending then memory id ascending, truncated to `k` each.
pub fn retrieve(
    bank: &MemoryBank,
    query: &[String],
    k: usize,
    threshold: f64,
) -> BTreeMap<String, Vec<ScoredEntry>> {
    let mut by_speaker: BTreeMap<String, Vec<ScoredEntry>> = BTreeMap::new();
    for entry in &bank.entries {
        let similarity = cosine_similarity(query, &entry.content);
        if similarity >= threshold {
            by_speaker
                .entry(entry.speaker.clone())
                .or_default()
                .push(ScoredEntry {
                    entry: entry.clone(),
                    similarity,
                });
        }
    }
    for list in by_speaker.values_mut() {
        list.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .expect("similarities are finite")
                .then(a.entry.memory_id.cmp(&b.entry.memory_id))
        });
        list.truncate(k);
    }
    by_speaker.retain(|_, list| !list.is_empty());
    by_speaker
}

/// Flat retrieval across speakers: global ranking, truncated to `k`.
pub fn retrieve_flat(bank: &MemoryBank, query: &[String], k: usize, threshold: f64) -> Vec<ScoredEntry> {
    let mut all: Vec<ScoredEntry> = retrieve(bank, query, bank.entries.len().max(1), threshold)
        .into_values()
        .flatten()
        .collect();
    all.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .expect("similarities are finite")
            .then(a.entry.memory_id.cmp(&b.entry.memory_id))
    });
    all.truncate(k);
    all
}

/// A cached bank state. Restoring yields an independent mutable copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot(MemoryBank);

pub fn snapshot(bank: &MemoryBank) -> Snapshot {
    Snapshot(bank.clone())
}

pub fn restore(token: &Snapshot) -> MemoryBank {
    token.0.clone()
}

/// Fraction of gold evidence dia_ids absent from the bank (M-Fail).
///
/// `sum_q |E_q \ M| / sum_q |E_q|`, and 0 when there is no evidence at all.
pub fn evidence_coverage(bank: &MemoryBank, qa_items: &[QAItem]) -> f64 {
    let present = bank.dia_ids();
    let mut missing = 0usize;
    let mut total = 0usize;
    for qa in qa_items {
        total += qa.evidence.len();
        missing += qa
            .evidence
            .iter()
            .filter(|id| !present.contains(id.as_str()))
            .count();
    }
    if total == 0 {
        0.0
    } else {
        missing as f64 / total as f64
    }
}
