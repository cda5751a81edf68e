//! Training metrics: one row per (stage, epoch), emitted as JSON lines and
//! CSV.
//!
//! The JSONL stream is the determinism contract — identical `(config, seed)`
//! runs produce byte-identical files — so the wall-clock column lives only in
//! the CSV.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub stage: usize,
    pub epoch: usize,
    /// Mean of the global reward matrix for the epoch's rollouts (pre-update
    /// policy).
    pub mean_session_reward: f64,
    /// Greedy-pass F1 on the held-out validation script (post-update policy).
    pub validation_f1: f64,
    /// Validation QA minus the weighted compression penalty; drives
    /// checkpoint selection.
    pub validation_total: f64,
    /// Fraction of gold evidence missing from the validation bank.
    pub m_fail: f64,
    /// Validation bank size in content tokens.
    pub bank_tokens: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Not serialized to JSONL: wall-clock is inherently nondeterministic.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

pub fn to_jsonl(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    out
}

pub const CSV_HEADER: &str = "stage,epoch,mean_session_reward,validation_f1,validation_total,m_fail,bank_tokens,loss,grad_norm,wall_clock_ms";

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{},{:?},{:?},{:?}\n",
            r.stage,
            r.epoch,
            r.mean_session_reward,
            r.validation_f1,
            r.validation_total,
            r.m_fail,
            r.bank_tokens,
            r.loss,
            r.grad_norm,
            r.wall_clock_ms
        ));
    }
    out
}
