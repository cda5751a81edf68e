//! QA scoring, compression penalty, and the combined session reward.
//!
//! Answers come from a deterministic retrieval oracle: the single stored
//! entry most similar to the question wins and its content is the answer.
//! QA quality is SQuAD-style token F1 after lowercasing, punctuation
//! stripping, article removal, and whitespace tokenization.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::memory_bank::{retrieve, MemoryBank};
use crate::synth_env::{DialogueScript, QAItem};

/// Retrieval parameters shared by the answer oracle and the manager's
/// candidate lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    /// Per-speaker result cap.
    pub top_k: usize,
    /// Minimum token-bag cosine similarity.
    pub threshold: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 30,
            threshold: 0.3,
        }
    }
}

/// Lowercases and strips punctuation from one token; empty result or an
/// article (`a`, `an`, `the`) means the token is dropped by callers.
pub fn normalize_token(token: &str) -> String {
    let lowered: String = token
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(|c| c.to_lowercase())
        .collect();
    match lowered.as_str() {
        "a" | "an" | "the" => String::new(),
        _ => lowered,
    }
}

/// Normalizes free text into tokens: lowercase, strip punctuation, drop
/// articles, split on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Applies the same normalization to an already-tokenized sequence.
pub fn normalize_token_seq(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| normalize_token(t))
        .filter(|t| !t.is_empty())
        .collect()
}

fn counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut map = BTreeMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

/// Multiset-overlap token F1 on normalized token sequences.
///
/// Both sides empty scores 1; exactly one side empty scores 0.
pub fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let (pc, gc) = (counts(pred), counts(gold));
    let overlap: usize = pc
        .iter()
        .filter_map(|(tok, n)| gc.get(tok).map(|m| (*n).min(*m)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Retrieval answer oracle: per-speaker retrieval, then the globally most
/// similar entry's content (ties to the lower memory id). Empty when nothing
/// clears the threshold.
pub fn answer(bank: &MemoryBank, qa: &QAItem, retrieval: &RetrievalConfig) -> Vec<String> {
    let query = normalize_token_seq(&qa.question);
    let per_speaker = retrieve(bank, &query, retrieval.top_k, retrieval.threshold);
    let mut best: Option<&crate::memory_bank::ScoredEntry> = None;
    for scored in per_speaker.values().flatten() {
        best = match best {
            None => Some(scored),
            Some(cur) => {
                if scored.similarity > cur.similarity
                    || (scored.similarity == cur.similarity
                        && scored.entry.memory_id < cur.entry.memory_id)
                {
                    Some(scored)
                } else {
                    Some(cur)
                }
            }
        };
    }
    best.map(|s| s.entry.content.clone()).unwrap_or_default()
}

/// Mean token F1 of oracle answers over `questions`; 0 for an empty list.
pub fn qa_score(bank: &MemoryBank, questions: &[QAItem], retrieval: &RetrievalConfig) -> f64 {
    if questions.is_empty() {
        return 0.0;
    }
    let total: f64 = questions
        .iter()
        .map(|qa| {
            let pred = normalize_token_seq(&answer(bank, qa, retrieval));
            let gold = normalize_token_seq(&qa.gold_answer);
            token_f1(&pred, &gold)
        })
        .sum();
    total / questions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RewardError {
    SessionOutOfRange { t: usize, sessions: usize },
}

impl fmt::Display for RewardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardError::SessionOutOfRange { t, sessions } => {
                write!(f, "session {t} out of range 1..={sessions}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RewardError {}

/// Excess bank tokens over an `alpha` fraction of cumulative session tokens,
/// as a fraction of those cumulative tokens; 0 when within budget.
pub fn comp_penalty(
    bank: &MemoryBank,
    script: &DialogueScript,
    t: usize,
    alpha: f64,
) -> Result<f64, RewardError> {
    if t == 0 || t > script.session_count() {
        return Err(RewardError::SessionOutOfRange {
            t,
            sessions: script.session_count(),
        });
    }
    let cumulative = script.cumulative_tokens(t) as f64;
    if cumulative == 0.0 {
        return Ok(0.0);
    }
    let bank_tokens = bank.token_count() as f64;
    let budget = alpha * cumulative;
    if bank_tokens <= budget {
        Ok(0.0)
    } else {
        Ok((bank_tokens - budget) / cumulative)
    }
}

/// QA score, compression penalty, and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub qa: f64,
    pub comp: f64,
    pub total: f64,
    pub question_count: usize,
}

/// `total = qa - lambda_comp * comp` for session `t`'s question bucket.
pub fn session_reward(
    bank: &MemoryBank,
    questions: &[QAItem],
    script: &DialogueScript,
    t: usize,
    alpha: f64,
    lambda_comp: f64,
    retrieval: &RetrievalConfig,
) -> Result<RewardBreakdown, RewardError> {
    let qa = qa_score(bank, questions, retrieval);
    let comp = comp_penalty(bank, script, t, alpha)?;
    Ok(RewardBreakdown {
        qa,
        comp,
        total: qa - lambda_comp * comp,
        question_count: questions.len(),
    })
}
