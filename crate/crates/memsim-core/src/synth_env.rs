//! Seeded synthetic multi-session dialogue scripts.
//!
//! A script is `T` sessions of `K` chunks of statements between two speakers.
//! Fact-bearing statements plant a `(subject, attribute, value)` triple whose
//! value tokens appear verbatim in the statement text; distractor statements
//! draw from a disjoint small-talk lexicon. Facts may later evolve through
//! refinement or contradiction statements that supersede an earlier fact with
//! the same subject and attribute. Every fact chain yields one QA item whose
//! gold answer is the chain's final value and whose evidence is the set of
//! dialogue-turn ids of all statements in the chain.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::rng::{domain, substream};

/// Fixed token lexicons. The four groups are pairwise disjoint; `what` (the
/// question marker) belongs to none of them.
pub mod lexicon {
    /// Pool of speaker names; a script uses two of them.
    pub const SPEAKERS: &[&str] = [
        "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi",
    ]
    .as_slice();

    /// Fact attribute labels, one token each.
    pub const ATTRIBUTES: &[&str] = [
        "allergy",
        "band",
        "bike",
        "book",
        "boss",
        "breakfast",
        "car",
        "cat",
        "city",
        "class",
        "club",
        "coach",
        "color",
        "dance",
        "dentist",
        "dessert",
        "dog",
        "drink",
        "flower",
        "food",
        "game",
        "garden",
        "hobby",
        "instrument",
        "job",
        "language",
        "movie",
        "pet",
        "phone",
        "plant",
        "shoe",
        "show",
        "sport",
        "team",
        "tutor",
        "watch",
    ]
    .as_slice();

    /// Fact value vocabulary.
    pub const VALUE_WORDS: &[&str] = [
        "amber", "badger", "bamboo", "basil", "beacon", "birch", "bronze", "cedar", "cello",
        "charcoal", "chess", "cobalt", "comet", "coral", "crimson", "cycling", "dahlia", "falcon",
        "fencing", "fjord", "garnet", "ginger", "granite", "harbor", "hazel", "indigo", "jasmine",
        "juniper", "karate", "kayak", "lagoon", "lantern", "maple", "marble", "meadow", "mosaic",
        "nectar", "obsidian", "onyx", "orchid", "pepper", "pottery", "quartz", "raven", "saffron",
        "sage", "tennis", "violet",
    ]
    .as_slice();

    /// Small-talk vocabulary for distractor statements.
    pub const SMALL_TALK: &[&str] = [
        "anyway", "busy", "chilly", "coffee", "cool", "evening", "fine", "fun", "good", "haha",
        "hmm", "lately", "maybe", "monday", "morning", "nice", "okay", "plans", "pretty", "rain",
        "really", "right", "soon", "sunny", "sure", "thanks", "tired", "traffic", "weather",
        "weekend", "well", "yeah",
    ]
    .as_slice();

    fn contains(set: &[&str], token: &str) -> bool {
        set.binary_search(&token).is_ok()
    }

    /// True for speaker names, attributes, and value words.
    pub fn is_fact_word(token: &str) -> bool {
        contains(SPEAKERS, token) || contains(ATTRIBUTES, token) || contains(VALUE_WORDS, token)
    }

    /// True for small-talk tokens.
    pub fn is_small_talk(token: &str) -> bool {
        contains(SMALL_TALK, token)
    }
}

/// Index of a [`FactSpec`] within its script's fact list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactId(pub usize);

/// How a fact relates to earlier facts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactKind {
    New,
    Refinement,
    Contradiction,
}

impl fmt::Display for FactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactKind::New => f.write_str("new"),
            FactKind::Refinement => f.write_str("refinement"),
            FactKind::Contradiction => f.write_str("contradiction"),
        }
    }
}

/// A planted fact: `value` tokens appear verbatim in the bearing statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactSpec {
    pub subject: String,
    pub attribute: String,
    pub value: Vec<String>,
    /// `(session, chunk)` of the bearing statement, both 1-based.
    pub introduced_at: (usize, usize),
    pub kind: FactKind,
    pub supersedes: Option<FactId>,
}

/// One dialogue turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub speaker: String,
    pub text: Vec<String>,
    /// `"D<session>:<turn>"`, unique across the script.
    pub dia_id: String,
    /// Present on fact-bearing statements, absent on distractors.
    pub fact: Option<FactId>,
}

/// A question whose answer is a fact chain's final value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAItem {
    pub question: Vec<String>,
    pub gold_answer: Vec<String>,
    pub evidence: BTreeSet<String>,
    /// 1-based index of the latest session containing evidence.
    pub attributed_session: usize,
}

/// An ordered multi-session dialogue with its planted facts and QA items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueScript {
    pub speakers: [String; 2],
    /// `sessions[t-1][k-1]` is chunk `k` of session `t`.
    pub sessions: Vec<Vec<Vec<Statement>>>,
    pub session_times: Vec<u64>,
    pub facts: Vec<FactSpec>,
    pub qa_items: Vec<QAItem>,
    pub seed: u64,
}

/// Environment parameters for script generation.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub sessions: usize,
    pub chunks_per_session: usize,
    pub facts_per_session: usize,
    /// Probability of filling each of the two distractor slots per chunk.
    pub distractor_rate: f64,
    /// Per-session probability of planting one evolution statement.
    pub evolution_rate: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sessions: 8,
            chunks_per_session: 4,
            facts_per_session: 2,
            distractor_rate: 0.5,
            evolution_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvError {
    InvalidConfig(String),
    HorizonOutOfRange { t_max: usize, sessions: usize },
    Invariant(String),
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvError::InvalidConfig(msg) => write!(f, "invalid environment config: {msg}"),
            EnvError::HorizonOutOfRange { t_max, sessions } => {
                write!(f, "horizon {t_max} out of range 1..={sessions}")
            }
            EnvError::Invariant(msg) => write!(f, "script invariant violated: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EnvError {}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.sessions == 0 {
            return Err(EnvError::InvalidConfig("sessions must be >= 1".into()));
        }
        if self.chunks_per_session == 0 {
            return Err(EnvError::InvalidConfig(
                "chunks_per_session must be >= 1".into(),
            ));
        }
        for (name, rate) in [
            ("distractor_rate", self.distractor_rate),
            ("evolution_rate", self.evolution_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
                return Err(EnvError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {rate}"
                )));
            }
        }
        // Each speaker owns a private attribute deck; new facts alternate
        // speakers, so per-speaker demand is ceil(total / 2).
        let total = self.sessions * self.facts_per_session;
        if total.div_ceil(2) > lexicon::ATTRIBUTES.len() {
            return Err(EnvError::InvalidConfig(format!(
                "sessions * facts_per_session = {total} exceeds attribute capacity {}",
                2 * lexicon::ATTRIBUTES.len()
            )));
        }
        Ok(())
    }
}

/// Renders a dialogue-turn id.
pub fn dia_id(session: usize, turn: usize) -> String {
    format!("D{session}:{turn}")
}

/// Parses `"D<session>:<turn>"`; `None` when malformed.
pub fn parse_dia_id(id: &str) -> Option<(usize, usize)> {
    let rest = id.strip_prefix('D')?;
    let (s, t) = rest.split_once(':')?;
    Some((s.parse().ok()?, t.parse().ok()?))
}

// Tracks one fact chain during generation.
struct Chain {
    members: Vec<FactId>,
    latest_session: usize,
}

const DISTRACTOR_SLOTS: usize = 2;
const FOREIGN_NAME_PROB: f64 = 0.3;
const HARD_DISTRACTOR_PROB: f64 = 0.4;

/// Generates a script. Identical `(cfg, seed)` pairs yield identical scripts.
pub fn generate_script(cfg: &EnvConfig, seed: u64) -> Result<DialogueScript, EnvError> {
    cfg.validate()?;
    let mut rng = substream(seed, domain::SCRIPT, 0);
    let (t_count, k_count) = (cfg.sessions, cfg.chunks_per_session);

    let first = rng.gen_range(0..lexicon::SPEAKERS.len());
    let second = {
        let r = rng.gen_range(0..lexicon::SPEAKERS.len() - 1);
        if r >= first {
            r + 1
        } else {
            r
        }
    };
    let speakers = [
        lexicon::SPEAKERS[first].to_string(),
        lexicon::SPEAKERS[second].to_string(),
    ];

    let mut session_times = Vec::with_capacity(t_count);
    let mut clock = 1_000u64;
    for _ in 0..t_count {
        clock += rng.gen_range(10..=99);
        session_times.push(clock);
    }

    // Per-speaker decks of unused attribute indices.
    let mut decks: [Vec<usize>; 2] = [
        (0..lexicon::ATTRIBUTES.len()).collect(),
        (0..lexicon::ATTRIBUTES.len()).collect(),
    ];

    let mut facts: Vec<FactSpec> = Vec::new();
    let mut chains: Vec<Chain> = Vec::new();
    let mut chain_of_fact: BTreeMap<usize, usize> = BTreeMap::new();
    let mut attribution_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut sessions = Vec::with_capacity(t_count);
    // dia_id of the statement bearing each fact, indexed by FactId.
    let mut bearing: Vec<String> = Vec::new();

    for t in 1..=t_count {
        let mut session_fact_ids: Vec<FactId> = Vec::new();

        for j in 0..cfg.facts_per_session {
            let who = (t + j) % 2;
            let deck = &mut decks[who];
            let attr_idx = deck.swap_remove(rng.gen_range(0..deck.len()));
            let attribute = lexicon::ATTRIBUTES[attr_idx].to_string();
            let subject = speakers[who].clone();
            let n_words = rng.gen_range(1..=2);
            let mut value = vec![subject.clone(), attribute.clone()];
            for _ in 0..n_words {
                value.push(lexicon::VALUE_WORDS[rng.gen_range(0..lexicon::VALUE_WORDS.len())].to_string());
            }
            let id = FactId(facts.len());
            facts.push(FactSpec {
                subject,
                attribute,
                value,
                introduced_at: (t, rng.gen_range(1..=k_count)),
                kind: FactKind::New,
                supersedes: None,
            });
            bearing.push(String::new());
            chain_of_fact.insert(id.0, chains.len());
            chains.push(Chain {
                members: vec![id],
                latest_session: t,
            });
            session_fact_ids.push(id);
            *attribution_count.entry(t).or_insert(0) += 1;
        }

        if t >= 2 && rng.gen::<f64>() < cfg.evolution_rate {
            // Only chains whose current session keeps >= 2 attributions stay
            // eligible, so every session retains at least one QA item.
            let eligible: Vec<usize> = chains
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    c.latest_session < t && attribution_count[&c.latest_session] >= 2
                })
                .map(|(i, _)| i)
                .collect();
            if !eligible.is_empty() {
                let chain_idx = eligible[rng.gen_range(0..eligible.len())];
                let kind = if rng.gen::<f64>() < 0.5 {
                    FactKind::Refinement
                } else {
                    FactKind::Contradiction
                };
                let old_id = *chains[chain_idx].members.last().expect("chain non-empty");
                let old = facts[old_id.0].clone();
                let fresh = |rng: &mut rand_chacha::ChaCha8Rng, avoid: &str| -> String {
                    let i = rng.gen_range(0..lexicon::VALUE_WORDS.len());
                    let w = lexicon::VALUE_WORDS[i];
                    if w == avoid {
                        lexicon::VALUE_WORDS[(i + 1) % lexicon::VALUE_WORDS.len()].to_string()
                    } else {
                        w.to_string()
                    }
                };
                let mut value = vec![old.subject.clone(), old.attribute.clone()];
                match kind {
                    FactKind::Refinement => {
                        // Keep the leading value word, change the trailing one.
                        value.push(old.value[2].clone());
                        let avoid = old.value.last().expect("value non-empty").clone();
                        value.push(fresh(&mut rng, &avoid));
                    }
                    FactKind::Contradiction => {
                        value.push(fresh(&mut rng, &old.value[2]));
                    }
                    FactKind::New => unreachable!(),
                }
                let id = FactId(facts.len());
                facts.push(FactSpec {
                    subject: old.subject,
                    attribute: old.attribute,
                    value,
                    introduced_at: (t, rng.gen_range(1..=k_count)),
                    kind,
                    supersedes: Some(old_id),
                });
                bearing.push(String::new());
                let prev_session = chains[chain_idx].latest_session;
                *attribution_count.get_mut(&prev_session).expect("tracked") -= 1;
                *attribution_count.entry(t).or_insert(0) += 1;
                chain_of_fact.insert(id.0, chain_idx);
                chains[chain_idx].members.push(id);
                chains[chain_idx].latest_session = t;
                session_fact_ids.push(id);
            }
        }

        // Assemble the session's chunks.
        let mut turn = 0usize;
        let mut session = Vec::with_capacity(k_count);
        for k in 1..=k_count {
            let mut chunk: Vec<Statement> = Vec::new();
            for &fid in session_fact_ids
                .iter()
                .filter(|fid| facts[fid.0].introduced_at.1 == k)
            {
                let fact = &facts[fid.0];
                let mut text = fact.value.clone();
                for _ in 0..rng.gen_range(0..=2usize) {
                    text.push(
                        lexicon::SMALL_TALK[rng.gen_range(0..lexicon::SMALL_TALK.len())]
                            .to_string(),
                    );
                }
                chunk.push(Statement {
                    speaker: fact.subject.clone(),
                    text,
                    dia_id: String::new(),
                    fact: Some(fid),
                });
            }
            for slot in 0..DISTRACTOR_SLOTS {
                // The last slot backfills unconditionally when the chunk
                // would otherwise be empty: every chunk holds a statement.
                let force = chunk.is_empty() && slot + 1 == DISTRACTOR_SLOTS;
                if force || rng.gen::<f64>() < cfg.distractor_rate {
                    let text = if rng.gen::<f64>() < HARD_DISTRACTOR_PROB {
                        // Fact-flavored small talk: value words without any
                        // planted fact behind them. These sit near the keep
                        // boundary and are long, so retaining them is a
                        // noticeable token cost with no QA payoff.
                        let fact_ish = rng.gen_range(2..=3usize);
                        let smalltalk = rng.gen_range(3..=5usize);
                        let mut text: Vec<String> = (0..fact_ish)
                            .map(|_| {
                                lexicon::VALUE_WORDS[rng.gen_range(0..lexicon::VALUE_WORDS.len())]
                                    .to_string()
                            })
                            .collect();
                        for _ in 0..smalltalk {
                            text.push(
                                lexicon::SMALL_TALK[rng.gen_range(0..lexicon::SMALL_TALK.len())]
                                    .to_string(),
                            );
                        }
                        text
                    } else {
                        let len = rng.gen_range(3..=6usize);
                        let mut text: Vec<String> = (0..len)
                            .map(|_| {
                                lexicon::SMALL_TALK[rng.gen_range(0..lexicon::SMALL_TALK.len())]
                                    .to_string()
                            })
                            .collect();
                        if rng.gen::<f64>() < FOREIGN_NAME_PROB {
                            // A name that is not one of the two script speakers.
                            let foreign: Vec<&str> = lexicon::SPEAKERS
                                .iter()
                                .copied()
                                .filter(|n| *n != speakers[0] && *n != speakers[1])
                                .collect();
                            text[0] = foreign[rng.gen_range(0..foreign.len())].to_string();
                        }
                        text
                    };
                    chunk.push(Statement {
                        speaker: speakers[rng.gen_range(0..2)].clone(),
                        text,
                        dia_id: String::new(),
                        fact: None,
                    });
                }
            }
            // Fisher-Yates shuffle for statement order within the chunk.
            for i in (1..chunk.len()).rev() {
                let j = rng.gen_range(0..=i);
                chunk.swap(i, j);
            }
            for stmt in &mut chunk {
                turn += 1;
                stmt.dia_id = dia_id(t, turn);
                if let Some(fid) = stmt.fact {
                    bearing[fid.0] = stmt.dia_id.clone();
                }
            }
            session.push(chunk);
        }
        sessions.push(session);
    }

    let mut qa_items: Vec<QAItem> = Vec::new();
    for chain in &chains {
        let last = *chain.members.last().expect("chain non-empty");
        let latest = &facts[last.0];
        let evidence: BTreeSet<String> =
            chain.members.iter().map(|fid| bearing[fid.0].clone()).collect();
        qa_items.push(QAItem {
            question: vec![
                "what".to_string(),
                latest.subject.clone(),
                latest.attribute.clone(),
            ],
            gold_answer: latest.value.clone(),
            evidence,
            attributed_session: chain.latest_session,
        });
    }

    let script = DialogueScript {
        speakers,
        sessions,
        session_times,
        facts,
        qa_items,
        seed,
    };
    script.validate()?;
    Ok(script)
}

/// Partitions `qa_items` by `attributed_session`.
pub fn attribute_questions(script: &DialogueScript) -> BTreeMap<usize, Vec<QAItem>> {
    let mut map: BTreeMap<usize, Vec<QAItem>> = BTreeMap::new();
    for qa in &script.qa_items {
        map.entry(qa.attributed_session).or_default().push(qa.clone());
    }
    map
}

/// Keeps the first `t_max` sessions and the QA items whose evidence lies
/// entirely within them.
pub fn truncate_horizon(script: &DialogueScript, t_max: usize) -> Result<DialogueScript, EnvError> {
    let t_count = script.sessions.len();
    if t_max == 0 || t_max > t_count {
        return Err(EnvError::HorizonOutOfRange {
            t_max,
            sessions: t_count,
        });
    }
    // Facts are appended in session order, so retained facts form a prefix
    // and statement references stay valid without remapping.
    let cut = script
        .facts
        .iter()
        .position(|f| f.introduced_at.0 > t_max)
        .unwrap_or(script.facts.len());
    let qa_items = script
        .qa_items
        .iter()
        .filter(|qa| {
            qa.evidence
                .iter()
                .all(|id| parse_dia_id(id).is_some_and(|(s, _)| s <= t_max))
        })
        .cloned()
        .collect();
    let truncated = DialogueScript {
        speakers: script.speakers.clone(),
        sessions: script.sessions[..t_max].to_vec(),
        session_times: script.session_times[..t_max].to_vec(),
        facts: script.facts[..cut].to_vec(),
        qa_items,
        seed: script.seed,
    };
    truncated.validate()?;
    Ok(truncated)
}

impl DialogueScript {
    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn chunk_count(&self) -> usize {
        self.sessions.first().map_or(0, |s| s.len())
    }

    /// Token count of session `t` (1-based), over all statements.
    pub fn session_tokens(&self, t: usize) -> usize {
        self.sessions[t - 1]
            .iter()
            .flat_map(|chunk| chunk.iter())
            .map(|stmt| stmt.text.len())
            .sum()
    }

    /// Token count of sessions `1..=t`.
    pub fn cumulative_tokens(&self, t: usize) -> usize {
        (1..=t).map(|s| self.session_tokens(s)).sum()
    }

    pub fn statements(&self) -> impl Iterator<Item = &Statement> {
        self.sessions
            .iter()
            .flat_map(|s| s.iter())
            .flat_map(|c| c.iter())
    }

    /// Checks every script invariant; errors name the first violation.
    pub fn validate(&self) -> Result<(), EnvError> {
        let t_count = self.sessions.len();
        if t_count == 0 {
            return Err(EnvError::Invariant("script has no sessions".into()));
        }
        let k_count = self.sessions[0].len();
        if k_count == 0 {
            return Err(EnvError::Invariant("session 1 has no chunks".into()));
        }
        if self.sessions.iter().any(|s| s.len() != k_count) {
            return Err(EnvError::Invariant(
                "chunk count differs across sessions".into(),
            ));
        }
        if self.session_times.len() != t_count {
            return Err(EnvError::Invariant("session_times length mismatch".into()));
        }
        if self.session_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EnvError::Invariant(
                "session_times not strictly increasing".into(),
            ));
        }

        let mut seen = BTreeSet::new();
        for (ti, session) in self.sessions.iter().enumerate() {
            for chunk in session {
                for stmt in chunk {
                    if !seen.insert(stmt.dia_id.clone()) {
                        return Err(EnvError::Invariant(format!(
                            "duplicate dia_id {}",
                            stmt.dia_id
                        )));
                    }
                    match parse_dia_id(&stmt.dia_id) {
                        Some((s, _)) if s == ti + 1 => {}
                        _ => {
                            return Err(EnvError::Invariant(format!(
                                "dia_id {} does not match session {}",
                                stmt.dia_id,
                                ti + 1
                            )))
                        }
                    }
                    if let Some(fid) = stmt.fact {
                        let fact = self.facts.get(fid.0).ok_or_else(|| {
                            EnvError::Invariant(format!("statement references fact {}", fid.0))
                        })?;
                        if !contains_subsequence(&stmt.text, &fact.value) {
                            return Err(EnvError::Invariant(format!(
                                "statement {} lacks verbatim value of fact {}",
                                stmt.dia_id, fid.0
                            )));
                        }
                    }
                }
            }
        }

        for (i, fact) in self.facts.iter().enumerate() {
            let (t, k) = fact.introduced_at;
            if t == 0 || t > t_count || k == 0 || k > k_count {
                return Err(EnvError::Invariant(format!(
                    "fact {i} introduced_at out of bounds"
                )));
            }
            match (fact.kind, fact.supersedes) {
                (FactKind::New, None) => {}
                (FactKind::New, Some(_)) => {
                    return Err(EnvError::Invariant(format!(
                        "new fact {i} must not supersede"
                    )))
                }
                (_, None) => {
                    return Err(EnvError::Invariant(format!(
                        "evolution fact {i} must supersede an earlier fact"
                    )))
                }
                (_, Some(prev)) => {
                    let prev_fact = self.facts.get(prev.0).ok_or_else(|| {
                        EnvError::Invariant(format!("fact {i} supersedes missing fact"))
                    })?;
                    if prev.0 >= i {
                        return Err(EnvError::Invariant(format!(
                            "fact {i} supersedes a later fact"
                        )));
                    }
                    if prev_fact.subject != fact.subject || prev_fact.attribute != fact.attribute {
                        return Err(EnvError::Invariant(format!(
                            "fact {i} supersedes a fact with different subject/attribute"
                        )));
                    }
                }
            }
        }

        for (qi, qa) in self.qa_items.iter().enumerate() {
            if qa.evidence.is_empty() {
                return Err(EnvError::Invariant(format!("qa {qi} has no evidence")));
            }
            let mut latest = 0usize;
            let mut concat: Vec<String> = Vec::new();
            for id in &qa.evidence {
                let (s, _) = parse_dia_id(id)
                    .ok_or_else(|| EnvError::Invariant(format!("qa {qi} malformed dia_id {id}")))?;
                if s == 0 || s > t_count {
                    return Err(EnvError::Invariant(format!(
                        "qa {qi} evidence {id} outside script"
                    )));
                }
                latest = latest.max(s);
                let stmt = self
                    .statements()
                    .find(|stmt| stmt.dia_id == *id)
                    .ok_or_else(|| {
                        EnvError::Invariant(format!("qa {qi} evidence {id} not found"))
                    })?;
                concat.extend(stmt.text.iter().cloned());
            }
            if latest != qa.attributed_session {
                return Err(EnvError::Invariant(format!(
                    "qa {qi} attributed to {} but latest evidence is in {latest}",
                    qa.attributed_session
                )));
            }
            if !contains_subsequence(&concat, &qa.gold_answer) {
                return Err(EnvError::Invariant(format!(
                    "qa {qi} gold answer not derivable from evidence"
                )));
            }
        }
        Ok(())
    }
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if haystack.len() < needle.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}
