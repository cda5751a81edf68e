//! Shared-parameter two-role policy with exact log-probabilities and
//! gradients.
//!
//! One parameter vector drives both roles through a linear-softmax head over
//! hand-crafted features. The fact extractor makes one keep/skip decision per
//! statement; the memory manager makes one categorical decision per proposed
//! fact over `{NOOP, INSERT, UPDATE@cand, DELETE@cand}` where candidates are
//! the top entries retrieved for the fact. A feature block is shared between
//! the roles, so an update through either role moves the other role's
//! log-probabilities as well.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::memory_bank::{retrieve_flat, MemoryBank, MemoryOperation};
use crate::reward::normalize_token_seq;
use crate::rng::{domain, substream};
use crate::synth_env::{lexicon, Statement};

/// Length of the feature vectors; fixed for a run.
pub const FEATURE_DIM: usize = 15;

// Feature layout. Index 0 is shared between the two roles; the rest are
// role-specific interaction terms.
const F_SHARED_SALIENCE: usize = 0;
const F_EXT_FACT_FRAC: usize = 1;
const F_EXT_SMALLTALK_FRAC: usize = 2;
const F_EXT_KEEP_BIAS: usize = 3;
const F_MGR_SALIENCE: usize = 4;
const F_MGR_INSERT_BIAS: usize = 5;
const F_MGR_NOVELTY: usize = 6;
const F_MGR_BANK_FILL: usize = 7;
const F_MGR_UPDATE_BIAS: usize = 8;
const F_MGR_UPDATE_SIM: usize = 9;
const F_MGR_UPDATE_CONFLICT: usize = 10;
const F_MGR_UPDATE_EXACT: usize = 11;
const F_MGR_DELETE_BIAS: usize = 12;
const F_MGR_DELETE_SIM: usize = 13;
const F_MGR_DELETE_SMALLTALK: usize = 14;

const BANK_FILL_SCALE: f64 = 200.0;

/// Shared backbone weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            theta: vec![0.0; FEATURE_DIM],
        }
    }

    /// Uniform random weights in `[-scale, scale]`.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut rng = substream(seed, domain::PARAMS_INIT, 0);
        Self {
            theta: (0..FEATURE_DIM)
                .map(|_| rng.gen::<f64>() * 2.0 * scale - scale)
                .collect(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Extractor,
    Manager,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Extractor => f.write_str("extractor"),
            Role::Manager => f.write_str("manager"),
        }
    }
}

/// Feature vectors for every available choice of one decision token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionContext {
    pub choices: Vec<Vec<f64>>,
}

/// Where in the script a generation step happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkContext {
    /// 1-based session index.
    pub session: usize,
    /// 1-based chunk index.
    pub chunk: usize,
    pub session_time: u64,
}

/// One extractor or manager call: the unit of loss weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStep {
    pub role: Role,
    pub session: usize,
    pub chunk: usize,
    pub contexts: Vec<DecisionContext>,
    pub decisions: Vec<usize>,
    /// Per-token log-probs under the rollout parameters.
    pub logprob_old: Vec<f64>,
    pub assigned_advantage: Option<f64>,
    /// Set when the step's operations hit an invalid target; such steps are
    /// excluded from the training objective.
    pub flagged_invalid: bool,
}

impl GenerationStep {
    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }
}

/// A salient-content proposal emitted by the extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactProposal {
    pub speaker: String,
    pub content: Vec<String>,
    pub dia_id: String,
}

/// Manager-side knobs: how many retrieved candidates to expose per fact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManagerConfig {
    pub candidates: usize,
    pub threshold: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            candidates: 3,
            threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyError {
    AdvantageUnset,
    NonFinite,
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::AdvantageUnset => f.write_str("generation step has no assigned advantage"),
            PolicyError::NonFinite => f.write_str("non-finite log-probability"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PolicyError {}

/// How a decision token is chosen from its distribution.
pub trait DecisionPicker {
    fn pick(&mut self, log_probs: &[f64]) -> usize;
}

/// Samples from the categorical distribution using the wrapped stream.
pub struct Sampler<'a>(pub &'a mut ChaCha8Rng);

impl DecisionPicker for Sampler<'_> {
    fn pick(&mut self, log_probs: &[f64]) -> usize {
        let r = self.0.gen::<f64>();
        let mut cum = 0.0;
        for (i, lp) in log_probs.iter().enumerate() {
            cum += math::exp(*lp);
            if r < cum {
                return i;
            }
        }
        log_probs.len() - 1
    }
}

/// Argmax decoding; ties resolve to the lowest index.
pub struct Greedy;

impl DecisionPicker for Greedy {
    fn pick(&mut self, log_probs: &[f64]) -> usize {
        let mut best = 0;
        for (i, lp) in log_probs.iter().enumerate().skip(1) {
            if *lp > log_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Replays a recorded decision sequence.
pub struct Replay<'a> {
    decisions: &'a [usize],
    pos: usize,
}

impl<'a> Replay<'a> {
    pub fn new(decisions: &'a [usize]) -> Self {
        Self { decisions, pos: 0 }
    }
}

impl DecisionPicker for Replay<'_> {
    fn pick(&mut self, _log_probs: &[f64]) -> usize {
        let d = self.decisions[self.pos];
        self.pos += 1;
        d
    }
}

fn fraction(tokens: &[String], pred: impl Fn(&str) -> bool) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    tokens.iter().filter(|t| pred(t)).count() as f64 / tokens.len() as f64
}

fn salience(tokens: &[String]) -> f64 {
    fraction(tokens, lexicon::is_fact_word) - fraction(tokens, lexicon::is_small_talk)
}

fn bag(tokens: &[String]) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for t in normalize_token_seq(tokens) {
        *map.entry(t).or_insert(0) += 1;
    }
    map
}

fn overlap_count(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> usize {
    a.iter()
        .filter_map(|(tok, ca)| b.get(tok).map(|cb| (*ca).min(*cb)))
        .sum()
}

/// Log-softmax of `theta . phi(choice)` over the context's choices.
pub fn decision_log_probs(params: &PolicyParams, ctx: &DecisionContext) -> Vec<f64> {
    let logits: Vec<f64> = ctx
        .choices
        .iter()
        .map(|phi| phi.iter().zip(&params.theta).map(|(x, w)| x * w).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = math::ln(logits.iter().map(|l| math::exp(l - max)).sum::<f64>()) + max;
    logits.iter().map(|l| l - log_sum).collect()
}

/// Per-token log-probs of the step's recorded decisions under `params`.
pub fn step_log_probs(params: &PolicyParams, step: &GenerationStep) -> Vec<f64> {
    step.contexts
        .iter()
        .zip(&step.decisions)
        .map(|(ctx, d)| decision_log_probs(params, ctx)[*d])
        .collect()
}

/// Length-normalized step importance ratio
/// `exp(mean_l(log pi_new - log pi_old))`.
pub fn step_ratio(step: &GenerationStep, params_new: &PolicyParams) -> Result<f64, PolicyError> {
    let new = step_log_probs(params_new, step);
    let mut sum = 0.0;
    for (lp_new, lp_old) in new.iter().zip(&step.logprob_old) {
        if !lp_new.is_finite() || !lp_old.is_finite() {
            return Err(PolicyError::NonFinite);
        }
        sum += lp_new - lp_old;
    }
    let rho = math::exp(sum / step.len() as f64);
    if !rho.is_finite() || rho <= 0.0 {
        return Err(PolicyError::NonFinite);
    }
    Ok(rho)
}

/// Step-level advantage: every token carries the step's assigned advantage,
/// so the length-normalized mean equals that value.
pub fn step_advantage(step: &GenerationStep) -> Result<f64, PolicyError> {
    step.assigned_advantage.ok_or(PolicyError::AdvantageUnset)
}

/// Exact score-function gradient of `sum_l log pi(y_l | h_l)` w.r.t. theta.
pub fn grad_logprob(params: &PolicyParams, step: &GenerationStep) -> Vec<f64> {
    let mut grad = vec![0.0; params.feature_dim()];
    for (ctx, d) in step.contexts.iter().zip(&step.decisions) {
        accumulate_logprob_grad(params, ctx, *d, 1.0, &mut grad);
    }
    grad
}

/// Adds `scale * grad log pi(choice | ctx)` into `acc`.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    ctx: &DecisionContext,
    choice: usize,
    scale: f64,
    acc: &mut [f64],
) {
    let log_probs = decision_log_probs(params, ctx);
    for (phi, lp) in ctx.choices.iter().zip(&log_probs) {
        let p = math::exp(*lp);
        for (a, x) in acc.iter_mut().zip(phi) {
            *a -= scale * p * x;
        }
    }
    for (a, x) in acc.iter_mut().zip(&ctx.choices[choice]) {
        *a += scale * x;
    }
}

/// Entropy of the decision distribution; adds `scale * grad H` into `acc`.
pub fn decision_entropy_grad(
    params: &PolicyParams,
    ctx: &DecisionContext,
    scale: f64,
    acc: &mut [f64],
) -> f64 {
    let log_probs = decision_log_probs(params, ctx);
    let probs: Vec<f64> = log_probs.iter().map(|lp| math::exp(*lp)).collect();
    let entropy: f64 = probs
        .iter()
        .zip(&log_probs)
        .map(|(p, lp)| -p * lp)
        .sum();
    // mean feature under the distribution
    let dim = params.feature_dim();
    let mut mean_phi = vec![0.0; dim];
    for (phi, p) in ctx.choices.iter().zip(&probs) {
        for (m, x) in mean_phi.iter_mut().zip(phi) {
            *m += p * x;
        }
    }
    // grad H = -sum_c p_c log p_c (phi_c - mean_phi)
    for ((phi, p), lp) in ctx.choices.iter().zip(&probs).zip(&log_probs) {
        let w = -p * lp;
        for ((a, x), m) in acc.iter_mut().zip(phi).zip(&mean_phi) {
            *a += scale * w * (x - m);
        }
    }
    entropy
}

/// KL(pi_params || pi_ref) for one decision; adds `scale * grad KL` into
/// `acc` (gradient w.r.t. `params` only).
pub fn decision_kl_grad(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    ctx: &DecisionContext,
    scale: f64,
    acc: &mut [f64],
) -> f64 {
    let log_p = decision_log_probs(params, ctx);
    let log_q = decision_log_probs(ref_params, ctx);
    let probs: Vec<f64> = log_p.iter().map(|lp| math::exp(*lp)).collect();
    let kl: f64 = probs
        .iter()
        .zip(log_p.iter().zip(&log_q))
        .map(|(p, (lp, lq))| p * (lp - lq))
        .sum();
    let dim = params.feature_dim();
    let mut mean_phi = vec![0.0; dim];
    for (phi, p) in ctx.choices.iter().zip(&probs) {
        for (m, x) in mean_phi.iter_mut().zip(phi) {
            *m += p * x;
        }
    }
    // grad KL = sum_c p_c (log p_c - log q_c) (phi_c - mean_phi)
    for ((phi, p), (lp, lq)) in ctx.choices.iter().zip(&probs).zip(log_p.iter().zip(&log_q)) {
        let w = p * (lp - lq);
        for ((a, x), m) in acc.iter_mut().zip(phi).zip(&mean_phi) {
            *a += scale * w * (x - m);
        }
    }
    kl
}

fn extractor_context(stmt: &Statement) -> DecisionContext {
    let mut keep = vec![0.0; FEATURE_DIM];
    keep[F_SHARED_SALIENCE] = salience(&stmt.text);
    keep[F_EXT_FACT_FRAC] = fraction(&stmt.text, lexicon::is_fact_word);
    keep[F_EXT_SMALLTALK_FRAC] = fraction(&stmt.text, lexicon::is_small_talk);
    keep[F_EXT_KEEP_BIAS] = 1.0;
    DecisionContext {
        choices: vec![vec![0.0; FEATURE_DIM], keep],
    }
}

/// Runs the extractor over a chunk: one keep/skip decision per statement.
///
/// A kept statement yields a proposal carrying the statement's speaker, its
/// full token sequence, and its dia_id. Keeping verbose or irrelevant
/// statements therefore costs bank tokens, which is what the compression
/// penalty prices. An empty chunk degenerates to a single sentinel decision
/// so the step still has one token.
pub fn extract<P: DecisionPicker>(
    params: &PolicyParams,
    chunk: &[Statement],
    ctx: ChunkContext,
    picker: &mut P,
) -> (Vec<FactProposal>, GenerationStep) {
    let mut contexts = Vec::with_capacity(chunk.len());
    let mut decisions = Vec::with_capacity(chunk.len());
    let mut logprob_old = Vec::with_capacity(chunk.len());
    let mut proposals = Vec::new();
    if chunk.is_empty() {
        let dctx = DecisionContext {
            choices: vec![vec![0.0; FEATURE_DIM]],
        };
        let log_probs = decision_log_probs(params, &dctx);
        let d = picker.pick(&log_probs);
        logprob_old.push(log_probs[d]);
        decisions.push(d);
        contexts.push(dctx);
    }
    for stmt in chunk {
        let dctx = extractor_context(stmt);
        let log_probs = decision_log_probs(params, &dctx);
        let d = picker.pick(&log_probs);
        logprob_old.push(log_probs[d]);
        decisions.push(d);
        contexts.push(dctx);
        if d == 1 {
            proposals.push(FactProposal {
                speaker: stmt.speaker.clone(),
                content: stmt.text.clone(),
                dia_id: stmt.dia_id.clone(),
            });
        }
    }
    let step = GenerationStep {
        role: Role::Extractor,
        session: ctx.session,
        chunk: ctx.chunk,
        contexts,
        decisions,
        logprob_old,
        assigned_advantage: None,
        flagged_invalid: false,
    };
    (proposals, step)
}

struct ManagerChoice {
    features: Vec<f64>,
    op: Option<MemoryOperation>,
}

fn manager_choices(
    proposal: &FactProposal,
    bank: &MemoryBank,
    ctx: ChunkContext,
    cfg: &ManagerConfig,
) -> Vec<ManagerChoice> {
    let candidates = retrieve_flat(bank, &proposal.content, cfg.candidates, cfg.threshold);
    let sal = salience(&proposal.content);
    let fact_bag = bag(&proposal.content);
    let max_sim = candidates.first().map_or(0.0, |c| c.similarity);

    let mut choices = Vec::with_capacity(2 + 2 * candidates.len());
    choices.push(ManagerChoice {
        features: vec![0.0; FEATURE_DIM],
        op: Some(MemoryOperation::Noop),
    });

    let mut insert = vec![0.0; FEATURE_DIM];
    insert[F_SHARED_SALIENCE] = sal;
    insert[F_MGR_SALIENCE] = sal;
    insert[F_MGR_INSERT_BIAS] = 1.0;
    insert[F_MGR_NOVELTY] = 1.0 - max_sim;
    insert[F_MGR_BANK_FILL] = (bank.token_count() as f64 / BANK_FILL_SCALE).min(2.0);
    choices.push(ManagerChoice {
        features: insert,
        op: Some(MemoryOperation::Insert {
            speaker: proposal.speaker.clone(),
            content: proposal.content.clone(),
            dia_id: proposal.dia_id.clone(),
            session_time: ctx.session_time,
        }),
    });

    for cand in &candidates {
        let cand_bag = bag(&cand.entry.content);
        let exact = fact_bag == cand_bag && !fact_bag.is_empty();
        let conflict = !exact && overlap_count(&fact_bag, &cand_bag) >= 2;
        let mut update = vec![0.0; FEATURE_DIM];
        update[F_SHARED_SALIENCE] = sal;
        update[F_MGR_SALIENCE] = sal;
        update[F_MGR_UPDATE_BIAS] = 1.0;
        update[F_MGR_UPDATE_SIM] = cand.similarity;
        update[F_MGR_UPDATE_CONFLICT] = if conflict { 1.0 } else { 0.0 };
        update[F_MGR_UPDATE_EXACT] = if exact { 1.0 } else { 0.0 };
        choices.push(ManagerChoice {
            features: update,
            op: Some(MemoryOperation::Update {
                target_id: cand.entry.memory_id,
                content: proposal.content.clone(),
                dia_id: proposal.dia_id.clone(),
            }),
        });
    }
    for cand in &candidates {
        let mut delete = vec![0.0; FEATURE_DIM];
        delete[F_MGR_DELETE_BIAS] = 1.0;
        delete[F_MGR_DELETE_SIM] = cand.similarity;
        delete[F_MGR_DELETE_SMALLTALK] = fraction(&cand.entry.content, lexicon::is_small_talk);
        choices.push(ManagerChoice {
            features: delete,
            op: Some(MemoryOperation::Delete {
                target_id: cand.entry.memory_id,
            }),
        });
    }
    choices
}

/// Runs the manager over the extractor's proposals: one categorical decision
/// per fact. An empty proposal list yields a single sentinel decision with a
/// lone NOOP choice so the step still has one token.
pub fn manage<P: DecisionPicker>(
    params: &PolicyParams,
    proposals: &[FactProposal],
    bank: &MemoryBank,
    ctx: ChunkContext,
    cfg: &ManagerConfig,
    picker: &mut P,
) -> (Vec<MemoryOperation>, GenerationStep) {
    let mut contexts = Vec::new();
    let mut decisions = Vec::new();
    let mut logprob_old = Vec::new();
    let mut ops = Vec::new();

    if proposals.is_empty() {
        let dctx = DecisionContext {
            choices: vec![vec![0.0; FEATURE_DIM]],
        };
        let log_probs = decision_log_probs(params, &dctx);
        let d = picker.pick(&log_probs);
        logprob_old.push(log_probs[d]);
        decisions.push(d);
        contexts.push(dctx);
    } else {
        for proposal in proposals {
            let choices = manager_choices(proposal, bank, ctx, cfg);
            let dctx = DecisionContext {
                choices: choices.iter().map(|c| c.features.clone()).collect(),
            };
            let log_probs = decision_log_probs(params, &dctx);
            let d = picker.pick(&log_probs);
            logprob_old.push(log_probs[d]);
            decisions.push(d);
            contexts.push(dctx);
            if let Some(op) = choices[d].op.clone() {
                if op != MemoryOperation::Noop {
                    ops.push(op);
                }
            }
        }
    }
    let step = GenerationStep {
        role: Role::Manager,
        session: ctx.session,
        chunk: ctx.chunk,
        contexts,
        decisions,
        logprob_old,
        assigned_advantage: None,
        flagged_invalid: false,
    };
    (ops, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use crate::memory_bank::apply;
    use crate::rng::substream;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    fn stmt(speaker: &str, text: &str, dia: &str) -> Statement {
        Statement {
            speaker: speaker.to_string(),
            text: toks(text),
            dia_id: dia.to_string(),
            fact: None,
        }
    }

    fn chunk_ctx() -> ChunkContext {
        ChunkContext {
            session: 1,
            chunk: 1,
            session_time: 1000,
        }
    }

    #[test]
    fn decision_probs_sum_to_one() {
        let params = PolicyParams::random(3, 0.5);
        let ctx = extractor_context(&stmt("alice", "alice hobby tennis well", "D1:1"));
        let sum: f64 = decision_log_probs(&params, &ctx)
            .iter()
            .map(|lp| math::exp(*lp))
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_invariant_to_logit_shift() {
        // Adding a constant to every logit is realized by adding a constant
        // feature dimension times a weight; softmax probabilities and argmax
        // must not move.
        let ctx = DecisionContext {
            choices: vec![toks_f(&[1.0, 0.0]), toks_f(&[0.3, 0.0])],
        };
        let shifted = DecisionContext {
            choices: vec![toks_f(&[1.0, 5.0]), toks_f(&[0.3, 5.0])],
        };
        let params = PolicyParams {
            theta: vec![1.0, 1.0],
        };
        let mut greedy = Greedy;
        let a = greedy.pick(&decision_log_probs(&params, &ctx));
        let b = greedy.pick(&decision_log_probs(&params, &shifted));
        assert_eq!(a, b);
        let pa = decision_log_probs(&params, &ctx);
        let pb = decision_log_probs(&params, &shifted);
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn toks_f(xs: &[f64]) -> Vec<f64> {
        xs.to_vec()
    }

    #[test]
    fn greedy_extract_keeps_exactly_fact_statements() {
        let mut params = PolicyParams::zeros();
        params.theta[F_SHARED_SALIENCE] = 2.0;
        let chunk = vec![
            stmt("alice", "alice hobby tennis", "D1:1"),
            stmt("bob", "well nice weather lately", "D1:2"),
            stmt("bob", "bob city harbor okay", "D1:3"),
            stmt("alice", "haha sure anyway", "D1:4"),
        ];
        let (proposals, step) = extract(&params, &chunk, chunk_ctx(), &mut Greedy);
        assert_eq!(step.decisions, vec![1, 0, 1, 0]);
        assert_eq!(proposals.len(), 2);
        assert_eq!(proposals[0].content, toks("alice hobby tennis"));
        assert_eq!(proposals[1].content, toks("bob city harbor okay"));
    }

    #[test]
    fn all_skip_still_emits_full_step() {
        let mut params = PolicyParams::zeros();
        params.theta[F_EXT_KEEP_BIAS] = -50.0;
        let chunk = vec![
            stmt("alice", "alice hobby tennis", "D1:1"),
            stmt("bob", "well nice", "D1:2"),
        ];
        let mut rng = substream(1, 9, 9);
        let (proposals, step) = extract(&params, &chunk, chunk_ctx(), &mut Sampler(&mut rng));
        assert!(proposals.is_empty());
        assert_eq!(step.len(), 2);
        assert!(step.logprob_old.iter().all(|lp| *lp <= 0.0));
    }

    #[test]
    fn extract_is_deterministic_given_rng() {
        let params = PolicyParams::random(5, 0.3);
        let chunk = vec![
            stmt("alice", "alice hobby tennis well", "D1:1"),
            stmt("bob", "nice weather", "D1:2"),
        ];
        let mut r1 = substream(11, 0, 0);
        let mut r2 = substream(11, 0, 0);
        let (p1, s1) = extract(&params, &chunk, chunk_ctx(), &mut Sampler(&mut r1));
        let (p2, s2) = extract(&params, &chunk, chunk_ctx(), &mut Sampler(&mut r2));
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn manage_on_empty_bank_has_only_noop_and_insert() {
        let params = PolicyParams::zeros();
        let proposal = FactProposal {
            speaker: "alice".into(),
            content: toks("alice hobby tennis"),
            dia_id: "D1:1".into(),
        };
        let bank = MemoryBank::new();
        let (_, step) = manage(
            &params,
            &[proposal],
            &bank,
            chunk_ctx(),
            &ManagerConfig::default(),
            &mut Greedy,
        );
        assert_eq!(step.contexts[0].choices.len(), 2);
    }

    #[test]
    fn manage_without_proposals_emits_sentinel() {
        let params = PolicyParams::zeros();
        let bank = MemoryBank::new();
        let (ops, step) = manage(
            &params,
            &[],
            &bank,
            chunk_ctx(),
            &ManagerConfig::default(),
            &mut Greedy,
        );
        assert!(ops.is_empty());
        assert_eq!(step.len(), 1);
        assert_eq!(step.contexts[0].choices.len(), 1);
        assert_eq!(step.logprob_old[0], 0.0);
        assert!(grad_logprob(&params, &step).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn duplicate_fact_noops_under_separating_params() {
        let mut params = PolicyParams::zeros();
        params.theta[F_MGR_INSERT_BIAS] = -1.0;
        params.theta[F_MGR_NOVELTY] = 2.0;
        params.theta[F_MGR_UPDATE_EXACT] = -3.0;
        params.theta[F_MGR_UPDATE_BIAS] = 0.5;
        params.theta[F_MGR_UPDATE_SIM] = 0.5;
        params.theta[F_MGR_DELETE_BIAS] = -1.0;
        let bank = apply(
            &MemoryBank::new(),
            &[MemoryOperation::Insert {
                speaker: "alice".into(),
                content: toks("alice hobby tennis"),
                dia_id: "D1:1".into(),
                session_time: 0,
            }],
        )
        .bank;
        let proposal = FactProposal {
            speaker: "alice".into(),
            content: toks("alice hobby tennis"),
            dia_id: "D2:4".into(),
        };
        let (ops, step) = manage(
            &params,
            &[proposal],
            &bank,
            chunk_ctx(),
            &ManagerConfig::default(),
            &mut Greedy,
        );
        assert!(ops.is_empty(), "expected NOOP, got {ops:?}");
        assert_eq!(step.decisions, vec![0]);
    }

    #[test]
    fn manage_is_deterministic_given_rng() {
        let params = PolicyParams::random(5, 0.3);
        let bank = apply(
            &MemoryBank::new(),
            &[MemoryOperation::Insert {
                speaker: "alice".into(),
                content: toks("alice hobby tennis"),
                dia_id: "D1:1".into(),
                session_time: 0,
            }],
        )
        .bank;
        let proposal = FactProposal {
            speaker: "alice".into(),
            content: toks("alice hobby chess"),
            dia_id: "D2:1".into(),
        };
        let mut r1 = substream(4, 1, 1);
        let mut r2 = substream(4, 1, 1);
        let cfg = ManagerConfig::default();
        let a = manage(&params, core::slice::from_ref(&proposal), &bank, chunk_ctx(), &cfg, &mut Sampler(&mut r1));
        let b = manage(&params, core::slice::from_ref(&proposal), &bank, chunk_ctx(), &cfg, &mut Sampler(&mut r2));
        assert_eq!(a, b);
    }

    fn synthetic_step(lp_shift: f64, len: usize) -> (PolicyParams, GenerationStep) {
        // Two-choice contexts with a distinctive feature; decisions all 1.
        let params = PolicyParams {
            theta: {
                let mut t = vec![0.0; FEATURE_DIM];
                t[F_EXT_KEEP_BIAS] = 0.4;
                t
            },
        };
        let mut keep = vec![0.0; FEATURE_DIM];
        keep[F_EXT_KEEP_BIAS] = 1.0;
        let ctx = DecisionContext {
            choices: vec![vec![0.0; FEATURE_DIM], keep],
        };
        let lp_new = decision_log_probs(&params, &ctx)[1];
        let step = GenerationStep {
            role: Role::Extractor,
            session: 1,
            chunk: 1,
            contexts: vec![ctx; len],
            decisions: vec![1; len],
            logprob_old: vec![lp_new - lp_shift; len],
            assigned_advantage: Some(0.7),
            flagged_invalid: false,
        };
        (params, step)
    }

    #[test]
    fn ratio_of_identical_policies_is_one() {
        let params = PolicyParams::random(2, 0.2);
        let chunk = vec![stmt("alice", "alice hobby tennis", "D1:1")];
        let mut rng = substream(0, 0, 0);
        let (_, step) = extract(&params, &chunk, chunk_ctx(), &mut Sampler(&mut rng));
        assert!((step_ratio(&step, &params).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_matches_hand_arithmetic() {
        // Per-token log-ratios [0.1, -0.1, 0.3]: mean 0.1 -> rho = e^0.1.
        let (params, mut step) = synthetic_step(0.0, 3);
        let lp = step_log_probs(&params, &step);
        step.logprob_old = vec![lp[0] - 0.1, lp[1] + 0.1, lp[2] - 0.3];
        let rho = step_ratio(&step, &params).unwrap();
        assert!((rho - math::exp(0.1)).abs() < 1e-12);
    }

    #[test]
    fn ratio_is_length_invariant() {
        let (params, short) = synthetic_step(0.1, 5);
        let (_, long) = synthetic_step(0.1, 50);
        let a = step_ratio(&short, &params).unwrap();
        let b = step_ratio(&long, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(step_advantage(&short).unwrap(), step_advantage(&long).unwrap());
    }

    #[test]
    fn advantage_requires_assignment() {
        let (_, mut step) = synthetic_step(0.0, 2);
        assert_eq!(step_advantage(&step).unwrap(), 0.7);
        step.assigned_advantage = None;
        assert_eq!(step_advantage(&step), Err(PolicyError::AdvantageUnset));
    }

    #[test]
    fn zero_params_gradient_has_closed_form() {
        let params = PolicyParams::zeros();
        let chunk = vec![
            stmt("alice", "alice hobby tennis", "D1:1"),
            stmt("bob", "well nice", "D1:2"),
        ];
        let mut rng = substream(21, 0, 0);
        let (_, step) = extract(&params, &chunk, chunk_ctx(), &mut Sampler(&mut rng));
        let grad = grad_logprob(&params, &step);
        let mut expect = vec![0.0; FEATURE_DIM];
        for (ctx, d) in step.contexts.iter().zip(&step.decisions) {
            let n = ctx.choices.len() as f64;
            for (i, e) in expect.iter_mut().enumerate() {
                let mean: f64 = ctx.choices.iter().map(|c| c[i]).sum::<f64>() / n;
                *e += ctx.choices[*d][i] - mean;
            }
        }
        for (g, e) in grad.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_logprob_matches_finite_differences() {
        let params = PolicyParams::random(13, 0.4);
        let script = crate::synth_env::generate_script(&crate::synth_env::EnvConfig::default(), 13)
            .unwrap();
        let chunk = &script.sessions[0][0];
        let mut rng = substream(13, 2, 0);
        let (_, step) = extract(&params, chunk, chunk_ctx(), &mut Sampler(&mut rng));
        let grad = grad_logprob(&params, &step);
        let h = 1e-6;
        for i in 0..FEATURE_DIM {
            let mut plus = params.clone();
            plus.theta[i] += h;
            let mut minus = params.clone();
            minus.theta[i] -= h;
            let f = |p: &PolicyParams| step_log_probs(p, &step).iter().sum::<f64>();
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "dim {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn shared_dimension_couples_the_roles() {
        let mut params = PolicyParams::random(8, 0.2);
        let chunk = vec![stmt("alice", "alice hobby tennis", "D1:1")];
        let mut rng = substream(8, 3, 0);
        let (proposals, ext_step) = extract(&params, &chunk, chunk_ctx(), &mut Sampler(&mut rng));
        let bank = MemoryBank::new();
        let proposals = if proposals.is_empty() {
            vec![FactProposal {
                speaker: "alice".into(),
                content: toks("alice hobby tennis"),
                dia_id: "D1:1".into(),
            }]
        } else {
            proposals
        };
        let (_, mgr_step) = manage(
            &params,
            &proposals,
            &bank,
            chunk_ctx(),
            &ManagerConfig::default(),
            &mut Greedy,
        );
        let mgr_before = step_log_probs(&params, &mgr_step);
        // One extractor-side gradient step on the shared parameters.
        let grad = grad_logprob(&params, &ext_step);
        for (t, g) in params.theta.iter_mut().zip(&grad) {
            *t += 0.5 * g;
        }
        let mgr_after = step_log_probs(&params, &mgr_step);
        assert_ne!(mgr_before, mgr_after, "manager log-probs should move");
    }

    #[test]
    fn entropy_and_kl_grads_match_finite_differences() {
        let params = PolicyParams::random(17, 0.3);
        let ref_params = PolicyParams::random(18, 0.3);
        let ctx = extractor_context(&stmt("alice", "alice hobby tennis well", "D1:1"));
        let h = 1e-6;

        let mut grad = vec![0.0; FEATURE_DIM];
        decision_entropy_grad(&params, &ctx, 1.0, &mut grad);
        for i in 0..FEATURE_DIM {
            let mut plus = params.clone();
            plus.theta[i] += h;
            let mut minus = params.clone();
            minus.theta[i] -= h;
            let f = |p: &PolicyParams| {
                let mut sink = vec![0.0; FEATURE_DIM];
                decision_entropy_grad(p, &ctx, 0.0, &mut sink)
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5, "entropy dim {i}");
        }

        let mut grad = vec![0.0; FEATURE_DIM];
        decision_kl_grad(&params, &ref_params, &ctx, 1.0, &mut grad);
        for i in 0..FEATURE_DIM {
            let mut plus = params.clone();
            plus.theta[i] += h;
            let mut minus = params.clone();
            minus.theta[i] -= h;
            let f = |p: &PolicyParams| {
                let mut sink = vec![0.0; FEATURE_DIM];
                decision_kl_grad(p, &ref_params, &ctx, 0.0, &mut sink)
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5, "kl dim {i}");
        }
        let mut sink = vec![0.0; FEATURE_DIM];
        assert_eq!(decision_kl_grad(&params, &params, &ctx, 1.0, &mut sink), 0.0);
    }
}
