//! Curriculum-staged training orchestration.
//!
//! Each epoch: truncate the script to the stage horizon, run the global
//! rollouts (fanned out over workers), attribute and normalize rewards,
//! sample sessions for local rerollouts from shared anchor snapshots, pool
//! all valid steps into the objective, and take one plain gradient-descent
//! step. Every random draw derives from `(seed, stage, epoch)` substreams, so
//! the metrics log is bitwise-identical across runs and worker counts.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use memsim_core::logo_grpo::{
    assign_global_advantages, assign_local_advantages, choose_anchor, global_advantages,
    global_rewards, local_rewards_and_advantages, objective_and_gradient, run_global_rollout,
    run_local_rerollout, run_session, sample_local_sessions, GlobalRollout, GrpoError,
    LocalRerollout,
};
use memsim_core::policy::GenerationStep;
use memsim_core::math::l2_norm;
use memsim_core::memory_bank::{evidence_coverage, snapshot, MemoryBank, Snapshot};
use memsim_core::policy::{Greedy, PolicyParams};
use memsim_core::reward::{comp_penalty, qa_score};
use memsim_core::rng::{domain, mix, substream};
use memsim_core::synth_env::{generate_script, truncate_horizon, DialogueScript, EnvError};

use crate::config::{CurriculumStage, ResolvedConfig};
use crate::metrics::MetricsRow;

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    Env(EnvError),
    Grpo(GrpoError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "configuration error: {msg}"),
            TrainError::Env(e) => write!(f, "environment error: {e}"),
            TrainError::Grpo(e) => write!(f, "optimization error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<EnvError> for TrainError {
    fn from(e: EnvError) -> Self {
        TrainError::Env(e)
    }
}

impl From<GrpoError> for TrainError {
    fn from(e: GrpoError) -> Self {
        TrainError::Grpo(e)
    }
}

/// Greedy-construction evaluation of a parameter vector on a script.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub qa_f1: f64,
    pub m_fail: f64,
    pub bank_tokens: usize,
    pub comp: f64,
    /// `qa_f1 - lambda_comp * comp`.
    pub total: f64,
}

/// Single argmax construction pass over the full script, then QA scoring and
/// coverage diagnostics on the resulting bank.
pub fn evaluate(params: &PolicyParams, script: &DialogueScript, cfg: &ResolvedConfig) -> EvalReport {
    let rollout_cfg = cfg.rollout_config();
    let retrieval = cfg.retrieval_config();
    let mut bank = MemoryBank::new();
    for t in 1..=script.session_count() {
        let run = run_session(params, script, t, bank, &rollout_cfg, &mut Greedy);
        bank = run.bank;
    }
    let qa_f1 = qa_score(&bank, &script.qa_items, &retrieval);
    let m_fail = evidence_coverage(&bank, &script.qa_items);
    let comp = comp_penalty(&bank, script, script.session_count(), cfg.optim.alpha)
        .expect("horizon is in range");
    EvalReport {
        qa_f1,
        m_fail,
        bank_tokens: bank.token_count(),
        comp,
        total: qa_f1 - cfg.optim.lambda_comp * comp,
    }
}

/// A persisted training state with its selection score.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: usize,
    pub epoch: usize,
    pub params: PolicyParams,
    pub validation_total: f64,
}

#[derive(Debug)]
pub struct StageResult {
    /// Parameters after the stage's last epoch.
    pub end_params: PolicyParams,
    /// Highest-validation checkpoint of the stage.
    pub best_params: PolicyParams,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Debug)]
pub struct RunResult {
    pub final_params: PolicyParams,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Deterministic order-preserving parallel map: worker count changes the
/// schedule, never the result.
pub fn parallel_map<T, F>(count: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(count) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let value = f(i);
                slots.lock().expect("slot lock")[i] = Some(value);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|v| v.expect("every index computed"))
        .collect()
}

struct EpochOutcome {
    params: PolicyParams,
    loss: f64,
    grad_norm: f64,
    mean_session_reward: f64,
}

struct LocalTask {
    session: usize,
    anchor: usize,
    snapshot: Snapshot,
    j: usize,
    base_seed: u64,
}

fn train_epoch(
    params: &PolicyParams,
    work: &DialogueScript,
    cfg: &ResolvedConfig,
    ref_params: &PolicyParams,
    epoch_seed: u64,
    workers: usize,
) -> Result<EpochOutcome, TrainError> {
    let rollout_cfg = cfg.rollout_config();
    let retrieval = cfg.retrieval_config();
    let opt = &cfg.optim;

    let global_base = mix(epoch_seed, domain::GLOBAL_ROLLOUT, 0);
    let mut rollouts: Vec<GlobalRollout> = parallel_map(opt.n_global, workers, |i| {
        run_global_rollout(params, work, i, global_base, &rollout_cfg)
    });

    let rewards = global_rewards(&rollouts, work, opt.alpha, opt.lambda_comp, &retrieval)?;
    let advantages = global_advantages(&rewards, opt.epsilon);
    assign_global_advantages(&mut rollouts, &advantages);
    let reward_cells = rewards.iter().flatten().count();
    let mean_session_reward = if reward_cells == 0 {
        0.0
    } else {
        rewards.iter().flatten().sum::<f64>() / reward_cells as f64
    };

    let mut locals: Vec<LocalRerollout> = Vec::new();
    if opt.p_local > 0.0 {
        let mut sess_rng = substream(epoch_seed, domain::LOCAL_SESSIONS, 0);
        let selected = sample_local_sessions(work.session_count(), opt.p_local, &mut sess_rng);
        let mut tasks: Vec<LocalTask> = Vec::with_capacity(selected.len() * opt.m_local);
        for &t in &selected {
            let mut anchor_rng = substream(epoch_seed, domain::LOCAL_ANCHOR, t as u64);
            let anchor = choose_anchor(opt.anchor.into(), &rewards[t - 1], &mut anchor_rng);
            let anchor_snapshot = rollouts[anchor]
                .snapshots
                .get(t - 1)
                .ok_or(GrpoError::MissingSnapshot { session: t })?
                .clone();
            let base_seed = mix(epoch_seed, domain::LOCAL_REROLLOUT, t as u64);
            for j in 0..opt.m_local {
                tasks.push(LocalTask {
                    session: t,
                    anchor,
                    snapshot: anchor_snapshot.clone(),
                    j,
                    base_seed,
                });
            }
        }
        locals = parallel_map(tasks.len(), workers, |idx| {
            let task = &tasks[idx];
            run_local_rerollout(
                params,
                work,
                task.session,
                task.anchor,
                &task.snapshot,
                task.j,
                task.base_seed,
                &rollout_cfg,
            )
        });
        // Tasks are grouped session-major; normalize each group of m.
        for group in locals.chunks_mut(opt.m_local) {
            let adv = local_rewards_and_advantages(
                group,
                work,
                opt.alpha,
                opt.lambda_comp,
                opt.epsilon,
                &retrieval,
            )?;
            assign_local_advantages(group, &adv);
        }
    }

    let steps: Vec<&GenerationStep> = rollouts
        .iter()
        .flat_map(|r| r.steps.iter())
        .chain(locals.iter().flat_map(|l| l.steps.iter()))
        .filter(|s| !s.flagged_invalid)
        .collect();
    let (loss, grad) = objective_and_gradient(&steps, params, ref_params, &cfg.objective_config())?;

    let mut new_params = params.clone();
    for (w, g) in new_params.theta.iter_mut().zip(&grad) {
        *w -= opt.learning_rate * g;
    }
    Ok(EpochOutcome {
        params: new_params,
        loss,
        grad_norm: l2_norm(&grad),
        mean_session_reward,
    })
}

/// Runs one curriculum stage: per epoch, rollouts, one update, and a
/// validation pass (always on the full-horizon validation script) that feeds
/// checkpoint selection.
pub fn train_stage(
    start_params: PolicyParams,
    script: &DialogueScript,
    val_script: &DialogueScript,
    stage_index: usize,
    stage: &CurriculumStage,
    cfg: &ResolvedConfig,
    workers: usize,
) -> Result<StageResult, TrainError> {
    if stage.max_sessions > script.session_count() {
        return Err(TrainError::Config(format!(
            "stage {} horizon {} exceeds script horizon {}",
            stage_index,
            stage.max_sessions,
            script.session_count()
        )));
    }
    let work = truncate_horizon(script, stage.max_sessions)?;
    let ref_params = start_params.clone();
    let mut params = start_params;
    let mut rows = Vec::with_capacity(stage.epochs);
    let mut checkpoints = Vec::with_capacity(stage.epochs);
    for epoch in 1..=stage.epochs {
        let started = Instant::now();
        let epoch_seed = mix(
            cfg.seed,
            domain::EPOCH,
            ((stage_index as u64) << 32) | epoch as u64,
        );
        let outcome = train_epoch(&params, &work, cfg, &ref_params, epoch_seed, workers)?;
        params = outcome.params;
        let val = evaluate(&params, val_script, cfg);
        rows.push(MetricsRow {
            stage: stage_index,
            epoch,
            mean_session_reward: outcome.mean_session_reward,
            validation_f1: val.qa_f1,
            validation_total: val.total,
            m_fail: val.m_fail,
            bank_tokens: val.bank_tokens,
            loss: outcome.loss,
            grad_norm: outcome.grad_norm,
            wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        checkpoints.push(Checkpoint {
            stage: stage_index,
            epoch,
            params: params.clone(),
            validation_total: val.total,
        });
    }
    let best = checkpoints
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.validation_total
                .partial_cmp(&b.validation_total)
                .expect("validation totals are finite")
                .then(ib.cmp(ia)) // ties resolve to the earliest epoch
        })
        .map(|(_, c)| c.params.clone())
        .expect("stage has at least one epoch");
    Ok(StageResult {
        end_params: params,
        best_params: best,
        rows,
        checkpoints,
    })
}

/// Runs all stages; each next stage starts from the previous stage's best
/// validation checkpoint, and the final parameters are the last stage's
/// end-of-training parameters.
pub fn run_curriculum(
    cfg: &ResolvedConfig,
    script: &DialogueScript,
    val_script: &DialogueScript,
    workers: usize,
) -> Result<RunResult, TrainError> {
    let mut params = PolicyParams::random(cfg.seed, cfg.optim.init_scale);
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let stage_count = cfg.stages.len();
    for (i, stage) in cfg.stages.iter().enumerate() {
        let result = train_stage(params, script, val_script, i + 1, stage, cfg, workers)?;
        rows.extend(result.rows);
        checkpoints.extend(result.checkpoints);
        params = if i + 1 < stage_count {
            result.best_params
        } else {
            result.end_params
        };
    }
    Ok(RunResult {
        final_params: params,
        rows,
        checkpoints,
    })
}

/// Training and held-out validation scripts for a config: the validation
/// conversation uses `seed + 1`.
pub fn make_scripts(cfg: &ResolvedConfig) -> Result<(DialogueScript, DialogueScript), TrainError> {
    let env = cfg.env_config();
    let train = generate_script(&env, cfg.seed)?;
    let val = generate_script(&env, cfg.seed.wrapping_add(1))?;
    Ok((train, val))
}

/// Hash of a bank's serialized form; used to compare memory states.
pub fn bank_fingerprint(bank: &MemoryBank) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(crate::formats::serialize_bank(bank).as_bytes());
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Convenience for tests and diagnostics: fingerprint of a snapshot.
pub fn snapshot_fingerprint(s: &Snapshot) -> String {
    bank_fingerprint(&memsim_core::memory_bank::restore(s))
}

/// Fingerprint helper for the empty bank.
pub fn empty_bank_snapshot() -> Snapshot {
    snapshot(&MemoryBank::new())
}
