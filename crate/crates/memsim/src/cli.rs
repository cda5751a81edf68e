//! Command-line entry points: `train`, `eval`, `ablate`, `inspect`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error. Only
//! `--seed` and `--out` may override config values; everything else comes
//! from the declarative config file so run manifests stay authoritative.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use memsim_core::synth_env::generate_script;

use crate::config::{ConfigError, Mode, ResolvedConfig, TrainConfig};
use crate::formats;
use crate::metrics;
use crate::trainer::{evaluate, make_scripts, run_curriculum, TrainError};

#[derive(Parser)]
#[command(name = "memsim", version, about = "Memory-construction policy training simulator")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run curriculum training from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output run directory (default: runs/<config hash>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a parameter checkpoint with a greedy construction pass.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Evaluate on the held-out validation script (seed + 1).
        #[arg(long)]
        validation: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an ablation axis on matched seeds and emit a comparison CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: algorithm, curriculum, lambda_comp, chunks, length_norm.
        #[arg(long)]
        axis: String,
        /// Output CSV path (default: ablation_<axis>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of matched seeds per variant.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretty-print a MEMSIM artifact (script, bank, or params file).
    Inspect { path: PathBuf },
}

#[derive(Debug)]
pub enum CliError {
    /// Usage or configuration problems; exit code 2.
    Usage(String),
    /// Everything else; exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Runtime(e.to_string()),
            ConfigError::Parse(_) | ConfigError::Invalid(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<formats::FormatError> for CliError {
    fn from(e: formats::FormatError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Rollout parallelism: `MEMSIM_WORKERS` caps it, defaulting to the
/// available cores.
pub fn workers_from_env() -> Result<usize, CliError> {
    match std::env::var("MEMSIM_WORKERS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "MEMSIM_WORKERS must be a positive integer, got `{raw}`"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
        Err(e) => Err(CliError::Usage(format!("MEMSIM_WORKERS unreadable: {e}"))),
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_path: String,
    pub config_hash: String,
    pub output_dir: String,
    pub tool_version: String,
    pub timestamp_unix: u64,
}

fn load_resolved(path: &Path, seed: Option<u64>) -> Result<ResolvedConfig, CliError> {
    let mut cfg = TrainConfig::from_path(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolve()?)
}

/// Trains from a config file into a fresh run directory.
///
/// Refuses to reuse an existing directory. Writes the manifest, both scripts,
/// per-epoch checkpoints, the final parameters, and the metrics log in JSONL
/// and CSV forms.
pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let cfg = load_resolved(config_path, seed)?;
    let workers = workers_from_env()?;
    let hash = cfg.hash();
    let run_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&hash));
    if run_dir.exists() {
        return Err(CliError::Runtime(format!(
            "run directory {} already exists; refusing to overwrite",
            run_dir.display()
        )));
    }
    if let Some(parent) = run_dir.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::create_dir(&run_dir)?;

    let manifest = RunManifest {
        config_path: config_path.display().to_string(),
        config_hash: hash,
        output_dir: run_dir.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    std::fs::write(
        run_dir.join("config.resolved.toml"),
        toml::to_string(&*cfg).expect("config serializes"),
    )?;

    let (script, val_script) = make_scripts(&cfg)?;
    std::fs::write(run_dir.join("train_script.memsim"), formats::serialize_script(&script))?;
    std::fs::write(run_dir.join("val_script.memsim"), formats::serialize_script(&val_script))?;

    let result = run_curriculum(&cfg, &script, &val_script, workers)?;

    std::fs::write(run_dir.join("metrics.jsonl"), metrics::to_jsonl(&result.rows))?;
    std::fs::write(run_dir.join("metrics.csv"), metrics::to_csv(&result.rows))?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir(&ckpt_dir)?;
    for c in &result.checkpoints {
        std::fs::write(
            ckpt_dir.join(format!("stage{}_epoch{}.params", c.stage, c.epoch)),
            formats::serialize_params(&c.params),
        )?;
    }
    std::fs::write(
        run_dir.join("final.params"),
        formats::serialize_params(&result.final_params),
    )?;

    let last = result.rows.last().expect("at least one epoch");
    println!(
        "run {} finished: validation_f1 {:.4}, validation_total {:.4}, m_fail {:.4}, bank_tokens {}",
        run_dir.display(),
        last.validation_f1,
        last.validation_total,
        last.m_fail,
        last.bank_tokens
    );
    Ok(run_dir)
}

pub fn cmd_eval(
    config_path: &Path,
    params_path: &Path,
    validation: bool,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = load_resolved(config_path, seed)?;
    let text = std::fs::read_to_string(params_path)?;
    let params = formats::parse_params(&text)?;
    let env = cfg.env_config();
    let script_seed = if validation { cfg.seed + 1 } else { cfg.seed };
    let script = generate_script(&env, script_seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = evaluate(&params, &script, &cfg);
    println!(
        "f1 {:.6}\nm_fail {:.6}\nbank_tokens {}\ncomp {:.6}\ntotal {:.6}",
        report.qa_f1, report.m_fail, report.bank_tokens, report.comp, report.total
    );
    Ok(())
}

/// One ablation variant: a label plus a config transformation.
struct Variant {
    name: &'static str,
    apply: Box<dyn Fn(&mut TrainConfig)>,
}

fn axis_variants(axis: &str) -> Result<Vec<Variant>, CliError> {
    let v = |name: &'static str, f: Box<dyn Fn(&mut TrainConfig)>| Variant { name, apply: f };
    match axis {
        "algorithm" => Ok(vec![
            v("logo", Box::new(|c| c.mode = Mode::Logo)),
            v("grpo_baseline", Box::new(|c| c.mode = Mode::GrpoBaseline)),
        ]),
        "curriculum" => Ok(vec![
            v("curriculum", Box::new(|c| c.mode = Mode::Logo)),
            v("direct", Box::new(|c| c.mode = Mode::NoCurriculum)),
        ]),
        "lambda_comp" => Ok(vec![
            v("lambda_0.0", Box::new(|c| c.optim.lambda_comp = 0.0)),
            v("lambda_0.1", Box::new(|c| c.optim.lambda_comp = 0.1)),
            v("lambda_0.3", Box::new(|c| c.optim.lambda_comp = 0.3)),
            v("lambda_0.5", Box::new(|c| c.optim.lambda_comp = 0.5)),
        ]),
        "chunks" => Ok(vec![
            v("chunks_4", Box::new(|c| c.env.chunks_per_session = 4)),
            v("chunks_8", Box::new(|c| c.env.chunks_per_session = 8)),
            v("chunks_10", Box::new(|c| c.env.chunks_per_session = 10)),
        ]),
        "length_norm" => Ok(vec![
            v("step_level", Box::new(|c| c.mode = Mode::Logo)),
            v("token_level", Box::new(|c| c.mode = Mode::TokenLevel)),
        ]),
        other => Err(CliError::Usage(format!(
            "unknown ablation axis `{other}`; expected algorithm, curriculum, lambda_comp, chunks, or length_norm"
        ))),
    }
}

/// Mean final metrics of one variant across matched seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub seeds: u64,
    pub final_f1: f64,
    pub final_m_fail: f64,
    pub final_val_total: f64,
    pub final_bank_tokens: f64,
}

pub fn run_ablation(
    base: &TrainConfig,
    axis: &str,
    seeds: u64,
    workers: usize,
) -> Result<Vec<AblationRow>, CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("seeds must be >= 1".into()));
    }
    let variants = axis_variants(axis)?;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in &variants {
        let mut f1 = 0.0;
        let mut m_fail = 0.0;
        let mut total = 0.0;
        let mut bank = 0.0;
        for offset in 0..seeds {
            let mut cfg = base.clone();
            (variant.apply)(&mut cfg);
            cfg.seed = base.seed + offset;
            let cfg = cfg.resolve()?;
            let (script, val_script) = make_scripts(&cfg)?;
            let result = run_curriculum(&cfg, &script, &val_script, workers)?;
            let report = evaluate(&result.final_params, &val_script, &cfg);
            f1 += report.qa_f1;
            m_fail += report.m_fail;
            total += report.total;
            bank += report.bank_tokens as f64;
        }
        let n = seeds as f64;
        rows.push(AblationRow {
            axis: axis.to_string(),
            variant: variant.name.to_string(),
            seeds,
            final_f1: f1 / n,
            final_m_fail: m_fail / n,
            final_val_total: total / n,
            final_bank_tokens: bank / n,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("axis,variant,seeds,final_f1,final_m_fail,final_val_total,final_bank_tokens\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{:?},{:?}\n",
            r.axis, r.variant, r.seeds, r.final_f1, r.final_m_fail, r.final_val_total,
            r.final_bank_tokens
        ));
    }
    out
}

pub fn cmd_ablate(
    config_path: &Path,
    axis: &str,
    out: Option<PathBuf>,
    seeds: u64,
    seed: Option<u64>,
) -> Result<PathBuf, CliError> {
    let mut base = TrainConfig::from_path(config_path)?;
    if let Some(seed) = seed {
        base.seed = seed;
    }
    // Validate the base config before fanning out.
    base.clone().resolve()?;
    let workers = workers_from_env()?;
    let rows = run_ablation(&base, axis, seeds, workers)?;
    let out_path = out.unwrap_or_else(|| PathBuf::from(format!("ablation_{axis}.csv")));
    std::fs::write(&out_path, ablation_csv(&rows))?;
    for r in &rows {
        println!(
            "{:<14} f1 {:.4}  m_fail {:.4}  val_total {:.4}  bank_tokens {:.1}",
            r.variant, r.final_f1, r.final_m_fail, r.final_val_total, r.final_bank_tokens
        );
    }
    Ok(out_path)
}

pub fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or("").trim();
    match header {
        formats::SCRIPT_HEADER => {
            let script = formats::parse_script(&text)?;
            println!(
                "script: seed {}, speakers {} & {}, {} sessions x {} chunks",
                script.seed,
                script.speakers[0],
                script.speakers[1],
                script.session_count(),
                script.chunk_count()
            );
            let statements: usize = script.statements().count();
            println!(
                "{} statements, {} facts, {} qa items",
                statements,
                script.facts.len(),
                script.qa_items.len()
            );
            for (t0, session) in script.sessions.iter().enumerate() {
                let in_session: usize = session.iter().map(|c| c.len()).sum();
                println!(
                    "  session {:>2} time {:>6}: {} statements, {} tokens",
                    t0 + 1,
                    script.session_times[t0],
                    in_session,
                    script.session_tokens(t0 + 1)
                );
            }
            for qa in &script.qa_items {
                let evidence: Vec<&str> = qa.evidence.iter().map(String::as_str).collect();
                println!(
                    "  qa s{:>2} [{}] {} -> {}",
                    qa.attributed_session,
                    evidence.join(","),
                    qa.question.join(" "),
                    qa.gold_answer.join(" ")
                );
            }
        }
        formats::BANK_HEADER => {
            let bank = formats::parse_bank(&text)?;
            println!(
                "bank: {} entries, {} content tokens, next id {}",
                bank.entries.len(),
                bank.token_count(),
                bank.id_counter
            );
            println!("{:<6} {:<8} {:<8} {:<24} content", "id", "speaker", "time", "dia_ids");
            for e in &bank.entries {
                let dias: Vec<&str> = e.dia_ids.iter().map(String::as_str).collect();
                println!(
                    "{:<6} {:<8} {:<8} {:<24} {}",
                    e.memory_id.to_string(),
                    e.speaker,
                    e.session_time,
                    dias.join(","),
                    e.content.join(" ")
                );
            }
        }
        formats::PARAMS_HEADER => {
            let params = formats::parse_params(&text)?;
            println!(
                "params: dim {}, l2 norm {:.6}",
                params.theta.len(),
                memsim_core::math::l2_norm(&params.theta)
            );
            for (i, w) in params.theta.iter().enumerate() {
                println!("  w{i:<3} {w:?}");
            }
        }
        other => {
            return Err(CliError::Runtime(format!(
                "unrecognized artifact header `{other}` in {}",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Parses `args` and runs the selected command, returning the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap already formats usage errors; keep its exit semantics
            // (0 for --help/--version, 2 otherwise).
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result: Result<(), CliError> = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out).map(|_| ()),
        Command::Eval {
            config,
            params,
            validation,
            seed,
        } => cmd_eval(&config, &params, validation, seed),
        Command::Ablate {
            config,
            axis,
            out,
            seeds,
            seed,
        } => cmd_ablate(&config, &axis, out, seeds, seed).map(|_| ()),
        Command::Inspect { path } => cmd_inspect(&path),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

/// Entry point for the binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}
