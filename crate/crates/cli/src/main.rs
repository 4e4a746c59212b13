//! `ozrl` — build pass-dependence graphs and their action spaces, train the
//! Double-DQN agent, and predict/evaluate per-program pass orderings.
//!
//! Exit codes: 0 success, 1 user or configuration error, 2 tool/backend
//! failure (including evaluations where any program failed).

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use config::{BackendKind, Overrides, RunConfig};
use ozrl_core::agent::{self, Checkpoint};
use ozrl_core::backend::IrSource;
use ozrl_core::catalog::PassId;
use ozrl_core::env::trace_arrows;
use ozrl_core::eval::{evaluate, render_report, EvalError, ReportFormat};
use ozrl_core::nn::QNetwork;
use ozrl_core::odg::{build_odg, degree_report, enumerate_subsequences, export_dot, OdgError, WalkConvention};

#[derive(Parser)]
#[command(name = "ozrl", version, about = "Phase-ordering toolkit: Oz dependence graphs plus a Double-DQN sequence picker")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the agent seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-program evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override the backend kind from the config.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dependence graph, print critical nodes, and export the
    /// DOT rendering and the derived action space.
    Odg {
        /// Pipeline file (defaults to the bundled Oz schedule).
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// Critical-degree threshold.
        #[arg(short)]
        k: Option<u32>,
        /// Write the DOT rendering here.
        #[arg(long)]
        dot: Option<PathBuf>,
        /// Write the derived action space here (one sub-sequence per line).
        #[arg(long)]
        actions: Option<PathBuf>,
    },
    /// Train the agent on the configured program list.
    Train {
        /// Continue from the configured checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Print the greedy action trace and expanded pass list for one program.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Program to predict for (mock:<seed> or an IR file path).
        program: String,
        /// Write the final optimized IR here (toolchain backend only).
        #[arg(long)]
        emit_ir: Option<PathBuf>,
    },
    /// Evaluate the checkpointed policy against the Oz baseline.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report format: table, jsonl, or csv.
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Write the report here as well as stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Programs to evaluate (defaults to the config's eval list).
        programs: Vec<String>,
    },
}

/// User/config problems exit 1, tool failures exit 2.
enum CmdError {
    User(anyhow::Error),
    Tool(anyhow::Error),
}

impl From<anyhow::Error> for CmdError {
    fn from(e: anyhow::Error) -> Self {
        CmdError::User(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides { seed: cli.seed, backend: cli.backend, jobs: cli.jobs };
    let result = (|| -> Result<(), CmdError> {
        let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
        match cli.command {
            Command::Odg { pipeline, k, dot, actions } => cmd_odg(&cfg, pipeline, k, dot, actions),
            Command::Train { resume } => cmd_train(&cfg, resume),
            Command::Predict { checkpoint, program, emit_ir } => {
                cmd_predict(&cfg, checkpoint, &program, emit_ir)
            }
            Command::Eval { checkpoint, format, output, programs } => {
                cmd_eval(&cfg, checkpoint, format, output, &programs, overrides.jobs.unwrap_or(1))
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CmdError::Tool(e)) => {
            eprintln!("tool failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_odg(
    cfg: &RunConfig,
    pipeline: Option<PathBuf>,
    k: Option<u32>,
    dot: Option<PathBuf>,
    actions: Option<PathBuf>,
) -> Result<(), CmdError> {
    let pipeline = RunConfig::load_pipeline_or_bundled(pipeline.as_deref())?;
    let k = k.unwrap_or(cfg.action_space.k);
    let convention = WalkConvention::resolved();
    let graph = build_odg(&pipeline, k, convention.clone())
        .map_err(|e| CmdError::User(anyhow!("building graph: {e}")))?;
    let report = degree_report(&graph);

    println!(
        "pipeline {:?}: {} passes, {} unique, {} edges",
        pipeline.label(),
        pipeline.len(),
        graph.node_count(),
        graph.edge_count()
    );
    println!("critical nodes at k={k} (degree = distinct in + out neighbors):");
    for node in graph.critical() {
        println!("  {node}: degree {}", report.get(node).get(convention.degree));
    }

    let walks = match enumerate_subsequences(&graph) {
        Ok(w) => w,
        Err(OdgError::NoCriticalNodes(k)) => {
            return Err(CmdError::User(anyhow!(
                "no node reaches degree {k}; lower -k to obtain critical nodes"
            )))
        }
        Err(e) => return Err(CmdError::User(anyhow!("enumerating walks: {e}"))),
    };
    println!("derived {} sub-sequences", walks.len());

    if let Some(path) = dot {
        fs::write(&path, export_dot(&graph))
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(CmdError::User)?;
        println!("wrote DOT to {}", path.display());
    }
    if let Some(path) = actions {
        let space = walks.to_action_space().map_err(|e| CmdError::User(e.into()))?;
        fs::write(&path, space.to_text())
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(CmdError::User)?;
        println!("wrote action space to {}", path.display());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<(), CmdError> {
    if cfg.programs.train.is_empty() {
        return Err(CmdError::User(anyhow!("config has no [programs].train entries")));
    }
    let actions = Arc::new(cfg.action_space()?);
    let programs = cfg
        .programs
        .train
        .iter()
        .map(|s| cfg.program_handle(s))
        .collect::<Result<Vec<_>>>()?;
    let mut env = cfg.make_env(actions.clone())?;
    let train_cfg = cfg.train_config();

    let checkpoint_path = cfg.checkpoint_path();
    let resume_from = if resume {
        Some(
            Checkpoint::load(&checkpoint_path)
                .with_context(|| format!("cannot resume from {}", checkpoint_path.display()))?,
        )
    } else {
        None
    };

    cfg.echo_effective()?;
    let outcome = agent::train(&mut env, &programs, &train_cfg, resume_from.as_ref())
        .map_err(classify_agent_error)?;

    if let Some(parent) = checkpoint_path.parent() {
        fs::create_dir_all(parent).ok();
    }
    outcome
        .checkpoint
        .save(&checkpoint_path)
        .with_context(|| format!("cannot write checkpoint {}", checkpoint_path.display()))?;
    let log_path = cfg.train_log_path();
    fs::write(&log_path, agent::log_to_jsonl(&outcome.log))
        .with_context(|| format!("cannot write training log {}", log_path.display()))?;
    println!(
        "trained {} iterations ({} steps); checkpoint {} log {}",
        outcome.log.len(),
        outcome.global_step,
        checkpoint_path.display(),
        log_path.display()
    );
    Ok(())
}

fn classify_agent_error(e: agent::AgentError) -> CmdError {
    match e {
        agent::AgentError::AllProgramsFailed | agent::AgentError::Env(_) => {
            CmdError::Tool(anyhow!("{e}"))
        }
        other => CmdError::User(anyhow!("{other}")),
    }
}

fn load_checkpoint(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<Checkpoint> {
    let path = flag.unwrap_or_else(|| cfg.checkpoint_path());
    Checkpoint::load(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    program: &str,
    emit_ir: Option<PathBuf>,
) -> Result<(), CmdError> {
    let actions = Arc::new(cfg.action_space()?);
    let ck = load_checkpoint(cfg, checkpoint)?;
    if ck.action_fingerprint != actions.fingerprint() {
        return Err(CmdError::User(anyhow!(
            "checkpoint was trained on a different action space than the configured {} space",
            actions.kind
        )));
    }
    let network: QNetwork<f64> = ck.to_network().map_err(|e| CmdError::User(e.into()))?;
    let handle = cfg.program_handle(program)?;
    let mut env = cfg.make_env(actions.clone())?;
    let rollout = env
        .rollout(&handle, |embedding| {
            agent::greedy_action(&network, embedding.values()).expect("checkpoint dimensions")
        })
        .map_err(|e| CmdError::Tool(anyhow!("rollout failed: {e}")))?;
    if rollout.failed {
        return Err(CmdError::Tool(anyhow!(
            "backend failure after {} steps: trace {}",
            rollout.trace.len(),
            trace_arrows(&rollout.trace)
        )));
    }

    println!("trace: {}", trace_arrows(&rollout.trace));
    let flags: Vec<String> = rollout
        .trace
        .iter()
        .flat_map(|id| actions.get(*id).expect("trace actions in range").passes.iter())
        .map(PassId::to_flag)
        .collect();
    println!("passes: {}", flags.join(" "));
    println!(
        "size: base {} -> predicted {} | static throughput {} -> {}",
        rollout.sizes.first().unwrap_or(&0),
        rollout.final_measurement.bin_size,
        rollout.throughputs.first().unwrap_or(&0.0),
        rollout.final_measurement.throughput,
    );

    if let Some(out) = emit_ir {
        // The final state's IR lives in the work dir for the toolchain
        // backend; mock programs have no bytes to write.
        let mut state = env.reset(&handle).map_err(|e| CmdError::Tool(anyhow!("{e}")))?;
        for action in &rollout.trace {
            let result = env.step(state, *action).map_err(|e| CmdError::Tool(anyhow!("{e}")))?;
            state = result.state;
        }
        match &state.ir.source {
            IrSource::File { path } => {
                fs::copy(path, &out)
                    .with_context(|| format!("cannot write {}", out.display()))?;
                println!("wrote optimized IR to {}", out.display());
            }
            IrSource::Mock { .. } => {
                eprintln!("note: mock programs have no IR to emit; skipping --emit-ir");
            }
        }
    }
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    format: ReportFormat,
    output: Option<PathBuf>,
    programs: &[String],
    jobs: usize,
) -> Result<(), CmdError> {
    let specs: Vec<String> = if programs.is_empty() {
        cfg.programs.eval.clone()
    } else {
        programs.to_vec()
    };
    if specs.is_empty() {
        return Err(CmdError::User(anyhow!(
            "no programs to evaluate (pass them as arguments or set [programs].eval)"
        )));
    }
    let actions = Arc::new(cfg.action_space()?);
    let ck = load_checkpoint(cfg, checkpoint)?;
    let handles = specs
        .iter()
        .map(|s| cfg.program_handle(s))
        .collect::<Result<Vec<_>>>()?;

    cfg.echo_effective()?;
    // Surface backend construction problems once, before the parallel loop
    // relies on infallible environment construction.
    cfg.make_env(actions.clone())?;
    let report = evaluate(
        &ck,
        &handles,
        |_| cfg.make_env(actions.clone()).expect("backend construction validated"),
        jobs.max(1),
    )
    .map_err(|e| match e {
        EvalError::ActionSpaceMismatch | EvalError::EmptySuite | EvalError::BadCheckpoint(_) => {
            CmdError::User(anyhow!("{e}"))
        }
        other => CmdError::Tool(anyhow!("{other}")),
    })?;

    let rendered = render_report(&report, format);
    print!("{rendered}");
    if let Some(path) = output {
        fs::write(&path, &rendered)
            .with_context(|| format!("cannot write report {}", path.display()))?;
    }
    if !report.all_succeeded() {
        return Err(CmdError::Tool(anyhow!(
            "{} of {} programs failed",
            report.failures.len(),
            specs.len()
        )));
    }
    Ok(())
}
