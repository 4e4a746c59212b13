//! Greedy evaluation against the `Oz` baseline: roll out the checkpointed
//! policy on each program, compare predicted object sizes with the `Oz`
//! sizes, and aggregate min/avg/max size reduction plus static throughput
//! deltas. Failures never vanish silently; they are carried in the report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{greedy_action, Checkpoint, CheckpointError};
use crate::backend::{IrHandle, EMBED_DIM};
use crate::env::{trace_arrows, Environment};
use crate::nn::QNetwork;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no programs to evaluate")]
    EmptySuite,
    #[error("checkpoint action space does not match the configured action space")]
    ActionSpaceMismatch,
    #[error("checkpoint network is unusable: {0}")]
    BadCheckpoint(String),
    #[error("baseline size must be positive")]
    ZeroBase,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// `100 * (size_oz - size_pred) / size_oz`; negative means the predicted
/// sequence produced a larger object than `Oz`.
pub fn size_reduction_pct(size_oz: u64, size_pred: u64) -> Result<f64, EvalError> {
    if size_oz < 1 {
        return Err(EvalError::ZeroBase);
    }
    Ok(100.0 * (size_oz as f64 - size_pred as f64) / size_oz as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub program: String,
    pub trace: Vec<u32>,
    pub size_base: u64,
    pub size_oz: u64,
    pub size_pred: u64,
    pub size_reduction_pct: f64,
    pub throughput_oz: f64,
    pub throughput_pred: f64,
    /// Static (analyzer-estimated) throughput delta vs `Oz`, in percent.
    pub static_throughput_delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub program: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<FailureRecord>,
    /// Min/avg/max over the per-program size reductions; zeros when no
    /// program succeeded.
    pub size_reduction: Aggregate,
    /// Programs whose predicted object is larger than the `Oz` one.
    pub regressions: usize,
}

impl SuiteReport {
    fn from_parts(records: Vec<EvalRecord>, failures: Vec<FailureRecord>) -> Self {
        let pcts: Vec<f64> = records.iter().map(|r| r.size_reduction_pct).collect();
        let size_reduction = if pcts.is_empty() {
            Aggregate { min: 0.0, avg: 0.0, max: 0.0 }
        } else {
            Aggregate {
                min: pcts.iter().cloned().fold(f64::INFINITY, f64::min),
                avg: pcts.iter().sum::<f64>() / pcts.len() as f64,
                max: pcts.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        };
        let regressions = records.iter().filter(|r| r.size_reduction_pct < 0.0).count();
        SuiteReport { records, failures, size_reduction, regressions }
    }

    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Greedy (epsilon = 0) rollout of the checkpointed policy on every program.
///
/// `make_env` builds a fresh environment per program so evaluations can run
/// concurrently (`jobs` threads); results are reassembled in program order,
/// so the report is deterministic. Per-program failures are recorded,
/// excluded from the aggregates, and counted.
pub fn evaluate(
    checkpoint: &Checkpoint,
    programs: &[IrHandle],
    make_env: impl Fn(&IrHandle) -> Environment + Sync,
    jobs: usize,
) -> Result<SuiteReport, EvalError> {
    if programs.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    if checkpoint.dims.first() != Some(&EMBED_DIM) {
        return Err(EvalError::BadCheckpoint(format!(
            "input width {:?} is not {EMBED_DIM}",
            checkpoint.dims.first()
        )));
    }
    {
        // Compatibility gate: the checkpoint must target this action space.
        let probe = make_env(&programs[0]);
        if probe.action_space().fingerprint() != checkpoint.action_fingerprint {
            return Err(EvalError::ActionSpaceMismatch);
        }
        if *checkpoint.dims.last().unwrap() != probe.action_space().len() {
            return Err(EvalError::ActionSpaceMismatch);
        }
    }
    let network: QNetwork<f64> = checkpoint.to_network()?;

    let run_one = |program: &IrHandle| -> Result<EvalRecord, FailureRecord> {
        let mut env = make_env(program);
        let fail = |error: String| FailureRecord { program: program.describe(), error };
        let rollout = env
            .rollout(program, |embedding| {
                greedy_action(&network, embedding.values()).expect("validated dimensions")
            })
            .map_err(|e| fail(e.to_string()))?;
        if rollout.failed {
            return Err(fail("backend failure terminated the episode".into()));
        }
        let baseline = env.baseline().expect("rollout resets first");
        let pct = size_reduction_pct(baseline.oz.bin_size, rollout.final_measurement.bin_size)
            .map_err(|e| fail(e.to_string()))?;
        Ok(EvalRecord {
            program: program.describe(),
            trace: rollout.trace,
            size_base: baseline.unopt.bin_size,
            size_oz: baseline.oz.bin_size,
            size_pred: rollout.final_measurement.bin_size,
            size_reduction_pct: pct,
            throughput_oz: baseline.oz.throughput,
            throughput_pred: rollout.final_measurement.throughput,
            static_throughput_delta_pct: 100.0
                * (rollout.final_measurement.throughput - baseline.oz.throughput)
                / baseline.oz.throughput,
        })
    };

    let outcomes: Vec<Result<EvalRecord, FailureRecord>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| EvalError::BadCheckpoint(format!("thread pool: {e}")))?;
        pool.install(|| programs.par_iter().map(run_one).collect())
    } else {
        programs.iter().map(run_one).collect()
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(SuiteReport::from_parts(records, failures))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Jsonl,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "jsonl" => Ok(ReportFormat::Jsonl),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?} (table|jsonl|csv)")),
        }
    }
}

/// Tagged JSON-lines representation; `report_from_jsonl` inverts it.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ReportLine {
    Record(EvalRecord),
    Failure(FailureRecord),
    Summary { size_reduction: Aggregate, regressions: usize },
}

pub fn render_report(report: &SuiteReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Jsonl => {
            let mut out = String::new();
            for r in &report.records {
                out.push_str(&serde_json::to_string(&ReportLine::Record(r.clone())).unwrap());
                out.push('\n');
            }
            for f in &report.failures {
                out.push_str(&serde_json::to_string(&ReportLine::Failure(f.clone())).unwrap());
                out.push('\n');
            }
            out.push_str(
                &serde_json::to_string(&ReportLine::Summary {
                    size_reduction: report.size_reduction,
                    regressions: report.regressions,
                })
                .unwrap(),
            );
            out.push('\n');
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "program,trace,size_base,size_oz,size_pred,size_reduction_pct,\
                 throughput_oz,throughput_pred,static_throughput_delta_pct\n",
            );
            for r in &report.records {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.program,
                    trace_arrows(&r.trace),
                    r.size_base,
                    r.size_oz,
                    r.size_pred,
                    r.size_reduction_pct,
                    r.throughput_oz,
                    r.throughput_pred,
                    r.static_throughput_delta_pct,
                ));
            }
            out
        }
        ReportFormat::Table => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<24} {:>10} {:>10} {:>10} {:>9} {:>9}  trace\n",
                "program", "base", "oz", "predicted", "size%", "tput%"
            ));
            for r in &report.records {
                out.push_str(&format!(
                    "{:<24} {:>10} {:>10} {:>10} {:>9.2} {:>9.2}  {}\n",
                    r.program,
                    r.size_base,
                    r.size_oz,
                    r.size_pred,
                    r.size_reduction_pct,
                    r.static_throughput_delta_pct,
                    trace_arrows(&r.trace),
                ));
            }
            for f in &report.failures {
                out.push_str(&format!("{:<24} FAILED: {}\n", f.program, f.error));
            }
            out.push_str(&format!(
                "size reduction vs Oz: min {:.2}% avg {:.2}% max {:.2}% | regressions {} | failures {}\n",
                report.size_reduction.min,
                report.size_reduction.avg,
                report.size_reduction.max,
                report.regressions,
                report.failures.len(),
            ));
            out
        }
    }
}

/// Parses the JSON-lines rendering back into a report (the summary line is
/// recomputed from the records and must agree).
pub fn report_from_jsonl(text: &str) -> Result<SuiteReport, String> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut summary = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<ReportLine>(line).map_err(|e| e.to_string())? {
            ReportLine::Record(r) => records.push(r),
            ReportLine::Failure(f) => failures.push(f),
            ReportLine::Summary { size_reduction, regressions } => {
                summary = Some((size_reduction, regressions))
            }
        }
    }
    let report = SuiteReport::from_parts(records, failures);
    if let Some((agg, regressions)) = summary {
        if agg != report.size_reduction || regressions != report.regressions {
            return Err("summary line disagrees with records".into());
        }
    }
    Ok(report)
}
