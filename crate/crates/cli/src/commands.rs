//! The four subcommands. Each returns `Ok(())` or a [`CliError`] that
//! carries its exit code.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use radrl::boxformat::parse_boxes;
use radrl::evaluation::{map_at_iou, EvalInput};
use radrl::policy::{gen_tasks, PolicyParams};
use radrl::reward_pool::{RewardJob, RewardPool, DEFAULT_WORKERS};
use radrl::rewards::{BuiltinReward, Reference, RewardKind, Track};
use radrl::trainer::{
    smoothed_rewards, train_with_observer, EvalReport, StepLog, TrainConfig, TrainError,
    TrainObserver,
};
use serde_json::json;
use thiserror::Error;

use crate::records::{parse_line, salvage_id, CorpusRecord};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Empty(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(io_err(format!("cannot create {}", path.display())))
}

/// Non-blank lines of `path`; a missing input is a usage error.
fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn write_json_line(w: &mut impl Write, value: &serde_json::Value) -> Result<(), CliError> {
    writeln!(w, "{value}").map_err(io_err("writing output"))
}

struct RunFiles {
    out: PathBuf,
    steplog: csv::Writer<File>,
    evals: BufWriter<File>,
}

impl TrainObserver for RunFiles {
    fn on_step(&mut self, log: &StepLog) -> Result<(), TrainError> {
        let row = [
            log.step.to_string(),
            log.mean_reward.to_string(),
            log.mean_response_length.to_string(),
            log.mean_kl.to_string(),
            log.clip_fraction.to_string(),
            log.loss.to_string(),
            log.wall_ms.to_string(),
        ];
        self.steplog
            .write_record(&row)
            .and_then(|()| Ok(self.steplog.flush()?))
            .map_err(|e| TrainError::Observer(e.to_string()))
    }

    fn on_checkpoint(&mut self, step: usize, params: &PolicyParams) -> Result<(), TrainError> {
        let path = self
            .out
            .join("checkpoints")
            .join(format!("step_{step:06}.bin"));
        let file = File::create(&path).map_err(|e| TrainError::Observer(e.to_string()))?;
        params.write_checkpoint(BufWriter::new(file))?;
        Ok(())
    }

    fn on_eval(&mut self, step: usize, report: &EvalReport) -> Result<(), TrainError> {
        let line = json!({ "step": step, "eval": eval_summary(report) });
        writeln!(self.evals, "{line}")
            .and_then(|()| self.evals.flush())
            .map_err(|e| TrainError::Observer(e.to_string()))
    }
}

/// Headline numbers of an evaluation, without per-example records.
fn eval_summary(report: &EvalReport) -> serde_json::Value {
    match report {
        EvalReport::Grounding {
            summary,
            mean_soft_f1,
        } => json!({
            "track": "grounding",
            "map_at_50": summary.map_at_50,
            "mean_soft_f1": mean_soft_f1,
            "mean_response_chars": summary.mean_response_length,
        }),
        EvalReport::Report(r) => {
            let mut v = serde_json::to_value(r).expect("plain struct serializes");
            v["track"] = json!("report");
            v
        }
    }
}

pub fn train(config: &Path, out: &Path, threads: Option<usize>) -> Result<(), CliError> {
    let text = fs::read_to_string(config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", config.display())))?;
    let mut cfg = TrainConfig::from_json(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        cfg.workers = n;
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }

    fs::create_dir_all(out.join("checkpoints"))
        .map_err(io_err(format!("cannot create {}", out.display())))?;
    let mut steplog = csv::Writer::from_path(out.join("steplog.csv"))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    steplog
        .write_record(StepLog::CSV_HEADER)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut files = RunFiles {
        out: out.to_path_buf(),
        steplog,
        evals: create(&out.join("evals.jsonl"))?,
    };

    let output = match train_with_observer(&cfg, &mut files) {
        Ok(o) => o,
        Err(TrainError::NonFinite {
            step,
            what,
            prompt_id,
            dump,
        }) => {
            let path = out.join("nonfinite_dump.json");
            fs::write(&path, &dump).map_err(io_err(format!("writing {}", path.display())))?;
            return Err(CliError::Numeric(format!(
                "non-finite {what} at step {step} (prompt {prompt_id}); dump in {}",
                path.display()
            )));
        }
        Err(TrainError::Config(e)) => return Err(CliError::Usage(e.to_string())),
        Err(e) => return Err(CliError::Numeric(e.to_string())),
    };

    let summary = json!({
        "track": cfg.track,
        "reward": cfg.reward,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "final_mean_reward": output.logs.last().map(|l| l.mean_reward),
        "smoothed_rewards": smoothed_rewards(&output.logs, 10),
        "final_eval": output.final_eval.as_ref().map(eval_summary),
    });
    let mut w = create(&out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| CliError::Io {
        context: "writing summary".into(),
        source: e.into(),
    })?;
    writeln!(w).map_err(io_err("writing summary"))?;
    println!(
        "{}",
        serde_json::to_string(&summary).expect("json value serializes")
    );
    Ok(())
}

pub fn score(input: &Path, track: Track, reward: RewardKind, out: &Path) -> Result<(), CliError> {
    let reward_fn = BuiltinReward::new(reward)
        .checked(track)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let lines = read_lines(input)?;
    if lines.is_empty() {
        return Err(CliError::Empty(format!(
            "{} has no records",
            input.display()
        )));
    }

    let mut jobs = Vec::new();
    let mut ids = Vec::with_capacity(lines.len());
    let mut errors = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        match parse_line(line, track) {
            Ok((record, reference)) => {
                jobs.push(RewardJob {
                    job_id: n as u64,
                    track,
                    response: record.response(),
                    reference,
                });
                ids.push(Some(record.id));
                errors.push(None);
            }
            Err(e) => {
                ids.push(salvage_id(line));
                errors.push(Some(e));
            }
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Empty(format!(
            "all {} lines of {} are malformed",
            lines.len(),
            input.display()
        )));
    }

    let pool = RewardPool::new(DEFAULT_WORKERS.min(jobs.len()), None)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results = pool
        .score_batch(&jobs, &reward_fn)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mut w = create(out)?;
    let mut scored = results.iter().peekable();
    let (mut sum_reward, mut sum_chars) = (0.0, 0usize);
    for (n, (id, error)) in ids.into_iter().zip(errors).enumerate() {
        let line = match error {
            Some(error) => {
                json!({ "id": id, "reward": null, "response_chars": null, "error": error })
            }
            None => {
                let r = scored.next().expect("one result per job");
                debug_assert_eq!(r.job_id, n as u64);
                sum_reward += r.reward;
                sum_chars += r.response_chars;
                json!({ "id": id, "reward": r.reward, "response_chars": r.response_chars })
            }
        };
        write_json_line(&mut w, &line)?;
    }
    let k = results.len() as f64;
    write_json_line(
        &mut w,
        &json!({
            "footer": true,
            "records": lines.len(),
            "scored": results.len(),
            "malformed": lines.len() - results.len(),
            "mean_reward": sum_reward / k,
            "mean_response_chars": sum_chars as f64 / k,
        }),
    )?;
    w.flush().map_err(io_err("writing output"))
}

pub fn eval(input: &Path, iou: f64, out: &Path) -> Result<(), CliError> {
    if !(iou > 0.0 && iou < 1.0) {
        return Err(CliError::Usage(format!(
            "--iou must lie strictly between 0 and 1, got {iou}"
        )));
    }
    let lines = read_lines(input)?;
    let mut corpus = Vec::with_capacity(lines.len());
    let mut malformed = 0usize;
    for (n, line) in lines.iter().enumerate() {
        match parse_line(line, Track::Grounding) {
            Ok((record, Reference::Boxes(ref_boxes))) => {
                let response = record.response();
                let pred_boxes = response
                    .final_answer
                    .as_deref()
                    .map(|a| parse_boxes(a).boxes)
                    .unwrap_or_default();
                corpus.push(EvalInput {
                    example_id: record.id,
                    pred_boxes,
                    ref_boxes,
                    response_chars: response.answer_chars(),
                });
            }
            Ok(_) => unreachable!("grounding references are boxes"),
            Err(e) => {
                malformed += 1;
                eprintln!("line {}: skipped: {e}", n + 1);
            }
        }
    }
    if corpus.is_empty() {
        return Err(CliError::Empty(format!(
            "{} has no grounding records",
            input.display()
        )));
    }
    let summary = map_at_iou(&corpus, iou).map_err(|e| CliError::Empty(e.to_string()))?;

    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Usage(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::Usage(e.to_string());
    w.write_record(["id", "tp", "fp", "fn", "precision", "n_pred", "n_ref"])
        .map_err(csv_err)?;
    for r in &summary.records {
        w.write_record([
            r.example_id.clone(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            r.precision_at_iou.to_string(),
            r.pred_boxes.len().to_string(),
            r.ref_boxes.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err("writing output"))?;
    println!(
        "{}",
        json!({
            "map_at_50": summary.map_at_50,
            "iou": iou,
            "examples": corpus.len(),
            "malformed": malformed,
        })
    );
    Ok(())
}

pub fn gen(kind: Track, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let tasks = gen_tasks(n, kind, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut w = create(out)?;
    for t in &tasks {
        let line = serde_json::to_string(&CorpusRecord::from_task(t)).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err("writing output"))?;
    }
    w.flush().map_err(io_err("writing output"))
}
