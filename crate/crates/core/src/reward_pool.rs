//! Concurrent reward scoring: a fixed set of workers draining a bounded shared
//! queue, with results re-keyed by job id so the output never depends on the
//! worker count or the scheduling order.
//!
//! [`ExternalScorer`] forwards jobs to a child process as JSON lines instead,
//! for scorers that live outside this process.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxformat::ModelResponse;
use crate::rewards::{Reference, RewardFunction, Track};

pub const DEFAULT_WORKERS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardJob {
    pub job_id: u64,
    pub track: Track,
    pub response: ModelResponse,
    pub reference: Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardResult {
    pub job_id: u64,
    pub reward: f64,
    /// Characters in the final answer.
    pub response_chars: usize,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("workers must be >= 1")]
    NoWorkers,
    #[error("duplicate job_id {0}; batch rejected")]
    DuplicateJob(u64),
    #[error("job {job_id} is for the {job} track but the reward scores {reward}")]
    TrackMismatch {
        job_id: u64,
        job: Track,
        reward: Track,
    },
    #[error("a reward worker panicked")]
    WorkerPanicked,
    #[error("external scorer: {0}")]
    External(String),
}

impl From<std::io::Error> for PoolError {
    fn from(e: std::io::Error) -> Self {
        PoolError::External(e.to_string())
    }
}

/// A reusable scoring pool. Workers live only for the duration of one batch.
#[derive(Debug)]
pub struct RewardPool {
    workers: usize,
    simulated_latency: Option<Duration>,
    live: Arc<AtomicUsize>,
}

struct LiveGuard<'a>(&'a AtomicUsize);

impl<'a> LiveGuard<'a> {
    fn enter(counter: &'a AtomicUsize) -> Self {
        counter.fetch_add(1, Ordering::SeqCst);
        Self(counter)
    }
}

impl Drop for LiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl RewardPool {
    pub fn new(workers: usize, simulated_latency_ms: Option<u64>) -> Result<Self, PoolError> {
        if workers == 0 {
            return Err(PoolError::NoWorkers);
        }
        Ok(Self {
            workers,
            simulated_latency: simulated_latency_ms.map(Duration::from_millis),
            live: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Workers currently running. Zero whenever no batch is in flight.
    pub fn live_workers(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    fn score_one(&self, job: &RewardJob, reward: &dyn RewardFunction) -> RewardResult {
        let start = Instant::now();
        if let Some(d) = self.simulated_latency {
            thread::sleep(d);
        }
        let value = reward.score(&job.response, &job.reference);
        RewardResult {
            job_id: job.job_id,
            reward: value,
            response_chars: job.response.answer_chars(),
            latency_ms: start.elapsed().as_millis() as u64,
        }
    }

    /// Scores every job exactly once; results are sorted by `job_id`.
    pub fn score_batch(
        &self,
        jobs: &[RewardJob],
        reward: &dyn RewardFunction,
    ) -> Result<Vec<RewardResult>, PoolError> {
        validate_jobs(jobs, reward.track())?;
        if jobs.is_empty() {
            return Ok(Vec::new());
        }
        let workers = self.workers.min(jobs.len());
        let mut results = if workers == 1 {
            let _guard = LiveGuard::enter(&self.live);
            jobs.iter().map(|j| self.score_one(j, reward)).collect()
        } else {
            self.score_parallel(jobs, reward, workers)?
        };
        results.sort_by_key(|r: &RewardResult| r.job_id);
        Ok(results)
    }

    fn score_parallel(
        &self,
        jobs: &[RewardJob],
        reward: &dyn RewardFunction,
        workers: usize,
    ) -> Result<Vec<RewardResult>, PoolError> {
        let (job_tx, job_rx) = bounded::<&RewardJob>(2 * workers);
        let (res_tx, res_rx) = crossbeam_channel::unbounded();
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    let job_rx = job_rx.clone();
                    let res_tx = res_tx.clone();
                    let live = &self.live;
                    s.spawn(move || {
                        let _guard = LiveGuard::enter(live);
                        for job in job_rx {
                            if res_tx.send(self.score_one(job, reward)).is_err() {
                                break;
                            }
                        }
                    })
                })
                .collect();
            drop(res_tx);
            for job in jobs {
                // blocks while the queue is full
                if job_tx.send(job).is_err() {
                    break;
                }
            }
            drop(job_tx);
            let results: Vec<RewardResult> = res_rx.iter().collect();
            let panicked = handles.into_iter().map(|h| h.join()).any(|r| r.is_err());
            if panicked || results.len() != jobs.len() {
                return Err(PoolError::WorkerPanicked);
            }
            Ok(results)
        })
    }
}

fn validate_jobs(jobs: &[RewardJob], track: Track) -> Result<(), PoolError> {
    let mut seen = HashSet::with_capacity(jobs.len());
    for job in jobs {
        if !seen.insert(job.job_id) {
            return Err(PoolError::DuplicateJob(job.job_id));
        }
        if job.track != track || job.reference.track() != track {
            return Err(PoolError::TrackMismatch {
                job_id: job.job_id,
                job: job.track,
                reward: track,
            });
        }
    }
    Ok(())
}

/// One-shot convenience wrapper around [`RewardPool`].
pub fn score_batch(
    jobs: &[RewardJob],
    workers: usize,
    simulated_latency_ms: Option<u64>,
    reward: &dyn RewardFunction,
) -> Result<Vec<RewardResult>, PoolError> {
    RewardPool::new(workers, simulated_latency_ms)?.score_batch(jobs, reward)
}

#[derive(Deserialize)]
struct ExternalReply {
    job_id: u64,
    reward: f64,
}

/// Scores jobs through a child process speaking JSON lines: one
/// `{job_id, track, response, reference}` object per job on its stdin, one
/// `{job_id, reward}` object per job back on its stdout, in any order.
pub struct ExternalScorer {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ExternalScorer {
    pub fn spawn(program: &str, args: &[&str]) -> Result<Self, PoolError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
        })
    }

    pub fn score_batch(&mut self, jobs: &[RewardJob]) -> Result<Vec<RewardResult>, PoolError> {
        let mut seen = HashSet::with_capacity(jobs.len());
        for job in jobs {
            if !seen.insert(job.job_id) {
                return Err(PoolError::DuplicateJob(job.job_id));
            }
        }
        let chars: HashMap<u64, usize> = jobs
            .iter()
            .map(|j| (j.job_id, j.response.answer_chars()))
            .collect();
        let start = Instant::now();
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| PoolError::External("scorer input closed".into()))?;
        let stdout = &mut self.stdout;
        let (written, replies) = thread::scope(|s| {
            let writer = s.spawn(move || -> std::io::Result<()> {
                for job in jobs {
                    let line = serde_json::to_string(job).map_err(std::io::Error::other)?;
                    writeln!(stdin, "{line}")?;
                }
                stdin.flush()
            });
            let mut replies = Vec::with_capacity(jobs.len());
            let mut line = String::new();
            while replies.len() < jobs.len() {
                line.clear();
                match stdout.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) if line.trim().is_empty() => continue,
                    Ok(_) => {
                        replies.push(serde_json::from_str::<ExternalReply>(line.trim()).map_err(
                            |e| PoolError::External(format!("bad reply {:?}: {e}", line.trim())),
                        ))
                    }
                    Err(e) => {
                        replies.push(Err(e.into()));
                        break;
                    }
                }
            }
            (writer.join(), replies)
        });
        written.map_err(|_| PoolError::WorkerPanicked)??;
        let latency_ms = start.elapsed().as_millis() as u64;
        let mut results = Vec::with_capacity(jobs.len());
        let mut answered = HashSet::with_capacity(jobs.len());
        for reply in replies {
            let reply = reply?;
            let Some(&response_chars) = chars.get(&reply.job_id) else {
                return Err(PoolError::External(format!(
                    "reply for unknown job {}",
                    reply.job_id
                )));
            };
            if !answered.insert(reply.job_id) {
                return Err(PoolError::External(format!(
                    "job {} answered twice",
                    reply.job_id
                )));
            }
            results.push(RewardResult {
                job_id: reply.job_id,
                reward: reply.reward,
                response_chars,
                latency_ms,
            });
        }
        if results.len() != jobs.len() {
            return Err(PoolError::External(format!(
                "{} of {} jobs answered",
                results.len(),
                jobs.len()
            )));
        }
        results.sort_by_key(|r| r.job_id);
        Ok(results)
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxformat::extract_final_answer;
    use crate::rewards::{BuiltinReward, RewardKind, TokenSequence};

    fn text_jobs(n: u64) -> Vec<RewardJob> {
        let words = ["lungs", "clear", "heart", "enlarged", "mild", "edema"];
        (0..n)
            .map(|i| {
                let k = (i as usize % 5) + 1;
                RewardJob {
                    job_id: 1000 - i,
                    track: Track::Report,
                    response: extract_final_answer(&words[..k].join(" "), false),
                    reference: Reference::Text(TokenSequence::from_text("lungs clear heart")),
                }
            })
            .collect()
    }

    #[test]
    fn results_sorted_and_complete() {
        let jobs = text_jobs(20);
        let r = score_batch(&jobs, 4, None, &BuiltinReward::new(RewardKind::Gleu)).unwrap();
        assert_eq!(r.len(), 20);
        assert!(r.windows(2).all(|w| w[0].job_id < w[1].job_id));
        assert_eq!(r[0].job_id, 981);
    }

    #[test]
    fn worker_count_does_not_change_rewards() {
        let jobs = text_jobs(50);
        let reward = BuiltinReward::new(RewardKind::RougeL);
        let one = score_batch(&jobs, 1, None, &reward).unwrap();
        let eight = score_batch(&jobs, 8, None, &reward).unwrap();
        let a: Vec<_> = one
            .iter()
            .map(|r| (r.job_id, r.reward.to_bits(), r.response_chars))
            .collect();
        let b: Vec<_> = eight
            .iter()
            .map(|r| (r.job_id, r.reward.to_bits(), r.response_chars))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_invalid_batches() {
        let reward = BuiltinReward::new(RewardKind::Gleu);
        assert!(score_batch(&[], 3, None, &reward).unwrap().is_empty());
        assert!(matches!(
            score_batch(&[], 0, None, &reward),
            Err(PoolError::NoWorkers)
        ));
        let mut jobs = text_jobs(3);
        jobs[2].job_id = jobs[0].job_id;
        assert!(matches!(
            score_batch(&jobs, 2, None, &reward),
            Err(PoolError::DuplicateJob(1000))
        ));
        let jobs = text_jobs(2);
        let soft_f1 = BuiltinReward::new(RewardKind::SoftF1);
        assert!(matches!(
            score_batch(&jobs, 2, None, &soft_f1),
            Err(PoolError::TrackMismatch { .. })
        ));
    }

    #[test]
    fn no_live_workers_after_a_batch() {
        let pool = RewardPool::new(6, Some(1)).unwrap();
        pool.score_batch(&text_jobs(30), &BuiltinReward::new(RewardKind::Gleu))
            .unwrap();
        assert_eq!(pool.live_workers(), 0);
    }
}
