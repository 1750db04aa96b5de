use std::time::{Duration, Instant};

use radrl::boxformat::extract_final_answer;
use radrl::policy::{gen_tasks, greedy_rollout, PolicyParams};
use radrl::reward_pool::{score_batch, ExternalScorer, PoolError, RewardJob, RewardPool};
use radrl::rewards::{BuiltinReward, RewardKind, Track};

fn jobs(n: usize, track: Track) -> Vec<RewardJob> {
    let params = PolicyParams::uniform(track, 0.3);
    gen_tasks(n, track, 21)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            // alternate between the oracle answer and the untrained greedy answer
            let response = if i % 2 == 0 {
                extract_final_answer(&t.oracle_answer(), false)
            } else {
                greedy_rollout(&params, &t, false).response
            };
            RewardJob {
                job_id: (n - i) as u64 * 3,
                track,
                response,
                reference: t.ground_truth,
            }
        })
        .collect()
}

#[test]
fn rewards_do_not_depend_on_worker_count() {
    for (track, kind) in [
        (Track::Grounding, RewardKind::SoftF1),
        (Track::Report, RewardKind::Gleu),
    ] {
        let batch = jobs(200, track);
        let reward = BuiltinReward::new(kind);
        let base: Vec<(u64, f64)> = score_batch(&batch, 1, None, &reward)
            .unwrap()
            .iter()
            .map(|r| (r.job_id, r.reward))
            .collect();
        assert!(base.windows(2).all(|w| w[0].0 < w[1].0));
        for workers in [4, 8, 32] {
            let got: Vec<(u64, f64)> = score_batch(&batch, workers, None, &reward)
                .unwrap()
                .iter()
                .map(|r| (r.job_id, r.reward))
                .collect();
            assert_eq!(got, base);
        }
    }
}

#[test]
fn simulated_latency_is_overlapped() {
    let batch = jobs(64, Track::Grounding);
    let reward = BuiltinReward::new(RewardKind::SoftF1);
    let pool = RewardPool::new(16, Some(20)).unwrap();
    let start = Instant::now();
    let out = pool.score_batch(&batch, &reward).unwrap();
    // sequential would take 64 × 20 ms
    assert!(start.elapsed() < Duration::from_millis(64 * 20 / 4));
    assert_eq!(out.len(), 64);
    assert!(out.iter().all(|r| r.latency_ms >= 20));
}

#[test]
fn external_scorer_round_trip() {
    let script = r#"while IFS= read -r line; do
        id=$(printf '%s' "$line" | sed 's/^{"job_id":\([0-9]*\).*/\1/')
        printf '{"job_id":%s,"reward":%s.5}\n' "$id" "$id"
    done"#;
    let mut scorer = ExternalScorer::spawn("sh", &["-c", script]).unwrap();
    let batch = jobs(25, Track::Report);
    let out = scorer.score_batch(&batch).unwrap();
    assert_eq!(out.len(), 25);
    assert!(out.windows(2).all(|w| w[0].job_id < w[1].job_id));
    for r in &out {
        assert_eq!(r.reward, r.job_id as f64 + 0.5);
        let job = batch.iter().find(|j| j.job_id == r.job_id).unwrap();
        assert_eq!(r.response_chars, job.response.answer_chars());
    }
    // the same child serves a second batch
    assert_eq!(scorer.score_batch(&batch[..3]).unwrap().len(), 3);
}

#[test]
fn external_scorer_reports_missing_replies() {
    let mut scorer = ExternalScorer::spawn("sh", &["-c", "read -r line; exit 0"]).unwrap();
    // the child exits after one line: either the write fails or replies are missing
    let err = scorer.score_batch(&jobs(4, Track::Grounding)).unwrap_err();
    assert!(matches!(err, PoolError::External(_)), "{err:?}");
}
