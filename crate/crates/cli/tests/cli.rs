use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use radrl::geometry::BoundingBox;
use radrl::policy::VocabBox;
use serde_json::Value;
use tempfile::TempDir;

fn radrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

fn json_lines(p: &str) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_lines(dir: &TempDir, name: &str, lines: &[Value]) -> String {
    let p = path(dir, name);
    let text: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&p, text).unwrap();
    p
}

fn report(id: &str, prediction: &str, reference: &str, thinking: bool) -> Value {
    serde_json::json!({
        "id": id, "prediction": prediction, "reference_text": reference, "is_thinking": thinking
    })
}

fn grounding(id: &str, prediction: &str, boxes: &[[f64; 4]]) -> Value {
    serde_json::json!({
        "id": id, "prediction": prediction, "reference_boxes": boxes, "is_thinking": false
    })
}

fn small_config(dir: &TempDir, extra: &str) -> String {
    let p = path(dir, "config.json");
    fs::write(
        &p,
        format!(r#"{{"steps": 4, "prompts_per_step": 8, "ppo_mini_batch": 4, "eval_tasks": 20, "save_freq": 2, "test_freq": 2{extra}}}"#),
    )
    .unwrap();
    p
}

#[test]
fn train_writes_one_row_per_step_and_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir, "");
    let out = path(&dir, "run");
    let o = radrl(&["train", "--config", &cfg, "--out", &out, "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let mut rdr = csv::Reader::from_path(Path::new(&out).join("steplog.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(
        header,
        [
            "step",
            "mean_reward",
            "mean_response_length",
            "mean_kl",
            "clip_fraction",
            "loss",
            "wall_ms"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[0][3], "0");

    for step in [2, 4] {
        assert!(Path::new(&out)
            .join(format!("checkpoints/step_{step:06}.bin"))
            .is_file());
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["final_mean_reward"].is_f64());
    assert!(summary["final_eval"]["map_at_50"].is_f64());
    assert_eq!(json_lines(&format!("{out}/evals.jsonl")).len(), 2);
}

#[test]
fn single_thread_training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(
        &dir,
        r#", "track": "report", "reward": "gleu", "thinking": true"#,
    );
    let (a, b) = (path(&dir, "a"), path(&dir, "b"));
    for out in [&a, &b] {
        assert_eq!(
            code(&radrl(&[
                "train",
                "--config",
                &cfg,
                "--out",
                out,
                "--threads",
                "1"
            ])),
            0
        );
    }
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(format!("{p}/steplog.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(
        fs::read(format!("{a}/checkpoints/step_000004.bin")).unwrap(),
        fs::read(format!("{b}/checkpoints/step_000004.bin")).unwrap()
    );
}

#[test]
fn train_config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "run");
    let o = radrl(&[
        "train",
        "--config",
        &path(&dir, "missing.json"),
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 2);

    let cfg = small_config(&dir, r#", "reward": "gleu""#);
    let o = radrl(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("reward/track mismatch"));

    let cfg = small_config(&dir, r#", "clip_high": 1.5"#);
    let o = radrl(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("clip_high"));

    let o = radrl(&["train", "--out", &out]);
    assert_eq!(code(&o), 2);
}

#[test]
fn score_grounding_and_penalties() {
    let dir = TempDir::new().unwrap();
    let boxes = [[0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.9, 0.9]];
    let input = write_lines(
        &dir,
        "g.jsonl",
        &[
            grounding(
                "exact",
                "[0.10, 0.20, 0.30, 0.40] and [0.50, 0.50, 0.90, 0.90]",
                &boxes,
            ),
            grounding("none", "no findings", &boxes),
        ],
    );
    let out = path(&dir, "g.out");
    let o = radrl(&[
        "score",
        "--in",
        &input,
        "--track",
        "grounding",
        "--reward",
        "soft_f1",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0);
    let lines = json_lines(&out);
    assert_eq!(lines[0]["reward"], 1.0);
    assert_eq!(lines[1]["reward"], 0.0);
    assert_eq!(lines[2]["footer"], true);
    assert_eq!(lines[2]["mean_reward"], 0.5);

    let input = write_lines(
        &dir,
        "r.jsonl",
        &[
            report("omitted", "<think>still thinking a b c", "a b c", true),
            report("closed", "<think>ok</think>a b c", "a b c", true),
        ],
    );
    let o = radrl(&[
        "score", "--in", &input, "--track", "report", "--reward", "gleu", "--out", &out,
    ]);
    assert_eq!(code(&o), 0);
    let lines = json_lines(&out);
    assert_eq!(lines[0]["reward"], -3.0);
    assert_eq!(lines[0]["response_chars"], 0);
    assert_eq!(lines[1]["reward"], 1.0);
}

#[test]
fn score_footer_is_the_mean_of_worked_examples() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "out");
    // GLEU at max order 4: 1, 3/6, min(1/1, 1/10)
    let input = write_lines(
        &dir,
        "gleu.jsonl",
        &[
            report("same", "a b c", "a b c", false),
            report("one-off", "a b c", "a b d", false),
            report("short", "a", "a b c d", false),
        ],
    );
    assert_eq!(
        code(&radrl(&[
            "score", "--in", &input, "--track", "report", "--reward", "gleu", "--out", &out
        ])),
        0
    );
    let lines = json_lines(&out);
    let rewards: Vec<f64> = lines[..3]
        .iter()
        .map(|l| l["reward"].as_f64().unwrap())
        .collect();
    for (got, want) in rewards.iter().zip([1.0, 0.5, 0.1]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    let footer = lines[3]["mean_reward"].as_f64().unwrap();
    assert!((footer - 1.6 / 3.0).abs() < 1e-12);
    assert!((lines[3]["mean_response_chars"].as_f64().unwrap() - 11.0 / 3.0).abs() < 1e-12);

    // ROUGE-L: 1, F1(2/3, 1) = 0.8, 0
    let input = write_lines(
        &dir,
        "rouge.jsonl",
        &[
            report("same", "a b c", "a b c", false),
            report("lcs", "a b c", "a c", false),
            report("disjoint", "x y", "a b", false),
        ],
    );
    assert_eq!(
        code(&radrl(&[
            "score", "--in", &input, "--track", "report", "--reward", "rouge_l", "--out", &out
        ])),
        0
    );
    let footer = json_lines(&out)[3]["mean_reward"].as_f64().unwrap();
    assert!((footer - 0.6).abs() < 1e-12);
}

#[test]
fn score_malformed_lines() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "out");
    let input = path(&dir, "mixed.jsonl");
    fs::write(
        &input,
        format!(
            "{}\nnot json\n{}\n",
            report("ok", "a b", "a b", false),
            serde_json::json!({"id": "wrong-track", "prediction": "x", "reference_boxes": [[0.0, 0.0, 1.0, 1.0]]})
        ),
    )
    .unwrap();
    assert_eq!(
        code(&radrl(&[
            "score", "--in", &input, "--track", "report", "--reward", "gleu", "--out", &out
        ])),
        0
    );
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["reward"], 1.0);
    assert!(lines[1]["reward"].is_null());
    assert_eq!(lines[2]["id"], "wrong-track");
    assert!(lines[2]["reward"].is_null());
    assert_eq!(lines[3]["malformed"], 2);
    assert_eq!(lines[3]["mean_reward"], 1.0);

    fs::write(&input, "not json\n{}\n").unwrap();
    assert_eq!(
        code(&radrl(&[
            "score", "--in", &input, "--track", "report", "--reward", "gleu", "--out", &out
        ])),
        4
    );

    let o = radrl(&[
        "score",
        "--in",
        &input,
        "--track",
        "grounding",
        "--reward",
        "gleu",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("reward/track mismatch"));
}

fn eval_map(input: &str, out: &str, iou: &str) -> f64 {
    let o = radrl(&["eval", "--in", input, "--iou", iou, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    v["map_at_50"].as_f64().unwrap()
}

#[test]
fn eval_corpora() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "eval.csv");
    let gen = path(&dir, "gen.jsonl");
    assert_eq!(
        code(&radrl(&[
            "gen",
            "--kind",
            "grounding",
            "--n",
            "20",
            "--seed",
            "4",
            "--out",
            &gen
        ])),
        0
    );
    assert_eq!(eval_map(&gen, &out, "0.5"), 1.0);
    let rows = csv::Reader::from_path(&out).unwrap().records().count();
    assert_eq!(rows, 20);

    let b = [0.0, 0.0, 0.5, 0.5];
    let two = write_lines(
        &dir,
        "two.jsonl",
        &[
            grounding("hit", "[0.00, 0.00, 0.50, 0.50]", &[b]),
            grounding("miss", "[0.60, 0.60, 0.90, 0.90]", &[b]),
        ],
    );
    assert_eq!(eval_map(&two, &out, "0.5"), 0.5);

    // IoU of the prediction with its reference is 0.81
    let loose = write_lines(
        &dir,
        "loose.jsonl",
        &[grounding("near", "[0.00, 0.00, 0.45, 0.50]", &[b])],
    );
    assert_eq!(eval_map(&loose, &out, "0.5"), 1.0);
    assert_eq!(eval_map(&loose, &out, "0.99"), 0.0);

    let empty = path(&dir, "empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&radrl(&["eval", "--in", &empty, "--out", &out])), 4);
}

#[test]
fn gen_is_deterministic_and_well_formed() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.jsonl"), path(&dir, "b.jsonl"));
    for p in [&a, &b] {
        assert_eq!(
            code(&radrl(&[
                "gen",
                "--kind",
                "grounding",
                "--n",
                "10",
                "--seed",
                "1",
                "--out",
                p
            ])),
            0
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let r = path(&dir, "r.jsonl");
    assert_eq!(
        code(&radrl(&[
            "gen", "--kind", "report", "--n", "5", "--seed", "2", "--out", &r
        ])),
        0
    );
    let lines = json_lines(&r);
    assert_eq!(lines.len(), 5);
    assert!(lines
        .iter()
        .all(|l| l["reference_text"].is_string() && l.get("reference_boxes").is_none()));

    let g = path(&dir, "g.jsonl");
    assert_eq!(
        code(&radrl(&[
            "gen",
            "--kind",
            "grounding",
            "--n",
            "3",
            "--seed",
            "9",
            "--out",
            &g
        ])),
        0
    );
    for line in json_lines(&g) {
        let boxes = line["reference_boxes"].as_array().unwrap();
        assert!((1..=4).contains(&boxes.len()));
        for bx in boxes {
            let c: Vec<f64> = bx
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            let parsed = BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap();
            assert!(VocabBox::encode(&parsed).is_some());
        }
    }

    assert_eq!(
        code(&radrl(&[
            "gen", "--kind", "report", "--n", "0", "--seed", "1", "--out", &r
        ])),
        2
    );
}
