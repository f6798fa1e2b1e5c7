use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use stl_core::orchestrator::{RunManifest, RunStatus, StopReason};

const BIN: &str = env!("CARGO_BIN_EXE_stl");

fn stl(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(out: Output) -> String {
    assert!(!out.status.success(), "expected failure: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr).unwrap()
}

/// Data, images and a 3-iteration STL config against the hashing mock.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir_all(d.join("data/img")).unwrap();
    let domains = ["commonsense", "natural-science"];
    for (split, n) in [("train", 12), ("eval", 10)] {
        let lines: String = (0..n)
            .map(|i| {
                json!({
                    "id": format!("{split}{i:02}"),
                    "image": format!("img/{i}.png"),
                    "question": format!("Which animal is in picture {i} of the {split} split?"),
                    "choices": ["cat", "dog", "bird", "fish"],
                    "answer_index": i % 4,
                    "domain": domains[i % 2],
                })
                .to_string()
                    + "\n"
            })
            .collect();
        fs::write(d.join(format!("data/{split}.jsonl")), lines).unwrap();
    }
    for i in 0..12u8 {
        fs::write(d.join(format!("data/img/{i}.png")), [0x89, b'P', b'N', b'G', i]).unwrap();
    }
    fs::write(
        d.join("run.toml"),
        format!(
            r#"variant = "STL"
train_split = "data/train.jsonl"
eval_split = "data/eval.jsonl"
output_dir = "out"
trainer_command = "'{BIN}' mock-trainer {{trainset}} {{base_model}} {{output_model}}"
max_iterations = 3

[endpoint]
model_id = "base"
base_url = "mock:hash"
"#
        ),
    )
    .unwrap();
    dir
}

fn manifest(d: &Path) -> RunManifest {
    RunManifest::load(&d.join("out/manifest.jsonl")).unwrap()
}

#[test]
fn run_stop_resume_then_replay_elsewhere() {
    let a = workspace();
    let transcript = a.path().join("transcript.jsonl");
    let t = transcript.to_str().unwrap();
    let out = ok(stl(a.path(), &["run", "--config", "run.toml", "--record", t, "--stop-after", "1"]));
    assert!(out.contains("stopped early"), "{out}");
    assert_eq!(manifest(a.path()).iterations().len(), 1);
    let err_text = err(stl(a.path(), &["run", "--config", "run.toml"]));
    assert!(err_text.contains("use resume"), "{err_text}");
    ok(stl(a.path(), &["resume", "--manifest", "out/manifest.jsonl", "--record", t]));
    let ma = manifest(a.path());
    assert_eq!(ma.iterations().len(), 3);
    assert_eq!(ma.status(), RunStatus::Converged { reason: StopReason::MaxIterations });

    // Same config elsewhere, answered only from the transcript.
    let b = workspace();
    ok(stl(b.path(), &["run", "--config", "run.toml", "--replay", t, "--parallelism", "4"]));
    assert_eq!(manifest(b.path()).comparison_digest(), ma.comparison_digest());

    // An unreachable server proves nothing goes over the network.
    let c = workspace();
    ok(stl(c.path(), &["run", "--config", "run.toml", "--replay", t, "--endpoint", "http://127.0.0.1:9/v1"]));
    let evals = |m: &RunManifest| -> Vec<f64> {
        m.iterations().iter().map(|i| i.eval.as_ref().unwrap().macro_average).collect()
    };
    assert_eq!(evals(&manifest(c.path())), evals(&ma));
}

#[test]
fn replay_miss_fails_the_run() {
    let d = workspace();
    fs::write(d.path().join("empty.jsonl"), "").unwrap();
    let e = err(stl(d.path(), &["run", "--config", "run.toml", "--replay", "empty.jsonl"]));
    assert!(e.contains("replay miss"), "{e}");
    assert!(matches!(manifest(d.path()).status(), RunStatus::Failed { iteration: 1, .. }));
}

#[test]
fn resume_rejects_an_edited_config() {
    let d = workspace();
    ok(stl(d.path(), &["run", "--config", "run.toml", "--stop-after", "1"]));
    let toml = fs::read_to_string(d.path().join("run.toml")).unwrap();
    fs::write(d.path().join("run.toml"), toml.replace("max_iterations = 3", "max_iterations = 4")).unwrap();
    let e = err(stl(d.path(), &["resume", "--manifest", "out/manifest.jsonl"]));
    assert!(e.contains("digest"), "{e}");
}

#[test]
fn eval_pool_and_report() {
    let d = workspace();
    let p = d.path();
    for (name, url) in [("letter-a", "mock:letter=A"), ("hashed", "mock:hash")] {
        let out = ok(stl(
            p,
            &["eval", "--model", name, "--split", "data/eval.jsonl", "--endpoint", url, "--out", name],
        ));
        assert!(out.starts_with("Method"), "{out}");
        assert!(p.join(name).join("eval_samples.jsonl").exists());
    }
    // (A) is gold for items 0, 4 and 8, all even, so all commonsense: 3 of 5 there, 0 of 5 in
    // natural science.
    let report: Value = serde_json::from_str(&fs::read_to_string(p.join("letter-a/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["macro_average"], 30.0);

    ok(stl(
        p,
        &[
            "annotate-pool",
            "--split",
            "data/eval.jsonl",
            "--a",
            "letter-a=letter-a/eval_samples.jsonl",
            "--b",
            "hashed=hashed/eval_samples.jsonl",
            "--per-domain",
            "3",
            "--seed",
            "9",
            "--include-incorrect",
            "--out",
            "pool.json",
        ],
    ));
    let pool: Value = serde_json::from_str(&fs::read_to_string(p.join("pool.json")).unwrap()).unwrap();
    assert_eq!(pool["tasks"].as_array().unwrap().len(), 6);

    // Three annotators all prefer the left rationale.
    let mut log = String::new();
    for t in pool["tasks"].as_array().unwrap() {
        for ann in ["x", "y", "z"] {
            log += &json!({
                "task_id": t["task_id"], "sample_id": t["sample_id"], "domain": t["domain"],
                "annotator_id": ann, "choice": "left", "resolved_method": t["left_method"],
                "timestamp": "2026-01-01T00:00:00Z",
            })
            .to_string();
            log.push('\n');
        }
    }
    fs::write(p.join("judgments.jsonl"), log).unwrap();
    let out = ok(stl(
        p,
        &[
            "report",
            "--eval",
            "letter-a=letter-a/eval_report.json",
            "--judgments",
            "judgments.jsonl",
            "--pool",
            "pool.json",
            "--format",
            "delimited",
        ],
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "Method,Commonsense,Natural-Science,Average");
    assert_eq!(lines[1], "letter-a,60.00,0.00,30.00");
    assert!(lines.contains(&"Domain,letter-a,hashed,Total"), "{out}");
}

#[test]
fn parse_reports_each_response() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(
        p.join("one.txt"),
        "Sure.\n###CAPTION: A red bus.\n###REASONING: Buses carry people.\n###CONCLUSION: (B)",
    )
    .unwrap();
    let out: Value = serde_json::from_str(&ok(stl(p, &["parse", "one.txt", "--mode", "strict"]))).unwrap();
    assert_eq!(out["ok"], true);
    assert_eq!(out["parsed"]["conclusion_raw"], "(B)");

    let lines = [json!("**caption:** x\n**reasoning:** y\n**conclusion:** z"), json!({"raw_text": "nothing"})];
    fs::write(p.join("many.jsonl"), lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();
    let strict: Vec<Value> = ok(stl(p, &["parse", "many.jsonl", "--mode", "strict"]))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let lenient: Vec<Value> = ok(stl(p, &["parse", "many.jsonl"]))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!((strict[0]["ok"].clone(), strict[1]["ok"].clone()), (json!(false), json!(false)));
    assert_eq!((lenient[0]["ok"].clone(), lenient[1]["ok"].clone()), (json!(true), json!(false)));
    assert_eq!(lenient[1]["index"], 1);
}

#[test]
fn validate_and_mock_trainer() {
    let d = workspace();
    let p = d.path();
    ok(stl(p, &["validate", "data/train.jsonl"]));
    fs::remove_file(p.join("data/img/3.png")).unwrap();
    let e = err(stl(p, &["validate", "data/train.jsonl"]));
    assert!(e.contains("train03: missing image"), "{e}");

    fs::write(p.join("ts.jsonl"), "{\"example_id\":\"e1\"}\n").unwrap();
    ok(stl(p, &["mock-trainer", "ts.jsonl", "base", "model.txt"]));
    let id = fs::read_to_string(p.join("model.txt")).unwrap();
    assert!(id.starts_with("base-ft-") && id.ends_with('\n'), "{id}");
    fs::write(p.join("empty.jsonl"), "").unwrap();
    assert!(err(stl(p, &["mock-trainer", "empty.jsonl", "base", "m2.txt"])).contains("no examples"));
}

fn http(port: u16, request: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.write_all(request.as_bytes()).ok()?;
    let mut out = Vec::new();
    s.read_to_end(&mut out).ok()?;
    Some(String::from_utf8_lossy(&out).into_owned())
}

#[test]
fn annotate_serve_answers_over_http() {
    let d = workspace();
    let p = d.path();
    for (name, url) in [("a", "mock:letter=A"), ("b", "mock:letter=B")] {
        ok(stl(p, &["eval", "--model", name, "--split", "data/eval.jsonl", "--endpoint", url, "--out", name]));
    }
    ok(stl(
        p,
        &[
            "annotate-pool", "--split", "data/eval.jsonl", "--a", "m-one=a/eval_samples.jsonl", "--b",
            "m-two=b/eval_samples.jsonl", "--per-domain", "2", "--include-incorrect", "--out", "pool.json",
        ],
    ));
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(BIN)
        .args(["annotate-serve", "--pool", "pool.json", "--port", &port.to_string(), "--annotators", "ann1,ann2"])
        .args(["--image-root", "data"])
        .current_dir(p)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let get = "GET /api/tasks/next?annotator=ann1 HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n";
    let deadline = Instant::now() + Duration::from_secs(20);
    let resp = loop {
        if let Some(r) = http(port, get) {
            break r;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        thread::sleep(Duration::from_millis(50));
    };
    let body = r#"{"task_id":"t00001","annotator_id":"ann2","choice":"right"}"#;
    let post = format!(
        "POST /api/judgments HTTP/1.1\r\nhost: x\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    let created = http(port, &post).unwrap();
    let image = http(port, "GET /api/tasks/t00001/image HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").unwrap();
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"task_id\":\"t00001\""), "{resp}");
    assert!(!resp.contains("m-one") && !resp.contains("m-two"), "{resp}");
    assert!(created.starts_with("HTTP/1.1 201"), "{created}");
    assert!(image.starts_with("HTTP/1.1 200") && image.contains("image/png"), "{image}");
    let log = fs::read_to_string(p.join("judgments.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}
