use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdoh_core::extraction::{render_completion, AnswerSet, Provenance};
use sdoh_core::questionnaire::builtin_questionnaire;
use serde_json::Value;

fn sdoh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdoh")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sdoh(args);
    assert!(
        out.status.success(),
        "sdoh {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// synth -> mock extract -> encode under `root`.
fn pipeline(root: &Path) -> (PathBuf, PathBuf) {
    let synth = root.join("synth");
    let ext = root.join("ext");
    let enc = root.join("enc");
    ok(&["synth", "--seed", "0", "--out", p(&synth)]);
    ok(&[
        "extract",
        "--backend",
        "mock",
        "--notes",
        p(&synth.join("notes.jsonl")),
        "--answers",
        p(&synth.join("answers.jsonl")),
        "--out",
        p(&ext),
    ]);
    ok(&[
        "encode",
        "--cohort",
        p(&synth.join("cohort.csv")),
        "--answers",
        p(&ext.join("extracted.jsonl")),
        "--notes",
        p(&synth.join("notes.jsonl")),
        "--out",
        p(&enc),
    ]);
    (synth, enc)
}

/// Chat-completions stand-in. With `status` 200 it answers notes with an
/// even id correctly (every label Unknown) and others with prose that has no
/// JSON in it; any other status is returned as is.
fn fake_endpoint(status: u16) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let q = builtin_questionnaire();
    let unknown = AnswerSet {
        patient_id: String::new(),
        note_id: String::new(),
        provenance: Provenance::Llm,
        labels: q.categorical().map(|x| (x.id, "Unknown".to_string())).collect(),
        free_text: Default::default(),
    };
    let good = render_completion(&unknown);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let request: Value = serde_json::from_slice(&body).unwrap();
            let user = request["messages"][1]["content"].as_str().unwrap();
            let digit = user.split("note N").nth(1).and_then(|s| s.chars().nth(4)).unwrap();
            let content = if digit.to_digit(10).unwrap() % 2 == 0 { good.as_str() } else { "I cannot tell." };
            let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    url
}

#[test]
fn mock_extraction_validates_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, _) = pipeline(dir.path());
    let val = dir.path().join("val");
    ok(&[
        "validate-extraction",
        "--predicted",
        p(&dir.path().join("ext/extracted.jsonl")),
        "--gold",
        p(&synth.join("answers.jsonl")),
        "--out",
        p(&val),
    ]);
    let report = json(&val.join("validation.json"));
    assert_eq!(report["overall"]["accuracy"], 1.0);
    assert_eq!(report["n_pairs"], 5000);
    assert!(fs::read_to_string(val.join("validation.csv")).unwrap().contains("\noverall,1,"));
}

#[test]
fn noisy_mock_extraction_lowers_one_question() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    ok(&["synth", "--out", p(&synth)]);
    let ext = dir.path().join("ext");
    ok(&[
        "extract",
        "--backend",
        "mock",
        "--notes",
        p(&synth.join("notes.jsonl")),
        "--answers",
        p(&synth.join("answers.jsonl")),
        "--noise-question",
        "8",
        "--noise-rate",
        "0.2",
        "--noise-seed",
        "3",
        "--out",
        p(&ext),
    ]);
    let val = dir.path().join("val");
    ok(&[
        "validate-extraction",
        "--predicted",
        p(&ext.join("extracted.jsonl")),
        "--gold",
        p(&synth.join("answers.jsonl")),
        "--out",
        p(&val),
    ]);
    let report = json(&val.join("validation.json"));
    let q8 = report["per_question"]["8"]["accuracy"].as_f64().unwrap();
    assert!((q8 - 0.8).abs() < 0.03, "q8 accuracy {q8}");
    assert_eq!(report["per_question"]["9"]["accuracy"], 1.0);
}

#[test]
fn train_writes_a_comparison_row_with_interval() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, enc) = pipeline(dir.path());
    let out = dir.path().join("train");
    ok(&[
        "train",
        "--encoded",
        p(&enc),
        "--outcome",
        "listed",
        "--features",
        "clinical,demographic,sdoh",
        "--grid",
        "single",
        "--out",
        p(&out),
    ]);
    let mut rdr = csv::Reader::from_path(out.join("report.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    let get = |name: &str| -> String { rows[0][header.iter().position(|h| h == name).unwrap()].to_string() };
    assert_eq!(get("outcome"), "listed");
    assert_eq!(get("model"), "clinical+demographic+sdoh");
    let auroc: f64 = get("auroc").parse().unwrap();
    let lo: f64 = get("auroc_ci_low").parse().unwrap();
    let hi: f64 = get("auroc_ci_high").parse().unwrap();
    assert!(lo < auroc && auroc < hi);
    let bayes = json(&synth.join("truth.json"))["expectations"]["bayes_auroc"]["listed"].as_f64().unwrap();
    assert!((auroc - bayes).abs() <= 0.03, "auroc {auroc} vs bayes {bayes}");
    assert!(out.join("models/clinical+demographic+sdoh.json").exists());

    let shap = dir.path().join("shap");
    ok(&[
        "explain",
        "--encoded",
        p(&enc),
        "--model",
        p(&out.join("models/clinical+demographic+sdoh.json")),
        "--out",
        p(&shap),
    ]);
    let summary = json(&shap.join("shap.json"));
    assert_eq!(summary["top_k"].as_array().unwrap().len(), 15);
}

#[test]
fn default_train_enumerates_six_combinations() {
    let dir = tempfile::tempdir().unwrap();
    let (_, enc) = pipeline(dir.path());
    let out = dir.path().join("train");
    ok(&["train", "--encoded", p(&enc), "--grid", "single", "--bootstrap", "50", "--out", p(&out)]);
    let rows = json(&out.join("report.json"));
    let models: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(
        models,
        [
            "clinical",
            "demographic",
            "sdoh",
            "clinical+demographic",
            "clinical+sdoh",
            "clinical+demographic+sdoh"
        ]
    );
}

#[test]
fn report_bundle_has_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, enc) = pipeline(dir.path());
    let out = dir.path().join("report");
    ok(&[
        "report",
        "--encoded",
        p(&enc),
        "--notes",
        p(&synth.join("notes.jsonl")),
        "--grid",
        "single",
        "--bootstrap",
        "50",
        "--out",
        p(&out),
    ]);
    let inv = json(&out.join("inventory.json"));
    for section in [
        "prevalence",
        "trends",
        "cooccurrence",
        "regression",
        "decomposition",
        "models",
        "shap",
        "textfeat",
    ] {
        let files = inv["sections"][section].as_array().unwrap();
        assert!(!files.is_empty(), "{section} is empty");
        for f in files {
            assert!(out.join(f.as_str().unwrap()).is_file(), "{f} missing");
        }
    }
    assert!(out.join("manifest-report.json").is_file());
}

#[test]
fn reruns_reproduce_artifacts_and_leave_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, enc) = pipeline(&dir.path().join("a"));
    let (_, enc_b) = pipeline(&dir.path().join("b"));
    let outputs = |m: &Path| json(m)["outputs"].clone();
    for name in ["manifest-synth.json"] {
        assert_eq!(outputs(&synth.join(name)), outputs(&dir.path().join("b/synth").join(name)));
    }
    assert_eq!(outputs(&enc.join("manifest-encode.json")), outputs(&enc_b.join("manifest-encode.json")));

    let before: Vec<Vec<u8>> = ["features.csv", "features.json", "outcomes.json"]
        .iter()
        .map(|f| fs::read(enc.join(f)).unwrap())
        .collect();
    let mut train_manifests = Vec::new();
    for run in ["t1", "t2"] {
        let out = dir.path().join(run);
        ok(&[
            "train",
            "--encoded",
            p(&enc),
            "--features",
            "clinical,sdoh",
            "--grid",
            "single",
            "--seed",
            "4",
            "--out",
            p(&out),
        ]);
        train_manifests.push(json(&out.join("manifest-train.json")));
    }
    assert_eq!(train_manifests[0]["outputs"], train_manifests[1]["outputs"]);
    assert_eq!(train_manifests[0]["inputs"], train_manifests[1]["inputs"]);
    assert_eq!(train_manifests[0]["seeds"]["seed"], 4);
    let after: Vec<Vec<u8>> = ["features.csv", "features.json", "outcomes.json"]
        .iter()
        .map(|f| fs::read(enc.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    ok(&["synth", "--out", p(&synth)]);
    let notes = synth.join("notes.jsonl");

    // missing input file
    let out = sdoh(&["analyze", "cooccur", "--encoded", "/nonexistent", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    // alpha outside (0,1)
    let out = sdoh(&[
        "analyze",
        "prevalence",
        "--encoded",
        p(&synth),
        "--alpha",
        "1.5",
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // a backend that garbles every other note
    let subset: String = fs::read_to_string(&notes).unwrap().lines().take(10).map(|l| format!("{l}\n")).collect();
    let few = dir.path().join("few.jsonl");
    fs::write(&few, subset).unwrap();
    let url = fake_endpoint(200);
    let ext = dir.path().join("ext");
    let out = sdoh(&[
        "extract",
        "--backend",
        "http",
        "--endpoint",
        &url,
        "--model",
        "test",
        "--notes",
        p(&few),
        "--retries",
        "1",
        "--parallelism",
        "2",
        "--out",
        p(&ext),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let failures = fs::read_to_string(ext.join("failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 5);
    assert_eq!(fs::read_to_string(ext.join("extracted.jsonl")).unwrap().lines().count(), 5);

    // rejected credentials abort the run
    let out = sdoh(&[
        "extract",
        "--backend",
        "http",
        "--endpoint",
        &fake_endpoint(401),
        "--model",
        "test",
        "--notes",
        p(&few),
        "--out",
        p(&dir.path().join("auth")),
    ]);
    assert_eq!(out.status.code(), Some(4));

    // nothing listens on the discard port
    let out = sdoh(&[
        "extract",
        "--backend",
        "http",
        "--endpoint",
        "http://127.0.0.1:9/v1/chat/completions",
        "--model",
        "test",
        "--notes",
        p(&few),
        "--retries",
        "0",
        "--out",
        p(&dir.path().join("http")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn questionnaire_validate_writes_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q");
    ok(&["questionnaire", "validate", "--out", p(&out)]);
    let prompt = fs::read_to_string(out.join("prompt.txt")).unwrap();
    assert!(prompt.starts_with(sdoh_core::questionnaire::SYSTEM_PROMPT));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["categorical"], 28);

    // a broken copy is a config error
    let mut q: Value = serde_json::from_str(&fs::read_to_string(out.join("questionnaire.json")).unwrap()).unwrap();
    q["questions"][1]["id"] = q["questions"][0]["id"].clone();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, q.to_string()).unwrap();
    let res = sdoh(&["questionnaire", "validate", "--questionnaire", p(&bad), "--out", p(&dir.path().join("q2"))]);
    assert_eq!(res.status.code(), Some(2));
}
