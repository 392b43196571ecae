use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use storyrank::catalog::{CatalogCarousel, CatalogItem};
use storyrank::story::write_stories;
use storyrank::{parse, CatalogIndex, UserStory};

const SAMPLE_TEXT: &str = "country=US device=tv <|begin_sessions|> <|session|> elapsed=0h day=6 \
<|search|> hour=3 lan <|search|> hour=3 lantern \
<|watch|> hour=3 <|surface=search|><|carousel()|><|id(SYN201|The Lantern at Exit 13)|> 87m \
<|watch|> hour=5 <|surface=home|><|carousel(after_dark_detours)|><|id(SYN202|Violet Static Motel)|> 50m \
<|session|> elapsed=16h day=6 \
<|watch|> hour=22 <|surface=home|><|carousel(rainy_night_rewinds)|><|id(SYN201|The Lantern at Exit 13)|> 27m";

const TINY_MODEL: &[&str] = &[
    "--set",
    "vocab.merges=16",
    "--set",
    "vocab.merge_sample=10",
    "--set",
    "model.model_dim=16",
    "--set",
    "model.layers=1",
    "--set",
    "model.heads=2",
    "--set",
    "train.macro_steps=3",
    "--set",
    "train.warmup_steps=1",
    "--set",
    "train.batch_size=2",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_storyrank"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn storyrank")
}

fn sample_catalog() -> CatalogIndex {
    let item = |id: &str, title: &str| CatalogItem { item_id: id.into(), title: title.into(), genre: None };
    let row = |id: &str, name: &str| CatalogCarousel { carousel_id: id.into(), name: name.into() };
    CatalogIndex::new(
        vec![item("SYN201", "The Lantern at Exit 13"), item("SYN202", "Violet Static Motel"), item("SYN203", "Fog Harbor")],
        vec![row("after_dark_detours", "After Dark Detours"), row("rainy_night_rewinds", "Rainy Night Rewinds")],
    )
    .unwrap()
}

fn sample_story() -> UserStory {
    parse(SAMPLE_TEXT, &sample_catalog()).unwrap()
}

/// A run directory with 60 copies of the reference story, a vocabulary and
/// a briefly trained model.
fn trained_dir(dir: &Path) {
    let catalog = sample_catalog();
    let stories: Vec<UserStory> = (0..60)
        .map(|i| UserStory { user_id: format!("F{i:02}"), ..sample_story() })
        .collect();
    let mut buf = Vec::new();
    write_stories(&mut buf, &stories).unwrap();
    std::fs::write(dir.join("stories.jsonl"), buf).unwrap();
    let mut buf = Vec::new();
    catalog.write_jsonl(&mut buf).unwrap();
    std::fs::write(dir.join("catalog.jsonl"), buf).unwrap();
    let d = dir.to_str().unwrap();
    for stage in ["build-vocab", "build-corpus", "train"] {
        let mut args = vec![stage, "--dir", d];
        args.extend_from_slice(TINY_MODEL);
        let out = run(&args);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn request_json(id: &str) -> String {
    serde_json::json!({ "id": id, "story": sample_story(), "task": "search", "query": "fog", "top_k": 3 }).to_string()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "expected one stderr line: {text}");
    text.trim_end().to_string()
}

#[test]
fn rank_search_request_returns_item_tokens() {
    let dir = tempfile::tempdir().unwrap();
    trained_dir(dir.path());
    let req = dir.path().join("req.json");
    std::fs::write(&req, request_json("r1")).unwrap();
    let out = run(&[
        "rank",
        "--checkpoint",
        dir.path().join("model-full.ckpt").to_str().unwrap(),
        "--vocab",
        dir.path().join("vocab.tsv").to_str().unwrap(),
        "--request",
        req.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resp: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resp["id"], "r1");
    assert_eq!(resp["task"], "search");
    assert_eq!(resp["model_step"], 3);
    let cands = resp["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 3);
    for c in cands {
        assert!(c["token"].as_str().unwrap().starts_with("<|id(SYN20"), "{c}");
    }
    let logits: Vec<f64> = cands.iter().map(|c| c["logit"].as_f64().unwrap()).collect();
    assert!(logits.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn stage_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    trained_dir(dir.path());
    let files = ["vocab.tsv", "corpus-full.bin", "model-full.ckpt"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    trained_dir(dir.path());
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&std::fs::read(dir.path().join(f)).unwrap(), b, "{f} changed");
    }
}

#[test]
fn serve_answers_each_line_and_reports_latency() {
    let dir = tempfile::tempdir().unwrap();
    trained_dir(dir.path());
    let mut child = bin()
        .args([
            "serve",
            "--checkpoint",
            dir.path().join("model-full.ckpt").to_str().unwrap(),
            "--vocab",
            dir.path().join("vocab.tsv").to_str().unwrap(),
            "--batch-window-ms",
            "5",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, "{}", request_json("a")).unwrap();
        writeln!(stdin, "{{\"id\": \"b\", \"story\": 5}}").unwrap();
        writeln!(stdin, "{}", request_json("c")).unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout.clone()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    let by_id = |id: &str| lines.iter().find(|l| l["id"] == id).unwrap().clone();
    assert_eq!(by_id("a")["candidates"], by_id("c")["candidates"]);
    assert_eq!(by_id("b")["error"], "json");
    let summary: serde_json::Value = serde_json::from_str(&stderr_line(&out)).unwrap();
    assert_eq!(summary["requests"], 3);
    assert_eq!(summary["errors"], 1);
    assert_eq!(summary["latency"]["samples"], 2);
    assert!(summary["latency"]["p50_us"].as_u64().unwrap() <= summary["latency"]["p99_us"].as_u64().unwrap());
}

#[test]
fn failures_print_one_prefixed_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = run(&["build-vocab", "--dir", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error[io]: "));

    let out = run(&["gen-data", "--dir", dir.path().to_str().unwrap(), "--set", "train.bogus=1"]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error[config]: "));

    let out = run(&["gen-data", "--dir", dir.path().to_str().unwrap(), "--set", "world.n_items=0"]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error[config]: "));

    trained_dir(dir.path());
    let req = dir.path().join("bad.json");
    std::fs::write(&req, "{\"task\": \"search\"").unwrap();
    let out = run(&[
        "rank",
        "--checkpoint",
        dir.path().join("model-full.ckpt").to_str().unwrap(),
        "--vocab",
        dir.path().join("vocab.tsv").to_str().unwrap(),
        "--request",
        req.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error[json]: "));
}

#[test]
fn eval_refuses_a_checkpoint_from_another_vocabulary() {
    let a = tempfile::tempdir().unwrap();
    trained_dir(a.path());
    let b = tempfile::tempdir().unwrap();
    trained_dir(b.path());
    let d = b.path().to_str().unwrap();
    let mut args = vec!["build-vocab", "--dir", d, "--set", "vocab.merges=4"];
    args.extend_from_slice(&TINY_MODEL[4..]);
    assert!(run(&args).status.success());
    let out = run(&["eval", "--dir", d, "--checkpoint", a.path().join("model-full.ckpt").to_str().unwrap()]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error[config]: ") && line.contains("vocabulary hash mismatch"), "{line}");
}
