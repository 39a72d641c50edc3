use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refgen"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("summary line")).expect("summary is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Runs generate, distract and split into `dir`, asserting success.
fn pipeline(dir: &Path, corpus: &Path, workers: &str) {
    let out = run(&["--workers", workers, "generate", "--corpus", s(corpus), "--out", s(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let exprs = dir.join("expressions.jsonl");
    let out = run(&[
        "--workers", workers, "distract", "--corpus", s(corpus), "--expressions", s(&exprs), "--out", s(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["--workers", workers, "split", "--instances", s(&dir.join("instances.jsonl")), "--out", s(dir)]);
    assert_eq!(code(&out), 0);
}

#[test]
fn outputs_are_identical_across_worker_counts() {
    let corpus = fixture("synthetic20.json");
    let dirs: Vec<TempDir> = (0..3).map(|_| TempDir::new().unwrap()).collect();
    for (dir, w) in dirs.iter().zip(["1", "2", "4"]) {
        pipeline(dir.path(), &corpus, w);
    }
    for file in [
        "expressions.jsonl",
        "generation_log.json",
        "instances.jsonl",
        "distract_log.json",
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
    ] {
        let first = std::fs::read(dirs[0].path().join(file)).unwrap();
        assert!(!first.is_empty(), "{file}");
        for d in &dirs[1..] {
            assert_eq!(first, std::fs::read(d.path().join(file)).unwrap(), "{file}");
        }
    }
}

#[test]
fn oracle_scores_give_perfect_accuracy() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path(), &fixture("synthetic20.json"), "1");
    let instances = dir.path().join("instances.jsonl");
    let scores = dir.path().join("scores.jsonl");
    assert_eq!(code(&run(&["oracle-scores", "--instances", s(&instances), "--out", s(&scores)])), 0);
    let report = dir.path().join("eval.json");
    let out = run(&["eval", "--instances", s(&instances), "--scores", s(&scores), "--out", s(&report)]);
    assert_eq!(code(&out), 0);
    let acc = &summary(&out)["accuracy"];
    assert_eq!(acc.as_object().unwrap().len(), 6);
    assert!(acc.as_object().unwrap().values().all(|v| v.as_f64() == Some(1.0)));
    let full: Value = serde_json::from_str(&read(&report)).unwrap();
    assert_eq!(full["schema_version"], "1");
    assert_eq!(full["results"][0]["overall"]["accuracy"], 1.0);

    // A scores file missing a region is a data error.
    let partial: String = read(&scores).lines().skip(1).map(|l| format!("{l}\n")).collect();
    std::fs::write(&scores, partial).unwrap();
    assert_eq!(code(&run(&["eval", "--instances", s(&instances), "--scores", s(&scores)])), 3);
}

#[test]
fn two_cats_scene_yields_the_towel_expression() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "[generation]\nforms = [\"order\"]\nsynonym_probability = 0.0\ncompose_probability = 1.0\nmax_per_region = 4\n",
    )
    .unwrap();
    let want = "The cat on the left that is sleeping and resting on the white towel.";
    let found = (0..64).any(|seed| {
        let out = run(&[
            "--config", s(&config), "--seed", &seed.to_string(),
            "generate", "--corpus", s(&fixture("two_cats.json")), "--out", s(dir.path()),
        ]);
        assert_eq!(code(&out), 0);
        read(&dir.path().join("expressions.jsonl"))
            .lines()
            .any(|l| serde_json::from_str::<Value>(l).unwrap()["text"] == want)
    });
    assert!(found);
}

#[test]
fn empty_corpus_exits_with_4() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("empty.json");
    std::fs::write(&corpus, "{}").unwrap();
    let out = run(&["generate", "--corpus", s(&corpus), "--out", s(dir.path())]);
    assert_eq!(code(&out), 4);
    assert_eq!(summary(&out)["records"], 0);
    assert!(read(&dir.path().join("expressions.jsonl")).is_empty());
    let empty = dir.path().join("none.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&run(&["stats", "--instances", s(&empty)])), 4);
    assert_eq!(code(&run(&["eval", "--instances", s(&empty), "--oracle"])), 4);
}

#[test]
fn shortages_are_discarded_and_logged() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture("two_cats.json");
    assert_eq!(code(&run(&["generate", "--corpus", s(&corpus), "--out", s(dir.path())])), 0);
    let exprs = dir.path().join("expressions.jsonl");
    let n = read(&exprs).lines().count();
    assert!(n > 0);
    let out = run(&["distract", "--corpus", s(&corpus), "--expressions", s(&exprs), "--out", s(dir.path())]);
    assert_eq!(code(&out), 4);
    assert_eq!(summary(&out)["discarded"], n);
    let log: Value = serde_json::from_str(&read(&dir.path().join("distract_log.json"))).unwrap();
    assert_eq!(log["shortages"].as_array().unwrap().len(), n);
    assert_eq!(log["instances"], 0);
    assert!(read(&dir.path().join("instances.jsonl")).is_empty());
}

#[test]
fn corpus_stats_match_a_hand_count() {
    let out = run(&["stats", "--corpus", s(&fixture("two_cats.json"))]);
    assert_eq!(code(&out), 0);
    let stats = &summary(&out)["stats"];
    // cat x2, towel, blanket, sky; sleeping x2, gray, white, blue x2.
    assert_eq!(stats["image_count"], 1);
    assert_eq!(stats["region_count"], 5);
    assert_eq!(stats["category_count"], 4);
    assert_eq!(stats["attribute_count"], 4);
    assert_eq!(stats["relation_count"], 2);
    assert_eq!(stats["top_names"][0], serde_json::json!({"term": "cat", "count": 2}));
    assert_eq!(stats["top_attributes"][0], serde_json::json!({"term": "blue", "count": 2}));
    assert!(String::from_utf8_lossy(&out.stderr).contains("relations"));
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture("two_cats.json");
    let cases = [
        "[generation]\nunknown_key = 1\n",
        "[split]\ntrain = 0.9\nval = 0.2\ntest = 0.1\n",
        "seed = \"nope\"\n",
    ];
    for text in cases {
        let config = dir.path().join("bad.toml");
        std::fs::write(&config, text).unwrap();
        let out = run(&["--config", s(&config), "generate", "--corpus", s(&corpus), "--out", s(dir.path())]);
        assert_eq!(code(&out), 2, "{text}");
    }
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&run(&["--config", s(&missing), "stats", "--corpus", s(&corpus)])), 2);
    assert_eq!(code(&run(&["eval", "--instances", s(&corpus), "--oracle", "--setting", "bogus"])), 2);
    assert_eq!(code(&run(&["generate"])), 2);
}

#[test]
fn malformed_data_exits_with_3() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"1\": {\"width\": 3}}").unwrap();
    assert_eq!(code(&run(&["generate", "--corpus", s(&bad), "--out", s(dir.path())])), 3);
    let lines = dir.path().join("bad.jsonl");
    std::fs::write(&lines, "{\"id\": 1}\n").unwrap();
    let out = run(&["schema-check", "--kind", "expression", s(&lines)]);
    assert_eq!(code(&out), 3);
    assert_eq!(summary(&out)["invalid"], 1);
}

#[test]
fn schema_check_accepts_pipeline_output() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path(), &fixture("synthetic20.json"), "1");
    for (kind, file) in [("expression", "expressions.jsonl"), ("instance", "instances.jsonl")] {
        let out = run(&["schema-check", "--kind", kind, s(&dir.path().join(file))]);
        assert_eq!(code(&out), 0, "{kind}");
        assert_eq!(summary(&out)["invalid"], 0);
    }
}

#[test]
fn mine_demo_reads_both_embedding_formats() {
    let dir = TempDir::new().unwrap();
    let emb = refgen::mining::synthetic_embeddings(30, 8, 3, 5);
    let jsonl = dir.path().join("emb.jsonl");
    std::fs::write(&jsonl, refgen::jsonl::to_jsonl_string(&emb)).unwrap();
    let bin = dir.path().join("emb.bin");
    let trace = dir.path().join("trace.jsonl");
    let out = run(&[
        "--seed", "2", "mine-demo", "--embeddings", s(&jsonl), "--iterations", "120",
        "--out", s(&trace), "--write-binary", s(&bin),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = summary(&out);
    assert_eq!(first["refreshes"], 2);
    assert_eq!(read(&trace).lines().count(), 120);
    let again = run(&["--seed", "2", "mine-demo", "--embeddings", s(&bin), "--iterations", "120"]);
    assert_eq!(summary(&again), first);
    assert_eq!(code(&run(&["schema-check", "--kind", "embedding", s(&bin)])), 0);
}

#[test]
fn external_scorer_matches_the_constant_baseline() {
    let dir = TempDir::new().unwrap();
    pipeline(dir.path(), &fixture("synthetic20.json"), "1");
    let instances = dir.path().join("instances.jsonl");
    let out = run(&[
        "eval", "--instances", s(&instances), "--setting", "Full",
        "--scorer-cmd", "sh", "--scorer-arg", "-c", "--scorer-arg", "while read l; do echo 0.5; done",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // Constant scores tie everywhere, so the smallest (image, object) wins;
    // that is the target only when it sorts first.
    let acc = summary(&out)["accuracy"]["Full"].as_f64().unwrap();
    let lines = read(&instances);
    let expected = lines
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|i| {
            // Numeric ids order numerically, as the library does.
            let key = |id: &str| (id.parse::<u64>().ok(), id.to_string());
            let regions = i["candidate_regions"].as_object().unwrap();
            let first = regions
                .iter()
                .flat_map(|(img, objs)| {
                    objs.as_array().unwrap().iter().map(move |o| (key(img), key(o["object_id"].as_str().unwrap())))
                })
                .min()
                .unwrap();
            let target = (
                key(i["target_image"].as_str().unwrap()),
                key(i["expression"]["target_id"].as_str().unwrap()),
            );
            first == target
        })
        .count() as f64
        / lines.lines().count() as f64;
    assert_eq!(acc, expected);
}
