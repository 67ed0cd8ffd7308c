use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccprompt::data::{generate_synthetic, synthetic_labels, write_jsonl, SyntheticSpec};
use serde_json::Value;

const BASE: &str = "\
[data]
name = toy
train = train.jsonl
dev = dev.jsonl
test = test.jsonl
labels = labels.txt

[encoder]
d_e = 8

[prompt]
head_hidden = 8

[loss]
include_positive_in_denominator = true

[train]
learning_rate = 1e-2
epochs = 8
seed = 0

[output]
dir = run
";

fn workspace(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let labels = synthetic_labels(3);
    for (split, n, seed) in [("train", 10, 1), ("dev", 5, 2), ("test", 8, 3)] {
        let data = generate_synthetic(&SyntheticSpec::separable(3, n, seed), split);
        write_jsonl(&dir.path().join(format!("{split}.jsonl")), &data, &labels).unwrap();
    }
    fs::write(dir.path().join("labels.txt"), labels.to_text()).unwrap();
    let path = dir.path().join("toy.ini");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn ccprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccprompt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn train_eval_and_analyze_round_trip() {
    let (dir, config) = workspace(BASE);
    let metrics = json(&ccprompt(&["train", "--config", s(&config)]));
    let hash = ccprompt::config::config_hash(BASE);
    assert_eq!(metrics["config_hash"], hash.as_str());
    let run = &metrics["runs"][0];
    assert!(
        run["final_loss"]["l_cls"].as_f64().unwrap()
            < run["initial_loss"]["l_cls"].as_f64().unwrap()
    );

    let ckpt = dir.path().join("run/model.ckpt");
    assert!(ckpt.exists());
    let log = fs::read_to_string(dir.path().join("run/metrics.log")).unwrap();
    assert!(log.contains(&format!("config_hash={hash}")));

    let a = ccprompt(&["eval", "--checkpoint", s(&ckpt), "--split", "test"]);
    let b = ccprompt(&["eval", "--checkpoint", s(&ckpt), "--split", "test"]);
    assert_eq!(a.stdout, b.stdout);
    let eval = json(&a);
    assert_eq!(eval["config_hash"], hash.as_str());
    assert_eq!(eval["instances"], 24);
    assert_eq!(eval["score"].as_f64(), run["eval"].as_f64());

    let out = dir.path().join("analysis");
    let analyze = ccprompt(&[
        "analyze",
        "--checkpoint",
        s(&ckpt),
        "--split",
        "test",
        "--mode",
        "contrastive",
        "--out",
        s(&out),
    ]);
    assert!(
        analyze.status.success(),
        "{}",
        String::from_utf8_lossy(&analyze.stderr)
    );
    let md = fs::read_to_string(out.join("report-test-contrastive.md")).unwrap();
    assert!(md.contains(&hash));
    assert!(out.join("report-test-contrastive.html").exists());
    assert!(out.join("predictions-test.jsonl").exists());
}

#[test]
fn overrides_change_the_hash() {
    let (_dir, config) = workspace(BASE);
    let metrics = json(&ccprompt(&[
        "train",
        "--config",
        s(&config),
        "--K",
        "2",
        "--seeds",
        "13,21",
        "--ablation",
        "no_siamese",
    ]));
    assert_ne!(
        metrics["config_hash"],
        ccprompt::config::config_hash(BASE).as_str()
    );
    assert_eq!(metrics["k"], 2);
    assert_eq!(metrics["ablations"], "no_siamese");
    assert_eq!(metrics["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn sample_episodes_writes_manifests() {
    let (dir, config) = workspace(BASE);
    let out = dir.path().join("eps");
    let r = ccprompt(&[
        "sample-episodes",
        "--config",
        s(&config),
        "--K",
        "1,3",
        "--seeds",
        "13,42",
        "--out",
        s(&out),
    ]);
    assert!(r.status.success());
    for k in [1usize, 3] {
        for seed in [13, 42] {
            let text =
                fs::read_to_string(out.join(format!("episode-k{k}-seed{seed}.json"))).unwrap();
            let v: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["episode"]["train_ids"].as_array().unwrap().len(), 3 * k);
            assert_eq!(v["episode"]["dev_ids"].as_array().unwrap().len(), 3 * k);
        }
    }
}

#[test]
fn exit_codes() {
    let (dir, config) = workspace(BASE);
    let code = |o: Output| o.status.code().unwrap();

    let missing = dir.path().join("missing.ini");
    fs::write(&missing, "[data]\ntrain = nope.jsonl\n").unwrap();
    assert_eq!(code(ccprompt(&["train", "--config", s(&missing)])), 2);
    assert_eq!(
        code(ccprompt(&[
            "train",
            "--config",
            s(&config),
            "--ablation",
            "no_magic"
        ])),
        2
    );

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(ccprompt(&["eval", "--checkpoint", s(&junk)])), 3);

    let bad_data = dir.path().join("bad.ini");
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": 1\n").unwrap();
    fs::write(&bad_data, "[data]\ntrain = bad.jsonl\n").unwrap();
    assert_eq!(code(ccprompt(&["train", "--config", s(&bad_data)])), 3);

    let blowup = dir.path().join("blowup.ini");
    fs::write(
        &blowup,
        BASE.replace("learning_rate = 1e-2", "learning_rate = 1e300"),
    )
    .unwrap();
    assert_eq!(code(ccprompt(&["train", "--config", s(&blowup)])), 4);
}
