use std::path::Path;
use std::process::{Command, Output};

fn mbag(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbag"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_az_without_config_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = mbag(&["train-az", "--goals", "g.txt", "--out", "a.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = mbag(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn zero_episodes_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let g = mbag(&["gen-goals", "--seed", "0", "--n", "4", "--out", "g.txt"], dir.path());
    assert!(g.status.success(), "{}", stderr(&g));
    let o = mbag(&["eval", "--goals", "g.txt", "--episodes", "0", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn gen_goals_then_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let g = mbag(&["gen-goals", "--seed", "0", "--n", "100", "--out", "g.txt"], dir.path());
    assert!(g.status.success(), "{}", stderr(&g));
    let run = |out: &str| {
        let o = mbag(
            &["eval", "--goals", "g.txt", "--episodes", "6", "--seed", "7", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("a.json");
    let b = run("b.json");
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let pair = &report["pairs"][0];
    assert_eq!(pair["n"], 6);
    assert!(pair["overall_goal_pct"]["mean"].is_number());
    assert!(pair["assistant_goal_pct"].is_null());
    let table = std::fs::read_to_string(dir.path().join("a.txt")).unwrap();
    assert!(table.contains("Overall goal %") && table.contains("---"));
}

#[test]
fn split_goal_files_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let g = mbag(
        &["gen-goals", "--n", "10", "--test-fraction", "0.2", "--out", "g.txt"],
        dir.path(),
    );
    assert!(g.status.success(), "{}", stderr(&g));
    assert!(dir.path().join("g.txt.train").exists() && dir.path().join("g.txt.test").exists());
    // a missing input file is a runtime failure
    let o = mbag(&["eval", "--goals", "nope.txt", "--episodes", "1", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    // a bad trainer config is a config error
    std::fs::write(dir.path().join("cfg.json"), "{\"iterations\": 3}").unwrap();
    let o = mbag(
        &["train-az", "--config", "cfg.json", "--goals", "g.txt.train", "--out", "a.ckpt"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = mbag(
        &["eval", "--goals", "g.txt.test", "--human", "robot", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn rollout_writes_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    mbag(&["gen-goals", "--n", "3", "--out", "g.txt"], dir.path());
    let o = mbag(
        &[
            "rollout", "--goals", "g.txt", "--episodes", "2", "--strip-goal", "--assistant", "scripted", "--out",
            "c.txt",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = mbag::humans::load_corpus(dir.path().join("c.txt")).unwrap();
    assert_eq!(corpus.episodes.len(), 2);
    assert!(!corpus.goal_visible);
}
