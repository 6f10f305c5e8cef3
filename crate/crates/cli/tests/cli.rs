use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ctxslu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxslu"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctxslu(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], category: &str) -> String {
    let out = ctxslu(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    let tag = format!("error[{category}]: ");
    assert!(err.lines().any(|l| l.starts_with(&tag)), "expected {tag} in {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn sessions(p: &Path) -> usize {
    lines(p)
        .iter()
        .map(|r| r["session_id"].as_str().unwrap().to_owned())
        .collect::<BTreeSet<_>>()
        .len()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(sessions: &str) -> Fixture {
        let dir = TempDir::new().unwrap();
        ok(&["synth", "--out", s(&dir.path().join("corpus")), "--sessions", sessions, "--seed", "3"]);
        Fixture { dir }
    }

    fn corpus(&self, split: &str) -> PathBuf {
        self.dir.path().join("corpus").join(format!("{split}.jsonl"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn small(&self) -> Vec<String> {
        let mut v: Vec<String> = [
            "--train",
            s(&self.corpus("train")),
            "--dev",
            s(&self.corpus("dev")),
            "--embed-dim",
            "8",
            "--hidden",
            "4",
            "--attn-hidden",
            "4",
            "--batch",
            "16",
            "--epochs",
            "2",
            "--lr",
            "0.01",
        ]
        .iter()
        .map(|x| x.to_string())
        .collect();
        v.extend(["--test".to_owned(), s(&self.corpus("test")).to_owned()]);
        v
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut args: Vec<String> = vec!["train".into(), "--out".into(), s(&out).into()];
        args.extend(self.small());
        args.extend(extra.iter().map(|x| x.to_string()));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        out
    }

    fn ablate(&self, out: &str, extra: &[&str]) -> (String, String) {
        let out = self.path(out);
        let mut args: Vec<String> = vec!["ablate".into(), "--out".into(), s(&out).into()];
        args.extend(self.small());
        args.extend(extra.iter().map(|x| x.to_string()));
        let o = ctxslu(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (String::from_utf8(o.stdout).unwrap(), String::from_utf8(o.stderr).unwrap())
    }
}

#[test]
fn synth_writes_a_70_15_15_split() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    let text = ok(&["synth", "--out", s(&out)]);
    assert!(text.contains("ceiling"));
    assert_eq!(sessions(&out.join("train.jsonl")), 140);
    assert_eq!(sessions(&out.join("dev.jsonl")), 30);
    assert_eq!(sessions(&out.join("test.jsonl")), 30);
    assert_eq!(lines(&out.join("meta.jsonl")).len(), 2000);
    assert!(out.join("spec.toml").exists());
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["synth", "--out", s(&a), "--seed", "7", "--sessions", "20"]);
    ok(&["synth", "--out", s(&b), "--seed", "7", "--sessions", "20"]);
    ok(&["synth", "--out", s(&c), "--seed", "8", "--sessions", "20"]);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "meta.jsonl", "spec.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn synth_rejects_zero_sessions() {
    let dir = TempDir::new().unwrap();
    fails(&["synth", "--out", s(&dir.path().join("c")), "--sessions", "0"], "usage");
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "sessions = 0\n").unwrap();
    fails(&["synth", "--out", s(&dir.path().join("d")), "--spec", s(&spec)], "usage");
}

#[test]
fn synth_spec_file_and_overrides() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "sessions = 20\nturns = 4\nrule = \"r1\"\n").unwrap();
    let out = dir.path().join("c");
    ok(&["synth", "--out", s(&out), "--spec", s(&spec), "--sessions", "40"]);
    assert_eq!(sessions(&out.join("train.jsonl")), 28);
    assert_eq!(lines(&out.join("meta.jsonl")).len(), 160);
    fs::write(&spec, "sessions = 20\nbogus = 1\n").unwrap();
    fails(&["synth", "--out", s(&out), "--spec", s(&spec)], "usage");
}

#[test]
fn conflicting_architecture_flags_fail_before_training() {
    let f = Fixture::new("10");
    let train = f.corpus("train");
    let dev = f.corpus("dev");
    let out = f.path("never");
    for extra in [
        &["--no-context", "--role-attention", "--time-attention"][..],
        &["--no-context", "--role-attention"],
        &["--variant", "time-sentence", "--role-attention"],
        &["--variant", "z"],
        &["--context", "shared", "--role-attention", "--content-attention"],
    ] {
        let mut args = vec!["train", "--train", s(&train), "--dev", s(&dev), "--out", s(&out)];
        args.extend_from_slice(extra);
        fails(&args, "usage");
    }
    assert!(!out.exists());
}

#[test]
fn train_echoes_defaults_in_resolved_config() {
    let f = Fixture::new("6");
    let out = f.path("m");
    ok(&[
        "train",
        "--train",
        s(&f.corpus("train")),
        "--dev",
        s(&f.corpus("dev")),
        "--epochs",
        "1",
        "--out",
        s(&out),
    ]);
    let c: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(c["variant"], "time-sentence");
    assert_eq!(c["hyper"]["options"]["hidden"], 128);
    assert_eq!(c["hyper"]["embed_dim"], 200);
    assert_eq!(c["hyper"]["train"]["batch_size"], 256);
    assert_eq!(c["hyper"]["train"]["epochs"], 1);
    assert_eq!(c["hyper"]["train"]["learning_rate"], 0.001);
    assert_eq!(c["hyper"]["train"]["seed"], 1);
    assert_eq!(c["model"]["attention"]["time"], true);
    assert_eq!(c["model"]["attention"]["level"], "sentence");
    assert_eq!(lines(&out.join("metrics.jsonl")).len(), 1);
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let f = Fixture::new("10");
    let cfg = f.path("run.toml");
    fs::write(
        &cfg,
        format!(
            "train = {:?}\ndev = {:?}\nhidden = 3\nepochs = 1\nembed-dim = 4\nvariant = \"content-role\"\n",
            f.corpus("train"),
            f.corpus("dev")
        ),
    )
    .unwrap();
    let out = f.path("m");
    ok(&["train", "--config", s(&cfg), "--hidden", "5", "--out", s(&out)]);
    let c: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(c["hyper"]["options"]["hidden"], 5);
    assert_eq!(c["hyper"]["train"]["epochs"], 1);
    assert_eq!(c["variant"], "content-role");

    fs::write(&cfg, "hiden = 3\n").unwrap();
    fails(&["train", "--config", s(&cfg), "--out", s(&out)], "usage");
}

#[test]
fn eval_reproduces_final_dev_f1() {
    let f = Fixture::new("20");
    let out = f.train("m", &["--variant", "g"]);
    let last = lines(&out.join("metrics.jsonl")).pop().unwrap();
    let text = ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--test",
        s(&f.corpus("dev")),
        "--format",
        "json",
    ]);
    let r: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(r["f1"]["all"].as_f64(), last["dev_f1_all"].as_f64());
    assert_eq!(r["f1"]["tourist"].as_f64(), last["dev_f1_tourist"].as_f64());
    assert_eq!(r["f1"]["guide"].as_f64(), last["dev_f1_guide"].as_f64());
}

#[test]
fn attention_dump_has_one_record_per_utterance() {
    let f = Fixture::new("20");
    let out = f.train("m", &["--variant", "content-both"]);
    let dump = f.path("att.jsonl");
    ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--test",
        s(&f.corpus("test")),
        "--dump-attention",
        s(&dump),
    ]);
    let recs = lines(&dump);
    assert_eq!(recs.len(), lines(&f.corpus("test")).len());
    let later = recs.iter().find(|r| r["turn_index"] == 3).unwrap();
    let w = later["sentence_weights"].as_object().unwrap();
    assert_eq!(w.len(), 3);
    let sum: f64 = w.values().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert!(later["role_weights"].is_object());
}

#[test]
fn role_attention_report_needs_role_level_attention() {
    let f = Fixture::new("20");
    let sent = f.train("i", &["--variant", "time-sentence"]);
    fails(
        &[
            "eval",
            "--checkpoint",
            s(&sent.join("checkpoint.json")),
            "--test",
            s(&f.corpus("test")),
            "--role-attention-report",
        ],
        "usage",
    );
    let role = f.train("g", &["--variant", "content-role"]);
    let text = ok(&[
        "eval",
        "--checkpoint",
        s(&role.join("checkpoint.json")),
        "--test",
        s(&f.corpus("test")),
        "--role-attention-report",
        "--format",
        "json",
    ]);
    let r: Value = serde_json::from_str(&text).unwrap();
    for task in ["tourist_task", "guide_task"] {
        let w = &r["role_attention"][task];
        let sum = w["tourist"].as_f64().unwrap() + w["guide"].as_f64().unwrap();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_rejects_foreign_vocabulary() {
    let f = Fixture::new("10");
    let out = f.train("m", &[]);
    let foreign = f.path("foreign.jsonl");
    fs::write(
        &foreign,
        "{\"session_id\":\"x\",\"turn_index\":0,\"speaker\":\"guide\",\"transcript\":\"hello\",\"labels\":[\"FOL_THANK\"]}\n",
    )
    .unwrap();
    fails(
        &["eval", "--checkpoint", s(&out.join("checkpoint.json")), "--test", s(&foreign)],
        "vocab",
    );
    fails(
        &["eval", "--checkpoint", s(&f.path("missing.json")), "--test", s(&foreign)],
        "io",
    );
}

#[test]
fn training_is_byte_for_byte_reproducible() {
    let f = Fixture::new("12");
    let a = f.train("a", &["--variant", "n", "--jobs", "2"]);
    let b = f.train("b", &["--variant", "n"]);
    for file in ["checkpoint.json", "metrics.jsonl"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let c = f.train("c", &["--variant", "n", "--seed", "2"]);
    assert_ne!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(c.join("checkpoint.json")).unwrap());
}

#[test]
fn ablate_runs_the_requested_rows() {
    let f = Fixture::new("12");
    let (table, _) = f.ablate("abl", &["--variants", "c,e,i", "--seeds", "1,2"]);
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains("(c)") && rows[1].contains("(e)") && rows[2].contains("(i)"));
    let report: Value = serde_json::from_str(&fs::read_to_string(f.path("abl/report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 3);
    assert_eq!(fs::read_dir(f.path("abl/cells")).unwrap().count(), 6);
    assert_eq!(fs::read_to_string(f.path("abl/table.txt")).unwrap(), table);
}

#[test]
fn resume_recomputes_nothing_already_finished() {
    let f = Fixture::new("12");
    f.ablate("abl", &["--variants", "c,i", "--seeds", "1,2"]);
    let cell = f.path("abl/cells/i-2.json");
    let before = fs::metadata(&cell).unwrap().modified().unwrap();
    let table = fs::read_to_string(f.path("abl/table.txt")).unwrap();

    let (_, err) = f.ablate("abl", &["--variants", "c,i", "--seeds", "1,2", "--resume"]);
    assert!(err.contains("0 cells computed, 4 reused"), "{err}");
    assert_eq!(fs::metadata(&cell).unwrap().modified().unwrap(), before);
    assert_eq!(fs::read_to_string(f.path("abl/table.txt")).unwrap(), table);

    let (_, err) = f.ablate("abl", &["--variants", "c,i,e", "--seeds", "1,2", "--resume"]);
    assert!(err.contains("2 cells computed, 4 reused"), "{err}");
}

#[test]
fn resume_refuses_a_changed_configuration() {
    let f = Fixture::new("8");
    f.ablate("abl", &["--variants", "c", "--seeds", "1"]);
    let mut args: Vec<String> = vec!["ablate".into(), "--out".into(), s(&f.path("abl")).into()];
    args.extend(f.small());
    args.extend(["--variants", "c", "--seeds", "1", "--resume", "--seed", "9"].map(String::from));
    fails(&args.iter().map(String::as_str).collect::<Vec<_>>(), "usage");
}

#[test]
fn ablation_outputs_are_reproducible() {
    let f = Fixture::new("12");
    f.ablate("a", &["--variants", "e,h", "--seeds", "1,2"]);
    f.ablate("b", &["--variants", "e,h", "--seeds", "1,2", "--jobs", "2"]);
    for file in ["table.txt", "report.json", "cells/h-2.json"] {
        assert_eq!(
            fs::read(f.path("a").join(file)).unwrap(),
            fs::read(f.path("b").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn own_role_ablation_reports_deltas() {
    let f = Fixture::new("12");
    let (text, _) = f.ablate("o", &["--own-role", "e", "--seeds", "1"]);
    assert!(text.contains("delta"));
    let r: Value = serde_json::from_str(&fs::read_to_string(f.path("o/own-role.json")).unwrap()).unwrap();
    assert_eq!(r["cells"].as_array().unwrap().len(), 2);

    let mut args: Vec<String> = vec!["ablate".into(), "--out".into(), s(&f.path("x")).into()];
    args.extend(f.small());
    args.extend(["--own-role", "c", "--seeds", "1"].map(String::from));
    fails(&args.iter().map(String::as_str).collect::<Vec<_>>(), "usage");
}

#[test]
fn task_checkpoint_scores_only_its_role() {
    let f = Fixture::new("20");
    let out = f.train("t", &["--variant", "e", "--task", "tourist"]);
    let text = ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--test",
        s(&f.corpus("test")),
        "--format",
        "json",
    ]);
    let r: Value = serde_json::from_str(&text).unwrap();
    assert!(r["f1"]["tourist"].is_f64());
    assert!(r["f1"]["guide"].is_null());
}

#[test]
fn per_role_tasks_split_each_cell() {
    let f = Fixture::new("12");
    f.ablate("p", &["--variants", "e", "--seeds", "1", "--per-role-tasks"]);
    let cell: Value = serde_json::from_str(&fs::read_to_string(f.path("p/cells/e-1.json")).unwrap()).unwrap();
    assert_eq!(cell["role_thetas"].as_array().unwrap().len(), 2);

    let mut args: Vec<String> = vec!["ablate".into(), "--out".into(), s(&f.path("x")).into()];
    args.extend(f.small());
    args.extend(["--variants", "e", "--task", "guide"].map(String::from));
    fails(&args.iter().map(String::as_str).collect::<Vec<_>>(), "usage");
    let mut args: Vec<String> = vec!["train".into(), "--out".into(), s(&f.path("y")).into()];
    args.extend(f.small());
    args.push("--per-role-tasks".into());
    fails(&args.iter().map(String::as_str).collect::<Vec<_>>(), "usage");
}
