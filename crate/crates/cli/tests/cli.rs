use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn biacl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biacl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Monolingual target text, a target-to-source dictionary and a small parallel file.
fn fixture(dir: &Path) {
    let words = ["ta", "tb", "tc", "td", "te"];
    let mut mono = String::new();
    for i in 0..40 {
        let s: Vec<&str> = (0..3 + i % 3).map(|j| words[(i * 7 + j * 3) % 5]).collect();
        mono.push_str(&s.join(" "));
        mono.push('\n');
    }
    mono.push_str("ta tb\n! ?\n\n");
    write(dir, "mono.txt", &mono);
    write(dir, "t-s.tsv", "# tgt to src\nta\tsa\ntb\tsb\ntc\tsc\ntd\tsd\n");
    write(dir, "par.tsv", "sa sb\tta tb\nsc sd\ttc td\nsa sc sb\tta tc tb\n");
}

fn train_config(dir: &Path) -> PathBuf {
    write(
        dir,
        "train.cfg",
        "data=prep\ndict=t-s.tsv\nparallel=par.tsv\nwarm_epochs=2\nd_model=8\nlayers=1\nheads=1\nff_dim=16\n\
         max_positions=12\nepochs=1\nbatch_size=8\nbeam=2\nmax_len=10\nlr=1e-3\nseed=3\n",
    )
}

fn prepared(dir: &Path) {
    fixture(dir);
    ok(&biacl(
        &["prepare", "--mono", "mono.txt", "--dict", "t-s.tsv", "--out", "prep", "--phi", "0.5"],
        dir,
    ));
}

#[test]
fn pivot_dict_composes_and_reports() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "s-en.tsv", "sa\tea\nsb\teb\nsc\tez\n");
    write(d.path(), "en-t.tsv", "ea\tta\nea\tta2\neb\ttb\n");
    let out = ok(&biacl(&["pivot-dict", "--src-en", "s-en.tsv", "--en-tgt", "en-t.tsv", "--out", "s-t.tsv"], d.path()));
    assert_eq!(fs::read_to_string(d.path().join("s-t.tsv")).unwrap(), "sa\tta\nsa\tta2\nsb\ttb\n");
    assert!(out.contains("pivoted\tsrc-tgt\tpairs 3\tsources 2"), "{out}");
    assert!(d.path().join("s-t.tsv.manifest.json").exists());
}

#[test]
fn prepare_writes_every_artifact() {
    let d = tempfile::tempdir().unwrap();
    prepared(d.path());
    let p = d.path().join("prep");
    let corpus = fs::read_to_string(p.join("corpus.txt")).unwrap();
    let mono = fs::read_to_string(d.path().join("mono.txt")).unwrap();
    let distinct: std::collections::HashSet<&str> =
        mono.lines().filter(|l| !l.is_empty() && *l != "! ?").collect();
    assert_eq!(corpus.lines().count(), distinct.len());
    let vocab = fs::read_to_string(p.join("vocab.txt")).unwrap();
    let tokens: Vec<&str> = vocab.lines().collect();
    assert_eq!(&tokens[..4], &["<unk>", "</s>", "__src__", "__tgt__"]);
    assert!(tokens.contains(&"sa"));
    let report = fs::read_to_string(p.join("filter_report.txt")).unwrap();
    assert!(report.contains("punctuation\t1") && report.contains("empty\t1"), "{report}");
    let plan = fs::read_to_string(p.join("curriculum.tsv")).unwrap();
    let cov: Vec<f64> = plan.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert!(cov.windows(2).all(|w| w[0] >= w[1]) && cov.iter().all(|&c| c >= 0.5));
    let syn = fs::read_to_string(p.join("syn_lexicon.tsv")).unwrap();
    assert_eq!(syn.lines().count(), cov.len());
    assert!(syn.lines().all(|l| l.split('\t').count() == 2));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "prepare");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn train_decode_evaluate_and_replay() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    prepared(dir);
    train_config(dir);
    ok(&biacl(&["train", "--config", "train.cfg", "--out", "run1"], dir));
    let log = fs::read_to_string(dir.join("run1/train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step\tae_bkd\tae_fwd\tcl_bkd\tcl_fwd\tstar\tskipped");
    assert!(lines.len() > 1 && lines[1..].iter().all(|l| l.split('\t').count() == 7));

    ok(&biacl(&["train", "--config", "train.cfg", "--out", "run2"], dir));
    for f in ["model.ckpt", "train.log"] {
        assert_eq!(fs::read(dir.join("run1").join(f)).unwrap(), fs::read(dir.join("run2").join(f)).unwrap(), "{f}");
    }
    let out = ok(&biacl(&["replay", "run1/manifest.json"], dir));
    assert!(out.contains("replay matches 4 recorded outputs"), "{out}");

    write(dir, "test.src", "sa sb\nsc sd sa\n");
    write(dir, "test.ref", "ta tb\ntc td ta\n");
    let args = ["--model", "run1/model.ckpt", "--from", "src", "--to", "tgt", "--beam", "2"];
    let plain = ok(&biacl(&[&["decode", "--input", "test.src"], &args[..]].concat(), dir));
    assert_eq!(plain.lines().count(), 2);
    write(dir, "s-t.tsv", "sa\tta\nsc\ttc\n");
    let cons = ok(&biacl(
        &[&["decode", "--input", "test.src", "--constraints", "dict", "s-t.tsv", "--out", "hyp.txt"], &args[..]].concat(),
        dir,
    ));
    assert!(cons.is_empty());
    let hyp = fs::read_to_string(dir.join("hyp.txt")).unwrap();
    let hyp: Vec<&str> = hyp.lines().collect();
    assert_eq!(hyp.len(), 2);
    for (line, want) in hyp.iter().zip(["ta", "tc"]) {
        assert!(line.is_empty() || line.split(' ').any(|w| w == want), "{line}");
    }
    assert!(dir.join("hyp.txt.manifest.json").exists());

    let report = ok(&biacl(
        &[&["evaluate", "--test", "test.src", "--refs", "test.ref", "--isotropy", "--out", "eval.tsv"], &args[..]].concat(),
        dir,
    ));
    assert!(report.contains("side:    encoder") && report.contains("side:    decoder"), "{report}");
    let tsv = fs::read_to_string(dir.join("eval.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn all_off_mask_keeps_the_initial_model() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    prepared(dir);
    train_config(dir);
    ok(&biacl(&["train", "--config", "train.cfg", "--out", "base"], dir));
    ok(&biacl(
        &[
            "train", "--config", "train.cfg", "--out", "off", "--ablation", "0000", "--set", "init=base/model.ckpt", "--set",
            "warm_epochs=0",
        ],
        dir,
    ));
    assert_eq!(fs::read(dir.join("base/model.ckpt")).unwrap(), fs::read(dir.join("off/model.ckpt")).unwrap());
}

#[test]
fn config_errors_are_listed_together() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    write(dir, "bad.cfg", "lambda=1.5\nbeam=0\nwhat=1\n");
    let out = biacl(&["train", "--config", "bad.cfg", "--out", "x"], dir);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["lambda 1.5", "beam must be at least 1", "what", "data is required"] {
        assert!(err.contains(needle), "{needle} not in {err}");
    }
}

#[test]
fn documented_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let out = biacl(&["prepare", "--mono", "missing.txt", "--dict", "missing.tsv", "--out", "p"], dir);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(biacl(&["train", "--bogus"], dir).status.code(), Some(2));
    prepared(dir);
    train_config(dir);
    let out = biacl(&["train", "--config", "train.cfg", "--out", "r", "--ablation", "12"], dir);
    assert_eq!(out.status.code(), Some(2));
    write(dir, "junk.ckpt", "not a checkpoint");
    write(dir, "vocab.txt", "<unk>\n</s>\n");
    let out = biacl(&["decode", "--model", "junk.ckpt", "--from", "a", "--to", "b", "--input", "mono.txt"], dir);
    assert_eq!(out.status.code(), Some(5));
    let help = ok(&biacl(&["--help"], dir));
    assert!(help.contains("8  replay produced different outputs"));
}

#[test]
fn replay_detects_changed_outputs() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    prepared(dir);
    let m = dir.join("prep/manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
    v["outputs"][0]["sha256"] = serde_json::Value::String("0".repeat(64));
    fs::write(&m, v.to_string()).unwrap();
    let out = biacl(&["replay", "prep/manifest.json"], dir);
    assert_eq!(out.status.code(), Some(8));
}

#[test]
fn synth_experiment_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let args = ["synth-experiment", "--seed", "4", "--mono", "150", "--epochs", "1"];
    ok(&biacl(&[&args[..], &["--out", "a"]].concat(), dir));
    ok(&biacl(&[&args[..], &["--out", "b"]].concat(), dir));
    let a = fs::read_to_string(dir.join("a/results.tsv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.join("b/results.tsv")).unwrap());
    let rows: Vec<&str> = a.lines().collect();
    assert_eq!(rows[0], "system\tpair\tBLEU\tI1_enc\tI2_enc\tI1_dec\tI2_dec");
    let systems: Vec<&str> = rows[1..].iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(systems, ["warm_start", "syn_lexicon", "bi_acl"]);
}
