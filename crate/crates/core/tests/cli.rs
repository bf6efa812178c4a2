use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradcell::downstream::metrics::ClassificationReport;
use gradcell::encoder::checkpoint::{load_checkpoint, save_checkpoint};
use gradcell::encoder::{Encoder, EncoderConfig};
use gradcell::preprocess::io::{read_corpus, write_mtx, ProfileCorpus};
use gradcell::synth::{synthetic_counts, SyntheticSpec};

fn gradcell(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradcell"))
        .args(args)
        .env_remove("GRADCELL_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    counts: PathBuf,
    corpus: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (m, _) = synthetic_counts(&SyntheticSpec::new(48, 20, 3, 1)).unwrap();
    let counts = root.join("counts.mtx");
    write_mtx(&counts, &m).unwrap();
    let corpus = root.join("corpus.jsonl");
    let out = gradcell(&["preprocess", "--input", p(&counts), "--format", "mtx", "--output", p(&corpus)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = root.join("run.cfg");
    fs::write(&config, "# tiny run\nbatch_size=8\nmini_batch=3\nlr=0.003\nlr_decay_steps=10\n").unwrap();
    Fixture {
        _dir: dir,
        root,
        counts,
        corpus,
        config,
    }
}

#[test]
fn preprocess_round_trips_and_keeps_input() {
    let f = fixture();
    let before = fs::read(&f.counts).unwrap();
    let again = f.root.join("again.jsonl");
    let out = gradcell(&["preprocess", "--input", p(&f.counts), "--output", p(&again), "--bins", p(&f.root.join("b.txt"))]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(&f.counts).unwrap(), before);
    let (m, _) = synthetic_counts(&SyntheticSpec::new(48, 20, 3, 1)).unwrap();
    assert_eq!(read_corpus(&again).unwrap(), ProfileCorpus::from_counts(&m).unwrap());
    assert!(fs::read_to_string(f.root.join("b.txt")).unwrap().starts_with("edges="));
    assert!(f.corpus.with_extension("bins").exists());
}

#[test]
fn malformed_input_reports_location() {
    let f = fixture();
    let bad = f.root.join("bad.mtx");
    fs::write(&bad, "%%MatrixMarket matrix coordinate integer general\n2 2 1\n1 x 3\n").unwrap();
    let out = gradcell(&["preprocess", "--input", p(&bad), "--output", p(&f.root.join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.mtx:3"));
}

fn pretrain(f: &Fixture, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--config", p(&f.config), "--data", p(&f.corpus), "--out", p(out)];
    args.extend_from_slice(extra);
    gradcell(&args)
}

#[test]
fn pretrain_is_deterministic_and_resumable() {
    let f = fixture();
    let a = f.root.join("a");
    let out = pretrain(&f, &a, &["--steps", "10", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let full = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(full.lines().count(), 10);

    let b = f.root.join("b");
    assert!(pretrain(&f, &b, &["--steps", "10", "--seed", "3"]).status.success());
    assert_eq!(fs::read(b.join("metrics.jsonl")).unwrap(), full.as_bytes());

    let c = f.root.join("c");
    assert!(pretrain(&f, &c, &["--steps", "5", "--seed", "3"]).status.success());
    let resume = c.join("final.ckpt");
    assert!(pretrain(&f, &c, &["--steps", "10", "--seed", "3", "--resume", p(&resume)]).status.success());
    assert_eq!(fs::read_to_string(c.join("metrics.jsonl")).unwrap(), full);
}

#[test]
fn seed_falls_back_to_environment() {
    let f = fixture();
    let flag = f.root.join("flag");
    assert!(pretrain(&f, &flag, &["--steps", "2", "--seed", "9"]).status.success());
    let env = f.root.join("env");
    let out = Command::new(env!("CARGO_BIN_EXE_gradcell"))
        .args(["pretrain", "--config", p(&f.config), "--data", p(&f.corpus), "--out", p(&env), "--steps", "2"])
        .env("GRADCELL_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        fs::read(flag.join("metrics.jsonl")).unwrap(),
        fs::read(env.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let f = fixture();
    let cfg = f.root.join("lr0.cfg");
    fs::write(&cfg, "batch_size=8\nmini_batch=4\nlr=0\nseed=5\n").unwrap();
    let out_dir = f.root.join("lr0");
    let out = gradcell(&["pretrain", "--config", p(&cfg), "--data", p(&f.corpus), "--out", p(&out_dir), "--steps", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trained = load_checkpoint(&out_dir.join("final.ckpt")).unwrap();
    let mut init = Encoder::new(trained.config.clone(), 5).unwrap();
    init.params.round_to_f32();
    assert_eq!(trained.params.fingerprint(), init.params.fingerprint());
}

#[test]
fn config_errors_exit_one_before_training() {
    let f = fixture();
    let cfg = f.root.join("bad.cfg");
    fs::write(&cfg, "batch_size=8\nwarmup=3\n").unwrap();
    let out_dir = f.root.join("never");
    let out = gradcell(&["pretrain", "--config", p(&cfg), "--data", p(&f.corpus), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg:2"));
    assert!(!out_dir.exists());
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let out = gradcell(&["verify", "--batch", "8", "--chunks", "1,2,8", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    for t in ["1", "2", "8"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("t={t} "))), "{text}");
    }
    let bad = gradcell(&["verify", "--batch", "8", "--chunks", "2", "--inject-replay-fault"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn memplan_prints_operating_points() {
    let out = gradcell(&["memplan", "--budget", "40", "--mini-batch", "256"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let len: usize = text.lines().nth(1).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((45..=55).contains(&len));
    let out = gradcell(&["memplan", "--budget", "80", "--mini-batch", "256"]);
    let doubled: usize = String::from_utf8_lossy(&out.stdout).lines().nth(1).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(doubled >= 2 * len && doubled <= 2 * len + 3);
    let eng = gradcell(&["memplan", "--budget", "1", "--seq-len", "64", "--model-preset", "engine"]);
    assert!(eng.status.success());
}

#[test]
fn finetune_and_eval() {
    let f = fixture();
    let corpus = read_corpus(&f.corpus).unwrap();
    let ckpt = f.root.join("init.ckpt");
    save_checkpoint(&ckpt, &Encoder::new(EncoderConfig::tiny(corpus.n_genes), 2).unwrap()).unwrap();
    let labels = f.root.join("labels.csv");
    let rows: String = (0..48).map(|c| format!("{c},{}\n", ["B", "T", "NK"][c % 3])).collect();
    fs::write(&labels, format!("cell,label\n{rows}")).unwrap();
    let cfg = f.root.join("ft.cfg");
    fs::write(&cfg, "ft_epochs=3\nft_batch_size=8\nft_lr=0.01\nhead_hidden=8\n").unwrap();
    let out_dir = f.root.join("ft");
    let args = [
        "finetune", "--task", "annotation", "--checkpoint", p(&ckpt), "--data", p(&f.corpus), "--labels", p(&labels),
        "--split", "0.6,0.1,4", "--config", p(&cfg), "--out", p(&out_dir),
    ];
    let out = gradcell(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
    assert!(report.contains("macro_f1="));
    assert!(gradcell(&args).stdout == out.stdout);

    let preds = fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    let (mut t, mut pr) = (Vec::new(), Vec::new());
    for line in preds.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        t.push(v[1] as usize);
        pr.push(v[2] as usize);
    }
    let k = t.iter().chain(&pr).max().unwrap() + 1;
    let oracle = ClassificationReport::compute(&t, &pr, k).unwrap();
    let ev = gradcell(&["eval", "--predictions", p(&out_dir.join("predictions.csv"))]);
    assert!(ev.status.success());
    let text = String::from_utf8_lossy(&ev.stdout);
    assert!(text.contains(&format!("macro_f1={:?}\n", oracle.macro_f1)));
    assert!(text.contains(&format!("accuracy={:?}\n", oracle.accuracy)));

    let saved = gradcell(&[
        "eval", "--head", p(&out_dir.join("head.bin")), "--checkpoint", p(&ckpt), "--data", p(&f.corpus), "--labels",
        p(&labels), "--split", "0.6,0.1,4", "--config", p(&cfg),
    ]);
    assert!(saved.status.success(), "{}", String::from_utf8_lossy(&saved.stderr));
    assert!(String::from_utf8_lossy(&saved.stdout).replace("task=annotation", "") == report.replace("task=annotation", ""));

    let missing = gradcell(&[
        "finetune", "--task", "annotation", "--checkpoint", p(&ckpt), "--data", p(&f.corpus), "--labels",
        p(&f.root.join("nope.csv")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}
