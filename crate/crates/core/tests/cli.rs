mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use hred::numerics::Prng;

use common::SyntheticLog;

fn hred(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_hred"))
        .args(args)
        .env_remove("HRED_SEED")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Raw log → splits → vocabulary → checkpoint, built once for all tests.
fn trained() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let gen = SyntheticLog::default();
        let mut prng = Prng::new(99);
        let sessions = gen.sessions(3000, 1500, &mut prng);
        let mut log = String::new();
        for (n, sess) in sessions.iter().enumerate() {
            for (i, q) in sess.queries.iter().enumerate() {
                // upper-case and punctuation exercise normalization
                let raw = if i == 0 { q.to_uppercase() } else { format!("{q}!") };
                log.push_str(&format!("{}\t{raw}\t{}\n", sess.user_id, 10_000 * n + 60 * i));
            }
        }
        log.push_str("malformed line without tabs\n");
        fs::write(root.join("log.tsv"), log).unwrap();
        let n = sessions.len();
        let cutoffs = format!("{},{},{}", 10_000 * (n * 7 / 10), 10_000 * (n * 8 / 10), 10_000 * (n * 9 / 10));
        fs::write(root.join("train.conf"), "d_h = 8\nd_s = 8\nd_e = 4\nmax_epochs = 2\nprecision = f32\n").unwrap();

        let splits = root.join("splits");
        let out = ok(&hred(
            &["preprocess", "--log", s(&root.join("log.tsv")), "--cutoffs", &cutoffs, "--out", s(&splits)],
            "",
        ));
        assert!(out.contains("malformed_lines = 1"), "{out}");
        for f in ["background.sessions", "train.sessions", "valid.sessions", "test.sessions"] {
            assert!(splits.join(f).exists(), "{f}");
        }
        ok(&hred(
            &["vocab", "--sessions", s(&splits), "--vocab-size", "500", "--out", s(&root.join("vocab.txt"))],
            "",
        ));
        let out = ok(&hred(
            &[
                "train",
                "--sessions",
                s(&splits),
                "--vocab",
                s(&root.join("vocab.txt")),
                "--checkpoint",
                s(&root.join("m.ckpt")),
                "--config",
                s(&root.join("train.conf")),
                "--seed",
                "3",
            ],
            "",
        ));
        assert!(out.contains("epochs = 2"), "{out}");
        Workspace { _dir: dir, root }
    })
}

fn model_args(ws: &Workspace) -> Vec<String> {
    vec![
        "--checkpoint".into(),
        ws.path("m.ckpt").display().to_string(),
        "--vocab".into(),
        ws.path("vocab.txt").display().to_string(),
    ]
}

fn run_with(cmd: &str, extra: &[&str], ws: &Workspace, stdin: &str) -> Output {
    let mut args: Vec<String> = vec![cmd.into()];
    args.extend(model_args(ws));
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    hred(&refs, stdin)
}

#[test]
fn manifest_echoes_training_config() {
    let ws = trained();
    let manifest = fs::read_to_string(ws.path("m.ckpt.manifest")).unwrap();
    assert!(manifest.contains("seed = 3"));
    assert!(manifest.contains("d_h = 8"));
    assert!(manifest.contains("max_epochs = 2"));
}

#[test]
fn suggest_prints_ranked_unique_suggestions() {
    let ws = trained();
    let out = ok(&run_with("suggest", &["--context", "topic000\tmisc00", "--k", "5"], ws, ""));
    let lines: Vec<&str> = out.lines().collect();
    assert!(!lines.is_empty() && lines.len() <= 5, "{out}");
    let mut prev = f64::INFINITY;
    let mut texts = Vec::new();
    for l in &lines {
        let (raw, text) = l.split_once('\t').unwrap();
        assert_eq!(raw.split('.').nth(1).unwrap().len(), 6);
        let score: f64 = raw.parse().unwrap();
        assert!(score <= prev && score <= 0.0);
        prev = score;
        assert!(!text.is_empty() && !texts.contains(&text));
        texts.push(text);
    }
    let again = ok(&run_with("suggest", &["--context", "topic000\tmisc00", "--k", "5"], ws, ""));
    assert_eq!(out, again);
}

#[test]
fn rescore_reads_candidates_from_stdin() {
    let ws = trained();
    let out = ok(&run_with("rescore", &["--context", "topic000\tmisc00"], ws, "goal003 page\n\nzzz unknown\n"));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    for l in lines {
        let (score, _) = l.split_once('\t').unwrap();
        let v: f64 = score.parse().unwrap();
        assert!(v.is_finite() && v < 0.0);
        assert_eq!(score.split('.').nth(1).unwrap().len(), 6);
    }
}

#[test]
fn interactive_suggest_answers_each_line() {
    let ws = trained();
    let before = fs::read(ws.path("m.ckpt")).unwrap();
    let out = ok(&run_with("suggest", &["--interactive", "--k", "3"], ws, "topic001\tmisc01\n\ntopic002\n"));
    assert!(out.matches("> ").count() >= 3, "{out}");
    assert!(out.lines().filter(|l| l.contains('\t')).count() >= 2);
    assert_eq!(before, fs::read(ws.path("m.ckpt")).unwrap());
}

#[test]
fn eval_reports_are_byte_identical_for_a_fixed_seed() {
    let ws = trained();
    let splits = ws.path("splits");
    let run = |name: &str| {
        let report = ws.path(name);
        ok(&run_with(
            "eval",
            &["--sessions", s(&splits), "--scenario", "robust", "--seed", "7", "--out", s(&report)],
            ws,
            "",
        ));
        (fs::read(&report).unwrap(), fs::read(format!("{}.instances", report.display())).unwrap())
    };
    let (a, ia) = run("r1.txt");
    let (b, ib) = run("r2.txt");
    assert_eq!(a, b);
    assert_eq!(ia, ib);
    let text = String::from_utf8(a).unwrap();
    for key in ["scenario = robust", "config.seed = 7", "adj.mrr = ", "hred.mrr = ", "features_hred.mrr = ", "ranker.algorithm"] {
        assert!(text.contains(key), "missing {key}:\n{text}");
    }
    let first = String::from_utf8(ia).unwrap();
    let line = first.lines().next().expect("at least one instance");
    assert_eq!(line.split("\t|||\t").nth(2).unwrap().split('\t').count(), 20);
}

#[test]
fn eval_without_a_model_reports_baselines() {
    let ws = trained();
    let out = ok(&hred(
        &["eval", "--sessions", s(&ws.path("splits")), "--scenario", "next", "--qvmm-order", "2"],
        "",
    ));
    assert!(out.contains("adj.mrr = 0."), "{out}");
    assert!(out.contains("hred.mrr = absent"));
    assert!(out.contains("config.qvmm_order = 2"));
}

#[test]
fn dumps_gates_and_embeddings() {
    let ws = trained();
    let out = ok(&run_with("dump-gates", &["--context", "nav00\ttopic000\tmisc00"], ws, ""));
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let cols: Vec<&str> = r.split('\t').collect();
        assert_eq!(cols[2].split(' ').count(), 8);
    }
    let emb = ws.path("emb.txt");
    ok(&run_with("dump-embeddings", &["--sessions", s(&ws.path("splits")), "--out", s(&emb)], ws, ""));
    let text = fs::read_to_string(emb).unwrap();
    let vocab_len = fs::read_to_string(ws.path("vocab.txt")).unwrap().lines().count() + 2;
    assert_eq!(text.lines().filter(|l| l.starts_with("word\t")).count(), vocab_len);
    let q = text.lines().find(|l| l.starts_with("query\t")).unwrap();
    assert_eq!(q.split('\t').nth(2).unwrap().split(' ').count(), 8);
}

#[test]
fn missing_session_directory_is_a_data_error() {
    let ws = trained();
    let out = hred(
        &[
            "train",
            "--sessions",
            "/no/such/dir",
            "--vocab",
            s(&ws.path("vocab.txt")),
            "--checkpoint",
            s(&ws.path("x.ckpt")),
        ],
        "",
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/dir"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(hred(&["frobnicate"], "").status.code(), Some(1));
    assert_eq!(hred(&["suggest", "--bogus"], "").status.code(), Some(1));
    assert_eq!(hred(&["--help"], "").status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "not_a_key = 1\n").unwrap();
    let out = hred(&["vocab", "--config", s(&conf), "--sessions", "x", "--out", "y"], "");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn wrong_vocabulary_is_rejected() {
    let ws = trained();
    let other = ws.path("other_vocab.txt");
    fs::write(&other, "lake\nerie\n").unwrap();
    let out = hred(
        &["suggest", "--checkpoint", s(&ws.path("m.ckpt")), "--vocab", s(&other), "--context", "lake"],
        "",
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}
