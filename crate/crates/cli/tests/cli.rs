use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn itersrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itersrl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = itersrl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small corpus, baseline and structured refiner under `dir`.
fn pipeline(dir: &Path) {
    let data = dir.join("data");
    ok(&[
        "gen-synth",
        "--seed",
        "7",
        "--sentences",
        "40",
        "--out",
        p(&data),
    ]);
    for f in [
        "corpus.conll",
        "manifest.json",
        "train.conll",
        "dev.conll",
        "test.conll",
    ] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let (train, dev) = (data.join("train.conll"), data.join("dev.conll"));
    ok(&[
        "train-baseline",
        "--train",
        p(&train),
        "--dev",
        p(&dev),
        "--out",
        p(&dir.join("base")),
        "preset=desk",
        "epochs=2",
        "lr=0.002",
    ]);
    ok(&[
        "--threads",
        "1",
        "train-refiner",
        "--train",
        p(&train),
        "--dev",
        p(&dev),
        "--baseline",
        p(&dir.join("base")),
        "--out",
        p(&dir.join("refiner")),
        "--iterations",
        "2",
        "epochs=2",
    ]);
}

#[test]
fn end_to_end_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    let test = dir.join("data/test.conll");
    let predict = |mode: &str, iterations: &str, out: &str| {
        ok(&[
            "predict",
            "--baseline",
            p(&dir.join("base")),
            "--refiner",
            p(&dir.join("refiner")),
            "--mode",
            mode,
            "--iterations",
            iterations,
            "--input",
            p(&test),
            "--out",
            p(&dir.join(out)),
        ]);
        fs::read(dir.join(out)).unwrap()
    };
    let structured = predict("structured", "2", "a.conll");
    assert_eq!(structured, predict("structured", "2", "b.conll"));
    assert_eq!(
        predict("baseline", "2", "base.conll"),
        predict("structured", "0", "zero.conll")
    );

    let report = dir.join("report.txt");
    ok(&[
        "evaluate",
        p(&test),
        p(&dir.join("a.conll")),
        "--out",
        p(&report),
    ]);
    assert!(fs::read_to_string(&report).unwrap().contains("F1"));

    let json = dir.join("report.jsonl");
    ok(&[
        "evaluate",
        p(&test),
        p(&dir.join("a.conll")),
        "--format",
        "json",
        "--out",
        p(&json),
    ]);
    for line in fs::read_to_string(&json).unwrap().lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let analysis = dir.join("analysis");
    ok(&[
        "analyze",
        p(&test),
        p(&dir.join("base.conll")),
        p(&dir.join("a.conll")),
        "--out",
        p(&analysis),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("violations.json")).unwrap())
            .unwrap();
    assert!(v["baseline"]["unique"].is_u64());
    assert!(fs::read_to_string(analysis.join("confusion.csv"))
        .unwrap()
        .starts_with("gold"));
    assert!(analysis.join("correction.csv").exists());

    // the self refiner cannot be used as a structured one
    let out = itersrl(&[
        "predict",
        "--baseline",
        p(&dir.join("base")),
        "--refiner",
        p(&dir.join("refiner")),
        "--mode",
        "self",
        "--input",
        p(&test),
        "--out",
        p(&dir.join("c.conll")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn gold_against_itself_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen-synth",
        "--sentences",
        "20",
        "--out",
        p(&data),
        "max_fillers=2",
    ]);
    let gold = data.join("corpus.conll");
    let json = tmp.path().join("r.jsonl");
    ok(&[
        "evaluate",
        p(&gold),
        p(&gold),
        "--format",
        "json",
        "--out",
        p(&json),
    ]);
    let first: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&json).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["f1"], 1.0);
}

#[test]
fn gen_synth_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-synth", "--sentences", "30", "--out", p(&a)]);
    ok(&["gen-synth", "--sentences", "30", "--out", p(&b)]);
    for f in [
        "corpus.conll",
        "manifest.json",
        "train.conll",
        "dev.conll",
        "test.conll",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn errors_are_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec![
            "gen-synth".into(),
            "--out".into(),
            p(tmp.path()).into(),
            "nonsense=1".into(),
        ],
        vec![
            "gen-synth".into(),
            "--out".into(),
            p(tmp.path()).into(),
            "q=2".into(),
        ],
        vec![
            "evaluate".into(),
            "missing.conll".into(),
            "missing.conll".into(),
            "--out".into(),
            "r.txt".into(),
        ],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = itersrl(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(out.stdout.is_empty());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "));
    }
}

#[test]
fn unknown_flags_fail_and_help_lists_flags() {
    assert!(!itersrl(&["evaluate", "--bogus"]).status.success());
    let expect = [
        (
            "gen-synth",
            &["--config", "--seed", "--sentences", "--split", "--out"][..],
        ),
        (
            "train-baseline",
            &[
                "--config",
                "--seed",
                "--train",
                "--dev",
                "--out",
                "--vectors",
                "--threads",
            ][..],
        ),
        (
            "train-refiner",
            &[
                "--config",
                "--seed",
                "--baseline",
                "--mode",
                "--iterations",
                "--untied",
                "--no-gumbel",
                "--out",
            ][..],
        ),
        (
            "predict",
            &[
                "--baseline",
                "--refiner",
                "--mode",
                "--iterations",
                "--input",
                "--out",
            ][..],
        ),
        ("evaluate", &["--format", "--out"][..]),
        ("analyze", &["--labels", "--out"][..]),
    ];
    for (cmd, flags) in expect {
        let help = String::from_utf8(ok(&[cmd, "--help"]).stdout).unwrap();
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
