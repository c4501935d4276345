use std::path::Path;
use std::process::{Command, Output};

fn segpos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segpos"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn small_gen(out: &Path, seed: &str) -> Output {
    segpos(&[
        "gen",
        "--seed",
        seed,
        "--out",
        arg(out),
        "--train-docs",
        "60",
        "--dev-docs",
        "8",
        "--test-docs",
        "4",
        "--contrastive",
        "20",
    ])
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = segpos(&["gen", "--seed", "7", "--out", arg(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in [
        "train.src",
        "train.tgt",
        "dev.src",
        "dev.tgt",
        "test.src",
        "test.tgt",
        "contrastive.jsonl",
        "synthetic.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    small_gen(&c, "8");
    assert_ne!(
        std::fs::read(a.join("train.src")).unwrap(),
        std::fs::read(c.join("train.src")).unwrap()
    );
}

#[test]
fn eval_metrics_prints_weighted_scores() {
    let out = segpos(&[
        "eval-metrics",
        "--deixis",
        "50.00",
        "--lex",
        "45.87",
        "--ellinf",
        "51.80",
        "--ellvp",
        "27.00",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "voita=46.64"), "{text}");
    assert!(text.lines().any(|l| l == "voita_avg=43.67"), "{text}");
    let out = segpos(&[
        "eval-metrics",
        "--d0",
        "68.7",
        "--d1",
        "32.9",
        "--d2",
        "46.7",
        "--d3",
        "51.4",
        "--d-gt-3",
        "64.4",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("cp=") && text.contains("cp_d_gt_0=") && text.contains("cp_avg="),
        "{text}"
    );
}

#[test]
fn analyze_pe_crossing_below_256() {
    let out = segpos(&["analyze-pe", "--positions", "1024", "--dims", "512"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("component_index,eigenvalue,cumulative_ratio"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 512);
    let m = rows.iter().find(|r| r.1 >= 0.999).unwrap().0;
    assert!(m < 256, "crossing at {m}");
    assert!((rows.last().unwrap().1 - 1.0).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    assert_eq!(segpos(&["--help"]).status.code(), Some(0));
    assert_eq!(segpos(&["gen", "--help"]).status.code(), Some(0));
    assert_eq!(segpos(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(segpos(&["eval-metrics", "--deixis", "x"]).status.code(), Some(1));
    assert_eq!(segpos(&["eval-metrics", "--deixis", "50"]).status.code(), Some(1));
    assert_eq!(segpos(&["eval-metrics"]).status.code(), Some(1));
    assert_eq!(segpos(&["train", "--scheme", "spiral"]).status.code(), Some(1));
    let missing = segpos(&["translate", "--checkpoint", "/definitely/not/here.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
    assert_eq!(segpos(&["analyze-pe", "--dims", "7"]).status.code(), Some(1));
}

#[test]
fn train_translate_evaluate_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(small_gen(&data, "3").status.success());
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let config = dir.path().join("config.json");
        std::fs::write(
            &config,
            r#"{"k": 2, "scheme": "shift", "persistent": true, "d_model": 16, "heads": 2, "d_ff": 32}"#,
        )
        .unwrap();
        let out = segpos(&[
            "--threads",
            "1",
            "train",
            "--config",
            arg(&config),
            "--train-src",
            arg(&data.join("train.src")),
            "--train-tgt",
            arg(&data.join("train.tgt")),
            "--dev-src",
            arg(&data.join("dev.src")),
            "--dev-tgt",
            arg(&data.join("dev.tgt")),
            "--out",
            arg(&out_dir),
            "--max-steps",
            "30",
            "--validate-every",
            "10",
            "--warmup",
            "10",
            "--batch-tokens",
            "600",
            "--seed",
            "5",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let ckpt = out_dir.join("averaged.ckpt");
        let tr = segpos(&[
            "--threads",
            "1",
            "translate",
            "--checkpoint",
            arg(&ckpt),
            "--input",
            arg(&data.join("test.src")),
            "--beam",
            "2",
        ]);
        assert!(tr.status.success(), "{}", String::from_utf8_lossy(&tr.stderr));
        let ev = segpos(&[
            "eval-contrastive",
            "--checkpoint",
            arg(&ckpt),
            "--set",
            arg(&data.join("contrastive.jsonl")),
        ]);
        assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
        let report: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
        assert_eq!(report["per_label"]["d=1"]["n"], 20);
        (
            std::fs::read(out_dir.join("train_log.jsonl")).unwrap(),
            tr.stdout,
            out_dir,
        )
    };
    let (log_a, tr_a, dir_a) = run("a");
    let (log_b, tr_b, _) = run("b");
    assert_eq!(log_a, log_b);
    assert_eq!(tr_a, tr_b);
    // one output line per source line, blank lines between documents kept
    let src = std::fs::read_to_string(data.join("test.src")).unwrap();
    let translated = String::from_utf8(tr_a).unwrap();
    assert_eq!(src.lines().count(), translated.lines().count());
    let blanks = |s: &str| {
        s.lines()
            .enumerate()
            .filter(|(_, l)| l.is_empty())
            .map(|(i, _)| i)
            .collect::<Vec<_>>()
    };
    assert_eq!(blanks(&src), blanks(&translated));

    let avg = dir.path().join("avg.ckpt");
    let out = segpos(&[
        "average-checkpoints",
        "--log",
        arg(&dir_a.join("train_log.jsonl")),
        "--n",
        "2",
        "--out",
        arg(&avg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(avg.exists());
}
