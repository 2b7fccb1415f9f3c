use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gatera");

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn gatera(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("GATERA_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_documents_every_flag() {
    let expected: [(&str, &[&str]); 6] = [
        ("pretrain", &["--config", "--seed", "--out"]),
        (
            "finetune",
            &[
                "--adapter",
                "--rank",
                "--targets",
                "--lambda-ent",
                "--base",
                "--seed",
            ],
        ),
        ("verify", &["--suite"]),
        ("gates", &["--checkpoint", "--base", "--examples"]),
        ("compare", &["--adapters", "--seeds", "--base"]),
        ("ablate", &["--axis", "--desk-ranks", "--seeds", "--base"]),
    ];
    for (cmd, flags) in expected {
        let o = Command::new(BIN).args([cmd, "--help"]).output().unwrap();
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["finetune", "--adapter", "dora"][..],
        &["verify", "--suite", "speed"],
        &["ablate", "--axis", "depth"],
        &["finetune", "--targets", "q,o"],
        &["pretrain", "--bogus"],
        &[],
        &["pretrain", "finetune"],
    ] {
        let o = gatera(dir.path(), args);
        assert_eq!(code(&o), 2, "{args:?}");
    }
    let o = gatera(dir.path(), &["finetune", "--adapter", "dora"]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("none, lora, hira, gatera, static-gatera"));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nrnak = 3\n").unwrap();
    assert_eq!(
        code(&gatera(
            dir.path(),
            &["pretrain", "--config", bad.to_str().unwrap()]
        )),
        2
    );
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gatera(dir.path(), &["finetune"])), 3);
    assert_eq!(
        code(&gatera(
            dir.path(),
            &["pretrain", "--config", "/no/such.toml"]
        )),
        3
    );
    let junk = dir.path().join("base.grk");
    fs::write(&junk, b"GRK1\x05").unwrap();
    assert_eq!(code(&gatera(dir.path(), &["compare"])), 3);
}

#[test]
fn verify_suites_exit_0_and_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    for suite in ["grad", "equivalence", "theorem", "suppression"] {
        let o = gatera(dir.path(), &["verify", "--suite", suite]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        let report = fs::read_to_string(dir.path().join(format!("verify_{suite}.csv"))).unwrap();
        assert!(report.starts_with("suite,check,value,threshold,passed\n"));
        assert!(report.lines().skip(1).all(|l| l.ends_with(",true")));
    }
    let audit = fs::read_to_string(dir.path().join("audit_random.csv")).unwrap();
    assert_eq!(audit.lines().count(), 1001);
    assert!(audit.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let run = |seed_flag: Option<&str>, env: Option<&str>, config: &Path| {
        let mut c = Command::new(BIN);
        c.args(["pretrain", "--config"])
            .arg(config)
            .arg("--out")
            .arg(dir.path());
        if let Some(s) = seed_flag {
            c.args(["--seed", s]);
        }
        match env {
            Some(e) => c.env("GATERA_SEED", e),
            None => c.env_remove("GATERA_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        gatera_lab::config::load(&dir.path().join("base.toml"))
            .unwrap()
            .config
            .seed
    };
    assert_eq!(run(None, None, &cfg), 0);
    assert_eq!(run(None, Some("5"), &cfg), 5);
    assert_eq!(run(Some("6"), Some("5"), &cfg), 6);
    let seeded = dir.path().join("seeded.toml");
    fs::write(
        &seeded,
        format!("seed = 3\n{}", fs::read_to_string(&cfg).unwrap()),
    )
    .unwrap();
    assert_eq!(run(None, Some("5"), &seeded), 3);
    assert_eq!(run(Some("6"), Some("5"), &seeded), 6);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();

    let o = gatera(out, &["pretrain", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("base.grk").exists() && out.join("pretrain_metrics.csv").exists());

    let o = gatera(out, &["finetune", "--config", cfg, "--adapter", "none"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("trainable parameters: 0 (0.0000%"));

    let single = gatera(
        out,
        &[
            "finetune",
            "--config",
            cfg,
            "--targets",
            "q",
            "--adapter",
            "hira",
        ],
    );
    let all = gatera(
        out,
        &[
            "finetune",
            "--config",
            cfg,
            "--targets",
            "q,k,v,fc",
            "--adapter",
            "hira",
            "--rank",
            "2",
        ],
    );
    let count = |o: &Output| -> usize {
        let text = stdout(o);
        let line = text
            .lines()
            .find(|l| l.starts_with("trainable parameters:"))
            .unwrap();
        line.split_whitespace().nth(2).unwrap().parse().unwrap()
    };
    // q, k and v are 16 -> 16; fc is 16 -> 32, so it carries 2 * 16 more.
    assert_eq!(count(&all), 4 * count(&single) + 2 * 16);

    let o = gatera(
        out,
        &[
            "finetune",
            "--config",
            cfg,
            "--adapter",
            "gatera",
            "--lambda-ent",
            "0",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code(&o), 0);
    let metrics = fs::read(out.join("metrics_gatera_s1.csv")).unwrap();
    let sidecar = gatera_lab::config::load(&out.join("adapter_gatera_s1.toml")).unwrap();
    assert_eq!(sidecar.config.train.lambda_ent, 0.0);
    assert_eq!(sidecar.config.seed, 1);

    let ck = out.join("adapter_gatera_s1.grk");
    let ck = ck.to_str().unwrap();
    assert_eq!(code(&gatera(out, &["gates", "--checkpoint", ck])), 0);
    let dump = fs::read(out.join("gates_adapter_gatera_s1.csv")).unwrap();
    assert_eq!(code(&gatera(out, &["gates", "--checkpoint", ck])), 0);
    assert_eq!(
        fs::read(out.join("gates_adapter_gatera_s1.csv")).unwrap(),
        dump
    );
    let rows = gatera_lab::csv_io::read_gate_dump(dump.as_slice()).unwrap();
    assert_eq!(rows.len(), 32 * 8 * 4);
    let audit = fs::read_to_string(out.join("audit_adapter_gatera_s1.csv")).unwrap();
    assert!(audit.lines().skip(1).all(|l| l.ends_with(",true")));
    let hira_ck = out.join("adapter_hira_s0.grk");
    assert_eq!(
        code(&gatera(
            out,
            &["gates", "--checkpoint", hira_ck.to_str().unwrap()]
        )),
        2
    );

    let o = gatera(
        out,
        &[
            "finetune",
            "--config",
            cfg,
            "--adapter",
            "gatera",
            "--lambda-ent",
            "0",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(out.join("metrics_gatera_s1.csv")).unwrap(),
        metrics
    );

    let o = gatera(
        out,
        &[
            "compare",
            "--config",
            cfg,
            "--adapters",
            "none,hira,gatera",
            "--seeds",
            "0,1",
        ],
    );
    assert_eq!(code(&o), 0);
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert_eq!(
        fs::read_to_string(out.join("compare_runs.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );

    for (axis, rows, extra) in [("gating", 4, None), ("rank", 3, Some("--desk-ranks"))] {
        let mut args = vec!["ablate", "--config", cfg, "--axis", axis];
        args.extend(extra);
        assert_eq!(code(&gatera(out, &args)), 0);
        let first = fs::read(out.join(format!("ablate_{axis}.csv"))).unwrap();
        assert_eq!(String::from_utf8_lossy(&first).lines().count(), rows + 1);
        assert_eq!(code(&gatera(out, &args)), 0);
        assert_eq!(
            fs::read(out.join(format!("ablate_{axis}.csv"))).unwrap(),
            first
        );
    }
}
