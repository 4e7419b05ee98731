use std::process::{Command, Output};

fn mambasam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mambasam")).args(args).output().expect("run mambasam")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = mambasam(&["foo"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("Usage"), "{}", text(&o));
}

#[test]
fn missing_config_exits_1() {
    let o = mambasam(&["train", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("config not found"), "{}", text(&o));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    for body in ["[train]\nlr = -1\n", "[nowhere]\nx = 1\n", "[model]\nkind = unet\n"] {
        std::fs::write(&cfg, body).unwrap();
        let o = mambasam(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{body}: {}", text(&o));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}

#[test]
fn selftest_passes() {
    let o = mambasam(&["selftest"]);
    let out = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
}

#[test]
fn config_prints_parseable_defaults() {
    let o = mambasam(&["config"]);
    assert!(o.status.success());
    let mut c = mambasam_cli::RunConfig::default();
    c.apply(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(c, mambasam_cli::RunConfig::default());
}

#[test]
fn phantom_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let cfg = p("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "seed = 3\n[data]\nphantom_dims = 8,32,32\npatch = 8,32,32\ntrain_dir = {}\neval_count = 2\n[train]\nepochs = 1\n[paths]\ncheckpoint = {}\n",
            p("vols"),
            p("out/m.ckpt")
        ),
    )
    .unwrap();

    let o = mambasam(&["phantom", "--config", &cfg, "--out", &p("vols"), "--count", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(std::fs::read_dir(p("vols")).unwrap().count(), 3);

    let o = mambasam(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(std::path::Path::new(&p("out/m.ckpt")).exists());

    let o = mambasam(&["eval", "--config", &cfg, "--out", &p("report.csv")]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv, std::fs::read_to_string(p("report.csv")).unwrap());
    let header = csv.lines().next().unwrap();
    assert!(header.contains("dice") && header.contains("hd95"), "{header}");
    // Header, one row per foreground class and the mean row.
    assert!(csv.lines().count() >= 4, "{csv}");
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    // Too short for the scaling verdict to be meaningful; only the plumbing is checked.
    let o =
        mambasam(&["bench", "--lengths", "64,128", "--d-model", "8", "--repeats", "3", "--out", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", text(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn bench_rejects_too_few_repeats() {
    let o = mambasam(&["bench", "--lengths", "64,128", "--d-model", "8", "--repeats", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("repeats"), "{}", text(&o));
}
