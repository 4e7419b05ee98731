//! End-to-end acceptance run. Criteria execute one after another (timings
//! would be meaningless if they shared the CPU), each printing one PASS or
//! FAIL line; the process fails if any criterion does.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mambasam_cli::checks::{self, Check};
use mambasam_cli::{eval, train, RunConfig};
use mambasam_core::models::{ModelConfig, ModelKind};

/// Learning runs shared by criterion 7: 200 phantom patches of 1×16×64×64,
/// 32 held-out phantoms.
const LEARN_CONFIG: &str = "\
seed = 11
[data]
train_count = 200
eval_count = 32
[train]
lr = 3e-3
warmup_steps = 20
epochs = 8
";

fn criterion(no: u32, title: &str, budget_s: f64, f: impl FnOnce() -> Vec<Check>) -> bool {
    let t = Instant::now();
    let parts = f();
    let elapsed = t.elapsed().as_secs_f64();
    let in_time = elapsed <= budget_s;
    let passed = in_time && parts.iter().all(|c| c.passed);
    for c in &parts {
        println!("    {c}");
    }
    println!(
        "{} criterion {no} ({title}): {elapsed:.1}s of {budget_s:.0}s budget{}",
        if passed { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", over budget" }
    );
    passed
}

fn learning(kind: ModelKind, dir: &Path) -> Check {
    let name = format!("learning {kind}");
    let run = || -> mambasam_core::Result<Check> {
        let mut cfg = RunConfig::default();
        cfg.apply(LEARN_CONFIG)?;
        cfg.apply(&format!(
            "[model]\nkind = {kind}\n[paths]\ncheckpoint = {}",
            dir.join(format!("{kind}.ckpt")).display()
        ))?;
        let t = Instant::now();
        train(&cfg, &mut |line| println!("      {line}"))?;
        let train_s = t.elapsed().as_secs_f64();
        let report = eval(&cfg)?;
        let dice = report.mean_dice();
        let per: Vec<String> = report.per_class.iter().map(|c| format!("{:.3}", c.dice)).collect();
        Ok(Check {
            name: name.clone(),
            passed: dice >= 0.85,
            detail: format!(
                "mean foreground Dice {dice:.4} (≥ 0.85, floor 0.80{}), per class {}, trained in {train_s:.0}s",
                if dice < 0.80 { " BROKEN" } else { "" },
                per.join("/")
            ),
        })
    };
    run().unwrap_or_else(|e| Check { name, passed: false, detail: format!("error: {e}") })
}

fn determinism(dir: &Path) -> Check {
    let name = "determinism".to_string();
    let cfg = dir.join("tiny.cfg");
    let text =
        "seed = 5\n[data]\nphantom_dims = 8,32,32\npatch = 8,32,32\ntrain_count = 6\n[train]\nepochs = 2\nlr = 1e-3\n";
    if let Err(e) = std::fs::write(&cfg, text) {
        return Check { name, passed: false, detail: format!("cannot write config: {e}") };
    }
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.join(format!("run_{run}.ckpt"));
        let status = Command::new(env!("CARGO_BIN_EXE_mambasam"))
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ckpt)
            .output();
        match status {
            Ok(o) if o.status.success() => {}
            Ok(o) => {
                return Check {
                    name,
                    passed: false,
                    detail: format!("train failed: {}", String::from_utf8_lossy(&o.stderr)),
                };
            }
            Err(e) => return Check { name, passed: false, detail: format!("cannot run binary: {e}") },
        }
        match std::fs::read(&ckpt) {
            Ok(b) => bytes.push(b),
            Err(e) => return Check { name, passed: false, detail: format!("no checkpoint: {e}") },
        }
    }
    let same = bytes[0] == bytes[1];
    Check {
        name,
        passed: same,
        detail: format!(
            "two `train` runs, checkpoints of {} bytes {}",
            bytes[0].len(),
            if same { "identical" } else { "differ" }
        ),
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let desk = ModelConfig::default();
    let results = [
        criterion(1, "scan equivalence", 60.0, || vec![checks::scan_equivalence(1000, 101)]),
        criterion(2, "DCT correctness", 30.0, || checks::dct_checks([8, 8, 8], 102)),
        criterion(3, "gradient suite", 300.0, || checks::grad_suite(103)),
        criterion(4, "init identity", 30.0, || checks::init_identity(desk.patch_dims, 104)),
        criterion(5, "freeze contract", 300.0, || {
            [ModelKind::AdapterMfgc, ModelKind::AdapterLora, ModelKind::DualBranch]
                .map(|kind| checks::freeze_contract(&ModelConfig { kind, ..desk.clone() }, 50, 105))
                .to_vec()
        }),
        criterion(6, "complexity", 300.0, || vec![checks::complexity(&[1024, 2048, 4096], 64, 5).0]),
        criterion(7, "desk-scale learning", 1800.0, || {
            vec![learning(ModelKind::AdapterMfgc, dir.path()), learning(ModelKind::DualBranch, dir.path())]
        }),
        criterion(8, "metric oracles", 120.0, || vec![checks::metric_oracles(500, 108)]),
        criterion(9, "determinism", 300.0, || vec![determinism(dir.path())]),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
