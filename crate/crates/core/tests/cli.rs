//! End-to-end runs of the `stadv` binary on a small synthetic dataset.

use std::path::Path;
use std::process::Command;

fn stadv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stadv"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = stadv().args(args).output().expect("spawn stadv");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small_dataset(dir: &Path) -> (String, String) {
    let out = dir.to_str().unwrap();
    let (code, _, stderr) = run(&[
        "gen-data", "--nodes", "12", "--steps", "260", "--seed", "3", "--out", out,
    ]);
    assert_eq!(code, 0, "gen-data failed: {}", stderr);
    (
        dir.join("speed.csv").to_str().unwrap().into(),
        dir.join("graph.csv").to_str().unwrap().into(),
    )
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    small_dataset(&dir_a);
    small_dataset(&dir_b);
    let speed_a = std::fs::read(dir_a.join("speed.csv")).unwrap();
    let speed_b = std::fs::read(dir_b.join("speed.csv")).unwrap();
    assert_eq!(speed_a, speed_b);
    let graph_a = std::fs::read(dir_a.join("graph.csv")).unwrap();
    let graph_b = std::fs::read(dir_b.join("graph.csv")).unwrap();
    assert_eq!(graph_a, graph_b);
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap().to_string();
    let (speed, graph) = small_dataset(tmp.path());

    // Small model, short schedule: this is a smoke test, not a benchmark.
    let (code, stdout, stderr) = run(&[
        "train", "--speed", &speed, "--graph", &graph, "--t", "6", "--tau", "6",
        "--epochs", "8", "--fine-epochs", "4", "--hidden", "8", "--temporal-hidden", "4",
        "--temporal-layers", "2", "--seed", "5", "--out", &out,
    ]);
    assert_eq!(code, 0, "train failed: {}{}", stdout, stderr);
    let ckpt = tmp.path().join("checkpoints/model.stadv");
    assert!(ckpt.exists());
    assert!(tmp.path().join("reports/train_loss.csv").exists());
    assert!(tmp.path().join("logs/train-config.txt").exists());

    let (code, stdout, stderr) = run(&[
        "attack", "--model", ckpt.to_str().unwrap(), "--speed", &speed, "--graph", &graph,
        "--setting", "grey", "--method", "stpgd", "--selector", "tdns",
        "--max-windows", "8", "--seed", "5", "--out", &out,
    ]);
    assert_eq!(code, 0, "attack failed: {}{}", stdout, stderr);
    assert!(stdout.contains("G-MAE"), "missing table: {}", stdout);
    assert!(tmp
        .path()
        .join("reports/attack_grey_stpgd_tdns.csv")
        .exists());
    assert!(tmp.path().join("reports/saliency.csv").exists());
    assert!(tmp.path().join("reports/attack_summary.json").exists());
    assert!(tmp
        .path()
        .join("reports/perturbation_first_window.csv")
        .exists());

    // Zero-budget attack degrades nothing.
    let (code, stdout, _) = run(&[
        "attack", "--model", ckpt.to_str().unwrap(), "--speed", &speed, "--graph", &graph,
        "--setting", "white", "--method", "stpgd", "--selector", "random",
        "--epsilon", "0", "--max-windows", "8", "--seed", "5", "--out", &out,
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(tmp.path().join("reports/attack_white_stpgd_random.csv"))
        .unwrap();
    let row = csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    let degradation: f64 = fields[5].parse().unwrap();
    assert_eq!(degradation, 0.0, "row: {}", row);
    let _ = stdout;

    let (code, stdout, stderr) = run(&[
        "verify-bound", "--trials", "200", "--seed", "9", "--out", &out,
    ]);
    assert_eq!(code, 0, "verify-bound failed: {}{}", stdout, stderr);
    assert!(stdout.contains("PASS"));
    assert!(tmp.path().join("reports/bound_report.json").exists());

    let report = tmp
        .path()
        .join("reports/attack_grey_stpgd_tdns.csv")
        .to_str()
        .unwrap()
        .to_string();
    let report2 = tmp
        .path()
        .join("reports/attack_white_stpgd_random.csv")
        .to_str()
        .unwrap()
        .to_string();
    let (code, stdout, stderr) = run(&[
        "plot", "--reports", &report, &report2, "--x-values", "0.0,1.0", "--out", &out,
    ]);
    assert_eq!(code, 0, "plot failed: {}{}", stdout, stderr);
    for metric in ["g_mae", "l_mae", "g_rmse", "l_rmse"] {
        let path = tmp.path().join(format!("plots/{}.svg", metric));
        assert!(path.exists(), "{:?} missing", path);
        let svg = std::fs::read_to_string(path).unwrap();
        assert!(svg.contains("<svg"));
    }
}

#[test]
fn defend_command_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap().to_string();
    let (speed, graph) = small_dataset(tmp.path());
    let (code, stdout, stderr) = run(&[
        "defend", "--speed", &speed, "--graph", &graph, "--strategy", "at",
        "--t", "6", "--tau", "6", "--hidden", "8", "--temporal-hidden", "4",
        "--temporal-layers", "2", "--epochs", "2", "--iters", "2", "--seed", "5", "--out", &out,
    ]);
    assert_eq!(code, 0, "defend failed: {}{}", stdout, stderr);
    assert!(tmp.path().join("checkpoints/model_at.stadv").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap().to_string();
    let (speed, graph) = small_dataset(tmp.path());
    // Unknown subcommand flag value combinations.
    let (code, _, stderr) = run(&["attack", "--model", "missing.stadv", "--speed", &speed,
        "--graph", &graph, "--setting", "purple", "--out", &out]);
    assert_eq!(code, 1, "stderr: {}", stderr);
    assert!(stderr.contains("purple"));
    // Bad flag entirely: clap usage error.
    let (code, _, _) = run(&["attack", "--no-such-flag"]);
    assert_eq!(code, 1);
    // verify-bound with zero trials is a usage error.
    let (code, _, _) = run(&["verify-bound", "--trials", "0", "--out", &out]);
    assert_eq!(code, 1);
    // Missing input file is a runtime error.
    let (code, _, _) = run(&["train", "--speed", "nope.csv", "--graph", &graph, "--out", &out]);
    assert_eq!(code, 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap().to_string();
    let cfg = tmp.path().join("run.conf");
    std::fs::write(&cfg, "nodes=9\nsteps=200\nseed=4\n").unwrap();
    let (code, _, stderr) = run(&[
        "gen-data", "--config", cfg.to_str().unwrap(), "--steps", "220", "--out", &out,
    ]);
    assert_eq!(code, 0, "{}", stderr);
    let speed = std::fs::read_to_string(tmp.path().join("speed.csv")).unwrap();
    let header_nodes = speed.lines().next().unwrap().split(',').count();
    assert_eq!(header_nodes, 9); // from config
    assert_eq!(speed.lines().count() - 1, 220); // flag overrides config
    let echoed = std::fs::read_to_string(tmp.path().join("logs/gen-data-config.txt")).unwrap();
    assert!(echoed.contains("steps=220"));
    assert!(echoed.contains("nodes=9"));
}
