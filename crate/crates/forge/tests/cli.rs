use std::path::Path;
use std::process::{Command, Output};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdc-forge")).args(args).output().expect("spawn sdc-forge")
}

const TINY: &str = "steps = 6\neval_batches = 2\nbatch_size = 2\ncorpus_bytes = 20000\nd_model = 16\nn_heads = 2\nn_layers = 1\nseq_len = 8\nwarmup_steps = 2\n";

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d_model = 15\n");
    let out = forge(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_config(dir.path(), "no_such_key = 1\n");
    assert_eq!(forge(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(forge(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    let a = dir.path().join("a");
    assert_eq!(forge(&["compare", a.to_str().unwrap(), a.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn train_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fault_sites = [\"BP:head.dW\"]\nfault_bits = [13]\nfault_one_in = 1\n");
    let base = dir.path().join("base");
    let fault = dir.path().join("fault");
    let out = forge(&["train", "--config", &cfg, "--out", base.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["telemetry.csv", "summary.json", "checkpoint.snap", "config.toml", "evals.csv"] {
        assert!(base.join(f).is_file(), "{f} missing");
    }
    let out = forge(&["train", "--config", &cfg, "--mode", "fault", "--out", fault.to_str().unwrap()]);
    assert!(out.status.success());

    let out = forge(&["compare", fault.to_str().unwrap(), base.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let diff: f32 = text.trim().strip_prefix("parameter_difference ").unwrap().parse().unwrap();
    assert!(diff > 0.0, "{text}");
    assert!(fault.join("loss_delta.csv").is_file());
}

#[test]
fn campaign_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mode = \"fault\"\nseeds = [0, 1]\nfault_sites = [\"BP:head.dW\"]\ngrid_bits = [0, 13]\n");
    let root = dir.path().join("camp");
    let out = forge(&["campaign", "--config", &cfg, "--out", root.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let groups = std::fs::read_to_string(root.join("groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 3, "{groups}");

    std::fs::remove_file(root.join("groups.csv")).unwrap();
    assert!(forge(&["report", root.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read_to_string(root.join("groups.csv")).unwrap(), groups);

    // resume reuses every finished run
    let out = forge(&["campaign", "--config", &cfg, "--out", root.to_str().unwrap(), "--resume"]);
    assert!(out.status.success());
}
