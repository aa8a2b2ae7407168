use std::process::Command;

fn icube(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_icube")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn print_config_round_trips_through_the_loader() {
    let out = icube(&["print-config", "--seed", "4"]);
    assert!(out.status.success());
    let cfg = icube_cli::ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 4);
}

#[test]
fn missing_inputs_and_bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = icube(&["--out", out_dir, "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("icube netgen"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[split]\ntrain = 0.9\n[netgen]\n").unwrap();
    let out = icube(&["--config", bad.to_str().unwrap(), "--out", out_dir, "netgen"]);
    assert_eq!(out.status.code(), Some(2));

    let out = icube(&["--out", out_dir, "train", "--ablation", "no_such"]);
    assert_eq!(out.status.code(), Some(2));
}
