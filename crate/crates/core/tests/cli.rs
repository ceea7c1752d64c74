use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use paramflow::config::RunConfig;
use paramflow::io::TrajectoryFile;

const BIN: &str = env!("CARGO_BIN_EXE_paramflow");

const SMALL: &str = r#"
checkpoints = 3
[network]
hidden = [8, 8]
embed_levels = 2
[solver]
fit_iters = 40
fit_batch = 128
head_samples = 512
n_samples = 96
precond_rank = 10
n_restarts = 0
eval_samples = 256
"#;

fn write_config(dir: &Path, problem: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{problem}.toml"));
    fs::write(&path, format!("problem = \"{problem}\"\n{extra}{SMALL}")).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("PARAMFLOW_THREADS", "2").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["launch"])), 1);
    assert_eq!(code(&run(&["fit"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "wave", "");
    let out = dir.path().join("r");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&run(&["--config", c, "--out", o, "diagnose", "bogus"])), 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "problem = \"heat\"").unwrap();
    assert_eq!(code(&run(&["--config", bad.to_str().unwrap(), "--out", o, "fit"])), 1);
    // no trajectory yet
    assert_eq!(code(&run(&["--config", c, "--out", o, "diagnose", "residual"])), 1);
}

#[test]
fn thread_variable_must_be_a_number() {
    let out = Command::new(BIN).args(["--help"]).env("PARAMFLOW_THREADS", "many").output().unwrap();
    // help is handled before the pool is configured
    assert_eq!(code(&out), 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fit_only", "");
    let out = Command::new(BIN)
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap(), "fit"])
        .env("PARAMFLOW_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "wave", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("n_restarts = 0", "n_restarts = 0\ncg_maxiter = 1\nprecond_rank = 0");
    let text = text.replacen("precond_rank = 10\n", "", 1);
    fs::write(&cfg, text).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap(), "evolve"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conjugate gradients"));
}

#[test]
fn zero_operator_keeps_every_checkpoint_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fit_only", "");
    let out = dir.path().join("r");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "evolve"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tf = TrajectoryFile::read(&out.join("trajectory.traj")).unwrap();
    assert_eq!(tf.header.times.len(), 4);
    let first: Vec<u64> = tf.thetas[0].data.iter().map(|v| v.to_bits()).collect();
    for th in &tf.thetas {
        assert_eq!(th.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), first);
    }
    for f in ["config.toml", "fit.csv", "steps.csv", "restarts.csv", "theta0.traj"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let resolved = RunConfig::load(&out.join("config.toml"), false, None).unwrap();
    assert_eq!(tf.header.config_hash, resolved.hash().unwrap());
}

#[test]
fn same_seed_same_bytes_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "advection", "final_time = 0.05\n");
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["--config", c, "--out", out.to_str().unwrap(), "--seed", "5", "evolve"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["theta0.traj", "trajectory.traj", "config.toml", "fit.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let other = dir.path().join("other");
    run(&["--config", c, "--out", other.to_str().unwrap(), "--seed", "6", "fit"]);
    assert_ne!(fs::read(a.join("theta0.traj")).unwrap(), fs::read(other.join("theta0.traj")).unwrap());

    // cut the trajectory after two checkpoints and continue from there
    let full = TrajectoryFile::read(&a.join("trajectory.traj")).unwrap();
    let mut cut = full.clone();
    cut.header.times.truncate(2);
    cut.thetas.truncate(2);
    let partial = dir.path().join("partial.traj");
    cut.write(&partial).unwrap();
    let resumed = dir.path().join("resumed");
    let o = run(&["--config", c, "--out", resumed.to_str().unwrap(), "--seed", "5", "evolve", "--from", partial.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let back = TrajectoryFile::read(&resumed.join("trajectory.traj")).unwrap();
    assert_eq!(back.header.times, full.header.times);
    assert_eq!(back.thetas[..2], full.thetas[..2]);

    for what in ["residual", "symmetry", "spectrum"] {
        let o = run(&["--config", c, "--out", a.to_str().unwrap(), "--seed", "5", "diagnose", what]);
        assert_eq!(code(&o), 0, "{what}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(a.join("residuals.csv").exists() && a.join("symmetry.csv").exists());
    let spectra = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("spectrum_t")).count();
    assert_eq!(spectra, 4);
    let residuals = fs::read_to_string(a.join("residuals.csv")).unwrap();
    assert_eq!(residuals.lines().next().unwrap(), "t,residual,cg_iterations");
    assert_eq!(residuals.lines().count(), 5);

    // unsupported problem for the finite-difference comparison
    assert_eq!(code(&run(&["--config", c, "--out", a.to_str().unwrap(), "--seed", "5", "compare-fd"])), 1);
}

#[test]
fn wave_compare_fd_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "wave", "final_time = 0.02\nchecksum = 0\n");
    // unknown keys are rejected
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap(), "fit"]);
    assert_eq!(code(&o), 1);
    let cfg = write_config(dir.path(), "wave", "final_time = 0.02\n");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap() + "[fd]\ngrid_n = 12\n").unwrap();
    let out = dir.path().join("r");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&run(&["--config", c, "--out", o, "evolve"])), 0);
    let res = run(&["--config", c, "--out", o, "compare-fd"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(out.join("compare_fd.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("t,slice_discrepancy,volume_discrepancy,fd_vs_analytic,network_vs_analytic"));
    let snap = paramflow::fd::read_snapshot(&out.join("fd_t0.020000.f64")).unwrap();
    assert_eq!((snap.grid_n, snap.t), (12, 0.02));
    let slice = fs::read_to_string(out.join("slice_t0.020000.csv")).unwrap();
    assert_eq!(slice.lines().next().unwrap(), "y,z,network,fd");
    assert_eq!(slice.lines().count(), 1 + 144);
}
