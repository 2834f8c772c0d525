use std::fs;
use std::path::Path;
use std::process::Command;

use adjoint_deis::{
    convergence_study, json, solve_adjoint, AdjointOrder, ConvergenceConfig, Execution, SampleKind,
    SpacingRule, Trajectory,
};
use adjoint_deis_cli::config::RunConfig;
use adjoint_deis_cli::*;
use serde_json::{json as j, Value};
use tempfile::TempDir;

fn config(value: Value) -> RunConfig {
    RunConfig::from_json(&value.to_string()).unwrap()
}

fn minimal() -> Value {
    j!({
        "model": {"type": "gaussian", "mu": [0.3, -0.4], "c": 1.0},
        "grid": {"n": 5, "spacing": "uniform-lambda"},
        "seed": 3
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    base
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adjoint-deis"))
}

fn write_config(dir: &Path, value: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    path
}

#[test]
fn sample_writes_all_states() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("traj.json");
    let traj = run_sample(&config(minimal()), Some(&out)).unwrap();
    let back: Trajectory = json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(back.states.len(), 6);
    assert_eq!(back, traj);
}

#[test]
fn ode_sampling_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    run_sample(&config(minimal()), Some(&a)).unwrap();
    run_sample(&config(minimal()), Some(&b)).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn sde_sample_records_noise() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("traj.json");
    let traj = run_sample(&config(merge(minimal(), j!({"kind": "sde"}))), Some(&out)).unwrap();
    assert_eq!(traj.noise_seq.unwrap().len(), 5);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = RunConfig::from_json(&merge(minimal(), j!({"sede": 1})).to_string()).unwrap_err();
    assert!(err.to_string().contains("sede"), "{err}");
    let nested = j!({
        "model": {"type": "gaussian", "mu": [0.0], "sigma": 1.0},
        "grid": {"n": 5}
    });
    assert!(RunConfig::from_json(&nested.to_string()).is_err());
}

#[test]
fn zero_loss_gradient_gives_zero_gradients() {
    let dir = TempDir::new().unwrap();
    let cfg = config(merge(
        minimal(),
        j!({"loss": {"type": "gradient", "grad": [0.0, 0.0]}}),
    ));
    let out = run_grad(&cfg, Some(&dir.path().join("g.json"))).unwrap();
    assert!(out.a_x.iter().chain(&out.a_theta).all(|&v| v == 0.0));
    match out.a_z {
        AzOutput::Constant(v) => assert!(v.iter().all(|&x| x == 0.0)),
        AzOutput::PerKnot(_) => panic!("expected constant a_z"),
    }
}

#[test]
fn decoupled_adjoint_grids_differ() {
    let dir = TempDir::new().unwrap();
    let base = merge(
        minimal(),
        j!({"grid": {"n": 16, "spacing": "uniform-lambda"}, "loss": {"type": "target", "target": [1.0, 0.5]}}),
    );
    let full = run_grad(
        &config(merge(base.clone(), j!({"adjoint": {"M": 16}}))),
        Some(&dir.path().join("a")),
    )
    .unwrap();
    let half = run_grad(
        &config(merge(base, j!({"adjoint": {"M": 8}}))),
        Some(&dir.path().join("b")),
    )
    .unwrap();
    assert_ne!(full.a_x, half.a_x);
}

#[test]
fn grad_matches_library_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let traj_path = dir.path().join("traj.json");
    let base = merge(
        minimal(),
        j!({"loss": {"type": "target", "target": [1.0, 0.5]}, "adjoint": {"order": 2}}),
    );
    let traj = run_sample(&config(base.clone()), Some(&traj_path)).unwrap();
    let cfg = config(merge(base, j!({"trajectory": traj_path})));
    let out_path = dir.path().join("grad.json");
    run_grad(&cfg, Some(&out_path)).unwrap();

    let schedule = cfg.schedule().unwrap();
    let model = cfg.build_model().unwrap();
    let g = cfg.loss().unwrap().grad_at(traj.final_sample()).unwrap();
    let want = solve_adjoint(
        &model,
        &schedule,
        &traj,
        &g,
        &traj.grid,
        AdjointOrder::SecondMultistep,
        SampleKind::Ode,
    )
    .unwrap();
    let file: Value = serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    let read = |key: &str| -> Vec<f64> { serde_json::from_value(file[key].clone()).unwrap() };
    assert_eq!(read("a_x"), want.a_x);
    assert_eq!(read("a_z"), want.a_z);
    assert_eq!(read("a_theta"), want.a_theta);
}

#[test]
fn grad_rejects_kind_mismatch() {
    let dir = TempDir::new().unwrap();
    let traj_path = dir.path().join("traj.json");
    run_sample(&config(minimal()), Some(&traj_path)).unwrap();
    let cfg = config(merge(
        minimal(),
        j!({"trajectory": traj_path, "adjoint": {"kind": "sde"}, "loss": {"type": "gradient", "grad": [1.0, 0.0]}}),
    ));
    let err = run_grad(&cfg, Some(&dir.path().join("g.json"))).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn scheduled_z_reports_per_knot_buckets() {
    let dir = TempDir::new().unwrap();
    let cfg = config(j!({
        "model": {"type": "mlp", "d": 2, "dim_z": 2, "hidden": 8, "seed": 1},
        "grid": {"n": 4, "spacing": "uniform-t"},
        "z_schedule": [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]],
        "loss": {"type": "target", "target": [0.0, 0.0]}
    }));
    match run_grad(&cfg, Some(&dir.path().join("g.json")))
        .unwrap()
        .a_z
    {
        AzOutput::PerKnot(knots) => assert_eq!(knots.len(), 4),
        AzOutput::Constant(_) => panic!("expected per-knot a_z"),
    }
}

fn convergence_config(order: u8) -> RunConfig {
    config(j!({
        "model": {"type": "gaussian", "mu": [0.3, -0.5, 0.8, 0.1], "c": 1.5},
        "grid": {"n": 4096, "spacing": "uniform-lambda"},
        "adjoint": {"order": order, "grid_spacing": "uniform-lambda"},
        "convergence": {"M_values": [8, 16, 32, 64, 128], "reference_M": 4096},
        "loss": {"type": "gradient", "grad": [1.0, -1.0, 0.5, 0.2]},
        "seed": 1
    }))
}

#[test]
fn first_order_convergence_csv_and_slope() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("conv.csv");
    let summary = run_convergence(&convergence_config(1), Some(&out)).unwrap();
    assert!((0.8..=1.3).contains(&summary.slope_ax), "{summary:?}");

    let mut reader = csv::Reader::from_path(&out).unwrap();
    let headers: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        headers,
        [
            "solver",
            "order",
            "kind",
            "M",
            "h_max",
            "err_ax",
            "err_az",
            "err_atheta"
        ]
    );
    let ms: Vec<String> = reader
        .records()
        .map(|r| r.unwrap()[3].to_string())
        .collect();
    assert_eq!(ms, ["8", "16", "32", "64", "128"]);
    assert!(dir.path().join("conv.csv.slopes.json").exists());
}

#[test]
fn second_order_convergence_matches_library() {
    let dir = TempDir::new().unwrap();
    let cfg = convergence_config(2);
    let summary = run_convergence(&cfg, Some(&dir.path().join("c.csv"))).unwrap();
    assert_eq!(summary.solver, "adjoint-deis-2m");

    let schedule = cfg.schedule().unwrap();
    let model = cfg.build_model().unwrap();
    let grid = cfg.sampling_grid().unwrap();
    let traj = adjoint_deis::sample(
        &model,
        &schedule,
        &grid,
        &cfg.x_init(&model),
        &cfg.conditioning(&model),
        SampleKind::Ode,
        cfg.seed,
    )
    .unwrap();
    let study = ConvergenceConfig {
        m_values: vec![8, 16, 32, 64, 128],
        reference_m: 4096,
        order: AdjointOrder::SecondMultistep,
        kind: SampleKind::Ode,
        spacing: SpacingRule::UniformLambda,
    };
    let report = convergence_study(
        &model,
        &schedule,
        &traj,
        &[1.0, -1.0, 0.5, 0.2],
        &study,
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(summary.slope_ax, report.fit_ax.slope);
    assert_eq!(summary.slope_az, report.fit_az.map(|f| f.slope));
    assert_eq!(summary.slope_atheta, report.fit_atheta.map(|f| f.slope));
}

fn optimize_config(lr: f64) -> RunConfig {
    config(j!({
        "model": {"type": "gaussian", "mu": [0.3, -0.4], "c": 1.0},
        "grid": {"n": 64, "spacing": "uniform-lambda"},
        "loss": {"type": "target", "target": [1.5, 1.0]},
        "optimize": {"learning_rate": lr, "n_opt_steps": 50},
        "seed": 3
    }))
}

#[test]
fn optimize_with_zero_rate_is_flat() {
    let dir = TempDir::new().unwrap();
    let state = run_optimize(&optimize_config(0.0), Some(dir.path())).unwrap();
    assert_eq!(state.initial_loss, state.final_loss);
    let mut reader = csv::Reader::from_path(dir.path().join("loss_history.csv")).unwrap();
    let headers: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["step", "loss", "grad_norm_x", "grad_norm_z"]);
    assert_eq!(reader.records().count(), 51);
}

#[test]
fn optimize_reduces_loss_and_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = run_optimize(&optimize_config(0.01), Some(a.path())).unwrap();
    run_optimize(&optimize_config(0.01), Some(b.path())).unwrap();
    assert!(first.final_loss < first.initial_loss);
    for file in ["loss_history.csv", "final_state.json"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap()
        );
    }
}

fn cycle_config(n: usize, d: usize) -> RunConfig {
    config(j!({
        "model": {"type": "mlp", "d": d, "dim_z": 1, "hidden": 8, "seed": 5},
        "grid": {"n": n, "spacing": "uniform-t"},
        "kind": "sde",
        "seed": 2
    }))
}

#[test]
fn cycle_check_reconstructs() {
    let dir = TempDir::new().unwrap();
    for (n, d) in [(20, 4), (5, 1), (50, 1)] {
        let report =
            run_cycle_check(&cycle_config(n, d), Some(&dir.path().join("r.json"))).unwrap();
        assert!(
            report.passed && report.max_state_error <= 1e-10,
            "{report:?}"
        );
    }
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = write_config(dir.path(), &minimal());
    let status = bin()
        .args(["sample", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("t.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let dup = write_config(
        dir.path(),
        &j!({
            "model": {"type": "gaussian", "mu": [0.0]},
            "grid": {"times": [0.001, 0.5, 0.5, 1.0]}
        }),
    );
    let out = bin()
        .args(["cycle-check", "--config"])
        .arg(&dup)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let missing = bin()
        .args(["sample", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), &minimal());
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let status = bin()
            .args(["sample", "--seed", seed, "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        let traj: Trajectory = json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
        traj.initial_latent().to_vec()
    };
    assert_eq!(run("3", "a.json"), adjoint_deis::gaussian_latent(2, 3));
    assert_eq!(run("9", "b.json"), adjoint_deis::gaussian_latent(2, 9));
}
