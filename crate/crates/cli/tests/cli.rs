//! End-to-end behaviour of the `geoflow` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geoflow::checkpoint::Checkpoint;
use geoflow::config::{parse_config, Experiment, RunConfig};
use geoflow::oracles::empirical_wasserstein;
use geoflow::train::{init_phase1_nets, parse_metrics_csv, NetWidths};
use geoflow::{Matrix, SeededRng};

fn geoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoflow")).args(args).output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_csv(path: &Path) -> Matrix {
    let text = fs::read_to_string(path).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Writes a checkpoint whose geodesic is F ≡ c (zero weights, last bias c).
fn constant_field_checkpoint(dir: &Path, cfg: RunConfig, c: &[f64]) {
    let (mut g, critic) = init_phase1_nets(&cfg.train, c.len(), &NetWidths::uniform(4)).unwrap();
    g.f.zero_params();
    g.f.params.biases.last_mut().unwrap().copy_from_slice(c);
    fs::write(dir.join("checkpoint.json"), Checkpoint::new(cfg, &g, &critic, 0).to_json().unwrap()).unwrap();
}

#[test]
fn oracle_prints_the_bures_value() {
    let out = ok(geoflow(&["oracle", "--experiment", "synthetic1"]));
    assert!(out.contains("72.171573"), "{out}");
}

#[test]
fn oracle_prints_harmonic_endpoints() {
    let out = ok(geoflow(&["oracle", "--experiment", "synthetic4"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "t,x_0,x_1,v_0,v_1");
    assert!(lines[1].starts_with("0,3.000000,3.000000,"), "{}", lines[1]);
    assert!(lines.last().unwrap().starts_with("1,5.000000,5.000000,"), "{out}");
}

#[test]
fn export_follows_a_constant_field() {
    let dir = tempfile::tempdir().unwrap();
    let c = [1.5, -0.5];
    constant_field_checkpoint(dir.path(), RunConfig::preset(Experiment::Synthetic1), &c);
    ok(geoflow(&["export", "--dir", dir.path().to_str().unwrap(), "--times", "0,0.5,1", "--n", "2"]));
    let text = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "particle_id,t,x_0,x_1");
    assert_eq!(lines.len(), 7);
    for p in 0..2 {
        let row = |k: usize| -> Vec<f64> { lines[1 + 3 * p + k].split(',').map(|x| x.parse().unwrap()).collect() };
        let (r0, r1, r2) = (row(0), row(1), row(2));
        assert_eq!((r0[0], r1[0], r2[0]), (p as f64, p as f64, p as f64));
        assert_eq!((r0[1], r1[1], r2[1]), (0.0, 0.5, 1.0));
        for k in 0..2 {
            assert!((r1[2 + k] - (r0[2 + k] + 0.5 * c[k])).abs() < 1e-12);
            assert!((r2[2 + k] - (r0[2 + k] + c[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_of_the_identity_on_equal_laws_is_sampling_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(
        r#"{"experiment":"custom",
            "source":{"kind":"gaussian","mean":[1.0,-1.0],"cov":[[1.0,0.3],[0.3,2.0]]},
            "target":{"kind":"gaussian","mean":[1.0,-1.0],"cov":[[1.0,0.3],[0.3,2.0]]}}"#,
    )
    .unwrap();
    constant_field_checkpoint(dir.path(), cfg, &[0.0, 0.0]);
    let d = dir.path().to_str().unwrap();
    ok(geoflow(&["eval", "--dir", d, "--n", "500"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    let w1 = report["w1"].as_f64().unwrap();
    let baseline = report["baseline_w1"].as_f64().unwrap();
    assert!(w1 < 1.5 * baseline && baseline < 1.5 * w1, "{w1} vs {baseline}");
    assert_eq!(report["path_cost"].as_f64().unwrap(), 0.0);
    assert!(report["bures_w2_sq"].as_f64().unwrap() < 1e-12);
    assert!(report["geodesic"]["mean_max_path_error"].as_f64().unwrap() < 1e-12);

    // the reported distances are reproduced from the written samples
    let samples = dir.path().join("eval_samples");
    let push = read_csv(&samples.join("pushforward.csv"));
    let target = read_csv(&samples.join("target.csv"));
    assert_eq!(push, read_csv(&samples.join("source.csv")));
    let mut rng = SeededRng::new(0);
    assert!((empirical_wasserstein(&push, &target, 1, &mut rng).unwrap() - w1).abs() < 1e-12);
    let w2 = report["w2"].as_f64().unwrap();
    assert!((empirical_wasserstein(&push, &target, 2, &mut rng).unwrap() - w2).abs() < 1e-12);
}

#[test]
fn train_velocity_extends_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    fs::write(
        &cfg_path,
        r#"{"experiment":"synthetic1","train":{"n":16,"m":3,"iters_phase1":5,"iters_phase2":4,"seed":3},
            "widths":{"geodesic":[6],"critic":[6],"velocity":[6]}}"#,
    )
    .unwrap();
    let d = dir.path().to_str().unwrap();
    ok(geoflow(&["train", "--config", cfg_path.to_str().unwrap(), "--out", d]));
    let before = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(before.iteration, 5);
    assert!(before.velocity.is_none());
    ok(geoflow(&["train-velocity", "--dir", d]));
    let after = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(after.geodesic, before.geodesic);
    assert_eq!(after.velocity_iteration, Some(9));
    assert!(after.velocity.is_some());
    let metrics = parse_metrics_csv(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
    let its: Vec<usize> = metrics.iter().map(|r| r.iteration).collect();
    assert_eq!(its, (1..=9).collect::<Vec<_>>());
    assert!(metrics[..5].iter().all(|r| r.phase2_mse.is_none() && r.critic_gap.is_some()));
    assert!(metrics[5..].iter().all(|r| r.phase2_mse.is_some() && r.critic_gap.is_none()));

    let report = ok(geoflow(&["eval", "--dir", d, "--n", "50"]));
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report["velocity_mse"].as_f64().unwrap().is_finite());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"experiment":"synthetic1","train":{"n":-1}}"#).unwrap();
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"experiment":"synthetic1","colour":"blue"}"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", bad.to_str().unwrap(), "--out", d],
        vec!["train", "--config", unknown.to_str().unwrap(), "--out", d],
        vec!["train", "--experiment", "synthetic9", "--out", d],
        vec!["eval", "--dir", d],
        vec!["export", "--dir", d, "--times", "0,2"],
        vec!["oracle", "--experiment", "mnist"],
        vec!["train"],
    ];
    for args in cases {
        let out = geoflow(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    // 2-D networks under a 10-D preset
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::preset(Experiment::Synthetic3);
    let (g, c) = init_phase1_nets(&cfg.train, 2, &NetWidths::uniform(4)).unwrap();
    fs::write(dir.path().join("checkpoint.json"), Checkpoint::new(cfg, &g, &c, 0).to_json().unwrap()).unwrap();
    for cmd in ["train-velocity", "eval"] {
        let out =
            geoflow(&[cmd, "--dir", dir.path().to_str().unwrap(), "--n", "10"][..if cmd == "eval" { 5 } else { 3 }]);
        assert!(!out.status.success(), "{cmd} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("dimension") || err.contains("mismatch"), "{cmd}: {err}");
    }
}
