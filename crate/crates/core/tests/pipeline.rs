use std::fs;

use lyapinf::config::{DerivativeSource, RunConfig};
use lyapinf::data::{Region, SnapshotSet};
use lyapinf::dynamics::{Benchmark, IcScheme, SystemModel};
use lyapinf::pipeline::{self, InferredForm};
use lyapinf::region::{infer_and_estimate, sweep_gamma, true_roa_grid, McConfig};

fn quick(b: Benchmark) -> RunConfig {
    let mut c = RunConfig::preset(b);
    c.mc = McConfig { num_samples: 20_000, ..c.mc };
    c.validation.num_boundary = 100;
    c.validation.grid_resolution = None;
    c
}

#[test]
fn written_trajectories_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick(Benchmark::Vanderpol);
    let (_, trajs) = pipeline::simulate_trajectories(&config).unwrap();
    let manifest = pipeline::write_simulation(&config, &trajs, dir.path()).unwrap();
    assert_eq!(manifest.trajectories.len(), 10);
    assert_eq!(manifest.raw_snapshots, 5010);

    let loaded = pipeline::load_trajectories(dir.path()).unwrap();
    assert_eq!(loaded, trajs);
    // the same files without the manifest
    fs::remove_file(dir.path().join(pipeline::MANIFEST_FILE)).unwrap();
    assert_eq!(pipeline::load_trajectories(dir.path()).unwrap(), trajs);
    let single = pipeline::load_trajectories(&dir.path().join("traj_003.csv")).unwrap();
    assert_eq!(single[0], trajs[3]);
}

#[test]
fn inference_from_files_matches_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick(Benchmark::Quadratic2d);
    let (_, trajs) = pipeline::simulate_trajectories(&config).unwrap();
    pipeline::write_simulation(&config, &trajs, dir.path()).unwrap();
    let mem = pipeline::snapshots(&config, &trajs).unwrap();
    let disk = pipeline::snapshots(&config, &pipeline::load_trajectories(dir.path()).unwrap()).unwrap();
    let (a, _) = pipeline::infer(&config, &mem, config.gamma).unwrap();
    let (b, _) = pipeline::infer(&config, &disk, config.gamma).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_best_matches_single_run_at_winning_gamma() {
    let config = quick(Benchmark::Vanderpol);
    let model = config.model();
    let (_, trajs) = pipeline::simulate_trajectories(&config).unwrap();
    let data = pipeline::snapshots(&config, &trajs).unwrap();
    let gammas = [0.3, 1.0, 2.0, 5.0];
    let out = sweep_gamma(&data, &model, &config.region, &gammas, &config.solver, &config.level_search, &config.mc)
        .unwrap();
    assert_eq!(out.rows.len(), gammas.len());
    for row in &out.rows {
        let (est, obj) = infer_and_estimate(
            &data,
            &model,
            &config.region,
            row.gamma,
            &config.solver,
            &config.level_search,
            &config.mc,
        )
        .unwrap();
        assert_eq!(row.c_star, est.c_star);
        assert_eq!(row.volume, est.volume);
        assert_eq!(row.objective, obj);
    }
    let best = out.rows.iter().map(|r| r.volume).fold(0.0, f64::max);
    assert_eq!(out.best.volume, best);
    let (rerun, _) = infer_and_estimate(
        &data,
        &model,
        &config.region,
        out.best.gamma,
        &config.solver,
        &config.level_search,
        &config.mc,
    )
    .unwrap();
    assert_eq!(rerun, out.best);
}

#[test]
fn finite_differences_give_a_nearby_form() {
    let mut config = quick(Benchmark::Vanderpol);
    let (_, trajs) = pipeline::simulate_trajectories(&config).unwrap();
    let exact = pipeline::infer(&config, &pipeline::snapshots(&config, &trajs).unwrap(), 2.0).unwrap().0;
    config.derivatives = DerivativeSource::FiniteDifference;
    let fd = pipeline::infer(&config, &pipeline::snapshots(&config, &trajs).unwrap(), 2.0).unwrap().0;
    let rel = (fd.p.matrix() - exact.p.matrix()).norm() / exact.p.matrix().norm();
    assert!(rel > 0.0 && rel < 0.05, "relative change {rel}");
}

#[test]
fn empty_region_data_is_reported() {
    let config = quick(Benchmark::Vanderpol);
    let err = pipeline::infer(&config, &SnapshotSet::empty(2), 1.0).unwrap_err();
    assert!(matches!(err, lyapinf::Error::Data(_)));
}

#[test]
fn estimate_files_for_each_layout() {
    let dir = tempfile::tempdir().unwrap();
    for (b, files) in [
        (Benchmark::Quadratic2d, vec!["ellipse.csv"]),
        (Benchmark::Cubic3d, vec!["ellipse_x1x2.csv", "ellipse_x1x3.csv", "ellipse_x2x3.csv"]),
    ] {
        let config = quick(b);
        let out = dir.path().join(b.name());
        let model = config.model();
        let (_, trajs) = pipeline::simulate_trajectories(&config).unwrap();
        let data = pipeline::snapshots(&config, &trajs).unwrap();
        let (form, report) = pipeline::infer(&config, &data, config.gamma).unwrap();
        pipeline::write_inference(&out, &form, &report).unwrap();
        assert_eq!(InferredForm::read(&out.join(pipeline::P_FILE)).unwrap(), form);

        let est = pipeline::estimate(&config, &model, &form).unwrap();
        let written = pipeline::write_estimate(&config, &est, &out).unwrap();
        let names: Vec<_> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, files);
        for path in &written {
            let text = fs::read_to_string(path).unwrap();
            assert_eq!(text.lines().count(), 1 + pipeline::ELLIPSE_POINTS);
        }
        assert_eq!(pipeline::read_estimate(&out.join(pipeline::ESTIMATE_FILE)).unwrap(), est);
    }
}

#[test]
fn estimate_json_layout() {
    let config = quick(Benchmark::Vanderpol);
    let run = pipeline::run_benchmark(&config, false).unwrap();
    let v: serde_json::Value = serde_json::from_str(&run.estimate.to_json().unwrap()).unwrap();
    for key in ["P", "gamma", "c_star", "volume", "violations_found", "capped_by_region", "containment_fraction"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["P"].as_array().unwrap().len(), 2);
    assert_eq!(v["containment_fraction"], 1.0);
}

#[test]
fn networked_run_reports_every_plane() {
    let mut config = quick(Benchmark::NetworkedVdp);
    config.mc.num_samples = 5_000;
    config.validation.num_boundary = 20;
    let run = pipeline::run_benchmark(&config, false).unwrap();
    let planes = run.estimate.planes.as_ref().unwrap();
    assert_eq!(planes.len(), 10);
    let min = planes.iter().map(|p| p.estimate.c_star).fold(f64::INFINITY, f64::min);
    assert_eq!(run.estimate.c_star, min);
    assert!(run.validation.grid_violations.is_none());
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = quick(Benchmark::Vanderpol);
    config.validation.grid_resolution = Some(21);
    config.output_dir = dir.path().to_path_buf();
    pipeline::run_benchmark(&config, true).unwrap();
    for f in [
        pipeline::MANIFEST_FILE,
        pipeline::P_FILE,
        pipeline::REPORT_FILE,
        pipeline::ESTIMATE_FILE,
        pipeline::VALIDATION_FILE,
        pipeline::GRID_FILE,
        "ellipse.csv",
        "traj_000.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let grid = fs::read_to_string(dir.path().join(pipeline::GRID_FILE)).unwrap();
    assert_eq!(grid.lines().next().unwrap(), "x1,x2,converged");
    assert_eq!(grid.lines().count(), 1 + 21 * 21);
}

#[test]
fn stable_linear_grid_converges_everywhere() {
    let model = SystemModel::new("damped", 2, |x, f| {
        f[0] = -x[0] + 0.5 * x[1];
        f[1] = -0.5 * x[0] - x[1];
    });
    let region = Region::cube(2, 2.0).unwrap();
    let grid = true_roa_grid(&model, &region, 21, 0.01, 20.0, 1e-2).unwrap();
    assert_eq!(grid.converged_count(), grid.len());
}

#[test]
fn custom_scheme_via_overrides() {
    let o = serde_json::json!({"system": "cubic3d", "num_ics": 4, "ic_scheme": {"kind": "uniform"}, "tf": 1.0});
    let config = RunConfig::resolve(None, Some(&o)).unwrap();
    assert_eq!(config.ic_scheme, IcScheme::Uniform);
    let (_, trajs) = pipeline::simulate_trajectories(&config).unwrap();
    assert_eq!(trajs.len(), 4);
    assert!(trajs.iter().all(|t| t.len() == 101));
}
