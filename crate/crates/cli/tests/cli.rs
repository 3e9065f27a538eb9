use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use stwp_cli::{cmd_bound, cmd_buffers, cmd_evaluate, cmd_fit, cmd_predict, cmd_simulate};
use stwp_core::inference::{McmcConfig, ModelSpec, Variant};
use stwp_core::io::{BoundConfig, BuffersConfig, EvaluateConfig, FitConfig, PredictConfig, SimulateConfig};
use stwp_core::simulate::{Domain, MissingPattern, Missingness, SimConfig};

fn toy_sim() -> SimConfig {
    SimConfig {
        domain: Domain::square(34.0),
        site_margin: 12.0,
        n_sites: 5,
        n_fit: 3,
        n_times: 10,
        gp_variance: 0.0,
        seed: 11,
        ..SimConfig::default()
    }
}

fn simulate(dir: &Path, missing: Option<Missingness>) -> SimulateConfig {
    let cfg = SimulateConfig {
        sim: toy_sim(),
        missing,
        out_dir: dir.to_path_buf(),
    };
    cmd_simulate(&cfg).unwrap();
    cfg
}

fn fit_config(data: &Path, out: &Path) -> FitConfig {
    FitConfig {
        response: data.join("response.csv"),
        covariate: data.join("covariate.csv"),
        indicator: None,
        model: ModelSpec::simulation(Variant::Baseline, 10.0, 5.0),
        mcmc: McmcConfig {
            n_iter: 400,
            n_warmup: 200,
            n_chains: 2,
            predict_draws: 200,
            seed: 5,
            ..McmcConfig::default()
        },
        out_dir: out.to_path_buf(),
    }
}

fn predict_config(data: &Path, fit: &Path, out: PathBuf) -> PredictConfig {
    PredictConfig {
        fit_dir: fit.to_path_buf(),
        targets: data.join("holdout.csv"),
        covariate: data.join("covariate.csv"),
        out,
        ..PredictConfig::default()
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn simulate_writes_every_file_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = Some(Missingness::new(MissingPattern::Blocky, 0.3));
    simulate(a.path(), m);
    simulate(b.path(), m);
    for f in ["covariate.csv", "mask.csv", "response.csv", "holdout.csv", "truth_mean.csv"] {
        assert!(read(a.path().join(f)) == read(b.path().join(f)), "{f} differs");
    }
    // the records differ only in the echoed output directory
    let json = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&read(d.join("simulate.json"))).unwrap();
        v["config"]["out_dir"].take();
        v
    };
    assert_eq!(json(a.path()), json(b.path()));
    let meta = json(a.path());
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(meta["config"]["sim"]["seed"], 11);
    assert!(meta["seeds"]["mask"].is_u64());
}

#[test]
fn realized_mask_matches_declared_rate() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), Some(Missingness::new(MissingPattern::Blocky, 0.3)));
    let meta: serde_json::Value = serde_json::from_slice(&read(dir.path().join("simulate.json"))).unwrap();
    let r = &meta["result"];
    let masked = r["n_masked"].as_u64().unwrap() as usize;
    let mask_rows = String::from_utf8(read(dir.path().join("mask.csv"))).unwrap().lines().count() - 1;
    assert_eq!(masked, mask_rows);
    // blocky masks hit round(0.3 n) entries at each time stamp
    let cfg = toy_sim();
    let nodes = ((34.0 / cfg.grid_step) as usize + 1).pow(2);
    let per_slot = (0.3 * nodes as f64).round() as usize;
    assert_eq!(masked, per_slot * cfg.n_slots());
    let cov_rows = String::from_utf8(read(dir.path().join("covariate.csv"))).unwrap().lines().count() - 1;
    assert_eq!(cov_rows + masked, nodes * cfg.n_slots());
}

#[test]
fn fit_predict_evaluate_pipeline() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    simulate(data.path(), None);
    let fit = fit_config(data.path(), &work.path().join("fit"));
    let summary = cmd_fit(&fit).unwrap();
    assert!(summary.params.iter().all(|p| p.rhat.is_finite()));
    assert_eq!(summary.names[..2], ["beta0", "beta1"]);

    let pred = predict_config(data.path(), &fit.out_dir, work.path().join("pred/predictions.csv"));
    let preds = cmd_predict(&pred).unwrap();
    assert_eq!(preds.len(), 2 * 10);
    for p in &preds {
        let i = p.interval.expect("held-out sites have covariate nearby");
        assert!(i.lo95.is_finite() && i.hi95.is_finite() && i.lo95 <= i.median && i.median <= i.hi95);
    }

    let eval = EvaluateConfig {
        observed: data.path().join("holdout.csv"),
        predictions: pred.out.clone(),
        out_dir: work.path().join("eval"),
    };
    let report = cmd_evaluate(&eval).unwrap();
    assert_eq!(report.n_scored, 20);
    assert!(report.rmse.is_finite());
    assert!(work.path().join("eval/evaluate_long.csv").exists());
}

#[test]
fn predicting_at_fitted_sites_gives_finite_intervals() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    simulate(data.path(), None);
    let fit = fit_config(data.path(), work.path());
    cmd_fit(&fit).unwrap();
    let mut pred = predict_config(data.path(), work.path(), work.path().join("p.csv"));
    pred.targets = data.path().join("response.csv");
    let preds = cmd_predict(&pred).unwrap();
    assert!(preds.iter().all(|p| p.interval.is_some_and(|i| i.width().is_finite())));
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let data = tempfile::tempdir().unwrap();
    simulate(data.path(), None);
    let outputs: Vec<(Vec<u8>, Vec<u8>)> = [1, 3]
        .into_iter()
        .map(|threads| {
            let work = tempfile::tempdir().unwrap();
            in_pool(threads, || {
                let fit = fit_config(data.path(), work.path());
                cmd_fit(&fit).unwrap();
                cmd_predict(&predict_config(data.path(), work.path(), work.path().join("p.csv"))).unwrap();
            });
            (read(work.path().join("samples.csv")), read(work.path().join("p.csv")))
        })
        .collect();
    assert!(outputs[0].0 == outputs[1].0, "samples differ");
    assert!(outputs[0].1 == outputs[1].1, "predictions differ");
}

#[test]
fn all_flagged_fit_is_refused() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    simulate(data.path(), None);
    let mut fit = fit_config(data.path(), work.path());
    fit.model.min_neighbors = 1_000_000;
    let e = cmd_fit(&fit).unwrap_err();
    assert!(e.to_string().contains("min_neighbors"), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn empty_buffer_target_is_flagged() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    simulate(data.path(), None);
    let fit = fit_config(data.path(), work.path());
    cmd_fit(&fit).unwrap();
    let targets = work.path().join("targets.csv");
    fs::write(&targets, "site_id,x_km,y_km,t_day,value\ncell_in,17,17,15,\ncell_far,500,500,15,\n").unwrap();
    let mut pred = predict_config(data.path(), work.path(), work.path().join("p.csv"));
    pred.targets = targets;
    let preds = cmd_predict(&pred).unwrap();
    assert!(preds[0].interval.is_some());
    assert!(preds[1].interval.is_none());
    let text = String::from_utf8(read(work.path().join("p.csv"))).unwrap();
    assert!(text.lines().nth(2).unwrap().ends_with(",,,,1"), "{text}");
}

#[test]
fn evaluate_lists_unmatched_keys() {
    let work = tempfile::tempdir().unwrap();
    let obs = work.path().join("obs.csv");
    let preds = work.path().join("p.csv");
    fs::write(&obs, "site_id,x_km,y_km,t_day,value\na,0,0,1,2.0\nb,1,1,1,3.0\n").unwrap();
    fs::write(&preds, "site_id,x_km,y_km,t_day,median,lo95,hi95,flagged\na,0,0,1,2.0,1.0,3.0,0\n").unwrap();
    let e = cmd_evaluate(&EvaluateConfig {
        observed: obs.clone(),
        predictions: preds.clone(),
        out_dir: work.path().to_path_buf(),
    })
    .unwrap_err();
    assert!(e.to_string().contains("b@1"), "{e}");

    fs::write(&preds, "site_id,x_km,y_km,t_day,median,lo95,hi95,flagged\na,0,0,1,2.0,1.0,3.0,0\nb,1,1,1,3.0,2.5,3.5,0\n").unwrap();
    let r = cmd_evaluate(&EvaluateConfig {
        observed: obs,
        predictions: preds,
        out_dir: work.path().to_path_buf(),
    })
    .unwrap();
    assert_eq!((r.rmse, r.coverage), (0.0, 1.0));
}

#[test]
fn identical_windows_give_zero_bounds() {
    let work = tempfile::tempdir().unwrap();
    let sim = toy_sim();
    let cfg = BoundConfig {
        windows: vec![[sim.radius, sim.lag], [15.0, 8.0]],
        n_points: 3,
        sim,
        out_dir: work.path().to_path_buf(),
        ..BoundConfig::default()
    };
    let out = cmd_bound(&cfg).unwrap();
    assert_eq!(out[0].max_actual, 0.0);
    assert_eq!(out[0].max_prop_bound, 0.0);
    assert_eq!(out[1].n_dominated, 3);
    let text = String::from_utf8(read(work.path().join("bound.csv"))).unwrap();
    assert!(text.lines().next().unwrap().contains("delta_space,delta_time"));
}

#[test]
fn buffer_diagnostics_cover_every_entry() {
    let data = tempfile::tempdir().unwrap();
    simulate(data.path(), None);
    let out = data.path().join("diag/buffers.csv");
    let n = cmd_buffers(&BuffersConfig {
        response: data.path().join("response.csv"),
        covariate: data.path().join("covariate.csv"),
        out: out.clone(),
        ..BuffersConfig::default()
    })
    .unwrap();
    assert_eq!(n, 3 * 10);
    let text = String::from_utf8(read(&out)).unwrap();
    assert_eq!(text.lines().next().unwrap(), "site_id,t_day,n_neighbors,sum_delta,valid");
}

fn stwp(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stwp"))
        .args(args)
        .current_dir(dir)
        .env_remove("STWP_THREADS")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[fit]\nradius = 3\n").unwrap();
    let out = stwp(&["--config", "bad.toml", "fit"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml") && err.contains("line 2"), "{err}");

    let out = stwp(&["fit", "--response", "nope.csv", "--covariate", "nope.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = stwp(&["evaluate"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_stwp"))
        .args(["buffers"])
        .env("STWP_THREADS", "many")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_runs_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let toml = r#"
threads = 2

[simulate]
out_dir = "data"
[simulate.sim]
domain = { x_min = 0.0, x_max = 34.0, y_min = 0.0, y_max = 34.0 }
site_margin = 12.0
n_sites = 5
n_fit = 3
n_times = 10
gp_variance = 0.0

[buffers]
response = "data/response.csv"
covariate = "data/covariate.csv"
out = "buffers.csv"
"#;
    fs::write(dir.path().join("run.toml"), toml).unwrap();
    let out = stwp(&["--config", "run.toml", "simulate"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = stwp(&["--config", "run.toml", "buffers", "--radius", "5", "--lag", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_slice(&read(dir.path().join("buffers.json"))).unwrap();
    assert_eq!(rec["config"]["radius"], 5.0);
    assert_eq!(rec["command"], "buffers");
}

#[test]
fn quickstart_config_runs_end_to_end() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.toml");
    let config = config.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["simulate", "fit", "predict", "evaluate", "buffers", "bound"] {
        let out = stwp(&["--config", config, cmd], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let first = read(dir.path().join("out/predictions.csv"));
    let out = stwp(&["--config", config, "--threads", "1", "fit"], dir.path());
    assert!(out.status.success());
    let out = stwp(&["--config", config, "predict"], dir.path());
    assert!(out.status.success());
    assert!(first == read(dir.path().join("out/predictions.csv")), "rerun changed predictions");
    let eval: serde_json::Value = serde_json::from_slice(&read(dir.path().join("out/evaluate/evaluate.json"))).unwrap();
    assert!(eval["result"]["coverage"].as_f64().unwrap() > 0.5);
}
