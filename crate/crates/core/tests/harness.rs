use std::path::Path;

use lstm_nmpc::artifact::Provenance;
use lstm_nmpc::engine::{ControlInput, EngineOutputs};
use lstm_nmpc::harness::*;
use lstm_nmpc::plant::{calibrate_benchmark, default_grids, BenchmarkPolicy, PlantParams};
use lstm_nmpc::{Error, Result};
use proptest::prelude::*;

fn row(k: usize, t_ref: f64, torque: f64, nox: f64, fq: f64) -> LogRow {
    LogRow {
        cycle: k,
        speed: 1500.0,
        t_ref,
        u: ControlInput::new(fq, 2.0, 85.0),
        measured: EngineOutputs {
            torque,
            p_man: 1.4,
            nox,
        },
        predicted: None,
        slack: 0.0,
        sqp_iterations: 0,
        qp_iterations: 0,
        fallback: false,
        clamped: false,
    }
}

fn log_of(controller: ControllerKind, rows: Vec<LogRow>) -> SimLog {
    let n = rows.len();
    SimLog {
        controller,
        provenance: Provenance::new("fp", 1),
        rows,
        time_ms: vec![0.5; n],
    }
}

fn report(controller: ControllerKind, nox: f64, fq: f64, load: f64) -> MetricsReport {
    MetricsReport {
        controller,
        cycles: 100,
        cumulative_nox: 100.0 * nox,
        average_nox: nox,
        load_error_pct: load,
        cumulative_fq_g: 0.1 * fq,
        average_fq_mg: fq,
        mean_time_ms: 1.0,
        max_time_ms: 2.0,
    }
}

fn benchmark() -> BenchmarkController {
    let (s, t) = default_grids();
    BenchmarkController {
        map: calibrate_benchmark(&PlantParams::noiseless(), &BenchmarkPolicy::default(), &s, &t).unwrap(),
    }
}

#[test]
fn constant_nox_metrics() {
    let rows = (0..10).map(|k| row(k, 200.0, 200.0, 300.0, 40.0)).collect();
    let m = compute_metrics(&log_of(ControllerKind::Benchmark, rows)).unwrap();
    assert_eq!(m.cumulative_nox, 3000.0);
    assert_eq!(m.average_nox, 300.0);
    assert_eq!(m.load_error_pct, 0.0);
    assert!((m.cumulative_fq_g - 0.4).abs() < 1e-15);
    assert_eq!(m.average_fq_mg, 40.0);
    assert_eq!(m.mean_time_ms, 0.5);
}

#[test]
fn hand_computed_metrics() {
    let rows = vec![
        row(0, 100.0, 90.0, 200.0, 30.0),
        row(1, 200.0, 210.0, 400.0, 50.0),
        row(2, 300.0, 270.0, 600.0, 70.0),
    ];
    let mut log = log_of(ControllerKind::Nmpc, rows);
    log.time_ms = vec![1.0, 4.0, 1.0];
    let m = compute_metrics(&log).unwrap();
    assert_eq!(m.cumulative_nox, 1200.0);
    assert_eq!(m.average_nox, 400.0);
    // (10 + 10 + 30) / 600
    assert!((m.load_error_pct - 100.0 * 50.0 / 600.0).abs() < 1e-12);
    assert!((m.cumulative_fq_g - 0.15).abs() < 1e-15);
    assert_eq!(m.average_fq_mg, 50.0);
    assert_eq!(m.mean_time_ms, 2.0);
    assert_eq!(m.max_time_ms, 4.0);
    assert!(compute_metrics(&log_of(ControllerKind::Nmpc, Vec::new())).is_err());
}

#[test]
fn improvement_sign_convention() {
    let reports = [
        report(ControllerKind::Benchmark, 376.8, 50.0, 1.0),
        report(ControllerKind::Nmpc, 290.2, 48.26, 3.05),
    ];
    let imp = compare_controllers(&reports, ControllerKind::Benchmark).unwrap();
    assert_eq!(imp[0].nox_pct, 0.0);
    assert_eq!(imp[0].fq_pct, 0.0);
    assert_eq!(imp[0].load_error_delta, 0.0);
    assert!((imp[1].nox_pct - -22.98).abs() < 0.005, "{}", imp[1].nox_pct);
    assert!((imp[1].fq_pct - -3.48).abs() < 1e-9);
    assert!((imp[1].load_error_delta - -2.05).abs() < 1e-9);
    assert!(compare_controllers(&reports, ControllerKind::Imitation).is_err());

    let csv = improvement_csv(&imp, &Provenance::new("fp", 1), ControllerKind::Benchmark).unwrap();
    assert!(csv.contains("# baseline: benchmark"));
    assert!(csv.contains("nmpc,-22.98,-3.48,-2.05"), "{csv}");
}

#[test]
fn speedup_is_time_ratio() {
    let mut slow = report(ControllerKind::Nmpc, 1.0, 1.0, 1.0);
    let mut fast = report(ControllerKind::Imitation, 1.0, 1.0, 1.0);
    slow.mean_time_ms = 12.2;
    fast.mean_time_ms = 0.04;
    assert!((speedup(&slow, &fast) - 305.0).abs() < 1e-9);
}

#[test]
fn metrics_csv_embeds_provenance() {
    let r = report(ControllerKind::Benchmark, 300.0, 40.0, 1.0);
    let prov = Provenance::new("abc123", 9);
    let with = metrics_csv(&[r.clone()], &prov, true).unwrap();
    let without = metrics_csv(&[r], &prov, false).unwrap();
    for text in [&with, &without] {
        assert!(text.contains("abc123") && text.contains('9'));
    }
    assert!(with.contains("mean_time_ms"));
    assert!(!without.contains("time"));
}

#[test]
fn controller_kind_names() {
    for k in ControllerKind::ALL {
        assert_eq!(k.name().parse::<ControllerKind>().unwrap(), k);
    }
    assert!(matches!("mpc".parse::<ControllerKind>(), Err(Error::InvalidParameter(_))));
}

#[test]
fn profile_from_steps() {
    let p = ReferenceProfile::from_steps(&[(0, 1500.0, 100.0), (3, 1200.0, 250.0)], 5).unwrap();
    assert_eq!(p.torque, vec![100.0, 100.0, 100.0, 250.0, 250.0]);
    assert_eq!(p.speed, vec![1500.0, 1500.0, 1500.0, 1200.0, 1200.0]);
    assert!(ReferenceProfile::from_steps(&[(1, 1500.0, 100.0)], 5).is_err());
    assert!(ReferenceProfile::from_steps(&[(0, 1500.0, 100.0), (0, 1500.0, 90.0)], 5).is_err());
    assert!(ReferenceProfile::from_steps(&[(0, 2500.0, 100.0)], 5).is_err());
    assert!(ReferenceProfile::constant(1500.0, 100.0, 0).validate().is_err());
}

#[test]
fn shipped_profiles_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, speed) in [("profile_1500.csv", 1500.0), ("profile_1200.csv", 1200.0)] {
        let p = ReferenceProfile::load_steps(&dir.join(file), 1800).unwrap();
        assert_eq!(p.len(), 1800);
        assert!(p.speed.iter().all(|n| *n == speed));
        assert!(p.torque.iter().all(|t| (120.0..=320.0).contains(t)));
    }
}

#[test]
fn benchmark_episode_tracks_steps_and_is_deterministic() {
    let profile = ReferenceProfile::from_steps(&[(0, 1500.0, 150.0), (100, 1500.0, 250.0)], 200).unwrap();
    let plant = PlantParams::default();
    let prov = Provenance::new("fp", 1);
    let a = run_episode(&mut benchmark(), &plant, &profile, &prov).unwrap();
    let b = run_episode(&mut benchmark(), &plant, &profile, &prov).unwrap();
    assert!(a.fault.is_none());
    assert_eq!(a.log.rows, b.log.rows);
    assert_eq!(a.log.rows.len(), 200);
    assert!(a.log.rows.iter().enumerate().all(|(k, r)| r.cycle == k && r.u.within_bounds()));
    for (k, t) in [(99, 150.0), (199, 250.0)] {
        let y = a.log.rows[k].measured.torque;
        assert!((y - t).abs() <= 0.05 * t, "cycle {k}: {y}");
    }
}

#[test]
fn log_round_trips_through_files() {
    let profile = ReferenceProfile::constant(1500.0, 200.0, 30);
    let res = run_episode(&mut benchmark(), &PlantParams::default(), &profile, &Provenance::new("fp", 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (log, timing) = res.log.write(dir.path(), "run").unwrap();
    assert!(timing.exists());
    let back = SimLog::read(&log).unwrap();
    assert_eq!(back, res.log);
}

struct Faulty {
    after: usize,
    out_of_bounds: bool,
}

impl Controller for Faulty {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Imitation
    }

    fn reset(&mut self) {}

    fn act(&mut self, obs: &Observation) -> Result<ControlDecision> {
        if obs.cycle < self.after {
            Ok(ControlDecision::plain(ControlInput::new(30.0, 2.0, 85.0)))
        } else if self.out_of_bounds {
            Ok(ControlDecision::plain(ControlInput::new(500.0, 2.0, 85.0)))
        } else {
            Err(Error::NonFinite { layer: "test".into() })
        }
    }
}

#[test]
fn controller_fault_keeps_partial_log() {
    let profile = ReferenceProfile::constant(1500.0, 200.0, 20);
    for out_of_bounds in [false, true] {
        let mut c = Faulty {
            after: 7,
            out_of_bounds,
        };
        let res = run_episode(&mut c, &PlantParams::default(), &profile, &Provenance::default()).unwrap();
        assert_eq!(res.log.rows.len(), 7);
        assert!(matches!(res.fault, Some(Error::ControllerFault { cycle: 7, .. })));
    }
}

struct Recorder {
    seen: Vec<Observation>,
}

impl Controller for Recorder {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Benchmark
    }

    fn reset(&mut self) {
        self.seen.clear();
    }

    fn act(&mut self, obs: &Observation) -> Result<ControlDecision> {
        self.seen.push(*obs);
        Ok(ControlDecision::plain(ControlInput::new(40.0, 2.0, 85.0)))
    }
}

#[test]
fn controllers_see_previous_measurement_only() {
    let profile = ReferenceProfile::constant(1500.0, 200.0, 5);
    let mut c = Recorder { seen: Vec::new() };
    let res = run_episode(&mut c, &PlantParams::default(), &profile, &Provenance::default()).unwrap();
    assert_eq!(c.seen[0].measured, initial_measurement());
    for k in 1..5 {
        assert_eq!(c.seen[k].measured, res.log.rows[k - 1].measured);
    }
}

const CONFIG: &str = r#"
plant = "plant.toml"
out_dir = "out"
seed = 10

[[episodes]]
name = "design"
profile = "profile_1500.csv"
cycles = 100
"#;

#[test]
fn experiment_config_resolves_paths_and_seeds() {
    let origin = Path::new("/cfg/exp.toml");
    let cfg = ExperimentConfig::parse(CONFIG, origin).unwrap();
    assert_eq!(cfg.plant, Path::new("/cfg/plant.toml"));
    assert_eq!(cfg.out_dir, Path::new("/cfg/out"));
    assert_eq!(cfg.episode("design").unwrap().profile, Path::new("/cfg/profile_1500.csv"));
    assert!(cfg.episode("other").is_err());
    assert_eq!(cfg.excitation.seed, 10);
    assert_eq!(cfg.training.seed, 11);
    assert_eq!(cfg.imitation.seed, 12);
    assert_eq!(cfg.imitation_training.seed, 13);
    assert_eq!(cfg.plant_seed(), 14);
    assert_eq!(cfg.imitation_training.lr0, 0.02);
}

#[test]
fn malformed_config_reports_line() {
    let text = CONFIG.replace("seed = 10", "seed = 10\nbogus_key = 3");
    let err = ExperimentConfig::parse(&text, Path::new("exp.toml")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("exp.toml") && msg.contains("line 5"), "{msg}");

    let text = CONFIG.replace("seed = 10", "seed = \"ten\"");
    let msg = ExperimentConfig::parse(&text, Path::new("exp.toml")).unwrap_err().to_string();
    assert!(msg.contains("line 4"), "{msg}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.toml", "ci.toml"] {
        let (cfg, fp) = ExperimentConfig::load(&dir.join(name)).unwrap();
        assert_eq!(fp.len(), 64);
        cfg.plant_params().unwrap();
        assert_eq!(cfg.episodes.len(), 2);
    }
}

proptest! {
    #[test]
    fn average_times_cycles_is_cumulative(
        vals in prop::collection::vec((50.0f64..350.0, 0.0f64..400.0, 0.0f64..1500.0, 10.0f64..80.0), 1..60),
    ) {
        let rows = vals.iter().enumerate().map(|(k, (r, t, n, f))| row(k, *r, *t, *n, *f)).collect();
        let m = compute_metrics(&log_of(ControllerKind::Nmpc, rows)).unwrap();
        let n = m.cycles as f64;
        prop_assert!((m.average_nox * n - m.cumulative_nox).abs() <= 1e-9 * m.cumulative_nox.max(1.0));
        prop_assert!((m.average_fq_mg * n / 1000.0 - m.cumulative_fq_g).abs() <= 1e-9 * m.cumulative_fq_g);
        prop_assert!(m.load_error_pct >= 0.0 && m.cumulative_nox >= 0.0);
        let same = compare_controllers(&[m.clone(), MetricsReport { controller: ControllerKind::Benchmark, ..m }], ControllerKind::Benchmark).unwrap();
        prop_assert!(same.iter().all(|i| i.nox_pct == 0.0 && i.fq_pct == 0.0 && i.load_error_delta == 0.0));
    }
}
