use lstm_nmpc::artifact::Provenance;
use lstm_nmpc::engine::*;
use lstm_nmpc::harness::{initial_measurement, ControllerKind, LogRow, Observation, SimLog};
use lstm_nmpc::imitation::*;
use lstm_nmpc::nmpc::{Nmpc, OcpConfig};
use lstm_nmpc::nn::Activation;
use lstm_nmpc::plant::PlantParams;
use lstm_nmpc::training::TrainConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_nmpc() -> Nmpc {
    let arch = EngineArchitecture {
        width: 4,
        performance_head: Activation::Linear,
        emission_head: Activation::Relu,
    };
    let norm = Normalizer::new([45.0, 4.5, 85.0, 180.0, 1.5, 200.0], [20.0, 3.7, 8.7, 90.0, 0.23, 110.0]).unwrap();
    let model = EngineModel::init(arch, norm, &mut ChaCha8Rng::seed_from_u64(3));
    Nmpc::new(
        OcpConfig {
            refined_starts: 0,
            ..OcpConfig::default()
        },
        model,
    )
    .unwrap()
}

fn short_cfg() -> ImitationConfig {
    ImitationConfig {
        seconds: 24.0,
        hold_min: 20,
        hold_max: 40,
        ..ImitationConfig::default()
    }
}

fn inputs(k: usize) -> ImitationInputs {
    let t = k as f64;
    ImitationInputs {
        torque: 150.0 + 30.0 * (0.1 * t).sin(),
        torque_error: 10.0 * (0.07 * t).cos(),
        nox: 250.0 + 50.0 * (0.05 * t).sin(),
        p_man: 1.4 + 0.1 * (0.03 * t).cos(),
        speed: 1500.0,
    }
}

fn constant_expert(n: usize) -> ImitationDataset {
    let target = ControlInput::new(42.0, 3.5, 88.0);
    ImitationDataset {
        samples: (0..n)
            .map(|k| ImitationSample {
                inputs: inputs(k),
                target,
                excluded: false,
            })
            .collect(),
        split: n * 4 / 5,
        provenance: Provenance::default(),
    }
}

#[test]
fn cycle_conversion() {
    assert_eq!(ImitationConfig::default().cycles(), 25000);
    let c = ImitationConfig {
        seconds: 1.0,
        nominal_speed: 1200.0,
        ..ImitationConfig::default()
    };
    assert_eq!(c.cycles(), 10);
}

#[test]
fn zero_net_outputs_lower_bound() {
    let net = ImitationNet::zeros();
    let (u, state) = net.act(&inputs(0), &net.zero_state()).unwrap();
    assert_eq!(u, ControlInput::lower());
    assert_eq!(state, net.zero_state());
}

#[test]
fn target_encoding_round_trips() {
    let mut net = ImitationNet::zeros();
    net.output_std = [12.0, 3.0, 6.0];
    for u in [ControlInput::new(10.0, -2.0, 70.0), ControlInput::new(55.5, 4.25, 91.0)] {
        let back = net.decode(&net.encode_target(&u));
        for (a, b) in back.to_array().iter().zip(u.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(net.encode_target(&ControlInput::lower()), vec![0.0; 3]);
}

#[test]
fn saturated_head_is_clamped_to_upper_bound() {
    let mut net = ImitationNet::zeros();
    net.net.head.bias = vec![1e3; 3];
    let (u, _) = net.act(&inputs(0), &net.zero_state()).unwrap();
    assert_eq!(u, ControlInput::upper());
}

#[test]
fn non_finite_action_is_an_error() {
    let mut net = ImitationNet::zeros();
    net.net.head.bias = vec![f64::INFINITY; 3];
    assert!(net.act(&inputs(0), &net.zero_state()).is_err());
}

#[test]
fn dataset_from_log_uses_previous_measurement() {
    let rows: Vec<LogRow> = (0..10)
        .map(|k| LogRow {
            cycle: k,
            speed: 1500.0,
            t_ref: 200.0,
            u: ControlInput::new(30.0 + k as f64, 2.0, 85.0),
            measured: EngineOutputs {
                torque: 100.0 + k as f64,
                p_man: 1.2,
                nox: 300.0,
            },
            predicted: None,
            slack: 0.0,
            sqp_iterations: 0,
            qp_iterations: 0,
            fallback: k == 4,
            clamped: false,
        })
        .collect();
    let log = SimLog {
        controller: ControllerKind::Nmpc,
        provenance: Provenance::new("abc", 1),
        rows,
        time_ms: vec![0.0; 10],
    };
    let ds = ImitationDataset::from_log(&log, 0.8).unwrap();
    assert_eq!(ds.split, 8);
    let first = Observation {
        cycle: 0,
        t_ref: 200.0,
        speed: 1500.0,
        measured: initial_measurement(),
    };
    assert_eq!(ds.samples[0].inputs, ImitationInputs::from_observation(&first));
    assert_eq!(ds.samples[3].inputs.torque, 102.0);
    assert_eq!(ds.samples[3].inputs.torque_error, 98.0);
    assert_eq!(ds.samples[3].target.fq, 33.0);
    assert_eq!(ds.excluded_count(), 1);
    let (train, val) = ds.segments();
    assert_eq!((train.len(), val.len()), (7, 2));
}

#[test]
fn random_profile_respects_ranges_and_holds() {
    let cfg = ImitationConfig {
        seconds: 400.0,
        ..ImitationConfig::default()
    };
    let p = random_profile(&cfg).unwrap();
    assert_eq!(p, random_profile(&cfg).unwrap());
    assert_eq!(p.len(), cfg.cycles());
    let mut run = 1;
    let mut holds = Vec::new();
    for k in 1..p.len() {
        if p.speed[k] == p.speed[k - 1] && p.torque[k] == p.torque[k - 1] {
            run += 1;
        } else {
            holds.push(run);
            run = 1;
        }
    }
    assert!(holds.iter().all(|h| (cfg.hold_min..=cfg.hold_max).contains(h)));
    assert!(p.speed.iter().all(|n| (1200.0..=1800.0).contains(n)));
    assert!(p.torque.iter().all(|t| (120.0..=320.0).contains(t)));
}

#[test]
fn reference_coverage_spans_both_ranges() {
    let cfg = ImitationConfig::default();
    let p = random_profile(&cfg).unwrap();
    let coverage = |xs: &[f64], (lo, hi): (f64, f64)| {
        let bins = 5;
        let mut hit = [false; 5];
        for x in xs {
            hit[(((x - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, 4.0) as usize] = true;
        }
        hit.iter().filter(|h| **h).count()
    };
    assert_eq!(coverage(&p.speed, cfg.speed_range), 5);
    assert_eq!(coverage(&p.torque, cfg.torque_range), 5);
}

#[test]
fn collection_is_seeded_and_in_bounds() {
    let nmpc = tiny_nmpc();
    let plant = PlantParams::default();
    let u0 = ControlInput::new(30.0, 5.0, 85.0);
    let prov = Provenance::new("cfg", 1);
    let (a, log) = collect_dataset(&nmpc, &plant, &short_cfg(), u0, &prov).unwrap();
    let (b, _) = collect_dataset(&nmpc, &plant, &short_cfg(), u0, &prov).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), short_cfg().cycles());
    assert_eq!(log.rows.len(), a.len());
    assert!(a.samples.iter().all(|s| s.target.within_bounds()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("imitation.csv");
    a.save(&path).unwrap();
    assert_eq!(ImitationDataset::load(&path).unwrap(), a);
}

#[test]
fn constant_expert_is_learned() {
    let ds = constant_expert(600);
    let cfg = TrainConfig {
        max_epochs: 20,
        mini_batch: 64,
        ..TrainConfig::imitation()
    };
    let (net, rep) = train_imitation(&ds, &cfg).unwrap();
    for j in 0..3 {
        assert!(rep.val_rmse_pct[j] < 0.5, "{:?}", rep.val_rmse_pct);
        assert!(rep.train_rmse_pct[j] < 0.5);
    }
    let a = net.replay(&[inputs(1), inputs(2)]).unwrap();
    assert_eq!(a, net.replay(&[inputs(1), inputs(2)]).unwrap());
    assert_eq!(train_imitation(&ds, &cfg).unwrap().0, net);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("imitation.json");
    net.save(&path, &Provenance::new("x", 2)).unwrap();
    assert_eq!(ImitationNet::load(&path).unwrap().0, net);
}

#[test]
fn rmse_is_percent_of_range() {
    let e = vec![ControlInput::new(20.0, 0.0, 80.0); 4];
    let p = vec![ControlInput::new(27.0, 1.3, 83.0); 4];
    let r = rmse_pct(&p, &e);
    assert!((r[0] - 10.0).abs() < 1e-12);
    assert!((r[1] - 10.0).abs() < 1e-12);
    assert!((r[2] - 10.0).abs() < 1e-12);
}

#[test]
fn invalid_configs_and_datasets_are_rejected() {
    let bad = [
        ImitationConfig {
            speed_range: (900.0, 1800.0),
            ..ImitationConfig::default()
        },
        ImitationConfig {
            hold_min: 0,
            ..ImitationConfig::default()
        },
        ImitationConfig {
            train_fraction: 1.0,
            ..ImitationConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    let mut ds = constant_expert(20);
    ds.samples[3].target.fq = 500.0;
    assert!(ds.validate().is_err());
}

proptest! {
    #[test]
    fn actions_stay_in_bounds(
        seed in 0u64..1000,
        torque in -100.0f64..500.0,
        err in -300.0f64..300.0,
        nox in 0.0f64..2000.0,
        p in 0.5f64..3.0,
        n in 1000.0f64..2000.0,
    ) {
        let ds = constant_expert(20);
        let (train, _) = ds.segments();
        let mut net = ImitationNet::init(&train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        net.output_std = [30.0, 10.0, 20.0];
        let x = ImitationInputs { torque, torque_error: err, nox, p_man: p, speed: n };
        let mut state = net.zero_state();
        for _ in 0..5 {
            let (u, next) = net.act(&x, &state).unwrap();
            prop_assert!(u.within_bounds());
            let (u2, _) = net.act(&x, &state).unwrap();
            prop_assert_eq!(u, u2);
            state = next;
        }
    }
}
