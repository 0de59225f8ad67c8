use lstm_nmpc::engine::Normalizer;
use lstm_nmpc::linalg::{Matrix, Vector};
use lstm_nmpc::nn::{Activation, LstmState};
use lstm_nmpc::plant::PlantParams;
use lstm_nmpc::recurrent::{NetGrad, NetShape, RecurrentNet};
use lstm_nmpc::training::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn lr_schedule_steps() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rate(0), 0.001);
    assert_eq!(c.learning_rate(149), 0.001);
    assert_eq!(c.learning_rate(150), 0.0005);
    assert_eq!(c.learning_rate(450), 0.000125);
    assert_eq!(c.chunks_per_batch(), 8);
}

#[test]
fn chunks_drop_short_tail() {
    let x: Vec<Vector> = (0..11).map(|i| vec![i as f64]).collect();
    let c = make_chunks(&x, &x, 5);
    assert_eq!(c.len(), 2);
    let c = make_chunks(&x, &x, 4);
    assert_eq!(c.iter().map(Chunk::len).collect::<Vec<_>>(), vec![4, 4, 3]);
}

fn shape(head: Activation) -> NetShape {
    NetShape {
        inputs: 2,
        fc_width: 4,
        hidden: 3,
        outputs: 2,
        head,
    }
}

fn random_chunk<R: Rng>(len: usize, rng: &mut R) -> Chunk {
    Chunk {
        inputs: (0..len).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
        targets: (0..len).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
    }
}

#[test]
fn loss_trivial_cases() {
    let net = RecurrentNet::zeros(shape(Activation::Linear));
    let zero = Chunk {
        inputs: vec![vec![0.3, -0.2]; 4],
        targets: vec![vec![0.0, 0.0]; 4],
    };
    assert_eq!(loss(&net, &[zero], 0.0).unwrap(), 0.0);

    let net = RecurrentNet::zeros(NetShape {
        outputs: 1,
        ..shape(Activation::Linear)
    });
    let one = Chunk {
        inputs: vec![vec![1.0, 1.0]],
        targets: vec![vec![-2.0]],
    };
    assert_eq!(loss(&net, &[one], 0.0).unwrap(), 4.0);
    assert!(loss(&net, &[], 0.0).is_err());
}

#[test]
fn loss_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = RecurrentNet::init(shape(Activation::Linear), &mut rng);
    let batch = [random_chunk(5, &mut rng), random_chunk(3, &mut rng)];
    let l2 = 0.3;
    let mut sse = 0.0;
    for c in &batch {
        let mut state = LstmState::zeros(3);
        for (u, t) in c.inputs.iter().zip(&c.targets) {
            let (y, next) = net.step(u, &state).unwrap();
            sse += (y[0] - t[0]).powi(2) + (y[1] - t[1]).powi(2);
            state = next;
        }
    }
    let sq = |m: &Matrix| m.data().iter().map(|w| w * w).sum::<f64>();
    let w2 = sq(&net.fc_in.weights)
        + sq(&net.lstm.w_input)
        + sq(&net.lstm.w_hidden)
        + sq(&net.fc_mid.weights)
        + sq(&net.head.weights);
    let want = sse / 8.0 + l2 / 16.0 * w2;
    assert!((loss(&net, &batch, l2).unwrap() - want).abs() < 1e-12);
}

#[test]
fn bptt_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..5 {
        let net = RecurrentNet::init(shape(Activation::Linear), &mut rng);
        let batch = [random_chunk(5, &mut rng)];
        let l2 = 0.1;
        let (l, grad) = bptt_gradients(&net, &batch, l2).unwrap();
        assert!((l - loss(&net, &batch, l2).unwrap()).abs() < 1e-12);
        let analytic: Vec<Vec<f64>> = grad.all().iter().map(|s| s.to_vec()).collect();
        let n_blocks = analytic.len();
        for b in 0..n_blocks {
            for i in 0..analytic[b].len() {
                let eval = |h: f64| {
                    let mut p = net.clone();
                    p.param_slices_mut()[b].0[i] += h;
                    loss(&p, &batch, l2).unwrap()
                };
                let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
                let fd = (4.0 * central(5e-5) - central(1e-4)) / 3.0;
                let an = analytic[b][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel <= 1e-4, "trial {trial} block {b} index {i}: {an} vs {fd}");
            }
        }
    }
}

#[test]
fn degenerate_net_has_zero_gradient() {
    let net = RecurrentNet::zeros(shape(Activation::Linear));
    let c = Chunk {
        inputs: vec![vec![0.5, -0.5]; 6],
        targets: vec![vec![0.0, 0.0]; 6],
    };
    let (_, g) = bptt_gradients(&net, &[c], 0.1).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn gradient_is_linear_in_repeated_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = RecurrentNet::init(shape(Activation::Linear), &mut rng);
    let c = random_chunk(6, &mut rng);
    let zero = LstmState::zeros(3);
    let mut once = NetGrad::zeros_like(&net);
    net.bptt(&c.inputs, &c.targets, &zero, &mut once).unwrap();
    let mut twice = NetGrad::zeros_like(&net);
    net.bptt(&c.inputs, &c.targets, &zero, &mut twice).unwrap();
    net.bptt(&c.inputs, &c.targets, &zero, &mut twice).unwrap();
    for (a, b) in once.all().iter().zip(twice.all()) {
        for (x, y) in a.iter().zip(b) {
            assert!((2.0 * x - y).abs() <= 1e-15 * (1.0 + y.abs()));
        }
    }
    // normalized by the cycle count, duplicated chunks leave the mean unchanged
    let (_, g1) = bptt_gradients(&net, &[c.clone()], 0.0).unwrap();
    let (_, g2) = bptt_gradients(&net, &[c.clone(), c], 0.0).unwrap();
    for (a, b) in g1.all().iter().zip(g2.all()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-14 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut opt = Adam::new(&[3], 0.9, 0.99, 1e-8);
    let mut p = vec![1.0, -2.0, 0.5];
    opt.step(vec![&mut p], &[&[0.0, 0.0, 0.0]], 0.01);
    assert_eq!(p, vec![1.0, -2.0, 0.5]);
    assert_eq!(opt.t, 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut opt = Adam::new(&[2], 0.9, 0.99, 1e-8);
    let mut p = vec![0.0, 0.0];
    opt.step(vec![&mut p], &[&[3.0, -0.5]], 0.1);
    assert!((p[0] + 0.1 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
    assert!((p[1] - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
}

#[test]
fn adam_matches_scalar_reference() {
    // minimize (x − 3)² from x = 0
    let (b1, b2, eps, lr) = (0.9f64, 0.99f64, 1e-8, 0.05);
    let (mut x_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut opt = Adam::new(&[1], b1, b2, eps);
    let mut x = vec![0.0];
    for t in 1..=10 {
        let g = 2.0 * (x_ref - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x_ref -= lr * mh / (vh.sqrt() + eps);

        let g = [2.0 * (x[0] - 3.0)];
        opt.step(vec![&mut x], &[&g], lr);
        assert!((x[0] - x_ref).abs() < 1e-14, "step {t}");
    }
    assert!(x[0] > 0.4);
}

fn constant_data() -> SequenceData {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<Vector> = (0..400).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let targets = vec![vec![0.4, -0.7]; 400];
    SequenceData {
        train_inputs: inputs[..320].to_vec(),
        train_targets: targets[..320].to_vec(),
        val_inputs: inputs[320..].to_vec(),
        val_targets: targets[320..].to_vec(),
    }
}

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        mini_batch: 16,
        lr0: 0.01,
        lr_drop_period: 20,
        l2: 0.0,
        chunk_len: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_target_is_fitted() {
    let data = constant_data();
    let net = RecurrentNet::init(shape(Activation::Linear), &mut ChaCha8Rng::seed_from_u64(5));
    let (fit, hist) = train_net(&net, &data, &small_cfg(50)).unwrap();
    assert!(hist.best_val_loss <= 1e-6, "{}", hist.best_val_loss);
    assert_eq!(validation_loss(&fit, &data).unwrap(), hist.best_val_loss);
    assert!(hist.records.iter().all(|r| hist.best_val_loss <= r.val_loss));
    assert_eq!(hist.records.len(), 50);
}

#[test]
fn seeded_training_is_reproducible() {
    let data = constant_data();
    let net = RecurrentNet::init(shape(Activation::Relu), &mut ChaCha8Rng::seed_from_u64(6));
    let a = train_net(&net, &data, &small_cfg(5)).unwrap();
    let b = train_net(&net, &data, &small_cfg(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_training_configs_are_rejected() {
    for cfg in [
        TrainConfig {
            chunk_len: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
}

fn excitation() -> ExcitationConfig {
    ExcitationConfig {
        n_cycles: 5000,
        ..ExcitationConfig::default()
    }
}

#[test]
fn excitation_is_seeded_and_in_bounds() {
    let p = PlantParams::default();
    let a = generate_excitation(&excitation(), &p).unwrap();
    assert_eq!(a, generate_excitation(&excitation(), &p).unwrap());
    let other = ExcitationConfig {
        seed: 99,
        ..excitation()
    };
    assert_ne!(a.inputs, generate_excitation(&other, &p).unwrap().inputs);
    assert_eq!(a.len(), 5000);
    assert_eq!(a.split, 4000);
    assert!(a.inputs.iter().all(|u| u.within_bounds()));
    assert!(a.targets.iter().all(|y| y.torque.is_finite() && y.nox >= 0.0));
}

#[test]
fn excitation_covers_each_input_range() {
    let cfg = ExcitationConfig {
        n_cycles: 20000,
        ..ExcitationConfig::default()
    };
    let ds = generate_excitation(&cfg, &PlantParams::default()).unwrap();
    let ranges = [cfg.fq_range, cfg.soi_range, cfg.vgt_range];
    for (ch, (lo, hi)) in ranges.iter().enumerate() {
        let bins = 20;
        let mut hit = vec![false; bins];
        for u in &ds.inputs {
            let x = u.to_array()[ch];
            let b = (((x - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
            hit[b] = true;
        }
        let covered = hit.iter().filter(|h| **h).count();
        assert!(covered * 10 >= bins * 9, "channel {ch}: {covered}/{bins}");
    }
}

#[test]
fn normalizer_uses_training_split_only() {
    let mut ds = generate_excitation(&excitation(), &PlantParams::default()).unwrap();
    let before = ds.normalizer().unwrap();
    assert_eq!(before, Normalizer::fit(&ds.inputs[..ds.split], &ds.targets[..ds.split]).unwrap());
    for y in ds.targets[ds.split..].iter_mut() {
        y.torque += 1e4;
    }
    assert_eq!(ds.normalizer().unwrap(), before);
}

#[test]
fn dataset_rejects_bad_split_and_round_trips() {
    let ds = generate_excitation(&excitation(), &PlantParams::default()).unwrap();
    assert!(Dataset::new(ds.inputs.clone(), ds.targets.clone(), 0, 1500.0).is_err());
    assert!(Dataset::new(ds.inputs.clone(), ds.targets.clone(), ds.len(), 1500.0).is_err());
    assert!(Dataset::new(ds.inputs.clone(), ds.targets[1..].to_vec(), 10, 1500.0).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
}
