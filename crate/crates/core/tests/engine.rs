use lstm_nmpc::engine::*;
use lstm_nmpc::artifact::Provenance;
use lstm_nmpc::linalg::Matrix;
use lstm_nmpc::nn::Activation;
use lstm_nmpc::Error;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_arch() -> EngineArchitecture {
    EngineArchitecture {
        width: 4,
        performance_head: Activation::Linear,
        emission_head: Activation::Relu,
    }
}

fn normalizer() -> Normalizer {
    Normalizer::new([45.0, 4.5, 85.0, 180.0, 1.5, 200.0], [20.0, 3.7, 8.7, 90.0, 0.23, 110.0]).unwrap()
}

fn random_state<R: Rng>(n: usize, rng: &mut R) -> AugmentedState {
    let v: Vec<f64> = (0..4 * n)
        .map(|i| if i < 2 * n { rng.gen_range(-0.9..0.9) } else { rng.gen_range(-2.0..2.0) })
        .collect();
    AugmentedState::from_slice(&v).unwrap()
}

#[test]
fn normalize_round_trip_and_fixed_points() {
    let n = normalizer();
    assert_eq!(n.normalize(Channel::Torque, 180.0), 0.0);
    assert_eq!(n.normalize(Channel::Torque, 270.0), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let ch = Channel::ALL[rng.gen_range(0..6)];
        let x: f64 = rng.gen_range(-500.0..500.0);
        let back = n.denormalize(ch, n.normalize(ch, x));
        assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
    }
    assert!(n.normalize_named("nox", 1.0).is_ok());
    assert!(matches!(n.normalize_named("egr", 1.0), Err(Error::UnknownChannel(_))));
    assert!(Normalizer::new([0.0; 6], [1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).is_err());
}

#[test]
fn zero_model_outputs_decode_zero() {
    let model = EngineModel::zeros(small_arch(), normalizer());
    let (y, x) = model
        .forward_step(&model.zero_state(), &ControlInput::new(33.0, 2.0, 90.0))
        .unwrap();
    assert_eq!(y.torque, 180.0);
    assert_eq!(y.p_man, 1.5);
    // ReLU-headed NOx is encoded relative to zero
    assert_eq!(y.nox, model.decode_output(Channel::Nox, 0.0));
    assert_eq!(y.nox, 0.0);
    assert_eq!(x, model.zero_state());
}

#[test]
fn forward_step_matches_layer_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = EngineModel::init(small_arch(), normalizer(), &mut rng);
    let x = random_state(4, &mut rng);
    let u = ControlInput::new(50.0, 3.0, 80.0);
    let (y, next) = model.forward_step(&x, &u).unwrap();

    let un = [(50.0 - 45.0) / 20.0, (3.0 - 4.5) / 3.7, (80.0 - 85.0) / 8.7];
    let p = &model.performance;
    let a1 = lstm_nmpc::nn::fc_forward(&p.fc_in, &un).unwrap();
    let (h1, s1) = lstm_nmpc::nn::lstm_step(&p.lstm, &a1, &x.performance()).unwrap();
    let a2 = lstm_nmpc::nn::fc_forward(&p.fc_mid, &h1).unwrap();
    let yp = lstm_nmpc::nn::fc_forward(&p.head, &a2).unwrap();
    let e = model.emission.clone();
    let a4 = lstm_nmpc::nn::fc_forward(&e.fc_in, &[un[0], un[1], un[2], yp[0], yp[1]]).unwrap();
    let (h2, s2) = lstm_nmpc::nn::lstm_step(&e.lstm, &a4, &x.emission()).unwrap();
    let a5 = lstm_nmpc::nn::fc_forward(&e.fc_mid, &h2).unwrap();
    let nox = lstm_nmpc::nn::fc_forward(&e.head, &a5).unwrap();

    assert_eq!(y.torque, 180.0 + 90.0 * yp[0]);
    assert_eq!(y.p_man, 1.5 + 0.23 * yp[1]);
    assert_eq!(y.nox, 110.0 * nox[0]);
    assert_eq!(next, AugmentedState::from_parts(s1, s2));
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let eps = 1e-6;
    let mut points = 0;
    while points < 100 {
        let model = EngineModel::init(small_arch(), normalizer(), &mut rng);
        let x = random_state(4, &mut rng);
        let un = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let (_, jac) = model.step_with_jacobians(&x, &un).unwrap();
        let xv = x.to_vec();
        let eval = |xv: &[f64], un: &[f64; 3]| {
            let s = model.step_normalized(&AugmentedState::from_slice(xv).unwrap(), un).unwrap();
            let mut out = s.next.to_vec();
            out.extend_from_slice(&s.y);
            out
        };
        let mut ok = true;
        let mut worst: f64 = 0.0;
        for col in 0..xv.len() + 3 {
            let (mut xp, mut xm, mut up, mut um) = (xv.clone(), xv.clone(), un, un);
            if col < xv.len() {
                xp[col] += eps;
                xm[col] -= eps;
            } else {
                up[col - xv.len()] += eps;
                um[col - xv.len()] -= eps;
            }
            let (fp, fm) = (eval(&xp, &up), eval(&xm, &um));
            for r in 0..fp.len() {
                let fd = (fp[r] - fm[r]) / (2.0 * eps);
                let an = match (r < xv.len(), col < xv.len()) {
                    (true, true) => jac.dx_dx[(r, col)],
                    (true, false) => jac.dx_du[(r, col - xv.len())],
                    (false, true) => jac.dy_dx[(r - xv.len(), col)],
                    (false, false) => jac.dy_du[(r - xv.len(), col - xv.len())],
                };
                // FD straddling a relu kink is not a derivative; skip such points
                if (fd - an).abs() > 1e-3 {
                    ok = false;
                }
                worst = worst.max(rel_err(an, fd));
            }
        }
        if ok {
            assert!(worst < 1e-5, "worst {worst}");
            points += 1;
        }
    }
}

#[test]
fn performance_block_ignores_emission_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = EngineModel::init(small_arch(), normalizer(), &mut rng);
    let x = random_state(4, &mut rng);
    let (_, jac) = model.step_with_jacobians(&x, &[0.1, -0.2, 0.3]).unwrap();
    let n = 4;
    for r in [0..n, 2 * n..3 * n].into_iter().flatten() {
        for c in [n..2 * n, 3 * n..4 * n].into_iter().flatten() {
            assert_eq!(jac.dx_dx[(r, c)], 0.0);
        }
    }
    for r in 0..2 {
        for c in [n..2 * n, 3 * n..4 * n].into_iter().flatten() {
            assert_eq!(jac.dy_dx[(r, c)], 0.0);
        }
    }
}

#[test]
fn nox_input_gradient_splits_into_direct_and_cascade_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = EngineModel::init(small_arch(), normalizer(), &mut rng);
    let x = random_state(4, &mut rng);
    let un = [0.4, -0.3, 0.2];
    let (_, full) = model.step_with_jacobians(&x, &un).unwrap();

    let mut ablated = model.clone();
    ablated.performance.head.weights = Matrix::zeros(2, 4);
    let (_, direct) = ablated.step_with_jacobians(&x, &un).unwrap();
    // with FC3 weights zeroed, yp is constant: only the direct FC4 path remains
    let ec = ablated
        .emission
        .step_cached(
            &{
                let s = ablated.step_normalized(&x, &un).unwrap();
                [un[0], un[1], un[2], s.y[0], s.y[1]]
            },
            &x.emission(),
        )
        .unwrap();
    let ej = ablated.emission.jacobians_from_cache(&ec);
    for c in 0..3 {
        assert!((direct.dy_du[(2, c)] - ej.dy_du[(0, c)]).abs() < 1e-14);
    }
    // the full model differs because of the cascade term
    let diff: f64 = (0..3).map(|c| (full.dy_du[(2, c)] - direct.dy_du[(2, c)]).abs()).sum();
    model.emission.fc_in.weights.data_mut()[3] += 0.0;
    assert!(diff > 0.0);
}

#[test]
fn rollout_of_one_equals_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = EngineModel::init(small_arch(), normalizer(), &mut rng);
    let x = random_state(4, &mut rng);
    let u = ControlInput::new(40.0, 1.0, 95.0);
    let (y, _) = model.forward_step(&x, &u).unwrap();
    assert_eq!(model.rollout(&x, &[u]).unwrap(), vec![y]);
    assert!(model.rollout(&x, &[]).is_err());
    let seq = vec![u; 20];
    assert_eq!(model.rollout(&x, &seq).unwrap(), model.rollout(&x, &seq).unwrap());
}

#[test]
fn non_finite_state_is_rejected() {
    let model = EngineModel::zeros(small_arch(), normalizer());
    let mut x = model.zero_state();
    x.c2[1] = f64::NAN;
    let err = model.forward_step(&x, &ControlInput::new(30.0, 0.0, 80.0)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

#[test]
fn save_load_round_trip_and_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = EngineModel::init(small_arch(), normalizer(), &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.json");
    model.save(&p, &Provenance::new("cfg", 3)).unwrap();
    let (back, prov) = EngineModel::load(&p).unwrap();
    assert_eq!(back, model);
    assert_eq!(prov.seed, 3);

    let mut broken = model.clone();
    broken.emission.head = lstm_nmpc::nn::FcLayer::zeros(4, 2, Activation::Relu);
    broken.save(&p, &Provenance::default()).unwrap();
    assert!(EngineModel::load(&p).is_err());
}

#[test]
fn nrmse_basics() {
    assert_eq!(nrmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
    // rmse 1, range 2
    assert!((nrmse(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]) - 0.5).abs() < 1e-15);
}
