use sparsebif::autoenc::{
    init_mlp, joint_loss_and_grads, train, LossWeights, MlpParams, TrainConfig, TrainingData,
};
use sparsebif::numkit::{Matrix, Rng};
use sparsebif::sindy::LibrarySpec;

struct Problem {
    x: Matrix,
    xdot: Matrix,
    mu: Vec<f64>,
    enc: MlpParams,
    dec: MlpParams,
    xi: Matrix,
    spec: LibrarySpec,
    weights: LossWeights,
}

fn toy_problem(seed: u64) -> Problem {
    let mut rng = Rng::new(seed);
    let spec = LibrarySpec::new(2, 1, 2, 1, true).unwrap();
    let x = Matrix::from_fn(5, 6, |_, _| rng.normal());
    let xdot = Matrix::from_fn(5, 6, |_, _| rng.normal());
    let mu = (0..5).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    let enc = init_mlp(&[6, 4, 2], &mut rng.fork(1)).unwrap();
    let dec = init_mlp(&[2, 4, 6], &mut rng.fork(2)).unwrap();
    let xi = Matrix::from_fn(spec.n_terms(), 2, |_, _| rng.uniform_range(0.2, 1.0) * rng.sign());
    Problem {
        x,
        xdot,
        mu,
        enc,
        dec,
        xi,
        spec,
        weights: LossWeights { lambda1: 0.7, lambda2: 0.05, lambda3: 0.4 },
    }
}

fn loss_of(p: &Problem) -> f64 {
    joint_loss_and_grads(&p.x, &p.xdot, &p.mu, &p.enc, &p.dec, &p.xi, &p.spec, p.weights)
        .unwrap()
        .0
        .total()
}

/// ‖g_fd − g‖ / ‖g‖ over one parameter block.
fn block_error(p: &mut Problem, analytic: &[f64], mut slot: impl FnMut(&mut Problem, usize) -> &mut f64) -> f64 {
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &g) in analytic.iter().enumerate() {
        let orig = *slot(p, i);
        *slot(p, i) = orig + h;
        let up = loss_of(p);
        *slot(p, i) = orig - h;
        let down = loss_of(p);
        *slot(p, i) = orig;
        let fd = (up - down) / (2.0 * h);
        num += (fd - g) * (fd - g);
        den += g * g;
    }
    (num / den).sqrt()
}

fn flat(p: &MlpParams) -> Vec<f64> {
    p.slices().concat()
}

fn mlp_slot(p: &mut MlpParams, mut i: usize) -> &mut f64 {
    for s in p.slices_mut() {
        if i < s.len() {
            return &mut s[i];
        }
        i -= s.len();
    }
    panic!("index out of range")
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        let mut p = toy_problem(seed);
        let (_, g) = joint_loss_and_grads(&p.x, &p.xdot, &p.mu, &p.enc, &p.dec, &p.xi, &p.spec, p.weights).unwrap();
        let e_enc = block_error(&mut p, &flat(&g.encoder), |p, i| mlp_slot(&mut p.enc, i));
        let e_dec = block_error(&mut p, &flat(&g.decoder), |p, i| mlp_slot(&mut p.dec, i));
        let e_xi = block_error(&mut p, g.xi.as_slice(), |p, i| &mut p.xi.as_mut_slice()[i]);
        assert!(e_enc < 1e-6, "encoder {e_enc}");
        assert!(e_dec < 1e-6, "decoder {e_dec}");
        assert!(e_xi < 1e-6, "xi {e_xi}");
    }
}

#[test]
fn gradients_with_single_terms_active() {
    for w in [
        LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0 },
        LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 1.0 },
        LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 },
    ] {
        let mut p = toy_problem(7);
        p.weights = w;
        let (_, g) = joint_loss_and_grads(&p.x, &p.xdot, &p.mu, &p.enc, &p.dec, &p.xi, &p.spec, p.weights).unwrap();
        let e_enc = block_error(&mut p, &flat(&g.encoder), |p, i| mlp_slot(&mut p.enc, i));
        assert!(e_enc < 1e-6, "{w:?}: {e_enc}");
    }
}

fn limit_cycle_data() -> TrainingData {
    // a circle in 2D embedded in 4 coordinates
    let n = 200;
    let mut x = Matrix::zeros(n, 4);
    let mut xdot = Matrix::zeros(n, 4);
    for i in 0..n {
        let t = i as f64 * 0.05;
        let (c, s) = (t.cos(), t.sin());
        x.row_mut(i).copy_from_slice(&[c, s, 0.5 * (c + s), 0.5 * (c - s)]);
        xdot.row_mut(i).copy_from_slice(&[-s, c, 0.5 * (c - s), -0.5 * (s + c)]);
    }
    TrainingData { x, xdot, mu: vec![0.0; n] }
}

#[test]
fn planar_training_converges_and_is_deterministic() {
    let data = limit_cycle_data();
    let spec = LibrarySpec::new(2, 0, 1, 0, false).unwrap();
    let w = LossWeights { lambda1: 1e-3, lambda2: 0.0, lambda3: 1e-4 };
    let cfg = TrainConfig { epochs: 300, learning_rate: 1e-3, batch_size: 32, seed: 5, shuffle: true };
    let a = train(&data, &[8], 2, &spec, w, &cfg).unwrap();
    let first = a.loss_history[0];
    let last = *a.loss_history.last().unwrap();
    assert!(last < 0.01 * first, "{first} -> {last}");
    let b = train(&data, &[8], 2, &spec, w, &cfg).unwrap();
    let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
}

#[test]
fn published_hyperparameters_are_accepted() {
    let data = limit_cycle_data();
    let spec = LibrarySpec::new(2, 1, 2, 2, true).unwrap();
    let w = LossWeights { lambda1: 1e-10, lambda2: 1e-6, lambda3: 0.0 };
    let cfg = TrainConfig { epochs: 2, learning_rate: 1e-5, batch_size: 64, seed: 0, shuffle: true };
    let t = train(&data, &[8, 4], 2, &spec, w, &cfg).unwrap();
    assert_eq!(t.encoder.dims(), &[4, 8, 4, 2]);
    assert_eq!(t.decoder.dims(), &[2, 4, 8, 4]);
}
