use proptest::prelude::*;
use sparsebif::datagen::{generate_dataset, linspace, FieldLayout, FomSystem, LiftMap};
use sparsebif::numkit::{Matrix, Rng, TimeGrid};
use sparsebif::pod::{apply_scaler, fit_scaler, invert_scaler, nested_pod, pod, project, reconstruct, truncation_rank, TruncationRule};

fn low_rank(n_h: usize, n_s: usize, rank: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let a = Matrix::from_fn(n_h, rank, |_, _| rng.normal());
    let b = Matrix::from_fn(rank, n_s, |_, _| rng.normal());
    a.matmul(&b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn truncation_rank_is_monotone_in_tolerance(
        mut s in prop::collection::vec(0.0f64..10.0, 1..30),
        d1 in 0.0f64..1.0,
        d2 in 0.0f64..1.0,
    ) {
        s.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(s[0] > 0.0);
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let n_lo = truncation_rank(&s, lo).unwrap();
        let n_hi = truncation_rank(&s, hi).unwrap();
        prop_assert!(n_hi <= n_lo);
        prop_assert!(n_lo >= 1 && n_lo <= s.len());
        // the chosen rank captures the requested energy
        let total: f64 = s.iter().map(|v| v * v).sum();
        let kept: f64 = s[..n_lo].iter().map(|v| v * v).sum();
        prop_assert!(kept / total >= 1.0 - lo - 1e-12);
    }

    #[test]
    fn pod_recovers_a_low_rank_snapshot_set(rank in 1usize..5, seed in any::<u64>()) {
        let x = low_rank(30, 12, rank, seed);
        let basis = pod(&x, TruncationRule::EnergyTol(1e-12)).unwrap();
        prop_assert_eq!(basis.rank(), rank);
        let rows = x.transpose();
        let back = reconstruct(&basis, &project(&basis, &rows).unwrap()).unwrap();
        prop_assert!(back.sub(&rows).unwrap().max_abs() <= 1e-10 * rows.max_abs());
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), r in 1usize..6) {
        let x = low_rank(25, 15, 8, seed);
        let basis = pod(&x, TruncationRule::FixedRank(r)).unwrap();
        let rows = Matrix::from_fn(4, 25, |i, j| ((i * 25 + j) as f64).sin());
        let once = reconstruct(&basis, &project(&basis, &rows).unwrap()).unwrap();
        let twice = reconstruct(&basis, &project(&basis, &once).unwrap()).unwrap();
        prop_assert!(twice.sub(&once).unwrap().max_abs() <= 1e-12);
        let g = basis.modes().t_matmul(basis.modes()).unwrap();
        prop_assert!(g.sub(&Matrix::identity(basis.rank())).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn scaler_round_trips(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let data = Matrix::from_fn(20, 5, |_, j| 3.0 * j as f64 + rng.normal());
        let s = fit_scaler(&data).unwrap();
        let scaled = apply_scaler(&s, &data).unwrap();
        for j in 0..5 {
            let col = scaled.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            prop_assert!(mean.abs() < 1e-12);
        }
        let back = invert_scaler(&s, &scaled).unwrap();
        prop_assert!(back.sub(&data).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn nested_pod_spans_every_parameter() {
    let sys = FomSystem::pitchfork(0.9);
    let layout = FieldLayout::flow(40).unwrap();
    let map = LiftMap::random(&layout, sys.dim(), 0.5, &mut Rng::new(2)).unwrap();
    let grid = TimeGrid::spanning(0.0, 40.0, 0.1).unwrap();
    let set = generate_dataset(&sys, &linspace(0.6, 1.0, 5), grid, &map, &layout, &Rng::new(9), None).unwrap();
    let basis = nested_pod(&set, TruncationRule::EnergyTol(1e-8), TruncationRule::EnergyTol(1e-8)).unwrap();
    assert_eq!(basis.local_ranks().len(), 5);
    assert!(basis.rank() <= basis.local_ranks().iter().sum::<usize>());
    for traj in set.trajectories() {
        let back = reconstruct(&basis, &project(&basis, traj).unwrap()).unwrap();
        let rel = back.sub(traj).unwrap().frobenius_norm() / traj.frobenius_norm();
        assert!(rel < 1e-3, "relative projection error {rel}");
    }
}

#[test]
fn fixed_rank_is_capped_by_the_spectrum() {
    let x = low_rank(10, 3, 3, 4);
    let basis = pod(&x, TruncationRule::FixedRank(50)).unwrap();
    assert_eq!(basis.rank(), 3);
}
