use nalgebra::{DMatrix, DVector};
use std::time::Instant;

use mmfn::model::{derive, DerivedModel, MmfnModel};
use mmfn::simulator::{default_burn_in, estimate_tails, simulate};

fn tandem2() -> DerivedModel {
    let m = MmfnModel::new(
        DMatrix::from_row_slice(2, 2, &[2.0, 0.2, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[1.5, 1.6, 1.9, 1.15]),
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[-0.7, 0.7, 1.1, -1.1]),
    )
    .unwrap();
    derive(m).unwrap()
}

#[test]
fn throughput() {
    let dm = tandem2();
    let t0 = Instant::now();
    let traj = simulate(&dm, 5.0e4, 7).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "simulate: horizon 5e4 -> {} segments in {:.3}s ({:.0} ev/s)",
        traj.segments.len(),
        dt,
        traj.segments.len() as f64 / dt
    );

    let burn = default_burn_in(&dm).unwrap().min(12_500.0);
    let dirs = vec![
        (DVector::from_vec(vec![1.0, 0.0]), (1..=8).map(|j| 0.3 * j as f64).collect::<Vec<_>>()),
        (DVector::from_vec(vec![0.0, 1.0]), (1..=8).map(|j| 0.3 * j as f64).collect::<Vec<_>>()),
        (
            DVector::from_vec(vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2]),
            (1..=8).map(|j| 0.3 * j as f64).collect::<Vec<_>>(),
        ),
    ];
    let t0 = Instant::now();
    let est = estimate_tails(&dm, &dirs, 20, 5.0e4, burn, 11).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "estimate_tails: 20 reps x 5e4, 3 dirs -> {:.3}s; rate e1 = {:?} +/- {:?}",
        dt,
        est[0].rate,
        est[0].rate_stderr
    );
}
