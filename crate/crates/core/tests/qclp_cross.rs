use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use synthpi_core::constraint_sets::{Equality, Polyhedron};
use synthpi_core::qclp::{QclpSolver, Sense, SolveStatus};

fn random_instance(rng: &mut ChaCha8Rng, d: usize, t: usize) -> (DMatrix<f64>, Polyhedron, Vec<f64>, Vec<f64>) {
    let z = DMatrix::from_fn(t, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = z.transpose() * &z / t as f64;
    let support = rng.random_range(1..=d);
    let mut w: Vec<f64> = (0..d).map(|j| if j < support { rng.random::<f64>() + 0.1 } else { 0.0 }).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let scale = (t as f64).sqrt();
    let region = Polyhedron {
        lower: w.iter().map(|v| -scale * v).collect(),
        upper: vec![f64::INFINITY; d],
        equality: Some(Equality { coeffs: vec![1.0 / scale; d], rhs: 0.0 }),
    };
    let xi = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let c = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) / scale).collect();
    (q, region, xi, c)
}

#[test]
fn active_set_agrees_with_bisection() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..300 {
        let d = rng.random_range(2..=8);
        let (q, region, xi, c) = random_instance(&mut rng, d, 50);
        let solver = QclpSolver::new(&q, &region, None).unwrap();
        for sense in [Sense::Sup, Sense::Inf] {
            let a = solver.solve(&c, &xi, sense, 1e-9);
            let b = solver.solve_bisection(&c, &xi, sense, 1e-11);
            assert_eq!(a.status, SolveStatus::Optimal, "case {} d {} {:?} {:?} b {:?}", case, d, sense, a, b);
            assert!(a.kkt_residual < 1e-7, "case {} kkt {}", case, a.kkt_residual);
            assert!((a.value - b.value).abs() < 1e-6 * (1.0 + b.value.abs()), "case {} {:?}: {} vs {} ({:?} kkt {} / {:?} kkt {} mu {})", case, sense, a.value, b.value, a.status, a.kkt_residual, b.status, b.kkt_residual, b.multiplier);
        }
    }
}

#[test]
fn solve_speed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (q, region, _, c) = random_instance(&mut rng, 10, 100);
    let solver = QclpSolver::new(&q, &region, None).unwrap();
    let xis: Vec<Vec<f64>> = (0..20000).map(|_| (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let start = std::time::Instant::now();
    let mut acc = 0.0;
    for xi in &xis {
        let (lo, hi) = solver.bounds(&c, xi, 1e-9);
        acc += hi.value - lo.value;
    }
    let per = start.elapsed().as_secs_f64() / xis.len() as f64;
    eprintln!("bounds per xi: {:.2} us (acc {})", per * 1e6, acc);
}

#[test]
fn center_speed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (q, region, _, _) = random_instance(&mut rng, 10, 100);
    let solver = QclpSolver::new(&q, &region, None).unwrap();
    let xis: Vec<Vec<f64>> = (0..20000).map(|_| (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let start = std::time::Instant::now();
    let mut n = 0;
    for xi in &xis {
        n += solver.center(xi).is_exact() as usize;
    }
    let per = start.elapsed().as_secs_f64() / xis.len() as f64;
    eprintln!("center per xi: {:.2} us ({} exact)", per * 1e6, n);
}
