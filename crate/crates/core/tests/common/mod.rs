//! Generators and finite-difference helpers shared by the integration tests.
#![allow(dead_code)]

use doe_core::objectives::{LabeledBatch, UnlabeledBatch};
use doe_core::trainers::StepBatch;
use doe_core::{Matrix, ReluNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

pub mod gradcheck;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random widths `d, h.., c` with 1-3 layers and a Gaussian net on them.
pub fn random_net(rng: &mut ChaCha8Rng) -> ReluNet {
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(2..=4)];
    for _ in 1..depth {
        widths.push(rng.random_range(2..=6));
    }
    widths.push(rng.random_range(2..=4));
    net_with_widths(rng, &widths)
}

pub fn net_with_widths(rng: &mut ChaCha8Rng, widths: &[usize]) -> ReluNet {
    let weights = widths
        .windows(2)
        .map(|w| gaussian(rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()))
        .collect();
    ReluNet::new(weights).unwrap()
}

pub fn random_labeled(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> LabeledBatch {
    let x = gaussian(rng, n, d, 1.0);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledBatch::new(x, y, classes).unwrap()
}

pub fn random_unlabeled(rng: &mut ChaCha8Rng, n: usize, d: usize) -> UnlabeledBatch {
    UnlabeledBatch::new(gaussian(rng, n, d, 1.0)).unwrap()
}

pub fn random_step_batch(rng: &mut ChaCha8Rng, net: &ReluNet) -> StepBatch {
    let (d, c) = (net.input_dim(), net.num_classes());
    let n_id = rng.random_range(3..=6);
    let n_ood = rng.random_range(3..=6);
    StepBatch {
        id: random_labeled(rng, n_id, d, c),
        ood: random_unlabeled(rng, n_ood, d),
    }
}

/// Central differences of `f` in every entry of every matrix in `point`.
pub fn numeric_grad(point: &[Matrix], f: impl Fn(&[Matrix]) -> f64) -> Vec<Matrix> {
    let mut work = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for l in 0..point.len() {
        let mut g = Matrix::zeros(point[l].rows(), point[l].cols());
        for i in 0..point[l].len() {
            let orig = work[l].data()[i];
            work[l].data_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work[l].data_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work[l].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over all matrices taken together.
pub fn rel_err(a: &[Matrix], b: &[Matrix], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (u, v) in x.data().iter().zip(y.data()) {
            diff += (u - v).powi(2);
            na += u * u;
            nb += v * v;
        }
    }
    diff.sqrt() / f64::max(na, nb).sqrt().max(floor)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Smallest `|pre-activation|` over every hidden unit and every row of `x`.
/// Central differences straddling a ReLU kink are meaningless, so the
/// gradient checks redraw any instance that comes too close to one.
pub fn preact_margin(weights: &[Matrix], x: &Matrix) -> f64 {
    let mut z = x.clone();
    let mut margin = f64::INFINITY;
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        z = z.matmul_t(w).unwrap();
        if l < last {
            margin = z.data().iter().fold(margin, |m, v| m.min(v.abs()));
            z = z.map(|v| v.max(0.0));
        }
    }
    margin
}

pub const KINK_MARGIN: f64 = 1e-3;
pub const GRAD_FLOOR: f64 = 1e-6;

/// Monte Carlo estimate of `E_z[ln f(z) − ln f'(Mz)]` for `z ~ N(0, I)`,
/// where `f'` is the density of `MZ`, evaluated as `N(0, MMᵀ)` through a
/// Cholesky factor.
pub fn kl_monte_carlo(a: &Matrix, alpha: f64, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n = a.rows();
    let m = DMatrix::identity(n, n) + DMatrix::from_row_slice(n, n, a.data()) * alpha;
    let cov = &m * m.transpose();
    let chol = cov.cholesky().expect("MMᵀ is positive definite");
    let log_det_cov: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for _ in 0..samples {
        let z = DVector::from_vec(gaussian(rng, n, 1, 1.0).into_data());
        let log_f = -0.5 * (z.dot(&z) + n as f64 * ln2pi);
        let y = &m * &z;
        let w = chol.l().solve_lower_triangular(&y).expect("nonsingular factor");
        let log_g = -0.5 * (w.dot(&w) + n as f64 * ln2pi + log_det_cov);
        total += log_f - log_g;
    }
    total / samples as f64
}
