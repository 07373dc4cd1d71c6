//! Numerical checks that multiplicative weight perturbation acts as a
//! transformation of the data.
//!
//! All checks work in `f64` through `nalgebra`. Pure functions throughout.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{Perturbation, PerturbationMode, ReluNet};

pub const LAYER_EQUIVALENCE_TOL: f64 = 1e-12;
pub const MIN_ORDER: f64 = 1.9;
pub const LEMMA3_TOL: f64 = 1e-10;
/// Relative tolerance of `kl_of_affine` against the eigenvalue product.
pub const KL_SPECTRUM_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-12;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

fn square(op: &'static str, m: &Matrix) -> Result<usize> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op,
            detail: format!("expected a square matrix, got {:?}", m.shape()),
        });
    }
    Ok(m.rows())
}

fn i_plus(alpha: f64, a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::identity(a.nrows(), a.ncols()) + a * alpha
}

fn relu(v: DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// `max |relu(W(I+αA) z) − relu(W((I+αA) z))|`; exact up to rounding.
pub fn check_layer_equivalence(w: &Matrix, a: &Matrix, alpha: f64, z: &[f64]) -> Result<f64> {
    let n = square("check_layer_equivalence", a)?;
    if w.cols() != n || z.len() != n {
        return Err(Error::Shape {
            op: "check_layer_equivalence",
            detail: format!("W is {:?}, A is {n}x{n}, z has {} entries", w.shape(), z.len()),
        });
    }
    let (w, m, z) = (to_na(w), i_plus(alpha, &to_na(a)), DVector::from_column_slice(z));
    let perturbed_weights = relu(&(&w * &m) * &z);
    let transformed_input = relu(&w * (&m * &z));
    Ok((perturbed_weights - transformed_input).amax())
}

/// `ln |det(I + αA)|`: the KL divergence between a density and its image
/// under the affine map `x ↦ (I + αA) x`.
pub fn kl_of_affine(a: &Matrix, alpha: f64) -> Result<f64> {
    square("kl_of_affine", a)?;
    let m = i_plus(alpha, &to_na(a));
    let lu = m.lu();
    let det = lu.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular(format!("I + αA is singular at α = {alpha}")));
    }
    Ok(det.abs().ln())
}

/// Moore–Penrose pseudo-inverse via SVD; rejects rank-deficient input.
pub fn pseudo_inverse(w: &Matrix) -> Result<Matrix> {
    let svd = to_na(w).svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if max.is_nan() || max <= 0.0 || min <= RANK_TOL * max {
        return Err(Error::Singular(format!(
            "{}x{} weight matrix is rank deficient (σ_min/σ_max = {:e})",
            w.rows(),
            w.cols(),
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    let pinv = svd
        .pseudo_inverse(RANK_TOL * max)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(from_na(&pinv))
}

/// How a lower layer's perturbation is combined with the one pushed down
/// from above.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionRule {
    /// `Ā̄ = Ā + A + α A Ā`, so `I + αĀ̄ = (I + αA)(I + αĀ)`.
    #[default]
    Standard,
    /// Deliberately wrong (drops the pushed-down term); exists so the
    /// verifier's failure path can be exercised.
    IgnoreUpper,
}

fn compose_na(rule: CompositionRule, a_prev: &DMatrix<f64>, a_equiv: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    match rule {
        CompositionRule::Standard => a_equiv + a_prev + (a_prev * a_equiv) * alpha,
        CompositionRule::IgnoreUpper => a_prev.clone(),
    }
}

/// `Ā + A + α A Ā`.
pub fn compose(a_prev: &Matrix, a_equiv: &Matrix, alpha: f64) -> Result<Matrix> {
    let n = square("compose", a_prev)?;
    if a_equiv.shape() != (n, n) {
        return Err(Error::Shape {
            op: "compose",
            detail: format!("{:?} vs {:?}", a_prev.shape(), a_equiv.shape()),
        });
    }
    Ok(from_na(&compose_na(
        CompositionRule::Standard,
        &to_na(a_prev),
        &to_na(a_equiv),
        alpha,
    )))
}

fn check_square_net(net: &ReluNet, a: &Perturbation) -> Result<()> {
    if a.mode() != PerturbationMode::Multiplicative {
        return Err(Error::invalid("input-space equivalence needs a multiplicative perturbation"));
    }
    if a.layers().len() != net.depth() {
        return Err(Error::Shape {
            op: "equivalent_input_perturbation",
            detail: format!("{} perturbation layers for {} weight layers", a.layers().len(), net.depth()),
        });
    }
    let w = net.weights();
    for (l, wl) in w[..w.len() - 1].iter().enumerate() {
        if wl.rows() != wl.cols() {
            return Err(Error::Shape {
                op: "equivalent_input_perturbation",
                detail: format!("hidden layer {} is {:?}; square hidden layers are required", l + 1, wl.shape()),
            });
        }
    }
    for (l, (al, wl)) in a.layers().iter().zip(w).enumerate() {
        if al.shape() != (wl.cols(), wl.cols()) {
            return Err(Error::Shape {
                op: "equivalent_input_perturbation",
                detail: format!("A_{} is {:?}, expected {n}x{n}", l + 1, al.shape(), n = wl.cols()),
            });
        }
    }
    Ok(())
}

/// Pushes every layer's multiplicative perturbation down to one input-space
/// matrix: conjugate by `W^†` and compose, from the top layer to the first.
pub fn equivalent_input_perturbation(net: &ReluNet, a: &Perturbation, alpha: f64) -> Result<Matrix> {
    equivalent_input_perturbation_with(net, a, alpha, CompositionRule::Standard)
}

pub fn equivalent_input_perturbation_with(
    net: &ReluNet,
    a: &Perturbation,
    alpha: f64,
    rule: CompositionRule,
) -> Result<Matrix> {
    check_square_net(net, a)?;
    let w = net.weights();
    let layers = a.layers();
    let mut b = to_na(&layers[layers.len() - 1]);
    for l in (1..layers.len()).rev() {
        let below = &w[l - 1];
        let pinv = to_na(&pseudo_inverse(below)?);
        let pushed = &pinv * &b * to_na(below);
        b = compose_na(rule, &to_na(&layers[l - 1]), &pushed, alpha);
    }
    Ok(from_na(&b))
}

/// Forward pass returning the logits and whether every hidden
/// pre-activation was strictly positive.
fn forward_checked(weights: &[DMatrix<f64>], x: &DVector<f64>) -> (DVector<f64>, bool) {
    let mut z = x.clone();
    let mut positive = true;
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        z = w * z;
        if l < last {
            positive &= z.iter().all(|&s| s > 0.0);
            z = relu(z);
        }
    }
    (z, positive)
}

/// Geometric grid from `1e-2` down to `1e-5` in half-decade steps.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..7).map(|k| 10f64.powf(-2.0 - 0.5 * k as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub alphas: Vec<f64>,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Fitted slope of `ln residual` against `ln α`; `None` when every
    /// residual sits at the rounding floor (exact equivalence).
    pub order: Option<f64>,
    /// False when some hidden pre-activation was not strictly positive on
    /// either evaluation path; such samples say nothing about the theorem.
    pub accepted: bool,
    pub pass: bool,
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Compares the perturbed network on `x` against the clean network on
/// `(I + αĀ̄) x` across `alphas`.
pub fn check_input_space_equivalence(
    net: &ReluNet,
    a: &Perturbation,
    alphas: &[f64],
    x: &[f64],
) -> Result<EquivalenceReport> {
    check_input_space_equivalence_with(net, a, alphas, x, CompositionRule::Standard)
}

pub fn check_input_space_equivalence_with(
    net: &ReluNet,
    a: &Perturbation,
    alphas: &[f64],
    x: &[f64],
    rule: CompositionRule,
) -> Result<EquivalenceReport> {
    check_square_net(net, a)?;
    if alphas.len() < 2 || alphas.iter().any(|&al| !(al > 0.0 && al.is_finite())) {
        return Err(Error::invalid("need at least two positive α values"));
    }
    if x.len() != net.input_dim() {
        return Err(Error::Shape {
            op: "check_input_space_equivalence",
            detail: format!("x has {} entries, network expects {}", x.len(), net.input_dim()),
        });
    }
    let weights: Vec<DMatrix<f64>> = net.weights().iter().map(to_na).collect();
    let a_na: Vec<DMatrix<f64>> = a.layers().iter().map(to_na).collect();
    let x = DVector::from_column_slice(x);

    let mut accepted = true;
    let mut residuals = Vec::with_capacity(alphas.len());
    let mut scale: f64 = 1.0;
    for &alpha in alphas {
        let perturbed: Vec<DMatrix<f64>> = weights.iter().zip(&a_na).map(|(w, al)| w * i_plus(alpha, al)).collect();
        let (lhs, ok1) = forward_checked(&perturbed, &x);
        let b = to_na(&equivalent_input_perturbation_with(net, a, alpha, rule)?);
        let (rhs, ok2) = forward_checked(&weights, &(i_plus(alpha, &b) * &x));
        accepted &= ok1 && ok2;
        scale = scale.max(lhs.amax()).max(rhs.amax());
        residuals.push((lhs - rhs).amax());
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);

    // Residuals this close to rounding carry no slope information.
    let floor = 64.0 * f64::EPSILON * scale * net.depth() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = alphas
        .iter()
        .zip(&residuals)
        .filter(|(_, &r)| r > floor)
        .map(|(a, r)| (a.ln(), r.ln()))
        .unzip();
    let (order, converges) = match lx.len() {
        0 => (None, true),
        1 => (None, false),
        _ => {
            let s = fit_slope(&lx, &ly);
            (Some(s), s >= MIN_ORDER)
        }
    };
    Ok(EquivalenceReport {
        alphas: alphas.to_vec(),
        residuals,
        max_residual,
        order,
        accepted,
        pass: accepted && converges,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Report {
    pub composed_det: f64,
    pub product_det: f64,
    pub relative_residual: f64,
    /// `|det(I + αĀ̄)| ≥ min(|det(I + αA)|, |det(I + αĀ)|)` when both factors
    /// exceed one; `None` otherwise.
    pub monotone: Option<bool>,
    pub pass: bool,
}

/// `det(I + αĀ̄) = det(I + αA_prev) · det(I + αĀ)` for the composed `Ā̄`.
pub fn check_lemma3_determinant(a_prev: &Matrix, a_equiv: &Matrix, alpha: f64) -> Result<Lemma3Report> {
    check_lemma3_determinant_with(a_prev, a_equiv, alpha, CompositionRule::Standard)
}

pub fn check_lemma3_determinant_with(
    a_prev: &Matrix,
    a_equiv: &Matrix,
    alpha: f64,
    rule: CompositionRule,
) -> Result<Lemma3Report> {
    let n = square("check_lemma3_determinant", a_prev)?;
    if a_equiv.shape() != (n, n) {
        return Err(Error::Shape {
            op: "check_lemma3_determinant",
            detail: format!("{:?} vs {:?}", a_prev.shape(), a_equiv.shape()),
        });
    }
    let (p, e) = (to_na(a_prev), to_na(a_equiv));
    let composed = compose_na(rule, &p, &e, alpha);
    let composed_det = i_plus(alpha, &composed).determinant();
    let (dp, de) = (i_plus(alpha, &p).determinant(), i_plus(alpha, &e).determinant());
    let product_det = dp * de;
    let relative_residual = (composed_det - product_det).abs() / product_det.abs().max(f64::MIN_POSITIVE);
    let monotone = (dp > 1.0 && de > 1.0).then(|| composed_det.abs() >= dp.min(de));
    Ok(Lemma3Report {
        composed_det,
        product_det,
        relative_residual,
        monotone,
        pass: relative_residual <= LEMMA3_TOL && monotone != Some(false),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub trials: usize,
    pub accepted: usize,
    pub max_residual: f64,
    pub min_order: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationSummary {
    pub seed: u64,
    pub trials: usize,
    pub checks: Vec<CheckSummary>,
    pub pass: bool,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let d = Uniform::new(lo, hi).expect("finite range");
    Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

/// A random `n×n` matrix with spectrum `λ` drawn from `[0.1, 2]`, built as
/// `T diag(λ) T⁻¹`; returns the matrix and its eigenvalues.
pub fn random_positive_spectrum(rng: &mut ChaCha8Rng, n: usize) -> (Matrix, Vec<f64>) {
    let lambdas: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    loop {
        let t = DMatrix::identity(n, n) + to_na(&gaussian(rng, n, n, 0.3));
        if let Some(t_inv) = t.clone().try_inverse() {
            let a = &t * DMatrix::from_diagonal(&DVector::from_column_slice(&lambdas)) * t_inv;
            return (from_na(&a), lambdas);
        }
    }
}

/// A square-width network suited to the input-space check: positive entries
/// keep every hidden pre-activation positive for positive inputs. With
/// `signed`, entries may be negative and the sample may be rejected.
pub fn random_certification_net(rng: &mut ChaCha8Rng, width: usize, depth: usize, classes: usize, signed: bool) -> ReluNet {
    let lo = if signed { -1.0 } else { 0.05 };
    let mut weights: Vec<Matrix> = (0..depth - 1).map(|_| uniform(rng, width, width, lo, 1.0)).collect();
    weights.push(uniform(rng, classes, width, -1.0, 1.0));
    ReluNet::new(weights).expect("consistent widths")
}

/// Runs all four certification checks for `trials` random instances each.
pub fn certify(trials: usize, seed: u64, rule: CompositionRule) -> Result<CertificationSummary> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let stream = |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };

    let mut rng = stream(1);
    let mut layer_max: f64 = 0.0;
    for _ in 0..trials {
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let w = gaussian(&mut rng, m, n, 1.0);
        let a = gaussian(&mut rng, n, n, 1.0);
        let z: Vec<f64> = gaussian(&mut rng, 1, n, 1.0).into_data();
        let alpha = rng.random_range(0.0..1.0);
        layer_max = layer_max.max(check_layer_equivalence(&w, &a, alpha, &z)?);
    }
    let layer = CheckSummary {
        name: "layer_equivalence".into(),
        trials,
        accepted: trials,
        max_residual: layer_max,
        min_order: None,
        pass: layer_max <= LAYER_EQUIVALENCE_TOL,
    };

    let mut rng = stream(2);
    let mut kl_max: f64 = 0.0;
    let mut kl_positive = true;
    for _ in 0..trials {
        let n = rng.random_range(1..=5);
        let (a, lambdas) = random_positive_spectrum(&mut rng, n);
        let alpha = rng.random_range(0.05..1.0);
        let kl = kl_of_affine(&a, alpha)?;
        let expect: f64 = lambdas.iter().map(|l| (1.0 + alpha * l).ln()).sum();
        kl_positive &= kl > 0.0;
        kl_max = kl_max.max((kl - expect).abs() / expect.abs());
    }
    let kl = CheckSummary {
        name: "kl_of_affine".into(),
        trials,
        accepted: trials,
        max_residual: kl_max,
        min_order: None,
        pass: kl_positive && kl_max <= KL_SPECTRUM_TOL,
    };

    let mut rng = stream(3);
    let grid = default_alpha_grid();
    let (mut accepted, mut eq_max, mut min_order, mut eq_pass) = (0, 0.0f64, None::<f64>, true);
    for t in 0..trials {
        let width = rng.random_range(2..=5);
        let depth = rng.random_range(1..=4);
        let classes = rng.random_range(2..=4);
        let net = random_certification_net(&mut rng, width, depth, classes, t % 4 == 3);
        let a = Perturbation::multiplicative(
            net.weights()
                .iter()
                .map(|w| gaussian(&mut rng, w.cols(), w.cols(), 1.0))
                .collect(),
        )?;
        let x: Vec<f64> = uniform(&mut rng, 1, width, 0.5, 1.5).into_data();
        let report = match check_input_space_equivalence_with(&net, &a, &grid, &x, rule) {
            Ok(r) => r,
            Err(Error::Singular(_)) => continue,
            Err(e) => return Err(e),
        };
        if !report.accepted {
            continue;
        }
        accepted += 1;
        eq_max = eq_max.max(report.max_residual);
        if let Some(o) = report.order {
            min_order = Some(min_order.map_or(o, |m: f64| m.min(o)));
        }
        eq_pass &= report.pass;
    }
    let input_space = CheckSummary {
        name: "input_space_equivalence".into(),
        trials,
        accepted,
        max_residual: eq_max,
        min_order,
        pass: accepted > 0 && eq_pass,
    };

    let mut rng = stream(4);
    let (mut det_max, mut det_pass) = (0.0f64, true);
    for t in 0..trials {
        let n = rng.random_range(1..=6);
        let alpha = rng.random_range(0.01..0.5);
        let (p, e) = if t % 2 == 0 {
            (gaussian(&mut rng, n, n, 0.5), gaussian(&mut rng, n, n, 0.5))
        } else {
            let spd = |rng: &mut ChaCha8Rng| {
                let g = to_na(&gaussian(rng, n, n, 1.0));
                from_na(&(&g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1))
            };
            (spd(&mut rng), spd(&mut rng))
        };
        let r = check_lemma3_determinant_with(&p, &e, alpha, rule)?;
        det_max = det_max.max(r.relative_residual);
        det_pass &= r.pass;
    }
    let lemma3 = CheckSummary {
        name: "lemma3_determinant".into(),
        trials,
        accepted: trials,
        max_residual: det_max,
        min_order: None,
        pass: det_pass,
    };

    let checks = vec![layer, kl, input_space, lemma3];
    let pass = checks.iter().all(|c| c.pass);
    Ok(CertificationSummary {
        seed,
        trials,
        checks,
        pass,
    })
}
