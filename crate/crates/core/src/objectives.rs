//! Scalar training losses and the gradient-norm regret estimate.
//!
//! Every loss is a batch mean. Each has a plain-value form, used for
//! evaluation and as a cross-check, and a `*_on` form that records it on a
//! [`Tape`] so the trainers can differentiate through it.
//!
//! The outlier-exposure loss is the cross-entropy from the uniform
//! distribution, `ℓ_OE(z) = logsumexp(z) − mean_k z_k`, which is the KL
//! divergence to uniform plus `log C` and is minimized exactly at uniform
//! softmax output.
//!
//! `WOR_G` is the square of `g = ∂/∂σ L_OE(σ·h)` at `σ = 1`. Its closed form,
//! `g = mean_i [ Σ_j softmax_j(z_i) z_ij − mean_k z_ik ]`, is itself an
//! ordinary differentiable function of the logits, so `∇_P WOR_G = 2g ∇_P g`
//! needs only a single first-order reverse pass.

use crate::autodiff::{log_softmax_rows, log_sum_exp, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{forward_on_tape, Perturbation, PerturbationStrength, ReluNet};

/// In-distribution samples with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

/// Surrogate or test OOD samples.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    inputs: Matrix,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} input rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::InvalidLabel {
                row,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn one_hot(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.num_classes, |r, c| {
            if self.labels[r] == c {
                1.0
            } else {
                0.0
            }
        })
    }
}

impl UnlabeledBatch {
    pub fn new(inputs: Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::invalid("unlabeled batch must be nonempty"));
        }
        Ok(Self { inputs })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
        }
    }
}

fn check_classes(logits: &Matrix) -> Result<()> {
    if logits.cols() < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", logits.cols())));
    }
    if logits.rows() == 0 {
        return Err(Error::invalid("empty logit batch"));
    }
    Ok(())
}

/// Mean cross-entropy `−log softmax_y(z)`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::invalid(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    check_classes(logits)?;
    let mut total = 0.0;
    for (row, (z, &y)) in logits.row_iter().zip(labels).enumerate() {
        if y >= z.len() {
            return Err(Error::InvalidLabel {
                row,
                label: y,
                classes: z.len(),
            });
        }
        total += log_sum_exp(z) - z[y];
    }
    Ok(total / labels.len() as f64)
}

/// Per-sample outlier-exposure loss `logsumexp(z) − mean_k z_k`.
pub fn oe_loss_per_sample(logits: &Matrix) -> Result<Vec<f64>> {
    check_classes(logits)?;
    let c = logits.cols() as f64;
    Ok(logits
        .row_iter()
        .map(|z| log_sum_exp(z) - z.iter().sum::<f64>() / c)
        .collect())
}

pub fn oe_loss(logits: &Matrix) -> Result<f64> {
    let per = oe_loss_per_sample(logits)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `∂/∂σ oe_loss(σ z)` at `σ = 1`.
pub fn sigma_derivative(logits: &Matrix) -> f64 {
    let c = logits.cols() as f64;
    let ls = log_softmax_rows(logits);
    let total: f64 = logits
        .row_iter()
        .zip(ls.row_iter())
        .map(|(z, l)| {
            let weighted: f64 = z.iter().zip(l).map(|(zj, lj)| lj.exp() * zj).sum();
            weighted - z.iter().sum::<f64>() / c
        })
        .sum();
    total / logits.rows().max(1) as f64
}

/// Records the mean cross-entropy of `logits` against `batch`'s labels.
pub fn ce_loss_on(tape: &mut Tape, logits: Var, batch: &LabeledBatch) -> Result<Var> {
    let (rows, cols) = tape.value(logits).shape();
    if rows != batch.len() || cols != batch.num_classes() {
        return Err(Error::Shape {
            op: "ce_loss",
            detail: format!("logits {rows}x{cols} for {} labels over {} classes", batch.len(), batch.num_classes()),
        });
    }
    let y = tape.leaf(batch.one_hot());
    let ls = tape.log_softmax(logits);
    let picked = tape.mul(y, ls)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / rows as f64))
}

/// Per-sample OE loss as a `b × 1` column.
pub fn oe_per_sample_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_classes(tape.value(logits))?;
    let c = tape.value(logits).cols() as f64;
    let ls = tape.log_softmax(logits);
    let rs = tape.row_sum(ls);
    Ok(tape.scale(rs, -1.0 / c))
}

pub fn oe_loss_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    let per = oe_per_sample_on(tape, logits)?;
    Ok(tape.mean(per))
}

/// Records the closed-form σ-derivative `g` of the OE loss.
pub fn sigma_derivative_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    check_classes(tape.value(logits))?;
    let c = tape.value(logits).cols() as f64;
    let ls = tape.log_softmax(logits);
    let p = tape.exp(ls);
    let pz = tape.mul(p, logits)?;
    let weighted = tape.row_sum(pz);
    let zsum = tape.row_sum(logits);
    let zmean = tape.scale(zsum, 1.0 / c);
    let per = tape.sub(weighted, zmean)?;
    Ok(tape.mean(per))
}

/// `WOR_G = g²` for the perturbed network `W + αP`.
pub fn wor_g(net: &ReluNet, p: &Perturbation, alpha: PerturbationStrength, batch: &UnlabeledBatch) -> Result<f64> {
    let logits = net.forward_additive(p, alpha, 1.0, batch.inputs())?;
    let g = sigma_derivative(&logits);
    Ok(g * g)
}

/// A perturbation-shaped gradient together with the objective value at the
/// point it was taken.
#[derive(Clone, Debug)]
pub struct PerturbationGradient {
    pub value: f64,
    pub grad: Perturbation,
}

/// Places `W` as constants and `P` as leaves, returning the perturbation
/// vars and the logits of `W + αP` on `x`.
fn perturbed_logits_on(
    tape: &mut Tape,
    net: &ReluNet,
    p: &Perturbation,
    alpha: PerturbationStrength,
    x: &Matrix,
) -> Result<(Vec<Var>, Var)> {
    if p.layers().len() != net.depth() || p.mode() != crate::PerturbationMode::Additive {
        return Err(Error::invalid("additive perturbation with one matrix per layer required"));
    }
    let mut p_vars = Vec::with_capacity(net.depth());
    let mut w_eff = Vec::with_capacity(net.depth());
    for (w, pl) in net.weights().iter().zip(p.layers()) {
        let wv = tape.leaf(w.clone());
        let pv = tape.leaf(pl.clone());
        let scaled = tape.scale(pv, alpha.get());
        w_eff.push(tape.add(wv, scaled)?);
        p_vars.push(pv);
    }
    let xv = tape.leaf(x.clone());
    let logits = forward_on_tape(tape, &w_eff, xv)?;
    Ok((p_vars, logits))
}

/// `∇_P WOR_G(h_{W+αP})`, computed as `2g · ∇_P g`.
pub fn wor_g_grad_wrt_p(
    net: &ReluNet,
    p: &Perturbation,
    alpha: PerturbationStrength,
    batch: &UnlabeledBatch,
) -> Result<PerturbationGradient> {
    wor_g_grad_wrt_p_at(net, p, alpha, 1.0, batch)
}

/// As [`wor_g_grad_wrt_p`] with the σ-derivative taken at `σ = sigma`
/// instead of 1: `g(σ) = (1/σ) · g₁(σ z)` where `g₁` is the closed form at 1.
pub fn wor_g_grad_wrt_p_at(
    net: &ReluNet,
    p: &Perturbation,
    alpha: PerturbationStrength,
    sigma: f64,
    batch: &UnlabeledBatch,
) -> Result<PerturbationGradient> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("σ must be positive and finite, got {sigma}")));
    }
    let mut tape = Tape::new();
    let (p_vars, logits) = perturbed_logits_on(&mut tape, net, p, alpha, batch.inputs())?;
    let g_node = if sigma == 1.0 {
        sigma_derivative_on(&mut tape, logits)?
    } else {
        let scaled = tape.scale(logits, sigma);
        let g1 = sigma_derivative_on(&mut tape, scaled)?;
        tape.scale(g1, 1.0 / sigma)
    };
    // The plain closed form, so `value` agrees bitwise with `wor_g`.
    let g = sigma_derivative(&tape.value(logits).scale(sigma)) / sigma;
    let grads = tape.backward(g_node, &p_vars)?.collect(&p_vars);
    Ok(PerturbationGradient {
        value: g * g,
        grad: Perturbation::additive(grads.into_iter().map(|m| m.scale(2.0 * g)).collect()),
    })
}

/// `∇_P L_OE(h_{W+αP})`, the inner step of the risk-based variant.
pub fn oe_risk_grad_wrt_p(
    net: &ReluNet,
    p: &Perturbation,
    alpha: PerturbationStrength,
    batch: &UnlabeledBatch,
) -> Result<PerturbationGradient> {
    let mut tape = Tape::new();
    let (p_vars, logits) = perturbed_logits_on(&mut tape, net, p, alpha, batch.inputs())?;
    let loss = oe_loss_on(&mut tape, logits)?;
    let value = tape.scalar(loss).expect("scalar");
    let grads = tape.backward(loss, &p_vars)?.collect(&p_vars);
    Ok(PerturbationGradient {
        value,
        grad: Perturbation::additive(grads),
    })
}

/// `L_CE(h_W; B_ID) + λ L_OE(h_{W+αP}; B_OOD)` as a plain value.
pub fn doe_objective(
    net: &ReluNet,
    p_ma: &Perturbation,
    alpha: PerturbationStrength,
    lambda: f64,
    id: &LabeledBatch,
    ood: &UnlabeledBatch,
) -> Result<f64> {
    let ce = ce_loss(&net.forward(id.inputs())?, id.labels())?;
    let oe = oe_loss(&net.forward_additive(p_ma, alpha, 1.0, ood.inputs())?)?;
    Ok(ce + lambda * oe)
}
