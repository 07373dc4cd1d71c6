use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{forward_on_tape, Perturbation, PerturbationStrength, ReluNet};
use crate::objectives::{
    ce_loss_on, oe_loss_on, oe_loss_per_sample, oe_per_sample_on, oe_risk_grad_wrt_p, wor_g_grad_wrt_p_at,
    UnlabeledBatch,
};

use super::strategy::{OodTerm, Prepared, Strategy};
use super::{train_step, StepBatch, StepRecord, TrainState, TrainerConfig};

/// Loss value, its two parts, and the gradient for every weight layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub total: f64,
    pub ce: f64,
    /// The OOD term before weighting by λ; zero when absent.
    pub ood: f64,
    pub grads: Vec<Matrix>,
}

/// `L_CE(h_W; B_ID) + λ · term(h_W; B_OOD)` and its gradient in `W`. With
/// `λ = 0` the OOD term is not built at all.
pub fn loss_and_grad(net: &ReluNet, batch: &StepBatch, term: &OodTerm, lambda: f64) -> Result<LossEval> {
    let mut tape = Tape::new();
    let w: Vec<Var> = net.weights().iter().map(|m| tape.leaf(m.clone())).collect();
    let x_id = tape.leaf(batch.id.inputs().clone());
    let logits = forward_on_tape(&mut tape, &w, x_id)?;
    let ce = ce_loss_on(&mut tape, logits, &batch.id)?;
    let ood = if lambda == 0.0 || *term == OodTerm::None {
        None
    } else {
        Some(ood_term_on(&mut tape, &w, &batch.ood, term)?)
    };
    let total = match ood {
        Some(o) => {
            let weighted = tape.scale(o, lambda);
            tape.add(ce, weighted)?
        }
        None => ce,
    };
    let grads = tape.backward(total, &w)?.collect(&w);
    let value = |v: Var| tape.scalar(v).expect("scalar loss");
    Ok(LossEval {
        total: value(total),
        ce: value(ce),
        ood: ood.map_or(0.0, value),
        grads,
    })
}

fn ood_term_on(tape: &mut Tape, w: &[Var], ood: &UnlabeledBatch, term: &OodTerm) -> Result<Var> {
    match term {
        OodTerm::None => Err(Error::invalid("no OOD term to build")),
        OodTerm::Oe(None) => {
            let x = tape.leaf(ood.inputs().clone());
            let logits = forward_on_tape(tape, w, x)?;
            oe_loss_on(tape, logits)
        }
        OodTerm::Oe(Some((p, alpha))) => {
            if p.layers().len() != w.len() {
                return Err(Error::invalid("perturbation depth differs from the network's"));
            }
            let mut w_eff = Vec::with_capacity(w.len());
            for (&wl, pl) in w.iter().zip(p.layers()) {
                let pv = tape.leaf(pl.clone());
                let scaled = tape.scale(pv, alpha.get());
                w_eff.push(tape.add(wl, scaled)?);
            }
            let x = tape.leaf(ood.inputs().clone());
            let logits = forward_on_tape(tape, &w_eff, x)?;
            oe_loss_on(tape, logits)
        }
        OodTerm::Chi2 { eta } => {
            let x = tape.leaf(ood.inputs().clone());
            let logits = forward_on_tape(tape, w, x)?;
            let per = oe_per_sample_on(tape, logits)?;
            let excess = tape.shift(per, -eta);
            let hinge = tape.relu(excess);
            let sq = tape.square(hinge);
            Ok(tape.mean(sq))
        }
        OodTerm::Wdro { gamma } => {
            let x = tape.leaf(ood.inputs().clone());
            let (logits, pre) = forward_with_preacts(tape, w, x)?;
            let oe = oe_loss_on(tape, logits)?;
            let penalty = input_grad_norm_on(tape, w, logits, &pre)?;
            let weighted = tape.scale(penalty, *gamma);
            tape.add(oe, weighted)
        }
        OodTerm::Adversarial { delta } => {
            let x = tape.leaf(ood.inputs().add(delta)?);
            let logits = forward_on_tape(tape, w, x)?;
            oe_loss_on(tape, logits)
        }
    }
}

/// Forward pass that also returns each hidden layer's pre-activation node.
fn forward_with_preacts(tape: &mut Tape, w: &[Var], x: Var) -> Result<(Var, Vec<Var>)> {
    let last = w.len() - 1;
    let mut pre = Vec::with_capacity(last);
    let mut z = x;
    for (l, &wl) in w.iter().enumerate() {
        z = tape.matmul_t(z, wl)?;
        if l < last {
            pre.push(z);
            z = tape.relu(z);
        }
    }
    Ok((z, pre))
}

/// `mean_i ‖∇_x ℓ_OE(h(x_i))‖₂`, recorded as an explicit backward pass so
/// that it can itself be differentiated in `W`. ReLU masks are constants
/// (their derivative vanishes almost everywhere).
fn input_grad_norm_on(tape: &mut Tape, w: &[Var], logits: Var, pre: &[Var]) -> Result<Var> {
    let c = tape.value(logits).cols() as f64;
    let ls = tape.log_softmax(logits);
    let probs = tape.exp(ls);
    // ∂ℓ_OE/∂z = softmax(z) − 1/C, one row per sample.
    let mut d = tape.shift(probs, -1.0 / c);
    for l in (1..w.len()).rev() {
        d = tape.matmul(d, w[l])?;
        let mask = tape.value(pre[l - 1]).map(|s| if s > 0.0 { 1.0 } else { 0.0 });
        let mask = tape.leaf(mask);
        d = tape.mul(d, mask)?;
    }
    let gx = tape.matmul(d, w[0])?;
    let sq = tape.square(gx);
    let rows = tape.row_sum(sq);
    let norms = tape.sqrt(rows)?;
    Ok(tape.mean(norms))
}

/// The WDRO gradient penalty `mean_i ‖∇_x ℓ_OE(h(x_i))‖₂` as a value.
pub fn wdro_penalty(net: &ReluNet, x: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let w: Vec<Var> = net.weights().iter().map(|m| tape.leaf(m.clone())).collect();
    let xv = tape.leaf(x.clone());
    let (logits, pre) = forward_with_preacts(&mut tape, &w, xv)?;
    let p = input_grad_norm_on(&mut tape, &w, logits, &pre)?;
    Ok(tape.scalar(p).expect("scalar"))
}

/// `∇_δ Σ_i ℓ_OE(h(x_i + δ_i))`.
pub fn pgd_input_gradient(net: &ReluNet, x: &Matrix, delta: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let w: Vec<Var> = net.weights().iter().map(|m| tape.leaf(m.clone())).collect();
    let shifted = tape.leaf(x.add(delta)?);
    let logits = forward_on_tape(&mut tape, &w, shifted)?;
    let per = oe_per_sample_on(&mut tape, logits)?;
    let total = tape.sum(per);
    tape.input_gradient(total, shifted)
}

/// Projected sign-gradient ascent on the per-sample OE loss inside the
/// per-dimension L∞ box `|δ_j| ≤ ε_j`, starting from a uniform draw.
pub fn pgd_attack<R: Rng + ?Sized>(
    net: &ReluNet,
    x: &Matrix,
    epsilon: &[f64],
    kappa: &[f64],
    steps: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if epsilon.len() != x.cols() || kappa.len() != x.cols() {
        return Err(Error::invalid(format!(
            "radius has {} entries and step {} for {}-dimensional inputs",
            epsilon.len(),
            kappa.len(),
            x.cols()
        )));
    }
    let mut delta = Matrix::from_fn(x.rows(), x.cols(), |_, c| {
        let e = epsilon[c];
        if e > 0.0 {
            rng.random_range(-e..=e)
        } else {
            0.0
        }
    });
    for _ in 0..steps {
        let g = pgd_input_gradient(net, x, &delta)?;
        delta = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            let s = g.get(r, c);
            let dir = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            (delta.get(r, c) + kappa[c] * dir).clamp(-epsilon[c], epsilon[c])
        });
    }
    Ok(delta)
}

fn sample_alpha(state: &mut TrainState, cfg: &TrainerConfig) -> Result<PerturbationStrength> {
    let i = state.aux_rng.random_range(0..cfg.alpha_candidates.len());
    PerturbationStrength::new(cfg.alpha_candidates[i])
}

/// Normalize, fold into the moving average, and descend on the averaged
/// perturbation; shared by both min-max variants.
fn finish_min_max(
    state: &mut TrainState,
    cfg: &TrainerConfig,
    p: Perturbation,
    alpha: PerturbationStrength,
) -> Result<Prepared> {
    if p.is_zero() {
        return Ok(Prepared {
            term: OodTerm::Oe(None),
            alpha: Some(alpha.get()),
            fallback: true,
        });
    }
    let p_norm = p.normalized()?;
    state.p_ma.blend(&p_norm, cfg.beta)?;
    Ok(Prepared {
        term: OodTerm::Oe(Some((state.p_ma.clone(), alpha))),
        alpha: Some(alpha.get()),
        fallback: false,
    })
}

/// Plain cross-entropy; ignores the OOD batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropyOnly;

impl Strategy for CrossEntropyOnly {
    fn name(&self) -> &'static str {
        "CE"
    }

    fn uses_warmup(&self) -> bool {
        false
    }

    fn prepare(&self, _: &mut TrainState, _: &StepBatch, _: &TrainerConfig) -> Result<Prepared> {
        Ok(Prepared {
            term: OodTerm::None,
            alpha: None,
            fallback: false,
        })
    }
}

/// `L_CE + λ L_OE` on the clean network.
#[derive(Clone, Copy, Debug, Default)]
pub struct OutlierExposure;

impl Strategy for OutlierExposure {
    fn name(&self) -> &'static str {
        "OE"
    }

    fn prepare(&self, _: &mut TrainState, _: &StepBatch, _: &TrainerConfig) -> Result<Prepared> {
        Ok(Prepared::plain_oe())
    }
}

/// Worst-case perturbation from the gradient of `WOR_G`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Doe;

impl Strategy for Doe {
    fn name(&self) -> &'static str {
        "DOE"
    }

    fn prepare(&self, state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig) -> Result<Prepared> {
        let alpha = sample_alpha(state, cfg)?;
        let mut p = Perturbation::zeros_like(&state.net);
        for _ in 0..cfg.num_pert {
            p = wor_g_grad_wrt_p_at(&state.net, &p, alpha, cfg.wor_sigma, &batch.ood)?.grad;
        }
        finish_min_max(state, cfg, p, alpha)
    }
}

/// Perturbation from one ascent step on the OE risk at `P = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DoeRisk;

impl Strategy for DoeRisk {
    fn name(&self) -> &'static str {
        "DOE-risk"
    }

    fn aliases(&self) -> &'static [&'static str] {
        &["doe_risk", "doerisk"]
    }

    fn prepare(&self, state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig) -> Result<Prepared> {
        let alpha = sample_alpha(state, cfg)?;
        let zero = Perturbation::zeros_like(&state.net);
        let p = oe_risk_grad_wrt_p(&state.net, &zero, alpha, &batch.ood)?.grad;
        finish_min_max(state, cfg, p, alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedKind {
    AllOnes,
    Gaussian,
    Uniform,
}

/// OE on `W + αP` for a non-adversarial `P`, scaled to unit global norm:
/// all ones (fixed), or standard normal / uniform on `[−1, 1]` entries
/// redrawn every step.
#[derive(Clone, Copy, Debug)]
pub struct FixedPerturbationOe(pub FixedKind);

impl Strategy for FixedPerturbationOe {
    fn name(&self) -> &'static str {
        match self.0 {
            FixedKind::AllOnes => "OE-allones",
            FixedKind::Gaussian => "OE-gauss",
            FixedKind::Uniform => "OE-uniform",
        }
    }

    fn aliases(&self) -> &'static [&'static str] {
        match self.0 {
            FixedKind::AllOnes => &["allones", "all-ones"],
            FixedKind::Gaussian => &["gauss", "gaussian"],
            FixedKind::Uniform => &["uniform"],
        }
    }

    fn prepare(&self, state: &mut TrainState, _: &StepBatch, cfg: &TrainerConfig) -> Result<Prepared> {
        let alpha = sample_alpha(state, cfg)?;
        let p = match self.0 {
            FixedKind::AllOnes => Perturbation::ones_like(&state.net),
            FixedKind::Gaussian => Perturbation::gaussian_like(&state.net, &mut state.aux_rng),
            FixedKind::Uniform => Perturbation::uniform_like(&state.net, &mut state.aux_rng),
        };
        Ok(Prepared {
            term: OodTerm::Oe(Some((p.normalized()?, alpha))),
            alpha: Some(alpha.get()),
            fallback: false,
        })
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// χ² DRO: squared hinge on per-sample OE losses above `η`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Chi2Dro;

impl Strategy for Chi2Dro {
    fn name(&self) -> &'static str {
        "CHI2"
    }

    fn aliases(&self) -> &'static [&'static str] {
        &["chi2-dro", "chi2_dro"]
    }

    fn prepare(&self, state: &mut TrainState, batch: &StepBatch, _: &TrainerConfig) -> Result<Prepared> {
        let eta = match state.chi2_eta {
            Some(eta) => eta,
            None => {
                let eta = median(oe_loss_per_sample(&state.net.forward(batch.ood.inputs())?)?);
                state.chi2_eta = Some(eta);
                eta
            }
        };
        Ok(Prepared {
            term: OodTerm::Chi2 { eta },
            alpha: None,
            fallback: false,
        })
    }
}

/// Wasserstein DRO surrogate: OE plus the mean input-gradient norm.
#[derive(Clone, Copy, Debug, Default)]
pub struct WassersteinDro;

impl Strategy for WassersteinDro {
    fn name(&self) -> &'static str {
        "WDRO"
    }

    fn prepare(&self, _: &mut TrainState, _: &StepBatch, cfg: &TrainerConfig) -> Result<Prepared> {
        Ok(Prepared {
            term: OodTerm::Wdro {
                gamma: cfg.dro.wdro_gamma,
            },
            alpha: None,
            fallback: false,
        })
    }
}

/// OE on PGD-perturbed OOD inputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdversarialOe;

impl Strategy for AdversarialOe {
    fn name(&self) -> &'static str {
        "AT"
    }

    fn aliases(&self) -> &'static [&'static str] {
        &["adversarial"]
    }

    fn prepare(&self, state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig) -> Result<Prepared> {
        let delta = pgd_attack(
            &state.net,
            batch.ood.inputs(),
            &state.at_epsilon,
            &state.at_kappa,
            cfg.dro.at_steps,
            &mut state.aux_rng,
        )?;
        Ok(Prepared {
            term: OodTerm::Adversarial { delta },
            alpha: None,
            fallback: false,
        })
    }
}

pub fn oe_step(state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig, lr: f64) -> Result<StepRecord> {
    train_step(&OutlierExposure, state, batch, cfg, lr)
}

pub fn doe_step(state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig, lr: f64) -> Result<StepRecord> {
    train_step(&Doe, state, batch, cfg, lr)
}

pub fn doe_risk_step(state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig, lr: f64) -> Result<StepRecord> {
    train_step(&DoeRisk, state, batch, cfg, lr)
}

pub fn fixed_perturbation_step(
    state: &mut TrainState,
    batch: &StepBatch,
    cfg: &TrainerConfig,
    lr: f64,
    kind: FixedKind,
) -> Result<StepRecord> {
    train_step(&FixedPerturbationOe(kind), state, batch, cfg, lr)
}

pub fn chi2_dro_step(state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig, lr: f64) -> Result<StepRecord> {
    train_step(&Chi2Dro, state, batch, cfg, lr)
}

pub fn wdro_step(state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig, lr: f64) -> Result<StepRecord> {
    train_step(&WassersteinDro, state, batch, cfg, lr)
}

pub fn at_step(state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig, lr: f64) -> Result<StepRecord> {
    train_step(&AdversarialOe, state, batch, cfg, lr)
}
