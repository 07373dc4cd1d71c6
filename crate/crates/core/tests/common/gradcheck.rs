//! Analytic-versus-central-difference comparisons for every trainer term.

use doe_core::objectives::{
    ce_loss, oe_loss, oe_loss_per_sample, oe_risk_grad_wrt_p, wor_g, wor_g_grad_wrt_p, UnlabeledBatch,
};
use doe_core::trainers::{loss_and_grad, pgd_input_gradient, wdro_penalty, OodTerm, StepBatch};
use doe_core::{Matrix, Perturbation, PerturbationStrength, ReluNet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// One comparison: which quantity, and its relative error.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub rel_err: f64,
}

fn net_of(ws: &[Matrix]) -> ReluNet {
    ReluNet::new(ws.to_vec()).unwrap()
}

fn ood_value(ws: &[Matrix], ood: &UnlabeledBatch, term: &OodTerm) -> f64 {
    let net = net_of(ws);
    match term {
        OodTerm::None => 0.0,
        OodTerm::Oe(None) => oe_loss(&net.forward(ood.inputs()).unwrap()).unwrap(),
        OodTerm::Oe(Some((p, a))) => oe_loss(&net.forward_additive(p, *a, 1.0, ood.inputs()).unwrap()).unwrap(),
        OodTerm::Chi2 { eta } => {
            let per = oe_loss_per_sample(&net.forward(ood.inputs()).unwrap()).unwrap();
            per.iter().map(|l| (l - eta).max(0.0).powi(2)).sum::<f64>() / per.len() as f64
        }
        OodTerm::Wdro { gamma } => {
            oe_loss(&net.forward(ood.inputs()).unwrap()).unwrap() + gamma * wdro_penalty(&net, ood.inputs()).unwrap()
        }
        OodTerm::Adversarial { delta } => {
            oe_loss(&net.forward(&ood.inputs().add(delta).unwrap()).unwrap()).unwrap()
        }
    }
}

fn total_value(ws: &[Matrix], batch: &StepBatch, term: &OodTerm, lambda: f64) -> f64 {
    let ce = ce_loss(&net_of(ws).forward(batch.id.inputs()).unwrap(), batch.id.labels()).unwrap();
    ce + lambda * ood_value(ws, &batch.ood, term)
}

fn ood_value_of(ws: &[Matrix], batch: &StepBatch, term: &OodTerm) -> f64 {
    ood_value(ws, &batch.ood, term)
}

/// Redraws until every hidden unit is at least [`KINK_MARGIN`] from zero
/// on every input the checks touch.
fn draw_instance(rng: &mut ChaCha8Rng) -> (ReluNet, StepBatch, Perturbation, PerturbationStrength, Matrix) {
    loop {
        let net = random_net(rng);
        let batch = random_step_batch(rng, &net);
        let p = Perturbation::gaussian_like(&net, rng).normalized().unwrap();
        let alpha = PerturbationStrength::new(rng.random_range(0.01..0.5)).unwrap();
        let delta = gaussian(rng, batch.ood.len(), net.input_dim(), 0.1);
        let perturbed = net.with_additive(&p, alpha).unwrap();
        let shifted = batch.ood.inputs().add(&delta).unwrap();
        let margins = [
            preact_margin(net.weights(), batch.id.inputs()),
            preact_margin(net.weights(), batch.ood.inputs()),
            preact_margin(perturbed.weights(), batch.ood.inputs()),
            preact_margin(net.weights(), &shifted),
        ];
        if margins.iter().all(|&m| m > KINK_MARGIN) {
            return (net, batch, p, alpha, delta);
        }
    }
}

/// Runs every comparison on one random instance.
pub fn check_instance(rng: &mut ChaCha8Rng) -> Vec<GradCheck> {
    let (net, batch, p, alpha, delta) = draw_instance(rng);
    let lambda = rng.random_range(0.5..2.0);
    let eta = {
        let per = oe_loss_per_sample(&net.forward(batch.ood.inputs()).unwrap()).unwrap();
        median(per)
    };
    let terms: [(&'static str, OodTerm); 6] = [
        ("CE", OodTerm::None),
        ("OE", OodTerm::Oe(None)),
        ("OE(W+αP)", OodTerm::Oe(Some((p.clone(), alpha)))),
        ("CHI2", OodTerm::Chi2 { eta }),
        ("WDRO", OodTerm::Wdro { gamma: rng.random_range(0.1..2.0) }),
        ("AT", OodTerm::Adversarial { delta: delta.clone() }),
    ];
    let ws = net.weights().to_vec();
    let mut out = Vec::new();
    for (name, term) in &terms {
        let eval = loss_and_grad(&net, &batch, term, lambda).unwrap();
        let fd = numeric_grad(&ws, |w| total_value(w, &batch, term, lambda));
        out.push(GradCheck {
            name,
            rel_err: rel_err(&eval.grads, &fd, GRAD_FLOOR),
        });
        let value = total_value(&ws, &batch, term, lambda);
        let ood = ood_value_of(&ws, &batch, term);
        out.push(GradCheck {
            name: "loss value",
            rel_err: ((eval.total - value).abs() + (eval.ood - ood).abs()) / value.abs().max(1.0),
        });
    }

    // ∇_P WOR_G at a nonzero P, and ∇_P L_OE, both against differences in P.
    let wg = wor_g_grad_wrt_p(&net, &p, alpha, &batch.ood).unwrap();
    let fd = numeric_grad(p.layers(), |pl| {
        wor_g(&net, &Perturbation::additive(pl.to_vec()), alpha, &batch.ood).unwrap()
    });
    out.push(GradCheck {
        name: "∇_P WOR_G",
        rel_err: rel_err(wg.grad.layers(), &fd, GRAD_FLOOR),
    });
    let risk = oe_risk_grad_wrt_p(&net, &p, alpha, &batch.ood).unwrap();
    let fd = numeric_grad(p.layers(), |pl| {
        oe_loss(&net.forward_additive(&Perturbation::additive(pl.to_vec()), alpha, 1.0, batch.ood.inputs()).unwrap())
            .unwrap()
    });
    out.push(GradCheck {
        name: "∇_P L_OE",
        rel_err: rel_err(risk.grad.layers(), &fd, GRAD_FLOOR),
    });

    // WDRO: the recorded backward pass against input differences.
    let x = batch.ood.inputs();
    let per_sample = |xm: &[Matrix]| oe_loss_per_sample(&net.forward(&xm[0]).unwrap()).unwrap();
    let mut norms = 0.0;
    for i in 0..x.rows() {
        let g = numeric_grad(std::slice::from_ref(x), |xm| per_sample(xm)[i]);
        norms += g[0].row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let oracle = norms / x.rows() as f64;
    let penalty = wdro_penalty(&net, x).unwrap();
    out.push(GradCheck {
        name: "∇_x ℓ_OE (WDRO)",
        rel_err: (penalty - oracle).abs() / oracle.abs().max(GRAD_FLOOR),
    });

    // AT: ∇_δ of the summed per-sample OE loss.
    let analytic = pgd_input_gradient(&net, x, &delta).unwrap();
    let fd = numeric_grad(std::slice::from_ref(&delta), |d| {
        oe_loss_per_sample(&net.forward(&x.add(&d[0]).unwrap()).unwrap())
            .unwrap()
            .iter()
            .sum()
    });
    out.push(GradCheck {
        name: "∇_δ ℓ_OE (AT)",
        rel_err: rel_err(std::slice::from_ref(&analytic), &fd, GRAD_FLOOR),
    });
    out
}
