//! Training loops: CE pretraining followed by fine-tuning with one of the
//! registered strategies.
//!
//! A fine-tuning step is split in two. The strategy's
//! [`Strategy::prepare`](strategy::Strategy::prepare) decides the OOD term
//! for the step (which perturbation, which adversarial offsets, which hinge
//! level) and may update the trainer state. The shared [`loss_and_grad`]
//! then differentiates `L_CE + λ · term` with respect to the weights, with
//! everything chosen in the first phase held fixed. The second phase is a
//! pure function, which is what the finite-difference checks exercise.

mod strategy;
mod variants;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Datasets;
use crate::detection::{auroc, fpr_at_tpr95, ScoreSeries, Scorer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{Perturbation, ReluNet};
use crate::objectives::{oe_loss_per_sample, sigma_derivative, LabeledBatch, UnlabeledBatch};

pub use strategy::{OodTerm, Prepared, Strategy, StrategyRegistry};
pub use variants::{
    at_step, chi2_dro_step, doe_risk_step, doe_step, fixed_perturbation_step, loss_and_grad, oe_step, pgd_attack,
    pgd_input_gradient, wdro_penalty, wdro_step, AdversarialOe, Chi2Dro, CrossEntropyOnly, Doe, DoeRisk, FixedKind,
    FixedPerturbationOe, LossEval, OutlierExposure, WassersteinDro,
};

/// ChaCha stream ids; each concern draws from its own stream so that, for
/// example, DOE's α sampling never shifts the batch order.
mod streams {
    pub const INIT: u64 = 1;
    pub const PRETRAIN_BATCHES: u64 = 2;
    pub const ID_BATCHES: u64 = 3;
    pub const OOD_BATCHES: u64 = 4;
    pub const AUX: u64 = 5;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Settings for the distributionally robust and adversarial baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroConfig {
    /// χ² hinge level; `None` uses the median per-sample OE loss on the first
    /// post-warm-up batch.
    pub chi2_eta: Option<f64>,
    /// Weight of the input-gradient penalty in the Wasserstein surrogate.
    pub wdro_gamma: f64,
    /// Absolute L∞ radius for adversarial OE; overrides `at_epsilon_scale`.
    pub at_epsilon: Option<f64>,
    /// Radius as a multiple of each input dimension's standard deviation
    /// over the surrogate OOD set.
    pub at_epsilon_scale: f64,
    /// Step size; `None` means a quarter of the radius.
    pub at_kappa: Option<f64>,
    pub at_steps: usize,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            chi2_eta: None,
            wdro_gamma: 1.0,
            at_epsilon: None,
            at_epsilon_scale: 0.1,
            at_kappa: None,
            at_steps: 5,
        }
    }
}

impl DroConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("dro.{name} must be finite and >= 0, got {v}")))
            }
        };
        if let Some(eta) = self.chi2_eta {
            if !eta.is_finite() {
                return Err(Error::invalid("dro.chi2_eta must be finite"));
            }
        }
        finite_nonneg("wdro_gamma", self.wdro_gamma)?;
        finite_nonneg("at_epsilon_scale", self.at_epsilon_scale)?;
        if let Some(e) = self.at_epsilon {
            finite_nonneg("at_epsilon", e)?;
        }
        if let Some(k) = self.at_kappa {
            finite_nonneg("at_kappa", k)?;
        }
        if self.at_steps == 0 {
            return Err(Error::invalid("dro.at_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub variant: String,
    pub lambda: f64,
    /// Moving-average weight on the newest normalized perturbation.
    pub beta: f64,
    /// Perturbation strengths; one is drawn uniformly at every step.
    pub alpha_candidates: Vec<f64>,
    /// Scale at which the σ-derivative inside `WOR_G` is taken.
    pub wor_sigma: f64,
    pub num_pert: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub cosine: bool,
    /// Epochs (1-indexed) after which the rate is divided by
    /// `milestone_divisor`.
    pub milestones: Vec<usize>,
    pub milestone_divisor: f64,
    pub momentum: f64,
    pub id_batch: usize,
    pub ood_batch: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub val_scorer: Scorer,
    pub dro: DroConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::cifar()
    }
}

impl TrainerConfig {
    /// The small-image profile: λ = 1, β = 0.6, α ∈ {1e-1, …, 1e-4}, one
    /// perturbation step, 10 epochs with 5 of warm-up, cosine decay from 0.01.
    pub fn cifar() -> Self {
        Self {
            variant: "DOE".into(),
            lambda: 1.0,
            beta: 0.6,
            alpha_candidates: vec![1e-1, 1e-2, 1e-3, 1e-4],
            wor_sigma: 1.0,
            num_pert: 1,
            epochs: 10,
            warmup_epochs: 5,
            lr: 0.01,
            cosine: true,
            milestones: Vec::new(),
            milestone_divisor: 10.0,
            momentum: 0.9,
            id_batch: 128,
            ood_batch: 256,
            seed: 0,
            pretrain_epochs: 0,
            pretrain_lr: 0.1,
            val_scorer: Scorer::MaxLogit,
            dro: DroConfig::default(),
        }
    }

    /// The large-image profile: 4 epochs with 2 of warm-up, rate 1e-4,
    /// batches of 64, β = 0.1.
    pub fn imagenet() -> Self {
        Self {
            epochs: 4,
            warmup_epochs: 2,
            lr: 1e-4,
            id_batch: 64,
            ood_batch: 64,
            beta: 0.1,
            ..Self::cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if self.alpha_candidates.is_empty() {
            return bad("alpha_candidates must be nonempty".into());
        }
        if let Some(a) = self.alpha_candidates.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return bad(format!("alpha candidates must be finite and >= 0, got {a}"));
        }
        if !(self.wor_sigma > 0.0 && self.wor_sigma.is_finite()) {
            return bad(format!("wor_sigma must be positive, got {}", self.wor_sigma));
        }
        if self.num_pert == 0 {
            return bad("num_pert must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.milestone_divisor.is_finite() && self.milestone_divisor > 0.0) {
            return bad(format!("milestone_divisor must be positive, got {}", self.milestone_divisor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.id_batch == 0 || self.ood_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        self.dro.validate()
    }
}

/// Learning rate at `step` (0-indexed) of `total`, in epoch `epoch`
/// (0-indexed): cosine decay over all steps, divided at each milestone.
pub fn learning_rate(base: f64, cosine: bool, milestones: &[usize], divisor: f64, step: u64, total: u64, epoch: usize) -> f64 {
    let mut lr = base;
    if cosine && total > 0 {
        let t = step as f64 / total as f64;
        lr *= 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    }
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    lr / divisor.powi(passed as i32)
}

/// One ID batch and one surrogate OOD batch.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub id: LabeledBatch,
    pub ood: UnlabeledBatch,
}

/// Everything a strategy may read or update between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: ReluNet,
    /// Moving average of normalized perturbations; zero until warm-up ends.
    pub p_ma: Perturbation,
    pub velocity: Vec<Matrix>,
    /// Completed fine-tuning steps.
    pub step: u64,
    pub warmup_steps: u64,
    pub aux_rng: ChaCha8Rng,
    /// Resolved χ² hinge level, fixed on first use.
    pub chi2_eta: Option<f64>,
    /// Per-dimension L∞ radius and step size for adversarial OE.
    pub at_epsilon: Vec<f64>,
    pub at_kappa: Vec<f64>,
}

impl TrainState {
    /// `ood_reference` supplies the per-dimension spread that scales the
    /// adversarial radius.
    pub fn new(net: ReluNet, cfg: &TrainerConfig, warmup_steps: u64, ood_reference: &UnlabeledBatch) -> Result<Self> {
        let d = net.input_dim();
        if ood_reference.inputs().cols() != d {
            return Err(Error::invalid(format!(
                "OOD reference has {} features, network expects {d}",
                ood_reference.inputs().cols()
            )));
        }
        let at_epsilon: Vec<f64> = match cfg.dro.at_epsilon {
            Some(e) => vec![e; d],
            None => column_std(ood_reference.inputs())
                .into_iter()
                .map(|s| cfg.dro.at_epsilon_scale * s)
                .collect(),
        };
        let at_kappa = match cfg.dro.at_kappa {
            Some(k) => vec![k; d],
            None => at_epsilon.iter().map(|e| e / 4.0).collect(),
        };
        Ok(Self {
            p_ma: Perturbation::zeros_like(&net),
            velocity: net.weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            net,
            step: 0,
            warmup_steps,
            aux_rng: stream_rng(cfg.seed, streams::AUX),
            chi2_eta: cfg.dro.chi2_eta,
            at_epsilon,
            at_kappa,
        })
    }

    /// True while the next step is still a warm-up step.
    pub fn in_warmup(&self) -> bool {
        self.step < self.warmup_steps
    }
}

fn column_std(x: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|c| {
            let mean = x.row_iter().map(|r| r[c]).sum::<f64>() / n;
            (x.row_iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// What one step did, for history and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total_loss: f64,
    pub ce_loss: f64,
    /// OE loss of the unperturbed network on the OOD batch.
    pub oe_loss: f64,
    /// `g²` of the unperturbed network on the OOD batch.
    pub wor_g: f64,
    pub alpha: Option<f64>,
    /// The strategy found an exactly-zero perturbation gradient and took a
    /// plain OE step instead.
    pub fallback: bool,
}

/// One step of `strategy`: choose the OOD term, differentiate, and take an
/// SGD-with-momentum step at rate `lr`.
pub fn train_step(
    strategy: &dyn Strategy,
    state: &mut TrainState,
    batch: &StepBatch,
    cfg: &TrainerConfig,
    lr: f64,
) -> Result<StepRecord> {
    let prepared = if state.in_warmup() && strategy.uses_warmup() {
        Prepared::plain_oe()
    } else {
        strategy.prepare(state, batch, cfg)?
    };
    let eval = loss_and_grad(&state.net, batch, &prepared.term, cfg.lambda)?;
    let step = state.step + 1;
    if !eval.total.is_finite() {
        return Err(Error::Diverged {
            phase: strategy.name().to_string(),
            step,
            detail: format!("loss is {} (ce {}, ood {})", eval.total, eval.ce, eval.ood),
        });
    }
    let clean = state.net.forward(batch.ood.inputs())?;
    let oe_per = oe_loss_per_sample(&clean)?;
    let g = sigma_derivative(&clean);

    for ((w, v), g) in state.net.weights_mut().iter_mut().zip(&mut state.velocity).zip(&eval.grads) {
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = cfg.momentum * *vi + gi;
        }
        w.axpy(-lr, v)?;
    }
    if !state.net.is_finite() {
        return Err(Error::Diverged {
            phase: strategy.name().to_string(),
            step,
            detail: "weights became non-finite".into(),
        });
    }
    state.step = step;
    Ok(StepRecord {
        step,
        lr,
        total_loss: eval.total,
        ce_loss: eval.ce,
        oe_loss: oe_per.iter().sum::<f64>() / oe_per.len() as f64,
        wor_g: g * g,
        alpha: prepared.alpha,
        fallback: prepared.fallback,
    })
}

/// One line of the JSON-lines training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub variant: String,
    pub ce_loss: f64,
    pub oe_loss: f64,
    pub wor_g_mean: f64,
    pub val_fpr95: f64,
    pub val_auroc: f64,
    pub alpha_used: Option<f64>,
}

/// Epoch-wise shuffled ID batches and a cycling shuffled OOD stream.
struct Sampler {
    id_rng: ChaCha8Rng,
    ood_rng: ChaCha8Rng,
    ood_perm: Vec<usize>,
    ood_cursor: usize,
}

impl Sampler {
    fn new(id_rng: ChaCha8Rng, ood_rng: ChaCha8Rng) -> Self {
        Self {
            id_rng,
            ood_rng,
            ood_perm: Vec::new(),
            ood_cursor: 0,
        }
    }

    fn id_epoch(&mut self, n: usize, batch: usize) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.id_rng);
        let b = batch.min(n);
        perm.chunks_exact(b).map(<[usize]>::to_vec).collect()
    }

    fn ood_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch.min(n));
        while out.len() < batch.min(n) {
            if self.ood_cursor == self.ood_perm.len() {
                self.ood_perm = (0..n).collect();
                self.ood_perm.shuffle(&mut self.ood_rng);
                self.ood_cursor = 0;
            }
            out.push(self.ood_perm[self.ood_cursor]);
            self.ood_cursor += 1;
        }
        out
    }
}

pub fn steps_per_epoch(n_id: usize, id_batch: usize) -> u64 {
    (n_id / id_batch.min(n_id).max(1)).max(1) as u64
}

/// Validation FPR95 and AUROC on the ID validation split against the
/// held-out surrogate split.
pub fn validate(net: &ReluNet, data: &Datasets, scorer: Scorer) -> Result<(f64, f64)> {
    let series = ScoreSeries::from_logits(
        &net.forward(data.id_val.inputs())?,
        &net.forward(data.val_ood.inputs())?,
        scorer,
    )?;
    Ok((fpr_at_tpr95(&series)?.0, auroc(&series)))
}

fn check_data(net: &ReluNet, data: &Datasets) -> Result<()> {
    data.validate()?;
    if net.input_dim() != data.feature_dim() || net.num_classes() != data.num_classes() {
        return Err(Error::invalid(format!(
            "network maps {} → {} but data has {} features and {} classes",
            net.input_dim(),
            net.num_classes(),
            data.feature_dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

/// Fresh Glorot-initialized network with the given hidden widths.
pub fn init_net(cfg: &TrainerConfig, hidden: &[usize], data: &Datasets) -> Result<ReluNet> {
    let mut widths = vec![data.feature_dim()];
    widths.extend_from_slice(hidden);
    widths.push(data.num_classes());
    ReluNet::init(&widths, &mut stream_rng(cfg.seed, streams::INIT))
}

/// Plain CE training for `cfg.pretrain_epochs` at `cfg.pretrain_lr`.
pub fn pretrain(net: ReluNet, cfg: &TrainerConfig, data: &Datasets) -> Result<(ReluNet, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_data(&net, data)?;
    if cfg.pretrain_epochs == 0 {
        return Ok((net, Vec::new()));
    }
    let pre_cfg = TrainerConfig {
        lr: cfg.pretrain_lr,
        epochs: cfg.pretrain_epochs,
        warmup_epochs: 0,
        milestones: Vec::new(),
        ..cfg.clone()
    };
    let mut sampler = Sampler::new(
        stream_rng(cfg.seed, streams::PRETRAIN_BATCHES),
        stream_rng(cfg.seed, streams::PRETRAIN_BATCHES + 100),
    );
    let mut state = TrainState::new(net, &pre_cfg, 0, &data.surrogate_ood)?;
    let (net, history, _) = run_epochs(&CrossEntropyOnly, &mut state, &pre_cfg, data, &mut sampler, "pretrain", &mut |_, _| {})?;
    Ok((net, history))
}

/// Runs `cfg.epochs` epochs of `strategy` from the current state.
fn run_epochs(
    strategy: &dyn Strategy,
    state: &mut TrainState,
    cfg: &TrainerConfig,
    data: &Datasets,
    sampler: &mut Sampler,
    label: &str,
    observer: &mut dyn FnMut(&TrainState, &StepRecord),
) -> Result<(ReluNet, Vec<EpochRecord>, u64)> {
    let per_epoch = steps_per_epoch(data.id_train.len(), cfg.id_batch);
    let total = per_epoch * cfg.epochs as u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut fallbacks = 0;
    let mut global = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = sampler.id_epoch(data.id_train.len(), cfg.id_batch);
        let (mut ce, mut oe, mut wg) = (0.0, 0.0, 0.0);
        let (mut alpha_sum, mut alpha_n) = (0.0, 0usize);
        for idx in &batches {
            let ood_idx = sampler.ood_batch(data.surrogate_ood.len(), cfg.ood_batch);
            let batch = StepBatch {
                id: data.id_train.select(idx),
                ood: data.surrogate_ood.select(&ood_idx),
            };
            let lr = learning_rate(cfg.lr, cfg.cosine, &cfg.milestones, cfg.milestone_divisor, global, total, epoch);
            let rec = train_step(strategy, state, &batch, cfg, lr)?;
            global += 1;
            ce += rec.ce_loss;
            oe += rec.oe_loss;
            wg += rec.wor_g;
            if let Some(a) = rec.alpha {
                alpha_sum += a;
                alpha_n += 1;
            }
            fallbacks += u64::from(rec.fallback);
            observer(state, &rec);
        }
        let n = batches.len() as f64;
        let (val_fpr95, val_auroc) = validate(&state.net, data, cfg.val_scorer)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            variant: label.to_string(),
            ce_loss: ce / n,
            oe_loss: oe / n,
            wor_g_mean: wg / n,
            val_fpr95,
            val_auroc,
            alpha_used: (alpha_n > 0).then(|| alpha_sum / alpha_n as f64),
        });
    }
    Ok((state.net.clone(), history, fallbacks))
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub pretrained: ReluNet,
    pub net: ReluNet,
    pub history: Vec<EpochRecord>,
    /// Steps where a zero perturbation gradient forced a plain OE step.
    pub fallback_steps: u64,
}

/// Fine-tunes `net` with the strategy named in `cfg.variant`, calling
/// `observer` after every step.
pub fn fine_tune(
    net: ReluNet,
    cfg: &TrainerConfig,
    data: &Datasets,
    registry: &StrategyRegistry,
    observer: &mut dyn FnMut(&TrainState, &StepRecord),
) -> Result<(ReluNet, Vec<EpochRecord>, u64)> {
    cfg.validate()?;
    check_data(&net, data)?;
    let strategy = registry.get(&cfg.variant)?;
    let per_epoch = steps_per_epoch(data.id_train.len(), cfg.id_batch);
    let mut state = TrainState::new(net, cfg, per_epoch * cfg.warmup_epochs as u64, &data.surrogate_ood)?;
    let mut sampler = Sampler::new(
        stream_rng(cfg.seed, streams::ID_BATCHES),
        stream_rng(cfg.seed, streams::OOD_BATCHES),
    );
    run_epochs(strategy.as_ref(), &mut state, cfg, data, &mut sampler, strategy.name(), observer)
}

/// Initializes, pretrains and fine-tunes; deterministic given `cfg.seed`.
pub fn run_experiment(cfg: &TrainerConfig, hidden: &[usize], data: &Datasets) -> Result<ExperimentOutcome> {
    run_experiment_with(&StrategyRegistry::builtin(), cfg, hidden, data)
}

pub fn run_experiment_with(
    registry: &StrategyRegistry,
    cfg: &TrainerConfig,
    hidden: &[usize],
    data: &Datasets,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    registry.get(&cfg.variant)?;
    let net = init_net(cfg, hidden, data)?;
    let (pretrained, mut history) = pretrain(net, cfg, data)?;
    let (net, tuned, fallback_steps) = fine_tune(pretrained.clone(), cfg, data, registry, &mut |_, _| {})?;
    history.extend(tuned);
    Ok(ExperimentOutcome {
        pretrained,
        net,
        history,
        fallback_steps,
    })
}
