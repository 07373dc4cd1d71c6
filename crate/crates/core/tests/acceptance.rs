//! Acceptance gate. Each criterion prints one PASS/FAIL line and fails its
//! test when not met.

mod common;

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::gradcheck::check_instance;
use common::*;
use doe_core::data::{make_gap_benchmark, Datasets, GapConfig, DISJOINT_SPLIT, OVERLAP_SPLIT};
use doe_core::detection::{auroc, fpr_at_tpr95, ScoreSeries, Scorer};
use doe_core::theory::{
    check_input_space_equivalence, check_layer_equivalence, check_lemma3_determinant, default_alpha_grid,
    kl_of_affine, random_certification_net, random_positive_spectrum, LAYER_EQUIVALENCE_TOL, LEMMA3_TOL, MIN_ORDER,
};
use doe_core::trainers::{fine_tune, init_net, pretrain, run_experiment, StrategyRegistry, TrainerConfig};
use doe_core::{Error, Matrix, Perturbation, ReluNet};
use rand::Rng;

fn report(id: u32, title: &str, pass: bool, detail: impl AsRef<str>) {
    println!("[{}] criterion {id}: {title} | {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let instances = 100;
    for _ in 0..instances {
        for c in check_instance(&mut r) {
            let w = worst.entry(c.name).or_default();
            *w = w.max(c.rel_err);
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let (fast, time) = within(start, Duration::from_secs(60));
    let pass = max <= 1e-4 && fast;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    report(1, "gradients vs central differences", pass, format!("{instances} instances, max rel err {max:.2e}, {time}; {}", detail.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_2_layer_equivalence_and_kl() {
    let start = Instant::now();
    let mut r = rng(7);
    let mut layer_max: f64 = 0.0;
    for _ in 0..1000 {
        let (m, n) = (r.random_range(1..=8), r.random_range(1..=8));
        let w = gaussian(&mut r, m, n, 1.0);
        let a = gaussian(&mut r, n, n, 1.0);
        let z = gaussian(&mut r, 1, n, 1.0).into_data();
        let alpha = r.random_range(0.0..1.0);
        layer_max = layer_max.max(check_layer_equivalence(&w, &a, alpha, &z).unwrap());
    }
    let mut kl_max: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(1..=5);
        let (a, _) = random_positive_spectrum(&mut r, n);
        let alpha = r.random_range(0.05..1.0);
        let kl = kl_of_affine(&a, alpha).unwrap();
        let mc = kl_monte_carlo(&a, alpha, 1_000_000, &mut r);
        kl_max = kl_max.max((kl - mc).abs() / kl.abs());
    }
    let (fast, time) = within(start, Duration::from_secs(120));
    let pass = layer_max <= LAYER_EQUIVALENCE_TOL && kl_max <= 0.01 && fast;
    report(
        2,
        "layer equivalence and affine KL",
        pass,
        format!("layer residual {layer_max:.1e} over 1000, KL vs Monte Carlo rel {kl_max:.1e} over 50 (1e6 draws each), {time}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_input_space_order_and_determinants() {
    let start = Instant::now();
    let mut r = rng(11);
    let grid = default_alpha_grid();
    let (mut accepted, mut failed, mut min_order) = (0usize, 0usize, f64::INFINITY);
    for _ in 0..300 {
        let width = r.random_range(2..=5);
        let depth = r.random_range(2..=4);
        let net = random_certification_net(&mut r, width, depth, 3, false);
        let a = Perturbation::multiplicative(
            net.weights().iter().map(|w| gaussian(&mut r, w.cols(), w.cols(), 1.0)).collect(),
        )
        .unwrap();
        let x: Vec<f64> = (0..width).map(|_| r.random_range(0.5..1.5)).collect();
        let rep = match check_input_space_equivalence(&net, &a, &grid, &x) {
            Ok(rep) => rep,
            Err(Error::Singular(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        if !rep.accepted {
            continue;
        }
        accepted += 1;
        if let Some(o) = rep.order {
            min_order = min_order.min(o);
        }
        failed += usize::from(!rep.pass);
    }
    let mut det_max: f64 = 0.0;
    let mut det_ok = true;
    for _ in 0..1000 {
        let n = r.random_range(1..=6);
        let (a, _) = random_positive_spectrum(&mut r, n);
        let (b, _) = random_positive_spectrum(&mut r, n);
        let alpha = r.random_range(0.01..1.0);
        let rep = check_lemma3_determinant(&a, &b, alpha).unwrap();
        det_max = det_max.max(rep.relative_residual);
        det_ok &= rep.pass;
    }
    let (fast, time) = within(start, Duration::from_secs(120));
    let pass = accepted >= 100 && failed == 0 && min_order >= MIN_ORDER && det_max <= LEMMA3_TOL && det_ok && fast;
    report(
        3,
        "input-space equivalence order and determinant product",
        pass,
        format!("{accepted} stable nets, min slope {min_order:.3}, det residual {det_max:.1e} over 1000, {time}"),
    );
    assert!(pass);
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b { 2 } else if a == b { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

fn sweep_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let allowed_below = id.len().div_ceil(20);
    let best = id
        .iter()
        .chain(ood)
        .copied()
        .filter(|&t| id.iter().filter(|&&s| s < t).count() < allowed_below)
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|&&s| s >= best).count() as f64 / ood.len() as f64
}

#[test]
fn criterion_4_metric_oracles() {
    let mut r = rng(13);
    let mut mismatches = 0;
    for k in 0..100 {
        let n = r.random_range(20..=1000);
        let m = r.random_range(1..=1000);
        // Alternate coarse grids (many ties) with continuous draws.
        let draw = |r: &mut rand_chacha::ChaCha8Rng, shift: f64| {
            if k % 2 == 0 {
                (r.random_range(0..100) as f64) * 0.05 + shift
            } else {
                r.random::<f64>() * 5.0 + shift
            }
        };
        let id: Vec<f64> = (0..n).map(|_| draw(&mut r, 0.0)).collect();
        let ood: Vec<f64> = (0..m).map(|_| draw(&mut r, -1.0)).collect();
        let s = ScoreSeries::new(id.clone(), ood.clone(), Scorer::MaxLogit).unwrap();
        mismatches += usize::from(auroc(&s) != pairwise_auroc(&id, &ood));
        mismatches += usize::from(fpr_at_tpr95(&s).unwrap().0 != sweep_fpr95(&id, &ood));
    }
    let perfect = ScoreSeries::new(vec![2.0; 100], vec![-1.0; 100], Scorer::MaxLogit).unwrap();
    let endpoints = (auroc(&perfect), fpr_at_tpr95(&perfect).unwrap().0);
    let pass = mismatches == 0 && endpoints == (1.0, 0.0);
    report(4, "AUROC and FPR95 against brute force", pass, format!("{mismatches} mismatches over 100 instances, perfect separation {endpoints:?}"));
    assert!(pass);
}

fn trajectory(cfg: &TrainerConfig, data: &Datasets, net: &ReluNet, norms: Option<&mut Vec<f64>>) -> Vec<Vec<Matrix>> {
    let mut out = Vec::new();
    let mut norms = norms;
    fine_tune(net.clone(), cfg, data, &StrategyRegistry::builtin(), &mut |s, rec| {
        out.push(s.net.weights().to_vec());
        if let (Some(n), Some(_)) = (norms.as_deref_mut(), rec.alpha) {
            n.push(s.p_ma.norm());
        }
    })
    .unwrap();
    out
}

#[test]
fn criterion_5_algorithmic_fidelity() {
    let data = make_gap_benchmark(5, 400, 2, &GapConfig::default()).unwrap().datasets;
    let cfg = TrainerConfig {
        epochs: 4,
        warmup_epochs: 2,
        id_batch: 32,
        ood_batch: 64,
        pretrain_epochs: 3,
        pretrain_lr: 0.05,
        ..TrainerConfig::cifar()
    };
    let hidden = [16, 16];
    let net = pretrain(init_net(&cfg, &hidden, &data).unwrap(), &cfg, &data).unwrap().0;

    let mut norms = Vec::new();
    let doe = trajectory(&cfg, &data, &net, Some(&mut norms));
    let oe = trajectory(&TrainerConfig { variant: "OE".into(), ..cfg.clone() }, &data, &net, None);
    let warm = (data.id_train.len() / cfg.id_batch) * cfg.warmup_epochs;
    let warm_equal = doe[..warm] == oe[..warm];
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let ball = !norms.is_empty() && max_norm <= 1.0;

    let zero = TrainerConfig { lambda: 0.0, variant: "CE".into(), ..cfg.clone() };
    let reference = trajectory(&zero, &data, &net, None);
    let registry = StrategyRegistry::builtin();
    let variants: Vec<&str> = registry.names().iter().copied().filter(|n| *n != "CE").collect();
    let diverged: Vec<&str> = variants
        .iter()
        .copied()
        .filter(|v| trajectory(&TrainerConfig { variant: v.to_string(), ..zero.clone() }, &data, &net, None) != reference)
        .collect();

    let pass = warm_equal && ball && diverged.is_empty() && variants.len() == 9;
    report(
        5,
        "warm-up identity, unit-ball moving average, zero-weight collapse",
        pass,
        format!(
            "{warm} warm-up steps identical: {warm_equal}; max ‖P_MA‖ {max_norm:.6} over {} steps; {} variants, diverging at λ=0: {diverged:?}",
            norms.len(),
            variants.len()
        ),
    );
    assert!(pass);
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GAP_VARIANTS: [&str; 6] = ["CE", "OE", "DOE", "OE-allones", "OE-gauss", "OE-uniform"];

/// The desk preset for the gap benchmark.
fn gap_config(variant: &str, seed: u64) -> TrainerConfig {
    TrainerConfig {
        variant: variant.into(),
        seed,
        id_batch: 32,
        ood_batch: 64,
        pretrain_epochs: 20,
        pretrain_lr: 0.05,
        ..TrainerConfig::cifar()
    }
}

#[derive(Clone, Copy, Debug)]
struct GapScores {
    fpr_disjoint: f64,
    fpr_overlap: f64,
    auroc_disjoint_maxlogit: f64,
    auroc_disjoint_msp: f64,
    fpr_disjoint_maxlogit: f64,
    fpr_disjoint_msp: f64,
}

struct GapRuns {
    /// variant → per-seed scores
    scores: BTreeMap<&'static str, Vec<GapScores>>,
    elapsed: Duration,
}

fn gap_runs() -> &'static GapRuns {
    static RUNS: OnceLock<GapRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let mut scores: BTreeMap<&'static str, Vec<GapScores>> = BTreeMap::new();
        for seed in SEEDS {
            let data = make_gap_benchmark(seed, 2000, 2, &GapConfig::default()).unwrap().datasets;
            for variant in GAP_VARIANTS {
                let out = run_experiment(&gap_config(variant, seed), &[32, 32], &data).unwrap();
                // The CE-only baseline is scored with MSP, the rest with MaxLogit.
                let scorer = if variant == "CE" { Scorer::Msp } else { Scorer::MaxLogit };
                let id = out.net.forward(data.id_test.inputs()).unwrap();
                let split = |name: &str, s: Scorer| {
                    let ood = out.net.forward(data.test_split(name).unwrap().inputs()).unwrap();
                    ScoreSeries::from_logits(&id, &ood, s).unwrap()
                };
                scores.entry(variant).or_default().push(GapScores {
                    fpr_disjoint: fpr_at_tpr95(&split(DISJOINT_SPLIT, scorer)).unwrap().0,
                    fpr_overlap: fpr_at_tpr95(&split(OVERLAP_SPLIT, scorer)).unwrap().0,
                    auroc_disjoint_maxlogit: auroc(&split(DISJOINT_SPLIT, Scorer::MaxLogit)),
                    auroc_disjoint_msp: auroc(&split(DISJOINT_SPLIT, Scorer::Msp)),
                    fpr_disjoint_maxlogit: fpr_at_tpr95(&split(DISJOINT_SPLIT, Scorer::MaxLogit)).unwrap().0,
                    fpr_disjoint_msp: fpr_at_tpr95(&split(DISJOINT_SPLIT, Scorer::Msp)).unwrap().0,
                });
            }
        }
        GapRuns {
            scores,
            elapsed: start.elapsed(),
        }
    })
}

fn median_of(runs: &GapRuns, variant: &str, f: impl Fn(&GapScores) -> f64) -> f64 {
    median(runs.scores[variant].iter().map(f).collect())
}

#[test]
fn criterion_6_directional_gap_reproduction() {
    let runs = gap_runs();
    let dis = |v| median_of(runs, v, |s| s.fpr_disjoint);
    let ovl = |v| median_of(runs, v, |s| s.fpr_overlap);
    let (doe, oe, ce) = (dis("DOE"), dis("OE"), dis("CE"));
    let margin = oe - doe >= 0.05;
    let beat_ce = doe < ce && oe < ce;
    let overlap = ovl("DOE") <= ovl("OE") + 0.02;
    let fast = runs.elapsed < Duration::from_secs(600);
    let pass = margin && beat_ce && overlap && fast;
    report(
        6,
        "DOE beats OE on the disjoint split",
        pass,
        format!(
            "disjoint FPR95 median DOE {doe:.4} OE {oe:.4} CE(MSP) {ce:.4} (needs OE-DOE ≥ 0.05: {margin}; both < CE: {beat_ce}); \
             overlap DOE {:.4} OE {:.4} (within 0.02: {overlap}); {} runs in {:.1}s",
            ovl("DOE"),
            ovl("OE"),
            SEEDS.len() * GAP_VARIANTS.len(),
            runs.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_perturbation_ablation_direction() {
    let runs = gap_runs();
    let dis = |v| median_of(runs, v, |s| s.fpr_disjoint);
    let (doe, oe) = (dis("DOE"), dis("OE"));
    let fixed: Vec<(&str, f64)> = ["OE-allones", "OE-gauss", "OE-uniform"].iter().map(|v| (*v, dis(v))).collect();
    let fixed_le_oe = fixed.iter().all(|(_, f)| *f <= oe);
    let doe_le_fixed = fixed.iter().all(|(_, f)| doe <= *f);
    let pass = fixed_le_oe && doe_le_fixed;
    let list: Vec<String> = fixed.iter().map(|(v, f)| format!("{v} {f:.4}")).collect();
    report(
        7,
        "perturbation forms improve on OE and DOE leads them",
        pass,
        format!(
            "disjoint FPR95 median OE {oe:.4}, {}, DOE {doe:.4} (fixed ≤ OE: {fixed_le_oe}; DOE ≤ fixed: {doe_le_fixed})",
            list.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_maxlogit_vs_msp() {
    let runs = gap_runs();
    let ml = median_of(runs, "DOE", |s| s.auroc_disjoint_maxlogit);
    let msp = median_of(runs, "DOE", |s| s.auroc_disjoint_msp);
    let pass = ml >= msp;
    report(8, "MaxLogit against MSP for DOE", pass, format!("disjoint AUROC median MaxLogit {ml:.4} MSP {msp:.4}"));
    assert!(pass);
}


/// The evaluation-level companion of criterion 8, on FPR95.
#[test]
fn doe_maxlogit_fpr95_is_not_above_msp() {
    let runs = gap_runs();
    let ml = median_of(runs, "DOE", |s| s.fpr_disjoint_maxlogit);
    let msp = median_of(runs, "DOE", |s| s.fpr_disjoint_msp);
    assert!(ml <= msp, "MaxLogit {ml} vs MSP {msp}");
}
