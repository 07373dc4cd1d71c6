use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use doe_core::data::{write_datasets, DataManifest, Datasets};
use doe_core::detection::{DetectionReport, ScoreSeries, Scorer};
use doe_core::theory::{certify, CompositionRule};
use doe_core::trainers::run_experiment;
use doe_core::ReluNet;
use rayon::prelude::*;
use serde_json::json;

use crate::error::CliError;
use crate::report::{histogram_csv, ReportTable, RunReport, SplitReport};
use crate::spec::{grid_cells, preset, ExperimentSpec, GridAxis, PRESETS};

type CmdResult = Result<(), CliError>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Scores the ID test split against every test OOD split.
pub fn evaluate(
    net: &ReluNet,
    data: &Datasets,
    scorer: Scorer,
    bins: usize,
    variant: &str,
    seed: u64,
) -> anyhow::Result<RunReport> {
    if net.input_dim() != data.feature_dim() || net.num_classes() != data.num_classes() {
        return Err(anyhow!(
            "checkpoint maps {} → {} but the data has {} features and {} classes",
            net.input_dim(),
            net.num_classes(),
            data.feature_dim(),
            data.num_classes()
        ));
    }
    let id = net.forward(data.id_test.inputs())?;
    let correct = id
        .row_iter()
        .zip(data.id_test.labels())
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
            best == Some(y)
        })
        .count();
    let mut splits = Vec::new();
    for (name, batch) in &data.test_ood {
        let series = ScoreSeries::from_logits(&id, &net.forward(batch.inputs())?, scorer)?;
        splits.push(SplitReport {
            split: name.clone(),
            report: DetectionReport::from_series(&series, bins)?,
        });
    }
    Ok(RunReport {
        variant: variant.to_string(),
        seed,
        scorer,
        id_accuracy: correct as f64 / data.id_test.len() as f64,
        splits,
    })
}

fn write_histograms(run: &RunReport, dir: &Path) -> anyhow::Result<()> {
    for s in &run.splits {
        write(&dir.join(format!("{}.csv", file_stem(&s.split))), s.report.histogram_csv())?;
    }
    Ok(())
}

pub fn train(spec_path: &Path, seed: Option<u64>, out: &Path) -> CmdResult {
    let spec = ExperimentSpec::load(spec_path)?;
    let seed = seed.unwrap_or(spec.trainer.seed);
    let spec = spec.with_seed(seed);
    let (data, components) = spec.datasets()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.resolved.toml"), spec.to_toml())?;
    let manifest = match (&spec.data.manifest, components) {
        (Some(m), _) => m.clone(),
        (None, components) => {
            let m = write_datasets(&data, &out.join("data"))?;
            write(&out.join("data/components.json"), serde_json::to_string_pretty(&components)?)?;
            m
        }
    };

    let outcome = run_experiment(&spec.trainer, &spec.model.hidden, &data)?;
    let ckpt = out.join("model.ckpt");
    outcome.net.save(&ckpt)?;
    let mut history = String::new();
    for rec in &outcome.history {
        history.push_str(&serde_json::to_string(rec)?);
        history.push('\n');
    }
    write(&out.join("history.jsonl"), history)?;

    let run = evaluate(&outcome.net, &data, spec.eval.scorer, spec.eval.bins, &spec.trainer.variant, seed)?;
    write(&out.join("eval.json"), serde_json::to_string_pretty(&run)?)?;
    write_histograms(&run, &out.join("hist"))?;

    let splits: serde_json::Map<String, serde_json::Value> = run
        .splits
        .iter()
        .map(|s| (s.split.clone(), json!({"fpr95": s.report.fpr95, "auroc": s.report.auroc})))
        .collect();
    println!(
        "{}",
        json!({
            "variant": spec.trainer.variant,
            "seed": seed,
            "checkpoint": ckpt,
            "manifest": manifest,
            "fallback_steps": outcome.fallback_steps,
            "id_accuracy": run.id_accuracy,
            "splits": splits,
        })
    );
    Ok(())
}

/// Variant and seed recorded next to a checkpoint by `train`.
fn sibling_labels(checkpoint: &Path) -> (Option<String>, Option<u64>) {
    let path = checkpoint.with_file_name("config.resolved.toml");
    let Ok(text) = fs::read_to_string(path) else {
        return (None, None);
    };
    let Ok(table) = toml::from_str::<toml::Table>(&text) else {
        return (None, None);
    };
    let trainer = table.get("trainer");
    let variant = trainer.and_then(|t| t.get("variant")).and_then(|v| v.as_str()).map(String::from);
    let seed = trainer.and_then(|t| t.get("seed")).and_then(|v| v.as_integer()).map(|s| s as u64);
    (variant, seed)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub scorer: Scorer,
    pub bins: usize,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub hist_dir: Option<&'a Path>,
}

pub fn eval(args: EvalArgs<'_>) -> CmdResult {
    let net = ReluNet::load(args.checkpoint)?;
    let data = DataManifest::load(args.manifest)?.load_datasets(args.manifest)?;
    let (v, s) = sibling_labels(args.checkpoint);
    let variant = args.variant.or(v).unwrap_or_else(|| "unknown".into());
    let seed = args.seed.or(s).unwrap_or(0);
    let run = evaluate(&net, &data, args.scorer, args.bins, &variant, seed)?;
    let text = serde_json::to_string_pretty(&run)?;
    match args.out {
        Some(p) => write(p, &text)?,
        None => println!("{text}"),
    }
    if let Some(dir) = args.hist_dir {
        write_histograms(&run, dir)?;
    }
    Ok(())
}

fn thread_pool() -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DOE_LAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("DOE_LAB_THREADS must be a positive integer, got `{v}`"))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn cell_label(spec: &ExperimentSpec, cell: &[(String, String)]) -> String {
    let rest: Vec<String> = cell
        .iter()
        .filter(|(k, _)| k != "variant" && k != "trainer.variant")
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if rest.is_empty() {
        spec.trainer.variant.clone()
    } else {
        format!("{} {}", spec.trainer.variant, rest.join(" "))
    }
}

pub fn ablate(spec_path: &Path, grid: &[GridAxis], seeds: Option<Vec<u64>>, out: Option<&Path>) -> CmdResult {
    if grid.is_empty() {
        return Err(CliError::spec("the grid is empty; pass at least one --grid key=v1,v2"));
    }
    let base = ExperimentSpec::load(spec_path)?;
    // Every cell is resolved before any training so a bad key fails fast.
    let mut cells = Vec::new();
    for cell in grid_cells(grid) {
        let mut spec = base.clone();
        for (k, v) in &cell {
            spec = spec.with_override(k, v)?;
        }
        spec.validate()?;
        cells.push((cell_label(&spec, &cell), spec));
    }
    let seeds = seeds.unwrap_or_else(|| base.eval.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::spec("no seeds to sweep"));
    }
    let jobs: Vec<(&str, &ExperimentSpec, u64)> = cells
        .iter()
        .flat_map(|(label, spec)| seeds.iter().map(move |&s| (label.as_str(), spec, s)))
        .collect();

    let runs: Vec<anyhow::Result<RunReport>> = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(label, spec, seed)| {
                let spec = spec.clone().with_seed(seed);
                let (data, _) = spec.datasets()?;
                let outcome = run_experiment(&spec.trainer, &spec.model.hidden, &data)
                    .with_context(|| format!("cell `{label}`, seed {seed}"))?;
                evaluate(&outcome.net, &data, spec.eval.scorer, spec.eval.bins, label, seed)
            })
            .collect()
    });
    let mut table = ReportTable::default();
    for run in runs {
        table.add_run(&run?)?;
    }
    print!("{}", table.to_csv());
    if let Some(dir) = out {
        write(&dir.join("rows.csv"), table.to_csv())?;
        write(&dir.join("summary.csv"), table.summary_csv())?;
        write(&dir.join("summary.md"), table.to_markdown())?;
    }
    Ok(())
}

pub fn verify(trials: usize, seed: u64, faulty: bool) -> CmdResult {
    if trials == 0 {
        return Err(CliError::spec("--trials must be at least 1"));
    }
    let rule = if faulty { CompositionRule::IgnoreUpper } else { CompositionRule::Standard };
    let summary = certify(trials, seed, rule)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if summary.pass {
        Ok(())
    } else {
        let failed: Vec<&str> = summary.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        Err(CliError::Verification(format!("failed checks: {}", failed.join(", "))))
    }
}

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> CmdResult {
    if inputs.is_empty() {
        return Err(anyhow!("no report inputs given").into());
    }
    let mut table = ReportTable::default();
    let mut runs = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "csv") {
            for row in ReportTable::from_csv(&text).with_context(|| path.display().to_string())?.rows() {
                table.insert(row.clone()).with_context(|| path.display().to_string())?;
            }
        } else {
            let run: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            table.add_run(&run).with_context(|| path.display().to_string())?;
            runs.push(run);
        }
    }
    if table.is_empty() {
        return Err(anyhow!("the inputs contain no rows").into());
    }
    let md = table.to_markdown();
    print!("{md}");
    if let Some(dir) = out {
        write(&dir.join("report.md"), &md)?;
        write(&dir.join("summary.csv"), table.summary_csv())?;
        let mut keys: Vec<(&str, &str)> = runs
            .iter()
            .flat_map(|r| r.splits.iter().map(move |s| (r.variant.as_str(), s.split.as_str())))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        for (variant, split) in keys {
            let of_variant: Vec<&RunReport> = runs.iter().filter(|r| r.variant == variant).collect();
            let name = format!("{}__{}.csv", file_stem(variant), file_stem(split));
            write(&dir.join("hist").join(name), histogram_csv(&of_variant, split))?;
        }
    }
    Ok(())
}

pub fn generate(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> CmdResult {
    let spec = match spec_path {
        Some(p) => ExperimentSpec::load(p)?,
        None => crate::spec::desk_defaults(),
    };
    if spec.data.manifest.is_some() {
        return Err(CliError::spec("the spec reads a manifest; nothing to generate"));
    }
    let seed = seed.unwrap_or(spec.trainer.seed);
    let spec = spec.with_seed(seed);
    let (data, components) = spec.datasets()?;
    let manifest = write_datasets(&data, out)?;
    write(&out.join("components.json"), serde_json::to_string_pretty(&components)?)?;
    println!("{}", json!({"manifest": manifest, "seed": spec.data.seed}));
    Ok(())
}

pub fn show_preset(name: Option<&str>) -> CmdResult {
    match name {
        None => {
            let mut out = std::io::stdout().lock();
            for (n, _) in PRESETS {
                writeln!(out, "{n}").map_err(anyhow::Error::from)?;
            }
            Ok(())
        }
        Some(n) => {
            let text = preset(n).ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                CliError::spec(format!("unknown preset `{n}` (available: {})", names.join(", ")))
            })?;
            print!("{text}");
            Ok(())
        }
    }
}
