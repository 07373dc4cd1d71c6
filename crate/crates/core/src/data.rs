//! Synthetic gap benchmark, CSV ingestion and seeded splitting.
//!
//! The gap benchmark places labeled ID clusters and two families of OOD
//! clusters on a ring. The surrogate OOD family (seen in training) sits in one
//! angular sector; the disjoint test family sits in a different sector and
//! shares no mixture component with it. An "overlap" test split is drawn from
//! the surrogate components themselves.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objectives::{LabeledBatch, UnlabeledBatch};

pub const OVERLAP_SPLIT: &str = "overlap";
pub const DISJOINT_SPLIT: &str = "disjoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    /// Angles (degrees) of the ID class means, one class per entry.
    pub id_angles_deg: Vec<f64>,
    pub surrogate_angles_deg: Vec<f64>,
    pub test_angles_deg: Vec<f64>,
    pub id_radius: f64,
    pub ood_radius: f64,
    pub cluster_std: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            id_angles_deg: vec![30.0, 70.0, 110.0, 150.0],
            surrogate_angles_deg: vec![220.0, 240.0],
            test_angles_deg: vec![280.0, 300.0],
            id_radius: 5.0,
            ood_radius: 5.0,
            cluster_std: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRole {
    Id,
    Surrogate,
    DisjointTest,
}

/// One Gaussian mixture component of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub role: ComponentRole,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Everything a training run and its evaluation consume.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub id_train: LabeledBatch,
    pub id_val: LabeledBatch,
    pub id_test: LabeledBatch,
    pub surrogate_ood: UnlabeledBatch,
    /// Held-out surrogate samples for model selection.
    pub val_ood: UnlabeledBatch,
    pub test_ood: Vec<(String, UnlabeledBatch)>,
}

impl Datasets {
    pub fn num_classes(&self) -> usize {
        self.id_train.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.id_train.inputs().cols()
    }

    pub fn test_split(&self, name: &str) -> Option<&UnlabeledBatch> {
        self.test_ood.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        let c = self.num_classes();
        if c < 2 {
            return Err(Error::invalid("need at least 2 ID classes"));
        }
        let labeled = [("id_val", &self.id_val), ("id_test", &self.id_test)];
        for (name, b) in labeled {
            if b.inputs().cols() != d || b.num_classes() != c {
                return Err(Error::invalid(format!("{name} does not match id_train's shape or class count")));
            }
        }
        let unlabeled = [("surrogate_ood", &self.surrogate_ood), ("val_ood", &self.val_ood)];
        for (name, b) in unlabeled.into_iter().chain(self.test_ood.iter().map(|(n, b)| (n.as_str(), b))) {
            if b.inputs().cols() != d {
                return Err(Error::invalid(format!(
                    "{name} has {} features, id_train has {d}",
                    b.inputs().cols()
                )));
            }
        }
        if self.test_ood.is_empty() {
            return Err(Error::invalid("at least one test OOD split is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapBenchmark {
    pub datasets: Datasets,
    pub components: Vec<Component>,
}

impl GapBenchmark {
    /// Smallest distance between a surrogate mean and a disjoint-test mean,
    /// in units of cluster standard deviation.
    pub fn min_surrogate_test_separation(&self) -> f64 {
        let of = |role| self.components.iter().filter(move |c| c.role == role);
        let mut best = f64::INFINITY;
        for s in of(ComponentRole::Surrogate) {
            for t in of(ComponentRole::DisjointTest) {
                let d: f64 = s.mean.iter().zip(&t.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                best = best.min(d / s.std.max(t.std));
            }
        }
        best
    }
}

fn ring_point(angle_deg: f64, radius: f64, dim: usize) -> Vec<f64> {
    let t = angle_deg.to_radians();
    let mut v = vec![0.0; dim];
    v[0] = radius * t.cos();
    v[1] = radius * t.sin();
    v
}

fn sample_mixture(rng: &mut ChaCha8Rng, comps: &[&Component], n: usize, dim: usize) -> (Matrix, Vec<usize>) {
    let mut data = Vec::with_capacity(n * dim);
    let mut which = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % comps.len();
        let c = comps[k];
        let noise = Normal::new(0.0, c.std).expect("positive std");
        data.extend(c.mean.iter().map(|&m| m + noise.sample(rng)));
        which.push(k);
    }
    (Matrix::from_raw(n, dim, data), which)
}

/// Builds the benchmark. Each split draws from its own seeded stream, so the
/// result is a pure function of `(seed, n_per_split, dim, config)`.
pub fn make_gap_benchmark(seed: u64, n_per_split: usize, dim: usize, config: &GapConfig) -> Result<GapBenchmark> {
    if dim < 2 {
        return Err(Error::invalid(format!("dimension must be >= 2, got {dim}")));
    }
    if n_per_split < 100 {
        return Err(Error::invalid(format!("n_per_split must be >= 100, got {n_per_split}")));
    }
    if config.id_angles_deg.len() < 2 {
        return Err(Error::invalid("need at least 2 ID classes"));
    }
    if config.surrogate_angles_deg.is_empty() || config.test_angles_deg.is_empty() {
        return Err(Error::invalid("need at least one surrogate and one test component"));
    }
    if config.cluster_std.is_nan() || config.cluster_std <= 0.0 {
        return Err(Error::invalid("cluster_std must be positive"));
    }

    let comp = |role, angle: &f64, radius| Component {
        role,
        mean: ring_point(*angle, radius, dim),
        std: config.cluster_std,
    };
    let mut components: Vec<Component> = Vec::new();
    components.extend(config.id_angles_deg.iter().map(|a| comp(ComponentRole::Id, a, config.id_radius)));
    components.extend(
        config
            .surrogate_angles_deg
            .iter()
            .map(|a| comp(ComponentRole::Surrogate, a, config.ood_radius)),
    );
    components.extend(
        config
            .test_angles_deg
            .iter()
            .map(|a| comp(ComponentRole::DisjointTest, a, config.ood_radius)),
    );
    let role = |r| components.iter().filter(|c| c.role == r).collect::<Vec<_>>();
    let (id, sur, test) = (
        role(ComponentRole::Id),
        role(ComponentRole::Surrogate),
        role(ComponentRole::DisjointTest),
    );
    let classes = id.len();

    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let labeled = |k| -> Result<LabeledBatch> {
        let (x, y) = sample_mixture(&mut stream(k), &id, n_per_split, dim);
        LabeledBatch::new(x, y, classes)
    };
    let unlabeled = |k, comps: &[&Component]| UnlabeledBatch::new(sample_mixture(&mut stream(k), comps, n_per_split, dim).0);

    let datasets = Datasets {
        id_train: labeled(1)?,
        id_val: labeled(2)?,
        id_test: labeled(3)?,
        surrogate_ood: unlabeled(4, &sur)?,
        val_ood: unlabeled(5, &sur)?,
        test_ood: vec![
            (OVERLAP_SPLIT.to_string(), unlabeled(6, &sur)?),
            (DISJOINT_SPLIT.to_string(), unlabeled(7, &test)?),
        ],
    };
    Ok(GapBenchmark { datasets, components })
}

/// A CSV dataset on disk: header `f0,…,f{d-1}` plus `label` when labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub feature_dim: Option<usize>,
    pub labeled: bool,
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LoadedData {
    Labeled(LabeledBatch),
    Unlabeled(UnlabeledBatch),
}

pub fn save_csv(path: &Path, inputs: &Matrix, labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..inputs.cols()).map(|i| format!("f{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (r, row) in inputs.row_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        if let Some(l) = labels {
            rec.push(l[r].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_csv(file: &DatasetFile) -> Result<LoadedData> {
    let path = &file.path;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_col = header.iter().position(|h| h == "label");
    if file.labeled && label_col.is_none() {
        return Err(parse_err(1, "labels declared but column `label` is missing".into()));
    }
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&i| Some(i) != label_col).collect();
    for (k, &i) in feature_cols.iter().enumerate() {
        if header[i] != format!("f{k}") {
            return Err(parse_err(1, format!("column {} is `{}`, expected `f{k}`", i + 1, header[i])));
        }
    }
    let dim = feature_cols.len();
    if let Some(want) = file.feature_dim {
        if want != dim {
            return Err(parse_err(1, format!("{dim} feature columns, expected {want}")));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("{} fields, header has {}", rec.len(), header.len())));
        }
        for &i in &feature_cols {
            let cell = rec[i].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column {} (`{}`): not a number: `{cell}`", i + 1, header[i])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {} (`{}`): non-finite value", i + 1, header[i])));
            }
            data.push(v);
        }
        if file.labeled {
            let i = label_col.expect("checked above");
            let cell = rec[i].trim();
            let l: usize = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column {} (`label`): invalid label `{cell}`", i + 1)))?;
            if let Some(c) = file.num_classes {
                if l >= c {
                    return Err(parse_err(line, format!("column {} (`label`): {l} outside [0, {c})", i + 1)));
                }
            }
            labels.push(l);
        }
        rows += 1;
    }
    let inputs = Matrix::new(rows, dim, data)?;
    if file.labeled {
        let classes = file
            .num_classes
            .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Ok(LoadedData::Labeled(LabeledBatch::new(inputs, labels, classes)?))
    } else {
        Ok(LoadedData::Unlabeled(UnlabeledBatch::new(inputs)?))
    }
}

/// Largest-remainder allocation of `total_a` over groups of the given sizes.
fn allocate(sizes: &[usize], fraction: f64, total_a: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut remaining = total_a.saturating_sub(take.iter().sum());
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if remaining == 0 {
            break;
        }
        if take[g] < sizes[g] {
            take[g] += 1;
            remaining -= 1;
        }
    }
    take
}

fn check_fraction(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let a = (fraction * n as f64).round() as usize;
    if a == 0 || a == n {
        return Err(Error::invalid(format!("fraction {fraction} of {n} rows leaves an empty part")));
    }
    Ok(a)
}

/// Stratified seeded split: each class contributes within one sample of its
/// proportional share to the first part.
pub fn split_labeled(batch: &LabeledBatch, fraction: f64, seed: u64) -> Result<(LabeledBatch, LabeledBatch)> {
    let total_a = check_fraction(fraction, batch.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in batch.labels().iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_class.into_values().collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let take = allocate(&sizes, fraction, total_a);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (mut g, k) in groups.into_iter().zip(take) {
        g.shuffle(&mut rng);
        a.extend_from_slice(&g[..k]);
        b.extend_from_slice(&g[k..]);
    }
    a.shuffle(&mut rng);
    b.shuffle(&mut rng);
    Ok((batch.select(&a), batch.select(&b)))
}

pub fn split_unlabeled(batch: &UnlabeledBatch, fraction: f64, seed: u64) -> Result<(UnlabeledBatch, UnlabeledBatch)> {
    let total_a = check_fraction(fraction, batch.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(&mut rng);
    Ok((batch.select(&idx[..total_a]), batch.select(&idx[total_a..])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    IdTrain,
    IdVal,
    IdTest,
    SurrogateOod,
    ValOod,
    TestOod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub role: SplitRole,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub labeled: bool,
}

/// JSON file naming each split's CSV file and role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub splits: Vec<ManifestEntry>,
}

impl DataManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, base: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        }
    }

    /// Loads every split; exactly one of each single-valued role is required.
    pub fn load_datasets(&self, manifest_path: &Path) -> Result<Datasets> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut labeled: BTreeMap<&str, LabeledBatch> = BTreeMap::new();
        let mut unlabeled: BTreeMap<&str, UnlabeledBatch> = BTreeMap::new();
        let mut test_ood = Vec::new();
        for e in &self.splits {
            let file = DatasetFile {
                path: self.resolve(base, e),
                feature_dim: Some(self.feature_dim),
                labeled: e.labeled,
                num_classes: Some(self.num_classes),
            };
            let loaded = load_csv(&file)?;
            let key = match e.role {
                SplitRole::IdTrain => "id_train",
                SplitRole::IdVal => "id_val",
                SplitRole::IdTest => "id_test",
                SplitRole::SurrogateOod => "surrogate_ood",
                SplitRole::ValOod => "val_ood",
                SplitRole::TestOod => "",
            };
            match (e.role, loaded) {
                (SplitRole::TestOod, LoadedData::Unlabeled(b)) => test_ood.push((e.name.clone(), b)),
                (SplitRole::IdTrain | SplitRole::IdVal | SplitRole::IdTest, LoadedData::Labeled(b)) => {
                    if labeled.insert(key, b).is_some() {
                        return Err(Error::invalid(format!("duplicate {key} split in manifest")));
                    }
                }
                (SplitRole::SurrogateOod | SplitRole::ValOod, LoadedData::Unlabeled(b)) => {
                    if unlabeled.insert(key, b).is_some() {
                        return Err(Error::invalid(format!("duplicate {key} split in manifest")));
                    }
                }
                (role, _) => {
                    return Err(Error::invalid(format!("split `{}` has role {role:?} but labeled = {}", e.name, e.labeled)))
                }
            }
        }
        let mut take_l = |k: &str| labeled.remove(k).ok_or_else(|| Error::invalid(format!("manifest lacks a {k} split")));
        let (id_train, id_val, id_test) = (take_l("id_train")?, take_l("id_val")?, take_l("id_test")?);
        let mut take_u = |k: &str| unlabeled.remove(k).ok_or_else(|| Error::invalid(format!("manifest lacks a {k} split")));
        let (surrogate_ood, val_ood) = (take_u("surrogate_ood")?, take_u("val_ood")?);
        let ds = Datasets {
            id_train,
            id_val,
            id_test,
            surrogate_ood,
            val_ood,
            test_ood,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Writes every split as CSV under `dir` plus `manifest.json`; returns the
/// manifest path.
pub fn write_datasets(ds: &Datasets, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = Vec::new();
    let mut put_l = |name: &str, role, b: &LabeledBatch| -> Result<()> {
        let file = format!("{name}.csv");
        save_csv(&dir.join(&file), b.inputs(), Some(b.labels()))?;
        splits.push(ManifestEntry {
            name: name.into(),
            role,
            path: file.into(),
            labeled: true,
        });
        Ok(())
    };
    put_l("id_train", SplitRole::IdTrain, &ds.id_train)?;
    put_l("id_val", SplitRole::IdVal, &ds.id_val)?;
    put_l("id_test", SplitRole::IdTest, &ds.id_test)?;
    let mut put_u = |name: &str, role, b: &UnlabeledBatch| -> Result<()> {
        let file = format!("{name}.csv");
        save_csv(&dir.join(&file), b.inputs(), None)?;
        splits.push(ManifestEntry {
            name: name.into(),
            role,
            path: file.into(),
            labeled: false,
        });
        Ok(())
    };
    put_u("surrogate_ood", SplitRole::SurrogateOod, &ds.surrogate_ood)?;
    put_u("val_ood", SplitRole::ValOod, &ds.val_ood)?;
    for (name, b) in &ds.test_ood {
        put_u(&format!("test_{name}"), SplitRole::TestOod, b)?;
    }
    for e in splits.iter_mut().filter(|e| e.role == SplitRole::TestOod) {
        e.name = e.name.trim_start_matches("test_").to_string();
    }
    let manifest = DataManifest {
        feature_dim: ds.feature_dim(),
        num_classes: ds.num_classes(),
        splits,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
