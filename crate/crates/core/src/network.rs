//! Bias-free fully connected ReLU networks and weight-space perturbations.
//!
//! Layer `l` holds `W_l` of shape `n_l × n_{l-1}`; a batch of row inputs `X`
//! maps to `relu(X W_1ᵀ)`, and so on, with no activation after the last layer
//! so the network emits signed logits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: &str = "DOE-NET-v1";

/// Global Frobenius norm tolerance used by the unit-norm contract.
pub const NORM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ReluNet {
    weights: Vec<Matrix>,
}

/// Perturbation strength `α ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct PerturbationStrength(f64);

impl PerturbationStrength {
    pub const ZERO: Self = Self(0.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid(format!("perturbation strength must be finite and >= 0, got {alpha}")));
        }
        Ok(Self(alpha))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PerturbationStrength {
    type Error = Error;

    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationMode {
    /// `W_l + α P_l`, `P_l` shaped like `W_l`.
    Additive,
    /// `W_l (I + α A_l)`, `A_l` square of the layer's input width.
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    layers: Vec<Matrix>,
    mode: PerturbationMode,
}

impl ReluNet {
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (l, pair) in weights.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::Shape {
                    op: "ReluNet::new",
                    detail: format!(
                        "layer {} has {} inputs but layer {} has {} outputs",
                        l + 2,
                        pair[1].cols(),
                        l + 1,
                        pair[0].rows()
                    ),
                });
            }
        }
        if weights.iter().any(|w| w.is_empty()) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(Self { weights })
    }

    /// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))` per layer.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        let weights = widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                Matrix::from_fn(n_out, n_in, |_, _| dist.sample(rng))
            })
            .collect();
        Self::new(weights)
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<Matrix> {
        self.weights
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// `n_0, …, n_L`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.weights[0].cols())
            .chain(self.weights.iter().map(Matrix::rows))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn num_classes(&self) -> usize {
        self.weights[self.weights.len() - 1].rows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("input width {} but network expects {}", x.cols(), self.input_dim()),
            });
        }
        Ok(())
    }

    /// Logits for a batch of row inputs.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        forward_weights(&self.weights, x)
    }

    /// `σ · h_{W+αP}(x)`.
    pub fn forward_additive(
        &self,
        p: &Perturbation,
        alpha: PerturbationStrength,
        sigma: f64,
        x: &Matrix,
    ) -> Result<Matrix> {
        self.check_input(x)?;
        let perturbed = self.with_additive(p, alpha)?;
        Ok(forward_weights(&perturbed.weights, x)?.scale(sigma))
    }

    /// Forward pass with every `W_l` replaced by `W_l (I + α A_l)`.
    pub fn forward_multiplicative(
        &self,
        a: &Perturbation,
        alpha: PerturbationStrength,
        x: &Matrix,
    ) -> Result<Matrix> {
        self.check_input(x)?;
        let perturbed = self.with_multiplicative(a, alpha)?;
        forward_weights(&perturbed.weights, x)
    }

    /// The network with weights `W + αP`.
    pub fn with_additive(&self, p: &Perturbation, alpha: PerturbationStrength) -> Result<ReluNet> {
        p.check_compatible(self, PerturbationMode::Additive)?;
        let alpha = alpha.get();
        let weights = self
            .weights
            .iter()
            .zip(&p.layers)
            .map(|(w, pl)| w.zip_map(pl, "additive perturbation", |w, p| w + alpha * p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights })
    }

    /// The network with weights `W_l (I + α A_l)`.
    pub fn with_multiplicative(&self, a: &Perturbation, alpha: PerturbationStrength) -> Result<ReluNet> {
        a.check_compatible(self, PerturbationMode::Multiplicative)?;
        let alpha = alpha.get();
        let weights = self
            .weights
            .iter()
            .zip(&a.layers)
            .map(|(w, al)| {
                let n = al.rows();
                let m = Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } + alpha * al.get(r, c));
                w.matmul(&m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
    }

    /// Writes the `DOE-NET-v1` text checkpoint.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let widths = self.widths();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(out, "layers {}", self.depth()).unwrap();
        let w: Vec<String> = widths.iter().map(usize::to_string).collect();
        writeln!(out, "widths {}", w.join(" ")).unwrap();
        for (l, w) in self.weights.iter().enumerate() {
            writeln!(out, "layer {} {} {}", l + 1, w.rows(), w.cols()).unwrap();
            for row in w.row_iter() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{}", vals.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_checkpoint_str(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
        };

        let (ln, magic) = next("magic header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(err(ln, format!("expected `{CHECKPOINT_MAGIC}`, found `{magic}`")));
        }
        let (ln, layers_line) = next("layer count")?;
        let depth: usize = layers_line
            .strip_prefix("layers ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err(ln, "expected `layers <count>`".into()))?;
        let (ln, widths_line) = next("widths")?;
        let widths: Vec<usize> = widths_line
            .strip_prefix("widths ")
            .ok_or_else(|| err(ln, "expected `widths ...`".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(ln, format!("bad width `{t}`"))))
            .collect::<Result<_>>()?;
        if widths.len() != depth + 1 {
            return Err(err(ln, format!("{} widths for {depth} layers", widths.len())));
        }

        let mut weights = Vec::with_capacity(depth);
        for l in 0..depth {
            let (ln, header) = next("layer header")?;
            let expect = format!("layer {} {} {}", l + 1, widths[l + 1], widths[l]);
            if header != expect {
                return Err(err(ln, format!("expected `{expect}`, found `{header}`")));
            }
            let (rows, cols) = (widths[l + 1], widths[l]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = next("weight row")?;
                let before = data.len();
                for tok in row.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| err(ln, format!("bad number `{tok}`")))?;
                    if !v.is_finite() {
                        return Err(err(ln, format!("non-finite weight `{tok}`")));
                    }
                    data.push(v);
                }
                if data.len() - before != cols {
                    return Err(err(ln, format!("expected {cols} values, found {}", data.len() - before)));
                }
            }
            weights.push(Matrix::new(rows, cols, data)?);
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(err(ln, format!("trailing content `{extra}`")));
        }
        Self::new(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, path)
    }
}

fn forward_weights(weights: &[Matrix], x: &Matrix) -> Result<Matrix> {
    let last = weights.len() - 1;
    let mut z = x.clone();
    for (l, w) in weights.iter().enumerate() {
        z = z.matmul_t(w)?;
        if l < last {
            z = z.map(|v| v.max(0.0));
        }
    }
    Ok(z)
}

/// Records a forward pass on `tape` for weights already placed on it.
pub fn forward_on_tape(tape: &mut Tape, weights: &[Var], x: Var) -> Result<Var> {
    let last = weights.len().checked_sub(1).ok_or_else(|| Error::invalid("no layers"))?;
    let mut z = x;
    for (l, &w) in weights.iter().enumerate() {
        z = tape.matmul_t(z, w)?;
        if l < last {
            z = tape.relu(z);
        }
    }
    Ok(z)
}

impl Perturbation {
    pub fn new(layers: Vec<Matrix>, mode: PerturbationMode) -> Result<Self> {
        if mode == PerturbationMode::Multiplicative {
            if let Some((l, m)) = layers.iter().enumerate().find(|(_, m)| m.rows() != m.cols()) {
                return Err(Error::Shape {
                    op: "Perturbation::new",
                    detail: format!("multiplicative layer {} is {:?}, must be square", l + 1, m.shape()),
                });
            }
        }
        Ok(Self { layers, mode })
    }

    pub fn additive(layers: Vec<Matrix>) -> Self {
        Self {
            layers,
            mode: PerturbationMode::Additive,
        }
    }

    pub fn multiplicative(layers: Vec<Matrix>) -> Result<Self> {
        Self::new(layers, PerturbationMode::Multiplicative)
    }

    pub fn zeros_like(net: &ReluNet) -> Self {
        Self::additive(net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect())
    }

    pub fn ones_like(net: &ReluNet) -> Self {
        Self::additive(net.weights.iter().map(|w| Matrix::ones(w.rows(), w.cols())).collect())
    }

    /// Entries drawn from the standard normal distribution.
    pub fn gaussian_like<R: Rng + ?Sized>(net: &ReluNet, rng: &mut R) -> Self {
        Self::additive(
            net.weights
                .iter()
                .map(|w| Matrix::from_fn(w.rows(), w.cols(), |_, _| StandardNormal.sample(rng)))
                .collect(),
        )
    }

    /// Entries drawn uniformly from `[-1, 1]`.
    pub fn uniform_like<R: Rng + ?Sized>(net: &ReluNet, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-1.0, 1.0).expect("finite bounds");
        Self::additive(
            net.weights
                .iter()
                .map(|w| Matrix::from_fn(w.rows(), w.cols(), |_, _| dist.sample(rng)))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.layers
    }

    pub fn mode(&self) -> PerturbationMode {
        self.mode
    }

    /// Frobenius norm over all layers taken together.
    pub fn norm(&self) -> f64 {
        self.layers.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|m| m.data().iter().all(|v| *v == 0.0))
    }

    /// Rescales to unit global Frobenius norm.
    pub fn normalized(&self) -> Result<Self> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(Error::ZeroPerturbation);
        }
        if !norm.is_finite() {
            return Err(Error::invalid("perturbation has non-finite norm"));
        }
        Ok(Self {
            layers: self.layers.iter().map(|m| m.scale(1.0 / norm)).collect(),
            mode: self.mode,
        })
    }

    /// `self ← (1 − β) self + β other`.
    pub fn blend(&mut self, other: &Perturbation, beta: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() || self.mode != other.mode {
            return Err(Error::Shape {
                op: "blend",
                detail: "perturbations have different layouts".into(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            *a = a.zip_map(b, "blend", |a, b| (1.0 - beta) * a + beta * b)?;
        }
        Ok(())
    }

    fn check_compatible(&self, net: &ReluNet, mode: PerturbationMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::invalid(format!("expected a {mode:?} perturbation, got {:?}", self.mode)));
        }
        if self.layers.len() != net.depth() {
            return Err(Error::Shape {
                op: "perturbation",
                detail: format!("{} perturbation layers for a {}-layer network", self.layers.len(), net.depth()),
            });
        }
        for (l, (p, w)) in self.layers.iter().zip(&net.weights).enumerate() {
            let want = match mode {
                PerturbationMode::Additive => w.shape(),
                PerturbationMode::Multiplicative => (w.cols(), w.cols()),
            };
            if p.shape() != want {
                return Err(Error::Shape {
                    op: "perturbation",
                    detail: format!("layer {} is {:?}, expected {want:?}", l + 1, p.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Convenience for `Perturbation::normalized`.
pub fn normalize_perturbation(p: &Perturbation) -> Result<Perturbation> {
    p.normalized()
}
