use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{Perturbation, PerturbationStrength};

use super::variants::{
    AdversarialOe, Chi2Dro, CrossEntropyOnly, Doe, DoeRisk, FixedKind, FixedPerturbationOe, OutlierExposure,
    WassersteinDro,
};
use super::{StepBatch, TrainState, TrainerConfig};

/// The OOD part of a step's objective, with every non-weight quantity fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum OodTerm {
    /// No OOD term: plain cross-entropy.
    None,
    /// `L_OE` of the network with weights `W + αP`, or of the clean network.
    Oe(Option<(Perturbation, PerturbationStrength)>),
    /// `mean_i max(ℓ_OE,i − η, 0)²`.
    Chi2 { eta: f64 },
    /// `L_OE + γ · mean_i ‖∇_x ℓ_OE,i‖₂`.
    Wdro { gamma: f64 },
    /// `L_OE` on the OOD inputs shifted by `delta`.
    Adversarial { delta: Matrix },
}

/// A strategy's choice for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub term: OodTerm,
    pub alpha: Option<f64>,
    pub fallback: bool,
}

impl Prepared {
    pub fn plain_oe() -> Self {
        Self {
            term: OodTerm::Oe(None),
            alpha: None,
            fallback: false,
        }
    }
}

/// A training variant. Implementations choose the OOD term for a step; the
/// descent itself is shared.
pub trait Strategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Other names accepted by the registry.
    fn aliases(&self) -> &'static [&'static str] {
        &[]
    }

    /// Whether the warm-up epochs run plain OE before this strategy's own
    /// term takes over.
    fn uses_warmup(&self) -> bool {
        true
    }

    fn prepare(&self, state: &mut TrainState, batch: &StepBatch, cfg: &TrainerConfig) -> Result<Prepared>;
}

impl fmt::Debug for dyn Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Strategy({})", self.name())
    }
}

/// Strategies by name. Lookup ignores ASCII case.
#[derive(Clone, Default)]
pub struct StrategyRegistry {
    entries: BTreeMap<String, Arc<dyn Strategy>>,
    names: Vec<&'static str>,
}

impl fmt::Debug for StrategyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.names).finish()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Cross-entropy only, OE, and the nine perturbation / robust variants.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        let all: Vec<Arc<dyn Strategy>> = vec![
            Arc::new(CrossEntropyOnly),
            Arc::new(OutlierExposure),
            Arc::new(Doe),
            Arc::new(DoeRisk),
            Arc::new(FixedPerturbationOe(FixedKind::AllOnes)),
            Arc::new(FixedPerturbationOe(FixedKind::Gaussian)),
            Arc::new(FixedPerturbationOe(FixedKind::Uniform)),
            Arc::new(Chi2Dro),
            Arc::new(WassersteinDro),
            Arc::new(AdversarialOe),
        ];
        for s in all {
            r.register(s).expect("builtin names are distinct");
        }
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn Strategy>) -> Result<()> {
        let keys: Vec<String> = std::iter::once(strategy.name())
            .chain(strategy.aliases().iter().copied())
            .map(str::to_ascii_lowercase)
            .collect();
        if let Some(k) = keys.iter().find(|k| self.entries.contains_key(*k)) {
            return Err(Error::invalid(format!("strategy name `{k}` is already registered")));
        }
        for k in keys {
            self.entries.insert(k, strategy.clone());
        }
        self.names.push(strategy.name());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Strategy>> {
        self.entries
            .get(&name.to_ascii_lowercase())
            .cloned()
            .ok_or_else(|| Error::UnknownVariant(format!("{name} (known: {})", self.names.join(", "))))
    }

    /// Canonical names in registration order.
    pub fn names(&self) -> &[&'static str] {
        &self.names
    }
}
