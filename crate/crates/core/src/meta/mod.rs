//! Sparse meta-learning: MAML with MetaSGD rates and hard-concrete gates
//! learned in the outer loop.
//!
//! Three modes share one code path:
//!
//! * [`Mode::DenseMaml`]: every weight and bias is adapted per signal.
//! * [`Mode::UnstructuredGradients`]: inner-loop gradients are multiplied by
//!   per-parameter gates, so the per-signal update `δθ` is sparse.
//! * [`Mode::StructuredModulations`]: only hidden-layer shift modulations are
//!   adapted, through per-unit gates; `θ0` is shared.
//!
//! A fitted signal is described by a [`SparseDelta`], which the codec turns
//! into a bitstream.

mod adam;
mod baselines;
mod fit;
mod inner;
mod outer;
mod prune;
mod report;
mod state;

use std::fmt;
use std::str::FromStr;

pub use adam::Adam;
pub use baselines::{baseline_suite, dense_narrow_width, lambda_sweep, random_mask, rows_csv, Baseline, BaselineOptions, BaselineRow};
pub use fit::{evaluate_psnr, fit_signal, FitOptimizer, FitOptions, FitResult};
pub use inner::{inner_loop, Adaptation};
pub use outer::{meta_train, meta_train_budgeted, meta_train_with, outer_gradient, outer_step, thread_pool, LogRecord, OuterGradient, StepMetrics};
pub use prune::{imp_schedule, magnitude_prune};
pub use report::{report_csv, sparsity_pattern_report, LayerSparsity};
pub use state::{MetaState, SlotInfo};

use crate::gates::{GateError, HardConcrete};
use crate::inr::{InrError, LossReduction};
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{steps} inner steps exceed the unroll budget of {budget}")]
    UnrollBudget { steps: usize, budget: usize },
    #[error("signal {index} ({id}): {source}")]
    Signal {
        index: usize,
        id: String,
        #[source]
        source: Box<MetaError>,
    },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("signal does not match the network: {0}")]
    Modality(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("delta does not belong to this state")]
    Fingerprint,
    #[error(transparent)]
    Inr(#[from] InrError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for MetaError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => MetaError::NonFiniteLoss,
            other => MetaError::Tensor(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, MetaError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    DenseMaml,
    UnstructuredGradients,
    StructuredModulations,
}

impl Mode {
    pub fn tag(self) -> u8 {
        match self {
            Mode::DenseMaml => 0,
            Mode::UnstructuredGradients => 1,
            Mode::StructuredModulations => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Mode> {
        match tag {
            0 => Some(Mode::DenseMaml),
            1 => Some(Mode::UnstructuredGradients),
            2 => Some(Mode::StructuredModulations),
            _ => None,
        }
    }

    /// Default MetaSGD initialisation range.
    pub fn metasgd_init(self) -> (f64, f64) {
        match self {
            Mode::StructuredModulations => (0.005, 0.1),
            _ => (0.001, 0.05),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::DenseMaml => "dense",
            Mode::UnstructuredGradients => "unstructured",
            Mode::StructuredModulations => "structured",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dense" => Ok(Mode::DenseMaml),
            "unstructured" => Ok(Mode::UnstructuredGradients),
            "structured" => Ok(Mode::StructuredModulations),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Meta-training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Inner steps `T`.
    pub inner_steps: usize,
    /// Scalar inner learning rate, used when MetaSGD is off and for inner
    /// updates of `log α`.
    pub inner_lr: f64,
    pub use_metasgd: bool,
    /// Uniform range for MetaSGD rates; `None` picks the mode default.
    pub metasgd_init: Option<(f64, f64)>,
    pub outer_lr: f64,
    /// Multiplier on `outer_lr` for `log α`.
    pub log_alpha_lr_factor: f64,
    pub log_alpha_init: f64,
    /// L0 coefficient.
    pub lambda: f64,
    pub batch_size: usize,
    /// Monte-Carlo gate samples per signal and step.
    pub mc_samples: usize,
    pub adapt_gates_in_inner: bool,
    pub sparsify_biases: bool,
    /// Drop second-order terms from the outer gradient.
    pub first_order: bool,
    pub loss: LossReduction,
    pub hard_concrete: HardConcrete,
    /// Global gradient-norm clip on outer updates; `None` disables.
    pub grad_clip: Option<f64>,
    pub divergence_threshold: f64,
    /// Largest `T` the inner loop will unroll.
    pub unroll_budget: usize,
    /// Number of gates kept at evaluation (top-k by `log α`).
    pub budget: Option<usize>,
    /// Outer steps run by [`meta_train`].
    pub outer_steps: usize,
    /// Held-out evaluation period; 0 evaluates only at the start and end.
    pub eval_every: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_steps: 2,
            inner_lr: 1e-2,
            use_metasgd: true,
            metasgd_init: None,
            outer_lr: 1e-4,
            log_alpha_lr_factor: 10.0,
            log_alpha_init: 2.0,
            lambda: 0.01,
            batch_size: 3,
            mc_samples: 1,
            adapt_gates_in_inner: false,
            sparsify_biases: true,
            first_order: false,
            loss: LossReduction::Mean,
            hard_concrete: HardConcrete::default(),
            grad_clip: Some(1.0),
            divergence_threshold: 1e6,
            unroll_budget: 16,
            budget: None,
            outer_steps: 1000,
            eval_every: 100,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MetaError::Config(m.to_string()));
        if self.inner_steps == 0 {
            return fail("inner_steps must be at least 1");
        }
        if self.inner_steps > self.unroll_budget {
            return Err(MetaError::UnrollBudget {
                steps: self.inner_steps,
                budget: self.unroll_budget,
            });
        }
        if !(self.lambda >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.outer_lr > 0.0) || !(self.inner_lr >= 0.0) || !(self.log_alpha_lr_factor >= 0.0) {
            return fail("learning rates must be non-negative and outer_lr positive");
        }
        if let Some((lo, hi)) = self.metasgd_init {
            if !(0.0..=1.0).contains(&lo) || !(lo <= hi && hi <= 1.0) {
                return fail("metasgd_init must lie in [0, 1]");
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip must be positive");
            }
        }
        self.hard_concrete.validate()?;
        Ok(())
    }
}

/// Per-signal payload: values at a strictly increasing list of flat indices.
///
/// Indices address `θ` in layout order for gradient modes and the
/// concatenated modulations for structured mode. Structured values are the
/// gated shifts `z⊙m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta {
    pub mode: Mode,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
    /// Fingerprint of the originating [`MetaState`] checkpoint.
    pub fingerprint: u64,
}

impl SparseDelta {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(MetaError::Config("index and value counts differ".into()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetaError::Config("indices must be strictly increasing".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(MetaError::Config("non-finite delta value".into()));
        }
        Ok(())
    }
}

/// Mixes two words into a seed (splitmix64 finaliser).
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
