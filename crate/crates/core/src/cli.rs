//! Run configuration files and the commands behind the `mscn` binary.
//!
//! A run is described by one text file of `key = value` lines (`#` starts a
//! comment). Every key is listed in [`SCHEMA`]; unknown or repeated keys are
//! errors. Command-line overrides use the same keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::codec::{bits_per_pixel, bits_per_pixel_values, decompress_to_signal, encode, CodecError, CompressedBlob};
use crate::gates::HardConcrete;
use crate::inr::{Dtype, LossReduction, SirenConfig};
use crate::meta::{
    baseline_suite, fit_signal, lambda_sweep, meta_train_budgeted, report_csv, rows_csv, sparsity_pattern_report, Baseline,
    BaselineOptions, FitOptimizer, FitOptions, MetaConfig, MetaError, MetaState, Mode,
};
use crate::signals::{load_image, make_grid, read_manifest, save_image, synth_dataset, Modality, Signal, SignalError, SynthKind};
use crate::tensor::{Real, Tensor};

/// `(key, default, description)` for every configuration key. An empty
/// default means the key is optional with no value.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("output", "out", "directory for all artifacts"),
    ("precision", "32", "engine precision, 32 or 64"),
    ("seed", "0", "seed for initialisation, batches and gate noise"),
    ("seeds", "0,1,2", "seeds averaged over by `sweep`"),
    ("data.source", "synth", "`synth` or `manifest`"),
    ("data.synth", "gabor_mix", "synthetic family: gabor_mix, sine_mix, blob_sdf, sphere_field, voxel_shapes"),
    ("data.count", "40", "number of synthetic signals"),
    ("data.dims", "32x32", "synthetic grid, e.g. 32x32 or 16x16x16"),
    ("data.seed", "0", "seed of the synthetic generator"),
    ("data.manifest", "", "index.csv of a manifest dataset"),
    ("data.heldout", "8", "trailing signals held out for evaluation"),
    ("siren.depth", "4", "number of layers"),
    ("siren.width", "64", "hidden units"),
    ("siren.omega0", "30", "frequency scale"),
    ("meta.mode", "structured", "dense, unstructured or structured"),
    ("meta.inner_steps", "2", "inner-loop steps"),
    ("meta.inner_lr", "0.01", "inner learning rate without MetaSGD"),
    ("meta.use_metasgd", "true", "learn per-entry inner learning rates"),
    ("meta.metasgd_min", "", "lower end of the MetaSGD init range (mode default when unset)"),
    ("meta.metasgd_max", "", "upper end of the MetaSGD init range"),
    ("meta.outer_lr", "0.0001", "outer Adam learning rate"),
    ("meta.log_alpha_lr_factor", "10", "multiplier on outer_lr for log alpha"),
    ("meta.log_alpha_init", "2", "initial log alpha"),
    ("meta.lambda", "0.01", "L0 penalty coefficient"),
    ("meta.batch_size", "3", "signals per outer step"),
    ("meta.mc_samples", "1", "gate samples per signal and step"),
    ("meta.adapt_gates_in_inner", "false", "adapt log alpha in the inner loop"),
    ("meta.sparsify_biases", "true", "gate biases as well as weights"),
    ("meta.first_order", "false", "drop second-order terms"),
    ("meta.loss", "mean", "`mean` or `sum` squared error"),
    ("meta.grad_clip", "1", "global outer gradient-norm clip, or `none`"),
    ("meta.divergence_threshold", "1e6", "task loss that halts training"),
    ("meta.unroll_budget", "16", "largest inner_steps accepted"),
    ("meta.budget", "", "number of gates kept at evaluation"),
    ("meta.outer_steps", "1000", "outer steps"),
    ("meta.eval_every", "100", "held-out evaluation period, 0 for start and end only"),
    ("fit.optimizer", "metasgd", "`metasgd` (the inner loop) or `adam`"),
    ("fit.steps", "", "test-time steps (inner_steps when unset)"),
    ("fit.lr", "", "test-time learning rate (inner_lr when unset)"),
    ("codec.bits", "16", "value bit depth, 16 or 32"),
    ("sweep.lambdas", "", "lambda values for a lambda sweep"),
    ("sweep.sparsities", "", "sparsity grid for a sparsity sweep"),
    ("sweep.methods", "all", "baselines to run, or `all`"),
    ("sweep.imp_rounds", "3", "rounds of iterative magnitude pruning"),
    ("sweep.scratch_steps", "100", "Adam steps for the from-scratch baseline"),
    ("sweep.scratch_lr", "0.001", "learning rate for the from-scratch baseline"),
    ("report.budgets", "", "gate budgets for the rate-distortion table (meta.budget when unset)"),
    ("report.bits", "16,32", "bit depths for the rate-distortion table"),
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    MissingFile { path: PathBuf, reason: String },
    #[error("{0}")]
    Fingerprint(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
    #[error("corrupt input: {0}")]
    Corrupt(String),
    #[error("writing artifacts: {0}")]
    Artifact(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// Process exit code. Argument parsing errors use 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 3,
            CliError::MissingFile { .. } => 4,
            CliError::Fingerprint(_) => 5,
            CliError::Data(_) => 6,
            CliError::Training(_) => 7,
            CliError::Corrupt(_) => 8,
            CliError::Artifact(_) => 9,
        }
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::Config(_) | MetaError::UnrollBudget { .. } => CliError::Config(e.to_string()),
            MetaError::Fingerprint => CliError::Fingerprint(e.to_string()),
            MetaError::NonFiniteLoss | MetaError::Diverged { .. } => CliError::Training(e.to_string()),
            MetaError::Signal { ref source, .. } if matches!(**source, MetaError::NonFiniteLoss | MetaError::Diverged { .. }) => {
                CliError::Training(e.to_string())
            }
            MetaError::Signal { .. } | MetaError::Modality(_) => CliError::Data(e.to_string()),
            MetaError::Checkpoint(_) => CliError::Corrupt(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Fingerprint => CliError::Fingerprint(e.to_string()),
            CodecError::Grid(_) => CliError::Data(e.to_string()),
            CodecError::Meta(m) => m.into(),
            other => CliError::Corrupt(other.to_string()),
        }
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synth {
        kind: SynthKind,
        count: usize,
        dims: Vec<usize>,
        seed: u64,
    },
    Manifest(PathBuf),
}

/// Validated run description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output: PathBuf,
    pub precision: Precision,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    pub heldout: usize,
    pub depth: usize,
    pub width: usize,
    pub omega0: f64,
    pub mode: Mode,
    pub meta: MetaConfig,
    pub fit: FitOptions,
    pub bits: u8,
    pub sweep_lambdas: Vec<f64>,
    pub sweep_sparsities: Vec<f64>,
    pub sweep_methods: Vec<Baseline>,
    pub imp_rounds: usize,
    pub scratch_fit: FitOptions,
    pub report_budgets: Vec<usize>,
    pub report_bits: Vec<u8>,
}

/// Raw `key → value` pairs with the line each came from (0 for overrides).
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, (String, usize)>,
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _, _)| *k == key)
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !known(key) {
                return Err(CliError::Config(format!("line {}: unknown key `{key}`", i + 1)));
            }
            if let Some((_, first)) = raw.values.get(key) {
                return Err(CliError::Config(format!("line {}: `{key}` already set on line {first}", i + 1)));
            }
            raw.values.insert(key.to_string(), (value.trim().to_string(), i + 1));
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not `key=value`")))?;
        let key = key.trim();
        if !known(key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), (value.trim().to_string(), 0));
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        debug_assert!(known(key), "{key} missing from the schema");
        match self.values.get(key) {
            Some((v, _)) => v,
            None => SCHEMA.iter().find(|(k, _, _)| *k == key).map_or("", |(_, d, _)| d),
        }
    }

    fn bad(&self, key: &str, reason: impl std::fmt::Display) -> CliError {
        match self.values.get(key) {
            Some((v, line)) if *line > 0 => CliError::Config(format!("line {line}: `{key} = {v}`: {reason}")),
            Some((v, _)) => CliError::Config(format!("override `{key}={v}`: {reason}")),
            None => CliError::Config(format!("`{key}`: {reason}")),
        }
    }

    fn parse_as<V: std::str::FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key).parse().map_err(|e| self.bad(key, e))
    }

    fn optional<V: std::str::FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.get(key) {
            "" | "none" => Ok(None),
            v => v.parse().map(Some).map_err(|e| self.bad(key, e)),
        }
    }

    fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>>
    where
        V::Err: std::fmt::Display,
    {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|p| p.trim().parse().map_err(|e| self.bad(key, e))).collect()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.bad(key, "expected true or false")),
        }
    }

    /// Checks every value and builds the run description.
    pub fn resolve(&self) -> Result<RunConfig> {
        let precision = match self.get("precision") {
            "32" => Precision::F32,
            "64" => Precision::F64,
            _ => return Err(self.bad("precision", "expected 32 or 64")),
        };
        let data = match self.get("data.source") {
            "synth" => {
                let dims: Vec<usize> = self
                    .get("data.dims")
                    .split('x')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| self.bad("data.dims", e))?;
                let kind: SynthKind = self.parse_as("data.synth")?;
                if dims.len() != kind.grid_rank() || dims.contains(&0) {
                    return Err(self.bad("data.dims", format!("{kind} needs {} positive sizes", kind.grid_rank())));
                }
                DataSpec::Synth {
                    kind,
                    count: self.parse_as("data.count")?,
                    dims,
                    seed: self.parse_as("data.seed")?,
                }
            }
            "manifest" => match self.get("data.manifest") {
                "" => return Err(self.bad("data.manifest", "required when data.source = manifest")),
                p => DataSpec::Manifest(PathBuf::from(p)),
            },
            _ => return Err(self.bad("data.source", "expected synth or manifest")),
        };
        let heldout: usize = self.parse_as("data.heldout")?;
        if let DataSpec::Synth { count, .. } = data {
            if heldout >= count {
                return Err(self.bad("data.heldout", format!("must be below data.count ({count})")));
            }
        }
        let mode: Mode = self.parse_as("meta.mode")?;
        let metasgd_init = match (self.optional::<f64>("meta.metasgd_min")?, self.optional::<f64>("meta.metasgd_max")?) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => return Err(self.bad("meta.metasgd_min", "set both metasgd_min and metasgd_max")),
        };
        let meta = MetaConfig {
            inner_steps: self.parse_as("meta.inner_steps")?,
            inner_lr: self.parse_as("meta.inner_lr")?,
            use_metasgd: self.flag("meta.use_metasgd")?,
            metasgd_init,
            outer_lr: self.parse_as("meta.outer_lr")?,
            log_alpha_lr_factor: self.parse_as("meta.log_alpha_lr_factor")?,
            log_alpha_init: self.parse_as("meta.log_alpha_init")?,
            lambda: self.parse_as("meta.lambda")?,
            batch_size: self.parse_as("meta.batch_size")?,
            mc_samples: self.parse_as("meta.mc_samples")?,
            adapt_gates_in_inner: self.flag("meta.adapt_gates_in_inner")?,
            sparsify_biases: self.flag("meta.sparsify_biases")?,
            first_order: self.flag("meta.first_order")?,
            loss: match self.get("meta.loss") {
                "mean" => LossReduction::Mean,
                "sum" => LossReduction::Sum,
                _ => return Err(self.bad("meta.loss", "expected mean or sum")),
            },
            hard_concrete: HardConcrete::default(),
            grad_clip: self.optional("meta.grad_clip")?,
            divergence_threshold: self.parse_as("meta.divergence_threshold")?,
            unroll_budget: self.parse_as("meta.unroll_budget")?,
            budget: self.optional("meta.budget")?,
            outer_steps: self.parse_as("meta.outer_steps")?,
            eval_every: self.parse_as("meta.eval_every")?,
        };
        meta.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let inner = FitOptions::inner(&meta);
        let fit = FitOptions {
            steps: self.optional("fit.steps")?.unwrap_or(inner.steps),
            lr: self.optional("fit.lr")?.unwrap_or(inner.lr),
            optimizer: match self.get("fit.optimizer") {
                "metasgd" => FitOptimizer::MetaSgd,
                "adam" => FitOptimizer::Adam,
                _ => return Err(self.bad("fit.optimizer", "expected metasgd or adam")),
            },
        };
        if fit.optimizer == FitOptimizer::MetaSgd && fit.steps > meta.unroll_budget {
            return Err(self.bad("fit.steps", "exceeds meta.unroll_budget"));
        }
        let bits: u8 = self.parse_as("codec.bits")?;
        let report_bits: Vec<u8> = self.list("report.bits")?;
        for b in std::iter::once(bits).chain(report_bits.iter().copied()) {
            if b != 16 && b != 32 {
                return Err(self.bad("codec.bits", format!("unsupported bit depth {b}")));
            }
        }
        let sweep_methods = match self.get("sweep.methods") {
            "all" => Baseline::ALL.to_vec(),
            _ => self.list("sweep.methods")?,
        };
        let sweep_sparsities: Vec<f64> = self.list("sweep.sparsities")?;
        if sweep_sparsities.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(self.bad("sweep.sparsities", "values must lie in [0, 1)"));
        }
        let sweep_lambdas: Vec<f64> = self.list("sweep.lambdas")?;
        if sweep_lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(self.bad("sweep.lambdas", "values must be non-negative"));
        }
        let seeds: Vec<u64> = self.list("seeds")?;
        if seeds.is_empty() {
            return Err(self.bad("seeds", "at least one seed"));
        }
        let cfg = RunConfig {
            output: PathBuf::from(self.get("output")),
            precision,
            seed: self.parse_as("seed")?,
            seeds,
            data,
            heldout,
            depth: self.parse_as("siren.depth")?,
            width: self.parse_as("siren.width")?,
            omega0: self.parse_as("siren.omega0")?,
            mode,
            meta,
            fit,
            bits,
            sweep_lambdas,
            sweep_sparsities,
            sweep_methods,
            imp_rounds: self.parse_as("sweep.imp_rounds")?,
            scratch_fit: FitOptions::adam(self.parse_as("sweep.scratch_steps")?, self.parse_as("sweep.scratch_lr")?),
            report_budgets: self.list("report.budgets")?,
            report_bits,
        };
        cfg.siren(1, 1).validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Reads `path` and applies `overrides` (`key=value`).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::load(path)?;
        for o in overrides {
            raw.set(o)?;
        }
        raw.resolve()
    }

    pub fn siren(&self, in_dim: usize, out_dim: usize) -> SirenConfig {
        SirenConfig {
            omega0: self.omega0,
            ..SirenConfig::new(in_dim, out_dim, self.depth, self.width)
        }
    }

    fn dataset<T: Real>(&self) -> Result<Vec<Signal<T>>> {
        let signals = match &self.data {
            DataSpec::Synth { kind, count, dims, seed } => synth_dataset(*kind, *count, dims, *seed)?,
            DataSpec::Manifest(path) => {
                require_file(path)?;
                read_manifest(path)?
            }
        };
        if signals.len() <= self.heldout {
            return Err(CliError::Data(format!(
                "{} signals leave nothing to train on with {} held out",
                signals.len(),
                self.heldout
            )));
        }
        Ok(signals)
    }

    /// Signal named on the command line: `dataset:<index>` or an image path.
    fn signal<T: Real>(&self, spec: &str) -> Result<Signal<T>> {
        if let Some(i) = spec.strip_prefix("dataset:") {
            let i: usize = i.parse().map_err(|_| CliError::Config(format!("bad dataset index in `{spec}`")))?;
            let mut all = self.dataset::<T>()?;
            if i >= all.len() {
                return Err(CliError::Data(format!("dataset has {} signals, index {i} requested", all.len())));
            }
            return Ok(all.swap_remove(i));
        }
        let path = Path::new(spec);
        require_file(path)?;
        Ok(load_image(path)?)
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile {
            path: path.to_path_buf(),
            reason: "no such file".into(),
        })
    }
}

fn load_state<T: Real>(path: &Path) -> Result<MetaState<T>> {
    require_file(path)?;
    MetaState::load(path).map_err(|e| match e {
        MetaError::Inr(inner) => CliError::Corrupt(format!("{}: {inner}", path.display())),
        other => other.into(),
    })
}

fn artifact(e: impl std::fmt::Display) -> CliError {
    CliError::Artifact(e.to_string())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(artifact)?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(artifact)?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(artifact)?;
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

fn dispatch<R>(precision: Precision, f32_run: impl FnOnce() -> R, f64_run: impl FnOnce() -> R) -> R {
    match precision {
        Precision::F32 => f32_run(),
        Precision::F64 => f64_run(),
    }
}

fn is_image(s: &Signal<impl Real>) -> bool {
    s.modality == Modality::Image && s.dims.len() == 2 && matches!(s.out_dim(), 1 | 3)
}

/// Coordinates per pixel for bit-rate figures: grid points.
fn grid_points(dims: &[usize]) -> (usize, usize) {
    match dims {
        [h, w] => (*h, *w),
        _ => (dims.iter().product(), 1),
    }
}

/// `meta-train`: writes `checkpoint.mscn` and `train_log.jsonl`.
pub fn cmd_meta_train(cfg: &RunConfig) -> Result<String> {
    dispatch(cfg.precision, || meta_train_impl::<f32>(cfg), || meta_train_impl::<f64>(cfg))
}

fn meta_train_impl<T: Real>(cfg: &RunConfig) -> Result<String> {
    let data = cfg.dataset::<T>()?;
    let (train, heldout) = data.split_at(data.len() - cfg.heldout);
    let siren = cfg.siren(train[0].in_dim(), train[0].out_dim());
    let init = MetaState::<T>::init(siren, cfg.mode, &cfg.meta, cfg.seed)?;
    let (state, log) = meta_train_budgeted(init, train, heldout, &cfg.meta, cfg.seed, |_, _| Ok(()))?;
    let mut jsonl = String::new();
    for r in &log {
        jsonl.push_str(&serde_json::to_string(r).map_err(artifact)?);
        jsonl.push('\n');
    }
    let ckpt = write_file(&cfg.output, "checkpoint.mscn", &state.to_bytes(Dtype::native::<T>()))?;
    write_file(&cfg.output, "train_log.jsonl", jsonl.as_bytes())?;
    let back: MetaState<T> = MetaState::load(&ckpt).map_err(artifact)?;
    if back != state {
        return Err(CliError::Artifact("checkpoint does not read back identically".into()));
    }
    let last = log.last().expect("log has an initial record");
    let psnr = log.iter().rev().find_map(|r| r.eval_psnr);
    Ok(format!(
        "meta-train: mode={} steps={} task_loss={} expected_sparsity={:.4} heldout_psnr={} checkpoint={}",
        cfg.mode,
        state.step,
        last.task_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
        last.expected_sparsity,
        psnr.map_or("n/a".into(), |p| format!("{p:.2}")),
        ckpt.display()
    ))
}

#[derive(Serialize)]
struct FitReport<'a> {
    signal: &'a str,
    mode: String,
    psnr: f64,
    nonzeros: usize,
    adapted: usize,
    update_sparsity: f64,
    losses: &'a [f64],
}

/// `fit`: test-time adaptation of one signal; writes `fit.json` and, for
/// images, `fit.png`.
pub fn cmd_fit(cfg: &RunConfig, checkpoint: &Path, signal: &str) -> Result<String> {
    dispatch(cfg.precision, || fit_impl::<f32>(cfg, checkpoint, signal), || fit_impl::<f64>(cfg, checkpoint, signal))
}

fn fit_impl<T: Real>(cfg: &RunConfig, checkpoint: &Path, spec: &str) -> Result<String> {
    let state = load_state::<T>(checkpoint)?;
    let signal = cfg.signal::<T>(spec)?;
    let fit = fit_signal(&state, &signal, cfg.fit, &cfg.meta)?;
    let adapted = state.adapted_len();
    let report = FitReport {
        signal: &signal.id,
        mode: state.mode.to_string(),
        psnr: fit.psnr,
        nonzeros: fit.delta.len(),
        adapted,
        update_sparsity: 1.0 - fit.delta.len() as f64 / adapted.max(1) as f64,
        losses: &fit.losses,
    };
    write_json(&cfg.output, "fit.json", &report)?;
    if is_image(&signal) {
        save_image(&cfg.output.join("fit.png"), &fit.reconstruction, signal.dims[0], signal.dims[1]).map_err(artifact)?;
    }
    Ok(format!(
        "fit: signal={} psnr={:.2} nonzeros={}/{} output={}",
        signal.id,
        fit.psnr,
        fit.delta.len(),
        adapted,
        cfg.output.display()
    ))
}

#[derive(Serialize)]
struct CompressReport<'a> {
    signal: &'a str,
    bits: u8,
    entries: usize,
    bytes: usize,
    payload_bits: u64,
    bpp: f64,
    bpp_values: f64,
    psnr: f64,
}

/// `compress`: fits the signal and writes `compressed.mscd` and
/// `compress.json`. The reported PSNR is that of the decoded blob.
pub fn cmd_compress(cfg: &RunConfig, checkpoint: &Path, signal: &str) -> Result<String> {
    dispatch(
        cfg.precision,
        || compress_impl::<f32>(cfg, checkpoint, signal),
        || compress_impl::<f64>(cfg, checkpoint, signal),
    )
}

fn compress_impl<T: Real>(cfg: &RunConfig, checkpoint: &Path, spec: &str) -> Result<String> {
    let state = load_state::<T>(checkpoint)?;
    let signal = cfg.signal::<T>(spec)?;
    let fit = fit_signal(&state, &signal, cfg.fit, &cfg.meta)?;
    let blob = encode(&fit.delta, cfg.bits)?;
    let bytes = blob.to_bytes();
    let path = write_file(&cfg.output, "compressed.mscd", &bytes)?;
    let reread = CompressedBlob::from_bytes(&std::fs::read(&path).map_err(artifact)?).map_err(artifact)?;
    let out = decompress_to_signal(&state, &reread, &signal.coords, Some(&signal))?;
    let psnr = out.psnr.expect("reference given");
    let (h, w) = grid_points(&signal.dims);
    let report = CompressReport {
        signal: &signal.id,
        bits: cfg.bits,
        entries: fit.delta.len(),
        bytes: bytes.len(),
        payload_bits: blob.payload_bits(),
        bpp: bits_per_pixel(&blob, w, h),
        bpp_values: bits_per_pixel_values(&blob, w, h),
        psnr,
    };
    write_json(&cfg.output, "compress.json", &report)?;
    Ok(format!(
        "compress: signal={} bits={} entries={} bytes={} bpp={:.4} psnr={:.4} blob={}",
        signal.id,
        cfg.bits,
        report.entries,
        report.bytes,
        report.bpp,
        psnr,
        path.display()
    ))
}

#[derive(Serialize)]
struct DecompressReport {
    psnr: Option<f64>,
    voxel_accuracy: Option<f64>,
    reconstruction: String,
}

/// `decompress`: rebuilds the signal from a blob. The grid comes from the
/// reference signal when given, otherwise from the configured dataset.
/// Writes `reconstruction.png` for images, `reconstruction.csv` otherwise,
/// and `decompress.json`.
pub fn cmd_decompress(cfg: &RunConfig, checkpoint: &Path, blob: &Path, reference: Option<&str>) -> Result<String> {
    dispatch(
        cfg.precision,
        || decompress_impl::<f32>(cfg, checkpoint, blob, reference),
        || decompress_impl::<f64>(cfg, checkpoint, blob, reference),
    )
}

fn decompress_impl<T: Real>(cfg: &RunConfig, checkpoint: &Path, blob_path: &Path, reference: Option<&str>) -> Result<String> {
    let state = load_state::<T>(checkpoint)?;
    require_file(blob_path)?;
    let bytes = std::fs::read(blob_path).map_err(|e| CliError::MissingFile {
        path: blob_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let blob = CompressedBlob::from_bytes(&bytes)?;
    let reference: Option<Signal<T>> = reference.map(|r| cfg.signal(r)).transpose()?;
    let (modality, dims, coords) = match &reference {
        Some(r) => (r.modality, r.dims.clone(), r.coords.clone()),
        None => {
            let (modality, dims) = match &cfg.data {
                DataSpec::Synth { kind, dims, .. } => (kind.modality(), dims.clone()),
                DataSpec::Manifest(_) => {
                    let first = cfg.dataset::<T>()?.swap_remove(0);
                    (first.modality, first.dims)
                }
            };
            let coords: Tensor<T> = make_grid(&dims, modality);
            (modality, dims, coords)
        }
    };
    let out = decompress_to_signal(&state, &blob, &coords, reference.as_ref())?;
    let channels = out.reconstruction.shape()[1];
    let name = if modality == Modality::Image && dims.len() == 2 && matches!(channels, 1 | 3) {
        save_image(&cfg.output_dir()?.join("reconstruction.png"), &out.reconstruction, dims[0], dims[1])
            .map_err(artifact)?;
        "reconstruction.png"
    } else {
        let mut csv = String::new();
        let in_dim = coords.shape()[1];
        let header: Vec<String> = (0..in_dim)
            .map(|i| format!("x{i}"))
            .chain((0..channels).map(|c| format!("y{c}")))
            .collect();
        csv.push_str(&header.join(","));
        csv.push('\n');
        for (x, y) in coords.data().chunks(in_dim).zip(out.reconstruction.data().chunks(channels)) {
            let row: Vec<String> = x.iter().chain(y).map(|v| format!("{}", v.as_f64())).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_file(&cfg.output, "reconstruction.csv", csv.as_bytes())?;
        "reconstruction.csv"
    };
    write_json(
        &cfg.output,
        "decompress.json",
        &DecompressReport {
            psnr: out.psnr,
            voxel_accuracy: out.voxel_accuracy,
            reconstruction: name.into(),
        },
    )?;
    Ok(format!(
        "decompress: entries={} psnr={} output={}",
        blob.header.count,
        out.psnr.map_or("n/a".into(), |p| format!("{p:.4}")),
        cfg.output.join(name).display()
    ))
}

impl RunConfig {
    fn output_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.output).map_err(artifact)?;
        Ok(&self.output)
    }
}

/// `sweep`: baseline ladder over `sweep.lambdas` or `sweep.sparsities`;
/// writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<String> {
    match (cfg.sweep_lambdas.is_empty(), cfg.sweep_sparsities.is_empty()) {
        (true, true) => return Err(CliError::Config("sweep needs sweep.lambdas or sweep.sparsities".into())),
        (false, false) => return Err(CliError::Config("set only one of sweep.lambdas and sweep.sparsities".into())),
        _ => {}
    }
    dispatch(cfg.precision, || sweep_impl::<f32>(cfg), || sweep_impl::<f64>(cfg))
}

fn sweep_impl<T: Real>(cfg: &RunConfig) -> Result<String> {
    let data = cfg.dataset::<T>()?;
    let (train, test) = data.split_at(data.len() - cfg.heldout);
    if test.is_empty() {
        return Err(CliError::Config("sweep needs data.heldout > 0".into()));
    }
    let mut opts = BaselineOptions::new(cfg.siren(train[0].in_dim(), train[0].out_dim()), cfg.meta.clone());
    opts.seeds = cfg.seeds.clone();
    opts.fit = cfg.fit;
    opts.scratch_fit = cfg.scratch_fit;
    opts.imp_rounds = cfg.imp_rounds;
    opts.methods = cfg.sweep_methods.clone();
    let rows = if cfg.sweep_lambdas.is_empty() {
        baseline_suite(train, test, &cfg.sweep_sparsities, &opts)?
    } else {
        lambda_sweep(train, test, &cfg.sweep_lambdas, &opts)?
    };
    let path = write_file(&cfg.output, "sweep.csv", rows_csv(&rows).as_bytes())?;
    Ok(format!(
        "sweep: rows={} methods={} seeds={} csv={}",
        rows.len(),
        opts.methods.len(),
        opts.seeds.len(),
        path.display()
    ))
}

/// `report`: writes `sparsity_pattern.csv` and `rate_distortion.csv` (over
/// the held-out signals).
pub fn cmd_report(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    dispatch(cfg.precision, || report_impl::<f32>(cfg, checkpoint), || report_impl::<f64>(cfg, checkpoint))
}

fn report_impl<T: Real>(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    let state = load_state::<T>(checkpoint)?;
    let data = cfg.dataset::<T>()?;
    let signals = &data[data.len() - cfg.heldout..];
    if signals.is_empty() {
        return Err(CliError::Config("report needs data.heldout > 0".into()));
    }
    let layers = sparsity_pattern_report(&state, cfg.meta.budget);
    let sparsity_path = write_file(&cfg.output, "sparsity_pattern.csv", report_csv(&layers).as_bytes())?;
    let budgets: Vec<Option<usize>> = if cfg.report_budgets.is_empty() {
        vec![cfg.meta.budget]
    } else {
        cfg.report_budgets.iter().copied().map(Some).collect()
    };
    let mut csv = String::from("budget,bits,entries_mean,bpp,bpp_values,psnr_mean,signals\n");
    for budget in &budgets {
        let meta = MetaConfig {
            budget: *budget,
            ..cfg.meta.clone()
        };
        let deltas = signals
            .iter()
            .map(|s| fit_signal(&state, s, cfg.fit, &meta).map(|f| f.delta))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for &bits in &cfg.report_bits {
            let (mut entries, mut bpp, mut bpp_values, mut psnr) = (0.0, 0.0, 0.0, 0.0);
            for (s, d) in signals.iter().zip(&deltas) {
                let blob = encode(d, bits)?;
                let (h, w) = grid_points(&s.dims);
                entries += d.len() as f64;
                bpp += bits_per_pixel(&blob, w, h);
                bpp_values += bits_per_pixel_values(&blob, w, h);
                psnr += decompress_to_signal(&state, &blob, &s.coords, Some(s))?.psnr.expect("reference given");
            }
            let n = signals.len() as f64;
            let _ = writeln!(
                csv,
                "{},{bits},{:.3},{:.6},{:.6},{:.6},{}",
                budget.map_or("none".to_string(), |k| k.to_string()),
                entries / n,
                bpp / n,
                bpp_values / n,
                psnr / n,
                signals.len()
            );
        }
    }
    let rd_path = write_file(&cfg.output, "rate_distortion.csv", csv.as_bytes())?;
    let active: usize = layers.iter().map(|l| l.active).sum();
    let total: usize = layers.iter().map(|l| l.total).sum();
    Ok(format!(
        "report: active={active}/{total} rate_points={} csv={},{}",
        budgets.len() * cfg.report_bits.len(),
        sparsity_path.display(),
        rd_path.display()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RawConfig::parse("").unwrap().resolve().unwrap();
        assert_eq!(cfg.mode, Mode::StructuredModulations);
        assert_eq!(cfg.meta, MetaConfig::default());
        assert_eq!(cfg.sweep_methods, Baseline::ALL.to_vec());
        assert_eq!(cfg.fit.steps, 2);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        let e = RawConfig::parse("seed = 1\nmeta.lamda = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert_eq!(e.exit_code(), 3);
        assert!(RawConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RawConfig::parse("just words").is_err());
        assert!(RawConfig::default().set("nope=1").is_err());
    }

    #[test]
    fn values_are_checked() {
        for bad in [
            "precision = 16",
            "meta.mode = sparse",
            "codec.bits = 8",
            "data.dims = 32",
            "meta.metasgd_min = 0.1",
            "sweep.sparsities = 1.5",
            "meta.inner_steps = 40",
            "data.heldout = 40",
            "sweep.methods = mscn, magic",
        ] {
            assert!(RawConfig::parse(bad).unwrap().resolve().is_err(), "{bad}");
        }
    }

    #[test]
    fn overrides_and_comments() {
        let mut raw = RawConfig::parse("# run\nmeta.lambda = 0.5 # strong\nmeta.budget = none\n").unwrap();
        raw.set("meta.outer_steps=7").unwrap();
        let cfg = raw.resolve().unwrap();
        assert_eq!(cfg.meta.lambda, 0.5);
        assert_eq!(cfg.meta.budget, None);
        assert_eq!(cfg.meta.outer_steps, 7);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Baseline::ALL {
            assert_eq!(m.to_string().parse::<Baseline>().unwrap(), m);
        }
    }
}
