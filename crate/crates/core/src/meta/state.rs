use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mix_seed, Adam, MetaConfig, MetaError, Mode, Result, SparseDelta};
use crate::gates::{top_k_mask, GatePlacement, HardConcrete, HardConcreteGates};
use crate::inr::{
    forward, init_siren, read_params, write_params, zero_modulations, Dtype, ForwardGates, ParameterSet, SirenConfig,
};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::wire::{put_reals, Reader};

const META_MAGIC: &[u8; 4] = b"META";
const FLAG_BIASES: u8 = 1;
const FLAG_PINNED: u8 = 2;
const FLAG_MASK: u8 = 4;

/// One inner-loop-adapted tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotInfo {
    pub shape: Vec<usize>,
    pub len: usize,
    /// Network layer the tensor belongs to.
    pub layer: usize,
    pub is_bias: bool,
    pub gated: bool,
}

/// Meta-learned initialisation, gate parameters and MetaSGD rates.
#[derive(Clone, Debug)]
pub struct MetaState<T> {
    pub mode: Mode,
    pub theta0: ParameterSet<T>,
    /// `log α` for every gated entry, concatenated over gated slots.
    pub gates0: HardConcreteGates<T>,
    /// One rate per adapted entry, concatenated over slots; empty when
    /// MetaSGD is off.
    pub metasgd_lr: Vec<T>,
    pub sparsify_biases: bool,
    /// Fixed gate values replacing the learned distribution.
    pub pinned_gates: Option<Vec<T>>,
    /// Fixed binary mask on `θ` in layout order, applied in every forward pass.
    pub param_mask: Option<Vec<T>>,
    pub step: u64,
    pub(crate) optimizer: Option<OuterOptimizer<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct OuterOptimizer<T> {
    pub theta: Adam<T>,
    pub log_alpha: Adam<T>,
    pub metasgd: Adam<T>,
}

impl<T: Real> PartialEq for MetaState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.theta0 == other.theta0
            && self.gates0 == other.gates0
            && self.metasgd_lr == other.metasgd_lr
            && self.sparsify_biases == other.sparsify_biases
            && self.pinned_gates == other.pinned_gates
            && self.param_mask == other.param_mask
            && self.step == other.step
    }
}

fn placement(mode: Mode) -> GatePlacement {
    match mode {
        Mode::StructuredModulations => GatePlacement::PerModulation,
        Mode::UnstructuredGradients => GatePlacement::PerGradient,
        Mode::DenseMaml => GatePlacement::PerWeightAndBias,
    }
}

fn slot_layout(config: &SirenConfig, mode: Mode, sparsify_biases: bool) -> Vec<SlotInfo> {
    match mode {
        Mode::StructuredModulations => (0..config.modulated_layers())
            .map(|l| SlotInfo {
                shape: vec![config.width],
                len: config.width,
                layer: l,
                is_bias: false,
                gated: true,
            })
            .collect(),
        _ => (0..config.depth)
            .flat_map(|l| {
                let (i, o) = config.layer_dims(l);
                let gated = mode == Mode::UnstructuredGradients;
                [
                    SlotInfo {
                        shape: vec![i, o],
                        len: i * o,
                        layer: l,
                        is_bias: false,
                        gated,
                    },
                    SlotInfo {
                        shape: vec![o],
                        len: o,
                        layer: l,
                        is_bias: true,
                        gated: gated && sparsify_biases,
                    },
                ]
            })
            .collect(),
    }
}

impl<T: Real> MetaState<T> {
    /// Fresh state around `theta0`: constant `log α`, MetaSGD rates drawn
    /// uniformly from the configured range.
    pub fn new(theta0: ParameterSet<T>, mode: Mode, cfg: &MetaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut theta0 = theta0;
        theta0.modulations = None;
        let slots = slot_layout(&theta0.config, mode, cfg.sparsify_biases);
        let n_gates: usize = slots.iter().filter(|s| s.gated).map(|s| s.len).sum();
        let n_adapted: usize = slots.iter().map(|s| s.len).sum();
        let gates0 = HardConcreteGates::constant(n_gates, cfg.log_alpha_init, cfg.hard_concrete, placement(mode))?;
        let metasgd_lr = if cfg.use_metasgd {
            let (lo, hi) = cfg.metasgd_init.unwrap_or(mode.metasgd_init());
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
            (0..n_adapted)
                .map(|_| T::from_f64_lossy(if hi > lo { rng.gen_range(lo..hi) } else { lo }))
                .collect()
        } else {
            Vec::new()
        };
        Ok(MetaState {
            mode,
            theta0,
            gates0,
            metasgd_lr,
            sparsify_biases: cfg.sparsify_biases,
            pinned_gates: None,
            param_mask: None,
            step: 0,
            optimizer: None,
        })
    }

    /// SIREN initialisation followed by [`MetaState::new`].
    pub fn init(config: SirenConfig, mode: Mode, cfg: &MetaConfig, seed: u64) -> Result<Self> {
        let theta0 = init_siren(config, mix_seed(seed, 1))?;
        Self::new(theta0, mode, cfg, seed)
    }

    pub fn config(&self) -> &SirenConfig {
        &self.theta0.config
    }

    pub fn slots(&self) -> Vec<SlotInfo> {
        slot_layout(&self.theta0.config, self.mode, self.sparsify_biases)
    }

    pub fn adapted_len(&self) -> usize {
        self.slots().iter().map(|s| s.len).sum()
    }

    pub fn gate_count(&self) -> usize {
        self.gates0.len()
    }

    /// Whether `log α` is trained (gated mode and no pinned values).
    pub fn learns_gates(&self) -> bool {
        self.mode != Mode::DenseMaml && self.pinned_gates.is_none()
    }

    /// Fixes every gate to `values` (concatenated over gated slots).
    pub fn pin_gates(&mut self, values: Vec<T>) -> Result<()> {
        if values.len() != self.gate_count() {
            return Err(MetaError::Config(format!(
                "{} pinned gates for {} gate slots",
                values.len(),
                self.gate_count()
            )));
        }
        self.pinned_gates = Some(values);
        self.optimizer = None;
        Ok(())
    }

    pub fn set_param_mask(&mut self, mask: Option<Vec<T>>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.theta0.param_count() {
                return Err(MetaError::Config(format!(
                    "{} mask entries for {} parameters",
                    m.len(),
                    self.theta0.param_count()
                )));
            }
        }
        self.param_mask = mask;
        Ok(())
    }

    /// Gate values used at evaluation time: the pinned values, otherwise the
    /// deterministic gates, or a binary top-`budget` mask by `log α`.
    pub fn eval_gates(&self, budget: Option<usize>) -> Vec<T> {
        if let Some(p) = &self.pinned_gates {
            return p.clone();
        }
        match budget {
            Some(k) => top_k_mask(&self.gates0.log_alpha, k),
            None => self.gates0.deterministic(),
        }
    }

    /// Per-slot views of a flat vector laid out over gated slots.
    pub(crate) fn split_gated<'a>(&self, flat: &'a [T]) -> Vec<Option<&'a [T]>> {
        let mut offset = 0;
        self.slots()
            .iter()
            .map(|s| {
                s.gated.then(|| {
                    let v = &flat[offset..offset + s.len];
                    offset += s.len;
                    v
                })
            })
            .collect()
    }

    /// Per-slot views of a flat vector laid out over all adapted slots.
    pub(crate) fn split_adapted<'a>(&self, flat: &'a [T]) -> Vec<&'a [T]> {
        let mut offset = 0;
        self.slots()
            .iter()
            .map(|s| {
                let v = &flat[offset..offset + s.len];
                offset += s.len;
                v
            })
            .collect()
    }

    /// Mask constants for [`ForwardGates::param_gates`].
    pub(crate) fn attach_mask(&self, g: &Graph<T>) -> Option<Vec<Var<T>>> {
        let mask = self.param_mask.as_ref()?;
        let mut offset = 0;
        Some(
            self.theta0
                .tensors()
                .iter()
                .map(|t| {
                    let v = mask[offset..offset + t.len()].to_vec();
                    offset += t.len();
                    g.constant(Tensor::new(t.shape().to_vec(), v).expect("mask shape"))
                })
                .collect(),
        )
    }

    /// Evaluates `params` (with any modulations it carries) on `coords`,
    /// applying the parameter mask.
    pub fn evaluate(&self, params: &ParameterSet<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let layers = params.attach(&g, false);
        let x = g.constant(coords.clone());
        let mask = self.attach_mask(&g);
        let shifts: Option<Vec<Var<T>>> = params
            .modulations
            .as_ref()
            .map(|ms| ms.iter().map(|m| g.constant(m.clone())).collect());
        let opts = ForwardGates {
            shifts: shifts.as_deref(),
            param_gates: mask.as_deref(),
            ..Default::default()
        };
        Ok(forward(&params.config, &layers, &x, opts)?.to_tensor())
    }

    /// Parameters described by `delta`: `θ0 + δ` for gradient modes, `θ0`
    /// with the delta installed as modulations for structured mode.
    pub fn apply_delta(&self, delta: &SparseDelta) -> Result<ParameterSet<T>> {
        delta.validate()?;
        if delta.fingerprint != self.fingerprint() {
            return Err(MetaError::Fingerprint);
        }
        if delta.mode != self.mode {
            return Err(MetaError::Config(format!("{} delta for a {} state", delta.mode, self.mode)));
        }
        let n = self.adapted_len();
        let mut full = vec![T::zero(); n];
        for (&i, &v) in delta.indices.iter().zip(&delta.values) {
            let slot = full
                .get_mut(i as usize)
                .ok_or_else(|| MetaError::Config(format!("index {i} out of range {n}")))?;
            *slot = T::from_f64_lossy(v);
        }
        Ok(self.params_from_flat(&full))
    }

    /// Builds parameters from a dense per-slot delta.
    pub(crate) fn params_from_flat(&self, delta: &[T]) -> ParameterSet<T> {
        let mut params = self.theta0.clone();
        match self.mode {
            Mode::StructuredModulations => {
                let mods = self
                    .split_adapted(delta)
                    .iter()
                    .map(|d| Tensor::vector(d.to_vec()))
                    .collect();
                params.modulations = Some(mods);
            }
            _ => {
                let views = self.split_adapted(delta);
                for (t, d) in params.tensors_mut().into_iter().zip(views) {
                    for (p, &dv) in t.data_mut().iter_mut().zip(d) {
                        *p = *p + dv;
                    }
                }
            }
        }
        params
    }

    /// Reconstruction `f(coords)` for an empty delta.
    pub fn base_prediction(&self, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let mut params = self.theta0.clone();
        if self.mode == Mode::StructuredModulations {
            params.modulations = Some(zero_modulations(self.config()));
        }
        self.evaluate(&params, coords)
    }

    /// Serialised checkpoint: the parameter section followed by the meta
    /// section (`log α`, MetaSGD rates, pinned gates, parameter mask).
    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = write_params(&self.theta0, dtype, true);
        let w = dtype.width();
        out.extend_from_slice(META_MAGIC);
        out.push(self.mode.tag());
        let mut flags = 0;
        if self.sparsify_biases {
            flags |= FLAG_BIASES;
        }
        if self.pinned_gates.is_some() {
            flags |= FLAG_PINNED;
        }
        if self.param_mask.is_some() {
            flags |= FLAG_MASK;
        }
        out.push(flags);
        out.extend_from_slice(&self.step.to_le_bytes());
        let hc = &self.gates0.params;
        for v in [hc.temperature, hc.stretch_lo, hc.stretch_hi, hc.log_alpha_min, hc.log_alpha_max] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.gates0.len() as u32).to_le_bytes());
        put_reals(&mut out, &self.gates0.log_alpha, w);
        out.extend_from_slice(&(self.metasgd_lr.len() as u32).to_le_bytes());
        put_reals(&mut out, &self.metasgd_lr, w);
        if let Some(p) = &self.pinned_gates {
            put_reals(&mut out, p, w);
        }
        if let Some(m) = &self.param_mask {
            put_reals(&mut out, m, w);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (theta0, header, used) = read_params::<T>(bytes)?;
        if !header.has_meta {
            return Err(MetaError::Checkpoint("no meta section".into()));
        }
        let trunc = |_| MetaError::Checkpoint("truncated meta section".into());
        let mut r = Reader::new(&bytes[used..]);
        if r.take(4).map_err(trunc)? != META_MAGIC {
            return Err(MetaError::Checkpoint("bad meta magic".into()));
        }
        let mode = Mode::from_tag(r.u8().map_err(trunc)?)
            .ok_or_else(|| MetaError::Checkpoint("unknown mode tag".into()))?;
        let flags = r.u8().map_err(trunc)?;
        let step = r.u64().map_err(trunc)?;
        let mut hc = [0.0; 5];
        for v in hc.iter_mut() {
            *v = r.f64().map_err(trunc)?;
        }
        let params = HardConcrete {
            temperature: hc[0],
            stretch_lo: hc[1],
            stretch_hi: hc[2],
            log_alpha_min: hc[3],
            log_alpha_max: hc[4],
        };
        let w = header.dtype.width();
        let n_gates = r.u32().map_err(trunc)? as usize;
        let log_alpha = r.reals::<T>(n_gates, w).map_err(trunc)?;
        let n_lr = r.u32().map_err(trunc)? as usize;
        let metasgd_lr = r.reals::<T>(n_lr, w).map_err(trunc)?;
        let pinned_gates = if flags & FLAG_PINNED != 0 {
            Some(r.reals::<T>(n_gates, w).map_err(trunc)?)
        } else {
            None
        };
        let param_mask = if flags & FLAG_MASK != 0 {
            Some(r.reals::<T>(theta0.param_count(), w).map_err(trunc)?)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(MetaError::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        let state = MetaState {
            mode,
            gates0: HardConcreteGates::new(log_alpha, params, placement(mode))?,
            theta0,
            metasgd_lr,
            sparsify_biases: flags & FLAG_BIASES != 0,
            pinned_gates,
            param_mask,
            step,
            optimizer: None,
        };
        let slots = state.slots();
        let want_gates: usize = slots.iter().filter(|s| s.gated).map(|s| s.len).sum();
        if state.gates0.len() != want_gates {
            return Err(MetaError::Checkpoint(format!("{} gates, expected {want_gates}", state.gates0.len())));
        }
        if n_lr != 0 && n_lr != state.adapted_len() {
            return Err(MetaError::Checkpoint(format!("{n_lr} MetaSGD rates, expected {}", state.adapted_len())));
        }
        Ok(state)
    }

    pub fn save(&self, path: &std::path::Path, dtype: Dtype) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes(dtype))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MetaError::Checkpoint(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    /// 64-bit FNV-1a hash of the checkpoint at the engine precision.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(&self.to_bytes(Dtype::native::<T>()));
        h.finish()
    }
}
