//! SIREN coordinate networks with optional per-layer shift modulations.
//!
//! Layer `l` maps `h ↦ sin(ω0 · (h·W + b + z⊙m))` for hidden layers and is
//! affine for the final layer. Weights are stored `[fan_in, fan_out]` so the
//! batch of coordinates multiplies from the left.

mod checkpoint;

pub use checkpoint::{read_params, write_params, CheckpointHeader, Dtype, MAGIC, VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum InrError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("layer {layer}: gate vector has {got} entries, expected {expected}")]
    GateLength { layer: usize, expected: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, InrError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SirenConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Number of affine layers, including the output layer.
    pub depth: usize,
    pub width: usize,
    pub omega0: f64,
}

impl Default for SirenConfig {
    fn default() -> Self {
        SirenConfig {
            in_dim: 2,
            out_dim: 3,
            depth: 4,
            width: 256,
            omega0: 30.0,
        }
    }
}

impl SirenConfig {
    pub fn new(in_dim: usize, out_dim: usize, depth: usize, width: usize) -> Self {
        SirenConfig {
            in_dim,
            out_dim,
            depth,
            width,
            omega0: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(InrError::Config(format!("depth {} < 2", self.depth)));
        }
        if self.width == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(InrError::Config("dimensions must be positive".into()));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(InrError::Config(format!("omega0 {} must be positive", self.omega0)));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.in_dim } else { self.width };
        let fan_out = if l + 1 == self.depth { self.out_dim } else { self.width };
        (fan_in, fan_out)
    }

    /// Number of weights and biases.
    pub fn param_count(&self) -> usize {
        (0..self.depth)
            .map(|l| {
                let (i, o) = self.layer_dims(l);
                i * o + o
            })
            .sum()
    }

    /// Layers carrying modulations (every layer but the last).
    pub fn modulated_layers(&self) -> usize {
        self.depth - 1
    }

    pub fn modulation_count(&self) -> usize {
        self.modulated_layers() * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Weights and biases of every layer, plus shift modulations for the hidden
/// layers when present.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub config: SirenConfig,
    pub layers: Vec<Layer<T>>,
    pub modulations: Option<Vec<Tensor<T>>>,
}

/// Per-layer weight and bias handles on a graph.
#[derive(Clone)]
pub struct LayerVars<T> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

/// Gating options for [`forward`]. Every field defaults to "no gate".
#[derive(Clone, Copy, Default)]
pub struct ForwardGates<'a, T> {
    /// Shift modulations `m(l)` for hidden layers.
    pub shifts: Option<&'a [Var<T>]>,
    /// Gates `z(l)` multiplying the shifts.
    pub shift_gates: Option<&'a [Var<T>]>,
    /// Gates on hidden activations.
    pub activation_gates: Option<&'a [Var<T>]>,
    /// Masks multiplying each layer's weight and bias, in layout order
    /// `[W0, b0, W1, b1, ...]`.
    pub param_gates: Option<&'a [Var<T>]>,
}

/// SIREN initialisation: first layer `U(-1/in, 1/in)`, deeper layers
/// `U(-√(6/fan_in)/ω0, √(6/fan_in)/ω0)`, zero biases.
pub fn init_siren<T: Real>(config: SirenConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..config.depth)
        .map(|l| {
            let (fan_in, fan_out) = config.layer_dims(l);
            let bound = if l == 0 {
                1.0 / config.in_dim as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / config.omega0
            };
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
                .collect();
            Layer {
                weight: Tensor::new(vec![fan_in, fan_out], w).expect("layer shape"),
                bias: Tensor::zeros(vec![fan_out]),
            }
        })
        .collect();
    Ok(ParameterSet {
        config,
        layers,
        modulations: None,
    })
}

impl<T: Real> ParameterSet<T> {
    /// Same network with all-zero modulations attached.
    pub fn with_zero_modulations(mut self) -> Self {
        self.modulations = Some(zero_modulations(&self.config));
        self
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Weights and biases in layout order `[W0, b0, W1, b1, ...]`.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Concatenation of [`ParameterSet::tensors`].
    pub fn flat(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(InrError::Config(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records every weight and bias on `g`, as leaves when `trainable`.
    pub fn attach(&self, g: &Graph<T>, trainable: bool) -> Vec<LayerVars<T>> {
        let put = |t: &Tensor<T>| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: put(&l.weight),
                bias: put(&l.bias),
            })
            .collect()
    }

    /// Evaluates the network on detached coordinates, using the stored
    /// modulations (if any) and optional per-layer shift gates.
    pub fn evaluate(&self, coords: &Tensor<T>, shift_gates: Option<&[Tensor<T>]>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let layers = self.attach(&g, false);
        let x = g.constant(coords.clone());
        let shifts: Option<Vec<Var<T>>> = self
            .modulations
            .as_ref()
            .map(|ms| ms.iter().map(|m| g.constant(m.clone())).collect());
        let gates: Option<Vec<Var<T>>> = shift_gates.map(|zs| zs.iter().map(|z| g.constant(z.clone())).collect());
        let opts = ForwardGates {
            shifts: shifts.as_deref(),
            shift_gates: gates.as_deref(),
            ..Default::default()
        };
        Ok(forward(&self.config, &layers, &x, opts)?.to_tensor())
    }
}

pub fn zero_modulations<T: Real>(config: &SirenConfig) -> Vec<Tensor<T>> {
    (0..config.modulated_layers())
        .map(|_| Tensor::zeros(vec![config.width]))
        .collect()
}

fn check_len<T: Real>(layer: usize, v: &Var<T>, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(InrError::GateLength {
            layer,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Network output `[batch, out_dim]` for coordinates `[batch, in_dim]`.
pub fn forward<T: Real>(
    config: &SirenConfig,
    layers: &[LayerVars<T>],
    coords: &Var<T>,
    gates: ForwardGates<'_, T>,
) -> Result<Var<T>> {
    if layers.len() != config.depth {
        return Err(InrError::Config(format!(
            "{} layers for depth {}",
            layers.len(),
            config.depth
        )));
    }
    let hidden = config.modulated_layers();
    for (name, list, want) in [
        ("shifts", gates.shifts, hidden),
        ("shift gates", gates.shift_gates, hidden),
        ("activation gates", gates.activation_gates, hidden),
        ("parameter gates", gates.param_gates, 2 * config.depth),
    ] {
        if let Some(list) = list {
            if list.len() != want {
                return Err(InrError::Config(format!("{} {name} for {want} slots", list.len())));
            }
        }
    }
    let omega = T::from_f64_lossy(config.omega0);
    let mut h = coords.clone();
    for (l, layer) in layers.iter().enumerate() {
        let (w, b) = match gates.param_gates {
            Some(pg) => {
                check_len(l, &pg[2 * l], layer.weight.len())?;
                check_len(l, &pg[2 * l + 1], layer.bias.len())?;
                (layer.weight.mul(&pg[2 * l])?, layer.bias.mul(&pg[2 * l + 1])?)
            }
            None => (layer.weight.clone(), layer.bias.clone()),
        };
        let mut pre = h.matmul(&w)?.add(&b)?;
        if l + 1 == config.depth {
            return Ok(pre);
        }
        if let Some(shifts) = gates.shifts {
            check_len(l, &shifts[l], config.width)?;
            let shift = match gates.shift_gates {
                Some(z) => {
                    check_len(l, &z[l], config.width)?;
                    z[l].mul(&shifts[l])?
                }
                None => shifts[l].clone(),
            };
            pre = pre.add(&shift)?;
        }
        h = pre.scale(omega)?.sin()?;
        if let Some(act) = gates.activation_gates {
            check_len(l, &act[l], config.width)?;
            h = h.mul(&act[l])?;
        }
    }
    unreachable!("depth >= 2 always returns from the output layer")
}

/// How squared errors are reduced to a scalar loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossReduction {
    /// Sum over all coordinates and channels.
    Sum,
    /// Sum divided by `batch · out_dim`.
    #[default]
    Mean,
}

pub fn mse_loss<T: Real>(pred: &Var<T>, target: &Var<T>, reduction: LossReduction) -> Result<Var<T>> {
    let sum = pred.squared_error(target)?;
    Ok(match reduction {
        LossReduction::Sum => sum,
        LossReduction::Mean => sum.scale(T::one() / T::from_usize(pred.len().max(1)).expect("count"))?,
    })
}

/// Mean squared error between two detached tensors.
pub fn mean_squared_error<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mean_squared_error",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(s / pred.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn parameter_count_matches_enumeration() {
        let cfg = SirenConfig::new(2, 3, 4, 256);
        let p = init_siren::<f32>(cfg, 0).unwrap();
        let enumerated: usize = p.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(enumerated, cfg.param_count());
        assert_eq!(cfg.param_count(), 2 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 3 + 3);
        assert_eq!(cfg.param_count(), 133_123);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = SirenConfig::new(2, 1, 3, 16);
        let a = init_siren::<f64>(cfg, 5).unwrap();
        assert_eq!(a, init_siren::<f64>(cfg, 5).unwrap());
        assert_ne!(a, init_siren::<f64>(cfg, 6).unwrap());
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() <= 0.5));
        let bound = (6.0f64 / 16.0).sqrt() / 30.0;
        assert!(a.layers[1].weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_modulations_at_init() {
        let p = init_siren::<f32>(SirenConfig::new(2, 3, 4, 256), 1)
            .unwrap()
            .with_zero_modulations();
        let m = p.modulations.as_ref().unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|t| t.len() == 256 && t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn config_validation() {
        assert!(SirenConfig::new(2, 3, 1, 8).validate().is_err());
        assert!(SirenConfig::new(2, 3, 2, 0).validate().is_err());
        let mut c = SirenConfig::new(2, 3, 2, 8);
        c.omega0 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_unit_hand_evaluation() {
        let cfg = SirenConfig {
            in_dim: 1,
            out_dim: 1,
            depth: 2,
            width: 1,
            omega0: 30.0,
        };
        let p = ParameterSet::<f64> {
            config: cfg,
            layers: vec![
                Layer {
                    weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                    bias: Tensor::zeros(vec![1]),
                },
                Layer {
                    weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                    bias: Tensor::zeros(vec![1]),
                },
            ],
            modulations: Some(vec![Tensor::vector(vec![PI / (2.0 * 30.0)])]),
        };
        let y = p
            .evaluate(&Tensor::new(vec![1, 1], vec![0.0]).unwrap(), Some(&[Tensor::ones(vec![1])]))
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gates_equal_unmodulated_network() {
        let cfg = SirenConfig::new(2, 2, 3, 8);
        let base = init_siren::<f64>(cfg, 3).unwrap();
        let coords = Tensor::new(vec![3, 2], vec![-1.0, -1.0, 0.0, 0.5, 1.0, 0.2]).unwrap();
        let plain = base.evaluate(&coords, None).unwrap();
        let mut modded = base.clone().with_zero_modulations();
        for m in modded.modulations.as_mut().unwrap() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.7);
        }
        let zeros: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::zeros(vec![8])).collect();
        assert_eq!(modded.evaluate(&coords, Some(&zeros)).unwrap(), plain);
        // Unit gates with zero shifts also leave the output untouched.
        let ones: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::ones(vec![8])).collect();
        let zero_mod = base.clone().with_zero_modulations();
        assert_eq!(zero_mod.evaluate(&coords, Some(&ones)).unwrap(), plain);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = SirenConfig::new(2, 3, 3, 4);
        let mut p = init_siren::<f64>(cfg, 0).unwrap();
        let zeros = vec![0.0; p.param_count()];
        p.set_flat(&zeros).unwrap();
        let coords = Tensor::new(vec![2, 2], vec![0.3, -0.4, 1.0, 1.0]).unwrap();
        assert!(p.evaluate(&coords, None).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_length_mismatch_is_rejected() {
        let cfg = SirenConfig::new(2, 1, 2, 4);
        let p = init_siren::<f64>(cfg, 0).unwrap().with_zero_modulations();
        let coords = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let err = p.evaluate(&coords, Some(&[Tensor::ones(vec![3])])).unwrap_err();
        assert!(matches!(err, InrError::GateLength { layer: 0, expected: 4, got: 3 }));
    }

    #[test]
    fn loss_reductions() {
        let g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(vec![4, 1], vec![2.0, 3.0, 4.0, 5.0]).unwrap());
        let t = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(mse_loss(&p, &t, LossReduction::Sum).unwrap().item(), 4.0);
        assert_eq!(mse_loss(&p, &t, LossReduction::Mean).unwrap().item(), 1.0);
        assert_eq!(mse_loss(&p, &p, LossReduction::Sum).unwrap().item(), 0.0);
    }
}
