//! Hard-concrete gates for relaxed L0 regularisation.
//!
//! A gate is sampled by stretching a binary concrete variable to
//! `(stretch_lo, stretch_hi)` and clamping it to `[0, 1]`, which gives exact
//! zeros and ones while keeping the distribution parameters `log α`
//! differentiable. The expected number of non-zero gates has a closed form
//! that serves as the L0 penalty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Real, Result as TResult, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GateError {
    #[error("invalid hard-concrete parameters: {0}")]
    Params(String),
    #[error("gate groups do not partition {0} entries")]
    Partition(usize),
    #[error("{got} gates for a target of {expected}")]
    Length { expected: usize, got: usize },
}

/// Shape constants of the hard-concrete distribution and the allowed range
/// of `log α`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardConcrete {
    pub temperature: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    pub log_alpha_min: f64,
    pub log_alpha_max: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete {
            temperature: 2.0 / 3.0,
            stretch_lo: -0.1,
            stretch_hi: 1.1,
            log_alpha_min: (1e-2f64).ln(),
            log_alpha_max: (1e2f64).ln(),
        }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<(), GateError> {
        if !(self.temperature > 0.0 && self.temperature < 1.0) {
            return Err(GateError::Params(format!("temperature {} not in (0,1)", self.temperature)));
        }
        if !(self.stretch_lo < 0.0 && self.stretch_hi > 1.0) {
            return Err(GateError::Params(format!(
                "stretch ({}, {}) must contain [0, 1]",
                self.stretch_lo, self.stretch_hi
            )));
        }
        if !(self.log_alpha_min < self.log_alpha_max) {
            return Err(GateError::Params("empty log-alpha range".into()));
        }
        Ok(())
    }

    /// Stretched and clamped gate for a given pre-stretch value `s ∈ (0, 1)`.
    pub fn rectify(&self, s: f64) -> f64 {
        (s * (self.stretch_hi - self.stretch_lo) + self.stretch_lo).clamp(0.0, 1.0)
    }

    /// `P(z ≠ 0) = sigmoid(log α − β·ln(−γ/ζ))`.
    pub fn prob_nonzero(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.temperature * (-self.stretch_lo / self.stretch_hi).ln())
    }

    /// One reparameterised sample for uniform noise `u`.
    pub fn sample_one(&self, log_alpha: f64, u: f64) -> f64 {
        let s = sigmoid((logistic(u) + log_alpha) / self.temperature);
        self.rectify(s)
    }

    /// Noise-free test-time gate `clamp(sigmoid(log α)·(ζ−γ)+γ, 0, 1)`.
    pub fn deterministic_one(&self, log_alpha: f64) -> f64 {
        self.rectify(sigmoid(log_alpha))
    }
}

/// Where a gate vector is applied.
#[derive(Clone, Debug, PartialEq)]
pub enum GatePlacement {
    /// One gate per weight and bias.
    PerWeightAndBias,
    /// One gate per modulation entry, concatenated over layers.
    PerModulation,
    /// One gate shared by each declared index set.
    PerGroup { groups: Vec<Vec<usize>> },
    /// One gate per hidden activation.
    PerActivation,
    /// Gates masking inner-loop parameter updates.
    PerGradient,
}

impl GatePlacement {
    pub fn tag(&self) -> u8 {
        match self {
            GatePlacement::PerWeightAndBias => 0,
            GatePlacement::PerModulation => 1,
            GatePlacement::PerGroup { .. } => 2,
            GatePlacement::PerActivation => 3,
            GatePlacement::PerGradient => 4,
        }
    }
}

/// Distribution parameters `log α` of a gate vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HardConcreteGates<T> {
    pub log_alpha: Vec<T>,
    pub params: HardConcrete,
    pub placement: GatePlacement,
}

impl<T: Real> HardConcreteGates<T> {
    pub fn new(log_alpha: Vec<T>, params: HardConcrete, placement: GatePlacement) -> Result<Self, GateError> {
        params.validate()?;
        Ok(HardConcreteGates {
            log_alpha,
            params,
            placement,
        })
    }

    pub fn constant(n: usize, log_alpha: f64, params: HardConcrete, placement: GatePlacement) -> Result<Self, GateError> {
        Self::new(vec![T::from_f64_lossy(log_alpha); n], params, placement)
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    pub fn clamp_log_alpha(&mut self) {
        let (lo, hi) = (
            T::from_f64_lossy(self.params.log_alpha_min),
            T::from_f64_lossy(self.params.log_alpha_max),
        );
        for v in &mut self.log_alpha {
            *v = v.max(lo).min(hi);
        }
    }

    /// One Monte-Carlo sample per gate; `noise_seed` fixes the draw.
    pub fn sample(&self, noise_seed: u64) -> Vec<T> {
        let u = uniform_noise(self.len(), noise_seed, 0);
        self.sample_with(&u)
    }

    pub fn sample_with(&self, u: &[f64]) -> Vec<T> {
        self.log_alpha
            .iter()
            .zip(u)
            .map(|(la, &u)| T::from_f64_lossy(self.params.sample_one(la.as_f64(), u)))
            .collect()
    }

    pub fn deterministic(&self) -> Vec<T> {
        self.log_alpha
            .iter()
            .map(|la| T::from_f64_lossy(self.params.deterministic_one(la.as_f64())))
            .collect()
    }

    /// Expected number of non-zero gates.
    pub fn l0_penalty(&self) -> f64 {
        self.log_alpha.iter().map(|la| self.params.prob_nonzero(la.as_f64())).sum()
    }

    /// Fraction of gates whose deterministic value is exactly zero.
    pub fn expected_sparsity(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let active = self.deterministic().iter().filter(|z| **z != T::zero()).count();
        sparsity_from_counts(active, self.len())
    }
}

/// `1 − active/total`.
pub fn sparsity_from_counts(active: usize, total: usize) -> f64 {
    1.0 - active as f64 / total as f64
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln u − ln(1 − u)`.
fn logistic(u: f64) -> f64 {
    u.ln() - (1.0 - u).ln()
}

/// Uniform draws in `(1e-6, 1 − 1e-6)`. Distinct `stream`s give independent
/// sequences under the same seed.
pub fn uniform_noise(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect()
}

/// Recorded sample `clamp(sigmoid((L + log α)/β)·(ζ−γ)+γ, 0, 1)` with fixed
/// logistic noise `L` derived from `u`.
pub fn sample_var<T: Real>(log_alpha: &Var<T>, u: &[f64], params: &HardConcrete) -> TResult<Var<T>> {
    let g = log_alpha.graph();
    let noise: Vec<T> = u.iter().map(|&u| T::from_f64_lossy(logistic(u))).collect();
    let noise = g.constant(Tensor::new(log_alpha.shape(), noise)?);
    let s = log_alpha
        .add(&noise)?
        .scale(T::from_f64_lossy(1.0 / params.temperature))?
        .sigmoid()?;
    stretch_var(&s, params)
}

/// Recorded deterministic gate.
pub fn deterministic_var<T: Real>(log_alpha: &Var<T>, params: &HardConcrete) -> TResult<Var<T>> {
    stretch_var(&log_alpha.sigmoid()?, params)
}

fn stretch_var<T: Real>(s: &Var<T>, params: &HardConcrete) -> TResult<Var<T>> {
    s.affine(
        T::from_f64_lossy(params.stretch_hi - params.stretch_lo),
        T::from_f64_lossy(params.stretch_lo),
    )?
    .clamp(T::zero(), T::one())
}

/// Recorded L0 penalty `Σ sigmoid(log α − β·ln(−γ/ζ))`.
pub fn penalty_var<T: Real>(log_alpha: &Var<T>, params: &HardConcrete) -> TResult<Var<T>> {
    let shift = -params.temperature * (-params.stretch_lo / params.stretch_hi).ln();
    log_alpha
        .add_scalar(T::from_f64_lossy(shift))?
        .sigmoid()?
        .sum()
}

/// Expands a gate vector to a mask over `target_len` entries.
pub fn expand_gates<T: Real>(z: &[T], placement: &GatePlacement, target_len: usize) -> Result<Vec<T>, GateError> {
    match placement {
        GatePlacement::PerGroup { groups } => {
            if groups.len() != z.len() {
                return Err(GateError::Length {
                    expected: groups.len(),
                    got: z.len(),
                });
            }
            let mut mask = vec![None; target_len];
            for (gate, group) in z.iter().zip(groups) {
                for &i in group {
                    match mask.get_mut(i) {
                        Some(slot @ None) => *slot = Some(*gate),
                        _ => return Err(GateError::Partition(target_len)),
                    }
                }
            }
            mask.into_iter()
                .map(|m| m.ok_or(GateError::Partition(target_len)))
                .collect()
        }
        _ => {
            if z.len() != target_len {
                return Err(GateError::Length {
                    expected: target_len,
                    got: z.len(),
                });
            }
            Ok(z.to_vec())
        }
    }
}

/// Binary mask keeping the `k` largest entries of `log_alpha` (ties keep the
/// lower index).
pub fn top_k_mask<T: Real>(log_alpha: &[T], k: usize) -> Vec<T> {
    let mut order: Vec<usize> = (0..log_alpha.len()).collect();
    order.sort_by(|&a, &b| {
        log_alpha[b]
            .partial_cmp(&log_alpha[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![T::zero(); log_alpha.len()];
    for &i in order.iter().take(k) {
        mask[i] = T::one();
    }
    mask
}

/// Records each `log α` tensor on `g`, as leaves when `trainable`.
pub fn attach_log_alpha<T: Real>(g: &Graph<T>, log_alpha: &[Tensor<T>], trainable: bool) -> Vec<Var<T>> {
    log_alpha
        .iter()
        .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, FdOptions};

    fn hc() -> HardConcrete {
        HardConcrete::default()
    }

    #[test]
    fn median_noise_at_zero_log_alpha() {
        assert!((hc().sample_one(0.0, 0.5) - 0.5).abs() < 1e-15);
        assert!((hc().deterministic_one(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturation() {
        for u in [1e-6, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert_eq!(hc().sample_one(-1e6, u), 0.0);
        }
        // s̄ = sigmoid(15)·1.2 − 0.1 ≈ 1.1 before clamping.
        assert_eq!(hc().sample_one(10.0, 0.5), 1.0);
        assert_eq!(hc().deterministic_one(10.0), 1.0);
        // sigmoid(−3) = 0.0474 < 1/12.
        assert_eq!(hc().deterministic_one(-3.0), 0.0);
    }

    #[test]
    fn penalty_values() {
        assert!((hc().prob_nonzero(0.0) - 0.831_8).abs() < 5e-4);
        assert!((hc().prob_nonzero(0.5) - 0.890_8).abs() < 5e-4);
        assert!(hc().prob_nonzero(-1e3) < 1e-12);
    }

    #[test]
    fn penalty_is_monotone_and_differentiable() {
        let params = hc();
        let mut prev = 0.0;
        for i in -40..=40 {
            let p = params.prob_nonzero(i as f64 * 0.25);
            assert!(p > prev);
            prev = p;
        }
        let x = Tensor::vector(vec![-2.0, -0.3, 0.0, 0.5, 2.0, 4.0]);
        let err = finite_difference_check(|_, v| penalty_var(v, &params), &x, FdOptions::central(1e-5)).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn recorded_sampler_matches_scalar_sampler() {
        let g = Graph::<f64>::new();
        let la = vec![-2.0, 0.0, 0.5, 2.0];
        let gates = HardConcreteGates::new(la.clone(), hc(), GatePlacement::PerWeightAndBias).unwrap();
        let u = uniform_noise(4, 11, 0);
        let v = sample_var(&g.leaf(Tensor::vector(la)), &u, &hc()).unwrap();
        let plain = gates.sample_with(&u);
        for (a, b) in v.to_tensor().data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(plain.iter().all(|z| (0.0..=1.0).contains(z)));
    }

    #[test]
    fn sampled_gates_carry_gradient_to_log_alpha() {
        let g = Graph::<f64>::new();
        let la = g.leaf(Tensor::vector(vec![0.0]));
        let z = sample_var(&la, &[0.5], &hc()).unwrap().sum().unwrap();
        let d = g.grad(&z, &[&la], false).unwrap()[0].item();
        // dz/dlogα = 1.2 · s(1−s)/β at s = 0.5.
        assert!((d - 1.2 * 0.25 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn sparsity_accounting() {
        assert!((sparsity_from_counts(64, 7168) - 0.991).abs() < 5e-4);
        assert!((sparsity_from_counts(128, 7168) - 0.982).abs() < 5e-4);
        assert!((sparsity_from_counts(1024, 7168) - 0.857).abs() < 5e-4);
        let open = HardConcreteGates::<f64>::constant(10, 10.0, hc(), GatePlacement::PerModulation).unwrap();
        assert_eq!(open.expected_sparsity(), 0.0);
        let mut la = vec![4.0; 8];
        la[..6].iter_mut().for_each(|v| *v = -4.0);
        let g = HardConcreteGates::new(la, hc(), GatePlacement::PerModulation).unwrap();
        assert_eq!(g.expected_sparsity(), 0.75);
    }

    #[test]
    fn expansion() {
        let groups = GatePlacement::PerGroup {
            groups: vec![vec![0, 1, 2], vec![3, 4, 5]],
        };
        assert_eq!(expand_gates(&[1.0, 0.0], &groups, 6).unwrap(), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(expand_gates(&[1.0, 0.0], &groups, 7).unwrap_err(), GateError::Partition(7));
        let overlap = GatePlacement::PerGroup {
            groups: vec![vec![0, 1], vec![1, 2]],
        };
        assert!(expand_gates(&[1.0, 0.0], &overlap, 3).is_err());
        let z = vec![0.2, 0.0, 1.0];
        assert_eq!(expand_gates(&z, &GatePlacement::PerWeightAndBias, 3).unwrap(), z);
        let mods = vec![1.0f32; 14 * 512];
        assert_eq!(expand_gates(&mods, &GatePlacement::PerModulation, 7168).unwrap().len(), 7168);
        assert!(expand_gates(&z, &GatePlacement::PerGradient, 4).is_err());
    }

    #[test]
    fn clamping_and_top_k() {
        let mut g = HardConcreteGates::new(vec![-9.0, 0.0, 9.0], hc(), GatePlacement::PerModulation).unwrap();
        g.clamp_log_alpha();
        assert!((g.log_alpha[0] - (0.01f64).ln()).abs() < 1e-15);
        assert!((g.log_alpha[2] - (100f64).ln()).abs() < 1e-15);
        assert_eq!(top_k_mask(&[0.1, 0.5, 0.5, -1.0], 2), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(top_k_mask(&[0.3, 0.3, 0.3], 1), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn params_are_validated() {
        let mut p = hc();
        p.temperature = 1.5;
        assert!(p.validate().is_err());
        let mut p = hc();
        p.stretch_hi = 0.9;
        assert!(HardConcreteGates::<f64>::new(vec![], p, GatePlacement::PerModulation).is_err());
    }
}
