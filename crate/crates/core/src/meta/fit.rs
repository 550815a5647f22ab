use rayon::prelude::*;

use super::inner::{check_signal, predict, unroll, GateDraw, Leaves};
use super::{Adam, MetaConfig, MetaError, MetaState, Mode, Result, SparseDelta};
use crate::codec::psnr;
use crate::inr::{mean_squared_error, mse_loss, ParameterSet};
use crate::signals::Signal;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitOptimizer {
    /// Inner-loop updates: MetaSGD rates when present, otherwise the scalar
    /// learning rate.
    MetaSgd,
    /// Adam on the gated per-signal degrees of freedom.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: FitOptimizer,
}

impl FitOptions {
    /// The meta-training inner loop: `T` MetaSGD steps.
    pub fn inner(cfg: &MetaConfig) -> Self {
        FitOptions {
            steps: cfg.inner_steps,
            lr: cfg.inner_lr,
            optimizer: FitOptimizer::MetaSgd,
        }
    }

    pub fn adam(steps: usize, lr: f64) -> Self {
        FitOptions {
            steps,
            lr,
            optimizer: FitOptimizer::Adam,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub delta: SparseDelta,
    /// PSNR of the reconstruction rebuilt from `delta`.
    pub psnr: f64,
    /// Training loss before each step, then once after the last step.
    pub losses: Vec<f64>,
    pub params: ParameterSet<T>,
    pub reconstruction: Tensor<T>,
}

/// Test-time adaptation of one signal. Gates are fixed to the evaluation
/// gates (with `cfg.budget`), unless `cfg.adapt_gates_in_inner` is set and
/// the MetaSGD optimiser is used. Only per-signal quantities change; `θ0`
/// is never modified.
pub fn fit_signal<T: Real>(
    state: &MetaState<T>,
    signal: &Signal<T>,
    opts: FitOptions,
    cfg: &MetaConfig,
) -> Result<FitResult<T>> {
    if opts.steps == 0 {
        return Err(MetaError::Config("fit needs at least one step".into()));
    }
    check_signal(state, signal)?;
    let (adapted, gates, losses) = match opts.optimizer {
        FitOptimizer::MetaSgd => fit_inner(state, signal, opts, cfg)?,
        FitOptimizer::Adam => fit_adam(state, signal, opts, cfg)?,
    };
    let delta = extract_delta(state, &adapted, &gates)?;
    let params = state.apply_delta(&delta)?;
    let reconstruction = state.evaluate(&params, &signal.coords)?;
    let mse = mean_squared_error(&reconstruction, &signal.targets)?;
    Ok(FitResult {
        delta,
        psnr: psnr(mse).map_err(|e| MetaError::Config(e.to_string()))?,
        losses,
        params,
        reconstruction,
    })
}

type Fitted<T> = (Vec<Vec<T>>, Vec<Option<Vec<T>>>, Vec<f64>);

fn loss_value<T: Real>(
    state: &MetaState<T>,
    leaves: &Leaves<T>,
    adapted: &[Var<T>],
    gates: &[Option<Var<T>>],
    coords: &Var<T>,
    target: &Var<T>,
    cfg: &MetaConfig,
) -> Result<f64> {
    let pred = predict(state, leaves, adapted, gates, coords)?;
    Ok(mse_loss(&pred, target, cfg.loss)?.item().as_f64())
}

fn fit_inner<T: Real>(state: &MetaState<T>, signal: &Signal<T>, opts: FitOptions, cfg: &MetaConfig) -> Result<Fitted<T>> {
    let cfg = MetaConfig {
        inner_lr: opts.lr,
        unroll_budget: cfg.unroll_budget.max(opts.steps),
        ..cfg.clone()
    };
    let g = Graph::new();
    let leaves = Leaves::attach(state, &g, false);
    let coords = g.constant(signal.coords.clone());
    let target = g.constant(signal.targets.clone());
    let run = unroll(state, &cfg, &leaves, &coords, &target, GateDraw::Eval(cfg.budget), opts.steps, false)?;
    let mut losses = run.losses;
    losses.push(loss_value(state, &leaves, &run.adapted, &run.gates, &coords, &target, &cfg)?);
    let gates = run.gates.iter().map(|z| z.as_ref().map(|z| z.values().to_vec())).collect();
    let adapted = run.adapted.iter().map(|v| v.values().to_vec()).collect();
    Ok((adapted, gates, losses))
}

fn fit_adam<T: Real>(state: &MetaState<T>, signal: &Signal<T>, opts: FitOptions, cfg: &MetaConfig) -> Result<Fitted<T>> {
    let slots = state.slots();
    let eval = state.eval_gates(cfg.budget);
    let gate_views: Vec<Option<Vec<T>>> = if state.mode == Mode::DenseMaml {
        vec![None; slots.len()]
    } else {
        state.split_gated(&eval).iter().map(|v| v.map(<[T]>::to_vec)).collect()
    };
    let mut dof: Vec<T> = vec![T::zero(); state.adapted_len()];
    let mut adam = Adam::new(dof.len());
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for step in 0..=opts.steps {
        let g = Graph::new();
        let leaves = Leaves::attach(state, &g, false);
        let coords = g.constant(signal.coords.clone());
        let target = g.constant(signal.targets.clone());
        let dof_vars: Vec<Var<T>> = state
            .split_adapted(&dof)
            .iter()
            .zip(&slots)
            .map(|(v, s)| g.leaf(Tensor::new(s.shape.clone(), v.to_vec()).expect("slot shape")))
            .collect();
        let gates: Vec<Option<Var<T>>> = gate_views
            .iter()
            .zip(&slots)
            .map(|(z, s)| z.as_ref().map(|z| g.constant(Tensor::new(s.shape.clone(), z.clone()).expect("gate shape"))))
            .collect();
        let adapted: Vec<Var<T>> = match state.mode {
            Mode::StructuredModulations => dof_vars.clone(),
            _ => {
                let theta: Vec<&Var<T>> = leaves.theta.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
                theta
                    .iter()
                    .zip(&dof_vars)
                    .map(|(t, d)| t.add(d))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let pred = predict(state, &leaves, &adapted, &gates, &coords)?;
        let loss = mse_loss(&pred, &target, cfg.loss)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(MetaError::NonFiniteLoss);
        }
        losses.push(value);
        if step == opts.steps {
            break;
        }
        let wrt: Vec<&Var<T>> = dof_vars.iter().collect();
        let grads = g.grad_allow_unused(&loss, &wrt, false)?;
        let mut flat: Vec<T> = Vec::with_capacity(dof.len());
        for (gr, z) in grads.iter().zip(&gate_views) {
            let values = gr.values();
            match (state.mode, z) {
                (Mode::UnstructuredGradients, Some(z)) => flat.extend(values.iter().zip(z).map(|(a, b)| *a * *b)),
                _ => flat.extend(values.iter().copied()),
            }
        }
        adam.step(&mut dof, &flat, opts.lr);
    }
    let adapted: Vec<Vec<T>> = match state.mode {
        Mode::StructuredModulations => state.split_adapted(&dof).iter().map(|v| v.to_vec()).collect(),
        _ => state
            .theta0
            .tensors()
            .iter()
            .zip(state.split_adapted(&dof))
            .map(|(t, d)| t.data().iter().zip(d).map(|(a, b)| *a + *b).collect())
            .collect(),
    };
    Ok((adapted, gate_views, losses))
}

/// Support: entries with a non-zero gate (and parameter mask), plus any
/// entry that moved.
fn extract_delta<T: Real>(state: &MetaState<T>, adapted: &[Vec<T>], gates: &[Option<Vec<T>>]) -> Result<SparseDelta> {
    let base: Vec<&Tensor<T>> = state.theta0.tensors();
    let mask = state.param_mask.as_ref().map(|m| state.split_adapted(m));
    let structured = state.mode == Mode::StructuredModulations;
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut offset = 0u32;
    for (k, a) in adapted.iter().enumerate() {
        for (j, &v) in a.iter().enumerate() {
            let gate = gates[k].as_ref().map(|z| z[j]);
            let masked = !structured && mask.as_ref().is_some_and(|m| m[k][j] == T::zero());
            let (value, moved) = if structured {
                let z = gate.unwrap_or(T::one());
                let zm = z * v;
                (zm, zm != T::zero())
            } else {
                let d = v - base[k].data()[j];
                (d, d != T::zero())
            };
            let active = gate.is_none_or(|z| z != T::zero()) && !masked;
            if active || moved {
                indices.push(offset + j as u32);
                values.push(value.as_f64());
            }
        }
        offset += a.len() as u32;
    }
    Ok(SparseDelta {
        mode: state.mode,
        indices,
        values,
        fingerprint: state.fingerprint(),
    })
}

/// Mean PSNR over `signals` after the meta-training inner loop with
/// evaluation gates.
pub fn evaluate_psnr<T: Real>(state: &MetaState<T>, signals: &[Signal<T>], cfg: &MetaConfig) -> Result<f64> {
    let opts = FitOptions::inner(cfg);
    let scores: Vec<Result<f64>> = signals
        .par_iter()
        .map(|s| fit_signal(state, s, opts, cfg).map(|r| r.psnr))
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / signals.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::SirenConfig;
    use crate::signals::{synth_dataset, SynthKind};

    fn setup(mode: Mode) -> (MetaState<f64>, Signal<f64>, MetaConfig) {
        let cfg = MetaConfig::default();
        let state = MetaState::init(SirenConfig::new(2, 1, 3, 8), mode, &cfg, 9).unwrap();
        let s = synth_dataset(SynthKind::SineMix, 1, &[6, 6], 2).unwrap().remove(0);
        (state, s, cfg)
    }

    #[test]
    fn zero_gradient_gives_zero_values_on_the_active_set() {
        for mode in [Mode::UnstructuredGradients, Mode::StructuredModulations] {
            let (mut state, mut s, cfg) = setup(mode);
            let n = state.gate_count();
            let pinned: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
            state.pin_gates(pinned).unwrap();
            s.targets = state.base_prediction(&s.coords).unwrap();
            for opts in [FitOptions::adam(3, 1e-3), FitOptions::inner(&cfg)] {
                let r = fit_signal(&state, &s, opts, &cfg).unwrap();
                assert!(r.delta.values.iter().all(|&v| v == 0.0));
                assert_eq!(r.delta.len(), n.div_ceil(3));
                assert!(r.delta.indices.iter().all(|&i| i % 3 == 0));
            }
        }
    }

    #[test]
    fn structured_budget_sets_delta_length() {
        let (mut state, s, _) = setup(Mode::StructuredModulations);
        for (i, la) in state.gates0.log_alpha.iter_mut().enumerate() {
            *la = (i as f64 * 0.37).sin();
        }
        let cfg = MetaConfig {
            budget: Some(5),
            ..Default::default()
        };
        let theta = state.theta0.clone();
        let r = fit_signal(&state, &s, FitOptions::adam(10, 1e-2), &cfg).unwrap();
        assert_eq!(r.delta.len(), 5);
        assert_eq!(state.theta0, theta);
        assert!(r.losses.last().unwrap() <= &r.losses[0]);
    }

    #[test]
    fn delta_support_is_within_the_gates() {
        let (mut state, s, cfg) = setup(Mode::UnstructuredGradients);
        let mut z = state.eval_gates(None);
        for (i, v) in z.iter_mut().enumerate() {
            if i % 2 == 1 {
                *v = 0.0;
            }
        }
        state.pin_gates(z).unwrap();
        let r = fit_signal(&state, &s, FitOptions::adam(20, 1e-3), &cfg).unwrap();
        assert!(r.delta.indices.iter().all(|&i| i % 2 == 0));
        r.delta.validate().unwrap();
        assert!(r.losses.last().unwrap() < &r.losses[0]);
    }

    #[test]
    fn reported_psnr_matches_the_delta() {
        let (state, s, cfg) = setup(Mode::DenseMaml);
        let r = fit_signal(&state, &s, FitOptions::inner(&cfg), &cfg).unwrap();
        let p = state.apply_delta(&r.delta).unwrap();
        let recon = state.evaluate(&p, &s.coords).unwrap();
        let direct = psnr(mean_squared_error(&recon, &s.targets).unwrap()).unwrap();
        assert_eq!(direct, r.psnr);
        assert_eq!(r.delta.len(), state.theta0.param_count());
    }
}
