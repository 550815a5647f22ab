use super::{MetaConfig, MetaError, MetaState, Mode, Result};
use crate::gates::{deterministic_var, penalty_var, sample_var, uniform_noise};
use crate::inr::{forward, mse_loss, ForwardGates, LayerVars, ParameterSet};
use crate::signals::Signal;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Graph handles for the meta-parameters of one signal's computation.
pub(crate) struct Leaves<T> {
    pub theta: Vec<LayerVars<T>>,
    /// Per slot; present for gated slots when `log α` is learned.
    pub log_alpha: Vec<Option<Var<T>>>,
    pub lrs: Option<Vec<Var<T>>>,
    pub mask: Option<Vec<Var<T>>>,
}

impl<T: Real> Leaves<T> {
    pub fn attach(state: &MetaState<T>, g: &Graph<T>, trainable: bool) -> Self {
        let put = |v: &[T], shape: &[usize]| {
            let t = Tensor::new(shape.to_vec(), v.to_vec()).expect("slot shape");
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t)
            }
        };
        let slots = state.slots();
        let log_alpha = if state.learns_gates() {
            state
                .split_gated(&state.gates0.log_alpha)
                .iter()
                .zip(&slots)
                .map(|(v, s)| v.map(|v| put(v, &s.shape)))
                .collect()
        } else {
            vec![None; slots.len()]
        };
        let lrs = (!state.metasgd_lr.is_empty()).then(|| {
            state
                .split_adapted(&state.metasgd_lr)
                .iter()
                .zip(&slots)
                .map(|(v, s)| put(v, &s.shape))
                .collect()
        });
        Leaves {
            theta: state.theta0.attach(g, trainable),
            log_alpha,
            lrs,
            mask: state.attach_mask(g),
        }
    }

    /// Leaves in the order `[θ tensors, log α slots, MetaSGD slots]`.
    pub fn trainable(&self) -> Vec<&Var<T>> {
        let mut out: Vec<&Var<T>> = self.theta.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.extend(self.log_alpha.iter().flatten());
        if let Some(l) = &self.lrs {
            out.extend(l.iter());
        }
        out
    }
}

/// How gates are drawn for one inner loop.
#[derive(Clone, Copy)]
pub(crate) enum GateDraw<'a> {
    /// Hard-concrete sample with this uniform noise (gated entries only).
    Sample(&'a [f64]),
    /// Evaluation gates, optionally with a top-k budget.
    Eval(Option<usize>),
}

pub(crate) struct Unrolled<T> {
    pub adapted: Vec<Var<T>>,
    pub gates: Vec<Option<Var<T>>>,
    pub log_alpha: Vec<Option<Var<T>>>,
    pub losses: Vec<f64>,
}

pub(crate) fn initial_adapted<T: Real>(state: &MetaState<T>, leaves: &Leaves<T>, g: &Graph<T>) -> Vec<Var<T>> {
    match state.mode {
        Mode::StructuredModulations => state.slots().iter().map(|s| g.leaf(Tensor::zeros(s.shape.clone()))).collect(),
        _ => leaves
            .theta
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect(),
    }
}

/// Network output for adapted slots and gates.
pub(crate) fn predict<T: Real>(
    state: &MetaState<T>,
    leaves: &Leaves<T>,
    adapted: &[Var<T>],
    gates: &[Option<Var<T>>],
    coords: &Var<T>,
) -> Result<Var<T>> {
    let config = state.config();
    let mask = leaves.mask.as_deref();
    Ok(match state.mode {
        Mode::StructuredModulations => {
            let z: Vec<Var<T>> = gates.iter().map(|z| z.clone().expect("structured slots are gated")).collect();
            forward(
                config,
                &leaves.theta,
                coords,
                ForwardGates {
                    shifts: Some(adapted),
                    shift_gates: Some(&z),
                    param_gates: mask,
                    ..Default::default()
                },
            )?
        }
        _ => {
            let layers: Vec<LayerVars<T>> = adapted
                .chunks(2)
                .map(|p| LayerVars {
                    weight: p[0].clone(),
                    bias: p[1].clone(),
                })
                .collect();
            forward(
                config,
                &layers,
                coords,
                ForwardGates {
                    param_gates: mask,
                    ..Default::default()
                },
            )?
        }
    })
}

fn draw_gates<T: Real>(
    state: &MetaState<T>,
    g: &Graph<T>,
    log_alpha: &[Option<Var<T>>],
    draw: GateDraw<'_>,
    adapting: bool,
) -> Result<Vec<Option<Var<T>>>> {
    let slots = state.slots();
    if state.mode == Mode::DenseMaml {
        return Ok(vec![None; slots.len()]);
    }
    let fixed = |values: Vec<T>| -> Vec<Option<Var<T>>> {
        state
            .split_gated(&values)
            .iter()
            .zip(&slots)
            .map(|(v, s)| v.map(|v| g.constant(Tensor::new(s.shape.clone(), v.to_vec()).expect("gate shape"))))
            .collect()
    };
    if let Some(p) = &state.pinned_gates {
        return Ok(fixed(p.clone()));
    }
    let hc = &state.gates0.params;
    match draw {
        GateDraw::Eval(budget) if !adapting => Ok(fixed(state.eval_gates(budget))),
        GateDraw::Eval(_) => log_alpha
            .iter()
            .map(|la| la.as_ref().map(|la| deterministic_var(la, hc)).transpose().map_err(Into::into))
            .collect(),
        GateDraw::Sample(u) => {
            let mut offset = 0;
            log_alpha
                .iter()
                .map(|la| match la {
                    Some(la) => {
                        let n = la.len();
                        let z = sample_var(la, &u[offset..offset + n], hc)?;
                        offset += n;
                        Ok(Some(z))
                    }
                    None => Ok(None),
                })
                .collect()
        }
    }
}

/// Sum of the L0 penalty over gated slots.
pub(crate) fn total_penalty<T: Real>(
    state: &MetaState<T>,
    log_alpha: &[Option<Var<T>>],
) -> Result<Option<Var<T>>> {
    let mut acc: Option<Var<T>> = None;
    for la in log_alpha.iter().flatten() {
        let p = penalty_var(la, &state.gates0.params)?;
        acc = Some(match acc {
            Some(a) => a.add(&p)?,
            None => p,
        });
    }
    Ok(acc)
}

/// Records `steps` inner updates on `g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unroll<T: Real>(
    state: &MetaState<T>,
    cfg: &MetaConfig,
    leaves: &Leaves<T>,
    coords: &Var<T>,
    target: &Var<T>,
    draw: GateDraw<'_>,
    steps: usize,
    create_graph: bool,
) -> Result<Unrolled<T>> {
    if steps > cfg.unroll_budget {
        return Err(MetaError::UnrollBudget {
            steps,
            budget: cfg.unroll_budget,
        });
    }
    let g = coords.graph();
    let adapting = cfg.adapt_gates_in_inner
        && state.learns_gates()
        && !matches!(draw, GateDraw::Eval(Some(_)));
    let mut adapted = initial_adapted(state, leaves, g);
    let mut log_alpha = leaves.log_alpha.clone();
    let mut gates = draw_gates(state, g, &log_alpha, draw, adapting)?;
    let mut losses = Vec::with_capacity(steps);
    let beta = T::from_f64_lossy(cfg.inner_lr);
    let lambda = T::from_f64_lossy(cfg.lambda);
    for _ in 0..steps {
        let pred = predict(state, leaves, &adapted, &gates, coords)?;
        let mut loss = mse_loss(&pred, target, cfg.loss)?;
        if adapting && cfg.lambda > 0.0 {
            if let Some(p) = total_penalty(state, &log_alpha)? {
                loss = loss.add(&p.scale(lambda)?)?;
            }
        }
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(MetaError::NonFiniteLoss);
        }
        losses.push(value);
        let mut wrt: Vec<&Var<T>> = adapted.iter().collect();
        if adapting {
            wrt.extend(log_alpha.iter().flatten());
        }
        let grads = g.grad_allow_unused(&loss, &wrt, create_graph)?;
        let (param_grads, gate_grads) = grads.split_at(adapted.len());
        let mut next = Vec::with_capacity(adapted.len());
        for (i, (x, gi)) in adapted.iter().zip(param_grads).enumerate() {
            let gi = match (&state.mode, &gates[i]) {
                (Mode::UnstructuredGradients, Some(z)) => gi.mul(z)?,
                _ => gi.clone(),
            };
            let update = match &leaves.lrs {
                Some(lrs) => lrs[i].mul(&gi)?,
                None => gi.scale(beta)?,
            };
            next.push(x.sub(&update)?);
        }
        adapted = next;
        if adapting {
            for (la, grad) in log_alpha.iter_mut().flatten().zip(gate_grads.iter()) {
                *la = la.sub(&grad.scale(beta)?)?;
            }
            gates = draw_gates(state, g, &log_alpha, draw, true)?;
        }
    }
    Ok(Unrolled {
        adapted,
        gates,
        log_alpha,
        losses,
    })
}

pub(crate) fn check_signal<T: Real>(state: &MetaState<T>, signal: &Signal<T>) -> Result<()> {
    let c = state.config();
    if signal.in_dim() != c.in_dim || signal.out_dim() != c.out_dim {
        return Err(MetaError::Modality(format!(
            "signal {} is {}→{}, network is {}→{}",
            signal.id,
            signal.in_dim(),
            signal.out_dim(),
            c.in_dim,
            c.out_dim
        )));
    }
    Ok(())
}

/// Result of one inner loop.
#[derive(Clone, Debug)]
pub struct Adaptation<T> {
    /// Adapted network; structured mode carries the gated modulations.
    pub params: ParameterSet<T>,
    /// Gates used, concatenated over gated slots (empty in dense mode).
    pub gates: Vec<T>,
    /// Loss before each inner step.
    pub losses: Vec<f64>,
}

/// Runs `cfg.inner_steps` inner updates on one signal. `noise_seed` draws
/// training gates; `None` uses evaluation gates (with `cfg.budget`).
pub fn inner_loop<T: Real>(
    state: &MetaState<T>,
    signal: &Signal<T>,
    cfg: &MetaConfig,
    noise_seed: Option<u64>,
) -> Result<Adaptation<T>> {
    check_signal(state, signal)?;
    let g = Graph::new();
    let leaves = Leaves::attach(state, &g, false);
    let coords = g.constant(signal.coords.clone());
    let target = g.constant(signal.targets.clone());
    let noise = noise_seed.map(|s| uniform_noise(state.gate_count(), s, 0));
    let draw = match &noise {
        Some(u) => GateDraw::Sample(u),
        None => GateDraw::Eval(cfg.budget),
    };
    let run = unroll(state, cfg, &leaves, &coords, &target, draw, cfg.inner_steps, false)?;
    let gates: Vec<T> = run
        .gates
        .iter()
        .flatten()
        .flat_map(|z| z.values().iter().copied().collect::<Vec<_>>())
        .collect();
    let mut params = state.theta0.clone();
    match state.mode {
        Mode::StructuredModulations => {
            let mods = run
                .adapted
                .iter()
                .zip(&run.gates)
                .map(|(m, z)| {
                    let z = z.as_ref().expect("structured slots are gated");
                    Ok(m.mul(z)?.to_tensor())
                })
                .collect::<Result<Vec<_>>>()?;
            params.modulations = Some(mods);
        }
        _ => {
            for (t, v) in params.tensors_mut().into_iter().zip(&run.adapted) {
                *t = v.to_tensor();
            }
        }
    }
    Ok(Adaptation {
        params,
        gates,
        losses: run.losses,
    })
}
