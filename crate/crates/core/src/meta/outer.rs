use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::inner::{predict, total_penalty, unroll, GateDraw, Leaves};
use super::state::OuterOptimizer;
use super::{evaluate_psnr, inner::check_signal, mix_seed, Adam, MetaConfig, MetaError, MetaState, Result};
use crate::gates::uniform_noise;
use crate::inr::mse_loss;
use crate::signals::Signal;
use crate::tensor::{Graph, Real, Var};

/// Gradient of the outer objective, averaged over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterGradient<T> {
    /// Batch mean of the objective (task loss plus penalty).
    pub objective: f64,
    /// Batch mean of the post-adaptation task loss.
    pub task_loss: f64,
    /// `θ0` in layout order.
    pub theta: Vec<T>,
    /// `log α`; empty when gates are not learned.
    pub log_alpha: Vec<T>,
    /// MetaSGD rates; empty when MetaSGD is off.
    pub metasgd: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub task_loss: f64,
    /// `Σ P(z ≠ 0)` at the gate parameters before the step.
    pub penalty: f64,
    pub expected_sparsity: f64,
    /// Norm of the averaged gradient before clipping.
    pub grad_norm: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: u64,
    pub task_loss: Option<f64>,
    pub penalty: f64,
    pub expected_sparsity: f64,
    pub eval_psnr: Option<f64>,
}

struct SignalGrad<T> {
    objective: f64,
    task: f64,
    grads: Vec<Vec<T>>,
}

fn signal_gradient<T: Real>(
    state: &MetaState<T>,
    cfg: &MetaConfig,
    signal: &Signal<T>,
    noise_seed: u64,
    position: usize,
) -> Result<SignalGrad<T>> {
    check_signal(state, signal)?;
    let g = Graph::new();
    let leaves = Leaves::attach(state, &g, true);
    let coords = g.constant(signal.coords.clone());
    let target = g.constant(signal.targets.clone());
    let learns = state.learns_gates();
    let scale = T::from_f64_lossy(1.0 / cfg.mc_samples as f64);
    let lambda = T::from_f64_lossy(cfg.lambda);
    let mut objective: Option<Var<T>> = None;
    let mut task_total = 0.0;
    for s in 0..cfg.mc_samples {
        let u = if learns {
            uniform_noise(state.gate_count(), noise_seed, (position * cfg.mc_samples + s) as u64)
        } else {
            Vec::new()
        };
        let run = unroll(
            state,
            cfg,
            &leaves,
            &coords,
            &target,
            GateDraw::Sample(&u),
            cfg.inner_steps,
            !cfg.first_order,
        )?;
        let pred = predict(state, &leaves, &run.adapted, &run.gates, &coords)?;
        let task = mse_loss(&pred, &target, cfg.loss)?;
        task_total += task.item().as_f64();
        let mut term = task;
        if learns && cfg.lambda > 0.0 {
            if let Some(p) = total_penalty(state, &run.log_alpha)? {
                term = term.add(&p.scale(lambda)?)?;
            }
        }
        let term = term.scale(scale)?;
        objective = Some(match objective {
            Some(o) => o.add(&term)?,
            None => term,
        });
    }
    let objective = objective.expect("mc_samples >= 1");
    let value = objective.item().as_f64();
    if !value.is_finite() {
        return Err(MetaError::NonFiniteLoss);
    }
    let grads = g.grad_allow_unused(&objective, &leaves.trainable(), false)?;
    Ok(SignalGrad {
        objective: value,
        task: task_total / cfg.mc_samples as f64,
        grads: grads.iter().map(|v| v.values().to_vec()).collect(),
    })
}

/// Outer objective and its gradient through the unrolled inner loops,
/// averaged over `batch` in index order. Signals are processed in parallel
/// on independent graphs.
pub fn outer_gradient<T: Real>(
    state: &MetaState<T>,
    batch: &[&Signal<T>],
    cfg: &MetaConfig,
    noise_seed: u64,
) -> Result<OuterGradient<T>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(MetaError::Config("empty batch".into()));
    }
    let results: Vec<Result<SignalGrad<T>>> = batch
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            signal_gradient(state, cfg, s, noise_seed, k).map_err(|e| MetaError::Signal {
                index: k,
                id: s.id.clone(),
                source: Box::new(e),
            })
        })
        .collect();
    let mut sum: Option<Vec<Vec<T>>> = None;
    let (mut objective, mut task) = (0.0, 0.0);
    for r in results {
        let r = r?;
        objective += r.objective;
        task += r.task;
        sum = Some(match sum {
            None => r.grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x = *x + *y;
                    }
                }
                acc
            }
        });
    }
    let n = batch.len() as f64;
    let inv = T::from_f64_lossy(1.0 / n);
    let mut parts = sum.expect("non-empty batch").into_iter();
    let mut take = |count: usize| -> Vec<T> {
        parts
            .by_ref()
            .take(count)
            .flat_map(|v| v.into_iter().map(|x| x * inv))
            .collect()
    };
    let slots = state.slots();
    let theta = take(2 * state.config().depth);
    let log_alpha = if state.learns_gates() {
        take(slots.iter().filter(|s| s.gated).count())
    } else {
        Vec::new()
    };
    let metasgd = if state.metasgd_lr.is_empty() {
        Vec::new()
    } else {
        take(slots.len())
    };
    Ok(OuterGradient {
        objective: objective / n,
        task_loss: task / n,
        theta,
        log_alpha,
        metasgd,
    })
}

/// One outer update: batch gradient, global-norm clipping, Adam on `θ0`,
/// `log α` (at `outer_lr × log_alpha_lr_factor`) and MetaSGD rates, then
/// re-clamping. The state is untouched when any signal fails.
pub fn outer_step<T: Real>(
    state: &mut MetaState<T>,
    batch: &[&Signal<T>],
    cfg: &MetaConfig,
    noise_seed: u64,
) -> Result<StepMetrics> {
    let penalty = state.gates0.l0_penalty();
    let mut grad = outer_gradient(state, batch, cfg, noise_seed)?;
    let norm = [&grad.theta, &grad.log_alpha, &grad.metasgd]
        .iter()
        .flat_map(|v| v.iter())
        .map(|x| x.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if let Some(clip) = cfg.grad_clip {
        if norm > clip {
            let f = T::from_f64_lossy(clip / norm);
            for v in [&mut grad.theta, &mut grad.log_alpha, &mut grad.metasgd] {
                for x in v.iter_mut() {
                    *x = *x * f;
                }
            }
        }
    }
    let n_theta = state.theta0.param_count();
    let fresh = || OuterOptimizer {
        theta: Adam::new(n_theta),
        log_alpha: Adam::new(grad.log_alpha.len()),
        metasgd: Adam::new(grad.metasgd.len()),
    };
    let mut opt = match state.optimizer.take() {
        Some(o) if o.log_alpha.len() == grad.log_alpha.len() && o.metasgd.len() == grad.metasgd.len() => o,
        _ => fresh(),
    };
    let mut theta = state.theta0.flat();
    opt.theta.step(&mut theta, &grad.theta, cfg.outer_lr);
    state.theta0.set_flat(&theta)?;
    if !grad.log_alpha.is_empty() {
        opt.log_alpha
            .step(&mut state.gates0.log_alpha, &grad.log_alpha, cfg.outer_lr * cfg.log_alpha_lr_factor);
        state.gates0.clamp_log_alpha();
    }
    if !grad.metasgd.is_empty() {
        opt.metasgd.step(&mut state.metasgd_lr, &grad.metasgd, cfg.outer_lr);
        for r in state.metasgd_lr.iter_mut() {
            *r = r.max(T::zero()).min(T::one());
        }
    }
    state.optimizer = Some(opt);
    state.step += 1;
    Ok(StepMetrics {
        task_loss: grad.task_loss,
        penalty,
        expected_sparsity: state.gates0.expected_sparsity(),
        grad_norm: norm,
    })
}

/// Thread pool sized by `MSCN_THREADS`, when set.
pub fn thread_pool() -> Option<rayon::ThreadPool> {
    let n: usize = std::env::var("MSCN_THREADS").ok()?.trim().parse().ok()?;
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().ok()
}

/// [`meta_train_with`] without a per-record hook.
pub fn meta_train<T: Real>(
    init: MetaState<T>,
    train: &[Signal<T>],
    heldout: &[Signal<T>],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<(MetaState<T>, Vec<LogRecord>)> {
    meta_train_with(init, train, heldout, cfg, seed, |_, _| Ok(()))
}

/// Runs `cfg.outer_steps` outer steps on batches drawn without replacement
/// from `train`. Held-out PSNR is logged before training, every
/// `cfg.eval_every` steps and at the end. `hook` sees every record.
pub fn meta_train_with<T: Real>(
    init: MetaState<T>,
    train: &[Signal<T>],
    heldout: &[Signal<T>],
    cfg: &MetaConfig,
    seed: u64,
    mut hook: impl FnMut(&MetaState<T>, &LogRecord) -> Result<()> + Send,
) -> Result<(MetaState<T>, Vec<LogRecord>)> {
    cfg.validate()?;
    if train.is_empty() && cfg.outer_steps > 0 {
        return Err(MetaError::Config("empty training set".into()));
    }
    if let Some(s) = train.iter().chain(heldout).find(|s| s.modality != train.first().unwrap_or(s).modality) {
        return Err(MetaError::Modality(format!("signal {} has modality {}", s.id, s.modality)));
    }
    let run = move || -> Result<(MetaState<T>, Vec<LogRecord>)> {
        let mut state = init;
        let mut log = Vec::new();
        let eval = |state: &MetaState<T>| -> Result<Option<f64>> {
            if heldout.is_empty() {
                Ok(None)
            } else {
                evaluate_psnr(state, heldout, cfg).map(Some)
            }
        };
        let first = LogRecord {
            step: state.step,
            task_loss: None,
            penalty: state.gates0.l0_penalty(),
            expected_sparsity: state.gates0.expected_sparsity(),
            eval_psnr: eval(&state)?,
        };
        hook(&state, &first)?;
        log.push(first);
        for k in 0..cfg.outer_steps {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2 * k as u64));
            let mut idx = rand::seq::index::sample(&mut rng, train.len(), cfg.batch_size.min(train.len())).into_vec();
            idx.sort_unstable();
            let batch: Vec<&Signal<T>> = idx.iter().map(|&i| &train[i]).collect();
            let m = outer_step(&mut state, &batch, cfg, mix_seed(seed, 2 * k as u64 + 1))?;
            if !(m.task_loss <= cfg.divergence_threshold) {
                return Err(MetaError::Diverged {
                    step: state.step,
                    loss: m.task_loss,
                });
            }
            let last = k + 1 == cfg.outer_steps;
            let due = cfg.eval_every > 0 && (k + 1) % cfg.eval_every == 0;
            let record = LogRecord {
                step: state.step,
                task_loss: Some(m.task_loss),
                penalty: m.penalty,
                expected_sparsity: m.expected_sparsity,
                eval_psnr: if last || due { eval(&state)? } else { None },
            };
            hook(&state, &record)?;
            log.push(record);
        }
        Ok((state, log))
    };
    match thread_pool() {
        Some(pool) => pool.install(run),
        None => run(),
    }
}

/// Two-phase training for a gate budget `k = cfg.budget`: the first half of
/// `cfg.outer_steps` learns gates under the L0 objective, then the top-k
/// binary mask by `log α` is pinned and the rest of the schedule trains
/// `θ0` and the MetaSGD rates under that mask. Without a budget, or when the
/// state does not learn gates, this is [`meta_train_with`].
pub fn meta_train_budgeted<T: Real>(
    init: MetaState<T>,
    train: &[Signal<T>],
    heldout: &[Signal<T>],
    cfg: &MetaConfig,
    seed: u64,
    mut hook: impl FnMut(&MetaState<T>, &LogRecord) -> Result<()> + Send,
) -> Result<(MetaState<T>, Vec<LogRecord>)> {
    let k = match cfg.budget {
        Some(k) if init.learns_gates() => k,
        _ => return meta_train_with(init, train, heldout, cfg, seed, hook),
    };
    let first = MetaConfig {
        outer_steps: cfg.outer_steps / 2,
        ..cfg.clone()
    };
    let (mut state, mut log) = meta_train_with(init, train, heldout, &first, seed, &mut hook)?;
    state.pin_gates(state.eval_gates(Some(k)))?;
    let second = MetaConfig {
        outer_steps: cfg.outer_steps - first.outer_steps,
        ..cfg.clone()
    };
    let mut skipped = false;
    let (state, rest) = meta_train_with(state, train, heldout, &second, mix_seed(seed, 0x005E_C04D), |s, r| {
        if !skipped {
            skipped = true;
            return Ok(());
        }
        hook(s, r)
    })?;
    log.extend(rest.into_iter().skip(1));
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::SirenConfig;
    use crate::meta::Mode;
    use crate::signals::{synth_dataset, SynthKind};
    use crate::tensor::Tensor;

    fn data(n: usize) -> Vec<Signal<f64>> {
        synth_dataset(SynthKind::SineMix, n, &[6, 6], 3).unwrap()
    }

    #[test]
    fn budgeted_training_pins_the_top_k() {
        let cfg = MetaConfig {
            outer_steps: 4,
            eval_every: 0,
            budget: Some(5),
            ..Default::default()
        };
        let init = MetaState::<f64>::init(SirenConfig::new(2, 1, 3, 4), Mode::StructuredModulations, &cfg, 2).unwrap();
        let mut seen = Vec::new();
        let (out, log) = meta_train_budgeted(init, &data(4), &data(2), &cfg, 2, |_, r| {
            seen.push(r.step);
            Ok(())
        })
        .unwrap();
        let pinned = out.pinned_gates.as_ref().unwrap();
        assert_eq!(pinned.iter().filter(|&&z| z == 1.0).count(), 5);
        assert_eq!(out.step, 4);
        let steps: Vec<u64> = log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3, 4]);
        assert_eq!(seen, steps);
    }

    #[test]
    fn zero_steps_return_the_initial_state() {
        let cfg = MetaConfig {
            outer_steps: 0,
            ..Default::default()
        };
        let init = MetaState::<f64>::init(SirenConfig::new(2, 1, 3, 8), Mode::UnstructuredGradients, &cfg, 1).unwrap();
        let (out, log) = meta_train(init.clone(), &data(4), &data(2), &cfg, 1).unwrap();
        assert_eq!(out, init);
        assert_eq!(log.len(), 1);
        assert!(log[0].eval_psnr.is_some());
    }

    #[test]
    fn penalty_alone_lowers_log_alpha() {
        // Zero network output on a zero signal: no task gradient at all.
        let cfg = MetaConfig {
            lambda: 0.1,
            ..Default::default()
        };
        let mut state =
            MetaState::<f64>::init(SirenConfig::new(2, 1, 3, 8), Mode::UnstructuredGradients, &cfg, 4).unwrap();
        let mut params = state.theta0.clone();
        params.layers.last_mut().unwrap().weight = Tensor::zeros(params.layers.last().unwrap().weight.shape().to_vec());
        state.theta0 = params;
        let mut signal = data(1).remove(0);
        signal.targets = Tensor::zeros(signal.targets.shape().to_vec());
        let before = state.gates0.log_alpha.clone();
        let grad = outer_gradient(&state, &[&signal], &cfg, 0).unwrap();
        assert_eq!(grad.task_loss, 0.0);
        // Closed form: λ·σ'(log α − β ln(−γ/ζ)) > 0 for every gate.
        let hc = state.gates0.params;
        let shift = -hc.temperature * (-hc.stretch_lo / hc.stretch_hi).ln();
        for (g, la) in grad.log_alpha.iter().zip(&before) {
            let s = 1.0 / (1.0 + (-(la + shift)).exp());
            assert!((g - 0.1 * s * (1.0 - s)).abs() < 1e-12);
        }
        outer_step(&mut state, &[&signal], &cfg, 0).unwrap();
        assert!(state.gates0.log_alpha.iter().zip(&before).all(|(a, b)| a < b));
    }

    #[test]
    fn rates_stay_in_range() {
        let cfg = MetaConfig {
            outer_lr: 0.5,
            metasgd_init: Some((0.9, 1.0)),
            ..Default::default()
        };
        let mut state =
            MetaState::<f64>::init(SirenConfig::new(2, 1, 3, 8), Mode::StructuredModulations, &cfg, 4).unwrap();
        let set = data(3);
        let batch: Vec<&Signal<f64>> = set.iter().collect();
        for k in 0..5 {
            outer_step(&mut state, &batch, &cfg, k).unwrap();
            assert!(state.metasgd_lr.iter().all(|r| (0.0..=1.0).contains(r)));
            let hc = state.gates0.params;
            assert!(state
                .gates0
                .log_alpha
                .iter()
                .all(|l| (hc.log_alpha_min..=hc.log_alpha_max).contains(l)));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = MetaConfig {
            outer_steps: 3,
            eval_every: 0,
            ..Default::default()
        };
        let train = data(5);
        let run = || {
            let init =
                MetaState::<f64>::init(SirenConfig::new(2, 1, 3, 8), Mode::UnstructuredGradients, &cfg, 2).unwrap();
            meta_train(init, &train, &[], &cfg, 2).unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.to_bytes(crate::inr::Dtype::F64), b.to_bytes(crate::inr::Dtype::F64));
        assert_eq!(la, lb);
        assert_eq!(a.step, 3);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = MetaConfig {
            outer_steps: 1,
            divergence_threshold: 1e-12,
            ..Default::default()
        };
        let init = MetaState::<f64>::init(SirenConfig::new(2, 1, 3, 8), Mode::DenseMaml, &cfg, 2).unwrap();
        assert!(matches!(
            meta_train(init, &data(3), &[], &cfg, 2),
            Err(MetaError::Diverged { step: 1, .. })
        ));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let cfg = MetaConfig::default();
        let mut s = MetaState::<f64>::init(SirenConfig::new(2, 1, 3, 8), Mode::DenseMaml, &cfg, 2).unwrap();
        assert!(outer_step(&mut s, &[], &cfg, 0).is_err());
    }
}
