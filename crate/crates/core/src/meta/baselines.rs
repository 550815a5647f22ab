use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::prune::kept;
use super::{
    fit_signal, imp_schedule, magnitude_prune, meta_train, mix_seed, FitOptions, MetaConfig, MetaState, Mode, Result,
};
use crate::codec::psnr;
use crate::inr::{mean_squared_error, SirenConfig};
use crate::signals::Signal;
use crate::tensor::Real;

/// Largest sparsity handed to the pruning baselines by [`lambda_sweep`].
const MAX_SWEEP_SPARSITY: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Dense MAML on a fixed uniformly random parameter mask.
    RandomPrune,
    /// Dense MAML; adapted weights pruned once by magnitude.
    MamlOneShot,
    /// Dense MAML; adapted weights iteratively pruned and re-fitted.
    MamlImp,
    /// Dense MAML on a narrower network with the same parameter count.
    DenseNarrow,
    /// The narrow network fitted from random initialisation.
    Scratch,
    /// Unstructured sparse-gradient meta-learning with a top-k gate budget.
    Mscn,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::RandomPrune,
        Baseline::MamlOneShot,
        Baseline::MamlImp,
        Baseline::DenseNarrow,
        Baseline::Scratch,
        Baseline::Mscn,
    ];
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::RandomPrune => "random_prune",
            Baseline::MamlOneShot => "maml_oneshot",
            Baseline::MamlImp => "maml_imp",
            Baseline::DenseNarrow => "dense_narrow",
            Baseline::Scratch => "scratch",
            Baseline::Mscn => "mscn",
        })
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Clone, Debug)]
pub struct BaselineOptions {
    pub siren: SirenConfig,
    /// Meta-training schedule shared by every meta-learned method.
    pub meta: MetaConfig,
    pub seeds: Vec<u64>,
    /// Test-time fitting for meta-learned methods.
    pub fit: FitOptions,
    /// Test-time fitting for [`Baseline::Scratch`].
    pub scratch_fit: FitOptions,
    pub imp_rounds: usize,
    pub methods: Vec<Baseline>,
}

impl BaselineOptions {
    pub fn new(siren: SirenConfig, meta: MetaConfig) -> Self {
        BaselineOptions {
            siren,
            fit: FitOptions::inner(&meta),
            scratch_fit: FitOptions::adam(100, 1e-3),
            meta,
            seeds: vec![0, 1, 2],
            imp_rounds: 3,
            methods: Baseline::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRow {
    pub method: Baseline,
    pub sparsity: f64,
    pub psnr_mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub psnr_std: f64,
    pub runs: usize,
}

/// Binary mask with exactly `k` ones at uniformly random positions.
pub fn random_mask<T: Real>(n: usize, k: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![T::zero(); n];
    for i in sample(&mut rng, n, k.min(n)) {
        mask[i] = T::one();
    }
    mask
}

/// Width whose dense parameter count is closest to `target` (ties keep the
/// narrower network).
pub fn dense_narrow_width(base: &SirenConfig, target: usize) -> usize {
    let count = |w: usize| SirenConfig { width: w, ..*base }.param_count();
    (1..=base.width.max(1))
        .min_by_key(|&w| (count(w) as i64 - target as i64).unsigned_abs())
        .unwrap_or(1)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn mean_psnr<T: Real>(state: &MetaState<T>, test: &[Signal<T>], fit: FitOptions, cfg: &MetaConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in test {
        total += fit_signal(state, s, fit, cfg)?.psnr;
    }
    Ok(total / test.len().max(1) as f64)
}

fn masked_psnr<T: Real>(state: &MetaState<T>, signal: &Signal<T>) -> Result<f64> {
    let recon = state.base_prediction(&signal.coords)?;
    let mse = mean_squared_error(&recon, &signal.targets)?;
    psnr(mse).map_err(|e| super::MetaError::Config(e.to_string()))
}

/// PSNR per (method, sparsity) with mean and standard deviation over seeds.
/// Rows follow `opts.methods` order, then the sparsity grid.
pub fn baseline_suite<T: Real>(
    train: &[Signal<T>],
    test: &[Signal<T>],
    sparsities: &[f64],
    opts: &BaselineOptions,
) -> Result<Vec<BaselineRow>> {
    let cfg = &opts.meta;
    let dense_cfg = MetaConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let full = opts.siren.param_count();
    // scores[method][sparsity] collects one mean PSNR per seed.
    let mut scores = vec![vec![Vec::new(); sparsities.len()]; opts.methods.len()];
    for &seed in &opts.seeds {
        let needs_maml = opts
            .methods
            .iter()
            .any(|m| matches!(m, Baseline::MamlOneShot | Baseline::MamlImp));
        let maml = if needs_maml {
            let init = MetaState::init(opts.siren, Mode::DenseMaml, &dense_cfg, seed)?;
            Some(meta_train(init, train, &[], &dense_cfg, seed)?.0)
        } else {
            None
        };
        let mscn = if opts.methods.contains(&Baseline::Mscn) {
            let init = MetaState::init(opts.siren, Mode::UnstructuredGradients, cfg, seed)?;
            Some(meta_train(init, train, &[], cfg, seed)?.0)
        } else {
            None
        };
        for (mi, method) in opts.methods.iter().enumerate() {
            for (si, &s) in sparsities.iter().enumerate() {
                let k = kept(full, s);
                let score = match method {
                    Baseline::RandomPrune => {
                        let mut init = MetaState::init(opts.siren, Mode::DenseMaml, &dense_cfg, seed)?;
                        init.set_param_mask(Some(random_mask(full, k, mix_seed(seed, 11))))?;
                        let trained = meta_train(init, train, &[], &dense_cfg, seed)?.0;
                        mean_psnr(&trained, test, opts.fit, &dense_cfg)?
                    }
                    Baseline::MamlOneShot => {
                        let maml = maml.as_ref().expect("trained above");
                        let mut total = 0.0;
                        for sig in test {
                            let fitted = fit_signal(maml, sig, opts.fit, &dense_cfg)?;
                            let mut pruned = maml.clone();
                            pruned.theta0 = fitted.params;
                            let mask = magnitude_prune(&pruned.theta0.flat(), s, None)?;
                            pruned.set_param_mask(Some(mask))?;
                            total += masked_psnr(&pruned, sig)?;
                        }
                        total / test.len().max(1) as f64
                    }
                    Baseline::MamlImp => {
                        let maml = maml.as_ref().expect("trained above");
                        let mut total = 0.0;
                        for sig in test {
                            let mut cur = maml.clone();
                            cur.theta0 = fit_signal(maml, sig, opts.fit, &dense_cfg)?.params;
                            for sr in imp_schedule(s, opts.imp_rounds.max(1)) {
                                let masked: Vec<T> = match &cur.param_mask {
                                    Some(m) => cur.theta0.flat().iter().zip(m).map(|(a, b)| *a * *b).collect(),
                                    None => cur.theta0.flat(),
                                };
                                cur.set_param_mask(Some(magnitude_prune(&masked, sr, None)?))?;
                                cur.theta0 = fit_signal(&cur, sig, opts.fit, &dense_cfg)?.params;
                            }
                            total += masked_psnr(&cur, sig)?;
                        }
                        total / test.len().max(1) as f64
                    }
                    Baseline::DenseNarrow | Baseline::Scratch => {
                        let width = dense_narrow_width(&opts.siren, k);
                        let narrow = SirenConfig { width, ..opts.siren };
                        let init = MetaState::init(narrow, Mode::DenseMaml, &dense_cfg, seed)?;
                        if *method == Baseline::Scratch {
                            mean_psnr(&init, test, opts.scratch_fit, &dense_cfg)?
                        } else {
                            let trained = meta_train(init, train, &[], &dense_cfg, seed)?.0;
                            mean_psnr(&trained, test, opts.fit, &dense_cfg)?
                        }
                    }
                    Baseline::Mscn => {
                        let state = mscn.as_ref().expect("trained above");
                        let eval_cfg = MetaConfig {
                            budget: Some(kept(state.gate_count(), s)),
                            ..cfg.clone()
                        };
                        mean_psnr(state, test, opts.fit, &eval_cfg)?
                    }
                };
                scores[mi][si].push(score);
            }
        }
    }
    let mut rows = Vec::new();
    for (mi, method) in opts.methods.iter().enumerate() {
        for (si, &s) in sparsities.iter().enumerate() {
            let (psnr_mean, psnr_std) = mean_std(&scores[mi][si]);
            rows.push(BaselineRow {
                method: *method,
                sparsity: s,
                psnr_mean,
                psnr_std,
                runs: scores[mi][si].len(),
            });
        }
    }
    Ok(rows)
}

/// λ-driven sweep: for each λ, MSCN is meta-trained without a budget and its
/// mean expected sparsity over seeds becomes the sparsity at which every other
/// method in `opts.methods` is evaluated. Rows follow the λ list, then
/// `opts.methods` order.
pub fn lambda_sweep<T: Real>(
    train: &[Signal<T>],
    test: &[Signal<T>],
    lambdas: &[f64],
    opts: &BaselineOptions,
) -> Result<Vec<BaselineRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let cfg = MetaConfig {
            lambda,
            budget: None,
            ..opts.meta.clone()
        };
        let mut psnrs = Vec::new();
        let mut sparsity = 0.0;
        for &seed in &opts.seeds {
            let init = MetaState::init(opts.siren, Mode::UnstructuredGradients, &cfg, seed)?;
            let state = meta_train(init, train, &[], &cfg, seed)?.0;
            sparsity += state.gates0.expected_sparsity() / opts.seeds.len() as f64;
            psnrs.push(mean_psnr(&state, test, opts.fit, &cfg)?);
        }
        let target = sparsity.min(MAX_SWEEP_SPARSITY);
        let others = BaselineOptions {
            methods: opts.methods.iter().copied().filter(|m| *m != Baseline::Mscn).collect(),
            meta: cfg.clone(),
            ..opts.clone()
        };
        let mut other_rows = baseline_suite(train, test, &[target], &others)?.into_iter();
        for method in &opts.methods {
            if *method == Baseline::Mscn {
                let (psnr_mean, psnr_std) = mean_std(&psnrs);
                rows.push(BaselineRow {
                    method: Baseline::Mscn,
                    sparsity,
                    psnr_mean,
                    psnr_std,
                    runs: psnrs.len(),
                });
            } else {
                rows.extend(other_rows.next());
            }
        }
    }
    Ok(rows)
}

/// CSV with columns `method,sparsity,psnr_mean,psnr_std,runs`.
pub fn rows_csv(rows: &[BaselineRow]) -> String {
    let mut out = String::from("method,sparsity,psnr_mean,psnr_std,runs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.method, r.sparsity, r.psnr_mean, r.psnr_std, r.runs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{synth_dataset, SynthKind};

    #[test]
    fn random_mask_support() {
        let m: Vec<f64> = random_mask(1000, 137, 4);
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 137);
        assert_eq!(m, random_mask::<f64>(1000, 137, 4));
    }

    #[test]
    fn narrow_width_hits_the_count() {
        let base = SirenConfig::new(2, 3, 4, 256);
        for s in [0.5, 0.75, 0.9, 0.95] {
            let target = kept(base.param_count(), s);
            let w = dense_narrow_width(&base, target);
            let got = SirenConfig { width: w, ..base }.param_count() as f64;
            assert!((got - target as f64).abs() / target as f64 <= 0.02, "s={s} w={w}");
        }
    }

    #[test]
    fn statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn one_seed_gives_one_row_per_method() {
        let data = synth_dataset::<f64>(SynthKind::SineMix, 4, &[5, 5], 0).unwrap();
        let meta = MetaConfig {
            outer_steps: 1,
            eval_every: 0,
            ..Default::default()
        };
        let mut opts = BaselineOptions::new(SirenConfig::new(2, 1, 3, 8), meta);
        opts.seeds = vec![0];
        opts.scratch_fit = FitOptions::adam(2, 1e-3);
        let rows = baseline_suite(&data[..3], &data[3..], &[0.5], &opts).unwrap();
        assert_eq!(rows.len(), 6);
        for (r, m) in rows.iter().zip(Baseline::ALL) {
            assert_eq!(r.method, m);
            assert!(r.psnr_mean.is_finite());
            assert_eq!(r.runs, 1);
        }
        assert_eq!(rows_csv(&rows).lines().count(), 7);
    }

    #[test]
    fn lambda_sweep_gives_one_row_per_method_and_lambda() {
        let data = synth_dataset::<f64>(SynthKind::SineMix, 4, &[5, 5], 0).unwrap();
        let meta = MetaConfig {
            outer_steps: 1,
            eval_every: 0,
            ..Default::default()
        };
        let mut opts = BaselineOptions::new(SirenConfig::new(2, 1, 3, 8), meta);
        opts.seeds = vec![0];
        opts.scratch_fit = FitOptions::adam(2, 1e-3);
        let rows = lambda_sweep(&data[..3], &data[3..], &[0.01, 0.1], &opts).unwrap();
        assert_eq!(rows.len(), 12);
        for (r, m) in rows.iter().zip(Baseline::ALL.iter().chain(Baseline::ALL.iter())) {
            assert_eq!(r.method, *m);
        }
        assert_eq!(rows[0].sparsity, rows[5].sparsity);
    }
}
