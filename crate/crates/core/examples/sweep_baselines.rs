//! Small λ sweep: MSCN sets the sparsity, the pruning and narrow-width
//! baselines are evaluated at the same level. Prints the sweep CSV.

use mscn::inr::SirenConfig;
use mscn::meta::{lambda_sweep, rows_csv, BaselineOptions, FitOptions, MetaConfig};
use mscn::signals::{synth_dataset, SynthKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset::<f32>(SynthKind::SineMix, 24, &[12, 12], 5)?;
    let (train, test) = data.split_at(20);
    let meta = MetaConfig {
        outer_steps: 400,
        eval_every: 0,
        log_alpha_lr_factor: 100.0,
        ..Default::default()
    };
    let mut opts = BaselineOptions::new(SirenConfig::new(2, 1, 3, 16), meta);
    opts.seeds = vec![0, 1];
    opts.scratch_fit = FitOptions::adam(50, 1e-3);
    opts.imp_rounds = 2;

    let rows = lambda_sweep(train, test, &[3e-3, 3e-2], &opts)?;
    print!("{}", rows_csv(&rows));
    Ok(())
}
