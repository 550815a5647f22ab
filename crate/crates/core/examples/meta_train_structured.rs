//! Meta-learns a shared SIREN whose per-image code is a budget of shift
//! modulations, then compares it against a random choice of the same size.

use mscn::inr::SirenConfig;
use mscn::meta::{evaluate_psnr, meta_train, meta_train_budgeted, random_mask, sparsity_pattern_report, MetaConfig, MetaState, Mode};
use mscn::signals::{synth_dataset, SynthKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset::<f32>(SynthKind::GaborMix, 60, &[24, 24], 1)?;
    let (train, test) = data.split_at(50);
    let budget = 48;
    let cfg = MetaConfig {
        outer_steps: 200,
        eval_every: 50,
        log_alpha_lr_factor: 100.0,
        budget: Some(budget),
        ..Default::default()
    };
    let siren = SirenConfig::new(2, 3, 4, 48);
    let init = MetaState::init(siren, Mode::StructuredModulations, &cfg, 0)?;

    let (state, log) = meta_train_budgeted(init.clone(), train, test, &cfg, 0, |_, _| Ok(()))?;
    for r in log.iter().filter(|r| r.eval_psnr.is_some()) {
        println!("step {:4}  held-out {:.2} dB  E[sparsity] {:.3}", r.step, r.eval_psnr.unwrap(), r.expected_sparsity);
    }
    for layer in sparsity_pattern_report(&state, Some(budget)) {
        println!("layer {}  {:3}/{:3} modulations", layer.layer, layer.active, layer.total);
    }

    let mut random = init;
    random.pin_gates(random_mask(random.gate_count(), budget, 1000))?;
    let (random, _) = meta_train(random, train, &[], &MetaConfig { budget: None, ..cfg.clone() }, 0)?;
    println!("learned {:.2} dB", evaluate_psnr(&state, test, &cfg)?);
    println!("random  {:.2} dB", evaluate_psnr(&random, test, &cfg)?);
    Ok(())
}
