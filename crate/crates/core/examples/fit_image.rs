//! Fits a single SIREN to one synthetic RGB image with Adam and writes the
//! reconstruction next to the original.
//!
//!     cargo run --release --example fit_image -- [out_dir]

use std::path::Path;

use mscn::inr::SirenConfig;
use mscn::meta::{fit_signal, FitOptions, MetaConfig, MetaState, Mode};
use mscn::signals::{save_image, synth_dataset, SynthKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fit_image_out".into());
    std::fs::create_dir_all(&out)?;
    let signal = synth_dataset::<f32>(SynthKind::GaborMix, 1, &[32, 32], 7)?.remove(0);

    let cfg = MetaConfig::default();
    let state = MetaState::init(SirenConfig::new(2, 3, 4, 64), Mode::DenseMaml, &cfg, 0)?;
    let fit = fit_signal(&state, &signal, FitOptions::adam(1000, 1e-4), &cfg)?;

    for (i, loss) in fit.losses.iter().enumerate().step_by(200) {
        println!("step {i:4}  mse {loss:.6}");
    }
    println!("psnr {:.2} dB", fit.psnr);
    save_image(Path::new(&format!("{out}/original.png")), &signal.targets, 32, 32)?;
    save_image(Path::new(&format!("{out}/fit.png")), &fit.reconstruction, 32, 32)?;
    Ok(())
}
