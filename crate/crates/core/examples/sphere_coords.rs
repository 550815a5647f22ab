//! Sparse meta-learning on smooth fields over a latitude/longitude grid,
//! using 3D Cartesian coordinates on the unit sphere.

use mscn::inr::SirenConfig;
use mscn::meta::{evaluate_psnr, meta_train, MetaConfig, MetaState, Mode};
use mscn::signals::{era5_coords, synth_dataset, SynthKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let coords = era5_coords::<f64>(3, 4);
    println!("first grid points on the sphere: {:?}", &coords.data()[..9]);

    let data = synth_dataset::<f32>(SynthKind::SphereField, 30, &[12, 24], 2)?;
    let (train, test) = data.split_at(25);
    let cfg = MetaConfig {
        outer_steps: 100,
        eval_every: 25,
        ..Default::default()
    };
    let init = MetaState::init(SirenConfig::new(3, 1, 3, 32), Mode::UnstructuredGradients, &cfg, 0)?;
    let (state, log) = meta_train(init, train, test, &cfg, 0)?;
    for r in log.iter().filter(|r| r.eval_psnr.is_some()) {
        println!("step {:4}  held-out {:.2} dB", r.step, r.eval_psnr.unwrap());
    }
    println!("final {:.2} dB", evaluate_psnr(&state, test, &cfg)?);
    Ok(())
}
