//! Meta-trains with sparse gradients, compresses held-out images at 16 and
//! 32 bits, and decodes them again.

use mscn::codec::{bits_per_pixel, decompress_to_signal, encode, CompressedBlob};
use mscn::inr::SirenConfig;
use mscn::meta::{fit_signal, meta_train, FitOptions, MetaConfig, MetaState, Mode};
use mscn::signals::{synth_dataset, SynthKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset::<f32>(SynthKind::GaborMix, 44, &[16, 16], 3)?;
    let (train, test) = data.split_at(40);
    let cfg = MetaConfig {
        outer_steps: 500,
        eval_every: 0,
        lambda: 0.003,
        log_alpha_lr_factor: 100.0,
        ..Default::default()
    };
    let init = MetaState::init(SirenConfig::new(2, 3, 3, 24), Mode::UnstructuredGradients, &cfg, 0)?;
    let (state, _) = meta_train(init, train, &[], &cfg, 0)?;
    println!("{} adapted parameters", state.adapted_len());

    for s in test {
        let fit = fit_signal(&state, s, FitOptions::inner(&cfg), &cfg)?;
        for bits in [16, 32] {
            let bytes = encode(&fit.delta, bits)?.to_bytes();
            let blob = CompressedBlob::from_bytes(&bytes)?;
            let out = decompress_to_signal(&state, &blob, &s.coords, Some(s))?;
            println!(
                "{}  {bits}-bit  {:4} entries  {:5} bytes  {:.3} bpp  {:.2} dB (fit {:.2})",
                s.id,
                fit.delta.len(),
                bytes.len(),
                bits_per_pixel(&blob, 16, 16),
                out.psnr.unwrap(),
                fit.psnr
            );
        }
    }
    Ok(())
}
