use mscn::codec::{decode, decompress_to_signal, encode, psnr};
use mscn::inr::{mean_squared_error, SirenConfig};
use mscn::meta::{evaluate_psnr, fit_signal, meta_train, FitOptions, MetaConfig, MetaState, Mode};
use mscn::signals::{synth_dataset, SynthKind};

fn trained(mode: Mode, kind: SynthKind, dims: &[usize], steps: usize) -> (MetaState<f32>, Vec<mscn::signals::Signal<f32>>, MetaConfig) {
    let data = synth_dataset::<f32>(kind, 30, dims, 4).unwrap();
    let cfg = MetaConfig {
        outer_steps: steps,
        eval_every: 0,
        budget: None,
        ..Default::default()
    };
    let sample = &data[0];
    let siren = SirenConfig::new(sample.in_dim(), sample.out_dim(), 3, 32);
    let init = MetaState::init(siren, mode, &cfg, 1).unwrap();
    let (state, _) = meta_train(init, &data[..24], &[], &cfg, 1).unwrap();
    (state, data[24..].to_vec(), cfg)
}

#[test]
fn meta_training_beats_the_untrained_initialisation() {
    let data = synth_dataset::<f32>(SynthKind::GaborMix, 30, &[16, 16], 4).unwrap();
    let cfg = MetaConfig {
        outer_steps: 150,
        eval_every: 50,
        ..Default::default()
    };
    let init = MetaState::init(SirenConfig::new(2, 3, 3, 32), Mode::StructuredModulations, &cfg, 1).unwrap();
    let (_, log) = meta_train(init, &data[..24], &data[24..], &cfg, 1).unwrap();
    let first = log.first().unwrap().eval_psnr.unwrap();
    let last = log.last().unwrap().eval_psnr.unwrap();
    assert!(last > first, "held-out PSNR {first} -> {last}");
    assert_eq!(log.iter().filter(|r| r.eval_psnr.is_some()).count(), 4);
}

#[test]
fn fit_psnr_survives_a_32_bit_round_trip() {
    for mode in [Mode::UnstructuredGradients, Mode::StructuredModulations] {
        let (state, test, cfg) = trained(mode, SynthKind::GaborMix, &[12, 12], 20);
        for s in &test[..3] {
            let fit = fit_signal(&state, s, FitOptions::inner(&cfg), &cfg).unwrap();
            let blob = encode(&fit.delta, 32).unwrap();
            let out = decompress_to_signal(&state, &blob, &s.coords, Some(s)).unwrap();
            assert!((out.psnr.unwrap() - fit.psnr).abs() <= 0.01, "{mode}: {} vs {}", out.psnr.unwrap(), fit.psnr);
        }
    }
}

#[test]
fn sixteen_bit_reconstruction_is_close_to_the_direct_one() {
    let (state, test, cfg) = trained(Mode::UnstructuredGradients, SynthKind::SineMix, &[12, 12], 20);
    let s = &test[0];
    let fit = fit_signal(&state, s, FitOptions::inner(&cfg), &cfg).unwrap();
    let blob = encode(&fit.delta, 16).unwrap();
    let back = decode(&blob).unwrap();
    let step = (blob.header.vmax - blob.header.vmin) / 65535.0;
    for (a, b) in back.values.iter().zip(&fit.delta.values) {
        assert!((a - b).abs() <= step / 2.0 + 1e-12);
    }
    let out = decompress_to_signal(&state, &blob, &s.coords, None).unwrap();
    let gap = mean_squared_error(&out.reconstruction, &fit.reconstruction).unwrap();
    assert!(gap < 1e-6, "reconstruction drift {gap}");
}

#[test]
fn voxel_signals_report_accuracy() {
    let (state, test, cfg) = trained(Mode::StructuredModulations, SynthKind::VoxelShapes, &[6, 6, 6], 5);
    let s = &test[0];
    let fit = fit_signal(&state, s, FitOptions::inner(&cfg), &cfg).unwrap();
    let out = decompress_to_signal(&state, &encode(&fit.delta, 16).unwrap(), &s.coords, Some(s)).unwrap();
    let acc = out.voxel_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn sphere_and_sdf_signals_train() {
    for (kind, dims) in [(SynthKind::SphereField, vec![6, 12]), (SynthKind::BlobSdf, vec![10, 10])] {
        let (state, test, cfg) = trained(Mode::UnstructuredGradients, kind, &dims, 3);
        assert!(evaluate_psnr(&state, &test, &cfg).unwrap().is_finite());
    }
}

#[test]
fn checkpoints_round_trip_through_files() {
    let (state, test, cfg) = trained(Mode::StructuredModulations, SynthKind::GaborMix, &[8, 8], 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.mscn");
    state.save(&path, mscn::inr::Dtype::F32).unwrap();
    let back = MetaState::<f32>::load(&path).unwrap();
    assert_eq!(back, state);
    assert_eq!(back.fingerprint(), state.fingerprint());
    let a = fit_signal(&state, &test[0], FitOptions::inner(&cfg), &cfg).unwrap();
    let b = fit_signal(&back, &test[0], FitOptions::inner(&cfg), &cfg).unwrap();
    assert_eq!(a.delta, b.delta);
    assert_eq!(psnr(0.01).unwrap(), 20.0);
}
