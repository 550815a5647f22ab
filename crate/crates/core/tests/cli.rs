use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = "\
data.count = 10
data.heldout = 2
data.dims = 12x12
siren.depth = 3
siren.width = 16
meta.outer_steps = 6
meta.eval_every = 3
meta.budget = 12
sweep.scratch_steps = 3
seeds = 0
";

fn mscn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscn"))
        .args(args)
        .current_dir(dir)
        .env("MSCN_THREADS", "1")
        .output()
        .unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), format!("{BASE}{extra}")).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn invalid_key_fails_without_artifacts() {
    let dir = setup("output = results\nmeta.lamda = 0.1\n");
    let o = mscn(dir.path(), &["meta-train", "--config", "run.cfg"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("meta.lamda"));
    assert!(!dir.path().join("results").exists());
    let o = mscn(dir.path(), &["sweep", "--config", "run.cfg", "--set", "meta.lamda=0.1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn compress_then_decompress_agree() {
    let dir = setup("precision = 32\ncodec.bits = 32\n");
    let o = mscn(dir.path(), &["meta-train", "-c", "run.cfg"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1);
    let ckpt = "out/checkpoint.mscn";
    let c = mscn(dir.path(), &["compress", "-c", "run.cfg", "--checkpoint", ckpt, "--signal", "dataset:9"]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let d = mscn(
        dir.path(),
        &["decompress", "-c", "run.cfg", "--checkpoint", ckpt, "--blob", "out/compressed.mscd", "--reference", "dataset:9"],
    );
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    let (pc, pd) = (field(&stdout(&c), "psnr"), field(&stdout(&d), "psnr"));
    assert!((pc - pd).abs() <= 0.01, "{pc} vs {pd}");
    assert!(dir.path().join("out/reconstruction.png").is_file());
    let log = std::fs::read_to_string(dir.path().join("out/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 7);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("expected_sparsity").is_some());
    }
}

#[test]
fn sweep_with_one_lambda_and_one_seed_has_one_row_per_method() {
    let dir = setup("sweep.lambdas = 0.01\n");
    let o = mscn(dir.path(), &["sweep", "-c", "run.cfg"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,sparsity,psnr_mean,psnr_std,runs"));
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["random_prune", "maml_oneshot", "maml_imp", "dense_narrow", "scratch", "mscn"]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = setup("meta.mode = unstructured\n");
    let read = |name: &str| std::fs::read(dir.path().join("out").join(name)).unwrap();
    let run = || {
        let o = mscn(dir.path(), &["meta-train", "-c", "run.cfg"]);
        assert!(o.status.success());
        let r = mscn(dir.path(), &["report", "-c", "run.cfg", "--checkpoint", "out/checkpoint.mscn"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        ["checkpoint.mscn", "train_log.jsonl", "sparsity_pattern.csv", "rate_distortion.csv"].map(read)
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    let rd = String::from_utf8(first[3].clone()).unwrap();
    assert!(rd.starts_with("budget,bits,entries_mean,bpp,bpp_values,psnr_mean,signals\n"));
    assert_eq!(rd.lines().count(), 3);
    let sp = String::from_utf8(first[2].clone()).unwrap();
    assert!(sp.starts_with("layer,active,total,active_fraction\n"));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = setup("");
    let missing = mscn(dir.path(), &["fit", "-c", "run.cfg", "--checkpoint", "none.mscn", "--signal", "dataset:0"]);
    assert_eq!(missing.status.code(), Some(4));
    let no_config = mscn(dir.path(), &["meta-train", "-c", "absent.cfg"]);
    assert_eq!(no_config.status.code(), Some(4));
    let usage = mscn(dir.path(), &["meta-train"]);
    assert_eq!(usage.status.code(), Some(2));

    assert!(mscn(dir.path(), &["meta-train", "-c", "run.cfg"]).status.success());
    assert!(mscn(dir.path(), &["compress", "-c", "run.cfg", "--checkpoint", "out/checkpoint.mscn", "--signal", "dataset:8"])
        .status
        .success());
    let other = mscn(dir.path(), &["meta-train", "-c", "run.cfg", "--set", "seed=5", "--set", "output=other"]);
    assert!(other.status.success());
    let wrong = mscn(
        dir.path(),
        &["decompress", "-c", "run.cfg", "--checkpoint", "other/checkpoint.mscn", "--blob", "out/compressed.mscd"],
    );
    assert_eq!(wrong.status.code(), Some(5));

    std::fs::write(dir.path().join("junk.mscd"), b"MSCDxx").unwrap();
    let corrupt = mscn(
        dir.path(),
        &["decompress", "-c", "run.cfg", "--checkpoint", "out/checkpoint.mscn", "--blob", "junk.mscd"],
    );
    assert_eq!(corrupt.status.code(), Some(8));

    let diverge = mscn(dir.path(), &["meta-train", "-c", "run.cfg", "--set", "meta.divergence_threshold=1e-9"]);
    assert_eq!(diverge.status.code(), Some(7));
}

#[test]
fn manifest_datasets_and_image_files_are_accepted() {
    let dir = setup("");
    let signals = mscn::signals::synth_dataset::<f32>(mscn::signals::SynthKind::GaborMix, 6, &[10, 10], 2).unwrap();
    mscn::signals::write_manifest(&dir.path().join("data"), &signals).unwrap();
    let cfg = "data.source = manifest\ndata.manifest = data/index.csv\ndata.heldout = 1\nsiren.depth = 3\nsiren.width = 8\nmeta.outer_steps = 2\nmeta.mode = dense\n";
    std::fs::write(dir.path().join("m.cfg"), cfg).unwrap();
    let o = mscn(dir.path(), &["meta-train", "-c", "m.cfg"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let image = format!("data/{}.png", signals[5].id);
    let f = mscn(dir.path(), &["fit", "-c", "m.cfg", "--checkpoint", "out/checkpoint.mscn", "--signal", &image]);
    assert!(f.status.success(), "{}", String::from_utf8_lossy(&f.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/fit.json")).unwrap()).unwrap();
    assert_eq!(report["losses"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("out/fit.png").is_file());
}
