use std::fs;
use std::path::Path;

use wavedino::config::RunConfig;
use wavedino::pipeline::{self, Manifest, Split};
use wavedino::vit::AttentionMaps;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    for kv in [
        "n_per_class=8", "n_classes=2", "labeled_fraction=0.5", "window_length=256", "stride=256",
        "target_size=16", "n_scales=16", "patch_size=4", "embed_dim=8", "n_heads=2", "head_dim=4",
        "mlp_dim=16", "depth=1", "projector_dims=16,8", "out_dim=8", "epochs=3", "warmup_epochs=1",
        "batch_size=4", "n_local=2", "knn_sweep=1,3",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn prepare(cfg: &RunConfig, root: &Path) -> std::path::PathBuf {
    let data = pipeline::synth(cfg, &root.join("data"), false).unwrap();
    let pre = pipeline::preprocess(cfg, &data.manifest, &root.join("tfm"), 2).unwrap();
    assert!(pre.errors.is_empty());
    pre.manifest
}

#[test]
fn full_run_is_deterministic_and_resumable() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = prepare(&cfg, a.path());
    let mb = prepare(&cfg, b.path());

    let ta = pipeline::train(&cfg, &ma, &a.path().join("run"), 1, false).unwrap();
    assert_eq!(ta.metrics.len(), 3);
    let log = fs::read_to_string(&ta.metrics_log).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(pipeline::read_metrics(&ta.metrics_log).unwrap(), ta.metrics);

    // interrupted after one epoch, then resumed with two threads
    let run_b = b.path().join("run");
    pipeline::train(&cfg, &mb, &run_b, 1, false).unwrap();
    for epoch in 2..=3 {
        fs::remove_file(pipeline::epoch_checkpoint(&run_b, epoch)).unwrap();
    }
    let resumed = pipeline::train(&cfg, &mb, &run_b, 2, false).unwrap();
    assert_eq!(resumed.resumed_from_epoch, Some(1));
    assert_eq!(fs::read(&ta.metrics_log).unwrap(), fs::read(&resumed.metrics_log).unwrap());

    let ea = pipeline::eval(&cfg, &ma, &ta.final_checkpoint).unwrap();
    let eb = pipeline::eval(&cfg, &mb, &resumed.final_checkpoint).unwrap();
    assert_eq!(ea.to_json(), eb.to_json());
    assert!((0.0..=1.0).contains(&ea.report.accuracy));
    assert_eq!(ea.sweep.len(), 2);
    assert!(ea.render().contains("unknown"));

    let manifest = Manifest::read(&ma).unwrap();
    let test_row = manifest.rows.iter().find(|r| r.split == Split::Test).unwrap();
    let out = a.path().join("attn/sample");
    let report = pipeline::attention(&cfg, &ta.final_checkpoint, &manifest.resolve(test_row), 0.9, &out).unwrap();
    let maps = AttentionMaps::read(&report.maps_file).unwrap();
    assert_eq!(maps.n_patches, 16);
    assert!(report.concentration >= 1.0);
    let ppm = fs::read(&report.image_file).unwrap();
    assert!(ppm.starts_with(b"P6\n128 64\n255\n"));
    let all = pipeline::attention(&cfg, &ta.final_checkpoint, &manifest.resolve(test_row), 1.0, &out).unwrap();
    assert!(all.kept_patches >= report.kept_patches);
}

#[test]
fn mismatched_checkpoint_is_a_shape_error() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepare(&cfg, dir.path());
    let mut one = cfg.clone();
    one.dino.epochs = 1;
    let run = pipeline::train(&one, &manifest, &dir.path().join("run"), 1, false).unwrap();
    let mut wider = cfg.clone();
    wider.apply_override("embed_dim=12").unwrap();
    wider.apply_override("head_dim=6").unwrap();
    let err = pipeline::eval(&wider, &manifest, &run.final_checkpoint).unwrap_err();
    assert!(matches!(err, wavedino::Error::Shape { .. }), "{err}");
}

#[test]
fn sweep_beyond_bank_size_is_rejected() {
    let mut cfg = small_config();
    cfg.knn_sweep = vec![1, 9];
    assert!(cfg.validate().is_err());
}
