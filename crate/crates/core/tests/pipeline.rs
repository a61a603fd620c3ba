use std::sync::Arc;

use tissue_track::data::{generate_synth, OccluderSpec, SynthSample, SynthSpec, Texture};
use tissue_track::pipeline::{evaluate_pooled, run_desk, track_samples, DeskSuite};
use tissue_track::plg::PlgConfig;
use tissue_track::tracker::TrackerConfig;
use tissue_track::trainer::{Checkpoint, TrainConfig, Trainer};

fn small_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.c_ls = 8;
    cfg.c_hybrid = 8;
    cfg.stage1.iterations = 40;
    cfg.stage2.block_iterations = 2;
    cfg.stage2.total = 4;
    cfg
}

fn small_suite(n: u64) -> Vec<Arc<SynthSample>> {
    (0..n)
        .map(|i| {
            let spec = SynthSpec {
                seed: 300 + i,
                height: 40,
                width: 40,
                frame_count: 5,
                warp_amplitude: 2.0,
                texture: Texture::Blobs,
                occluder: Some(OccluderSpec { width: 10.0, height: 12.0, velocity: [4.0, 0.0], entry_frame: 1, start: None }),
                ..SynthSpec::default()
            };
            Arc::new(generate_synth(&spec).unwrap())
        })
        .collect()
}

fn mean(log: &Trainer, component: &str, range: std::ops::Range<usize>) -> f64 {
    let v: Vec<f64> = log.log.rows.iter().filter(|(s, c, _)| c == component && range.contains(s)).map(|r| r.2).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn stage1_lowers_uncertainty_loss() {
    let mut tr = Trainer::new(small_cfg()).unwrap();
    tr.train_stage1(&small_suite(3)).unwrap();
    let (early, late) = (mean(&tr, "stage1/unc", 0..8), mean(&tr, "stage1/unc", 32..40));
    assert!(late < early, "uncertainty loss {early} -> {late}");
}

#[test]
fn saved_checkpoint_tracks_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_suite(2);
    let mut cfg = small_cfg();
    cfg.stage1.iterations = 3;
    let mut tr = Trainer::new(cfg).unwrap();
    tr.train_stage1(&data).unwrap();
    let path = dir.path().join("m.ckpt");
    tr.checkpoint().save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().restore().unwrap();
    let tc = TrackerConfig::default();
    let a = track_samples(&tr.model, 1.0, &data, &tc).unwrap();
    let b = track_samples(&restored, 1.0, &data, &tc).unwrap();
    assert_eq!(a, b);
    assert!(evaluate_pooled(&a, &data).unwrap().evaluated > 0);
}

#[test]
fn desk_run_end_to_end_is_finite() {
    let suite = DeskSuite { train: small_suite(2), held_out: small_suite(3).split_off(2) };
    let mut cfg = small_cfg();
    cfg.stage1.iterations = 2;
    let plg = PlgConfig { teachers: vec!["oracle".into()], ..PlgConfig::default() };
    let run = run_desk(&cfg, &suite, &plg).unwrap();
    // the step counter restarts with stage II
    assert_eq!(run.trainer.state.step, cfg.stage2.total);
    assert!(run.stage1_log.starts_with("step,component,value"));
    let pred = track_samples(&run.trainer.model, 1.0, &suite.held_out, &TrackerConfig::default()).unwrap();
    let r = evaluate_pooled(&pred, &suite.held_out).unwrap();
    assert!(r.epe2d.is_finite() && (0.0..=1.0).contains(&r.acc2d));
}
