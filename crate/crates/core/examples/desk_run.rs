//! Full desk run on seed 7: stage I, pseudo labels, stage II, then held-out
//! metrics for the untrained and trained network.
//!
//! `cargo run --release -p tissue-track-core --example desk_run [stage1_iters stage2_iters]`

use std::time::Instant;

use tissue_track::model::Model;
use tissue_track::pipeline::{evaluate_pooled, run_desk, track_samples, DeskSuite};
use tissue_track::plg::PlgConfig;
use tissue_track::tracker::TrackerConfig;
use tissue_track::trainer::TrainConfig;

fn main() -> tissue_track::Result<()> {
    let mut args = std::env::args().skip(1).map(|v| v.parse::<usize>().expect("iteration counts are integers"));
    let mut cfg = TrainConfig::default();
    if let Some(n) = args.next() {
        cfg.stage1.iterations = n;
    }
    if let Some(n) = args.next() {
        // four alternating blocks
        cfg.stage2.block_iterations = (n / 4).max(1);
        cfg.stage2.total = 4 * cfg.stage2.block_iterations;
    }
    let start = Instant::now();
    let suite = DeskSuite::generate(cfg.seed, 8, 2)?;
    let run = run_desk(&cfg, &suite, &PlgConfig::default())?;
    let survivors: Vec<_> = run.videos.iter().map(|v| v.pseudo.as_ref().map_or(0, |p| p.survivor_count())).collect();
    println!("pseudo-label survivors per video: {survivors:?}");
    let tracker = TrackerConfig::default();
    let untrained = Model::new(cfg.model_config())?;
    for (name, model) in [("untrained", &untrained), ("trained", &run.trainer.model)] {
        let pred = track_samples(model, 1.0, &suite.held_out, &tracker)?;
        println!("--- {name}\n{}", evaluate_pooled(&pred, &suite.held_out)?.to_text());
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
