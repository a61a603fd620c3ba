//! `tissue-track`: synthetic data, pseudo labels, training, tracking,
//! evaluation and rendering from the command line.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tissue_track::data::io::{read_labels, read_tracks, read_video, write_flow, write_labels, write_tracks, write_video};
use tissue_track::data::{desk_suite, generate_synth, SynthSample, SynthSpec};
use tissue_track::eval::MetricReport;
use tissue_track::model::Model;
use tissue_track::plg::{self, teacher_by_name, NccMatcher, PlgConfig, Teacher};
use tissue_track::tracker::{track_points, write_overlay, ModelEstimator, TrackerConfig};
use tissue_track::trainer::{Checkpoint, SparseVideo, TrainConfig, Trainer};
use tissue_track::{Frame, PointTrack};

use manifest::RunManifest;

const SEED_ENV: &str = "ENDO_TTAP_SEED";

#[derive(Parser)]
#[command(name = "tissue-track", version, about = "Long-term tissue point tracking at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic video with dense ground truth.
    SynthGen {
        /// Flat `key = value` spec file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo labels for one video from first/last-frame anchors.
    PlgGenerate {
        /// Video directory (`%06d.png` frames, or a synth-gen output).
        #[arg(long = "in")]
        input: PathBuf,
        /// Label file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.85)]
        threshold: f64,
        #[arg(long = "d-filter", default_value_t = 5.0)]
        d_filter: f64,
        #[arg(long = "max-anchors", default_value_t = 8)]
        max_anchors: usize,
        /// Comma-separated: identity, drift, chain, direct, oracle.
        #[arg(long, default_value = "chain,direct", value_delimiter = ',')]
        teachers: Vec<String>,
        #[arg(long = "backbone-seed", default_value_t = 1)]
        backbone_seed: u64,
    },
    /// One training stage.
    Train(TrainArgs),
    /// Track query points through a video.
    Track {
        #[arg(long)]
        video: PathBuf,
        /// Track file; each point's earliest row is its query.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write overlay frames here.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Trained checkpoint; without it the untrained network is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Score predicted tracks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw tracks over a video.
    Render {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Flat `key = value` config; missing keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Stage I: start from here instead of a fresh model. Stage II: the
    /// stage-I checkpoint (required), or a stage-II one to resume.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Video directories. Stage I reads `spec.txt` from each (default: the
    /// built-in desk suite); stage II reads `frames/`, `labels.csv` and, if
    /// present, `pseudo.csv`.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Loss curve CSV (default: next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long = "no-mfga")]
    no_mfga: bool,
    #[arg(long = "no-semantic")]
    no_semantic: bool,
    #[arg(long = "no-uflow")]
    no_uflow: bool,
    #[arg(long = "no-point")]
    no_point: bool,
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))?)),
        Err(_) => Ok(None),
    }
}

/// A synth-gen output keeps its frames in `frames/`.
fn frames_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("frames");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn load_video(dir: &Path) -> Result<Vec<Frame>> {
    let frames = read_video(&frames_dir(dir)).with_context(|| format!("reading video {}", dir.display()))?;
    if frames.is_empty() {
        bail!("{}: no frames", dir.display());
    }
    Ok(frames)
}

/// Ground truth regenerated from `spec.txt`, when the directory has one.
fn load_truth(dir: &Path) -> Result<Option<Arc<SynthSample>>> {
    let path = dir.join("spec.txt");
    if !path.is_file() {
        return Ok(None);
    }
    let spec = SynthSpec::parse(&std::fs::read_to_string(&path)?)?;
    Ok(Some(Arc::new(generate_synth(&spec)?)))
}

fn synth_gen(spec_path: &Path, out: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec = SynthSpec::parse(&text)?;
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    let sample = generate_synth(&spec)?;
    std::fs::create_dir_all(out)?;
    write_video(&out.join("frames"), &sample.frames)?;
    let flows = out.join("flows");
    std::fs::create_dir_all(&flows)?;
    for (t, (f, b)) in sample.forward_flows.iter().zip(&sample.backward_flows).enumerate() {
        write_flow(&flows.join(format!("fwd_{t:06}.flo")), f)?;
        write_flow(&flows.join(format!("bwd_{t:06}.flo")), b)?;
    }
    write_tracks(&out.join("tracks.csv"), &sample.gt_tracks)?;
    write_tracks(&out.join("labels.csv"), &sample.sparse_labels())?;
    let canonical = spec.to_text();
    std::fs::write(out.join("spec.txt"), &canonical)?;
    let mut m = RunManifest::new("synth-gen", &canonical, Some(spec.seed));
    m.inputs.push(spec_path.into());
    m.outputs.push(out.into());
    println!("{}: {} frames, {} ground-truth tracks", out.display(), sample.frames.len(), sample.gt_tracks.len());
    Ok(m)
}

#[allow(clippy::too_many_arguments)]
fn plg_generate(
    input: &Path,
    out: &Path,
    threshold: f64,
    d_filter: f64,
    max_anchors: usize,
    teachers: &[String],
    backbone_seed: u64,
) -> Result<RunManifest> {
    let cfg = PlgConfig { score_threshold: threshold, d_filter, max_anchors, teachers: teachers.to_vec() };
    cfg.validate()?;
    let video = load_video(input)?;
    let truth = load_truth(input)?;
    let model_cfg = tissue_track::model::ModelConfig { backbone_seed, ..TrainConfig::default().model_config() };
    let backbone = Model::new(model_cfg)?.shared_backbone();
    let boxed = teachers.iter().map(|n| teacher_by_name(n, &backbone, truth.as_ref())).collect::<tissue_track::Result<Vec<_>>>()?;
    let refs: Vec<&dyn Teacher> = boxed.iter().map(|t| t.as_ref()).collect();
    let id = input.display().to_string();
    let set = plg::generate(&video, &NccMatcher::default(), &refs, &cfg, &id)?;
    if set.survivor_count() == 0 {
        log::warn!("{id}: every trajectory was filtered out, writing an empty label set");
    }
    write_labels(out, &set)?;
    println!("{}: {} anchors, {} surviving, {} labels", out.display(), set.anchors.len(), set.survivor_count(), set.label_count());
    let text = format!(
        "threshold = {threshold}\nd_filter = {d_filter}\nmax_anchors = {max_anchors}\nteachers = {}\nbackbone_seed = {backbone_seed}\n",
        teachers.join(",")
    );
    let mut m = RunManifest::new("plg-generate", &text, None);
    m.inputs.push(input.into());
    m.outputs.push(out.into());
    Ok(m)
}

fn train_config(args: &TrainArgs) -> Result<(TrainConfig, String)> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    cfg.ablation.mfga_enabled &= !args.no_mfga;
    cfg.ablation.semantic_enabled &= !args.no_semantic;
    cfg.ablation.uflow_enabled &= !args.no_uflow;
    cfg.ablation.point_enabled &= !args.no_point;
    cfg.validate()?;
    let canonical = cfg.to_text();
    Ok((cfg, canonical))
}

fn stage2_video(dir: &Path) -> Result<SparseVideo> {
    let frames = load_video(dir)?;
    let labels = dir.join("labels.csv");
    let sparse = read_tracks(&labels).with_context(|| format!("reading {}", labels.display()))?;
    let pseudo_path = dir.join("pseudo.csv");
    let pseudo = if pseudo_path.is_file() { Some(read_labels(&pseudo_path)?) } else { None };
    if pseudo.is_none() {
        log::warn!("{}: no pseudo.csv, only last-frame labels and flow phases use this video", dir.display());
    }
    Ok(SparseVideo { name: dir.display().to_string(), frames, sparse, pseudo })
}

fn train(args: &TrainArgs) -> Result<RunManifest> {
    let (cfg, canonical) = train_config(args)?;
    let init = match &args.init {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut m = RunManifest::new(&format!("train --stage {}", args.stage), &canonical, Some(cfg.seed));
    m.inputs.extend(args.config.iter().cloned());
    m.inputs.extend(args.init.iter().cloned());
    m.inputs.extend(args.data.iter().cloned());
    let mut trainer = match &init {
        Some(ckpt) => Trainer::from_checkpoint(cfg.clone(), ckpt)?,
        None if args.stage == 2 => bail!("stage 2 needs --init <stage-1 checkpoint>"),
        None => Trainer::new(cfg.clone())?,
    };
    if args.stage == 1 {
        let data: Vec<Arc<SynthSample>> = if args.data.is_empty() {
            desk_suite(cfg.seed, 8).iter().map(|s| generate_synth(s).map(Arc::new)).collect::<tissue_track::Result<_>>()?
        } else {
            args.data
                .iter()
                .map(|d| load_truth(d)?.with_context(|| format!("{}: no spec.txt to rebuild ground truth from", d.display())))
                .collect::<Result<_>>()?
        };
        trainer.train_stage1(&data)?;
    } else {
        if args.data.is_empty() {
            bail!("stage 2 needs at least one --data video directory");
        }
        let videos = args.data.iter().map(|d| stage2_video(d)).collect::<Result<Vec<_>>>()?;
        trainer.train_stage2(&videos)?;
    }
    trainer.checkpoint().save(&args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("loss.csv"));
    std::fs::write(&log_path, trainer.log.to_csv())?;
    println!("{}: stage {} finished at step {}", args.out.display(), args.stage, trainer.state.step);
    m.outputs.push(args.out.clone());
    m.outputs.push(log_path);
    Ok(m)
}

fn load_model(checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => Ok(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.restore()?),
        None => {
            log::warn!("no --checkpoint, tracking with the untrained network");
            Ok(Model::new(TrainConfig::default().model_config())?)
        }
    }
}

fn track(video_dir: &Path, queries: &Path, out: &Path, render: Option<&Path>, checkpoint: Option<&Path>, alpha: f64) -> Result<RunManifest> {
    let video = load_video(video_dir)?;
    let query_tracks = read_tracks(queries)?;
    let model = load_model(checkpoint)?;
    let q: Vec<_> = query_tracks.iter().map(|t| t.query).collect();
    let mut tracks = track_points(&video, &q, &ModelEstimator::new(&model, alpha), &TrackerConfig::default())?;
    // tracker ids are query positions; give back the file's ids
    for (t, src) in tracks.iter_mut().zip(&query_tracks) {
        t.id = src.id;
    }
    write_tracks(out, &tracks)?;
    let mut m = RunManifest::new("track", &format!("alpha = {alpha}\nmodel = {:?}\n", model.params.fingerprint()), None);
    m.inputs.extend([video_dir.to_path_buf(), queries.to_path_buf()]);
    m.inputs.extend(checkpoint.map(Path::to_path_buf));
    m.outputs.push(out.into());
    if let Some(dir) = render {
        write_overlay(&video, &tracks, dir)?;
        m.outputs.push(dir.into());
    }
    println!("{}: {} tracks over {} frames", out.display(), tracks.len(), video.len());
    Ok(m)
}

fn eval(pred: &Path, gt: &Path, report: Option<&Path>) -> Result<RunManifest> {
    let p = read_tracks(pred).with_context(|| format!("reading {}", pred.display()))?;
    let g = read_tracks(gt).with_context(|| format!("reading {}", gt.display()))?;
    let r = MetricReport::compute(&p, &g)?;
    let text = r.to_text();
    print!("{text}");
    let mut m = RunManifest::new("eval", "", None);
    m.inputs.extend([pred.to_path_buf(), gt.to_path_buf()]);
    if let Some(path) = report {
        std::fs::write(path, &text)?;
        m.outputs.push(path.into());
    }
    Ok(m)
}

fn render(video_dir: &Path, tracks_path: &Path, out: &Path) -> Result<RunManifest> {
    let video = load_video(video_dir)?;
    let tracks: Vec<PointTrack> = read_tracks(tracks_path)?;
    let written = write_overlay(&video, &tracks, out)?;
    println!("{}: {} frames", out.display(), written.len());
    let mut m = RunManifest::new("render", "", None);
    m.inputs.extend([video_dir.to_path_buf(), tracks_path.to_path_buf()]);
    m.outputs.push(out.into());
    Ok(m)
}

fn dispatch(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let mut m = match &cli.command {
        Command::SynthGen { spec, out } => synth_gen(spec, out)?,
        Command::PlgGenerate { input, out, threshold, d_filter, max_anchors, teachers, backbone_seed } => {
            plg_generate(input, out, *threshold, *d_filter, *max_anchors, teachers, *backbone_seed)?
        }
        Command::Train(args) => train(args)?,
        Command::Track { video, queries, out, render, checkpoint, alpha } => {
            track(video, queries, out, render.as_deref(), checkpoint.as_deref(), *alpha)?
        }
        Command::Eval { pred, gt, report } => eval(pred, gt, report.as_deref())?,
        Command::Render { video, tracks, out } => render(video, tracks, out)?,
    };
    m.wall_time = start.elapsed();
    // eval without --report still records itself next to the prediction
    let anchor = m.outputs.first().cloned().unwrap_or_else(|| m.inputs[0].with_extension("eval"));
    m.write_next_to(&anchor)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
