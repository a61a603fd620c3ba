use std::fmt::Write as _;

use crate::config::{parse_bool, parse_flat, parse_num};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mfga::MfgaConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub block_iterations: usize,
    pub total: usize,
    pub lr_point: f64,
    pub lr_flow: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Frame pairs per flow step.
    pub batch: usize,
    /// Labeled intermediate frames sampled per point step; 0 takes all.
    pub frames_per_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub mfga_enabled: bool,
    pub semantic_enabled: bool,
    pub uflow_enabled: bool,
    pub point_enabled: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { mfga_enabled: true, semantic_enabled: true, uflow_enabled: true, point_enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub c_ls: usize,
    pub c_hybrid: usize,
    pub window: Option<usize>,
    pub backbone_seed: u64,
    pub embedder_seed: u64,
}

impl Default for TrainConfig {
    /// Desk scale: fewer iterations, smaller batch and larger learning rates
    /// than [`TrainConfig::full_scale`].
    fn default() -> Self {
        Self {
            seed: 7,
            stage1: Stage1Config { iterations: 300, lr: 2e-3, batch: 2, alpha_start: 1e-5, alpha_end: 0.3 },
            stage2: Stage2Config {
                block_iterations: 100,
                total: 400,
                lr_point: 1e-4,
                lr_flow: 1e-3,
                alpha_start: 0.3,
                alpha_end: 1.0,
                batch: 2,
                frames_per_step: 4,
            },
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            weight_decay: 1e-5,
            clip_norm: 1.0,
            c_ls: 128,
            c_hybrid: 128,
            window: None,
            backbone_seed: 1,
            embedder_seed: 2,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 10k iterations per stage at batch 8.
    pub fn full_scale() -> Self {
        let d = Self::default();
        Self {
            stage1: Stage1Config { iterations: 10_000, lr: 2e-5, batch: 8, ..d.stage1 },
            stage2: Stage2Config { block_iterations: 2500, total: 10_000, lr_point: 1e-6, lr_flow: 1e-5, frames_per_step: 0, ..d.stage2 },
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let lrs = [self.stage1.lr, self.stage2.lr_point, self.stage2.lr_flow];
        if lrs.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("learning rates must be positive, got {lrs:?}")));
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        let b = self.stage2.block_iterations;
        if b == 0 || self.stage2.total % (2 * b) != 0 {
            return Err(Error::Config(format!(
                "stage2.total ({}) must be a multiple of 2 * stage2.block_iterations ({b})",
                self.stage2.total
            )));
        }
        let alphas = [self.stage1.alpha_start, self.stage1.alpha_end, self.stage2.alpha_start, self.stage2.alpha_end];
        if alphas.iter().any(|a| !(*a > 0.0)) || alphas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("alpha endpoints must be positive and non-decreasing, got {alphas:?}")));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("weight decay must be >= 0 and clip norm > 0".into()));
        }
        if self.c_ls == 0 || self.c_hybrid == 0 {
            return Err(Error::Config("mfga widths must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mfga: MfgaConfig {
                c_ls: self.c_ls,
                c_hybrid: self.c_hybrid,
                window: self.window,
                enabled: self.ablation.mfga_enabled,
                semantic_enabled: self.ablation.semantic_enabled,
            },
            backbone_seed: self.backbone_seed,
            embedder_seed: self.embedder_seed,
            init_seed: self.seed,
            ..ModelConfig::default()
        }
    }

    /// Overrides from flat `key = value` text on top of the desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_flat(text)? {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => c.seed = parse_num(k, v)?,
                "stage1.iterations" => c.stage1.iterations = parse_num(k, v)?,
                "stage1.lr" => c.stage1.lr = parse_num(k, v)?,
                "stage1.batch" => c.stage1.batch = parse_num(k, v)?,
                "stage1.alpha_start" => c.stage1.alpha_start = parse_num(k, v)?,
                "stage1.alpha_end" => c.stage1.alpha_end = parse_num(k, v)?,
                "stage2.block_iterations" => c.stage2.block_iterations = parse_num(k, v)?,
                "stage2.total" => c.stage2.total = parse_num(k, v)?,
                "stage2.lr_point" => c.stage2.lr_point = parse_num(k, v)?,
                "stage2.lr_flow" => c.stage2.lr_flow = parse_num(k, v)?,
                "stage2.alpha_start" => c.stage2.alpha_start = parse_num(k, v)?,
                "stage2.alpha_end" => c.stage2.alpha_end = parse_num(k, v)?,
                "stage2.batch" => c.stage2.batch = parse_num(k, v)?,
                "stage2.frames_per_step" => c.stage2.frames_per_step = parse_num(k, v)?,
                "loss.eps1" => c.loss.eps1 = parse_num(k, v)?,
                "loss.eps2" => c.loss.eps2 = parse_num(k, v)?,
                "loss.eps3" => c.loss.eps3 = parse_num(k, v)?,
                "loss.omega" => c.loss.omega = parse_num(k, v)?,
                "loss.gamma" => c.loss.gamma_seq = parse_num(k, v)?,
                "loss.huber_delta" => c.loss.huber_delta = parse_num(k, v)?,
                "loss.d_cons" => c.loss.d_cons = parse_num(k, v)?,
                "loss.lambda_smooth" => c.loss.lambda_smooth = parse_num(k, v)?,
                "ablation.mfga_enabled" => c.ablation.mfga_enabled = parse_bool(k, v)?,
                "ablation.semantic_enabled" => c.ablation.semantic_enabled = parse_bool(k, v)?,
                "ablation.uflow_enabled" => c.ablation.uflow_enabled = parse_bool(k, v)?,
                "ablation.point_enabled" => c.ablation.point_enabled = parse_bool(k, v)?,
                "optim.weight_decay" => c.weight_decay = parse_num(k, v)?,
                "optim.clip_norm" => c.clip_norm = parse_num(k, v)?,
                "mfga.c_ls" => c.c_ls = parse_num(k, v)?,
                "mfga.c_hybrid" => c.c_hybrid = parse_num(k, v)?,
                "mfga.window" => c.window = if v == "none" { None } else { Some(parse_num(k, v)?) },
                "backbone.seed" => c.backbone_seed = parse_num(k, v)?,
                "embedder.seed" => c.embedder_seed = parse_num(k, v)?,
                // no augmentation is implemented; the key exists so configs can say so
                "augmentation" if v == "none" => {}
                "augmentation" => return Err(Error::Config(format!("augmentation `{v}` is not supported (only `none`)"))),
                _ => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Every key with its value; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("stage1.iterations", self.stage1.iterations.to_string());
        kv("stage1.lr", self.stage1.lr.to_string());
        kv("stage1.batch", self.stage1.batch.to_string());
        kv("stage1.alpha_start", self.stage1.alpha_start.to_string());
        kv("stage1.alpha_end", self.stage1.alpha_end.to_string());
        kv("stage2.block_iterations", self.stage2.block_iterations.to_string());
        kv("stage2.total", self.stage2.total.to_string());
        kv("stage2.lr_point", self.stage2.lr_point.to_string());
        kv("stage2.lr_flow", self.stage2.lr_flow.to_string());
        kv("stage2.alpha_start", self.stage2.alpha_start.to_string());
        kv("stage2.alpha_end", self.stage2.alpha_end.to_string());
        kv("stage2.batch", self.stage2.batch.to_string());
        kv("stage2.frames_per_step", self.stage2.frames_per_step.to_string());
        kv("loss.eps1", self.loss.eps1.to_string());
        kv("loss.eps2", self.loss.eps2.to_string());
        kv("loss.eps3", self.loss.eps3.to_string());
        kv("loss.omega", self.loss.omega.to_string());
        kv("loss.gamma", self.loss.gamma_seq.to_string());
        kv("loss.huber_delta", self.loss.huber_delta.to_string());
        kv("loss.d_cons", self.loss.d_cons.to_string());
        kv("loss.lambda_smooth", self.loss.lambda_smooth.to_string());
        kv("ablation.mfga_enabled", self.ablation.mfga_enabled.to_string());
        kv("ablation.semantic_enabled", self.ablation.semantic_enabled.to_string());
        kv("ablation.uflow_enabled", self.ablation.uflow_enabled.to_string());
        kv("ablation.point_enabled", self.ablation.point_enabled.to_string());
        kv("optim.weight_decay", self.weight_decay.to_string());
        kv("optim.clip_norm", self.clip_norm.to_string());
        kv("mfga.c_ls", self.c_ls.to_string());
        kv("mfga.c_hybrid", self.c_hybrid.to_string());
        kv("mfga.window", self.window.map_or("none".into(), |w| w.to_string()));
        kv("backbone.seed", self.backbone_seed.to_string());
        kv("embedder.seed", self.embedder_seed.to_string());
        kv("augmentation", "none".into());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_checks() {
        let c = TrainConfig { seed: 9, window: Some(2), ..TrainConfig::full_scale() };
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
        assert!(TrainConfig::parse("stage2.total = 300").is_err());
        assert!(TrainConfig::parse("stage1.lr = 0").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("augmentation = flips").is_err());
        let c = TrainConfig::parse("ablation.uflow_enabled = off\nmfga.c_ls = 16").unwrap();
        assert!(!c.ablation.uflow_enabled);
        assert_eq!(c.model_config().mfga.c_ls, 16);
    }
}
