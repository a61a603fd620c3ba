//! Versioned binary checkpoint: model config, trainable parameters,
//! optimizer moments and the training state, all little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::BackendKind;
use crate::error::{Error, Result};
use crate::mfga::MfgaConfig;
use crate::model::{Model, ModelConfig};
use crate::nn::AdamW;

use super::{Phase, RngState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ETCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const FILE: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// `(name, shape, values)` per tensor, in store order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizers: Vec<AdamW>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizers: &[AdamW], state: &TrainState) -> Self {
        let values = model.params.values();
        let params = model
            .params
            .specs()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone(), values[s.offset..s.offset + s.len].to_vec()))
            .collect();
        Self { model: model.cfg, params, optimizers: optimizers.to_vec(), state: state.clone() }
    }

    /// Builds the toy-backend model and loads the stored parameters.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::new(self.model)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        let specs = model.params.specs().to_vec();
        if specs.len() != self.params.len() {
            return Err(Error::Config(format!("checkpoint has {} tensors, model has {}", self.params.len(), specs.len())));
        }
        for (spec, (name, shape, vals)) in specs.iter().zip(&self.params) {
            if &spec.name != name || &spec.shape != shape {
                return Err(Error::Config(format!("checkpoint tensor {name} {shape:?} does not match model tensor {} {:?}", spec.name, spec.shape)));
            }
            model.params.values_mut()[spec.offset..spec.offset + spec.len].copy_from_slice(vals);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let m = &self.model;
        for v in [m.stride, m.middle_channels, m.semantic_channels, m.mfga.c_ls, m.mfga.c_hybrid] {
            w.u64(v as u64);
        }
        w.u64(m.mfga.window.map_or(u64::MAX, |v| v as u64));
        w.u8(m.mfga.enabled as u8);
        w.u8(m.mfga.semantic_enabled as u8);
        w.u8(kind_byte(m.backbone_kind));
        w.u8(kind_byte(m.embedder_kind));
        w.u64(m.backbone_seed);
        w.u64(m.embedder_seed);
        w.u64(m.init_seed);

        w.u32(self.params.len() as u32);
        for (name, shape, vals) in &self.params {
            w.str(name);
            w.u32(shape.len() as u32);
            shape.iter().for_each(|&d| w.u64(d as u64));
            w.f64s(vals);
        }

        w.u32(self.optimizers.len() as u32);
        for o in &self.optimizers {
            for v in [o.beta1, o.beta2, o.eps, o.weight_decay] {
                w.f64(v);
            }
            w.u64(o.step);
            w.f64s(&o.m);
            w.f64s(&o.v);
        }

        let s = &self.state;
        w.u8(s.stage);
        w.u64(s.step as u64);
        w.u8(match s.phase {
            Phase::None => 0,
            Phase::Point => 1,
            Phase::Flow => 2,
        });
        w.0.extend_from_slice(&s.rng.seed);
        w.u64(s.rng.stream);
        w.0.extend_from_slice(&s.rng.word_pos.to_le_bytes());
        w.u32(s.averages.len() as u32);
        for (k, v) in &s.averages {
            w.str(k);
            w.f64(*v);
        }
        w.str(&s.snapshot);
        w.f64(s.latest[0]);
        w.f64(s.latest[1]);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format_err("magic", 0, format!("expected ETCK, found {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let stride = r.usize("stride")?;
        let middle_channels = r.usize("middle_channels")?;
        let semantic_channels = r.usize("semantic_channels")?;
        let c_ls = r.usize("c_ls")?;
        let c_hybrid = r.usize("c_hybrid")?;
        let window = match r.u64("window")? {
            u64::MAX => None,
            v => Some(v as usize),
        };
        let enabled = r.flag("mfga_enabled")?;
        let semantic_enabled = r.flag("semantic_enabled")?;
        let backbone_kind = r.kind("backbone_kind")?;
        let embedder_kind = r.kind("embedder_kind")?;
        let model = ModelConfig {
            stride,
            middle_channels,
            semantic_channels,
            mfga: MfgaConfig { c_ls, c_hybrid, window, enabled, semantic_enabled },
            backbone_kind,
            embedder_kind,
            backbone_seed: r.u64("backbone_seed")?,
            embedder_seed: r.u64("embedder_seed")?,
            init_seed: r.u64("init_seed")?,
        };

        let n = r.u32("param_count")?;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = r.str("param_name")?;
            let nd = r.u32("param_ndim")?;
            let shape = (0..nd).map(|_| r.usize("param_shape")).collect::<Result<Vec<_>>>()?;
            let vals = r.f64s("param_values")?;
            if vals.len() != shape.iter().product::<usize>() {
                return Err(format_err("param_values", r.pos, format!("{name}: {} values for shape {shape:?}", vals.len())));
            }
            params.push((name, shape, vals));
        }

        let n = r.u32("optimizer_count")?;
        let mut optimizers = Vec::new();
        for _ in 0..n {
            let (beta1, beta2, eps, weight_decay) = (r.f64("beta1")?, r.f64("beta2")?, r.f64("eps")?, r.f64("weight_decay")?);
            let step = r.u64("optimizer_step")?;
            let m = r.f64s("moment1")?;
            let v = r.f64s("moment2")?;
            optimizers.push(AdamW { beta1, beta2, eps, weight_decay, step, m, v });
        }

        let stage = r.u8("stage")?;
        let step = r.usize("step")?;
        let at = r.pos;
        let phase = match r.u8("phase")? {
            0 => Phase::None,
            1 => Phase::Point,
            2 => Phase::Flow,
            p => return Err(format_err("phase", at, format!("unknown phase {p}"))),
        };
        let seed: [u8; 32] = r.take(32, "rng_seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng_stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng_word_pos")?.try_into().expect("16 bytes"));
        let n = r.u32("average_count")?;
        let mut averages = BTreeMap::new();
        for _ in 0..n {
            let k = r.str("average_name")?;
            averages.insert(k, r.f64("average_value")?);
        }
        let snapshot = r.str("snapshot")?;
        let latest = [r.f64("latest_point")?, r.f64("latest_flow")?];
        if r.pos != bytes.len() {
            return Err(format_err("trailing", r.pos, format!("{} unexpected bytes", bytes.len() - r.pos)));
        }
        let state = TrainState { stage, step, phase, rng: RngState { seed, stream, word_pos }, averages, snapshot, latest };
        Ok(Self { model, params, optimizers, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn kind_byte(k: BackendKind) -> u8 {
    match k {
        BackendKind::Toy => 0,
        BackendKind::External => 1,
    }
}

fn format_err(field: &str, offset: usize, reason: String) -> Error {
    Error::Format { file: FILE, field: field.into(), offset, reason }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(field, self.pos, format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self, field: &str) -> Result<usize> {
        let at = self.pos;
        usize::try_from(self.u64(field)?).map_err(|_| format_err(field, at, "value does not fit".into()))
    }
    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, field: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.usize(field)?;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(format_err(field, at, format!("truncated: {n} values announced")));
        }
        (0..n).map(|_| self.f64(field)).collect()
    }
    fn str(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, field)?.to_vec()).map_err(|_| format_err(field, at, "invalid UTF-8".into()))
    }
    fn flag(&mut self, field: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(field)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format_err(field, at, format!("expected 0 or 1, found {v}"))),
        }
    }
    fn kind(&mut self, field: &str) -> Result<BackendKind> {
        let at = self.pos;
        match self.u8(field)? {
            0 => Ok(BackendKind::Toy),
            1 => Ok(BackendKind::External),
            v => Err(format_err(field, at, format!("unknown backend kind {v}"))),
        }
    }
}
