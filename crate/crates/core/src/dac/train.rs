//! Pre-training step and loop: chunked contrastive backward, accumulated
//! masked-modeling and classification gradients, one Adam update per step.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::tag;
use crate::autodiff::{adam_step, AdamConfig, AdamState, Mode, PassKey, RngStream, Tape};
use crate::dac::{batch_keys, dac_contrastive_backward, ChunkSchedule, DacOptions};
use crate::encoder::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encoder::{CellInput, Encoder, FeatureBank};
use crate::error::{Error, Result};
use crate::objectives::{cls_nll_sum, mlm_mask, mlm_nll_sum, LossWeights};
use crate::preprocess::SparseProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Parameters rounded through `f32` after init and after every update.
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}` (f32|f64)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over `steps`.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown lr schedule `{s}` (constant|cosine)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mini_batch: usize,
    pub tau: f64,
    pub mask_rate: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Cosine horizon; 0 means `steps`.
    pub lr_decay_steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub steps: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub log_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            mini_batch: 32,
            tau: crate::objectives::DEFAULT_TEMPERATURE,
            mask_rate: crate::objectives::DEFAULT_MASK_RATE,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Cosine,
            lr_decay_steps: 0,
            seed: 0,
            precision: Precision::F32,
            steps: 100,
            checkpoint_every: 0,
            log_wall_ms: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate of the update that follows `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.adam.lr,
            LrSchedule::Cosine => {
                let horizon = if self.lr_decay_steps > 0 { self.lr_decay_steps } else { self.steps };
                let frac = step as f64 / horizon.max(1) as f64;
                0.5 * self.adam.lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        ChunkSchedule::new(self.batch_size, self.mini_batch)?;
        self.weights.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} not in (0, 1)", self.mask_rate)));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("mini_batch", self.mini_batch.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("mask_rate", format!("{:?}", self.mask_rate)),
            ("weight_cl", format!("{:?}", self.weights.cl)),
            ("weight_mlm", format!("{:?}", self.weights.mlm)),
            ("weight_cls", format!("{:?}", self.weights.cls)),
            ("lr", format!("{:?}", self.adam.lr)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("eps", format!("{:?}", self.adam.eps)),
            ("weight_decay", format!("{:?}", self.adam.weight_decay)),
            ("lr_schedule", self.lr_schedule.name().into()),
            ("lr_decay_steps", self.lr_decay_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.name().into()),
            ("steps", self.steps.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_wall_ms", self.log_wall_ms.to_string()),
        ]
    }

    /// Applies one config entry; returns `false` if the key is not a trainer key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "mini_batch" => self.mini_batch = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "mask_rate" => self.mask_rate = num(key, value)?,
            "weight_cl" => self.weights.cl = num(key, value)?,
            "weight_mlm" => self.weights.mlm = num(key, value)?,
            "weight_cls" => self.weights.cls = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "eps" => self.adam.eps = num(key, value)?,
            "weight_decay" => self.adam.weight_decay = num(key, value)?,
            "lr_schedule" => self.lr_schedule = LrSchedule::parse(value)?,
            "lr_decay_steps" => self.lr_decay_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => self.precision = Precision::parse(value)?,
            "steps" => self.steps = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_wall_ms" => self.log_wall_ms = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_CL")]
    pub l_cl: f64,
    #[serde(rename = "L_MLM")]
    pub l_mlm: f64,
    #[serde(rename = "L_CLS")]
    pub l_cls: f64,
    pub combined: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

/// Corpus indices of the batch used at `step` (0-based).
///
/// Sample `i` of step `s` is position `s·T + i` of an endless stream that
/// walks a fresh permutation of the corpus per epoch.
pub struct BatchSampler {
    n: usize,
    seed: u64,
    perms: HashMap<u64, Vec<usize>>,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Usage("empty training corpus".into()));
        }
        Ok(BatchSampler {
            n,
            seed,
            perms: HashMap::new(),
        })
    }

    pub fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        let (n, seed) = (self.n as u64, self.seed);
        (0..size as u64)
            .map(|i| {
                let p = step * size as u64 + i;
                let epoch = p / n;
                let perm = self
                    .perms
                    .entry(epoch)
                    .or_insert_with(|| RngStream::keyed(seed, &[tag::SHUFFLE, epoch]).permutation(n as usize));
                perm[(p % n) as usize]
            })
            .collect()
    }

    pub fn epoch_of(&self, step: u64, size: usize) -> u64 {
        step * size as u64 / self.n as u64
    }
}

fn masked_inputs(
    enc: &Encoder,
    batch: &[&SparseProfile],
    step: u64,
    cfg: &TrainConfig,
) -> Result<(Vec<CellInput>, Vec<Vec<usize>>)> {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for (i, p) in batch.iter().enumerate() {
        let mut rng = RngStream::keyed(cfg.seed, &[tag::MASK, step, i as u64]);
        let mask = mlm_mask(p.len(), cfg.mask_rate, &mut rng)?;
        inputs.push(enc.tokenize(p, &mask)?);
        masks.push(mask);
    }
    Ok((inputs, masks))
}

/// One optimizer step on `batch`: gradients of the weighted loss sum, then Adam.
///
/// On any error the gradients are cleared and parameters are left untouched.
pub fn train_step(
    enc: &mut Encoder,
    state: &mut AdamState,
    batch: &[&SparseProfile],
    step: u64,
    epoch: u64,
    cfg: &TrainConfig,
    features: Option<&FeatureBank>,
) -> Result<StepMetrics> {
    enc.params.zero_grads();
    let out = accumulate(enc, batch, step, epoch, cfg, features);
    let (l_cl, l_mlm, l_cls) = match out {
        Ok(v) => v,
        Err(e) => {
            enc.params.zero_grads();
            return Err(e);
        }
    };
    if !enc.params.grads_finite() {
        enc.params.zero_grads();
        return Err(Error::numerical("backward", "non-finite gradient"));
    }
    let grad_norm = enc.params.grad_norm();
    let adam = AdamConfig {
        lr: cfg.lr_at(step),
        ..cfg.adam
    };
    adam_step(&mut enc.params, state, &adam);
    if cfg.precision == Precision::F32 {
        enc.params.round_to_f32();
    }
    let w = &cfg.weights;
    Ok(StepMetrics {
        step: step + 1,
        l_cl,
        l_mlm,
        l_cls,
        combined: w.cl * l_cl + w.mlm * l_mlm + w.cls * l_cls,
        grad_norm,
        wall_ms: None,
    })
}

fn accumulate(
    enc: &mut Encoder,
    batch: &[&SparseProfile],
    step: u64,
    epoch: u64,
    cfg: &TrainConfig,
    features: Option<&FeatureBank>,
) -> Result<(f64, f64, f64)> {
    let schedule = ChunkSchedule::new(batch.len(), cfg.mini_batch)?;
    let w = cfg.weights;

    let mut l_cl = 0.0;
    if w.cl > 0.0 && batch.len() > 1 {
        let plain = batch
            .iter()
            .map(|p| enc.tokenize(p, &[]))
            .collect::<Result<Vec<_>>>()?;
        let keys = batch_keys(cfg.seed, epoch, step, batch.len());
        let opts = DacOptions {
            loss_scale: w.cl,
            ..DacOptions::new(cfg.tau)
        };
        let out = dac_contrastive_backward(enc, &plain, &keys, features, &schedule, &opts)?;
        l_cl = out.chunk_losses[0];
    }

    let (inputs, masks) = masked_inputs(enc, batch, step, cfg)?;
    let n_masked: usize = masks.iter().map(Vec::len).sum();
    let n_labeled = batch.iter().filter(|p| p.label.target().is_some()).count();
    let (mut mlm_sum, mut cls_sum) = (0.0, 0.0);
    let need_mlm = w.mlm > 0.0 && n_masked > 0;
    let need_cls = w.cls > 0.0 && n_labeled > 0;
    if need_mlm || need_cls {
        for range in schedule.ranges() {
            let mut tape = Tape::new(Mode::Grad);
            let bound = enc.bind(&mut tape);
            let mut terms = Vec::new();
            for i in range {
                let key = PassKey {
                    seed: cfg.seed,
                    epoch,
                    batch: step,
                    sample: i as u64,
                    pass: 2,
                };
                let h = enc.encode(&mut tape, &bound, &inputs[i], Some(key), features)?;
                if need_mlm && !masks[i].is_empty() {
                    let logits = enc.mlm_logits(&mut tape, &bound, &h, &masks[i])?;
                    let targets: Vec<usize> = masks[i].iter().map(|&k| inputs[i].bins[k]).collect();
                    let nll = mlm_nll_sum(&mut tape, &logits, &targets)?;
                    mlm_sum += nll.item();
                    terms.push(tape.scale(&nll, w.mlm / n_masked as f64)?);
                }
                if let (true, Some(label)) = (need_cls, batch[i].label.target()) {
                    let logit = enc.cls_logit(&mut tape, &bound, &h)?;
                    let nll = cls_nll_sum(&mut tape, &logit, &[label])?;
                    cls_sum += nll.item();
                    terms.push(tape.scale(&nll, w.cls / n_labeled as f64)?);
                }
            }
            if terms.is_empty() {
                continue;
            }
            let mut total = terms[0].clone();
            for t in &terms[1..] {
                total = tape.add(&total, t)?;
            }
            tape.backward(&total, &mut enc.params)?;
        }
    }
    let l_mlm = if n_masked > 0 { mlm_sum / n_masked as f64 } else { 0.0 };
    let l_cls = if n_labeled > 0 { cls_sum / n_labeled as f64 } else { 0.0 };
    Ok((l_cl, l_mlm, l_cls))
}

/// Optimizer sidecar next to a checkpoint: magic `b"GCOP"`, version, step,
/// then per parameter the element count and both moment vectors as `f64`.
pub fn encode_optimizer(state: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"GCOP");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.m.len() as u32).to_le_bytes());
    for (m, v) in state.m.iter().zip(&state.v) {
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for x in m.iter().chain(v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_optimizer(bytes: &[u8], enc: &Encoder) -> Result<AdamState> {
    let bad = || Error::Schema("malformed optimizer state".into());
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(bad)?;
        at += n;
        Ok(s)
    };
    if take(4)? != b"GCOP" || u32::from_le_bytes(take(4)?.try_into().unwrap()) != 1 {
        return Err(bad());
    }
    let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if n != enc.params.len() {
        return Err(Error::Schema(format!("optimizer state covers {n} parameters, model has {}", enc.params.len())));
    }
    let mut state = AdamState {
        step,
        m: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
    };
    for p in enc.params.iter() {
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if len != p.value().numel() {
            return Err(Error::Schema(format!("optimizer state size mismatch for `{}`", p.name)));
        }
        let mut read = |k: usize| -> Result<Vec<f64>> {
            Ok(take(8 * k)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect())
        };
        state.m.push(read(len)?);
        state.v.push(read(len)?);
    }
    if at != bytes.len() {
        return Err(bad());
    }
    Ok(state)
}

pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("optim")
}

pub fn save_training_state(path: &Path, enc: &Encoder, state: &AdamState) -> Result<()> {
    save_checkpoint(path, enc)?;
    let op = optimizer_path(path);
    fs::write(&op, encode_optimizer(state)).map_err(|e| Error::io(&op, e))
}

pub fn load_training_state(path: &Path) -> Result<(Encoder, AdamState)> {
    let enc = load_checkpoint(path)?;
    let op = optimizer_path(path);
    let bytes = fs::read(&op).map_err(|e| Error::io(&op, e))?;
    let state = decode_optimizer(&bytes, &enc)?;
    Ok((enc, state))
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

fn keep_metrics_through(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if m.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` steps, appending one JSON record per step to
/// `out_dir/metrics.jsonl` and writing checkpoints (with optimizer sidecars).
///
/// With `resume`, training continues from that checkpoint's step, and the
/// metrics log is trimmed to the steps already taken.
pub fn pretrain(
    mut enc: Encoder,
    corpus: &[SparseProfile],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(Encoder, Vec<StepMetrics>)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus: Vec<SparseProfile> = corpus.iter().map(|p| p.truncated(enc.config.max_seq_len)).collect();
    let mut state = match resume {
        Some(path) => {
            let (loaded, state) = load_training_state(path)?;
            if loaded.config != enc.config {
                return Err(Error::Config("resume checkpoint has a different encoder config".into()));
            }
            enc = loaded;
            state
        }
        None => {
            if cfg.precision == Precision::F32 {
                enc.params.round_to_f32();
            }
            AdamState::new(&enc.params)
        }
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    if resume.is_some() {
        keep_metrics_through(&metrics_path, state.step)?;
    } else {
        File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut sampler = BatchSampler::new(corpus.len(), cfg.seed)?;
    let mut fixed_features = if enc.config.redraw_features { None } else { enc.feature_bank(0) };
    let mut history = Vec::new();
    for step in state.step..cfg.steps {
        let started = Instant::now();
        let idx = sampler.batch(step, cfg.batch_size);
        let batch: Vec<&SparseProfile> = idx.iter().map(|&i| &corpus[i]).collect();
        let epoch = sampler.epoch_of(step, cfg.batch_size);
        let redrawn;
        let features = if enc.config.redraw_features {
            redrawn = enc.feature_bank(step);
            redrawn.as_ref()
        } else {
            fixed_features.as_ref()
        };
        let mut m = train_step(&mut enc, &mut state, &batch, step, epoch, cfg, features)?;
        if cfg.log_wall_ms {
            m.wall_ms = Some(started.elapsed().as_millis() as u64);
        }
        let line = serde_json::to_string(&m).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "step {} L_CL={:.5} L_MLM={:.5} L_CLS={:.5} grad_norm={:.4e}",
            m.step,
            m.l_cl,
            m.l_mlm,
            m.l_cls,
            m.grad_norm
        );
        history.push(m);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            save_training_state(&out_dir.join(checkpoint_name(state.step)), &enc, &state)?;
        }
    }
    fixed_features.take();
    save_training_state(&out_dir.join(FINAL_CHECKPOINT), &enc, &state)?;
    Ok((enc, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{labeled_corpus, SyntheticSpec};

    #[test]
    fn full_size_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.adam.lr, c.adam.weight_decay), (1e-4, 0.0));
        assert_eq!(c.batch_size, 512);
        assert_eq!(c.lr_schedule, LrSchedule::Cosine);
        let e = EncoderConfig::default();
        assert_eq!((e.dropout_p, e.proj_dim), (0.1, 512));
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            mini_batch: 3,
            steps: 3,
            seed: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 1).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|st| s.batch(st, 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.epoch_of(5, 2), 1);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (corpus, _) = labeled_corpus(&SyntheticSpec::new(16, 24, 2, 3)).unwrap();
        let mut enc = Encoder::new(EncoderConfig::tiny(24), 2).unwrap();
        enc.params.round_to_f32();
        let before = enc.params.fingerprint();
        let mut state = AdamState::new(&enc.params);
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..tiny_cfg()
        };
        let batch: Vec<&SparseProfile> = corpus.profiles.iter().take(8).collect();
        let m = train_step(&mut enc, &mut state, &batch, 0, 0, &cfg, None).unwrap();
        assert!(m.l_cl > 0.0 && m.l_mlm > 0.0 && m.l_cls > 0.0);
        assert!(m.grad_norm > 0.0);
        assert_eq!(enc.params.fingerprint(), before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { steps: 10, ..tiny_cfg() };
        assert_eq!(cfg.lr_at(0), cfg.adam.lr);
        assert!((cfg.lr_at(5) - 0.5 * cfg.adam.lr).abs() < 1e-18);
        assert!(cfg.lr_at(10).abs() < 1e-18);
    }

    #[test]
    fn optimizer_sidecar_round_trip() {
        let enc = Encoder::new(EncoderConfig::tiny(5), 2).unwrap();
        let mut state = AdamState::new(&enc.params);
        state.step = 7;
        state.m[3][0] = 0.125;
        state.v[2][1] = 1e-300;
        let back = decode_optimizer(&encode_optimizer(&state), &enc).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (corpus, _) = labeled_corpus(&SyntheticSpec::new(20, 24, 2, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let enc = || Encoder::new(EncoderConfig::tiny(24), 2).unwrap();
        let full_cfg = TrainConfig {
            steps: 4,
            lr_decay_steps: 4,
            checkpoint_every: 2,
            ..tiny_cfg()
        };
        let a = dir.path().join("a");
        let (ea, ha) = pretrain(enc(), &corpus.profiles, &full_cfg, &a, None).unwrap();

        let b = dir.path().join("b");
        let half = TrainConfig { steps: 2, ..full_cfg.clone() };
        pretrain(enc(), &corpus.profiles, &half, &b, None).unwrap();
        let ckpt = b.join(checkpoint_name(2));
        let (eb, hb) = pretrain(enc(), &corpus.profiles, &full_cfg, &b, Some(&ckpt)).unwrap();
        assert_eq!(hb, ha[2..].to_vec());
        assert_eq!(ea.params.fingerprint(), eb.params.fingerprint());
        assert_eq!(
            fs::read(a.join(METRICS_FILE)).unwrap(),
            fs::read(b.join(METRICS_FILE)).unwrap()
        );
    }
}
