//! Divide-and-conquer contrastive learning.
//!
//! Step 1 embeds the whole batch without recording a tape. Each chunk is then
//! re-embedded with gradients under the same dropout keys, its rows are
//! spliced into the cached matrices, and the full-batch loss is
//! back-propagated. The accumulated gradient equals the end-to-end gradient.

pub mod memory;
pub mod train;

use std::ops::Range;

use rayon::prelude::*;

use crate::autodiff::{Mode, PassKey, Tape, Tensor, Var};
use crate::encoder::{CellInput, Encoder, EncoderConfig, FeatureBank};
use crate::error::{Error, Result};
use crate::objectives::{info_nce_loss, make_positive_pair};

pub use memory::{max_len_for_budget, memory_estimator, MemoryModel};

/// Default bound on `|h′ − h|` between cached and recomputed rows.
pub const REPLAY_TOL: f64 = 1e-9;

/// Partition of a batch of `T` samples into chunks of at most `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkSchedule {
    pub batch_size: usize,
    pub mini_batch: usize,
}

impl ChunkSchedule {
    pub fn new(batch_size: usize, mini_batch: usize) -> Result<Self> {
        if batch_size == 0 || mini_batch == 0 {
            return Err(Error::Config("batch and mini-batch sizes must be positive".into()));
        }
        Ok(ChunkSchedule {
            batch_size,
            mini_batch,
        })
    }

    pub fn n_chunks(&self) -> usize {
        self.batch_size.div_ceil(self.mini_batch)
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        (0..self.n_chunks())
            .map(|k| k * self.mini_batch..((k + 1) * self.mini_batch).min(self.batch_size))
            .collect()
    }
}

/// No-grad embeddings of both views of every sample, with the keys that produced them.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    pub h: Tensor,
    pub h_plus: Tensor,
    pub keys: Vec<PassKey>,
}

#[derive(Clone, Debug, Default)]
pub struct DacOptions {
    pub tau: f64,
    /// Multiplier applied to every chunk loss before back-propagation.
    pub loss_scale: f64,
    pub replay_tol: f64,
    /// Chunk processing order; defaults to ascending.
    pub chunk_order: Option<Vec<usize>>,
    /// Test hook: shift the epoch of every Step-2 key so recomputation no longer matches.
    pub inject_replay_fault: bool,
}

impl DacOptions {
    pub fn new(tau: f64) -> Self {
        DacOptions {
            tau,
            loss_scale: 1.0,
            replay_tol: REPLAY_TOL,
            chunk_order: None,
            inject_replay_fault: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DacOutcome {
    /// Full-batch loss seen by each chunk, in processing order.
    pub chunk_losses: Vec<f64>,
    /// Largest `|h′ − h|` over all recomputed rows.
    pub max_replay_diff: f64,
    pub cache: EmbeddingCache,
}

fn stack_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

/// Step 1: both views of every sample, computed in parallel without a tape.
pub fn fill_cache(
    enc: &Encoder,
    inputs: &[CellInput],
    keys: &[PassKey],
    features: Option<&FeatureBank>,
) -> Result<EmbeddingCache> {
    if inputs.len() != keys.len() {
        return Err(Error::Usage("one pass key per sample required".into()));
    }
    let pairs = inputs
        .par_iter()
        .zip(keys.par_iter())
        .map(|(input, &key)| {
            let mut tape = Tape::new(Mode::NoGrad);
            let w = enc.bind(&mut tape);
            let (h, hp) = make_positive_pair(enc, &mut tape, &w, input, key, features)?;
            debug_assert!(tape.is_empty());
            Ok((h.to_tensor().into_data(), hp.to_tensor().into_data()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (h, hp): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(EmbeddingCache {
        h: stack_rows(&h)?,
        h_plus: stack_rows(&hp)?,
        keys: keys.to_vec(),
    })
}

fn splice(tape: &mut Tape, cached: &Tensor, range: &Range<usize>, fresh: Vec<Var>) -> Result<Var> {
    let mut parts = Vec::with_capacity(fresh.len() + 2);
    if range.start > 0 {
        parts.push(tape.constant(cached.slice_rows(0, range.start)));
    }
    parts.extend(fresh);
    if range.end < cached.rows() {
        parts.push(tape.constant(cached.slice_rows(range.end, cached.rows())));
    }
    tape.concat_rows(&parts)
}

/// Accumulates `∂L_CL/∂ω` chunk by chunk; parameters are never updated.
pub fn dac_contrastive_backward(
    enc: &mut Encoder,
    inputs: &[CellInput],
    keys: &[PassKey],
    features: Option<&FeatureBank>,
    schedule: &ChunkSchedule,
    opts: &DacOptions,
) -> Result<DacOutcome> {
    if schedule.batch_size != inputs.len() {
        return Err(Error::Usage(format!(
            "schedule covers {} samples, batch has {}",
            schedule.batch_size,
            inputs.len()
        )));
    }
    let cache = fill_cache(enc, inputs, keys, features)?;
    let ranges = schedule.ranges();
    let order: Vec<usize> = match &opts.chunk_order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..ranges.len()).collect::<Vec<_>>() {
                return Err(Error::Usage("chunk order must be a permutation of the chunks".into()));
            }
            o.clone()
        }
        None => (0..ranges.len()).collect(),
    };
    let mut chunk_losses = Vec::with_capacity(ranges.len());
    let mut max_replay_diff: f64 = 0.0;
    for k in order {
        let range = ranges[k].clone();
        let mut tape = Tape::new(Mode::Grad);
        let w = enc.bind(&mut tape);
        let mut fresh_h = Vec::with_capacity(range.len());
        let mut fresh_hp = Vec::with_capacity(range.len());
        for i in range.clone() {
            let mut key = keys[i];
            if opts.inject_replay_fault {
                key.epoch = key.epoch.wrapping_add(1);
            }
            let (h, hp) = make_positive_pair(enc, &mut tape, &w, &inputs[i], key, features)?;
            let diff = max_row_diff(h.value(), cache.h.row(i)).max(max_row_diff(hp.value(), cache.h_plus.row(i)));
            if diff > opts.replay_tol {
                return Err(Error::Replay {
                    sample: i,
                    diff,
                    tol: opts.replay_tol,
                });
            }
            max_replay_diff = max_replay_diff.max(diff);
            fresh_h.push(h);
            fresh_hp.push(hp);
        }
        let full_h = splice(&mut tape, &cache.h, &range, fresh_h)?;
        let full_hp = splice(&mut tape, &cache.h_plus, &range, fresh_hp)?;
        let loss = info_nce_loss(&mut tape, &full_h, &full_hp, opts.tau)?;
        chunk_losses.push(loss.item());
        let scaled = tape.scale(&loss, opts.loss_scale)?;
        tape.backward(&scaled, &mut enc.params)?;
    }
    Ok(DacOutcome {
        chunk_losses,
        max_replay_diff,
        cache,
    })
}

fn max_row_diff(row: &Tensor, cached: &[f64]) -> f64 {
    row.data()
        .iter()
        .zip(cached)
        .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Reference path: one recorded forward of every pair, one loss, one backward.
pub fn end_to_end_backward(
    enc: &mut Encoder,
    inputs: &[CellInput],
    keys: &[PassKey],
    features: Option<&FeatureBank>,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new(Mode::Grad);
    let w = enc.bind(&mut tape);
    let mut hs = Vec::with_capacity(inputs.len());
    let mut hps = Vec::with_capacity(inputs.len());
    for (input, &key) in inputs.iter().zip(keys) {
        let (h, hp) = make_positive_pair(enc, &mut tape, &w, input, key, features)?;
        hs.push(h);
        hps.push(hp);
    }
    let h = tape.concat_rows(&hs)?;
    let hp = tape.concat_rows(&hps)?;
    let loss = info_nce_loss(&mut tape, &h, &hp, tau)?;
    tape.backward(&loss, &mut enc.params)?;
    Ok(loss.item())
}

/// Copies of every gradient tensor, in parameter order.
pub fn snapshot_grads(enc: &Encoder) -> Vec<Tensor> {
    enc.params.iter().map(|p| p.grad().clone()).collect()
}

/// `max_ω ‖a_ω − b_ω‖∞ / ‖b_ω‖∞`, with the parameter that attains it.
///
/// A parameter whose reference gradient is exactly zero contributes the
/// absolute difference.
pub fn max_relative_grad_diff(enc: &Encoder, a: &[Tensor], b: &[Tensor]) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((p, ga), gb) in enc.params.iter().zip(a).zip(b) {
        let diff = ga.max_abs_diff(gb);
        let scale = gb.max_abs();
        let rel = if scale > 0.0 { diff / scale } else { diff };
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, p.name.clone());
        }
    }
    worst
}

/// Dropout keys for the samples of one batch.
pub fn batch_keys(seed: u64, epoch: u64, batch: u64, n: usize) -> Vec<PassKey> {
    (0..n)
        .map(|i| PassKey {
            seed,
            epoch,
            batch,
            sample: i as u64,
            pass: 0,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub tau: f64,
    pub threshold: f64,
    pub inject_replay_fault: bool,
    pub max_genes_per_cell: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tau: crate::objectives::DEFAULT_TEMPERATURE,
            threshold: 1e-6,
            inject_replay_fault: false,
            max_genes_per_cell: 12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScheduleResult {
    pub mini_batch: usize,
    pub n_chunks: usize,
    pub max_rel_diff: f64,
    pub worst_param: String,
    /// Largest `|L^(k) − L|` over the chunks.
    pub max_loss_diff: f64,
    pub max_replay_diff: f64,
    pub params_unchanged: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub batch_size: usize,
    pub seed: u64,
    pub end_to_end_loss: f64,
    pub threshold: f64,
    pub schedules: Vec<ScheduleResult>,
    /// Largest relative gradient difference between any two schedules.
    pub max_pairwise_diff: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.schedules.iter().all(|s| s.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "batch_size={} seed={} end_to_end_loss={:.12} threshold={:e}\n",
            self.batch_size, self.seed, self.end_to_end_loss, self.threshold
        );
        for r in &self.schedules {
            s.push_str(&format!(
                "t={} chunks={} max_rel_grad_diff={:.3e} worst={} max_loss_diff={:.3e} max_replay_diff={:.3e} params_unchanged={} {}\n",
                r.mini_batch,
                r.n_chunks,
                r.max_rel_diff,
                r.worst_param,
                r.max_loss_diff,
                r.max_replay_diff,
                r.params_unchanged,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(&format!("max_pairwise_schedule_diff={:.3e}\n", self.max_pairwise_diff));
        s.push_str(if self.passed() { "result=PASS\n" } else { "result=FAIL\n" });
        s
    }
}

/// Runs the end-to-end path and DAC with each mini-batch size on a synthetic batch.
pub fn verify_gradient_equivalence(
    config: &EncoderConfig,
    batch_size: usize,
    t_list: &[usize],
    seed: u64,
    opts: &VerifyOptions,
) -> Result<EquivalenceReport> {
    let mut enc = Encoder::new(config.clone(), seed)?;
    let corpus = crate::synth::random_profiles(batch_size, config.n_genes, opts.max_genes_per_cell, seed)?;
    let inputs = corpus
        .iter()
        .map(|p| enc.tokenize(&p.truncated(config.max_seq_len), &[]))
        .collect::<Result<Vec<_>>>()?;
    let keys = batch_keys(seed, 0, 0, batch_size);
    let features = enc.feature_bank(0);

    enc.params.zero_grads();
    let e2e_loss = end_to_end_backward(&mut enc, &inputs, &keys, features.as_ref(), opts.tau)?;
    let reference = snapshot_grads(&enc);

    let mut schedules = Vec::with_capacity(t_list.len());
    let mut all_grads: Vec<Vec<Tensor>> = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let schedule = ChunkSchedule::new(batch_size, t)?;
        enc.params.zero_grads();
        let before = enc.params.fingerprint();
        let dac_opts = DacOptions {
            inject_replay_fault: opts.inject_replay_fault,
            ..DacOptions::new(opts.tau)
        };
        let out = dac_contrastive_backward(&mut enc, &inputs, &keys, features.as_ref(), &schedule, &dac_opts)?;
        let params_unchanged = enc.params.fingerprint() == before;
        let grads = snapshot_grads(&enc);
        let (max_rel_diff, worst_param) = max_relative_grad_diff(&enc, &grads, &reference);
        let max_loss_diff = out
            .chunk_losses
            .iter()
            .fold(0.0f64, |m, l| m.max((l - e2e_loss).abs()));
        log::info!("t={t}: max relative gradient difference {max_rel_diff:.3e} ({worst_param})");
        schedules.push(ScheduleResult {
            mini_batch: t,
            n_chunks: schedule.n_chunks(),
            max_rel_diff,
            worst_param,
            max_loss_diff,
            max_replay_diff: out.max_replay_diff,
            params_unchanged,
            passed: max_rel_diff <= opts.threshold && params_unchanged,
        });
        all_grads.push(grads);
    }
    let mut max_pairwise_diff: f64 = 0.0;
    for i in 0..all_grads.len() {
        for j in 0..i {
            let (d, _) = max_relative_grad_diff(&enc, &all_grads[i], &all_grads[j]);
            max_pairwise_diff = max_pairwise_diff.max(d);
        }
    }
    Ok(EquivalenceReport {
        batch_size,
        seed,
        end_to_end_loss: e2e_loss,
        threshold: opts.threshold,
        schedules,
        max_pairwise_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttentionMode;

    #[test]
    fn schedule_partitions_batch() {
        let s = ChunkSchedule::new(10, 4).unwrap();
        assert_eq!(s.n_chunks(), 3);
        assert_eq!(s.ranges(), vec![0..4, 4..8, 8..10]);
        assert_eq!(ChunkSchedule::new(3, 8).unwrap().ranges(), vec![0..3]);
        assert!(ChunkSchedule::new(3, 0).is_err());
    }

    fn setup(cfg: EncoderConfig, n: usize) -> (Encoder, Vec<CellInput>, Vec<PassKey>) {
        let enc = Encoder::new(cfg.clone(), 11).unwrap();
        let corpus = crate::synth::random_profiles(n, cfg.n_genes, 8, 11).unwrap();
        let inputs = corpus.iter().map(|p| enc.tokenize(p, &[]).unwrap()).collect();
        (enc, inputs, batch_keys(11, 0, 0, n))
    }

    #[test]
    fn single_chunk_matches_end_to_end() {
        let (mut enc, inputs, keys) = setup(EncoderConfig::tiny(12), 4);
        end_to_end_backward(&mut enc, &inputs, &keys, None, 0.1).unwrap();
        let a = snapshot_grads(&enc);
        enc.params.zero_grads();
        let s = ChunkSchedule::new(4, 4).unwrap();
        dac_contrastive_backward(&mut enc, &inputs, &keys, None, &s, &DacOptions::new(0.1)).unwrap();
        let b = snapshot_grads(&enc);
        assert!(max_relative_grad_diff(&enc, &b, &a).0 <= 1e-12);
    }

    #[test]
    fn chunk_order_does_not_matter() {
        let (mut enc, inputs, keys) = setup(EncoderConfig::tiny(12), 6);
        let s = ChunkSchedule::new(6, 2).unwrap();
        dac_contrastive_backward(&mut enc, &inputs, &keys, None, &s, &DacOptions::new(0.1)).unwrap();
        let a = snapshot_grads(&enc);
        enc.params.zero_grads();
        let opts = DacOptions {
            chunk_order: Some(vec![2, 0, 1]),
            ..DacOptions::new(0.1)
        };
        dac_contrastive_backward(&mut enc, &inputs, &keys, None, &s, &opts).unwrap();
        let b = snapshot_grads(&enc);
        assert!(max_relative_grad_diff(&enc, &b, &a).0 <= 1e-9);
    }

    #[test]
    fn single_sample_has_zero_contrastive_gradient() {
        let (mut enc, inputs, keys) = setup(EncoderConfig::tiny(12), 1);
        let loss = end_to_end_backward(&mut enc, &inputs, &keys, None, 0.05).unwrap();
        assert_eq!(loss, 0.0);
        assert!(enc.params.iter().all(|p| p.grad().max_abs() == 0.0));
    }

    #[test]
    fn replay_fault_is_detected() {
        let (mut enc, inputs, keys) = setup(EncoderConfig::tiny(12), 4);
        let s = ChunkSchedule::new(4, 2).unwrap();
        let opts = DacOptions {
            inject_replay_fault: true,
            ..DacOptions::new(0.1)
        };
        let err = dac_contrastive_backward(&mut enc, &inputs, &keys, None, &s, &opts).unwrap_err();
        assert!(matches!(err, Error::Replay { sample: 0, .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn verifier_passes_on_both_attention_modes() {
        for mode in [AttentionMode::Exact, AttentionMode::FavorPlus] {
            let cfg = EncoderConfig {
                attention_mode: mode,
                ..EncoderConfig::tiny(20)
            };
            let rep = verify_gradient_equivalence(&cfg, 8, &[1, 2, 4, 8], 3, &VerifyOptions::default()).unwrap();
            assert!(rep.passed(), "{}", rep.to_text());
            assert!(rep.max_pairwise_diff <= 1e-9);
            for s in &rep.schedules {
                assert!(s.max_loss_diff <= 1e-9);
                assert!(s.max_replay_diff <= 1e-9);
            }
        }
    }
}
