//! Activation-memory model for chunked training: `fixed + t · L · c · n_layers` bytes.

use crate::autodiff::{Mode, PassKey, Tape};
use crate::encoder::{AttentionMode, Encoder, EncoderConfig, FeatureKernel};
use crate::error::{Error, Result};
use crate::preprocess::SparseProfile;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryModel {
    /// Activation bytes one token of one sample holds in one layer.
    pub bytes_per_token_layer: f64,
    pub fixed_overhead_bytes: f64,
    pub budget_bytes: f64,
    pub n_layers: usize,
}

pub const GB: f64 = 1e9;

impl MemoryModel {
    /// Full-size model on a 40 GB accelerator; per-token cost calibrated to the
    /// operating points of length 50 at mini-batch 256 and about 13,000 at 1.
    pub fn full() -> Self {
        MemoryModel {
            bytes_per_token_layer: 304_687.5,
            fixed_overhead_bytes: 1.0 * GB,
            budget_bytes: 40.0 * GB,
            n_layers: 10,
        }
    }

    /// This engine at `config`: 64-bit activations of both contrastive views,
    /// with parameters, gradients and both Adam moments as the fixed part.
    pub fn engine(config: &EncoderConfig, budget_bytes: f64) -> Result<Self> {
        let n_params = Encoder::new(config.clone(), 0)?.params.n_values();
        Ok(MemoryModel {
            bytes_per_token_layer: 2.0 * 8.0 * activation_floats_per_token_layer(config, config.max_seq_len),
            fixed_overhead_bytes: 4.0 * 8.0 * n_params as f64,
            budget_bytes,
            n_layers: config.n_layers,
        })
    }

    pub fn preset(name: &str, config: &EncoderConfig, budget_bytes: f64) -> Result<Self> {
        match name {
            "full" => Ok(MemoryModel {
                budget_bytes,
                ..MemoryModel::full()
            }),
            "engine" => MemoryModel::engine(config, budget_bytes),
            _ => Err(Error::Config(format!("unknown memory preset `{name}` (full|engine)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.bytes_per_token_layer) || !ok(self.fixed_overhead_bytes) || !ok(self.budget_bytes) || self.n_layers == 0 {
            return Err(Error::Config("memory model fields must be positive".into()));
        }
        Ok(())
    }
}

/// Values one view of one token records per layer on the tape, by op inventory.
///
/// Linear attention contributes a term in the feature count `m`; exact
/// attention contributes a term in the sequence length instead.
pub fn activation_floats_per_token_layer(cfg: &EncoderConfig, seq_len: usize) -> f64 {
    let d = cfg.feature_size as f64;
    let h = (cfg.feature_size * cfg.ffn_mult) as f64;
    let heads = cfg.n_heads as f64;
    let m = cfg.n_random_features as f64;
    // two layernorms (output, normalized input, inverse std), q/k/v and output
    // projections with biases, head slices, concat, two residual adds
    let mut floats = 2.0 * (2.0 * d + 1.0) + 6.0 * d + 3.0 * d + d + 2.0 * d + 2.0 * d;
    // feed-forward: two affine maps and the activation
    floats += 2.0 * h + h + 2.0 * d;
    if cfg.dropout_p > 0.0 {
        floats += 2.0 * (2.0 * d);
    }
    floats += match cfg.attention_mode {
        AttentionMode::FavorPlus => {
            let (per_map, inputs) = match cfg.kernel {
                FeatureKernel::Softmax => (5.0 * m + 2.0, 4.0 * d),
                FeatureKernel::Relu => (3.0 * m, 2.0 * d),
            };
            // both feature maps with their scaled inputs, transposed key
            // features, numerator, denominator and the ratio
            inputs + 2.0 * d + heads * (2.0 * per_map + m + 1.0)
        }
        AttentionMode::Exact => 2.0 * d + 3.0 * heads * seq_len as f64,
    };
    floats
}

pub fn memory_estimator(model: &MemoryModel, seq_len: usize, mini_batch: usize) -> f64 {
    model.fixed_overhead_bytes
        + mini_batch as f64 * seq_len as f64 * model.bytes_per_token_layer * model.n_layers as f64
}

/// Longest sequence whose estimate fits in `budget` bytes at `mini_batch`.
pub fn max_len_for_budget(model: &MemoryModel, budget: f64, mini_batch: usize) -> Result<usize> {
    if mini_batch == 0 {
        return Err(Error::Config("mini-batch must be positive".into()));
    }
    if budget < model.fixed_overhead_bytes {
        return Err(Error::Infeasible(format!(
            "budget {budget:.3e} B is below the fixed overhead {:.3e} B",
            model.fixed_overhead_bytes
        )));
    }
    let per_token = mini_batch as f64 * model.bytes_per_token_layer * model.n_layers as f64;
    Ok(((budget - model.fixed_overhead_bytes) / per_token).floor() as usize)
}

/// Largest mini-batch that fits in `budget` bytes at `seq_len`.
pub fn max_mini_batch_for_budget(model: &MemoryModel, budget: f64, seq_len: usize) -> Result<usize> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    if budget < model.fixed_overhead_bytes {
        return Err(Error::Infeasible(format!(
            "budget {budget:.3e} B is below the fixed overhead {:.3e} B",
            model.fixed_overhead_bytes
        )));
    }
    let per_sample = seq_len as f64 * model.bytes_per_token_layer * model.n_layers as f64;
    Ok(((budget - model.fixed_overhead_bytes) / per_sample).floor() as usize)
}

/// Bytes of activations a recorded chunk forward actually holds for `profiles`
/// (both views), excluding the parameter leaves.
pub fn measured_activation_bytes(enc: &Encoder, profiles: &[SparseProfile]) -> Result<f64> {
    let features = enc.feature_bank(0);
    let mut tape = Tape::new(Mode::Grad);
    let w = enc.bind(&mut tape);
    let baseline = tape.recorded_activations();
    for (i, p) in profiles.iter().enumerate() {
        let input = enc.tokenize(p, &[])?;
        let key = PassKey {
            seed: enc.seed,
            epoch: 0,
            batch: 0,
            sample: i as u64,
            pass: 0,
        };
        crate::objectives::make_positive_pair(enc, &mut tape, &w, &input, key, features.as_ref())?;
    }
    Ok(8.0 * (tape.recorded_activations() - baseline) as f64)
}
