//! Head training on top of pooled cell embeddings, with the encoder frozen or trainable.

use crate::autodiff::rng::tag;
use crate::autodiff::{adam_step, AdamConfig, AdamState, Mode, ParamStore, PassKey, RngStream, Tape, Tensor, Var};
use crate::downstream::heads::{argmax, ClassifierHead, Mlp, RegressionHead};
use crate::downstream::metrics::EvalReport;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::preprocess::SparseProfile;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    /// Share of samples used for training; small values give few-shot runs.
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = (self.train_frac, self.val_frac);
        if !(f.0 > 0.0 && f.1 >= 0.0 && f.0 + f.1 < 1.0) {
            return Err(Error::Config(format!(
                "split fractions train={} val={} must leave a test share",
                f.0, f.1
            )));
        }
        Ok(())
    }

    /// Parses `train,val[,seed]`, e.g. `0.8,0.1`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("bad split `{s}` (train,val[,seed])"));
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let spec = SplitSpec {
            train_frac: parts[0].parse().map_err(|_| bad())?,
            val_frac: parts[1].parse().map_err(|_| bad())?,
            seed: parts.get(2).map(|v| v.parse()).transpose().map_err(|_| bad())?.unwrap_or(0),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn cut(n: usize, spec: &SplitSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    let n_train = ((spec.train_frac * n as f64).round() as usize).max(1);
    let n_val = (spec.val_frac * n as f64).round() as usize;
    if n_train + n_val >= n {
        return Err(Error::Usage(format!("{n} items are too few for split {spec:?}")));
    }
    Ok((n_train, n_val))
}

/// Shuffled train/validation/test partition of `0..n`.
pub fn random_split(n: usize, spec: &SplitSpec) -> Result<Split> {
    let (a, b) = cut(n, spec)?;
    let perm = RngStream::keyed(spec.seed, &[tag::SPLIT, 0]).permutation(n);
    Ok(Split {
        train: perm[..a].to_vec(),
        val: perm[a..a + b].to_vec(),
        test: perm[a + b..].to_vec(),
    })
}

/// Partition in which every group key lands in exactly one part (held-out groups).
pub fn group_split(groups: &[usize], spec: &SplitSpec) -> Result<Split> {
    let mut keys: Vec<usize> = groups.to_vec();
    keys.sort_unstable();
    keys.dedup();
    let (a, b) = cut(keys.len(), spec)?;
    let perm = RngStream::keyed(spec.seed, &[tag::SPLIT, 1]).permutation(keys.len());
    let mut part = vec![0u8; keys.len()];
    for (rank, &k) in perm.iter().enumerate() {
        part[k] = if rank < a {
            0
        } else if rank < a + b {
            1
        } else {
            2
        };
    }
    let mut split = Split::default();
    for (i, g) in groups.iter().enumerate() {
        let k = keys.binary_search(g).unwrap();
        match part[k] {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Encoder parameters stay untouched when set.
    pub freeze_encoder: bool,
    pub split: SplitSpec,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-4,
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            freeze_encoder: true,
            split: SplitSpec::default(),
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.split.validate()
    }
}

/// Where training rows come from: fixed embeddings or a (possibly trainable) encoder.
pub enum Features<'a> {
    Fixed(&'a [Vec<f64>]),
    Encoder(&'a mut Encoder, &'a [SparseProfile]),
}

impl Features<'_> {
    fn width(&self) -> usize {
        match self {
            Features::Fixed(xs) => xs.first().map_or(0, Vec::len),
            Features::Encoder(enc, _) => enc.config.proj_dim,
        }
    }

    fn len(&self) -> usize {
        match self {
            Features::Fixed(xs) => xs.len(),
            Features::Encoder(_, ps) => ps.len(),
        }
    }

    /// Dropout-free embeddings of the given rows.
    fn embeddings(&self, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        match self {
            Features::Fixed(xs) => Ok(rows.iter().map(|&r| xs[r].clone()).collect()),
            Features::Encoder(enc, ps) => {
                let bank = enc.feature_bank(0);
                rows.iter().map(|&r| enc.cell_embedding(&ps[r], bank.as_ref())).collect()
            }
        }
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

/// Head loss of one mini-batch: tape, head params, embedding rows, batch sample ids, dropout rng.
type HeadLoss<'a> = dyn Fn(&mut Tape, &ParamStore, &Var, &[usize], &mut RngStream) -> Result<Var> + 'a;

/// Mini-batch Adam over `samples`; sample `s` reads embedding row `row_of[s]`.
fn train_loop(
    features: &mut Features<'_>,
    head_params: &mut ParamStore,
    samples: &[usize],
    row_of: &[usize],
    cfg: &FineTuneConfig,
    loss: &HeadLoss<'_>,
) -> Result<Vec<f64>> {
    let mut head_state = AdamState::new(head_params);
    let train_encoder = matches!(features, Features::Encoder(..)) && !cfg.freeze_encoder;
    let mut enc_state = match features {
        Features::Encoder(enc, _) if train_encoder => Some(AdamState::new(&enc.params)),
        _ => None,
    };
    let fixed = if train_encoder {
        Vec::new()
    } else {
        let mut rows: Vec<usize> = samples.iter().map(|&s| row_of[s]).collect();
        rows.sort_unstable();
        rows.dedup();
        let emb = features.embeddings(&rows)?;
        let mut table = vec![Vec::new(); features.len()];
        for (r, e) in rows.into_iter().zip(emb) {
            table[r] = e;
        }
        table
    };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = RngStream::keyed(cfg.seed, &[tag::HEAD, 1, epoch as u64]).permutation(samples.len());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<usize> = chunk.iter().map(|&i| samples[i]).collect();
            let mut rng = RngStream::keyed(cfg.seed, &[tag::HEAD, 2, epoch as u64, b as u64]);
            head_params.zero_grads();
            let value = if let (Features::Encoder(enc, profiles), Some(state)) = (&mut *features, enc_state.as_mut()) {
                enc.params.zero_grads();
                let mut enc_tape = Tape::new(Mode::Grad);
                let w = enc.bind(&mut enc_tape);
                let bank = enc.feature_bank(epoch as u64);
                let mut rows = Vec::with_capacity(batch.len());
                for (j, &s) in batch.iter().enumerate() {
                    let input = enc.tokenize(&profiles[row_of[s]], &[])?;
                    let key = PassKey {
                        seed: cfg.seed,
                        epoch: epoch as u64,
                        batch: b as u64,
                        sample: j as u64,
                        pass: 3,
                    };
                    rows.push(enc.embed_cell(&mut enc_tape, &w, &input, Some(key), bank.as_ref())?);
                }
                let e = enc_tape.concat_rows(&rows)?;
                let mut head_tape = Tape::new(Mode::Grad);
                let x = head_tape.input(e.to_tensor());
                let l = loss(&mut head_tape, head_params, &x, &batch, &mut rng)?;
                let g = head_tape.backward_with_inputs(&l, head_params, &[&x])?.remove(0);
                let gc = enc_tape.constant(g);
                let prod = enc_tape.mul(&e, &gc)?;
                let surrogate = enc_tape.sum(&prod)?;
                enc_tape.backward(&surrogate, &mut enc.params)?;
                if !enc.params.grads_finite() {
                    return Err(Error::numerical("backward", "non-finite encoder gradient"));
                }
                adam_step(&mut enc.params, state, &cfg.adam);
                l.item()
            } else {
                let rows: Vec<Vec<f64>> = batch.iter().map(|&s| fixed[row_of[s]].clone()).collect();
                let mut tape = Tape::new(Mode::Grad);
                let x = tape.constant(matrix(&rows)?);
                let l = loss(&mut tape, head_params, &x, &batch, &mut rng)?;
                tape.backward(&l, head_params)?;
                l.item()
            };
            if !head_params.grads_finite() {
                return Err(Error::numerical("backward", "non-finite head gradient"));
            }
            adam_step(head_params, &mut head_state, &cfg.adam);
            total += value * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        log::debug!("fine-tune epoch {} loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

fn cross_entropy(tape: &mut Tape, mlp: &Mlp, store: &ParamStore, x: &Var, targets: &[usize], rng: &mut RngStream) -> Result<Var> {
    let logits = mlp.forward(tape, store, x, Some(rng))?;
    let logp = tape.log_softmax_rows(&logits)?;
    let picked = tape.pick(&logp, targets)?;
    let total = tape.sum(&picked)?;
    tape.scale(&total, -1.0 / targets.len() as f64)
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub report: EvalReport,
    pub split: Split,
    /// `(sample, target, prediction)` over the test split.
    pub predictions: Vec<(usize, f64, f64)>,
    pub epoch_losses: Vec<f64>,
}

/// Trains `head` on the training split and scores the test split.
pub fn fine_tune_classifier(
    head: &mut ClassifierHead,
    mut features: Features<'_>,
    labels: &[usize],
    split: Split,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    let k = head.n_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Schema(format!("label {bad} outside the head's {k} classes")));
    }
    if labels.len() != features.len() {
        return Err(Error::Schema(format!("{} labels for {} cells", labels.len(), features.len())));
    }
    if features.width() != head.mlp.input_width() {
        return Err(Error::Schema(format!(
            "embedding width {} does not match head input {}",
            features.width(),
            head.mlp.input_width()
        )));
    }
    let mlp = head.mlp.clone();
    let rows: Vec<usize> = (0..labels.len()).collect();
    let loss = |tape: &mut Tape, store: &ParamStore, x: &Var, batch: &[usize], rng: &mut RngStream| {
        let targets: Vec<usize> = batch.iter().map(|&s| labels[s]).collect();
        cross_entropy(tape, &mlp, store, x, &targets, rng)
    };
    let epoch_losses = train_loop(&mut features, &mut head.params, &split.train, &rows, cfg, &loss)?;

    let emb = features.embeddings(&split.test)?;
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    let mut predictions = Vec::new();
    for (&s, e) in split.test.iter().zip(&emb) {
        let p = argmax(&head.classify(e)?);
        y_true.push(labels[s]);
        y_pred.push(p);
        predictions.push((s, labels[s] as f64, p as f64));
    }
    Ok(FineTuneOutcome {
        report: EvalReport::classification("classification", &y_true, &y_pred, k)?,
        split,
        predictions,
        epoch_losses,
    })
}

/// One regression sample: cell row, drug row, target.
pub type Pair = (usize, usize, f64);

/// Trains `head` on pairs of the training split; `drugs` holds one feature row per drug.
pub fn fine_tune_regressor(
    head: &mut RegressionHead,
    mut features: Features<'_>,
    drugs: &[Vec<f64>],
    pairs: &[Pair],
    split: Split,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    for &(c, d, v) in pairs {
        if c >= features.len() || d >= drugs.len() {
            return Err(Error::Index {
                what: "pair",
                index: if c >= features.len() { c } else { d },
                len: if c >= features.len() { features.len() } else { drugs.len() },
            });
        }
        if !v.is_finite() {
            return Err(Error::Schema(format!("non-finite target for cell {c}, drug {d}")));
        }
    }
    if drugs.iter().any(|r| r.len() != head.drug_width) {
        return Err(Error::Schema(format!("drug features must have width {}", head.drug_width)));
    }
    if features.width() != head.cell.input_width() {
        return Err(Error::Schema(format!(
            "embedding width {} does not match head input {}",
            features.width(),
            head.cell.input_width()
        )));
    }
    let (cell, fusion) = (head.cell.clone(), head.fusion.clone());
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let loss = |tape: &mut Tape, store: &ParamStore, x: &Var, batch: &[usize], rng: &mut RngStream| {
        let d: Vec<Vec<f64>> = batch.iter().map(|&s| drugs[pairs[s].1].clone()).collect();
        let t: Vec<f64> = batch.iter().map(|&s| pairs[s].2).collect();
        let dv = tape.constant(matrix(&d)?);
        let hc = cell.forward(tape, store, x, Some(rng))?;
        let joint = tape.concat_cols(&[hc, dv])?;
        let y = fusion.forward(tape, store, &joint, Some(rng))?;
        let tv = tape.constant(Tensor::matrix(t.len(), 1, t)?);
        let r = tape.sub(&y, &tv)?;
        let sq = tape.mul(&r, &r)?;
        tape.mean(&sq)
    };
    let epoch_losses = train_loop(&mut features, &mut head.params, &split.train, &rows, cfg, &loss)?;

    let test_cells: Vec<usize> = split.test.iter().map(|&s| pairs[s].0).collect();
    let emb = features.embeddings(&test_cells)?;
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    let mut predictions = Vec::new();
    for (&s, e) in split.test.iter().zip(&emb) {
        let (_, d, v) = pairs[s];
        let p = head.regress(e, &drugs[d])?;
        y_true.push(v);
        y_pred.push(p);
        predictions.push((s, v, p));
    }
    Ok(FineTuneOutcome {
        report: EvalReport::regression("regression", &y_true, &y_pred)?,
        split,
        predictions,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::heads::Activation;
    use crate::encoder::EncoderConfig;
    use crate::synth::{labeled_corpus, separable_embeddings, SyntheticSpec};

    fn quick() -> FineTuneConfig {
        FineTuneConfig {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..FineTuneConfig::default()
        }
    }

    #[test]
    fn splits_partition() {
        let s = random_split(50, &SplitSpec::default()).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!((s.train.len(), s.val.len()), (40, 5));
        let few = random_split(100, &SplitSpec { train_frac: 0.05, ..SplitSpec::default() }).unwrap();
        assert_eq!(few.train.len(), 5);
    }

    #[test]
    fn group_split_holds_out_groups() {
        let groups: Vec<usize> = (0..60).map(|i| i % 12).collect();
        let s = group_split(&groups, &SplitSpec::default()).unwrap();
        let keys = |ix: &[usize]| ix.iter().map(|&i| groups[i]).collect::<std::collections::BTreeSet<_>>();
        assert!(keys(&s.train).is_disjoint(&keys(&s.test)));
        assert!(keys(&s.val).is_disjoint(&keys(&s.test)));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 60);
    }

    #[test]
    fn separable_embeddings_are_learned() {
        let (xs, ys) = separable_embeddings(200, 8, 2, 5);
        let mut head = ClassifierHead::new(8, &[16, 2], Activation::Relu, 0.1, 1).unwrap();
        let split = random_split(200, &SplitSpec::default()).unwrap();
        let out = fine_tune_classifier(&mut head, Features::Fixed(&xs), &ys, split, &quick()).unwrap();
        let acc = out.report.classification.unwrap().accuracy;
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn label_outside_head_is_schema_error() {
        let (xs, _) = separable_embeddings(20, 4, 2, 5);
        let ys = vec![3; 20];
        let mut head = ClassifierHead::new(4, &[2], Activation::Relu, 0.0, 1).unwrap();
        let split = random_split(20, &SplitSpec::default()).unwrap();
        let r = fine_tune_classifier(&mut head, Features::Fixed(&xs), &ys, split, &quick());
        assert!(matches!(r, Err(Error::Schema(_))));
    }

    fn encoder_run(freeze: bool) -> (u64, u64, String) {
        let (corpus, types) = labeled_corpus(&SyntheticSpec::new(40, 24, 2, 3)).unwrap();
        let mut enc = Encoder::new(EncoderConfig::tiny(24), 2).unwrap();
        let before = enc.params.fingerprint();
        let mut head = ClassifierHead::new(enc.config.proj_dim, &[8, 2], Activation::Relu, 0.1, 1).unwrap();
        let split = random_split(40, &SplitSpec::default()).unwrap();
        let cfg = FineTuneConfig {
            epochs: 2,
            batch_size: 8,
            freeze_encoder: freeze,
            ..quick()
        };
        let out = fine_tune_classifier(
            &mut head,
            Features::Encoder(&mut enc, &corpus.profiles),
            &types,
            split,
            &cfg,
        )
        .unwrap();
        (before, enc.params.fingerprint(), out.report.to_text())
    }

    #[test]
    fn frozen_encoder_is_untouched_and_runs_repeat() {
        let (before, after, report) = encoder_run(true);
        assert_eq!(before, after);
        assert_eq!(encoder_run(true).2, report);
    }

    #[test]
    fn unfrozen_encoder_is_updated() {
        let (before, after, report) = encoder_run(false);
        assert_ne!(before, after);
        assert_eq!(encoder_run(false).2, report);
    }

    #[test]
    fn regression_learns_a_linear_target() {
        let (xs, _) = separable_embeddings(30, 4, 3, 1);
        let drugs: Vec<Vec<f64>> = (0..5).map(|d| vec![d as f64 / 5.0, 1.0 - d as f64 / 5.0]).collect();
        let pairs: Vec<Pair> = (0..150)
            .map(|i| {
                let (c, d) = (i % 30, i % 5);
                (c, d, 0.3 * xs[c][0] - xs[c][1] + 2.0 * drugs[d][0])
            })
            .collect();
        let mut head = RegressionHead::new(4, &[16, 8], 2, &[16, 1], 0.0, 2).unwrap();
        let split = random_split(150, &SplitSpec::default()).unwrap();
        let cfg = FineTuneConfig { epochs: 150, ..quick() };
        let out = fine_tune_regressor(&mut head, Features::Fixed(&xs), &drugs, &pairs, split, &cfg).unwrap();
        let r = out.report.regression.unwrap();
        assert!(r.pearson > 0.9, "{r:?}");
        assert!(out.epoch_losses.last() < out.epoch_losses.first());
    }
}
