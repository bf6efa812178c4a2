//! Gradient checks shared by the suite and the acceptance run.

use gradcell::autodiff::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use gradcell::autodiff::{ParamStore, PassKey, RngStream, Tensor};
use gradcell::encoder::{AttentionMode, Encoder, EncoderConfig, FeatureKernel};
use gradcell::objectives::{cls_loss, info_nce_loss, make_positive_pair, mlm_loss, mlm_mask};
use gradcell::synth::random_profiles;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = rng.normal_vec(rows * cols).into_iter().map(|v| v * scale).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn info_nce_check(seed: u64) -> GradCheckReport {
    {
        let mut rng = RngStream::new(seed, 11);
        let t = 2 + rng.below(6) as usize;
        let mut store = ParamStore::new();
        store.add("h", random_matrix(&mut rng, t, 5, 1.0)).unwrap();
        store.add("hp", random_matrix(&mut rng, t, 5, 1.0)).unwrap();
        let tau = 0.05 + rng.uniform();
        check_gradients(
            &mut store,
            |tape, s| {
                let h = tape.param(s, s.id("h").unwrap());
                let hp = tape.param(s, s.id("hp").unwrap());
                info_nce_loss(tape, &h, &hp, tau)
            },
            &GradCheckOptions::default(),
        )
        .unwrap()
    }
}

pub fn mlm_check(seed: u64) -> GradCheckReport {
    {
        let mut rng = RngStream::new(seed, 12);
        let n = 1 + rng.below(6) as usize;
        let mut store = ParamStore::new();
        store.add("logits", random_matrix(&mut rng, n, 8, 2.0)).unwrap();
        let targets: Vec<usize> = (0..n).map(|_| rng.below(8) as usize).collect();
        check_gradients(
            &mut store,
            |tape, s| {
                let z = tape.param(s, s.id("logits").unwrap());
                mlm_loss(tape, &z, &targets)
            },
            &GradCheckOptions::default(),
        )
        .unwrap()
    }
}

pub fn cls_check(seed: u64) -> GradCheckReport {
    {
        let mut rng = RngStream::new(seed, 13);
        let n = 1 + rng.below(6) as usize;
        let mut store = ParamStore::new();
        store.add("logits", random_matrix(&mut rng, n, 1, 2.0)).unwrap();
        let labels: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
        check_gradients(
            &mut store,
            |tape, s| {
                let z = tape.param(s, s.id("logits").unwrap());
                cls_loss(tape, &z, &labels)
            },
            &GradCheckOptions::default(),
        )
        .unwrap()
    }
}

fn encoder_config(seed: u64) -> EncoderConfig {
    let mut c = EncoderConfig::tiny(12);
    c.feature_size = 8;
    c.proj_dim = 6;
    c.n_random_features = 16;
    match seed % 3 {
        0 => c.attention_mode = AttentionMode::Exact,
        1 => c.attention_mode = AttentionMode::FavorPlus,
        _ => {
            c.attention_mode = AttentionMode::FavorPlus;
            c.kernel = FeatureKernel::Relu;
        }
    }
    c
}

/// All three losses through the full encoder, pooling and heads.
pub fn encoder_check(seed: u64) -> GradCheckReport {
    {
        let enc = Encoder::new(encoder_config(seed), seed).unwrap();
        let cells = random_profiles(3, 12, 6, seed).unwrap();
        let features = enc.feature_bank(0);
        let plain: Vec<_> = cells.iter().map(|p| enc.tokenize(p, &[]).unwrap()).collect();
        let mask = mlm_mask(cells[0].len(), 0.5, &mut RngStream::new(seed, 14)).unwrap();
        let masked = enc.tokenize(&cells[0], &mask).unwrap();
        let targets: Vec<usize> = mask.iter().map(|&k| masked.bins[k]).collect();
        let key = |sample: u64, pass: u64| PassKey {
            seed,
            epoch: 0,
            batch: 0,
            sample,
            pass,
        };
        let mut store = enc.params.clone();
        check_gradients(
            &mut store,
            |tape, s| {
                let w = enc.bind_with(tape, s);
                let mut hs = Vec::new();
                let mut hps = Vec::new();
                for (i, input) in plain.iter().enumerate() {
                    let (h, hp) = make_positive_pair(&enc, tape, &w, input, key(i as u64, 0), features.as_ref())?;
                    hs.push(h);
                    hps.push(hp);
                }
                let h = tape.concat_rows(&hs)?;
                let hp = tape.concat_rows(&hps)?;
                let l_cl = info_nce_loss(tape, &h, &hp, 0.5)?;
                let hm = enc.encode(tape, &w, &masked, Some(key(0, 2)), features.as_ref())?;
                let logits = enc.mlm_logits(tape, &w, &hm, &mask)?;
                let l_mlm = mlm_loss(tape, &logits, &targets)?;
                let z = enc.cls_logit(tape, &w, &hm)?;
                let l_cls = cls_loss(tape, &z, &[1.0])?;
                let a = tape.add(&l_cl, &l_mlm)?;
                tape.add(&a, &l_cls)
            },
            &GradCheckOptions {
                max_entries_per_param: Some(3),
                seed,
                ..GradCheckOptions::default()
            },
        )
        .unwrap()
    }
}
