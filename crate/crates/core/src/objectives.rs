//! Self-supervised pre-training losses: InfoNCE over dropout positives, masked
//! expression modeling, and tumor/normal discrimination.

use crate::autodiff::{PassKey, RngStream, Tape, Tensor, Var};
use crate::encoder::{Bound, CellInput, Encoder, FeatureBank};
use crate::error::{Error, Result};

/// Probability floor applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Two dropout views of the same cell: passes 0 and 1 of `key`.
pub fn make_positive_pair(
    enc: &Encoder,
    tape: &mut Tape,
    w: &Bound,
    input: &CellInput,
    key: PassKey,
    features: Option<&FeatureBank>,
) -> Result<(Var, Var)> {
    if enc.config.dropout_p == 0.0 {
        log::warn!("dropout_p is 0: positive pairs are identical and the contrastive loss is degenerate");
    }
    let h = enc.embed_cell(tape, w, input, Some(PassKey { pass: 0, ..key }), features)?;
    let hp = enc.embed_cell(tape, w, input, Some(PassKey { pass: 1, ..key }), features)?;
    Ok((h, hp))
}

/// `−(1/T) Σ_i log softmax_j(cos(h_i, h⁺_j)/τ)[i]` over `T × d` matrices.
pub fn info_nce_loss(tape: &mut Tape, h: &Var, h_pos: &Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if h.shape() != h_pos.shape() || h.rows() == 0 {
        return Err(Error::Usage(format!(
            "contrastive views have shapes {:?} and {:?}",
            h.shape(),
            h_pos.shape()
        )));
    }
    let a = tape.l2_normalize_rows(h)?;
    let b = tape.l2_normalize_rows(h_pos)?;
    let bt = tape.transpose(&b)?;
    let sim = tape.matmul(&a, &bt)?;
    let logits = tape.scale(&sim, 1.0 / tau)?;
    let logp = tape.log_softmax_rows(&logits)?;
    let diag: Vec<usize> = (0..h.rows()).collect();
    let picked = tape.pick(&logp, &diag)?;
    let m = tape.mean(&picked)?;
    tape.scale(&m, -1.0)
}

/// Token indices selected for masking; each is chosen independently with `rate`.
///
/// Draws repeat on the same stream until at least one token is selected.
pub fn mlm_mask(n_tokens: usize, rate: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate {rate} not in (0, 1)")));
    }
    if n_tokens == 0 {
        return Ok(Vec::new());
    }
    loop {
        let mut u = vec![0.0; n_tokens];
        rng.fill_uniform(&mut u);
        let picked: Vec<usize> = (0..n_tokens).filter(|&i| u[i] < rate).collect();
        if !picked.is_empty() {
            return Ok(picked);
        }
    }
}

/// Summed cross-entropy of `logits` (`N × M`) against class `targets`.
pub fn mlm_nll_sum(tape: &mut Tape, logits: &Var, targets: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits)?;
    let logp = tape.clamp(&logp, PROB_EPS.ln(), 0.0)?;
    let picked = tape.pick(&logp, targets)?;
    let s = tape.sum(&picked)?;
    tape.scale(&s, -1.0)
}

/// Mean cross-entropy over the masked tokens.
pub fn mlm_loss(tape: &mut Tape, logits: &Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Usage("mlm loss over zero masked tokens".into()));
    }
    let s = mlm_nll_sum(tape, logits, targets)?;
    tape.scale(&s, 1.0 / targets.len() as f64)
}

/// Summed binary cross-entropy of sigmoid(`logits`) (`B × 1`) against `labels` in {0, 1}.
pub fn cls_nll_sum(tape: &mut Tape, logits: &Var, labels: &[f64]) -> Result<Var> {
    if labels.len() != logits.rows() {
        return Err(Error::Usage(format!(
            "{} labels for {} logits",
            labels.len(),
            logits.rows()
        )));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Usage("classification labels must be 0 or 1".into()));
    }
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(&p, PROB_EPS, 1.0 - PROB_EPS)?;
    let logp = tape.log(&p)?;
    let q = tape.scale(&p, -1.0)?;
    let q = tape.add_scalar(&q, 1.0)?;
    let logq = tape.log(&q)?;
    let l = tape.constant(Tensor::matrix(labels.len(), 1, labels.to_vec())?);
    let nl = tape.constant(Tensor::matrix(
        labels.len(),
        1,
        labels.iter().map(|v| 1.0 - v).collect(),
    )?);
    let a = tape.mul(&l, &logp)?;
    let b = tape.mul(&nl, &logq)?;
    let ll = tape.add(&a, &b)?;
    let s = tape.sum(&ll)?;
    tape.scale(&s, -1.0)
}

pub fn cls_loss(tape: &mut Tape, logits: &Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Usage("classification loss over an empty batch".into()));
    }
    let s = cls_nll_sum(tape, logits, labels)?;
    tape.scale(&s, 1.0 / labels.len() as f64)
}

/// Non-negative weights of the contrastive, masked-modeling and classification terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cl: f64,
    pub mlm: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cl: 1.0,
            mlm: 1.0,
            cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cl, self.mlm, self.cls];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

pub fn combined_pretrain_loss(weights: &LossWeights, l_cl: f64, l_mlm: f64, l_cls: f64) -> Result<f64> {
    weights.validate()?;
    Ok(weights.cl * l_cl + weights.mlm * l_mlm + weights.cls * l_cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use proptest::prelude::*;

    fn nce(h: &Tensor, hp: &Tensor, tau: f64) -> f64 {
        let mut t = Tape::new(Mode::NoGrad);
        let (a, b) = (t.constant(h.clone()), t.constant(hp.clone()));
        info_nce_loss(&mut t, &a, &b, tau).unwrap().item()
    }

    fn rand(rng: &mut RngStream, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, rng.normal_vec(r * c)).unwrap()
    }

    #[test]
    fn single_sample_is_zero() {
        let h = Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let hp = Tensor::matrix(1, 3, vec![-5.0, 1.0, 0.1]).unwrap();
        assert_eq!(nce(&h, &hp, 0.05), 0.0);
    }

    #[test]
    fn orthonormal_pair() {
        let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((nce(&e, &e, 1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn zero_norm_row_is_numerical_error() {
        let mut t = Tape::new(Mode::NoGrad);
        let a = t.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        assert!(matches!(
            info_nce_loss(&mut t, &a, &a, 0.1),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn temperature_sharpens_on_identical_views() {
        let mut rng = RngStream::new(8, 8);
        let h = rand(&mut rng, 6, 5);
        let mut last = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.1, 0.05] {
            let l = nce(&h, &h, tau);
            assert!(l < last, "tau {tau}: {l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn mlm_uniform_and_perfect() {
        let mut t = Tape::new(Mode::NoGrad);
        let z = t.constant(Tensor::zeros(&[3, 5]));
        let l = mlm_loss(&mut t, &z, &[0, 4, 2]).unwrap().item();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::full(&[2, 5], -60.0);
        logits.data_mut()[1] = 60.0;
        logits.data_mut()[5 + 3] = 60.0;
        let x = t.constant(logits);
        assert!(mlm_loss(&mut t, &x, &[1, 3]).unwrap().item() <= 1e-9);
    }

    #[test]
    fn mlm_mask_rate_and_replay() {
        let mut a = RngStream::new(1, 99);
        let mut b = RngStream::new(1, 99);
        let m = mlm_mask(10_000, 0.15, &mut a).unwrap();
        assert_eq!(m, mlm_mask(10_000, 0.15, &mut b).unwrap());
        let frac = m.len() as f64 / 1e4;
        assert!((frac - 0.15).abs() < 0.01, "{frac}");
        let nearly_all = mlm_mask(1000, 0.999, &mut a).unwrap();
        assert!(nearly_all.len() > 990);
        for seed in 0..50 {
            assert!(!mlm_mask(1, 0.01, &mut RngStream::new(seed, 0)).unwrap().is_empty());
        }
        assert!(mlm_mask(5, 1.0, &mut a).is_err());
    }

    #[test]
    fn cls_examples() {
        let mut t = Tape::new(Mode::NoGrad);
        let z = t.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let l = cls_loss(&mut t, &z, &[1.0]).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let big = t.constant(Tensor::matrix(1, 1, vec![40.0]).unwrap());
        assert!(cls_loss(&mut t, &big, &[1.0]).unwrap().item() < 1e-11);
        assert!(cls_loss(&mut t, &big, &[0.5]).is_err());
    }

    #[test]
    fn cls_gradient_matches_differences() {
        use crate::autodiff::gradcheck::{check_gradients, GradCheckOptions};
        use crate::autodiff::ParamStore;
        let mut store = ParamStore::new();
        let id = store
            .add("z", Tensor::matrix(4, 1, vec![-1.3, 0.2, 2.5, 0.7]).unwrap())
            .unwrap();
        let labels = [1.0, 0.0, 0.0, 1.0];
        let rep = check_gradients(
            &mut store,
            |t, s| {
                let z = t.param(s, id);
                cls_loss(t, &z, &labels)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn combination() {
        let w = LossWeights {
            cl: 2.0,
            mlm: 3.0,
            cls: 5.0,
        };
        assert_eq!(combined_pretrain_loss(&w, 1.0, 1.0, 1.0).unwrap(), 10.0);
        let only = |cl, mlm, cls| LossWeights { cl, mlm, cls };
        assert_eq!(combined_pretrain_loss(&only(1.0, 0.0, 0.0), 0.7, 9.0, 9.0).unwrap(), 0.7);
        assert_eq!(combined_pretrain_loss(&only(0.0, 1.0, 0.0), 9.0, 0.4, 9.0).unwrap(), 0.4);
        assert!(matches!(
            combined_pretrain_loss(&only(0.0, 0.0, 0.0), 1.0, 1.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn nce_is_positive_and_order_free(seed in 0u64..10_000, t in 2usize..10) {
            let mut rng = RngStream::new(seed, 1);
            let h = rand(&mut rng, t, 4);
            let hp = rand(&mut rng, t, 4);
            let l = nce(&h, &hp, 0.5);
            prop_assert!(l > 0.0);
            let perm = rng.permutation(t);
            let ph = Tensor::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let pp = Tensor::from_rows(&perm.iter().map(|&i| hp.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            prop_assert!((nce(&ph, &pp, 0.5) - l).abs() < 1e-12);
        }
    }
}
