//! Exact softmax attention and its FAVOR+ random-feature approximation.

use crate::autodiff::{RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Feature function used by the linear-attention path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKernel {
    /// Positive random features whose inner products estimate `exp(q·k/√d)`.
    Softmax,
    /// `relu(x W) + 0.001`, the generalized-attention kernel.
    Relu,
}

impl FeatureKernel {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKernel::Softmax => "softmax",
            FeatureKernel::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(FeatureKernel::Softmax),
            "relu" => Ok(FeatureKernel::Relu),
            _ => Err(Error::Config(format!("unknown kernel `{s}` (softmax|relu)"))),
        }
    }
}

/// `m × d_head` projection with orthogonal rows inside each block of `d_head`.
///
/// Rows are rescaled by the norm of an independent Gaussian vector so that each
/// row is marginally distributed like an i.i.d. Gaussian row.
pub fn draw_features(m: usize, d_head: usize, rng: &mut RngStream) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    while rows.len() < m {
        let mut block: Vec<Vec<f64>> = (0..d_head).map(|_| rng.normal_vec(d_head)).collect();
        for i in 0..d_head {
            for j in 0..i {
                let dot: f64 = block[i].iter().zip(&block[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = block.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let n = block[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            block[i].iter_mut().for_each(|v| *v /= n);
        }
        for row in block.into_iter().take(m - rows.len()) {
            rows.push(row);
        }
    }
    let mut data = Vec::with_capacity(m * d_head);
    for mut row in rows {
        let s = rng.normal_vec(d_head).iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v *= s);
        data.extend(row);
    }
    Tensor::from_parts(vec![m, d_head], data)
}

fn check_qkv(q: &Var, k: &Var, v: &Var) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Usage(format!(
            "attention shapes q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// `softmax(QKᵀ/√d_head) V` together with the row-stochastic attention matrix.
pub fn exact_attention(tape: &mut Tape, q: &Var, k: &Var, v: &Var, cap: usize) -> Result<(Var, Var)> {
    check_qkv(q, k, v)?;
    let l = q.rows().max(k.rows());
    if l > cap {
        return Err(Error::Config(format!(
            "sequence length {l} exceeds the exact-attention cap {cap}"
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, &kt)?;
    let scores = tape.scale(&scores, 1.0 / (q.cols() as f64).sqrt())?;
    let attn = tape.softmax_rows(&scores)?;
    let out = tape.matmul(&attn, v)?;
    Ok((out, attn))
}

/// Random-feature map of the rows of `x`; `w_t` is the `d_head × m` transposed projection.
fn feature_map(tape: &mut Tape, x: &Var, w_t: &Var, kernel: FeatureKernel, is_query: bool) -> Result<Var> {
    let d = x.cols() as f64;
    let m = w_t.cols() as f64;
    let xs = tape.scale(x, d.powf(-0.25))?;
    let proj = tape.matmul(&xs, w_t)?;
    match kernel {
        FeatureKernel::Relu => {
            let r = tape.relu(&proj)?;
            tape.add_scalar(&r, 1e-3)
        }
        FeatureKernel::Softmax => {
            let sq = tape.mul(&xs, &xs)?;
            let sq = tape.sum_rows(&sq)?;
            let diag = tape.scale(&sq, 0.5)?;
            let z = tape.sub_col(&proj, &diag)?;
            // The stabilizer cancels between numerator and denominator, so it is a constant.
            let z = if is_query {
                let stab = tape.constant(z.value().row_max());
                tape.sub_col(&z, &stab)?
            } else {
                let stab = z.value().max();
                tape.add_scalar(&z, -stab)?
            };
            let e = tape.exp(&z)?;
            tape.scale(&e, 1.0 / m.sqrt())
        }
    }
}

/// Linear-complexity approximation of softmax attention.
///
/// Computes `φ(Q)(φ(K)ᵀV) / φ(Q)(φ(K)ᵀ1)` without forming any `L×L` matrix.
pub fn favor_attention(
    tape: &mut Tape,
    q: &Var,
    k: &Var,
    v: &Var,
    features: &Tensor,
    kernel: FeatureKernel,
) -> Result<Var> {
    check_qkv(q, k, v)?;
    if features.cols() != q.cols() {
        return Err(Error::Usage(format!(
            "feature matrix has width {}, heads have width {}",
            features.cols(),
            q.cols()
        )));
    }
    let w_t = tape.constant(features.transpose());
    let phi_q = feature_map(tape, q, &w_t, kernel, true)?;
    let phi_k = feature_map(tape, k, &w_t, kernel, false)?;
    let phi_kt = tape.transpose(&phi_k)?;
    let kv = tape.matmul(&phi_kt, v)?;
    let num = tape.matmul(&phi_q, &kv)?;
    let ksum = tape.sum_rows(&phi_kt)?;
    let den = tape.matmul(&phi_q, &ksum)?;
    tape.div_col(&num, &den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, ParamStore};

    fn rand_matrix(rng: &mut RngStream, r: usize, c: usize, std: f64) -> Tensor {
        let data = rng.normal_vec(r * c).into_iter().map(|v| v * std).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    fn exact(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let mut t = Tape::new(Mode::NoGrad);
        let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        exact_attention(&mut t, &q, &k, &v, usize::MAX).unwrap().0.to_tensor()
    }

    fn favor(q: &Tensor, k: &Tensor, v: &Tensor, f: &Tensor) -> Tensor {
        let mut t = Tape::new(Mode::NoGrad);
        let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        favor_attention(&mut t, &q, &k, &v, f, FeatureKernel::Softmax)
            .unwrap()
            .to_tensor()
    }

    #[test]
    fn features_are_orthogonal_within_block() {
        let mut rng = RngStream::new(3, 0);
        let f = draw_features(8, 8, &mut rng);
        for i in 0..8 {
            for j in 0..i {
                let (a, b) = (f.row(i), f.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-9, "rows {i},{j} dot {dot}");
            }
        }
        assert_eq!(draw_features(20, 8, &mut rng).shape(), &[20, 8]);
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = RngStream::new(1, 1);
        let q = rand_matrix(&mut rng, 1, 4, 1.0);
        let k = rand_matrix(&mut rng, 1, 4, 1.0);
        let v = rand_matrix(&mut rng, 1, 4, 1.0);
        let f = draw_features(16, 4, &mut rng);
        let out = favor(&q, &k, &v, &f);
        assert!(out.max_abs_diff(&v) < 1e-12);
        assert!(exact(&q, &k, &v).max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn uniform_scores_give_uniform_rows() {
        let q = Tensor::full(&[5, 3], 0.7);
        let k = Tensor::full(&[5, 3], -0.2);
        let v = Tensor::matrix(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut t = Tape::new(Mode::NoGrad);
        let (q, k, v) = (t.constant(q), t.constant(k), t.constant(v));
        let (_, attn) = exact_attention(&mut t, &q, &k, &v, 16).unwrap();
        for x in attn.value().data() {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let mut rng = RngStream::new(9, 2);
        let q = rand_matrix(&mut rng, 12, 4, 2.0);
        let k = rand_matrix(&mut rng, 12, 4, 2.0);
        let mut t = Tape::new(Mode::NoGrad);
        let (qv, kv) = (t.constant(q), t.constant(k.clone()));
        let vv = t.constant(k);
        let (_, attn) = exact_attention(&mut t, &qv, &kv, &vv, 16).unwrap();
        for r in 0..12 {
            let s: f64 = attn.value().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_is_enforced() {
        let mut t = Tape::new(Mode::NoGrad);
        let x = t.constant(Tensor::zeros(&[5, 2]));
        assert!(matches!(
            exact_attention(&mut t, &x, &x, &x, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn error_shrinks_with_more_features() {
        let mut rng = RngStream::new(17, 5);
        let q = rand_matrix(&mut rng, 32, 8, 0.6);
        let k = rand_matrix(&mut rng, 32, 8, 0.6);
        let v = rand_matrix(&mut rng, 32, 8, 1.0);
        let target = exact(&q, &k, &v);
        let err = |m: usize| {
            let mut fr = RngStream::new(23, m as u64);
            let f = draw_features(m, 8, &mut fr);
            let out = favor(&q, &k, &v, &f);
            let diff: f64 = out
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            diff / target.frobenius()
        };
        assert!(err(4096) < err(64));
    }

    #[test]
    fn relu_kernel_is_finite_and_normalized() {
        let mut rng = RngStream::new(2, 2);
        let q = rand_matrix(&mut rng, 6, 4, 1.0);
        let k = rand_matrix(&mut rng, 6, 4, 1.0);
        let v = Tensor::full(&[6, 2], 3.0);
        let f = draw_features(32, 4, &mut rng);
        let mut t = Tape::new(Mode::NoGrad);
        let (q, k, v) = (t.constant(q), t.constant(k), t.constant(v));
        let out = favor_attention(&mut t, &q, &k, &v, &f, FeatureKernel::Relu).unwrap();
        for x in out.value().data() {
            assert!((x - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn favor_backward_runs() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4, 4);
        let qid = store.add("q", rand_matrix(&mut rng, 5, 4, 1.0)).unwrap();
        let f = draw_features(16, 4, &mut rng);
        let mut t = Tape::new(Mode::Grad);
        let q = t.param(&store, qid);
        let out = favor_attention(&mut t, &q, &q, &q, &f, FeatureKernel::Softmax).unwrap();
        let loss = t.sum(&out).unwrap();
        t.backward(&loss, &mut store).unwrap();
        assert!(store.grad(qid).max_abs() > 0.0);
    }
}
