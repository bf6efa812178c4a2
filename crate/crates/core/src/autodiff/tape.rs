//! Reverse-mode tape over dense matrices.
//!
//! A [`Var`] carries its value and, when it depends on a parameter and the tape is
//! in grad mode, the index of the node that produced it. Constants and every
//! value produced in no-grad mode carry no node, so a no-grad forward keeps no
//! intermediate alive beyond what the caller holds.

use std::sync::Arc;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::rng::RngStream;
use crate::autodiff::tensor::{matmul_nt, matmul_tn};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Grad,
    NoGrad,
}

#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

enum Op {
    Param(ParamId),
    Input,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    SubCol(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    Pick(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MulCol(..) => "mul_col",
            Op::DivCol(..) => "div_col",
            Op::SubCol(..) => "sub_col",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Elu(..) => "elu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::GatherRows(..) => "gather",
            Op::ScatterRows(..) => "scatter",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::L2NormalizeRows(..) => "l2_normalize",
            Op::Pick(..) => "pick",
            Op::Dropout(..) => "dropout",
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

pub struct Tape {
    mode: Mode,
    nodes: Vec<Node>,
    saved_elems: usize,
}

/// Runs `graph` on a fresh tape in the given mode and hands back the tape for `backward`.
pub fn forward<T>(mode: Mode, graph: impl FnOnce(&mut Tape) -> Result<T>) -> Result<(T, Tape)> {
    let mut tape = Tape::new(mode);
    let out = graph(&mut tape)?;
    Ok((out, tape))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn same_shape(op: &str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Usage(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn column_of(op: &str, x: &Var, v: &Var) -> Result<()> {
    if v.value().numel() != x.rows() {
        return Err(Error::Usage(format!(
            "{op}: column of {} values does not match {} rows",
            v.value().numel(),
            x.rows()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape {
            mode,
            nodes: Vec::new(),
            saved_elems: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of floating-point values held by recorded nodes (outputs plus saved extras).
    pub fn recorded_activations(&self) -> usize {
        self.saved_elems
    }

    fn tracking(&self, inputs: &[&Var]) -> bool {
        self.mode == Mode::Grad && inputs.iter().any(|v| v.requires_grad())
    }

    fn emit(&mut self, value: Tensor, track: bool, extra: usize, op: impl FnOnce() -> Op) -> Result<Var> {
        if !value.is_finite() {
            let op = op();
            return Err(Error::numerical(op.name(), "non-finite output"));
        }
        let value = Arc::new(value);
        if !track {
            return Ok(Var { value, node: None });
        }
        self.saved_elems += value.numel() + extra;
        self.nodes.push(Node {
            op: op(),
            value: Arc::clone(&value),
        });
        Ok(Var {
            value,
            node: Some(self.nodes.len() - 1),
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    /// Leaf for a parameter; a constant in no-grad mode or when the parameter is frozen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value_arc(id);
        if self.mode == Mode::NoGrad || !store.get(id).trainable {
            return Var { value, node: None };
        }
        self.saved_elems += value.numel();
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Arc::clone(&value),
        });
        Var {
            value,
            node: Some(self.nodes.len() - 1),
        }
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value().matmul(b.value())?;
        let track = self.tracking(&[a, b]);
        self.emit(out, track, 0, || Op::MatMul(a.clone(), b.clone()))
    }

    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        let out = a.value().transpose();
        let track = self.tracking(&[a]);
        self.emit(out, track, 0, || Op::Transpose(a.clone()))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x + y);
        let track = self.tracking(&[a, b]);
        self.emit(out, track, 0, || Op::Add(a.clone(), b.clone()))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x - y);
        let track = self.tracking(&[a, b]);
        self.emit(out, track, 0, || Op::Sub(a.clone(), b.clone()))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x * y);
        let track = self.tracking(&[a, b]);
        self.emit(out, track, 0, || Op::Mul(a.clone(), b.clone()))
    }

    pub fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("div", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x / y);
        let track = self.tracking(&[a, b]);
        self.emit(out, track, 0, || Op::Div(a.clone(), b.clone()))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        let c = x.cols();
        if b.value().numel() != c {
            return Err(Error::Usage(format!(
                "add_bias: bias of {} values for {c} columns",
                b.value().numel()
            )));
        }
        let bd = b.value().data();
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let track = self.tracking(&[x, b]);
        self.emit(out, track, 0, || Op::AddBias(x.clone(), b.clone()))
    }

    pub fn scale(&mut self, x: &Var, s: f64) -> Result<Var> {
        let out = x.value().map(|v| v * s);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Scale(x.clone(), s))
    }

    pub fn add_scalar(&mut self, x: &Var, s: f64) -> Result<Var> {
        let out = x.value().map(|v| v + s);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::AddScalar(x.clone()))
    }

    fn col_op(
        &mut self,
        name: &str,
        x: &Var,
        v: &Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        column_of(name, x, v)?;
        let c = x.cols();
        let vd = v.value().data();
        let mut out = x.to_tensor();
        for (row, &s) in out.data_mut().chunks_mut(c).zip(vd) {
            for o in row.iter_mut() {
                *o = f(*o, s);
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `v[i]`.
    pub fn mul_col(&mut self, x: &Var, v: &Var) -> Result<Var> {
        let out = self.col_op("mul_col", x, v, |a, s| a * s)?;
        let track = self.tracking(&[x, v]);
        self.emit(out, track, 0, || Op::MulCol(x.clone(), v.clone()))
    }

    /// Divides row `i` by `v[i]`.
    pub fn div_col(&mut self, x: &Var, v: &Var) -> Result<Var> {
        let out = self.col_op("div_col", x, v, |a, s| a / s)?;
        let track = self.tracking(&[x, v]);
        self.emit(out, track, 0, || Op::DivCol(x.clone(), v.clone()))
    }

    /// Subtracts `v[i]` from every entry of row `i`.
    pub fn sub_col(&mut self, x: &Var, v: &Var) -> Result<Var> {
        let out = self.col_op("sub_col", x, v, |a, s| a - s)?;
        let track = self.tracking(&[x, v]);
        self.emit(out, track, 0, || Op::SubCol(x.clone(), v.clone()))
    }

    pub fn exp(&mut self, x: &Var) -> Result<Var> {
        let out = x.value().map(f64::exp);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Exp(x.clone()))
    }

    pub fn log(&mut self, x: &Var) -> Result<Var> {
        if x.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::numerical("log", "non-positive input"));
        }
        let out = x.value().map(f64::ln);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Log(x.clone()))
    }

    pub fn relu(&mut self, x: &Var) -> Result<Var> {
        let out = x.value().map(|v| v.max(0.0));
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Relu(x.clone()))
    }

    pub fn leaky_relu(&mut self, x: &Var, slope: f64) -> Result<Var> {
        let out = x.value().map(|v| if v > 0.0 { v } else { slope * v });
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::LeakyRelu(x.clone(), slope))
    }

    pub fn elu(&mut self, x: &Var, alpha: f64) -> Result<Var> {
        let out = x.value().map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() });
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Elu(x.clone(), alpha))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        let out = x.value().map(gelu);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Gelu(x.clone()))
    }

    pub fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let out = x.value().map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Sigmoid(x.clone()))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: &Var, lo: f64, hi: f64) -> Result<Var> {
        let out = x.value().map(|v| v.clamp(lo, hi));
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Clamp(x.clone(), lo, hi))
    }

    pub fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let c = x.cols();
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::SoftmaxRows(x.clone()))
    }

    pub fn log_softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let c = x.cols();
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::LogSoftmaxRows(x.clone()))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layernorm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let c = x.cols();
        if gain.value().numel() != c || bias.value().numel() != c {
            return Err(Error::Usage("layernorm: gain/bias width mismatch".into()));
        }
        let g = gain.value().data();
        let b = bias.value().data();
        let mut xhat = x.value().data().to_vec();
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut out = vec![0.0; xhat.len()];
        for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * is;
                orow[j] = *v * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let track = self.tracking(&[x, gain, bias]);
        let extra = xhat.len() + inv_std.len();
        self.emit(out, track, extra, || Op::LayerNorm {
            x: x.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            xhat,
            inv_std,
        })
    }

    /// Row lookup: output row `k` is `src[idx[k]]`.
    pub fn gather_rows(&mut self, src: &Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    what: "gather rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(src.value().row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        let track = self.tracking(&[src]);
        self.emit(out, track, idx.len(), || Op::GatherRows(src.clone(), idx.to_vec()))
    }

    /// Places row `k` of `src` at row `idx[k]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, src: &Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let c = src.cols();
        if idx.len() != src.rows() {
            return Err(Error::Usage("scatter_rows: index count != rows".into()));
        }
        let mut data = vec![0.0; n_rows * c];
        for (k, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(Error::Index {
                    what: "scatter rows",
                    index: i,
                    len: n_rows,
                });
            }
            for (d, s) in data[i * c..(i + 1) * c].iter_mut().zip(src.value().row(k)) {
                *d += s;
            }
        }
        let out = Tensor::from_parts(vec![n_rows, c], data);
        let track = self.tracking(&[src]);
        self.emit(out, track, idx.len(), || Op::ScatterRows(src.clone(), idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, Var::cols);
        if parts.iter().any(|p| p.cols() != c) {
            return Err(Error::Usage("concat_rows: column mismatch".into()));
        }
        let rows: usize = parts.iter().map(Var::rows).sum();
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let out = Tensor::from_parts(vec![rows, c], data);
        let refs: Vec<&Var> = parts.iter().collect();
        let track = self.tracking(&refs);
        self.emit(out, track, 0, || Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, Var::rows);
        if parts.iter().any(|p| p.rows() != r) {
            return Err(Error::Usage("concat_cols: row mismatch".into()));
        }
        let c: usize = parts.iter().map(Var::cols).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.value().row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, c], data);
        let refs: Vec<&Var> = parts.iter().collect();
        let track = self.tracking(&refs);
        self.emit(out, track, 0, || Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > x.rows() {
            return Err(Error::Usage(format!(
                "slice_rows {start}..{end} of {} rows",
                x.rows()
            )));
        }
        let out = x.value().slice_rows(start, end);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::SliceRows(x.clone(), start))
    }

    pub fn slice_cols(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let c = x.cols();
        if start > end || end > c {
            return Err(Error::Usage(format!("slice_cols {start}..{end} of {c} cols")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(x.rows() * w);
        for row in x.value().data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::from_parts(vec![x.rows(), w], data);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::SliceCols(x.clone(), start))
    }

    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let out = Tensor::scalar(x.value().data().iter().sum());
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Sum(x.clone()))
    }

    pub fn mean(&mut self, x: &Var) -> Result<Var> {
        let n = x.value().numel();
        if n == 0 {
            return Err(Error::Usage("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(x.value().data().iter().sum::<f64>() / n as f64);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::Mean(x.clone()))
    }

    /// Row sums as an `r×1` column.
    pub fn sum_rows(&mut self, x: &Var) -> Result<Var> {
        let c = x.cols();
        let data: Vec<f64> = x.value().data().chunks(c).map(|r| r.iter().sum()).collect();
        let out = Tensor::from_parts(vec![x.rows(), 1], data);
        let track = self.tracking(&[x]);
        self.emit(out, track, 0, || Op::SumRows(x.clone()))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: &Var) -> Result<Var> {
        let c = x.cols();
        let mut out = x.to_tensor();
        let mut norms = Vec::with_capacity(x.rows());
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::numerical(
                    "l2_normalize",
                    format!("row {i} has norm {n}"),
                ));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let track = self.tracking(&[x]);
        let extra = norms.len();
        self.emit(out, track, extra, || Op::L2NormalizeRows(x.clone(), norms))
    }

    /// Picks `x[i, idx[i]]` for every row, as an `r×1` column.
    pub fn pick(&mut self, x: &Var, idx: &[usize]) -> Result<Var> {
        let c = x.cols();
        if idx.len() != x.rows() {
            return Err(Error::Usage("pick: one index per row required".into()));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::Index {
                    what: "pick column",
                    index: j,
                    len: c,
                });
            }
            data.push(x.value().get(i, j));
        }
        let out = Tensor::from_parts(vec![idx.len(), 1], data);
        let track = self.tracking(&[x]);
        self.emit(out, track, idx.len(), || Op::Pick(x.clone(), idx.to_vec()))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    ///
    /// The mask is drawn from `rng` in both modes, so a no-grad pass and a grad
    /// pass over the same stream see the same mask.
    pub fn dropout(&mut self, x: &Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x.clone());
        }
        let mut mask = vec![0.0; x.value().numel()];
        rng.fill_uniform(&mut mask);
        let keep = 1.0 / (1.0 - p);
        for m in mask.iter_mut() {
            *m = if *m < p { 0.0 } else { keep };
        }
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.value().data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        let track = self.tracking(&[x]);
        let extra = mask.len();
        self.emit(out, track, extra, || Op::Dropout(x.clone(), mask))
    }

    /// Accumulates `∂loss/∂ω` into the gradient slot of every reachable parameter.
    ///
    /// Nodes are visited in exact reverse recording order. Values are never
    /// modified, and calling this twice adds the gradient twice.
    pub fn backward(&self, loss: &Var, store: &mut ParamStore) -> Result<()> {
        self.backward_with_inputs(loss, store, &[]).map(|_| ())
    }

    /// Tracked leaf outside any parameter store; its gradient is returned by
    /// [`Tape::backward_with_inputs`]. A constant in no-grad mode.
    pub fn input(&mut self, value: Tensor) -> Var {
        let value = Arc::new(value);
        if self.mode == Mode::NoGrad {
            return Var { value, node: None };
        }
        self.saved_elems += value.numel();
        self.nodes.push(Node {
            op: Op::Input,
            value: Arc::clone(&value),
        });
        Var {
            value,
            node: Some(self.nodes.len() - 1),
        }
    }

    /// [`Tape::backward`] that also returns `∂loss/∂x` for each input leaf `x`.
    pub fn backward_with_inputs(&self, loss: &Var, store: &mut ParamStore, inputs: &[&Var]) -> Result<Vec<Tensor>> {
        if self.mode == Mode::NoGrad {
            return Err(Error::Usage("backward on a no-grad tape".into()));
        }
        if loss.value().numel() != 1 || loss.value().rank() != 0 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut out: Vec<Tensor> = inputs.iter().map(|x| Tensor::zeros(x.shape())).collect();
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !g.is_finite() {
                return Err(Error::numerical(node.op.name(), "non-finite gradient"));
            }
            if matches!(node.op, Op::Input) {
                for (slot, x) in out.iter_mut().zip(inputs) {
                    if x.node == Some(i) {
                        slot.add_assign(&g);
                    }
                }
                continue;
            }
            backprop_node(node, g, &mut grads, store)?;
        }
        Ok(out)
    }
}

fn accum(grads: &mut [Option<Tensor>], v: &Var, g: Tensor) {
    if let Some(id) = v.node {
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn backprop_node(
    node: &Node,
    g: Tensor,
    grads: &mut [Option<Tensor>],
    store: &mut ParamStore,
) -> Result<()> {
    let out = &node.value;
    match &node.op {
        Op::Param(id) => store.grad_mut(*id).add_assign(&g),
        Op::Input => unreachable!("inputs are handled by the caller"),
        Op::MatMul(a, b) => {
            let (r, k, c) = (a.rows(), a.cols(), b.cols());
            if a.requires_grad() {
                let ga = matmul_nt(g.data(), b.value().data(), r, c, k);
                accum(grads, a, Tensor::from_parts(a.shape().to_vec(), ga));
            }
            if b.requires_grad() {
                let gb = matmul_tn(a.value().data(), g.data(), r, k, c);
                accum(grads, b, Tensor::from_parts(b.shape().to_vec(), gb));
            }
        }
        Op::Transpose(a) => {
            let gt = g.transpose();
            accum(grads, a, Tensor::from_parts(a.shape().to_vec(), gt.into_data()));
        }
        Op::Add(a, b) => {
            if b.requires_grad() {
                accum(grads, b, g.clone());
            }
            accum(grads, a, g);
        }
        Op::Sub(a, b) => {
            if b.requires_grad() {
                accum(grads, b, g.map(|v| -v));
            }
            accum(grads, a, g);
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                accum(grads, a, zip_map(&g, b.value(), |x, y| x * y));
            }
            if b.requires_grad() {
                accum(grads, b, zip_map(&g, a.value(), |x, y| x * y));
            }
        }
        Op::Div(a, b) => {
            if a.requires_grad() {
                accum(grads, a, zip_map(&g, b.value(), |x, y| x / y));
            }
            if b.requires_grad() {
                let gb = Tensor::from_parts(
                    b.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(a.value().data())
                        .zip(b.value().data())
                        .map(|((gv, av), bv)| -gv * av / (bv * bv))
                        .collect(),
                );
                accum(grads, b, gb);
            }
        }
        Op::AddBias(x, b) => {
            if b.requires_grad() {
                let c = x.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accum(grads, b, Tensor::from_parts(b.shape().to_vec(), gb));
            }
            accum(grads, x, g);
        }
        Op::Scale(x, s) => accum(grads, x, g.map(|v| v * s)),
        Op::AddScalar(x) => accum(grads, x, g),
        Op::MulCol(x, v) => {
            let c = x.cols();
            if v.requires_grad() {
                let gv: Vec<f64> = g
                    .data()
                    .chunks(c)
                    .zip(x.value().data().chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                accum(grads, v, Tensor::from_parts(v.shape().to_vec(), gv));
            }
            if x.requires_grad() {
                let mut gx = g;
                for (row, s) in gx.data_mut().chunks_mut(c).zip(v.value().data()) {
                    row.iter_mut().for_each(|e| *e *= s);
                }
                accum(grads, x, gx);
            }
        }
        Op::DivCol(x, v) => {
            let c = x.cols();
            if v.requires_grad() {
                let gv: Vec<f64> = g
                    .data()
                    .chunks(c)
                    .zip(x.value().data().chunks(c))
                    .zip(v.value().data())
                    .map(|((gr, xr), s)| -gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / (s * s))
                    .collect();
                accum(grads, v, Tensor::from_parts(v.shape().to_vec(), gv));
            }
            if x.requires_grad() {
                let mut gx = g;
                for (row, s) in gx.data_mut().chunks_mut(c).zip(v.value().data()) {
                    row.iter_mut().for_each(|e| *e /= s);
                }
                accum(grads, x, gx);
            }
        }
        Op::SubCol(x, v) => {
            if v.requires_grad() {
                let c = x.cols();
                let gv: Vec<f64> = g.data().chunks(c).map(|r| -r.iter().sum::<f64>()).collect();
                accum(grads, v, Tensor::from_parts(v.shape().to_vec(), gv));
            }
            accum(grads, x, g);
        }
        Op::Exp(x) => accum(grads, x, zip_map(&g, out, |a, y| a * y)),
        Op::Log(x) => accum(grads, x, zip_map(&g, x.value(), |a, v| a / v)),
        Op::Relu(x) => accum(
            grads,
            x,
            zip_map(&g, x.value(), |a, v| if v > 0.0 { a } else { 0.0 }),
        ),
        Op::LeakyRelu(x, slope) => accum(
            grads,
            x,
            zip_map(&g, x.value(), |a, v| if v > 0.0 { a } else { a * slope }),
        ),
        Op::Elu(x, alpha) => accum(
            grads,
            x,
            zip_map(&g, x.value(), |a, v| if v > 0.0 { a } else { a * alpha * v.exp() }),
        ),
        Op::Gelu(x) => accum(grads, x, zip_map(&g, x.value(), |a, v| a * gelu_grad(v))),
        Op::Sigmoid(x) => accum(grads, x, zip_map(&g, out, |a, s| a * s * (1.0 - s))),
        Op::Clamp(x, lo, hi) => accum(
            grads,
            x,
            zip_map(&g, x.value(), |a, v| if v >= *lo && v <= *hi { a } else { 0.0 }),
        ),
        Op::SoftmaxRows(x) => {
            let c = x.cols();
            let mut gx = g;
            for (gr, yr) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (a, y) in gr.iter_mut().zip(yr) {
                    *a = y * (*a - dot);
                }
            }
            accum(grads, x, gx);
        }
        Op::LogSoftmaxRows(x) => {
            let c = x.cols();
            let mut gx = g;
            for (gr, yr) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                let s: f64 = gr.iter().sum();
                for (a, y) in gr.iter_mut().zip(yr) {
                    *a -= y.exp() * s;
                }
            }
            accum(grads, x, gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = x.cols();
            let gd = gain.value().data();
            if gain.requires_grad() || bias.requires_grad() {
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (gr, xr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                }
                accum(grads, gain, Tensor::from_parts(gain.shape().to_vec(), gg));
                accum(grads, bias, Tensor::from_parts(bias.shape().to_vec(), gb));
            }
            if x.requires_grad() {
                let n = c as f64;
                let mut gx = vec![0.0; g.numel()];
                for (i, ((gr, xr), orow)) in g
                    .data()
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(a, w)| a * w).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        orow[j] = inv_std[i] / n * (n * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
                accum(grads, x, Tensor::from_parts(x.shape().to_vec(), gx));
            }
        }
        Op::GatherRows(src, idx) => {
            let c = src.cols();
            let mut gs = vec![0.0; src.value().numel()];
            for (k, &i) in idx.iter().enumerate() {
                for (d, s) in gs[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                    *d += s;
                }
            }
            accum(grads, src, Tensor::from_parts(src.shape().to_vec(), gs));
        }
        Op::ScatterRows(src, idx) => {
            let c = src.cols();
            let mut gs = Vec::with_capacity(src.value().numel());
            for &i in idx {
                gs.extend_from_slice(g.row(i));
            }
            debug_assert_eq!(gs.len(), idx.len() * c);
            accum(grads, src, Tensor::from_parts(src.shape().to_vec(), gs));
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for p in parts {
                let r = p.rows();
                if p.requires_grad() {
                    let gp = g.slice_rows(start, start + r);
                    accum(grads, p, Tensor::from_parts(p.shape().to_vec(), gp.into_data()));
                }
                start += r;
            }
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut start = 0;
            for p in parts {
                let w = p.cols();
                if p.requires_grad() {
                    let mut gp = Vec::with_capacity(p.value().numel());
                    for row in g.data().chunks(total) {
                        gp.extend_from_slice(&row[start..start + w]);
                    }
                    accum(grads, p, Tensor::from_parts(p.shape().to_vec(), gp));
                }
                start += w;
            }
        }
        Op::SliceRows(x, start) => {
            let c = x.cols();
            let mut gx = vec![0.0; x.value().numel()];
            gx[start * c..start * c + g.numel()].copy_from_slice(g.data());
            accum(grads, x, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::SliceCols(x, start) => {
            let c = x.cols();
            let w = g.cols();
            let mut gx = vec![0.0; x.value().numel()];
            for (row, gr) in gx.chunks_mut(c).zip(g.data().chunks(w)) {
                row[*start..start + w].copy_from_slice(gr);
            }
            accum(grads, x, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Sum(x) => accum(grads, x, Tensor::full(x.shape(), g.item())),
        Op::Mean(x) => {
            let n = x.value().numel() as f64;
            accum(grads, x, Tensor::full(x.shape(), g.item() / n));
        }
        Op::SumRows(x) => {
            let c = x.cols();
            let mut gx = Vec::with_capacity(x.value().numel());
            for &s in g.data() {
                gx.extend(std::iter::repeat_n(s, c));
            }
            accum(grads, x, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::L2NormalizeRows(x, norms) => {
            let c = x.cols();
            let mut gx = g;
            for ((gr, yr), n) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)).zip(norms) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (a, y) in gr.iter_mut().zip(yr) {
                    *a = (*a - y * dot) / n;
                }
            }
            accum(grads, x, gx);
        }
        Op::Pick(x, idx) => {
            let c = x.cols();
            let mut gx = vec![0.0; x.value().numel()];
            for (i, (&j, gv)) in idx.iter().zip(g.data()).enumerate() {
                gx[i * c + j] += gv;
            }
            accum(grads, x, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Dropout(x, mask) => {
            let gx = Tensor::from_parts(
                x.shape().to_vec(),
                g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
            );
            accum(grads, x, gx);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn identity_in_no_grad_records_nothing() {
        let (out, tape) = forward(Mode::NoGrad, |t| {
            let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
            Ok(x)
        })
        .unwrap();
        assert_eq!(out.value().data(), &[1.0, 2.0]);
        assert!(tape.is_empty());
        assert_eq!(tape.recorded_activations(), 0);
    }

    #[test]
    fn square_gradient() {
        let (mut s, id) = store_with("x", Tensor::scalar(3.0));
        let mut tape = Tape::new(Mode::Grad);
        let x = tape.param(&s, id);
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y, &mut s).unwrap();
        assert_eq!(s.grad(id).item(), 6.0);
    }

    #[test]
    fn sum_gradient_accumulates_across_calls() {
        let (mut s, id) = store_with("w", Tensor::vector(vec![0.5, -1.0, 2.0]));
        let mut tape = Tape::new(Mode::Grad);
        let w = tape.param(&s, id);
        let loss = tape.sum(&w).unwrap();
        tape.backward(&loss, &mut s).unwrap();
        assert_eq!(s.grad(id).data(), &[1.0, 1.0, 1.0]);
        tape.backward(&loss, &mut s).unwrap();
        assert_eq!(s.grad(id).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_on_no_grad_tape_is_usage_error() {
        let (mut s, id) = store_with("w", Tensor::vector(vec![1.0]));
        let mut tape = Tape::new(Mode::NoGrad);
        let w = tape.param(&s, id);
        let loss = tape.sum(&w).unwrap();
        assert!(matches!(tape.backward(&loss, &mut s), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut tape = Tape::new(Mode::NoGrad);
        let x = tape.constant(Tensor::scalar(1000.0));
        match tape.exp(&x) {
            Err(Error::Numerical { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_shape() {
        let mut tape = Tape::new(Mode::NoGrad);
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 4], 1.0));
        assert_eq!(tape.matmul(&a, &b).unwrap().shape(), &[2, 4]);
    }

    #[test]
    fn dropout_zero_is_identity_and_replays() {
        let mut tape = Tape::new(Mode::NoGrad);
        let x = tape.constant(Tensor::vector((0..100).map(f64::from).collect()));
        let mut rng = RngStream::new(1, 2);
        let y = tape.dropout(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y.value(), x.value());

        let a = tape.dropout(&x, 0.3, &mut RngStream::new(4, 5)).unwrap();
        let b = tape.dropout(&x, 0.3, &mut RngStream::new(4, 5)).unwrap();
        assert_eq!(a.value(), b.value());
        assert!(tape.dropout(&x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn grad_and_no_grad_forward_agree_bitwise() {
        let (s, id) = store_with("w", Tensor::matrix(2, 2, vec![0.3, -0.2, 0.9, 1.1]).unwrap());
        let run = |mode| {
            let mut t = Tape::new(mode);
            let w = t.param(&s, id);
            let h = t.gelu(&w).unwrap();
            let h = t.dropout(&h, 0.25, &mut RngStream::new(9, 9)).unwrap();
            let h = t.softmax_rows(&h).unwrap();
            (h.to_tensor(), t.recorded_activations())
        };
        let (a, ga) = run(Mode::Grad);
        let (b, gb) = run(Mode::NoGrad);
        assert_eq!(a, b);
        assert!(ga > 0);
        assert_eq!(gb, 0);
    }

    #[test]
    fn zero_norm_row_is_numerical_error() {
        let mut tape = Tape::new(Mode::NoGrad);
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.l2_normalize_rows(&x),
            Err(Error::Numerical { op: "l2_normalize", .. })
        ));
    }

    #[test]
    fn input_gradient_matches_parameter_gradient() {
        let x = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut s = ParamStore::new();
        let id = s.add("x", x.clone()).unwrap();
        let loss = |t: &mut Tape, v: &Var| {
            let e = t.exp(v).unwrap();
            let m = t.mul(&e, v).unwrap();
            t.sum(&m).unwrap()
        };
        let mut t = Tape::new(Mode::Grad);
        let p = t.param(&s, id);
        let l = loss(&mut t, &p);
        t.backward(&l, &mut s).unwrap();

        let mut empty = ParamStore::new();
        let mut t = Tape::new(Mode::Grad);
        let v = t.input(x);
        let l = loss(&mut t, &v);
        let g = t.backward_with_inputs(&l, &mut empty, &[&v]).unwrap();
        assert_eq!(&g[0], s.grad(id));
    }
}
