//! Feed-forward task heads over pooled cell embeddings.

use std::fs;
use std::path::Path;

use crate::autodiff::rng::tag;
use crate::autodiff::{Mode, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::encoder::checkpoint::{read_params_into, write_params};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Gelu,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Elu => "elu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "elu" => Ok(Activation::Elu),
            "gelu" => Ok(Activation::Gelu),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }

    fn apply(self, tape: &mut Tape, x: &Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Elu => tape.elu(x, 1.0),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Affine layers with an activation and dropout between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    /// Input width followed by every layer's output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub dropout_p: f64,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: Vec<usize>,
        activation: Activation,
        dropout_p: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("{prefix}: invalid layer widths {widths:?}")));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!("{prefix}: dropout {dropout_p} not in [0, 1)")));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = rng.normal_vec(fan_in * fan_out).into_iter().map(|v| v * std).collect();
            let wid = store.add(format!("{prefix}.{i}.weight"), Tensor::matrix(fan_in, fan_out, w)?)?;
            let bid = store.add(format!("{prefix}.{i}.bias"), Tensor::vector(vec![0.0; fan_out]))?;
            layers.push((wid, bid));
        }
        Ok(Mlp {
            widths,
            activation,
            dropout_p,
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var, mut rng: Option<&mut RngStream>) -> Result<Var> {
        if x.cols() != self.input_width() {
            return Err(Error::Schema(format!(
                "head expects width {}, got {}",
                self.input_width(),
                x.cols()
            )));
        }
        let mut h = x.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.matmul(&h, &wv)?;
            h = tape.add_bias(&h, &bv)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, &h)?;
                if let Some(r) = rng.as_deref_mut() {
                    if self.dropout_p > 0.0 {
                        h = tape.dropout(&h, self.dropout_p, r)?;
                    }
                }
            }
        }
        Ok(h)
    }
}

fn widths_text(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Schema(format!("bad widths `{s}`"))))
        .collect()
}

fn head_rng(seed: u64) -> RngStream {
    RngStream::keyed(seed, &[tag::HEAD, 0])
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub params: ParamStore,
    pub mlp: Mlp,
}

impl ClassifierHead {
    /// `widths` are the layer output sizes; the last one is the class count.
    pub fn new(input_width: usize, widths: &[usize], activation: Activation, dropout_p: f64, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut all = vec![input_width];
        all.extend_from_slice(widths);
        let mlp = Mlp::new(&mut params, "head", all, activation, dropout_p, &mut head_rng(seed))?;
        if mlp.output_width() < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        Ok(ClassifierHead { params, mlp })
    }

    /// Cell-type annotation preset: 512, 128, `n_classes` with ReLU.
    pub fn annotation(input_width: usize, n_classes: usize, seed: u64) -> Result<Self> {
        Self::new(input_width, &[512, 128, n_classes], Activation::Relu, 0.1, seed)
    }

    /// Single-cell drug response preset: 512, 32, 2 with leaky ReLU.
    pub fn drug_response(input_width: usize, seed: u64) -> Result<Self> {
        Self::new(input_width, &[512, 32, 2], Activation::LeakyRelu, 0.1, seed)
    }

    pub fn n_classes(&self) -> usize {
        self.mlp.output_width()
    }

    /// Logits for a batch of embeddings (`n × input_width`); dropout only with `rng`.
    pub fn logits(&self, tape: &mut Tape, x: &Var, rng: Option<&mut RngStream>) -> Result<Var> {
        self.mlp.forward(tape, &self.params, x, rng)
    }

    /// Class probabilities of one embedding.
    pub fn classify(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(Mode::NoGrad);
        let x = tape.constant(Tensor::matrix(1, embedding.len(), embedding.to_vec())?);
        Ok(softmax(self.logits(&mut tape, &x, None)?.value().data()))
    }

    pub fn predict(&self, embedding: &[f64]) -> Result<usize> {
        let p = self.classify(embedding)?;
        Ok(argmax(&p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "kind=classifier\nwidths={}\nactivation={}\ndropout={:?}\n",
            widths_text(&self.mlp.widths),
            self.mlp.activation.name(),
            self.mlp.dropout_p
        );
        encode_head(&header, &self.params)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Cell branch, precomputed drug features, then a fusion network ending in one output.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub params: ParamStore,
    pub cell: Mlp,
    pub fusion: Mlp,
    pub drug_width: usize,
}

impl RegressionHead {
    pub fn new(
        input_width: usize,
        cell_widths: &[usize],
        drug_width: usize,
        fusion_widths: &[usize],
        dropout_p: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = head_rng(seed);
        let mut cw = vec![input_width];
        cw.extend_from_slice(cell_widths);
        let cell = Mlp::new(&mut params, "cell", cw, Activation::Relu, dropout_p, &mut rng)?;
        if drug_width == 0 {
            return Err(Error::Config("drug feature width must be positive".into()));
        }
        let mut fw = vec![cell.output_width() + drug_width];
        fw.extend_from_slice(fusion_widths);
        let fusion = Mlp::new(&mut params, "fusion", fw, Activation::Elu, dropout_p, &mut rng)?;
        if fusion.output_width() != 1 {
            return Err(Error::Config("the fusion network must end in one output".into()));
        }
        Ok(RegressionHead {
            params,
            cell,
            fusion,
            drug_width,
        })
    }

    /// Cell-line preset: cell 1024, 256; drug 256; fusion 512, 512, 1.
    pub fn cell_line(input_width: usize, seed: u64) -> Result<Self> {
        Self::new(input_width, &[1024, 256], 256, &[512, 512, 1], 0.2, seed)
    }

    /// Predictions (`n × 1`) for paired cell embeddings and drug features.
    pub fn forward(&self, tape: &mut Tape, cells: &Var, drugs: &Var, mut rng: Option<&mut RngStream>) -> Result<Var> {
        if drugs.cols() != self.drug_width || drugs.rows() != cells.rows() {
            return Err(Error::Schema(format!(
                "drug features {:?} do not match {} rows of width {}",
                drugs.shape(),
                cells.rows(),
                self.drug_width
            )));
        }
        let c = self.cell.forward(tape, &self.params, cells, rng.as_deref_mut())?;
        let joint = tape.concat_cols(&[c, drugs.clone()])?;
        self.fusion.forward(tape, &self.params, &joint, rng)
    }

    pub fn regress(&self, embedding: &[f64], drug: &[f64]) -> Result<f64> {
        let mut tape = Tape::new(Mode::NoGrad);
        let c = tape.constant(Tensor::matrix(1, embedding.len(), embedding.to_vec())?);
        let d = tape.constant(Tensor::matrix(1, drug.len(), drug.to_vec())?);
        Ok(self.forward(&mut tape, &c, &d, None)?.value().data()[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "kind=regression\ncell_widths={}\ndrug_width={}\nfusion_widths={}\ndropout={:?}\n",
            widths_text(&self.cell.widths),
            self.drug_width,
            widths_text(&self.fusion.widths[1..]),
            self.cell.dropout_p
        );
        encode_head(&header, &self.params)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Classifier(ClassifierHead),
    Regression(RegressionHead),
}

const MAGIC: &[u8; 4] = b"GCHD";

fn encode_head(header: &str, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    write_params(&mut out, params).expect("writing to a vector");
    out
}

impl Head {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Head::Classifier(h) => h.to_bytes(),
            Head::Regression(h) => h.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Schema(format!("head file: {m}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = bytes
            .get(8..8 + n)
            .and_then(|h| std::str::from_utf8(h).ok())
            .ok_or_else(|| bad("truncated header"))?;
        let mut kv = std::collections::HashMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing `{k}`")));
        let dropout: f64 = get("dropout")?.parse().map_err(|_| bad("dropout"))?;
        let mut head = match get("kind")? {
            "classifier" => {
                let w = parse_widths(get("widths")?)?;
                Head::Classifier(ClassifierHead::new(w[0], &w[1..], Activation::parse(get("activation")?)?, dropout, 0)?)
            }
            "regression" => {
                let cw = parse_widths(get("cell_widths")?)?;
                let fw = parse_widths(get("fusion_widths")?)?;
                let dw = get("drug_width")?.parse().map_err(|_| bad("drug_width"))?;
                Head::Regression(RegressionHead::new(cw[0], &cw[1..], dw, &fw, dropout, 0)?)
            }
            k => return Err(bad(&format!("unknown kind `{k}`"))),
        };
        let store = match &mut head {
            Head::Classifier(h) => &mut h.params,
            Head::Regression(h) => &mut h.params,
        };
        read_params_into(&bytes[8 + n..], store)?;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, GradCheckOptions};

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mut h = ClassifierHead::new(4, &[6, 3], Activation::Relu, 0.0, 1).unwrap();
        let ids: Vec<_> = h.params.ids().collect();
        for id in ids {
            h.params.value_mut(id).fill(0.0);
        }
        let p = h.classify(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let h = ClassifierHead::new(5, &[8, 4], Activation::LeakyRelu, 0.1, 2).unwrap();
        let p = h.classify(&[1.0, -2.0, 0.5, 3.0, -0.1]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn width_mismatch_is_schema_error() {
        let h = ClassifierHead::new(5, &[2], Activation::Relu, 0.0, 2).unwrap();
        assert!(matches!(h.classify(&[1.0; 4]), Err(Error::Schema(_))));
        let r = RegressionHead::new(3, &[4], 2, &[3, 1], 0.0, 1).unwrap();
        assert!(matches!(r.regress(&[1.0; 3], &[1.0; 3]), Err(Error::Schema(_))));
        assert_eq!(r.fusion.input_width(), 4 + 2);
    }

    #[test]
    fn presets_have_expected_shapes() {
        let a = ClassifierHead::annotation(16, 11, 0).unwrap();
        assert_eq!(a.mlp.widths, vec![16, 512, 128, 11]);
        let r = RegressionHead::cell_line(16, 0).unwrap();
        assert_eq!(r.fusion.widths, vec![512, 512, 512, 1]);
    }

    #[test]
    fn head_gradients_match_differences() {
        for act in [Activation::Relu, Activation::LeakyRelu, Activation::Elu, Activation::Gelu] {
            let mut h = ClassifierHead::new(3, &[5, 3], act, 0.0, 7).unwrap();
            let x = Tensor::matrix(2, 3, vec![0.4, -1.1, 0.8, 1.3, 0.2, -0.6]).unwrap();
            let mlp = h.mlp.clone();
            let report = check_gradients(
                &mut h.params,
                |tape, store| {
                    let xv = tape.constant(x.clone());
                    let z = mlp.forward(tape, store, &xv, None)?;
                    let s = tape.log_softmax_rows(&z)?;
                    let picked = tape.pick(&s, &[2, 0])?;
                    let total = tape.sum(&picked)?;
                    tape.scale(&total, -1.0)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-4, "{act:?}: {report:?}");
        }
        let mut r = RegressionHead::new(3, &[4], 2, &[3, 1], 0.0, 3).unwrap();
        let c = Tensor::matrix(2, 3, vec![0.4, -1.1, 0.8, 1.3, 0.2, -0.6]).unwrap();
        let d = Tensor::matrix(2, 2, vec![0.5, -0.5, 1.0, 0.25]).unwrap();
        let head = r.clone();
        let report = check_gradients(
            &mut r.params,
            |tape, store| {
                let (cv, dv) = (tape.constant(c.clone()), tape.constant(d.clone()));
                let hc = head.cell.forward(tape, store, &cv, None)?;
                let joint = tape.concat_cols(&[hc, dv])?;
                let y = head.fusion.forward(tape, store, &joint, None)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum(&sq)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn head_file_round_trip() {
        let mut h = ClassifierHead::new(4, &[6, 3], Activation::Elu, 0.1, 1).unwrap();
        h.params.round_to_f32();
        let back = Head::from_bytes(&Head::Classifier(h.clone()).to_bytes()).unwrap();
        let Head::Classifier(b) = back else { panic!() };
        assert_eq!(b.params.fingerprint(), h.params.fingerprint());
        assert_eq!(b.mlp.activation, Activation::Elu);

        let mut r = RegressionHead::new(3, &[4], 2, &[3, 1], 0.2, 1).unwrap();
        r.params.round_to_f32();
        let Head::Regression(rb) = Head::from_bytes(&Head::Regression(r.clone()).to_bytes()).unwrap() else {
            panic!()
        };
        assert_eq!(rb.params.fingerprint(), r.params.fingerprint());
        assert!(Head::from_bytes(b"nope").is_err());
    }
}
