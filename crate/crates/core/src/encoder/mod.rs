//! Token embedding, pre-LN transformer stack with linear attention, and pooling.

pub mod attention;
pub mod checkpoint;

use crate::autodiff::rng::tag;
use crate::autodiff::{Mode, ParamId, ParamStore, PassKey, RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::preprocess::io::FloatTable;
use crate::preprocess::{BinSpec, SparseProfile};

pub use attention::{draw_features, exact_attention, favor_attention, FeatureKernel};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    FavorPlus,
    Exact,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::FavorPlus => "favor_plus",
            AttentionMode::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "favor_plus" | "favor" | "performer" => Ok(AttentionMode::FavorPlus),
            "exact" | "softmax" => Ok(AttentionMode::Exact),
            _ => Err(Error::Config(format!("unknown attention mode `{s}` (favor_plus|exact)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_genes: usize,
    pub feature_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub n_random_features: usize,
    pub attention_mode: AttentionMode,
    pub kernel: FeatureKernel,
    pub exact_cap: usize,
    pub ffn_mult: usize,
    /// Width of the pooled cell embedding.
    pub proj_dim: usize,
    /// Redraw FAVOR+ features every optimizer step instead of once per run.
    pub redraw_features: bool,
    pub init_std: f64,
    pub bins: BinSpec,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_genes: 16_906,
            feature_size: 512,
            n_layers: 10,
            n_heads: 16,
            max_seq_len: 6000,
            dropout_p: 0.1,
            n_random_features: 256,
            attention_mode: AttentionMode::FavorPlus,
            kernel: FeatureKernel::Softmax,
            exact_cap: 4096,
            ffn_mult: 4,
            proj_dim: 512,
            redraw_features: false,
            init_std: 0.02,
            bins: BinSpec::default(),
        }
    }
}

impl EncoderConfig {
    /// Small configuration used by tests and desk-scale verification.
    pub fn tiny(n_genes: usize) -> Self {
        EncoderConfig {
            n_genes,
            feature_size: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            n_random_features: 32,
            attention_mode: AttentionMode::Exact,
            proj_dim: 16,
            init_std: 0.2,
            ..EncoderConfig::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.feature_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_genes == 0 || self.feature_size == 0 || self.proj_dim == 0 {
            return bad("n_genes, feature_size and proj_dim must be positive".into());
        }
        if self.n_heads == 0 || !self.feature_size.is_multiple_of(self.n_heads) {
            return bad(format!(
                "feature_size {} is not divisible by n_heads {}",
                self.feature_size, self.n_heads
            ));
        }
        if self.n_random_features == 0 {
            return bad("n_random_features must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if self.max_seq_len == 0 || self.ffn_mult == 0 {
            return bad("max_seq_len and ffn_mult must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    /// `key=value` lines accepted back by [`EncoderConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_genes", self.n_genes.to_string()),
            ("feature_size", self.feature_size.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("dropout_p", format!("{:?}", self.dropout_p)),
            ("n_random_features", self.n_random_features.to_string()),
            ("attention_mode", self.attention_mode.name().into()),
            ("kernel", self.kernel.name().into()),
            ("exact_cap", self.exact_cap.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("redraw_features", self.redraw_features.to_string()),
            ("init_std", format!("{:?}", self.init_std)),
            ("bins", self.bins.to_edge_string()),
        ]
    }

    /// Applies one config entry; returns `false` if the key is not an encoder key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "n_genes" => self.n_genes = num(key, value)?,
            "feature_size" => self.feature_size = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "dropout_p" => self.dropout_p = num(key, value)?,
            "n_random_features" => self.n_random_features = num(key, value)?,
            "attention_mode" => self.attention_mode = AttentionMode::parse(value)?,
            "kernel" => self.kernel = FeatureKernel::parse(value)?,
            "exact_cap" => self.exact_cap = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "proj_dim" => self.proj_dim = num(key, value)?,
            "redraw_features" => self.redraw_features = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "bins" => self.bins = BinSpec::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    expression: ParamId,
    gene: ParamId,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    conv: (ParamId, ParamId),
    pool_ff: (ParamId, ParamId),
    mlm: (ParamId, ParamId),
    cls: (ParamId, ParamId),
}

/// Model parameters bound to one tape.
pub struct Bound {
    expression: Var,
    gene: Var,
    layers: Vec<LayerVars>,
    final_ln: (Var, Var),
    conv: (Var, Var),
    pool_ff: (Var, Var),
    mlm: (Var, Var),
    cls: (Var, Var),
}

struct LayerVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    ffn_in: (Var, Var),
    ffn_out: (Var, Var),
}

/// FAVOR+ projections for every (layer, head), fixed for one forward schedule.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub epoch: u64,
    maps: Vec<Vec<Tensor>>,
}

impl FeatureBank {
    pub fn get(&self, layer: usize, head: usize) -> &Tensor {
        &self.maps[layer][head]
    }
}

/// Token ids of one cell, CLS first.
#[derive(Clone, Debug, PartialEq)]
pub struct CellInput {
    /// Gene positions of the non-CLS tokens.
    pub positions: Vec<usize>,
    /// Gene-table rows, `n_genes` (the CLS row) first.
    pub gene_rows: Vec<usize>,
    /// Expression-table rows, the CLS token first.
    pub tokens: Vec<usize>,
    /// Original bin of each non-CLS token (the masked-modeling target).
    pub bins: Vec<usize>,
}

impl CellInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    /// Seed for parameter init and FAVOR+ feature draws.
    pub seed: u64,
    layout: Layout,
}

fn pair(store: &mut ParamStore, prefix: &str, a: (&str, Tensor), b: (&str, Tensor)) -> Result<(ParamId, ParamId)> {
    Ok((
        store.add(format!("{prefix}.{}", a.0), a.1)?,
        store.add(format!("{prefix}.{}", b.0), b.1)?,
    ))
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.feature_size;
        let h = d * config.ffn_mult;
        let std = config.init_std;
        let mut store = ParamStore::new();
        let mut counter = 0u64;
        let mut normal = |shape: &[usize]| {
            counter += 1;
            let mut rng = RngStream::keyed(seed, &[tag::INIT, counter]);
            let n = shape.iter().product();
            let data = rng.normal_vec(n).into_iter().map(|v| v * std).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        };
        let ones = |n: usize| Tensor::full(&[n], 1.0);
        let zeros = |n: usize| Tensor::zeros(&[n]);

        let expression = store.add("embed.expression", normal(&[config.bins.n_tokens(), d]))?;
        let gene = store.add("embed.gene", normal(&[config.n_genes + 1, d]))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            let mut lin = |store: &mut ParamStore, name: &str, a: usize, b: usize| {
                pair(store, &format!("{p}.{name}"), ("weight", normal(&[a, b])), ("bias", zeros(b)))
            };
            let ln1 = pair(&mut store, &format!("{p}.ln1"), ("gain", ones(d)), ("bias", zeros(d)))?;
            let q = lin(&mut store, "attn.q", d, d)?;
            let k = lin(&mut store, "attn.k", d, d)?;
            let v = lin(&mut store, "attn.v", d, d)?;
            let o = lin(&mut store, "attn.out", d, d)?;
            let ln2 = pair(&mut store, &format!("{p}.ln2"), ("gain", ones(d)), ("bias", zeros(d)))?;
            let ffn_in = lin(&mut store, "ffn.in", d, h)?;
            let ffn_out = lin(&mut store, "ffn.out", h, d)?;
            layers.push(LayerIds {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ffn_in,
                ffn_out,
            });
        }
        let final_ln = pair(&mut store, "final_ln", ("gain", ones(d)), ("bias", zeros(d)))?;
        let conv = pair(&mut store, "pool.conv", ("weight", normal(&[d, 1])), ("bias", zeros(1)))?;
        let pool_ff = pair(
            &mut store,
            "pool.ff",
            ("weight", normal(&[config.n_genes, config.proj_dim])),
            ("bias", zeros(config.proj_dim)),
        )?;
        let n_bins = config.bins.n_expression_bins();
        let mlm = pair(&mut store, "mlm_head", ("weight", normal(&[d, n_bins])), ("bias", zeros(n_bins)))?;
        let cls = pair(&mut store, "cls_head", ("weight", normal(&[d, 1])), ("bias", zeros(1)))?;
        Ok(Encoder {
            config,
            params: store,
            seed,
            layout: Layout {
                expression,
                gene,
                layers,
                final_ln,
                conv,
                pool_ff,
                mlm,
                cls,
            },
        })
    }

    /// Replaces the gene rows (not the CLS row) of the gene-embedding table.
    pub fn load_gene_embeddings(&mut self, table: &FloatTable) -> Result<()> {
        let d = self.config.feature_size;
        if table.rows != self.config.n_genes || table.cols != d {
            return Err(Error::Schema(format!(
                "gene embedding table is {}x{}, model expects {}x{d}",
                table.rows, table.cols, self.config.n_genes
            )));
        }
        let t = self.params.value_mut(self.layout.gene);
        for (dst, src) in t.data_mut()[..table.rows * d].iter_mut().zip(&table.data) {
            *dst = *src as f64;
        }
        Ok(())
    }

    pub fn gene_embedding_id(&self) -> ParamId {
        self.layout.gene
    }

    pub fn expression_embedding_id(&self) -> ParamId {
        self.layout.expression
    }

    /// Parameters of the token embeddings and transformer stack (everything but the heads).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let heads = [self.layout.mlm.0, self.layout.mlm.1, self.layout.cls.0, self.layout.cls.1];
        self.params.ids().filter(|id| !heads.contains(id)).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, &self.params)
    }

    /// Binds parameters from `store`, which must share this encoder's layout
    /// (e.g. a perturbed clone of `self.params`).
    pub fn bind_with(&self, tape: &mut Tape, store: &ParamStore) -> Bound {
        let s = store;
        let mut p = |id: ParamId| tape.param(s, id);
        let l = &self.layout;
        let expression = p(l.expression);
        let gene = p(l.gene);
        let layers = l
            .layers
            .iter()
            .map(|ids| LayerVars {
                ln1: (p(ids.ln1.0), p(ids.ln1.1)),
                q: (p(ids.q.0), p(ids.q.1)),
                k: (p(ids.k.0), p(ids.k.1)),
                v: (p(ids.v.0), p(ids.v.1)),
                o: (p(ids.o.0), p(ids.o.1)),
                ln2: (p(ids.ln2.0), p(ids.ln2.1)),
                ffn_in: (p(ids.ffn_in.0), p(ids.ffn_in.1)),
                ffn_out: (p(ids.ffn_out.0), p(ids.ffn_out.1)),
            })
            .collect();
        Bound {
            expression,
            gene,
            layers,
            final_ln: (p(l.final_ln.0), p(l.final_ln.1)),
            conv: (p(l.conv.0), p(l.conv.1)),
            pool_ff: (p(l.pool_ff.0), p(l.pool_ff.1)),
            mlm: (p(l.mlm.0), p(l.mlm.1)),
            cls: (p(l.cls.0), p(l.cls.1)),
        }
    }

    /// Feature projections for `epoch`; `None` in exact-attention mode.
    pub fn feature_bank(&self, epoch: u64) -> Option<FeatureBank> {
        if self.config.attention_mode == AttentionMode::Exact {
            return None;
        }
        let c = &self.config;
        let maps = (0..c.n_layers)
            .map(|l| {
                (0..c.n_heads)
                    .map(|h| {
                        let mut rng = RngStream::keyed(self.seed, &[tag::FEATURES, epoch, l as u64, h as u64]);
                        draw_features(c.n_random_features, c.d_head(), &mut rng)
                    })
                    .collect()
            })
            .collect();
        Some(FeatureBank { epoch, maps })
    }

    /// Token ids for a profile; `masked` lists token indices whose expression is hidden.
    pub fn tokenize(&self, profile: &SparseProfile, masked: &[usize]) -> Result<CellInput> {
        let c = &self.config;
        if profile.len() > c.max_seq_len {
            return Err(Error::Config(format!(
                "profile has {} genes, max_seq_len is {}",
                profile.len(),
                c.max_seq_len
            )));
        }
        if let Some(&p) = profile.positions.iter().find(|&&p| p >= c.n_genes) {
            return Err(Error::Index {
                what: "gene position",
                index: p,
                len: c.n_genes,
            });
        }
        let bins = c.bins.tokens(&profile.values)?;
        let mut tokens = Vec::with_capacity(bins.len() + 1);
        tokens.push(c.bins.cls_token());
        tokens.extend_from_slice(&bins);
        for &m in masked {
            if m >= bins.len() {
                return Err(Error::Index {
                    what: "masked token",
                    index: m,
                    len: bins.len(),
                });
            }
            tokens[m + 1] = c.bins.mask_token();
        }
        let mut gene_rows = Vec::with_capacity(bins.len() + 1);
        gene_rows.push(c.n_genes);
        gene_rows.extend_from_slice(&profile.positions);
        Ok(CellInput {
            positions: profile.positions.clone(),
            gene_rows,
            tokens,
            bins,
        })
    }

    /// Input matrix `C`: gene embedding plus expression embedding per token.
    pub fn embed(&self, tape: &mut Tape, w: &Bound, input: &CellInput) -> Result<Var> {
        let g = tape.gather_rows(&w.gene, &input.gene_rows)?;
        let e = tape.gather_rows(&w.expression, &input.tokens)?;
        tape.add(&g, &e)
    }

    fn linear(tape: &mut Tape, x: &Var, wb: &(Var, Var)) -> Result<Var> {
        let y = tape.matmul(x, &wb.0)?;
        tape.add_bias(&y, &wb.1)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        lv: &LayerVars,
        layer: usize,
        x: &Var,
        features: Option<&FeatureBank>,
        maps: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let q = Self::linear(tape, x, &lv.q)?;
        let k = Self::linear(tape, x, &lv.k)?;
        let v = Self::linear(tape, x, &lv.v)?;
        let dh = self.config.d_head();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut maps = maps;
        for h in 0..self.config.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(&q, a, b)?;
            let kh = tape.slice_cols(&k, a, b)?;
            let vh = tape.slice_cols(&v, a, b)?;
            let out = match (self.config.attention_mode, features) {
                (AttentionMode::FavorPlus, Some(f)) if maps.is_none() => {
                    favor_attention(tape, &qh, &kh, &vh, f.get(layer, h), self.config.kernel)?
                }
                (AttentionMode::FavorPlus, None) if maps.is_none() => {
                    return Err(Error::Usage("linear attention needs a feature bank".into()));
                }
                _ => {
                    let (out, attn) = exact_attention(tape, &qh, &kh, &vh, self.config.exact_cap)?;
                    if let Some(m) = maps.as_deref_mut() {
                        m.push(attn.to_tensor());
                    }
                    out
                }
            };
            heads.push(out);
        }
        let cat = tape.concat_cols(&heads)?;
        Self::linear(tape, &cat, &lv.o)
    }

    fn stack(
        &self,
        tape: &mut Tape,
        w: &Bound,
        c: Var,
        key: Option<PassKey>,
        features: Option<&FeatureBank>,
        mut maps: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let p = if key.is_some() { self.config.dropout_p } else { 0.0 };
        let mut x = c;
        for (i, lv) in w.layers.iter().enumerate() {
            let a = tape.layernorm(&x, &lv.ln1.0, &lv.ln1.1, LN_EPS)?;
            let a = self.attention(tape, lv, i, &a, features, maps.as_deref_mut())?;
            let a = match key {
                Some(k) => tape.dropout(&a, p, &mut k.dropout_stream(i as u64, 0))?,
                None => a,
            };
            x = tape.add(&x, &a)?;
            let f = tape.layernorm(&x, &lv.ln2.0, &lv.ln2.1, LN_EPS)?;
            let f = Self::linear(tape, &f, &lv.ffn_in)?;
            let f = tape.gelu(&f)?;
            let f = Self::linear(tape, &f, &lv.ffn_out)?;
            let f = match key {
                Some(k) => tape.dropout(&f, p, &mut k.dropout_stream(i as u64, 1))?,
                None => f,
            };
            x = tape.add(&x, &f)?;
        }
        if w.layers.is_empty() {
            return Ok(x);
        }
        tape.layernorm(&x, &w.final_ln.0, &w.final_ln.1, LN_EPS)
    }

    /// Hidden states `H`, one row per token with CLS at row 0.
    ///
    /// Dropout is active only when `key` is given; its masks are a pure function of the key.
    pub fn encode(
        &self,
        tape: &mut Tape,
        w: &Bound,
        input: &CellInput,
        key: Option<PassKey>,
        features: Option<&FeatureBank>,
    ) -> Result<Var> {
        let c = self.embed(tape, w, input)?;
        self.stack(tape, w, c, key, features, None)
    }

    /// Expressed positions carry their `H` rows, all other genes are zero: `n_genes × d`.
    pub fn restore(&self, tape: &mut Tape, h: &Var, positions: &[usize]) -> Result<Var> {
        let genes = tape.slice_rows(h, 1, h.rows())?;
        tape.scatter_rows(&genes, positions, self.config.n_genes)
    }

    /// Cell embedding (`1 × proj_dim`): restore, `1×d` convolution, transpose, feed-forward.
    pub fn pool(&self, tape: &mut Tape, w: &Bound, h: &Var, positions: &[usize]) -> Result<Var> {
        let full = self.restore(tape, h, positions)?;
        let conv = Self::linear(tape, &full, &w.conv)?;
        let row = tape.transpose(&conv)?;
        Self::linear(tape, &row, &w.pool_ff)
    }

    /// Encoder then pooling: the contrastive representation of one cell.
    pub fn embed_cell(
        &self,
        tape: &mut Tape,
        w: &Bound,
        input: &CellInput,
        key: Option<PassKey>,
        features: Option<&FeatureBank>,
    ) -> Result<Var> {
        let h = self.encode(tape, w, input, key, features)?;
        self.pool(tape, w, &h, &input.positions)
    }

    /// Bin logits of the given non-CLS token indices.
    pub fn mlm_logits(&self, tape: &mut Tape, w: &Bound, h: &Var, token_idx: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = token_idx.iter().map(|i| i + 1).collect();
        let x = tape.gather_rows(h, &rows)?;
        Self::linear(tape, &x, &w.mlm)
    }

    /// Tumor logit from the CLS row (`1×1`).
    pub fn cls_logit(&self, tape: &mut Tape, w: &Bound, h: &Var) -> Result<Var> {
        let x = tape.slice_rows(h, 0, 1)?;
        Self::linear(tape, &x, &w.cls)
    }

    /// No-grad hidden states of a profile.
    pub fn hidden_states(&self, profile: &SparseProfile, key: Option<PassKey>) -> Result<Tensor> {
        let input = self.tokenize(profile, &[])?;
        let features = self.feature_bank(0);
        let mut tape = Tape::new(Mode::NoGrad);
        let w = self.bind(&mut tape);
        Ok(self.encode(&mut tape, &w, &input, key, features.as_ref())?.to_tensor())
    }

    /// No-grad pooled cell embedding without dropout.
    pub fn cell_embedding(&self, profile: &SparseProfile, features: Option<&FeatureBank>) -> Result<Vec<f64>> {
        let input = self.tokenize(profile, &[])?;
        let mut tape = Tape::new(Mode::NoGrad);
        let w = self.bind(&mut tape);
        Ok(self
            .embed_cell(&mut tape, &w, &input, None, features)?
            .to_tensor()
            .into_data())
    }

    /// Exact-attention maps of every layer and head (`[layer][head]`, each `(L+1)×(L+1)`).
    pub fn attention_maps(&self, profile: &SparseProfile) -> Result<Vec<Vec<Tensor>>> {
        let input = self.tokenize(profile, &[])?;
        let mut tape = Tape::new(Mode::NoGrad);
        let w = self.bind(&mut tape);
        let mut x = self.embed(&mut tape, &w, &input)?;
        let mut out = Vec::with_capacity(w.layers.len());
        for (i, lv) in w.layers.iter().enumerate() {
            let mut maps = Vec::new();
            let a = tape.layernorm(&x, &lv.ln1.0, &lv.ln1.1, LN_EPS)?;
            let a = self.attention(&mut tape, lv, i, &a, None, Some(&mut maps))?;
            x = tape.add(&x, &a)?;
            let f = tape.layernorm(&x, &lv.ln2.0, &lv.ln2.1, LN_EPS)?;
            let f = Self::linear(&mut tape, &f, &lv.ffn_in)?;
            let f = tape.gelu(&f)?;
            let f = Self::linear(&mut tape, &f, &lv.ffn_out)?;
            x = tape.add(&x, &f)?;
            out.push(maps);
        }
        Ok(out)
    }
}
