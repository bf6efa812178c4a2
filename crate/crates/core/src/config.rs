//! Flat `key=value` run configuration with `#` comments.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::dac::train::TrainConfig;
use crate::downstream::{Activation, FineTuneConfig, SplitSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub finetune: FineTuneConfig,
    /// Hidden widths of the classification head; the class count is appended.
    pub head_hidden: Vec<usize>,
    pub head_activation: Activation,
    pub head_dropout: f64,
    /// Mini-batch sizes checked by `verify`.
    pub verify_chunks: Vec<usize>,
    pub verify_threshold: f64,
    pub gene_embeddings: Option<PathBuf>,
    /// Keys given explicitly in the file or on the command line.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            finetune: FineTuneConfig::default(),
            head_hidden: vec![512, 128],
            head_activation: Activation::Relu,
            head_dropout: 0.1,
            verify_chunks: vec![1, 2, 4, 8, 16],
            verify_threshold: 1e-6,
            gene_embeddings: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad list `{v}` for `{key}`")))
        })
        .collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Desk-scale defaults: tiny encoder, small batches, quick fine-tuning.
    pub fn tiny(n_genes: usize) -> Self {
        let mut c = RunConfig {
            encoder: EncoderConfig::tiny(n_genes),
            head_hidden: vec![32],
            ..RunConfig::default()
        };
        c.train.batch_size = 16;
        c.train.mini_batch = 4;
        c.train.adam.lr = 1e-3;
        c.finetune.adam.lr = 1e-3;
        c
    }

    /// Applies one entry; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = match key {
            "ft_epochs" => {
                self.finetune.epochs = num(key, value)?;
                true
            }
            "ft_batch_size" => {
                self.finetune.batch_size = num(key, value)?;
                true
            }
            "ft_lr" => {
                self.finetune.adam.lr = num(key, value)?;
                true
            }
            "ft_weight_decay" => {
                self.finetune.adam.weight_decay = num(key, value)?;
                true
            }
            "freeze_encoder" => {
                self.finetune.freeze_encoder = num(key, value)?;
                true
            }
            "split" => {
                self.finetune.split = SplitSpec::parse(value)?;
                true
            }
            "head_hidden" => {
                self.head_hidden = if value.trim().is_empty() { Vec::new() } else { list(key, value)? };
                true
            }
            "head_activation" => {
                self.head_activation = Activation::parse(value)?;
                true
            }
            "head_dropout" => {
                self.head_dropout = num(key, value)?;
                true
            }
            "verify_chunks" => {
                self.verify_chunks = list(key, value)?;
                true
            }
            "verify_threshold" => {
                self.verify_threshold = num(key, value)?;
                true
            }
            "gene_embeddings" => {
                self.gene_embeddings = Some(PathBuf::from(value));
                true
            }
            _ => self.encoder.set(key, value)? || self.train.set(key, value)?,
        };
        if !known {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        if key == "seed" {
            self.finetune.seed = self.train.seed;
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Parses `text` on top of `self`; `origin` names the source in messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(at(format!("duplicate key `{k}`")));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = base;
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!("head_dropout {} not in [0, 1)", self.head_dropout)));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("head_hidden widths must be positive".into()));
        }
        if self.verify_chunks.is_empty() || self.verify_chunks.contains(&0) {
            return Err(Error::Config("verify_chunks must list positive sizes".into()));
        }
        if self.verify_threshold.is_nan() || self.verify_threshold <= 0.0 {
            return Err(Error::Config("verify_threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = self.encoder.to_pairs();
        pairs.extend(self.train.to_pairs());
        let s = &self.finetune.split;
        pairs.extend([
            ("ft_epochs", self.finetune.epochs.to_string()),
            ("ft_batch_size", self.finetune.batch_size.to_string()),
            ("ft_lr", format!("{:?}", self.finetune.adam.lr)),
            ("ft_weight_decay", format!("{:?}", self.finetune.adam.weight_decay)),
            ("freeze_encoder", self.finetune.freeze_encoder.to_string()),
            ("split", format!("{:?},{:?},{}", s.train_frac, s.val_frac, s.seed)),
            ("head_hidden", join(&self.head_hidden)),
            ("head_activation", self.head_activation.name().into()),
            ("head_dropout", format!("{:?}", self.head_dropout)),
            ("verify_chunks", join(&self.verify_chunks)),
            ("verify_threshold", format!("{:?}", self.verify_threshold)),
        ]);
        if let Some(p) = &self.gene_embeddings {
            pairs.push(("gene_embeddings", p.display().to_string()));
        }
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let mut c = RunConfig::default();
        c.apply_text("# header\nfeature_size = 32 # inline\n\nlr=0.01\nsplit=0.5,0.2,9\nseed=4\n", "t").unwrap();
        assert_eq!(c.encoder.feature_size, 32);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.finetune.split.seed, 9);
        assert_eq!(c.finetune.seed, 4);
        assert!(c.is_explicit("lr") && !c.is_explicit("n_genes"));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let err = |t: &str| RunConfig::default().apply_text(t, "cfg").unwrap_err().to_string();
        assert!(err("bogus=1").contains("cfg:1"));
        assert!(err("lr=1\nlr=2").contains("duplicate"));
        assert!(err("\nnot a pair").contains("cfg:2"));
        assert!(err("n_heads=x").contains("n_heads"));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::tiny(30);
        c.gene_embeddings = Some("g.bin".into());
        c.head_hidden = vec![7, 5];
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "t").unwrap();
        back.explicit.clear();
        assert_eq!(back, c);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::tiny(10);
        c.set("n_heads", "3").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::tiny(10);
        c.set("mini_batch", "0").unwrap();
        assert!(c.validate().is_err());
    }
}
