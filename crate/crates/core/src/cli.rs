//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::dac::memory::{max_len_for_budget, max_mini_batch_for_budget, memory_estimator, MemoryModel, GB};
use crate::dac::train::pretrain;
use crate::dac::{verify_gradient_equivalence, VerifyOptions};
use crate::downstream::finetune::Pair;
use crate::downstream::{
    fine_tune_classifier, fine_tune_regressor, group_split, random_split, ClassifierHead, EvalReport, Features,
    Head, RegressionHead, Split, SplitSpec,
};
use crate::encoder::checkpoint::load_checkpoint;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::preprocess::io::{
    ingest_count_matrix, ingest_gene_embeddings, read_bins, read_corpus, read_labels, read_pair_labels, read_table,
    write_bins, write_corpus, CountFormat, ProfileCorpus,
};
use crate::preprocess::BinSpec;

pub const SEED_ENV: &str = "GRADCELL_SEED";

#[derive(Parser, Debug)]
#[command(name = "gradcell", version, about = "Contrastive pre-training and fine-tuning for single-cell expression profiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Normalize a raw count matrix into a profile corpus plus bin sidecar.
    Preprocess(PreprocessArgs),
    /// Pre-train an encoder with chunked contrastive, masked and classification losses.
    Pretrain(PretrainArgs),
    /// Check that chunked and end-to-end contrastive gradients agree.
    Verify(VerifyArgs),
    /// Print the longest sequence or largest mini-batch that fits a memory budget.
    Memplan(MemplanArgs),
    /// Train a task head on a pre-trained encoder and report test scores.
    Finetune(TaskArgs),
    /// Score saved predictions, or a saved head on the test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "mtx")]
    pub format: String,
    #[arg(long)]
    pub output: PathBuf,
    /// Bin sidecar path (default: the output path with extension `bins`).
    #[arg(long)]
    pub bins: Option<PathBuf>,
    /// Comma-separated expression bin edges.
    #[arg(long)]
    pub bin_edges: Option<String>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Profile corpus written by `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub bins: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Full batch size `T`.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Comma-separated mini-batch sizes.
    #[arg(long)]
    pub chunks: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Genes in the synthetic verification cells when the config does not set `n_genes`.
    #[arg(long, default_value_t = 32)]
    pub genes: usize,
    /// Desynchronize the recomputation keys (negative control).
    #[arg(long)]
    pub inject_replay_fault: bool,
}

#[derive(Args, Debug)]
pub struct MemplanArgs {
    /// Budget in GB (1e9 bytes).
    #[arg(long, default_value_t = 40.0)]
    pub budget: f64,
    #[arg(long, conflicts_with = "seq_len")]
    pub mini_batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value = "full")]
    pub model_preset: String,
    /// Encoder config for the `engine` preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Tiny,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Cell-type classification.
    Annotation,
    /// Binary single-cell drug response.
    DrugResponse,
    /// Cell-line drug response regression.
    CellLine,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Annotation => "annotation",
            Task::DrugResponse => "drug-response",
            Task::CellLine => "cell-line",
        }
    }
}

#[derive(Args, Debug)]
pub struct TaskArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Profile corpus (`.jsonl`) or count matrix (`.mtx`, `.csv`).
    #[arg(long)]
    pub data: PathBuf,
    /// `cell,label` rows, or `cell,drug,value` rows for `cell-line`.
    #[arg(long)]
    pub labels: PathBuf,
    /// `train,val[,seed]` fractions.
    #[arg(long)]
    pub split: Option<String>,
    /// Hold out whole cell lines rather than individual pairs (`cell-line` only).
    #[arg(long)]
    pub group_by_cell: bool,
    /// Drug feature table, one row per drug (`cell-line` only).
    #[arg(long)]
    pub drug_features: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Saved head to evaluate (`eval` only).
    #[arg(long)]
    pub head: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// `sample,target,prediction` rows as written by `finetune`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub group_by_cell: bool,
    #[arg(long)]
    pub drug_features: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Memplan(a) => cmd_memplan(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

/// `--seed`, then a `seed` key in the config file, then `GRADCELL_SEED`, then the default.
pub fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if cfg.is_explicit("seed") {
        return Ok(cfg.train.seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(cfg.train.seed),
    }
}

fn load_config(path: Option<&Path>, base: RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, base),
        None => Ok(base),
    }
}

fn with_seed(mut cfg: RunConfig, flag: Option<u64>) -> Result<RunConfig> {
    let seed = resolve_seed(flag, &cfg)?;
    cfg.train.seed = seed;
    cfg.finetune.seed = seed;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_preprocess(a: &PreprocessArgs) -> Result<i32> {
    let format: CountFormat = a.format.parse()?;
    let bins = match &a.bin_edges {
        Some(e) => BinSpec::parse(e)?,
        None => BinSpec::default(),
    };
    let counts = ingest_count_matrix(&a.input, format)?;
    let corpus = ProfileCorpus::from_counts(&counts)?;
    write_corpus(&a.output, &corpus)?;
    let bins_path = a.bins.clone().unwrap_or_else(|| a.output.with_extension("bins"));
    write_bins(&bins_path, &bins)?;
    log::info!(
        "{} cells x {} genes ({} non-zero) -> {}",
        counts.n_cells(),
        counts.n_genes(),
        counts.nnz(),
        a.output.display()
    );
    Ok(0)
}

fn base_config(preset: Preset, n_genes: usize) -> RunConfig {
    match preset {
        Preset::Tiny => RunConfig::tiny(n_genes),
        Preset::Full => {
            let mut c = RunConfig::default();
            c.encoder.n_genes = n_genes;
            c
        }
    }
}

fn check_genes(cfg: &RunConfig, n_genes: usize) -> Result<()> {
    if cfg.encoder.n_genes != n_genes {
        return Err(Error::Schema(format!(
            "config has n_genes={} but the data has {n_genes} genes",
            cfg.encoder.n_genes
        )));
    }
    Ok(())
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<i32> {
    let corpus = read_corpus(&a.data)?;
    let mut cfg = load_config(a.config.as_deref(), base_config(a.preset, corpus.n_genes))?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = &a.bins {
        cfg.encoder.bins = read_bins(b)?;
    }
    let cfg = with_seed(cfg, a.seed)?;
    check_genes(&cfg, corpus.n_genes)?;
    cfg.validate()?;
    if corpus.profiles.is_empty() {
        return Err(Error::Usage(format!("{} holds no cells", a.data.display())));
    }
    create_dir(&a.out)?;
    write_file(&a.out.join("config.txt"), &cfg.to_text())?;
    let mut enc = Encoder::new(cfg.encoder.clone(), cfg.train.seed)?;
    if let Some(p) = &cfg.gene_embeddings {
        enc.load_gene_embeddings(&ingest_gene_embeddings(p, cfg.encoder.n_genes, cfg.encoder.feature_size)?)?;
    }
    let (_, history) = pretrain(enc, &corpus.profiles, &cfg.train, &a.out, a.resume.as_deref())?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!(
            "steps {}..{}: combined loss {:.5} -> {:.5}",
            first.step,
            last.step,
            first.combined,
            last.combined
        );
    }
    Ok(0)
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad size list `{s}`")))
        })
        .collect()
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let cfg = load_config(a.config.as_deref(), RunConfig::tiny(a.genes))?;
    let cfg = with_seed(cfg, a.seed)?;
    cfg.encoder.validate()?;
    let chunks = match &a.chunks {
        Some(c) => parse_list(c)?,
        None => cfg.verify_chunks.clone(),
    };
    let opts = VerifyOptions {
        tau: cfg.train.tau,
        threshold: cfg.verify_threshold,
        inject_replay_fault: a.inject_replay_fault,
        ..VerifyOptions::default()
    };
    let report = verify_gradient_equivalence(&cfg.encoder, a.batch, &chunks, cfg.train.seed, &opts)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("error: gradient equivalence check failed");
        Ok(3)
    }
}

/// Memory table rows: either the longest length per mini-batch or the largest mini-batch per length.
pub fn memplan_table(model: &MemoryModel, budget: f64, mini_batch: Option<usize>, seq_len: Option<usize>) -> Result<String> {
    model.validate()?;
    let mut s = String::new();
    if let Some(len) = seq_len {
        let mb = max_mini_batch_for_budget(model, budget, len)?;
        let _ = writeln!(s, "seq_len\tmax_mini_batch\testimate_gb");
        let _ = writeln!(s, "{len}\t{mb}\t{:.3}", memory_estimator(model, len, mb) / GB);
        return Ok(s);
    }
    let sizes: Vec<usize> = match mini_batch {
        Some(m) => vec![m],
        None => (0..=8).map(|k| 1usize << k).collect(),
    };
    let _ = writeln!(s, "mini_batch\tmax_len\testimate_gb");
    for m in sizes {
        let len = max_len_for_budget(model, budget, m)?;
        let _ = writeln!(s, "{m}\t{len}\t{:.3}", memory_estimator(model, len, m) / GB);
    }
    Ok(s)
}

pub fn cmd_memplan(a: &MemplanArgs) -> Result<i32> {
    if !(a.budget > 0.0 && a.budget.is_finite()) {
        return Err(Error::Config(format!("budget {} GB must be positive", a.budget)));
    }
    let cfg = load_config(a.config.as_deref(), RunConfig::tiny(64))?;
    let budget = a.budget * GB;
    let model = MemoryModel::preset(&a.model_preset, &cfg.encoder, budget)?;
    print!("{}", memplan_table(&model, budget, a.mini_batch, a.seq_len)?);
    Ok(0)
}

/// Profile corpus from a `.jsonl` corpus or a raw count matrix.
pub fn load_cells(path: &Path) -> Result<ProfileCorpus> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mtx") => ProfileCorpus::from_counts(&ingest_count_matrix(path, CountFormat::MatrixMarket)?),
        Some("csv") => ProfileCorpus::from_counts(&ingest_count_matrix(path, CountFormat::Csv)?),
        _ => read_corpus(path),
    }
}

/// Labeled cells and their class indices; classes are the sorted distinct label strings.
pub struct ClassData {
    pub cells: Vec<usize>,
    pub targets: Vec<usize>,
    pub classes: Vec<String>,
}

pub fn class_data(labels: &[(usize, String)], n_cells: usize) -> Result<ClassData> {
    let mut by_cell = BTreeMap::new();
    for (c, l) in labels {
        if *c >= n_cells {
            return Err(Error::Index {
                what: "labeled cell",
                index: *c,
                len: n_cells,
            });
        }
        if by_cell.insert(*c, l.clone()).is_some() {
            return Err(Error::Schema(format!("cell {c} is labeled twice")));
        }
    }
    let mut classes: Vec<String> = by_cell.values().cloned().collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Schema("labels must name at least two classes".into()));
    }
    let targets = by_cell
        .values()
        .map(|l| classes.binary_search(l).unwrap())
        .collect();
    Ok(ClassData {
        cells: by_cell.into_keys().collect(),
        targets,
        classes,
    })
}

struct Prepared {
    cfg: RunConfig,
    enc: Encoder,
    corpus: ProfileCorpus,
}

fn prepare(checkpoint: &Path, data: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<Prepared> {
    let enc = load_checkpoint(checkpoint)?;
    let corpus = load_cells(data)?;
    let mut base = RunConfig::tiny(corpus.n_genes);
    base.encoder = enc.config.clone();
    let cfg = with_seed(load_config(config, base)?, seed)?;
    check_genes(&cfg, corpus.n_genes)?;
    cfg.validate()?;
    Ok(Prepared { cfg, enc, corpus })
}

fn split_spec(cfg: &RunConfig, flag: Option<&str>) -> Result<SplitSpec> {
    match flag {
        Some(s) => SplitSpec::parse(s),
        None => Ok(cfg.finetune.split),
    }
}

fn drug_rows(path: Option<&Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.ok_or_else(|| Error::Usage("--drug-features is required for the cell-line task".into()))?;
    let t = read_table(path)?;
    Ok((0..t.rows).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect())
}

fn pair_split(pairs: &[Pair], spec: &SplitSpec, group_by_cell: bool) -> Result<Split> {
    if group_by_cell {
        let groups: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        group_split(&groups, spec)
    } else {
        random_split(pairs.len(), spec)
    }
}

fn predictions_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut s = String::from("sample,target,prediction\n");
    for (i, t, p) in rows {
        let _ = writeln!(s, "{i},{t:?},{p:?}");
    }
    s
}

fn finish(report: &EvalReport, out: Option<&Path>, extra: &[(&str, String)]) -> Result<i32> {
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("report.txt"), &text)?;
        for (name, body) in extra {
            write_file(&dir.join(name), body)?;
        }
    }
    Ok(0)
}

pub fn cmd_finetune(a: &TaskArgs) -> Result<i32> {
    let Prepared { cfg, mut enc, corpus } = prepare(&a.checkpoint, &a.data, a.config.as_deref(), a.seed)?;
    let spec = split_spec(&cfg, a.split.as_deref())?;
    let ft = crate::downstream::FineTuneConfig {
        split: spec,
        ..cfg.finetune.clone()
    };
    let seed = cfg.finetune.seed;
    let proj = enc.config.proj_dim;
    match a.task {
        Task::Annotation | Task::DrugResponse => {
            let data = class_data(&read_labels(&a.labels)?, corpus.profiles.len())?;
            let profiles: Vec<_> = data.cells.iter().map(|&c| corpus.profiles[c].clone()).collect();
            let mut widths = cfg.head_hidden.clone();
            widths.push(data.classes.len());
            let activation = if a.task == Task::DrugResponse && !cfg.is_explicit("head_activation") {
                crate::downstream::Activation::LeakyRelu
            } else {
                cfg.head_activation
            };
            let mut head = ClassifierHead::new(proj, &widths, activation, cfg.head_dropout, seed)?;
            let split = random_split(profiles.len(), &spec)?;
            let out = fine_tune_classifier(&mut head, Features::Encoder(&mut enc, &profiles), &data.targets, split, &ft)?;
            let mut report = out.report;
            report.task = a.task.name().into();
            let rows: Vec<(usize, f64, f64)> = out.predictions.iter().map(|&(s, t, p)| (data.cells[s], t, p)).collect();
            if let Some(dir) = &a.out {
                create_dir(dir)?;
                Head::Classifier(head).save(&dir.join("head.bin"))?;
            }
            let classes: String = data.classes.iter().enumerate().map(|(i, c)| format!("{i},{c}\n")).collect();
            finish(
                &report,
                a.out.as_deref(),
                &[("predictions.csv", predictions_csv(&rows)), ("classes.csv", classes)],
            )
        }
        Task::CellLine => {
            let drugs = drug_rows(a.drug_features.as_deref())?;
            let pairs = read_pair_labels(&a.labels)?;
            let mut cell_hidden = cfg.head_hidden.clone();
            if !cfg.is_explicit("head_hidden") {
                cell_hidden = vec![64, 32];
            }
            let drug_width = drugs.first().map_or(0, Vec::len);
            let mut fusion = cell_hidden.clone();
            fusion.push(1);
            let mut head = RegressionHead::new(proj, &cell_hidden, drug_width, &fusion, cfg.head_dropout, seed)?;
            let split = pair_split(&pairs, &spec, a.group_by_cell)?;
            let out = fine_tune_regressor(
                &mut head,
                Features::Encoder(&mut enc, &corpus.profiles),
                &drugs,
                &pairs,
                split,
                &ft,
            )?;
            let mut report = out.report;
            report.task = a.task.name().into();
            if let Some(dir) = &a.out {
                create_dir(dir)?;
                Head::Regression(head).save(&dir.join("head.bin"))?;
            }
            finish(&report, a.out.as_deref(), &[("predictions.csv", predictions_csv(&out.predictions))])
        }
    }
}

/// Reads `sample,target,prediction` rows.
pub fn read_predictions(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("sample")) {
            continue;
        }
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: "expected `sample,target,prediction`".into(),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad());
        }
        out.push((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

/// Scores saved predictions; classification targets and predictions must be whole class indices.
pub fn eval_predictions(rows: &[(usize, f64, f64)], task: Task) -> Result<EvalReport> {
    let t: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let p: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut report = match task {
        Task::CellLine => EvalReport::regression(task.name(), &t, &p)?,
        _ => {
            let as_class = |v: &f64| {
                if *v >= 0.0 && v.fract() == 0.0 {
                    Ok(*v as usize)
                } else {
                    Err(Error::Schema(format!("`{v}` is not a class index")))
                }
            };
            let t = t.iter().map(as_class).collect::<Result<Vec<_>>>()?;
            let p = p.iter().map(as_class).collect::<Result<Vec<_>>>()?;
            let k = t.iter().chain(&p).max().map_or(0, |m| m + 1);
            EvalReport::classification(task.name(), &t, &p, k)?
        }
    };
    report.task = task.name().into();
    Ok(report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    if let Some(path) = &a.predictions {
        let task = a.task.unwrap_or(Task::Annotation);
        let report = eval_predictions(&read_predictions(path)?, task)?;
        return finish(&report, a.out.as_deref(), &[]);
    }
    let need = |v: &Option<PathBuf>, flag: &str| {
        v.clone()
            .ok_or_else(|| Error::Usage(format!("eval needs --predictions or {flag}")))
    };
    let (ckpt, data, labels, head_path) = (
        need(&a.checkpoint, "--checkpoint")?,
        need(&a.data, "--data")?,
        need(&a.labels, "--labels")?,
        need(&a.head, "--head")?,
    );
    let Prepared { cfg, enc, corpus } = prepare(&ckpt, &data, a.config.as_deref(), a.seed)?;
    let spec = split_spec(&cfg, a.split.as_deref())?;
    let bank = enc.feature_bank(0);
    let task = a.task.unwrap_or(Task::Annotation);
    let report = match (Head::load(&head_path)?, task) {
        (Head::Classifier(head), Task::Annotation | Task::DrugResponse) => {
            let data = class_data(&read_labels(&labels)?, corpus.profiles.len())?;
            if data.classes.len() != head.n_classes() {
                return Err(Error::Schema(format!(
                    "labels name {} classes, head has {}",
                    data.classes.len(),
                    head.n_classes()
                )));
            }
            let split = random_split(data.cells.len(), &spec)?;
            let mut t = Vec::new();
            let mut p = Vec::new();
            for &s in &split.test {
                let e = enc.cell_embedding(&corpus.profiles[data.cells[s]], bank.as_ref())?;
                t.push(data.targets[s]);
                p.push(head.predict(&e)?);
            }
            EvalReport::classification(task.name(), &t, &p, head.n_classes())?
        }
        (Head::Regression(head), Task::CellLine) => {
            let drugs = drug_rows(a.drug_features.as_deref())?;
            let pairs = read_pair_labels(&labels)?;
            let split = pair_split(&pairs, &spec, a.group_by_cell)?;
            let mut t = Vec::new();
            let mut p = Vec::new();
            for &s in &split.test {
                let (c, d, v) = pairs[s];
                let cell = corpus.profiles.get(c).ok_or(Error::Index {
                    what: "cell",
                    index: c,
                    len: corpus.profiles.len(),
                })?;
                let drug = drugs.get(d).ok_or(Error::Index {
                    what: "drug",
                    index: d,
                    len: drugs.len(),
                })?;
                t.push(v);
                p.push(head.regress(&enc.cell_embedding(cell, bank.as_ref())?, drug)?);
            }
            EvalReport::regression(task.name(), &t, &p)?
        }
        _ => return Err(Error::Schema(format!("head kind does not fit task `{}`", task.name()))),
    };
    finish(&report, a.out.as_deref(), &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_mapping_is_sorted_and_checked() {
        let labels = vec![(2, "T".to_string()), (0, "B".to_string()), (1, "T".to_string())];
        let d = class_data(&labels, 3).unwrap();
        assert_eq!(d.classes, vec!["B", "T"]);
        assert_eq!((d.cells, d.targets), (vec![0, 1, 2], vec![0, 1, 1]));
        assert!(matches!(class_data(&labels, 2), Err(Error::Index { .. })));
        let one = vec![(0, "B".to_string())];
        assert!(matches!(class_data(&one, 2), Err(Error::Schema(_))));
    }

    #[test]
    fn memplan_table_rows() {
        let t = memplan_table(&MemoryModel::full(), 40.0 * GB, Some(256), None).unwrap();
        let row: Vec<&str> = t.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(row[0], "256");
        let len: usize = row[1].parse().unwrap();
        assert!((45..=55).contains(&len));
        let full = memplan_table(&MemoryModel::full(), 40.0 * GB, None, None).unwrap();
        assert_eq!(full.lines().count(), 10);
    }

    #[test]
    fn prediction_eval_classification() {
        let rows = vec![(0, 1.0, 1.0), (1, 1.0, 0.0), (2, 0.0, 0.0), (3, 0.0, 0.0)];
        let r = eval_predictions(&rows, Task::Annotation).unwrap();
        assert!((r.classification.unwrap().macro_f1 - 11.0 / 15.0).abs() < 1e-15);
        assert!(eval_predictions(&[(0, 0.5, 1.0)], Task::Annotation).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["gradcell", "bogus"]), 1);
        assert_eq!(run(["gradcell", "memplan", "--budget", "0.5"]), 1);
    }
}
