//! Deterministic synthetic data: count matrices with cell-type structure,
//! random profiles, and separable embedding sets.

use crate::autodiff::rng::tag;
use crate::autodiff::RngStream;
use crate::error::{Error, Result};
use crate::preprocess::io::{CountMatrix, ProfileCorpus};
use crate::preprocess::{normalize, sparsify, CellLabel, SparseProfile};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_types: usize,
    /// Expected number of expressed non-marker genes per cell.
    pub background_genes: f64,
    /// Marker genes per cell type.
    pub markers_per_type: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_cells: usize, n_genes: usize, n_types: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_cells,
            n_genes,
            n_types,
            background_genes: 6.0,
            markers_per_type: (n_genes / (2 * n_types.max(1))).clamp(1, 8),
            seed,
        }
    }
}

/// Counts plus the cell type of every cell (types cycle `0, 1, …`).
///
/// Each type has its own block of marker genes, expressed with high
/// probability and higher counts; every other gene is sparse background.
pub fn synthetic_counts(spec: &SyntheticSpec) -> Result<(CountMatrix, Vec<usize>)> {
    if spec.n_types == 0 || spec.n_types * spec.markers_per_type > spec.n_genes {
        return Err(Error::Config(format!(
            "{} types x {} markers do not fit in {} genes",
            spec.n_types, spec.markers_per_type, spec.n_genes
        )));
    }
    let density = (spec.background_genes / spec.n_genes as f64).min(1.0);
    let mut triplets = Vec::new();
    let mut types = Vec::with_capacity(spec.n_cells);
    for c in 0..spec.n_cells {
        let t = c % spec.n_types;
        types.push(t);
        let mut rng = RngStream::keyed(spec.seed, &[tag::SYNTH, c as u64]);
        let markers = t * spec.markers_per_type..(t + 1) * spec.markers_per_type;
        let mut any = false;
        for g in 0..spec.n_genes {
            let (p, mean) = if markers.contains(&g) { (0.8, 6.0) } else { (density, 1.5) };
            if rng.uniform() < p {
                let n = 1 + (-(1.0 - rng.uniform()).ln() * mean) as u64;
                triplets.push((c, g, n));
                any = true;
            }
        }
        if !any {
            triplets.push((c, markers.start, 1));
        }
    }
    let m = CountMatrix::from_triplets(spec.n_cells, spec.n_genes, triplets, None)?;
    Ok((m, types))
}

/// Normalized corpus; the upper half of the cell types is labeled cancer.
pub fn labeled_corpus(spec: &SyntheticSpec) -> Result<(ProfileCorpus, Vec<usize>)> {
    let (m, types) = synthetic_counts(spec)?;
    let mut corpus = ProfileCorpus::from_counts(&m)?;
    for (p, &t) in corpus.profiles.iter_mut().zip(&types) {
        p.label = if 2 * t >= spec.n_types {
            CellLabel::Cancer
        } else {
            CellLabel::Normal
        };
    }
    Ok((corpus, types))
}

/// Unlabeled cells with between 1 and `max_genes` expressed genes each.
pub fn random_profiles(n: usize, n_genes: usize, max_genes: usize, seed: u64) -> Result<Vec<SparseProfile>> {
    if n_genes == 0 || max_genes == 0 {
        return Err(Error::Config("random profiles need genes".into()));
    }
    (0..n)
        .map(|c| {
            let mut rng = RngStream::keyed(seed, &[tag::SYNTH, 1 << 32, c as u64]);
            let k = 1 + rng.below(max_genes.min(n_genes) as u64) as usize;
            let perm = rng.permutation(n_genes);
            let mut counts = vec![0u64; n_genes];
            for &g in &perm[..k] {
                counts[g] = 1 + rng.below(40);
            }
            sparsify(&normalize(&counts)?)
        })
        .collect()
}

/// `n` points in `dim` dimensions from `n_classes` well-separated Gaussian blobs.
pub fn separable_embeddings(n: usize, dim: usize, n_classes: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut centers = RngStream::keyed(seed, &[tag::SYNTH, 2 << 32]);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| centers.normal_vec(dim).into_iter().map(|v| 4.0 * v).collect())
        .collect();
    let mut rng = RngStream::keyed(seed, &[tag::SYNTH, 3 << 32]);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % n_classes;
        let noise = rng.normal_vec(dim);
        xs.push(centers[y].iter().zip(noise).map(|(c, e)| c + 0.5 * e).collect());
        ys.push(y);
    }
    (xs, ys)
}
