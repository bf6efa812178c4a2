//! Count normalization, sparsification and expression binning.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::CountMatrix;

/// Library size every cell is scaled to before the log transform.
pub const TARGET_SUM: f64 = 10_000.0;

/// `x_k = ln(1 + 10000 · n_k / Σ_j n_j)`; zero counts stay exactly zero.
///
/// The ratio is formed before scaling, so multiplying every count by the same
/// integer gives a bit-identical result.
pub fn normalize(counts: &[u64]) -> Result<Vec<f64>> {
    normalize_cell(counts, 0)
}

pub(crate) fn normalize_cell(counts: &[u64], cell: usize) -> Result<Vec<f64>> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(Error::EmptyCell { cell });
    }
    let total = total as f64;
    Ok(counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                (n as f64 / total * TARGET_SUM).ln_1p()
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellLabel {
    Normal,
    Cancer,
    #[default]
    Unknown,
}

impl CellLabel {
    /// Binary target for tumor/normal discrimination; `None` when unlabeled.
    pub fn target(self) -> Option<f64> {
        match self {
            CellLabel::Normal => Some(0.0),
            CellLabel::Cancer => Some(1.0),
            CellLabel::Unknown => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Some(CellLabel::Normal),
            "cancer" | "tumor" | "tumour" | "1" => Some(CellLabel::Cancer),
            "unknown" | "" => Some(CellLabel::Unknown),
            _ => None,
        }
    }
}

/// Non-zero normalized expressions of one cell: gene positions and their values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseProfile {
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub label: CellLabel,
}

impl SparseProfile {
    /// Validates that positions strictly increase, lengths agree and values are positive.
    pub fn new(positions: Vec<usize>, values: Vec<f64>, label: CellLabel) -> Result<Self> {
        if positions.len() != values.len() {
            return Err(Error::Schema(format!(
                "{} positions but {} values",
                positions.len(),
                values.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema("positions must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Schema(format!("non-positive expression value {v}")));
        }
        Ok(SparseProfile {
            positions,
            values,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn with_label(mut self, label: CellLabel) -> Self {
        self.label = label;
        self
    }

    /// Keeps the `max_len` highest values (ties broken toward lower gene index).
    pub fn truncated(&self, max_len: usize) -> SparseProfile {
        if self.len() <= max_len {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.values[b]
                .total_cmp(&self.values[a])
                .then(self.positions[a].cmp(&self.positions[b]))
        });
        let mut keep = order[..max_len].to_vec();
        keep.sort_unstable();
        SparseProfile {
            positions: keep.iter().map(|&k| self.positions[k]).collect(),
            values: keep.iter().map(|&k| self.values[k]).collect(),
            label: self.label,
        }
    }

    /// Permutes the (position, value) pairs; used to probe order equivariance.
    pub fn permuted(&self, order: &[usize]) -> PermutedProfile {
        PermutedProfile {
            positions: order.iter().map(|&k| self.positions[k]).collect(),
            values: order.iter().map(|&k| self.values[k]).collect(),
        }
    }
}

/// A profile whose token order is arbitrary (not sorted by gene).
#[derive(Clone, Debug, PartialEq)]
pub struct PermutedProfile {
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
}

/// Positions and values of the non-zero entries of a normalized vector.
pub fn sparsify(x: &[f64]) -> Result<SparseProfile> {
    let (positions, values): (Vec<usize>, Vec<f64>) = x
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| (i, v))
        .unzip();
    if positions.is_empty() {
        return Err(Error::EmptyCell { cell: 0 });
    }
    SparseProfile::new(positions, values, CellLabel::Unknown)
}

/// Inverse of [`sparsify`]: scatters values back into a length-`n_genes` vector.
pub fn densify(profile: &SparseProfile, n_genes: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n_genes];
    for (&p, &v) in profile.positions.iter().zip(&profile.values) {
        *out.get_mut(p).ok_or(Error::Index {
            what: "gene position",
            index: p,
            len: n_genes,
        })? = v;
    }
    Ok(out)
}

/// Discretization of normalized expression into embedding-table tokens.
///
/// `edges.len() + 1` expression bins come first, then the mask, CLS and pad
/// specials, so the vocabulary size is `edges.len() + 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinSpec {
    edges: Vec<f64>,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            edges: vec![1.0, 2.0, 4.0, 6.0],
        }
    }
}

impl BinSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Config("bin spec needs at least one edge".into()));
        }
        if edges.iter().any(|e| !e.is_finite() || *e <= 0.0) {
            return Err(Error::Config("bin edges must be positive and finite".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bin edges must be strictly increasing".into()));
        }
        Ok(BinSpec { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_expression_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn mask_token(&self) -> usize {
        self.n_expression_bins()
    }

    pub fn cls_token(&self) -> usize {
        self.n_expression_bins() + 1
    }

    pub fn pad_token(&self) -> usize {
        self.n_expression_bins() + 2
    }

    pub fn n_tokens(&self) -> usize {
        self.n_expression_bins() + 3
    }

    /// Token of the bin containing `value`: the number of edges `<= value`.
    pub fn bin(&self, value: f64) -> Result<usize> {
        if value.is_nan() || value <= 0.0 {
            return Err(Error::Usage(format!("cannot bin non-positive value {value}")));
        }
        Ok(self.edges.partition_point(|&e| e <= value))
    }

    pub fn tokens(&self, values: &[f64]) -> Result<Vec<usize>> {
        values.iter().map(|&v| self.bin(v)).collect()
    }

    /// Parses a comma-separated edge list such as `1,2,4,6`.
    pub fn parse(s: &str) -> Result<Self> {
        let edges = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad bin edge `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        BinSpec::new(edges)
    }

    pub fn to_edge_string(&self) -> String {
        self.edges
            .iter()
            .map(|e| format!("{e:?}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let x = normalize(&[1, 0, 3]).unwrap();
        assert!((x[0] - 2501f64.ln()).abs() < 1e-12);
        assert_eq!(x[1], 0.0);
        assert!((x[2] - 7501f64.ln()).abs() < 1e-12);
        assert!((x[0] - 7.8245).abs() < 1e-4);
        assert!((x[2] - 8.9228).abs() < 1e-4);

        let y = normalize(&[5]).unwrap();
        assert!((y[0] - 9.2104).abs() < 1e-4);

        assert!(matches!(normalize(&[0, 0]), Err(Error::EmptyCell { .. })));
    }

    #[test]
    fn sparsify_examples() {
        let p = sparsify(&[0.0, 1.5, 0.0, 2.5]).unwrap();
        assert_eq!(p.positions, vec![1, 3]);
        assert_eq!(p.values, vec![1.5, 2.5]);
        let dense = sparsify(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(dense.positions, vec![0, 1, 2]);
    }

    #[test]
    fn default_bins_have_eight_tokens() {
        let b = BinSpec::default();
        assert_eq!(b.n_expression_bins(), 5);
        assert_eq!(b.n_tokens(), 8);
        assert_eq!(b.bin(0.5).unwrap(), 0);
        assert_eq!(b.bin(1.0).unwrap(), 1);
        assert_eq!(b.bin(100.0).unwrap(), 4);
        assert!(b.bin(0.0).is_err());
        assert!(b.bin(-1.0).is_err());
    }

    #[test]
    fn bin_spec_rejects_bad_edges() {
        assert!(BinSpec::new(vec![2.0, 1.0]).is_err());
        assert!(BinSpec::new(vec![]).is_err());
        assert!(BinSpec::parse("1, 2 ,4").is_ok());
        assert!(BinSpec::parse("1,x").is_err());
    }

    #[test]
    fn truncation_keeps_highest() {
        let p = SparseProfile::new(vec![0, 3, 5, 9], vec![1.0, 4.0, 2.0, 4.0], CellLabel::Unknown)
            .unwrap();
        let t = p.truncated(2);
        assert_eq!(t.positions, vec![3, 9]);
        assert_eq!(t.values, vec![4.0, 4.0]);
        let t = p.truncated(3);
        assert_eq!(t.positions, vec![3, 5, 9]);
    }

    proptest! {
        #[test]
        fn conservation(counts in prop::collection::vec(0u64..50, 1..200)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let x = normalize(&counts).unwrap();
            let s: f64 = x.iter().map(|v| v.exp_m1()).sum();
            prop_assert!((s - TARGET_SUM).abs() / TARGET_SUM < 1e-9);
        }

        #[test]
        fn scale_invariance(counts in prop::collection::vec(0u64..1000, 1..100), c in 1u64..1000) {
            prop_assume!(counts.iter().any(|&v| v > 0));
            let scaled: Vec<u64> = counts.iter().map(|v| v * c).collect();
            prop_assert_eq!(normalize(&counts).unwrap(), normalize(&scaled).unwrap());
        }

        #[test]
        fn densify_sparsify_round_trip(counts in prop::collection::vec(0u64..5, 1..300)) {
            prop_assume!(counts.iter().any(|&v| v > 0));
            let x = normalize(&counts).unwrap();
            let p = sparsify(&x).unwrap();
            prop_assert_eq!(densify(&p, x.len()).unwrap(), x);
            let again = sparsify(&densify(&p, counts.len()).unwrap()).unwrap();
            prop_assert_eq!(again, p);
        }

        #[test]
        fn bin_is_monotone(a in 1e-6f64..20.0, b in 1e-6f64..20.0) {
            let spec = BinSpec::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spec.bin(lo).unwrap() <= spec.bin(hi).unwrap());
        }
    }
}
