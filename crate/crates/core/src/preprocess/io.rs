//! On-disk formats: sparse count matrices, float tables, profile corpora, label sidecars.
//!
//! Count matrix (`mtx`): optional `%` comment lines, a `n_cells n_genes nnz`
//! header, then `cell gene count` triplets, 1-indexed, one per line.
//!
//! Float table: 16-byte little-endian header `b"GCTB"`, version `u32`, rows
//! `u32`, cols `u32`, then `rows*cols` row-major `f32` values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{normalize_cell, BinSpec, SparseProfile};

pub const TABLE_MAGIC: &[u8; 4] = b"GCTB";
pub const TABLE_VERSION: u32 = 1;

/// Raw integer counts, cells by genes, stored row-compressed.
#[derive(Clone, Debug, PartialEq)]
pub struct CountMatrix {
    n_cells: usize,
    n_genes: usize,
    indptr: Vec<usize>,
    genes: Vec<usize>,
    counts: Vec<u64>,
    gene_ids: Vec<String>,
}

impl CountMatrix {
    /// Builds from `(cell, gene, count)` triplets (0-indexed); zero counts are dropped.
    ///
    /// Duplicate coordinates and cells without any non-zero count are rejected.
    pub fn from_triplets(
        n_cells: usize,
        n_genes: usize,
        mut triplets: Vec<(usize, usize, u64)>,
        gene_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        triplets.retain(|t| t.2 > 0);
        triplets.sort_unstable();
        let mut indptr = vec![0; n_cells + 1];
        let mut genes = Vec::with_capacity(triplets.len());
        let mut counts = Vec::with_capacity(triplets.len());
        for (k, &(c, g, n)) in triplets.iter().enumerate() {
            if c >= n_cells {
                return Err(Error::Index {
                    what: "cell",
                    index: c,
                    len: n_cells,
                });
            }
            if g >= n_genes {
                return Err(Error::Index {
                    what: "gene",
                    index: g,
                    len: n_genes,
                });
            }
            if k > 0 && triplets[k - 1].0 == c && triplets[k - 1].1 == g {
                return Err(Error::Schema(format!("duplicate entry for cell {c}, gene {g}")));
            }
            indptr[c + 1] += 1;
            genes.push(g);
            counts.push(n);
        }
        for c in 0..n_cells {
            if indptr[c + 1] == 0 {
                return Err(Error::EmptyCell { cell: c });
            }
            indptr[c + 1] += indptr[c];
        }
        let gene_ids = gene_ids.unwrap_or_else(|| (0..n_genes).map(|g| format!("g{g}")).collect());
        if gene_ids.len() != n_genes {
            return Err(Error::Schema(format!(
                "{} gene ids for {n_genes} genes",
                gene_ids.len()
            )));
        }
        Ok(CountMatrix {
            n_cells,
            n_genes,
            indptr,
            genes,
            counts,
            gene_ids,
        })
    }

    /// Dense cells-by-genes counts.
    pub fn from_dense(rows: &[Vec<u64>], gene_ids: Option<Vec<String>>) -> Result<Self> {
        let n_genes = rows.first().map_or(0, Vec::len);
        let mut triplets = Vec::new();
        for (c, row) in rows.iter().enumerate() {
            if row.len() != n_genes {
                return Err(Error::Schema(format!("cell {c} has {} genes, expected {n_genes}", row.len())));
            }
            triplets.extend(row.iter().enumerate().map(|(g, &n)| (c, g, n)));
        }
        CountMatrix::from_triplets(rows.len(), n_genes, triplets, gene_ids)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    /// Gene indices and counts of one cell.
    pub fn cell(&self, i: usize) -> (&[usize], &[u64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.genes[r.clone()], &self.counts[r])
    }

    pub fn dense_counts(&self, i: usize) -> Vec<u64> {
        let mut out = vec![0; self.n_genes];
        let (g, n) = self.cell(i);
        for (&g, &n) in g.iter().zip(n) {
            out[g] = n;
        }
        out
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        (0..self.n_cells).flat_map(move |c| {
            let (g, n) = self.cell(c);
            g.iter().zip(n).map(move |(&g, &n)| (c, g, n))
        })
    }

    /// Normalized sparse profile of every cell.
    pub fn profiles(&self) -> Result<Vec<SparseProfile>> {
        (0..self.n_cells)
            .map(|c| {
                let (genes, counts) = self.cell(c);
                let values = normalize_cell(counts, c)?;
                SparseProfile::new(genes.to_vec(), values, Default::default())
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountFormat {
    MatrixMarket,
    Csv,
}

impl FromStr for CountFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mtx" | "matrixmarket" | "matrix-market" => Ok(CountFormat::MatrixMarket),
            "csv" => Ok(CountFormat::Csv),
            other => Err(Error::Config(format!("unknown count format `{other}` (mtx|csv)"))),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn ingest_count_matrix(path: &Path, format: CountFormat) -> Result<CountMatrix> {
    match format {
        CountFormat::MatrixMarket => parse_mtx(open(path)?, path),
        CountFormat::Csv => parse_dense_csv(open(path)?, path),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn parse_mtx<R: BufRead>(reader: R, path: &Path) -> Result<CountMatrix> {
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    let mut last_line = 0;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        last_line = lineno;
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(path, lineno, format!("expected 3 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|_| parse_err(path, lineno, format!("{what} `{s}` is not a non-negative integer")))
        };
        match dims {
            None => {
                dims = Some((
                    num(fields[0], "cell count")? as usize,
                    num(fields[1], "gene count")? as usize,
                    num(fields[2], "entry count")? as usize,
                ));
            }
            Some((nc, ng, _)) => {
                let c = num(fields[0], "cell index")? as usize;
                let g = num(fields[1], "gene index")? as usize;
                let n = num(fields[2], "count")?;
                if c == 0 || c > nc {
                    return Err(parse_err(path, lineno, format!("cell index {c} outside 1..={nc}")));
                }
                if g == 0 || g > ng {
                    return Err(parse_err(path, lineno, format!("gene index {g} outside 1..={ng}")));
                }
                triplets.push((c - 1, g - 1, n));
            }
        }
    }
    let (nc, ng, nnz) = dims.ok_or_else(|| parse_err(path, last_line, "missing dimension header"))?;
    if triplets.len() != nnz {
        return Err(parse_err(
            path,
            last_line,
            format!("header declares {nnz} entries, found {}", triplets.len()),
        ));
    }
    CountMatrix::from_triplets(nc, ng, triplets, None)
}

/// Dense CSV: a header row of gene ids, then one row of counts per cell.
pub fn parse_dense_csv<R: Read>(reader: R, path: &Path) -> Result<CountMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| parse_err(path, line, format!("count `{s}` is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    CountMatrix::from_dense(&rows, Some(header))
}

pub fn write_mtx(path: &Path, m: &CountMatrix) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "%%MatrixMarket matrix coordinate integer general").map_err(io)?;
    writeln!(w, "{} {} {}", m.n_cells, m.n_genes, m.nnz()).map_err(io)?;
    for (c, g, n) in m.triplets() {
        writeln!(w, "{} {} {}", c + 1, g + 1, n).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Row-major `f32` table (gene embeddings, drug features).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTable {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FloatTable {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Schema(format!(
                "table {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FloatTable { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn write_table(path: &Path, t: &FloatTable) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(TABLE_MAGIC).map_err(io)?;
    w.write_all(&TABLE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(t.rows as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(t.cols as u32).to_le_bytes()).map_err(io)?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_table(path: &Path) -> Result<FloatTable> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != TABLE_MAGIC {
        return Err(Error::Schema(format!("{}: not a float table", path.display())));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != TABLE_VERSION {
        return Err(Error::Schema(format!("{}: unsupported table version {version}", path.display())));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::Schema(format!(
            "{}: header says {rows}x{cols} but payload has {} bytes",
            path.display(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FloatTable::new(rows, cols, data)
}

/// Loads precomputed gene embeddings; one row per gene, `feature_size` columns.
pub fn ingest_gene_embeddings(path: &Path, n_genes: usize, feature_size: usize) -> Result<FloatTable> {
    let t = read_table(path)?;
    if t.rows != n_genes || t.cols != feature_size {
        return Err(Error::Schema(format!(
            "gene embedding table is {}x{}, model expects {n_genes}x{feature_size}",
            t.rows, t.cols
        )));
    }
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    n_genes: usize,
    gene_ids: Vec<String>,
}

const CORPUS_FORMAT: &str = "gradcell-profiles";

/// Preprocessed cells plus the gene universe they index into.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileCorpus {
    pub n_genes: usize,
    pub gene_ids: Vec<String>,
    pub profiles: Vec<SparseProfile>,
}

impl ProfileCorpus {
    pub fn from_counts(m: &CountMatrix) -> Result<Self> {
        Ok(ProfileCorpus {
            n_genes: m.n_genes(),
            gene_ids: m.gene_ids().to_vec(),
            profiles: m.profiles()?,
        })
    }
}

/// JSON lines: a header object, then one profile object per line.
pub fn write_corpus(path: &Path, corpus: &ProfileCorpus) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: 1,
        n_genes: corpus.n_genes,
        gene_ids: corpus.gene_ids.clone(),
    };
    let json = |e: serde_json::Error| Error::Schema(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?).map_err(io)?;
    for p in &corpus.profiles {
        writeln!(w, "{}", serde_json::to_string(p).map_err(json)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<ProfileCorpus> {
    let mut lines = open(path)?.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty corpus file"))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(path, 1, e.to_string()))?;
    if header.format != CORPUS_FORMAT || header.version != 1 {
        return Err(parse_err(path, 1, "not a gradcell profile corpus"));
    }
    let mut profiles = Vec::new();
    for (k, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: SparseProfile =
            serde_json::from_str(&line).map_err(|e| parse_err(path, k + 1, e.to_string()))?;
        let p = SparseProfile::new(p.positions, p.values, p.label)
            .map_err(|e| parse_err(path, k + 1, e.to_string()))?;
        if p.positions.last().is_some_and(|&g| g >= header.n_genes) {
            return Err(parse_err(path, k + 1, "gene position beyond n_genes"));
        }
        profiles.push(p);
    }
    Ok(ProfileCorpus {
        n_genes: header.n_genes,
        gene_ids: header.gene_ids,
        profiles,
    })
}

pub fn write_bins(path: &Path, spec: &BinSpec) -> Result<()> {
    let text = format!(
        "edges={}\nn_tokens={}\nmask_token={}\ncls_token={}\npad_token={}\n",
        spec.to_edge_string(),
        spec.n_tokens(),
        spec.mask_token(),
        spec.cls_token(),
        spec.pad_token()
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_bins(path: &Path) -> Result<BinSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (k, line) in text.lines().enumerate() {
        if let Some(edges) = line.trim().strip_prefix("edges=") {
            return BinSpec::parse(edges).map_err(|e| parse_err(path, k + 1, e.to_string()));
        }
    }
    Err(parse_err(path, 0, "no `edges=` line"))
}

fn csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(open(path)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

/// `cell_index,label` rows (0-indexed cells); a non-numeric first row is a header.
pub fn read_labels(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, (line, rec)) in csv_rows(path)?.into_iter().enumerate() {
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, found {}", rec.len())));
        }
        match rec[0].parse::<usize>() {
            Ok(c) => out.push((c, rec[1].clone())),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(parse_err(path, line, format!("bad cell index `{}`", rec[0]))),
        }
    }
    Ok(out)
}

/// `cell_index,drug_index,value` rows for cell-line drug response regression.
pub fn read_pair_labels(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (i, (line, rec)) in csv_rows(path)?.into_iter().enumerate() {
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let parsed = (
            rec[0].parse::<usize>(),
            rec[1].parse::<usize>(),
            rec[2].parse::<f64>(),
        );
        match parsed {
            (Ok(c), Ok(d), Ok(v)) if v.is_finite() => out.push((c, d, v)),
            _ if i == 0 => continue,
            _ => return Err(parse_err(path, line, "expected `cell,drug,value`")),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "%%MatrixMarket matrix coordinate integer general\n% toy\n3 4 5\n1 1 2\n1 3 1\n2 2 7\n3 4 1\n3 1 3\n";

    #[test]
    fn parses_fixture() {
        let m = parse_mtx(FIXTURE.as_bytes(), Path::new("toy.mtx")).unwrap();
        assert_eq!(m.n_cells(), 3);
        assert_eq!(m.n_genes(), 4);
        assert_eq!(m.dense_counts(0), vec![2, 0, 1, 0]);
        assert_eq!(m.dense_counts(2), vec![3, 0, 0, 1]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let bad = "3 4 2\n1 1 2\n2 x 1\n";
        match parse_mtx(bad.as_bytes(), Path::new("bad.mtx")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_cell_is_rejected() {
        let text = "2 2 1\n1 1 4\n";
        assert!(matches!(
            parse_mtx(text.as_bytes(), Path::new("e.mtx")),
            Err(Error::EmptyCell { cell: 1 })
        ));
    }

    #[test]
    fn entry_count_mismatch() {
        let text = "1 2 2\n1 1 4\n";
        assert!(matches!(
            parse_mtx(text.as_bytes(), Path::new("e.mtx")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn mtx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = parse_mtx(FIXTURE.as_bytes(), Path::new("toy.mtx")).unwrap();
        let p = dir.path().join("out.mtx");
        write_mtx(&p, &m).unwrap();
        let again = ingest_count_matrix(&p, CountFormat::MatrixMarket).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn dense_csv() {
        let text = "A,B,C\n1,0,2\n0,0,5\n";
        let m = parse_dense_csv(text.as_bytes(), Path::new("x.csv")).unwrap();
        assert_eq!(m.gene_ids(), &["A", "B", "C"]);
        assert_eq!(m.dense_counts(1), vec![0, 0, 5]);
    }

    #[test]
    fn table_width_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        write_table(&p, &FloatTable::new(4, 3, vec![0.5; 12]).unwrap()).unwrap();
        assert!(ingest_gene_embeddings(&p, 4, 3).is_ok());
        assert!(matches!(ingest_gene_embeddings(&p, 4, 8), Err(Error::Schema(_))));
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw.len(), 16 + 12 * 4);
        assert_eq!(&raw[..4], TABLE_MAGIC);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = parse_mtx(FIXTURE.as_bytes(), Path::new("toy.mtx")).unwrap();
        let corpus = ProfileCorpus::from_counts(&m).unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus(&p, &corpus).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), corpus);
    }

    #[test]
    fn labels_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        std::fs::write(&p, "cell,label\n0,T\n2,B\n").unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![(0, "T".into()), (2, "B".into())]);
        std::fs::write(&p, "0,1,2.5\n1,0,-1\n").unwrap();
        assert_eq!(read_pair_labels(&p).unwrap(), vec![(0, 1, 2.5), (1, 0, -1.0)]);
    }
}
