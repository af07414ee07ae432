//! Cross-lingual word embeddings: loading fastText-format text files,
//! orthogonal Procrustes alignment from a seed dictionary, and exact
//! nearest-neighbour cosine search.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::{TokenId, Vocabulary};
use crate::exec::{self, Parallelism};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed header {header:?} in {path}")]
    MalformedHeader { path: String, header: String },
    #[error("dimension mismatch on line {line} of {path}: expected {expected} values, got {got}")]
    DimensionMismatch {
        path: String,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("seed dictionary has {got} usable pairs, need at least {need}")]
    SeedDictTooSmall { got: usize, need: usize },
    #[error("query dimension {got} does not match matrix dimension {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("zero-norm query vector")]
    ZeroNormQuery,
    #[error("all matrix rows have zero norm")]
    AllRowsZeroNorm,
}

/// One embedding row per vocabulary token, row order = token id order.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub language: String,
    pub dim: usize,
    /// Flat row-major storage, `vocab.len() * dim`.
    rows: Vec<f64>,
    /// Cached Euclidean norms, one per row.
    norms: Vec<f64>,
    vocab: Vocabulary,
    /// How many vocabulary tokens were absent from the source file and
    /// received seeded random rows.
    pub missing_tokens: usize,
}

impl EmbeddingMatrix {
    pub fn from_rows(
        language: &str,
        vocab: Vocabulary,
        dim: usize,
        rows: Vec<f64>,
        missing_tokens: usize,
    ) -> Self {
        assert_eq!(rows.len(), vocab.len() * dim, "row storage size mismatch");
        let norms = (0..vocab.len())
            .map(|i| {
                rows[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        EmbeddingMatrix {
            language: language.to_string(),
            dim,
            rows,
            norms,
            vocab,
            missing_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        &self.rows[id * self.dim..(id + 1) * self.dim]
    }

    pub fn norm(&self, id: TokenId) -> f64 {
        self.norms[id]
    }

    pub fn row_for_token(&self, token: &str) -> Option<&[f64]> {
        self.vocab.id(token).map(|id| self.row(id))
    }

    /// (token, vector) rows for writing back to a `.vec` file, in id
    /// order, excluding nothing.
    pub fn to_named_rows(&self) -> Vec<(String, Vec<f64>)> {
        (0..self.len())
            .map(|i| {
                (
                    self.vocab.token(i).unwrap().to_string(),
                    self.row(i).to_vec(),
                )
            })
            .collect()
    }
}

/// Loads a text embedding file (`count dim` header, then
/// `token v1 .. v_dim` lines) against a vocabulary.
///
/// Vocabulary tokens missing from the file get a deterministic row drawn
/// from a seeded spherical distribution; their count is recorded on the
/// returned matrix.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    language: &str,
    seed: u64,
) -> Result<EmbeddingMatrix, EmbedError> {
    let io = |e: std::io::Error| EmbedError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().ok_or_else(|| EmbedError::MalformedHeader {
        path: path.display().to_string(),
        header: String::new(),
    })?;
    let header = header.map_err(io)?;
    let mut parts = header.split_whitespace();
    let (count, dim) = match (
        parts.next().and_then(|s| s.parse::<usize>().ok()),
        parts.next().and_then(|s| s.parse::<usize>().ok()),
        parts.next(),
    ) {
        (Some(c), Some(d), None) if d > 0 => (c, d),
        _ => {
            return Err(EmbedError::MalformedHeader {
                path: path.display().to_string(),
                header,
            });
        }
    };

    let mut rows = vec![0.0f64; vocab.len() * dim];
    let mut filled = vec![false; vocab.len()];
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let token = it.next().unwrap();
        let values: Result<Vec<f64>, _> = it.map(|s| s.parse::<f64>()).collect();
        let values = values.map_err(|_| EmbedError::DimensionMismatch {
            path: path.display().to_string(),
            line: lineno + 2,
            expected: dim,
            got: 0,
        })?;
        if values.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                path: path.display().to_string(),
                line: lineno + 2,
                expected: dim,
                got: values.len(),
            });
        }
        if let Some(id) = vocab.id(token) {
            if !filled[id] {
                rows[id * dim..(id + 1) * dim].copy_from_slice(&values);
                filled[id] = true;
            }
        }
    }
    let _ = count; // informational only; files in the wild often disagree

    // Missing tokens: unit vectors from a single seeded stream, filled in
    // id order so the result is independent of file order.
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut missing = 0usize;
    for id in 0..vocab.len() {
        if !filled[id] {
            missing += 1;
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            rows[id * dim..(id + 1) * dim].copy_from_slice(&v);
        }
    }
    if missing > 0 {
        log::info!(
            "{}: {missing} vocabulary token(s) missing from file, seeded random rows used",
            path.display()
        );
    }
    Ok(EmbeddingMatrix::from_rows(
        language,
        vocab.clone(),
        dim,
        rows,
        missing,
    ))
}

/// Source and target matrices in one shared space: the source side has
/// been multiplied by the orthogonal map `W`, the target side is
/// untouched.
#[derive(Debug, Clone)]
pub struct AlignedEmbeddings {
    pub source: EmbeddingMatrix,
    pub target: EmbeddingMatrix,
    /// Row-major `dim x dim` orthogonal mapping.
    pub mapping: Vec<f64>,
    /// Set when the seed matrix was rank-deficient; alignment proceeds
    /// with the computed map regardless.
    pub rank_deficient: bool,
}

impl AlignedEmbeddings {
    /// Max-abs entry of `W^T W - I`.
    pub fn orthogonality_residual(&self) -> f64 {
        let d = self.source.dim;
        let w = DMatrix::from_row_slice(d, d, &self.mapping);
        let gram = w.transpose() * &w;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Mean cosine over the given seed pairs after alignment.
    pub fn mean_seed_cosine(&self, seed_dict: &[(String, String)]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for (s, t) in seed_dict {
            let (Some(si), Some(ti)) = (self.source.vocab().id(s), self.target.vocab().id(t))
            else {
                continue;
            };
            total += cosine(
                self.source.row(si),
                self.source.norm(si),
                self.target.row(ti),
                self.target.norm(ti),
            );
            n += 1;
        }
        if n == 0 { 0.0 } else { total / n as f64 }
    }
}

/// Orthogonal Procrustes: finds the orthogonal `W` minimizing
/// `||X W - Y||_F` over the stacked seed-pair vectors via the SVD of
/// `X^T Y`, and returns the source matrix mapped by `W`.
pub fn procrustes_align(
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    seed_dict: &[(String, String)],
) -> Result<AlignedEmbeddings, EmbedError> {
    let dim = src.dim;
    let pairs: Vec<(TokenId, TokenId)> = seed_dict
        .iter()
        .filter_map(|(s, t)| Some((src.vocab.id(s)?, tgt.vocab.id(t)?)))
        .collect();
    if pairs.len() < dim {
        return Err(EmbedError::SeedDictTooSmall {
            got: pairs.len(),
            need: dim,
        });
    }

    let x = DMatrix::from_fn(pairs.len(), dim, |r, c| src.row(pairs[r].0)[c]);
    let y = DMatrix::from_fn(pairs.len(), dim, |r, c| tgt.row(pairs[r].1)[c]);
    let m = x.transpose() * y;
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let rank_deficient = {
        let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        svd.singular_values
            .iter()
            .any(|&s| s <= max_sv * 1e-12 || max_sv == 0.0)
    };
    if rank_deficient {
        log::warn!("procrustes: seed matrix is rank-deficient; proceeding with computed map");
    }
    let w = u * v_t;

    let mut mapped = vec![0.0f64; src.len() * dim];
    for i in 0..src.len() {
        let row = src.row(i);
        for c in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += row[k] * w[(k, c)];
            }
            mapped[i * dim + c] = acc;
        }
    }
    let mut mapping = Vec::with_capacity(dim * dim);
    for r in 0..dim {
        for c in 0..dim {
            mapping.push(w[(r, c)]);
        }
    }
    Ok(AlignedEmbeddings {
        source: EmbeddingMatrix::from_rows(
            &src.language,
            src.vocab.clone(),
            dim,
            mapped,
            src.missing_tokens,
        ),
        target: tgt.clone(),
        mapping,
        rank_deficient,
    })
}

fn cosine(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Exact nearest-neighbour search: returns the row with the highest
/// cosine to `query` and that cosine. Zero-norm rows are excluded; ties
/// break toward the lowest token id.
pub fn nearest_cosine(
    query: &[f64],
    matrix: &EmbeddingMatrix,
) -> Result<(TokenId, f64), EmbedError> {
    if query.len() != matrix.dim {
        return Err(EmbedError::QueryDimension {
            expected: matrix.dim,
            got: query.len(),
        });
    }
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(EmbedError::ZeroNormQuery);
    }
    let mut best: Option<(TokenId, f64)> = None;
    for id in 0..matrix.len() {
        let rn = matrix.norm(id);
        if rn == 0.0 {
            continue;
        }
        let cos = cosine(query, qn, matrix.row(id), rn);
        match best {
            Some((_, b)) if cos <= b => {}
            _ => best = Some((id, cos)),
        }
    }
    best.ok_or(EmbedError::AllRowsZeroNorm)
}

/// Batched nearest-neighbour search, parallel over queries.
pub fn nearest_cosine_batch(
    queries: &[Vec<f64>],
    matrix: &EmbeddingMatrix,
    mode: Parallelism,
) -> Vec<Result<(TokenId, f64), EmbedError>> {
    exec::map_slice(mode, queries, |q| nearest_cosine(q, matrix))
}

/// Reads a seed dictionary: one `src<TAB>tgt` pair per line.
pub fn read_seed_dict(path: &Path) -> Result<Vec<(String, String)>, EmbedError> {
    let io = |e: std::io::Error| EmbedError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut pairs = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io)?;
        let mut it = line.split('\t');
        if let (Some(s), Some(t)) = (it.next(), it.next()) {
            let (s, t) = (s.trim(), t.trim());
            if !s.is_empty() && !t.is_empty() {
                pairs.push((s.to_string(), t.to_string()));
            }
        }
    }
    Ok(pairs)
}
