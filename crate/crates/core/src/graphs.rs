//! The normalized user-item adjacency and the frozen per-modality item-item
//! k-nearest-neighbour graphs.
//!
//! Node space for the adjacency is users first (`0..n_users`) then items
//! (`n_users..n_users + n_items`).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};
use crate::ingest::{FeatureMatrix, Modality, SplitDataset};
use crate::sparse::CsrMatrix;

pub const IIG_MAGIC: &[u8; 4] = b"IIG1";

/// Symmetric `D^-1/2 A D^-1/2` over the bipartite train graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdjacency {
    pub n_users: usize,
    pub n_items: usize,
    pub matrix: CsrMatrix,
}

impl NormAdjacency {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }
}

pub fn build_norm_adjacency(split: &SplitDataset) -> Result<NormAdjacency> {
    let (n_users, n_items) = (split.n_users, split.n_items);
    let n = n_users + n_items;
    let mut deg = vec![0usize; n];
    for &(u, i) in &split.train {
        deg[u as usize] += 1;
        deg[n_users + i as usize] += 1;
    }
    if let Some(idx) = deg.iter().position(|&d| d == 0) {
        return Err(Error::IsolatedNode(idx));
    }
    let mut triplets = Vec::with_capacity(2 * split.train.len());
    for &(u, i) in &split.train {
        let (u, i) = (u as usize, n_users + i as usize);
        let w = (1.0 / ((deg[u] * deg[i]) as f64).sqrt()) as f32;
        triplets.push((u, i, w));
        triplets.push((i, u, w));
    }
    Ok(NormAdjacency {
        n_users,
        n_items,
        matrix: CsrMatrix::from_triplets(n, n, &triplets)?,
    })
}

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    ensure_dim(a.len(), b.len())?;
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 {
        return Err(Error::ZeroVector(0));
    }
    if nb == 0.0 {
        return Err(Error::ZeroVector(1));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Frozen top-k cosine graph over one modality's raw item features.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemItemGraph {
    pub modality: Modality,
    pub k: usize,
    pub normalized: bool,
    matrix: CsrMatrix,
    transposed: CsrMatrix,
    frozen: bool,
}

impl ItemItemGraph {
    fn new(modality: Modality, k: usize, normalized: bool, matrix: CsrMatrix) -> Self {
        let transposed = matrix.transpose();
        Self {
            modality,
            k,
            normalized,
            matrix,
            transposed,
            frozen: true,
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub(crate) fn transposed(&self) -> &CsrMatrix {
        &self.transposed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn n_items(&self) -> usize {
        self.matrix.n_rows()
    }

    /// Neighbour indices of item `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.matrix.row(i).0.iter().map(|&c| c as usize).collect()
    }

    /// SHA-256 over the serialized graph.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        Sha256::digest(&buf).into()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let m = &self.matrix;
        w.write_all(IIG_MAGIC)?;
        for v in [
            self.modality.tag(),
            self.k as u32,
            self.normalized as u32,
            m.n_rows() as u32,
            m.n_cols() as u32,
            m.nnz() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &p in m.indptr() {
            w.write_all(&(p as u32).to_le_bytes())?;
        }
        for &c in m.indices() {
            w.write_all(&c.to_le_bytes())?;
        }
        for &v in m.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Writes the IIG1 cache: magic, then `u32` modality tag, k, normalize
    /// flag, rows, cols, nnz, then `indptr`, `indices` (`u32`) and weights
    /// (`f32`), all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_owned(),
        };
        if bytes.len() < 28 || &bytes[..4] != IIG_MAGIC {
            return Err(Error::BadMagic { expected: "IIG1" });
        }
        let mut words = bytes[4..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()));
        let mut next = || words.next().ok_or_else(|| bad("truncated"));
        let modality = Modality::from_tag(next()?).ok_or_else(|| bad("unknown modality tag"))?;
        let k = next()? as usize;
        let normalized = next()? != 0;
        let (rows, cols, nnz) = (next()? as usize, next()? as usize, next()? as usize);
        let expected = 28 + 4 * (rows + 1) + 8 * nnz;
        if bytes.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let indptr = (0..=rows).map(|_| next().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let indices = (0..nnz).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let values = (0..nnz).map(|_| next().map(f32::from_bits)).collect::<Result<Vec<_>>>()?;
        let matrix = CsrMatrix::from_raw(rows, cols, indptr, indices, values)?;
        Ok(Self::new(modality, k, normalized, matrix))
    }
}

/// Top-k cosine neighbours per item (self excluded, ties to the lower
/// index), binarized to 1; optionally rescaled to `D^-1/2 S D^-1/2` with `D`
/// the row sums of the binarized matrix.
pub fn build_item_knn(features: &FeatureMatrix, k: usize, normalize: bool) -> Result<ItemItemGraph> {
    if k == 0 {
        return Err(Error::InvalidArgument("knn k must be >= 1".into()));
    }
    let n = features.n_items();
    if n < 2 {
        return Err(Error::KTooLarge);
    }
    let x = features.to_f64();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(r) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroVector(r));
    }
    let mut unit = x;
    for (mut row, &nrm) in unit.rows_mut().into_iter().zip(&norms) {
        row /= nrm;
    }
    let keep = k.min(n - 1);

    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sims = unit.dot(&unit.row(i));
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let by_sim = |a: &usize, b: &usize| {
                sims[*b].total_cmp(&sims[*a]).then(a.cmp(b))
            };
            if keep < cand.len() {
                cand.select_nth_unstable_by(keep - 1, by_sim);
                cand.truncate(keep);
            }
            cand.sort_unstable();
            cand
        })
        .collect();

    let mut triplets = Vec::with_capacity(n * keep);
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            triplets.push((i, j, 1.0f32));
        }
    }
    let mut matrix = CsrMatrix::from_triplets(n, n, &triplets)?;
    if normalize {
        let deg = matrix.row_sums();
        let triplets: Vec<_> = (0..n)
            .flat_map(|i| {
                let (cols, _) = matrix.row(i);
                let deg = &deg;
                cols.iter().map(move |&j| {
                    let j = j as usize;
                    (i, j, (1.0 / (deg[i] * deg[j]).sqrt()) as f32)
                })
            })
            .collect();
        matrix = CsrMatrix::from_triplets(n, n, &triplets)?;
    }
    Ok(ItemItemGraph::new(features.modality, k, normalize, matrix))
}

/// `S^layers · item_emb`.
pub fn propagate_item_graph(
    g: &ItemItemGraph,
    item_emb: ArrayView2<'_, f64>,
    layers: usize,
) -> Result<Array2<f64>> {
    if !g.is_frozen() {
        return Err(Error::InvalidArgument("item graph must be frozen".into()));
    }
    if layers == 0 {
        return Err(Error::InvalidArgument("item graph layers must be >= 1".into()));
    }
    ensure_dim(g.n_items(), item_emb.nrows())?;
    let mut cur = g.matrix().matmul(item_emb)?;
    for _ in 1..layers {
        cur = g.matrix().matmul(cur.view())?;
    }
    Ok(cur)
}

/// Adjoint of [`propagate_item_graph`]: `(S^T)^layers · grad`.
pub(crate) fn propagate_item_graph_transposed(
    g: &ItemItemGraph,
    grad: ArrayView2<'_, f64>,
    layers: usize,
) -> Result<Array2<f64>> {
    let mut cur = g.transposed().matmul(grad)?;
    for _ in 1..layers {
        cur = g.transposed().matmul(cur.view())?;
    }
    Ok(cur)
}
