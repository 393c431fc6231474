//! Trainable parameters and the deterministic forward pass: per-modality
//! user-item propagation, item-graph enhancement, fusion and scoring.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::graphs::{build_item_knn, build_norm_adjacency, propagate_item_graph, ItemItemGraph, NormAdjacency};
use crate::ingest::{FeatureMatrix, Modality, SplitDataset};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MNT1";

/// How the enhanced visual and textual embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `alpha * v + (1 - alpha) * t`, width `d`.
    #[default]
    Sum,
    /// `[alpha * v, (1 - alpha) * t]`, width `2d`.
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionMode::Sum),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Sum => "sum",
            FusionMode::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_users: usize,
    pub n_items: usize,
    pub d: usize,
    pub visual_dim: usize,
    pub textual_dim: usize,
    pub fusion: FusionMode,
}

impl ModelDims {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            FusionMode::Sum => self.d,
            FusionMode::Concat => 2 * self.d,
        }
    }
}

pub const TENSOR_NAMES: [&str; 10] = [
    "e_id",
    "e_user_visual",
    "e_user_textual",
    "w_visual",
    "b_visual",
    "w_textual",
    "b_textual",
    "alpha",
    "w_pred",
    "b_pred",
];

/// Every trainable tensor. Biases are `1 x d` and `alpha` is `1 x 1` so
/// that optimizers and serializers can treat all tensors uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub e_id: Array2<f64>,
    pub e_user_v: Array2<f64>,
    pub e_user_t: Array2<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array2<f64>,
    pub w_t: Array2<f64>,
    pub b_t: Array2<f64>,
    pub alpha: Array2<f64>,
    pub w_pred: Array2<f64>,
    pub b_pred: Array2<f64>,
}

impl Params {
    pub fn tensors(&self) -> [&Array2<f64>; 10] {
        [
            &self.e_id,
            &self.e_user_v,
            &self.e_user_t,
            &self.w_v,
            &self.b_v,
            &self.w_t,
            &self.b_t,
            &self.alpha,
            &self.w_pred,
            &self.b_pred,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 10] {
        [
            &mut self.e_id,
            &mut self.e_user_v,
            &mut self.e_user_t,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_t,
            &mut self.b_t,
            &mut self.alpha,
            &mut self.w_pred,
            &mut self.b_pred,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            e_id: z(&self.e_id),
            e_user_v: z(&self.e_user_v),
            e_user_t: z(&self.e_user_t),
            w_v: z(&self.w_v),
            b_v: z(&self.b_v),
            w_t: z(&self.w_t),
            b_t: z(&self.b_t),
            alpha: z(&self.alpha),
            w_pred: z(&self.w_pred),
            b_pred: z(&self.b_pred),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha[[0, 0]]
    }

    pub fn dims(&self) -> ModelDims {
        let d = self.e_user_v.ncols();
        ModelDims {
            n_users: self.e_user_v.nrows(),
            n_items: self.e_id.nrows() - self.e_user_v.nrows(),
            d,
            visual_dim: self.w_v.nrows(),
            textual_dim: self.w_t.nrows(),
            fusion: if self.w_pred.nrows() == 2 * d {
                FusionMode::Concat
            } else {
                FusionMode::Sum
            },
        }
    }

    /// Sum of squares of the visual and textual parameter set.
    pub fn modality_sq_norm(&self) -> f64 {
        [&self.e_user_v, &self.e_user_t, &self.w_v, &self.b_v, &self.w_t, &self.b_t]
            .iter()
            .map(|a| a.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Round every entry to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Writes an MNT1 checkpoint: magic, `u64` config hash, then per tensor
    /// `u32` name length, name bytes, `u32` rows, `u32` cols and row-major
    /// `f32` values. All integers and floats little-endian.
    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&config_hash.to_le_bytes())?;
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.nrows() as u32).to_le_bytes())?;
            w.write_all(&(t.ncols() as u32).to_le_bytes())?;
            for v in t.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, returning the stored config hash alongside.
    pub fn load(path: &Path) -> Result<(u64, Self)> {
        let mut bytes = Vec::new();
        File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "MNT1" });
        }
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_owned(),
        };
        let hash = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let mut pos = 12;
        let mut take = |n: usize| -> Result<&[u8]> {
            let out = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(out)
        };
        let mut found: Vec<Option<Array2<f64>>> = vec![None; TENSOR_NAMES.len()];
        loop {
            let Ok(len) = take(4) else { break };
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            let slot = TENSOR_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| bad(&format!("unknown tensor {name}")))?;
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(rows * cols * 4)?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            found[slot] = Some(Array2::from_shape_vec((rows, cols), vals).map_err(|_| bad("shape"))?);
        }
        let mut it = found.into_iter().zip(TENSOR_NAMES);
        let mut next = || {
            let (t, name) = it.next().unwrap();
            t.ok_or_else(|| bad(&format!("missing tensor {name}")))
        };
        let params = Params {
            e_id: next()?,
            e_user_v: next()?,
            e_user_t: next()?,
            w_v: next()?,
            b_v: next()?,
            w_t: next()?,
            b_t: next()?,
            alpha: next()?,
            w_pred: next()?,
            b_pred: next()?,
        };
        Ok((hash, params))
    }
}

/// Parameters plus Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Params,
    pub first_moment: Params,
    pub second_moment: Params,
    pub step: u64,
}

impl ModelState {
    pub fn new(params: Params) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.params.dims()
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound) as f32 as f64)
}

/// Xavier-uniform tensors, zero biases, `alpha = 0.5`.
pub fn init_parameters(dims: ModelDims, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.d;
    let fd = dims.fused_dim();
    let params = Params {
        e_id: xavier(dims.n_nodes(), d, &mut rng),
        e_user_v: xavier(dims.n_users, d, &mut rng),
        e_user_t: xavier(dims.n_users, d, &mut rng),
        w_v: xavier(dims.visual_dim, d, &mut rng),
        b_v: Array2::zeros((1, d)),
        w_t: xavier(dims.textual_dim, d, &mut rng),
        b_t: Array2::zeros((1, d)),
        alpha: Array2::from_elem((1, 1), 0.5),
        w_pred: xavier(fd, fd, &mut rng),
        b_pred: Array2::zeros((1, fd)),
    };
    ModelState::new(params)
}

/// Fixed inputs shared by every forward pass: graphs and raw features.
#[derive(Debug, Clone)]
pub struct Context {
    pub adj: NormAdjacency,
    pub visual_graph: ItemItemGraph,
    pub textual_graph: ItemItemGraph,
    pub visual: Array2<f64>,
    pub textual: Array2<f64>,
}

impl Context {
    pub fn build(
        split: &SplitDataset,
        visual: &FeatureMatrix,
        textual: &FeatureMatrix,
        knn_k: usize,
        normalize: bool,
    ) -> Result<Self> {
        ensure_dim(split.n_items, visual.n_items())?;
        ensure_dim(split.n_items, textual.n_items())?;
        Ok(Self {
            adj: build_norm_adjacency(split)?,
            visual_graph: build_item_knn(visual, knn_k, normalize)?,
            textual_graph: build_item_knn(textual, knn_k, normalize)?,
            visual: visual.to_f64(),
            textual: textual.to_f64(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.adj.n_users
    }

    pub fn n_items(&self) -> usize {
        self.adj.n_items
    }

    pub fn features(&self, m: Modality) -> &Array2<f64> {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    pub fn item_graph(&self, m: Modality) -> &ItemItemGraph {
        match m {
            Modality::Visual => &self.visual_graph,
            Modality::Textual => &self.textual_graph,
        }
    }

    pub fn dims(&self, d: usize, fusion: FusionMode) -> ModelDims {
        ModelDims {
            n_users: self.n_users(),
            n_items: self.n_items(),
            d,
            visual_dim: self.visual.ncols(),
            textual_dim: self.textual.ncols(),
            fusion,
        }
    }
}

/// Which node-input table to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Id,
    Modal(Modality),
}

/// Stacks user rows over item rows for one channel. Visual and textual item
/// rows are `features · W + b`.
pub fn modality_input(params: &Params, channel: Channel, features: Option<&Array2<f64>>) -> Result<Array2<f64>> {
    let (users, w, b) = match channel {
        Channel::Id => return Ok(params.e_id.clone()),
        Channel::Modal(Modality::Visual) => (&params.e_user_v, &params.w_v, &params.b_v),
        Channel::Modal(Modality::Textual) => (&params.e_user_t, &params.w_t, &params.b_t),
    };
    let f = features.ok_or_else(|| Error::InvalidArgument("modal channel needs features".into()))?;
    ensure_dim(w.nrows(), f.ncols())?;
    let items = f.dot(w) + b;
    Ok(concatenate(Axis(0), &[users.view(), items.view()]).expect("matching widths"))
}

/// `sum_{l=0..layers} A^l · emb`.
pub fn propagate_ui(adj: &NormAdjacency, emb: ArrayView2<'_, f64>, layers: usize) -> Result<Array2<f64>> {
    ensure_dim(adj.n_nodes(), emb.nrows())?;
    let mut acc = emb.to_owned();
    let mut cur = emb.to_owned();
    for _ in 0..layers {
        cur = adj.matrix.matmul(cur.view())?;
        acc += &cur;
    }
    Ok(acc)
}

/// Adds the item-graph signal to the item rows; users pass through.
pub fn enhance(propagated: &Array2<f64>, semantic_items: Option<&Array2<f64>>, n_users: usize) -> Result<Array2<f64>> {
    let mut out = propagated.clone();
    if let Some(sem) = semantic_items {
        ensure_dim(propagated.nrows() - n_users, sem.nrows())?;
        ensure_dim(propagated.ncols(), sem.ncols())?;
        let mut items = out.slice_mut(s![n_users.., ..]);
        items += sem;
    }
    Ok(out)
}

pub fn fuse(visual: &Array2<f64>, textual: &Array2<f64>, alpha: f64, mode: FusionMode) -> Result<Array2<f64>> {
    ensure_dim(visual.nrows(), textual.nrows())?;
    ensure_dim(visual.ncols(), textual.ncols())?;
    Ok(match mode {
        FusionMode::Sum => visual * alpha + textual * (1.0 - alpha),
        FusionMode::Concat => {
            let (a, b) = (visual * alpha, textual * (1.0 - alpha));
            concatenate(Axis(1), &[a.view(), b.view()]).expect("matching heights")
        }
    })
}

/// Dot product of a user row and an item row of the fused embedding.
pub fn score(fused: &Array2<f64>, n_users: usize, user: usize, item: usize) -> Result<f64> {
    if user >= n_users {
        return Err(Error::IndexOutOfRange { index: user, len: n_users });
    }
    let n_items = fused.nrows() - n_users;
    if item >= n_items {
        return Err(Error::IndexOutOfRange { index: item, len: n_items });
    }
    Ok(fused.row(user).dot(&fused.row(n_users + item)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardConfig {
    pub ui_layers: usize,
    pub item_layers: usize,
    pub fusion: FusionMode,
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedEmbeddings {
    pub n_users: usize,
    /// Channel inputs before propagation (needed by graph perturbation).
    pub input_v: Array2<f64>,
    pub input_t: Array2<f64>,
    pub enhanced_id: Array2<f64>,
    pub enhanced_v: Array2<f64>,
    pub enhanced_t: Array2<f64>,
    pub fused: Array2<f64>,
}

impl PropagatedEmbeddings {
    pub fn enhanced(&self, m: Modality) -> &Array2<f64> {
        match m {
            Modality::Visual => &self.enhanced_v,
            Modality::Textual => &self.enhanced_t,
        }
    }

    pub fn input(&self, m: Modality) -> &Array2<f64> {
        match m {
            Modality::Visual => &self.input_v,
            Modality::Textual => &self.input_t,
        }
    }
}

pub fn forward(params: &Params, ctx: &Context, cfg: ForwardConfig) -> Result<PropagatedEmbeddings> {
    let n_users = ctx.n_users();
    let enhanced_id = propagate_ui(&ctx.adj, params.e_id.view(), cfg.ui_layers)?;
    let modal = |m: Modality| -> Result<(Array2<f64>, Array2<f64>)> {
        let input = modality_input(params, Channel::Modal(m), Some(ctx.features(m)))?;
        let bar = propagate_ui(&ctx.adj, input.view(), cfg.ui_layers)?;
        let sem = propagate_item_graph(ctx.item_graph(m), input.slice(s![n_users.., ..]), cfg.item_layers)?;
        Ok((input.clone(), enhance(&bar, Some(&sem), n_users)?))
    };
    let (input_v, enhanced_v) = modal(Modality::Visual)?;
    let (input_t, enhanced_t) = modal(Modality::Textual)?;
    let fused = fuse(&enhanced_v, &enhanced_t, params.alpha(), cfg.fusion)?;
    Ok(PropagatedEmbeddings {
        n_users,
        input_v,
        input_t,
        enhanced_id,
        enhanced_v,
        enhanced_t,
        fused,
    })
}

/// Writes `node_type<TAB>index<TAB>v_0<TAB>...<TAB>v_{d-1}` lines.
pub fn write_embedding_tsv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, usize, ndarray::ArrayView1<'a, f64>)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (kind, idx, row) in rows {
        write!(w, "{kind}\t{idx}")?;
        for v in row {
            write!(w, "\t{}", *v as f32)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_split, RawInteractions};
    use ndarray::array;
    use proptest::prelude::*;

    fn dims() -> ModelDims {
        ModelDims {
            n_users: 3,
            n_items: 4,
            d: 5,
            visual_dim: 6,
            textual_dim: 2,
            fusion: FusionMode::Sum,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_parameters(dims(), 11);
        let b = init_parameters(dims(), 11);
        assert_eq!(a, b);
        assert_eq!(a.params.alpha(), 0.5);
        let bound = (6.0f64 / (7 + 5) as f64).sqrt();
        assert!(a.params.e_id.iter().all(|v| v.abs() <= bound));
        assert_ne!(init_parameters(dims(), 12).params, a.params);
    }

    #[test]
    fn id_input_is_the_table() {
        let st = init_parameters(dims(), 1);
        assert_eq!(modality_input(&st.params, Channel::Id, None).unwrap(), st.params.e_id);
    }

    #[test]
    fn projections_of_zero_features_are_zero() {
        let st = init_parameters(dims(), 1);
        let f = Array2::zeros((4, 6));
        let x = modality_input(&st.params, Channel::Modal(Modality::Visual), Some(&f)).unwrap();
        assert!(x.slice(s![3.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_copies_features() {
        let mut st = init_parameters(
            ModelDims {
                n_users: 1,
                n_items: 2,
                d: 2,
                visual_dim: 2,
                textual_dim: 2,
                fusion: FusionMode::Sum,
            },
            1,
        );
        st.params.w_v = Array2::eye(2);
        let f = array![[1.0, 2.0], [3.0, 4.0]];
        let x = modality_input(&st.params, Channel::Modal(Modality::Visual), Some(&f)).unwrap();
        assert_eq!(x.slice(s![1.., ..]), f);
    }

    fn one_pair_adj() -> NormAdjacency {
        let raw = RawInteractions::from_pairs([("u", "i")]);
        build_norm_adjacency(&build_split(&raw, 0).unwrap()).unwrap()
    }

    #[test]
    fn propagation_examples() {
        let adj = one_pair_adj();
        let emb = array![[1.0], [3.0]];
        assert_eq!(propagate_ui(&adj, emb.view(), 0).unwrap(), emb);
        assert_eq!(propagate_ui(&adj, emb.view(), 1).unwrap(), array![[4.0], [4.0]]);
    }

    #[test]
    fn enhance_adds_to_items_only() {
        let bar = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let sem = array![[0.5, -1.0], [1.0, 0.0]];
        let out = enhance(&bar, Some(&sem), 1).unwrap();
        assert_eq!(out, array![[1.0, 1.0], [2.5, 1.0], [4.0, 3.0]]);
        assert_eq!(enhance(&bar, None, 1).unwrap(), bar);
        assert_eq!(enhance(&bar, Some(&Array2::zeros((2, 2))), 1).unwrap(), bar);
    }

    #[test]
    fn fusion_endpoints() {
        let v = array![[1.0, 2.0]];
        let t = array![[-3.0, 5.0]];
        assert_eq!(fuse(&v, &t, 1.0, FusionMode::Sum).unwrap(), v);
        assert_eq!(fuse(&v, &t, 0.0, FusionMode::Sum).unwrap(), t);
        let m = array![[0.25, -1.0]];
        assert_eq!(fuse(&(&m * 2.0), &Array2::zeros((1, 2)), 0.5, FusionMode::Sum).unwrap(), m);
        assert_eq!(fuse(&v, &t, 0.5, FusionMode::Concat).unwrap().ncols(), 4);
    }

    #[test]
    fn score_examples() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(score(&e, 1, 0, 0).unwrap(), 0.0);
        assert_eq!(score(&e, 1, 0, 1).unwrap(), 1.0);
        assert!(matches!(score(&e, 1, 0, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let st = init_parameters(dims(), 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        st.params.save(&p, 0xfeed).unwrap();
        let (hash, back) = Params::load(&p).unwrap();
        assert_eq!(hash, 0xfeed);
        assert_eq!(back, st.params);
        assert_eq!(back.dims(), dims());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn fusion_is_convex(alpha in 0.0f64..=1.0, seed in 0u64..100) {
            let st = init_parameters(dims(), seed);
            let v = &st.params.e_id;
            let t = st.params.e_id.mapv(|x| x * -2.0 + 0.1);
            let f = fuse(v, &t, alpha, FusionMode::Sum).unwrap();
            for ((a, b), c) in v.iter().zip(t.iter()).zip(f.iter()) {
                prop_assert!(*c >= a.min(*b) - 1e-12 && *c <= a.max(*b) + 1e-12);
            }
        }

        #[test]
        fn propagation_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..100) {
            let adj = one_pair_adj();
            let st = init_parameters(ModelDims { n_users: 1, n_items: 1, d: 3, visual_dim: 1, textual_dim: 1, fusion: FusionMode::Sum }, seed);
            let x = st.params.e_id.clone();
            let y = st.params.e_id.mapv(|v| v.sin());
            let lhs = propagate_ui(&adj, (&x * a + &y * b).view(), 2).unwrap();
            let rhs = propagate_ui(&adj, x.view(), 2).unwrap() * a + propagate_ui(&adj, y.view(), 2).unwrap() * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-5);
            }
        }
    }
}
