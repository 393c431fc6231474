//! Seeded block-structured dataset used by tests, the acceptance suite and
//! the CLI smoke run.
//!
//! Users and items are split into two halves. Each user interacts only with
//! items of its own half, and every feature row is the one-hot block
//! indicator plus Gaussian noise.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ingest::{build_split, write_features, write_interactions, FeatureMatrix, Modality, RawInteractions, SplitDataset};
use crate::model::Context;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const VISUAL_FILE: &str = "visual.mmf";
pub const TEXTUAL_FILE: &str = "textual.mmf";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Interactions per user, all inside the user's block.
    pub per_user: usize,
    pub noise: f64,
    /// Extra pure-noise columns appended to the textual features.
    pub textual_extra: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            n_users: 20,
            n_items: 30,
            per_user: 12,
            noise: 0.1,
            textual_extra: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockDataset {
    pub raw: RawInteractions,
    /// Item tokens, row `r` of both feature tables belongs to `item_tokens[r]`.
    pub item_tokens: Vec<String>,
    pub visual: Array2<f32>,
    pub textual: Array2<f32>,
}

fn user_token(u: usize) -> String {
    format!("u{u:03}")
}

fn item_token(i: usize) -> String {
    format!("i{i:03}")
}

pub fn block_of(index: usize, count: usize) -> usize {
    usize::from(index >= count / 2)
}

pub fn block_dataset(spec: BlockSpec, seed: u64) -> BlockDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = spec.n_items / 2;
    let mut pairs = Vec::new();
    for u in 0..spec.n_users {
        let b = block_of(u, spec.n_users);
        let mut block: Vec<usize> = if b == 0 { (0..half).collect() } else { (half..spec.n_items).collect() };
        block.shuffle(&mut rng);
        block.truncate(spec.per_user);
        block.sort_unstable();
        pairs.extend(block.into_iter().map(|i| (user_token(u), item_token(i))));
    }
    let noise = Normal::new(0.0, spec.noise).expect("finite noise scale");
    let mut table = |extra: usize| {
        Array2::from_shape_fn((spec.n_items, 2 + extra), |(i, c)| {
            let indicator = if c == block_of(i, spec.n_items) { 1.0 } else { 0.0 };
            (indicator + noise.sample(&mut rng)) as f32
        })
    };
    let visual = table(0);
    let textual = table(spec.textual_extra);
    BlockDataset {
        raw: RawInteractions::from_pairs(pairs),
        item_tokens: (0..spec.n_items).map(item_token).collect(),
        visual,
        textual,
    }
}

impl BlockDataset {
    /// Writes `interactions.tsv`, `visual.mmf` and `textual.mmf` (with sidecars).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_interactions(&dir.join(INTERACTIONS_FILE), &self.raw)?;
        write_features(&dir.join(VISUAL_FILE), &self.visual, &self.item_tokens)?;
        write_features(&dir.join(TEXTUAL_FILE), &self.textual, &self.item_tokens)?;
        Ok(())
    }

    pub fn split(&self, seed: u64) -> Result<SplitDataset> {
        build_split(&self.raw, seed)
    }

    /// Feature table reordered to the split's item indices.
    pub fn features(&self, split: &SplitDataset, m: Modality) -> FeatureMatrix {
        let src = match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        };
        let mut values = Array2::zeros((split.n_items, src.ncols()));
        for (row, tok) in self.item_tokens.iter().enumerate() {
            if let Some(idx) = split.item_map.get(tok) {
                values.row_mut(idx).assign(&src.row(row));
            }
        }
        FeatureMatrix { modality: m, values }
    }

    pub fn context(&self, split: &SplitDataset, knn_k: usize, normalize: bool) -> Result<Context> {
        Context::build(
            split,
            &self.features(split, Modality::Visual),
            &self.features(split, Modality::Textual),
            knn_k,
            normalize,
        )
    }
}

/// Five users, eight items, every item covered, all interactions in train.
/// Small enough for finite-difference checks.
pub fn gradient_fixture(seed: u64) -> Result<(SplitDataset, Context)> {
    let spec = BlockSpec {
        n_users: 5,
        n_items: 8,
        per_user: 4,
        ..BlockSpec::default()
    };
    let data = block_dataset(spec, seed);
    let split = data.split(seed)?;
    let ctx = data.context(&split, 3, true)?;
    Ok((split, ctx))
}
