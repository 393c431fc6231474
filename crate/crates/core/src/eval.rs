//! Full-ranking top-K evaluation, ablation orchestration and embedding
//! export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::SplitDataset;
use crate::model::{forward, write_embedding_tsv, Context, Params};
use crate::ssl::AlignLevels;
use crate::train::{train_loop, EpochLog, TrainConfig};

/// Top-`k` item indices for each listed user. Items in `exclude[u]` are
/// never returned; ties go to the lower item index.
pub fn rank_topk(
    fused: &Array2<f64>,
    n_users: usize,
    exclude: &[Vec<u32>],
    users: &[usize],
    k: usize,
) -> Vec<Vec<u32>> {
    let n_items = fused.nrows() - n_users;
    users
        .par_iter()
        .map(|&u| {
            let user = fused.row(u);
            let mut scores: Vec<(f64, u32)> = (0..n_items)
                .map(|i| (user.dot(&fused.row(n_users + i)), i as u32))
                .collect();
            for &i in &exclude[u] {
                scores[i as usize].0 = f64::NEG_INFINITY;
            }
            let allowed = n_items - exclude[u].len();
            let keep = k.min(allowed);
            let cmp = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if keep == 0 {
                return Vec::new();
            }
            if keep < scores.len() {
                scores.select_nth_unstable_by(keep - 1, cmp);
                scores.truncate(keep);
            }
            scores.sort_unstable_by(cmp);
            scores.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

fn per_user_recall(ranked: &[u32], target: &[u32], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|i| target.contains(i)).count();
    hits as f64 / target.len() as f64
}

fn per_user_ndcg(ranked: &[u32], target: &[u32], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| target.contains(i))
        .map(|(j, _)| 1.0 / ((j + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(target.len())).map(|j| 1.0 / ((j + 2) as f64).log2()).sum();
    dcg / idcg
}

fn mean_over_nonempty(ranked: &[Vec<u32>], targets: &[Vec<u32>], f: impl Fn(&[u32], &[u32]) -> f64) -> f64 {
    let vals: Vec<f64> = ranked
        .iter()
        .zip(targets)
        .filter(|(_, t)| !t.is_empty())
        .map(|(r, t)| f(r, t))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Mean of `|topK ∩ target| / |target|`; users with empty targets are skipped.
pub fn recall_at_k(ranked: &[Vec<u32>], targets: &[Vec<u32>], k: usize) -> f64 {
    mean_over_nonempty(ranked, targets, |r, t| per_user_recall(r, t, k))
}

/// Binary-relevance NDCG with the ideal DCG truncated at `min(k, |target|)`.
pub fn ndcg_at_k(ranked: &[Vec<u32>], targets: &[Vec<u32>], k: usize) -> f64 {
    mean_over_nonempty(ranked, targets, |r, t| per_user_ndcg(r, t, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(rename = "R@10")]
    pub recall10: f64,
    #[serde(rename = "R@20")]
    pub recall20: f64,
    #[serde(rename = "N@10")]
    pub ndcg10: f64,
    #[serde(rename = "N@20")]
    pub ndcg20: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall10: f64,
    pub recall20: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub summary: MetricSummary,
    pub per_user: Vec<UserMetrics>,
}

/// Ranks every user with a non-empty target list, masking `exclude`.
pub fn evaluate_embeddings(
    fused: &Array2<f64>,
    n_users: usize,
    exclude: &[Vec<u32>],
    targets: &[Vec<u32>],
) -> MetricsReport {
    let users: Vec<usize> = (0..n_users).filter(|&u| !targets[u].is_empty()).collect();
    let ranked = rank_topk(fused, n_users, exclude, &users, 20);
    let per_user: Vec<UserMetrics> = users
        .iter()
        .zip(&ranked)
        .map(|(&u, r)| UserMetrics {
            user: u,
            recall10: per_user_recall(r, &targets[u], 10),
            recall20: per_user_recall(r, &targets[u], 20),
            ndcg10: per_user_ndcg(r, &targets[u], 10),
            ndcg20: per_user_ndcg(r, &targets[u], 20),
        })
        .collect();
    let n = per_user.len().max(1) as f64;
    let mean = |f: fn(&UserMetrics) -> f64| per_user.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        summary: MetricSummary {
            recall10: mean(|m| m.recall10),
            recall20: mean(|m| m.recall20),
            ndcg10: mean(|m| m.ndcg10),
            ndcg20: mean(|m| m.ndcg20),
        },
        per_user,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

pub fn evaluate(params: &Params, ctx: &Context, split: &SplitDataset, cfg: &TrainConfig, which: EvalSplit) -> Result<MetricsReport> {
    let emb = forward(params, ctx, cfg.forward_config())?;
    let targets = match which {
        EvalSplit::Valid => split.valid_by_user(),
        EvalSplit::Test => split.test_by_user(),
    };
    Ok(evaluate_embeddings(&emb.fused, split.n_users, &split.train_by_user(), &targets))
}

/// Ablation variants. Names follow what each variant keeps or removes:
/// `base` drops alignment, `L1`..`L3` keep the first levels, `fg` drops
/// both enhancement tasks, `f` drops feature masking, `g` drops graph
/// perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    Base,
    L1,
    L2,
    L3,
    Full,
    Fg,
    F,
    G,
}

impl AblationVariant {
    pub const ALIGNMENT: [Self; 5] = [Self::Base, Self::L1, Self::L2, Self::L3, Self::Full];
    pub const ENHANCEMENT: [Self; 4] = [Self::Fg, Self::F, Self::G, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::L1 => "L1",
            Self::L2 => "L2",
            Self::L3 => "L3",
            Self::Full => "full",
            Self::Fg => "fg",
            Self::F => "f",
            Self::G => "g",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            Self::Base => out.align_levels = AlignLevels::NONE,
            Self::L1 => out.align_levels = AlignLevels::first(1),
            Self::L2 => out.align_levels = AlignLevels::first(2),
            Self::L3 => out.align_levels = AlignLevels::first(3),
            Self::Full => {}
            Self::Fg => {
                out.lambda_f = 0.0;
                out.lambda_g = 0.0;
            }
            Self::F => out.lambda_f = 0.0,
            Self::G => out.lambda_g = 0.0,
        }
        out
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => Self::Base,
            "L1" | "l1" => Self::L1,
            "L2" | "l2" => Self::L2,
            "L3" | "l3" => Self::L3,
            "full" => Self::Full,
            "fg" => Self::Fg,
            "f" => Self::F,
            "g" => Self::G,
            other => return Err(crate::Error::InvalidArgument(format!("unknown variant {other:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub valid: MetricSummary,
    pub test: MetricSummary,
    pub log: Vec<EpochLog>,
}

/// Trains each variant from the same seeds and data.
pub fn run_ablation(
    cfg: &TrainConfig,
    variants: &[AblationVariant],
    split: &SplitDataset,
    ctx: &Context,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(crate::Error::InvalidArgument("no ablation variants given".into()));
    }
    variants
        .iter()
        .map(|&variant| {
            let vcfg = variant.apply(cfg);
            let (model, log) = train_loop(&vcfg, split, ctx)?;
            let test = evaluate(&model.params, ctx, split, &vcfg, EvalSplit::Test)?;
            Ok(AblationRow {
                variant,
                valid: model.best_valid,
                test: test.summary,
                log,
            })
        })
        .collect()
}

pub const METRICS_HEADER: &str = "variant\tR@10\tR@20\tN@10\tN@20";

pub fn write_metrics_tsv<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, MetricSummary)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for (name, m) in rows {
        writeln!(w, "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", m.recall10, m.recall20, m.ndcg10, m.ndcg20)?;
    }
    w.flush()?;
    Ok(())
}

/// Embedding tables that can be exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportTable {
    Id,
    Visual,
    Textual,
    Fused,
}

impl ExportTable {
    pub fn name(self) -> &'static str {
        match self {
            Self::Id => "id",
            Self::Visual => "visual",
            Self::Textual => "textual",
            Self::Fused => "fused",
        }
    }
}

impl std::str::FromStr for ExportTable {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "id" => Self::Id,
            "visual" | "v" => Self::Visual,
            "textual" | "t" => Self::Textual,
            "fused" => Self::Fused,
            other => return Err(crate::Error::InvalidArgument(format!("unknown embedding table {other:?}"))),
        })
    }
}

/// Seeded sample of item indices without replacement, ascending.
pub fn sample_items(n_items: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n_items {
        return (0..n_items).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n_items, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Writes `embeddings_<table>.tsv` into `dir` for a seeded item sample,
/// one row per item of the enhanced embedding. Returns the written paths.
pub fn export_embeddings(
    params: &Params,
    ctx: &Context,
    cfg: &TrainConfig,
    tables: &[ExportTable],
    dir: &Path,
    sample_size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let emb = forward(params, ctx, cfg.forward_config())?;
    let items = sample_items(ctx.n_items(), sample_size, seed);
    let n_users = ctx.n_users();
    let mut paths = Vec::new();
    for &table in tables {
        let m = match table {
            ExportTable::Id => &emb.enhanced_id,
            ExportTable::Visual => &emb.enhanced_v,
            ExportTable::Textual => &emb.enhanced_t,
            ExportTable::Fused => &emb.fused,
        };
        let path = dir.join(format!("embeddings_{}.tsv", table.name()));
        write_embedding_tsv(&path, items.iter().map(|&i| ("item", i, m.row(n_users + i))))?;
        paths.push(path);
    }
    Ok(paths)
}
