//! Subcommand implementations and the run-directory layout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mentor_core::eval::{
    evaluate, export_embeddings, run_ablation, write_metrics_tsv, AblationVariant, EvalSplit, ExportTable,
};
use mentor_core::graphs::{build_item_knn, build_norm_adjacency, ItemItemGraph};
use mentor_core::ingest::{
    apply_k_core, build_split, load_features, load_interactions, write_features, FeatureMatrix, Modality,
    SplitDataset,
};
use mentor_core::model::{Context, Params};
use mentor_core::synthetic::{block_dataset, BlockSpec};
use mentor_core::train::train_loop_with;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grid;
use crate::{parse_config, CliError, Command, Common, RunConfig};

pub const SPLIT_DIR: &str = "split";
pub const FEATURES_DIR: &str = "features";
pub const GRAPHS_DIR: &str = "graphs";
pub const CHECKPOINT: &str = "model.mnt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
/// Resolved configuration of the latest `prepare` or `train`; later
/// subcommands start from it.
pub const RUN_CONF: &str = "run.conf";

/// Everything needed to repeat a subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    /// Same settings as `config`, in config-file form.
    pub config_text: String,
    pub config_hash: String,
    pub config_file: Option<PathBuf>,
    pub config_file_sha256: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub split_seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("manifest_{command}.json"))
}

fn write_manifest(command: &str, common: &Common, out: &Path, cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let config_file_sha256 = match &common.config {
        Some(p) => Some(hex(&Sha256::digest(std::fs::read(p)?))),
        None => None,
    };
    let manifest = RunManifest {
        command: command.to_owned(),
        config: cfg.clone(),
        config_text: cfg.to_text(),
        config_hash: format!("{:016x}", cfg.hash()),
        config_file: common.config.clone(),
        config_file_sha256,
        data_dir: common.data_dir.clone(),
        out_dir: out.to_path_buf(),
        seed: cfg.train.seed,
        split_seed: cfg.split_seed,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(manifest_path(out, command), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn require(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingPrerequisite(path))
    }
}

/// Defaults, or the run directory's `run.conf` when `inherit` is set, then
/// the config file, then flags.
fn resolve(common: &Common, out: &Path, inherit: bool) -> Result<RunConfig, CliError> {
    let mut base = RunConfig::default();
    let conf = out.join(RUN_CONF);
    if inherit && conf.exists() {
        base.apply_text(&std::fs::read_to_string(conf)?)?;
    }
    parse_config(base, common.config.as_deref(), &common.flags)
}

fn feature_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("{}.mmf", m.name()))
}

fn graph_path(out: &Path, m: Modality) -> PathBuf {
    out.join(GRAPHS_DIR).join(format!("{}.iig", m.name()))
}

pub fn dispatch(common: &Common, command: &Command) -> Result<(), CliError> {
    if let Command::Synthetic { data_seed } = command {
        let data = common
            .data_dir
            .clone()
            .ok_or_else(|| CliError::Usage("synthetic needs --data-dir".into()))?;
        block_dataset(BlockSpec::default(), *data_seed).write(&data)?;
        return Ok(());
    }
    if let Command::Grid { preset, limit, list: true, .. } = command {
        for c in grid::combinations(&grid::preset(preset)?).iter().take(limit.unwrap_or(usize::MAX)) {
            println!("{}", grid::describe(c));
        }
        return Ok(());
    }
    let out = common
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
    match command {
        Command::Synthetic { .. } => unreachable!("handled above"),
        Command::Prepare => prepare(common, &out),
        Command::Train => train(common, &out),
        Command::Evaluate { split, per_user } => evaluate_cmd(common, &out, split, *per_user),
        Command::Ablate { set, variants } => ablate(common, &out, set, variants),
        Command::Grid { preset, limit, workers, .. } => grid_cmd(common, &out, preset, *limit, *workers),
        Command::ExportEmbeddings { tables, sample, sample_seed } => {
            export(common, &out, tables, *sample, *sample_seed)
        }
    }
}

fn prepare(common: &Common, out: &Path) -> Result<(), CliError> {
    let data = common
        .data_dir
        .clone()
        .ok_or_else(|| CliError::Usage("prepare needs --data-dir".into()))?;
    let cfg = resolve(common, out, false)?;
    write_manifest("prepare", common, out, &cfg)?;

    let raw = load_interactions(&require(data.join("interactions.tsv"))?)?;
    let core = apply_k_core(&raw, cfg.kcore)?;
    let split = build_split(&core, cfg.split_seed)?;
    log::info!(
        "{} users, {} items; {} train / {} valid / {} test",
        split.n_users,
        split.n_items,
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    let split_dir = out.join(SPLIT_DIR);
    std::fs::create_dir_all(&split_dir)?;
    split.write(&split_dir)?;

    std::fs::create_dir_all(out.join(FEATURES_DIR))?;
    std::fs::create_dir_all(out.join(GRAPHS_DIR))?;
    for m in Modality::ALL {
        let features = load_features(&require(feature_path(&data, m))?, &split.item_map, m)?;
        write_features(&feature_path(&out.join(FEATURES_DIR), m), &features.values, split.item_map.tokens())?;
        let graph = build_item_knn(&features, cfg.train.knn_k, cfg.train.knn_normalize)?;
        graph.save(&graph_path(out, m))?;
        log::info!("{m}: {} features, item graph with {} edges", features.dim(), graph.matrix().nnz());
    }
    std::fs::write(out.join(RUN_CONF), cfg.to_text())?;
    Ok(())
}

/// Split, aligned features and graphs from `prepare`. Cached graphs built
/// with a different `k` or normalization are rebuilt.
fn load_prepared(out: &Path, cfg: &RunConfig) -> Result<(SplitDataset, Context), CliError> {
    let split_dir = out.join(SPLIT_DIR);
    require(split_dir.join("train.tsv"))?;
    let split = SplitDataset::read(&split_dir)?;
    let load = |m: Modality| -> Result<(FeatureMatrix, ItemItemGraph), CliError> {
        let f = load_features(&require(feature_path(&out.join(FEATURES_DIR), m))?, &split.item_map, m)?;
        let cached = graph_path(out, m);
        let (k, normalize) = (cfg.train.knn_k, cfg.train.knn_normalize);
        let graph = match ItemItemGraph::load(&cached) {
            Ok(g) if g.k == k && g.normalized == normalize && g.n_items() == split.n_items => g,
            _ => {
                log::warn!("rebuilding {m} item graph for k={k}");
                build_item_knn(&f, k, normalize)?
            }
        };
        Ok((f, graph))
    };
    let (visual, visual_graph) = load(Modality::Visual)?;
    let (textual, textual_graph) = load(Modality::Textual)?;
    let ctx = Context {
        adj: build_norm_adjacency(&split)?,
        visual_graph,
        textual_graph,
        visual: visual.to_f64(),
        textual: textual.to_f64(),
    };
    Ok((split, ctx))
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn train(common: &Common, out: &Path) -> Result<(), CliError> {
    let cfg = resolve(common, out, true)?;
    let (split, ctx) = load_prepared(out, &cfg)?;
    write_manifest("train", common, out, &cfg)?;
    std::fs::write(out.join(RUN_CONF), cfg.to_text())?;

    let mut log_file = jsonl_writer(&out.join(TRAIN_LOG))?;
    let mut write_err = None;
    let result = train_loop_with(&cfg.train, &split, &ctx, |entry| {
        log::info!(
            "epoch {:>4} loss {:.5} valid R@20 {:.4}{}",
            entry.epoch,
            entry.total,
            entry.valid.recall20,
            if entry.improved { " *" } else { "" }
        );
        let line = serde_json::to_string(entry).map_err(CliError::from);
        let res = line.and_then(|l| writeln!(log_file, "{l}").map_err(CliError::from));
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    });
    log_file.flush()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let (model, _) = result?;
    model.params.save(&out.join(CHECKPOINT), cfg.hash())?;
    log::info!(
        "best epoch {} of {}: valid R@10 {:.4} R@20 {:.4} N@10 {:.4} N@20 {:.4}",
        model.best_epoch,
        model.epochs_run,
        model.best_valid.recall10,
        model.best_valid.recall20,
        model.best_valid.ndcg10,
        model.best_valid.ndcg20
    );
    Ok(())
}

fn load_checkpoint(out: &Path, cfg: &RunConfig) -> Result<Params, CliError> {
    let (hash, params) = Params::load(&require(out.join(CHECKPOINT))?)?;
    if hash != cfg.hash() {
        log::warn!("checkpoint was trained with a different configuration than the resolved one");
    }
    Ok(params)
}

fn evaluate_cmd(common: &Common, out: &Path, split_name: &str, per_user: bool) -> Result<(), CliError> {
    let which = match split_name {
        "valid" => EvalSplit::Valid,
        "test" => EvalSplit::Test,
        other => return Err(CliError::Usage(format!("--split must be valid or test, got {other:?}"))),
    };
    require(out.join(CHECKPOINT))?;
    let cfg = resolve(common, out, true)?;
    let params = load_checkpoint(out, &cfg)?;
    let (split, ctx) = load_prepared(out, &cfg)?;
    write_manifest("evaluate", common, out, &cfg)?;
    let report = evaluate(&params, &ctx, &split, &cfg.train, which)?;
    write_metrics_tsv(&out.join(format!("metrics_{split_name}.tsv")), [(split_name, report.summary)])?;
    if per_user {
        let mut w = jsonl_writer(&out.join(format!("metrics_{split_name}_per_user.jsonl")))?;
        for m in &report.per_user {
            writeln!(w, "{}", serde_json::to_string(m)?)?;
        }
        w.flush()?;
    }
    let s = report.summary;
    println!(
        "{split_name}\tR@10 {:.4}\tR@20 {:.4}\tN@10 {:.4}\tN@20 {:.4}",
        s.recall10, s.recall20, s.ndcg10, s.ndcg20
    );
    Ok(())
}

pub fn ablation_variants(set: &str, explicit: &[String]) -> Result<Vec<AblationVariant>, CliError> {
    if !explicit.is_empty() {
        return explicit.iter().map(|s| Ok(s.parse::<AblationVariant>()?)).collect();
    }
    match set {
        "alignment" => Ok(AblationVariant::ALIGNMENT.to_vec()),
        "enhancement" => Ok(AblationVariant::ENHANCEMENT.to_vec()),
        "all" => {
            let mut v = AblationVariant::ALIGNMENT.to_vec();
            v.extend(AblationVariant::ENHANCEMENT.iter().filter(|x| **x != AblationVariant::Full));
            Ok(v)
        }
        other => Err(CliError::Usage(format!("unknown ablation set {other:?}"))),
    }
}

fn ablate(common: &Common, out: &Path, set: &str, explicit: &[String]) -> Result<(), CliError> {
    let variants = ablation_variants(set, explicit)?;
    let cfg = resolve(common, out, true)?;
    let (split, ctx) = load_prepared(out, &cfg)?;
    write_manifest("ablate", common, out, &cfg)?;
    let rows = run_ablation(&cfg.train, &variants, &split, &ctx)?;
    write_metrics_tsv(&out.join("ablation.tsv"), rows.iter().map(|r| (r.variant.name(), r.test)))?;
    write_metrics_tsv(&out.join("ablation_valid.tsv"), rows.iter().map(|r| (r.variant.name(), r.valid)))?;
    for row in &rows {
        let mut w = jsonl_writer(&out.join("ablation_logs").join(format!("{}.jsonl", row.variant.name())))?;
        for entry in &row.log {
            writeln!(w, "{}", serde_json::to_string(entry)?)?;
        }
        w.flush()?;
        let s = row.test;
        println!(
            "{}\tR@10 {:.4}\tR@20 {:.4}\tN@10 {:.4}\tN@20 {:.4}",
            row.variant.name(),
            s.recall10,
            s.recall20,
            s.ndcg10,
            s.ndcg20
        );
    }
    Ok(())
}

fn grid_cmd(
    common: &Common,
    out: &Path,
    preset: &str,
    limit: Option<usize>,
    workers: usize,
) -> Result<(), CliError> {
    let axes = grid::preset(preset)?;
    let mut combos = grid::combinations(&axes);
    if let Some(n) = limit {
        combos.truncate(n);
    }
    let cfg = resolve(common, out, true)?;
    let (split, ctx) = load_prepared(out, &cfg)?;
    write_manifest("grid", common, out, &cfg)?;
    let results = grid::run_grid(&cfg, &combos, workers, &split, &ctx)?;

    let mut w = BufWriter::new(File::create(out.join("grid.tsv"))?);
    let header: Vec<&str> = axes.iter().map(|a| a.key).collect();
    writeln!(w, "{}\tR@10\tR@20\tN@10\tN@20", header.join("\t"))?;
    for r in &results {
        let vals: Vec<String> = r.assignment.iter().map(|(_, v)| v.to_string()).collect();
        let s = r.valid;
        writeln!(
            w,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            vals.join("\t"),
            s.recall10,
            s.recall20,
            s.ndcg10,
            s.ndcg20
        )?;
    }
    w.flush()?;
    if let Some(b) = grid::best(&results) {
        let best = grid::apply(&cfg, &results[b].assignment)?;
        std::fs::write(out.join("grid_best.conf"), best.to_text())?;
        println!(
            "best: {} (valid R@20 {:.4})",
            grid::describe(&results[b].assignment),
            results[b].valid.recall20
        );
    }
    Ok(())
}

fn export(
    common: &Common,
    out: &Path,
    tables: &[String],
    sample: usize,
    sample_seed: Option<u64>,
) -> Result<(), CliError> {
    let tables = tables
        .iter()
        .map(|t| Ok(t.parse::<ExportTable>()?))
        .collect::<Result<Vec<_>, CliError>>()?;
    require(out.join(CHECKPOINT))?;
    let cfg = resolve(common, out, true)?;
    let params = load_checkpoint(out, &cfg)?;
    let (_, ctx) = load_prepared(out, &cfg)?;
    write_manifest("export-embeddings", common, out, &cfg)?;
    let seed = sample_seed.unwrap_or(cfg.train.seed);
    for p in export_embeddings(&params, &ctx, &cfg.train, &tables, &out.join("embeddings"), sample, seed)? {
        println!("{}", p.display());
    }
    Ok(())
}
