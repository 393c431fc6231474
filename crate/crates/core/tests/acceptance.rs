//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any required criterion fails.
//!
//! Run with `cargo test -p mentor-core --test acceptance`. Set
//! `MENTOR_REPRO_DIR` to a prepared full-size dataset directory to also run
//! the long reproduction check.

use std::path::PathBuf;
use std::time::Instant;

use mentor_core::eval::{
    evaluate, evaluate_embeddings, ndcg_at_k, rank_topk, recall_at_k, run_ablation, write_metrics_tsv,
    AblationVariant, EvalSplit, METRICS_HEADER,
};
use mentor_core::graphs::{build_item_knn, build_norm_adjacency, propagate_item_graph};
use mentor_core::ingest::{
    apply_k_core, build_split, load_features, load_interactions, FeatureMatrix, IdMap, Modality, RawInteractions,
    SplitDataset,
};
use mentor_core::model::{forward, init_parameters, propagate_ui, Context, FusionMode, Params, TENSOR_NAMES};
use mentor_core::rng::{StepSeeds, Stream};
use mentor_core::ssl::{
    dropout_mask, gaussian_moments, info_nce, moment_distance, stack_halves, AlignLevels, NceNegatives,
};
use mentor_core::synthetic::{block_dataset, gradient_fixture, BlockSpec};
use mentor_core::train::{
    bpr_loss, evaluate_objective, sample_triples, train_loop, TrainConfig, TrainIndex, TripleBatch,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. gradient exactness

const FD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const COORDS_PER_TENSOR: usize = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Signs of every per-column mean and spread difference entering the
/// alignment terms. A coordinate whose `±h` probe changes any sign straddles
/// an absolute-value kink.
fn kink_signature(params: &Params, ctx: &Context, cfg: &TrainConfig) -> Vec<i8> {
    let emb = forward(params, ctx, cfg.forward_config()).unwrap();
    let fused = match cfg.fusion {
        FusionMode::Sum => emb.fused.clone(),
        FusionMode::Concat => stack_halves(emb.fused.view(), cfg.embedding_dim),
    };
    let moms: Vec<_> = [&fused, &emb.enhanced_id, &emb.enhanced_v, &emb.enhanced_t]
        .iter()
        .map(|m| gaussian_moments(m.view()).unwrap())
        .collect();
    let mut sig = Vec::new();
    for (a, b) in [(1, 0), (1, 2), (1, 3), (0, 2), (0, 3), (2, 3)] {
        for (x, y) in moms[a].mu.iter().zip(&moms[b].mu).chain(moms[a].sigma.iter().zip(&moms[b].sigma)) {
            sig.push(if x > y { 1 } else if x < y { -1 } else { 0 });
        }
    }
    sig
}

/// Feature-mask term with the masked view held at `frozen` (the fused
/// embedding at the unperturbed point), recomputed from its definition.
fn frozen_feature_term(
    p: &Params,
    frozen: &Array2<f64>,
    ctx: &Context,
    cfg: &TrainConfig,
    batch: &TripleBatch,
    seeds: &StepSeeds,
) -> f64 {
    let fused = forward(p, ctx, cfg.forward_config()).unwrap().fused;
    let n_users = ctx.n_users();
    let items: Vec<usize> = batch.positive_items().iter().map(|i| n_users + i).collect();
    let mut rng = seeds.stream(Stream::Mask);
    let mut total = 0.0;
    for rows in [batch.users(), items] {
        let mask = dropout_mask(rows.len(), fused.ncols(), cfg.dropout, &mut rng);
        let mut cos_sum = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            let target = &frozen.row(r) * &mask.row(k);
            let pred = fused.row(r).dot(&p.w_pred) + p.b_pred.row(0);
            let (nt, np) = (target.dot(&target).sqrt(), pred.dot(&pred).sqrt());
            if nt > 0.0 && np > 0.0 {
                cos_sum += target.dot(&pred) / (nt * np);
            }
        }
        total += 1.0 - cos_sum / rows.len() as f64;
    }
    cfg.lambda_f * total
}

struct GradCase {
    name: &'static str,
    include_bpr: bool,
    cfg: TrainConfig,
}

fn gradient_cases() -> Vec<GradCase> {
    let quiet = TrainConfig {
        embedding_dim: 4,
        knn_k: 3,
        lambda_f: 0.0,
        lambda_g: 0.0,
        lambda_align: 0.0,
        lambda_e: 0.0,
        ..TrainConfig::default()
    };
    let all = TrainConfig {
        lambda_f: 1.5,
        lambda_g: 0.5,
        lambda_align: 1.0,
        lambda_e: 1e-2,
        ..quiet.clone()
    };
    vec![
        GradCase { name: "bpr", include_bpr: true, cfg: quiet.clone() },
        GradCase { name: "alignment", include_bpr: false, cfg: TrainConfig { lambda_align: 1.0, ..quiet.clone() } },
        GradCase { name: "feature-mask", include_bpr: false, cfg: TrainConfig { lambda_f: 1.5, ..quiet.clone() } },
        GradCase { name: "graph-perturb", include_bpr: false, cfg: TrainConfig { lambda_g: 0.5, ..quiet.clone() } },
        GradCase {
            name: "graph-perturb(all)",
            include_bpr: false,
            cfg: TrainConfig { lambda_g: 0.5, nce_negatives: NceNegatives::All, ..quiet.clone() },
        },
        GradCase { name: "l2", include_bpr: false, cfg: TrainConfig { lambda_e: 1e-2, ..quiet.clone() } },
        GradCase { name: "all(sum)", include_bpr: true, cfg: all.clone() },
        GradCase { name: "all(concat)", include_bpr: true, cfg: TrainConfig { fusion: FusionMode::Concat, ..all } },
    ]
}

fn gradient_case(case: &GradCase, split: &SplitDataset, ctx: &Context) -> Result<(f64, usize), String> {
    let cfg = &case.cfg;
    let mut params = init_parameters(ctx.dims(cfg.embedding_dim, cfg.fusion), 11).params;
    // move off the symmetric starting point
    params.alpha[[0, 0]] = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in [&mut params.b_v, &mut params.b_t, &mut params.b_pred] {
        t.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }
    let seeds = StepSeeds::new(17);
    let batch = sample_triples(&TrainIndex::new(split), 8, &mut seeds.stream(Stream::Negatives)).unwrap();
    // the stop-gradient branch is a constant of the differentiated objective
    let frozen = forward(&params, ctx, cfg.forward_config()).unwrap().fused;
    let rest = TrainConfig { lambda_f: 0.0, ..cfg.clone() };
    let loss = |p: &Params| {
        let others = evaluate_objective(p, ctx, &batch, &rest, &seeds, case.include_bpr, false)
            .unwrap()
            .0
            .total;
        let feature = if cfg.lambda_f != 0.0 { frozen_feature_term(p, &frozen, ctx, cfg, &batch, &seeds) } else { 0.0 };
        others + feature
    };
    let (full, _) = evaluate_objective(&params, ctx, &batch, cfg, &seeds, case.include_bpr, false).unwrap();
    check((full.total - loss(&params)).abs() < 1e-12, || {
        format!("{}: objective {} differs from oracle {}", case.name, full.total, loss(&params))
    })?;
    let (_, grads) = evaluate_objective(&params, ctx, &batch, cfg, &seeds, case.include_bpr, true).unwrap();
    let grads = grads.unwrap();
    let align_on = cfg.lambda_align != 0.0 && !cfg.align_levels.is_empty();
    let base_sig = kink_signature(&params, ctx, cfg);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..TENSOR_NAMES.len() {
        let len = params.tensors()[k].len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(&mut rng);
        let mut accepted = 0;
        for flat in coords {
            if accepted == COORDS_PER_TENSOR {
                break;
            }
            let probe = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[k].as_slice_mut().unwrap()[flat] += delta;
                p
            };
            let (plus, minus) = (probe(FD_STEP), probe(-FD_STEP));
            if align_on && (kink_signature(&plus, ctx, cfg) != base_sig || kink_signature(&minus, ctx, cfg) != base_sig) {
                continue;
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let analytic = grads.tensors()[k].as_slice().unwrap()[flat];
            let e = rel_err(analytic, numeric);
            if e >= GRAD_TOL {
                return Err(format!(
                    "{}: {}[{flat}] analytic {analytic:.9e} numeric {numeric:.9e} rel {e:.2e}",
                    case.name, TENSOR_NAMES[k]
                ));
            }
            worst = worst.max(e);
            accepted += 1;
        }
        check(accepted == COORDS_PER_TENSOR.min(len), || {
            format!("{}: only {accepted} kink-free coordinates in {}", case.name, TENSOR_NAMES[k])
        })?;
        checked += accepted;
    }
    Ok((worst, checked))
}

fn criterion_gradients() -> Outcome {
    let (split, ctx) = gradient_fixture(0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for case in gradient_cases() {
        let (w, n) = gradient_case(&case, &split, &ctx)?;
        worst = worst.max(w);
        total += n;
    }
    Ok(format!("{total} coordinates over 8 term sets, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2. oracle equivalence

fn random_split(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize) -> SplitDataset {
    let mut train = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if rng.gen_bool(0.4) {
                train.push((u as u32, i as u32));
            }
        }
    }
    // every node gets at least one edge
    for u in 0..n_users {
        train.push((u as u32, rng.gen_range(0..n_items) as u32));
    }
    for i in 0..n_items {
        train.push((rng.gen_range(0..n_users) as u32, i as u32));
    }
    train.sort_unstable();
    train.dedup();
    let users: Vec<String> = (0..n_users).map(|u| format!("u{u:02}")).collect();
    let items: Vec<String> = (0..n_items).map(|i| format!("i{i:02}")).collect();
    SplitDataset {
        n_users,
        n_items,
        train,
        valid: Vec::new(),
        test: Vec::new(),
        user_map: IdMap::from_tokens(users.iter().map(String::as_str)),
        item_map: IdMap::from_tokens(items.iter().map(String::as_str)),
    }
}

fn dense_adjacency(split: &SplitDataset) -> Array2<f64> {
    let n = split.n_users + split.n_items;
    let mut a = Array2::<f64>::zeros((n, n));
    for &(u, i) in &split.train {
        let (u, i) = (u as usize, split.n_users + i as usize);
        a[[u, i]] = 1.0;
        a[[i, u]] = 1.0;
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(r, c)| a[[r, c]] / (deg[r] * deg[c]).sqrt())
}

fn dense_power_sum(a: &Array2<f64>, x: &Array2<f64>, layers: usize, include_identity: bool) -> Array2<f64> {
    let mut acc = if include_identity { x.clone() } else { Array2::zeros(x.raw_dim()) };
    let mut cur = x.clone();
    for l in 0..layers {
        cur = a.dot(&cur);
        if include_identity || l + 1 == layers {
            acc += &cur;
        }
    }
    acc
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn brute_knn(x: &Array2<f64>, k: usize, normalize: bool) -> Array2<f64> {
    let n = x.nrows();
    let cos = |i: usize, j: usize| {
        let (a, b) = (x.row(i), x.row(j));
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    let mut s = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (cos(i, j), j)).collect();
        others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            s[[i, j]] = 1.0;
        }
    }
    if normalize {
        let deg: Vec<f64> = s.rows().into_iter().map(|r| r.sum()).collect();
        s = Array2::from_shape_fn((n, n), |(r, c)| s[[r, c]] / (deg[r] * deg[c]).sqrt());
    }
    s
}

fn brute_info_nce(v1: &Array2<f64>, v2: &Array2<f64>, tau: f64, rows: &[usize]) -> f64 {
    let unit = |m: &Array2<f64>, r: usize| {
        let row = m.row(r);
        &row / row.dot(&row).sqrt()
    };
    let mut total = 0.0;
    for &r in rows {
        let a = unit(v1, r);
        let num = (a.dot(&unit(v2, r)) / tau).exp();
        let den: f64 = rows.iter().map(|&c| (a.dot(&unit(v2, c)) / tau).exp()).sum();
        total += -(num / den).ln();
    }
    total
}

fn criterion_oracles() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..25 {
        let n_users = rng.gen_range(1..=5);
        let n_items = rng.gen_range(2..=12 - n_users);
        let split = random_split(&mut rng, n_users, n_items);
        let n = n_users + n_items;

        let adj = build_norm_adjacency(&split).map_err(|e| e.to_string())?;
        let dense = dense_adjacency(&split);
        let e = max_abs_diff(&adj.matrix.to_dense(), &dense);
        check(e < TOL, || format!("trial {trial}: adjacency diff {e:.2e}"))?;
        worst = worst.max(e);

        let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        for layers in 0..=3 {
            let got = propagate_ui(&adj, x.view(), layers).map_err(|e| e.to_string())?;
            let e = max_abs_diff(&got, &dense_power_sum(&dense, &x, layers, true));
            check(e < TOL, || format!("trial {trial}: propagate_ui L={layers} diff {e:.2e}"))?;
            worst = worst.max(e);
        }

        let feats = Array2::from_shape_fn((n_items, 4), |_| rng.gen_range(-1.0f32..1.0));
        let fm = FeatureMatrix { modality: Modality::Visual, values: feats };
        let k = rng.gen_range(1..n_items.max(2));
        for normalize in [false, true] {
            let g = build_item_knn(&fm, k, normalize).map_err(|e| e.to_string())?;
            let oracle = brute_knn(&fm.to_f64(), k.min(n_items - 1), normalize);
            let e = max_abs_diff(&g.matrix().to_dense(), &oracle);
            check(e < TOL, || format!("trial {trial}: knn k={k} norm={normalize} diff {e:.2e}"))?;
            worst = worst.max(e);
            for i in 0..n_items {
                check(g.neighbors(i).len() == k.min(n_items - 1), || format!("trial {trial}: row {i} count"))?;
            }

            let xi = Array2::from_shape_fn((n_items, 2), |_| rng.gen_range(-1.0..1.0));
            let layers = rng.gen_range(1..=3);
            let got = propagate_item_graph(&g, xi.view(), layers).map_err(|e| e.to_string())?;
            let e = max_abs_diff(&got, &dense_power_sum(&g.matrix().to_dense(), &xi, layers, false));
            check(e < TOL, || format!("trial {trial}: item propagation diff {e:.2e}"))?;
            worst = worst.max(e);
        }

        let v1 = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let v2 = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let rows: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
        if !rows.is_empty() {
            let tau = rng.gen_range(0.1..1.0);
            let got = info_nce(v1.view(), v2.view(), tau, &rows).map_err(|e| e.to_string())?;
            let e = (got - brute_info_nce(&v1, &v2, tau, &rows)).abs();
            check(e < TOL, || format!("trial {trial}: info_nce diff {e:.2e}"))?;
            worst = worst.max(e);
        }

        let pos: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let neg: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let oracle = pos.iter().zip(&neg).map(|(p, q)| -(1.0 / (1.0 + (-(p - q)).exp())).ln()).sum::<f64>() / n as f64;
        let e = (bpr_loss(&pos, &neg).map_err(|e| e.to_string())? - oracle).abs();
        check(e < TOL, || format!("trial {trial}: bpr diff {e:.2e}"))?;
        worst = worst.max(e);

        metric_oracle(&mut rng, n_users, n_items).map_err(|m| format!("trial {trial}: {m}"))?;
    }
    Ok(format!("25 random instances, max abs diff {worst:.2e}, metrics exact"))
}

fn metric_oracle(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize) -> Result<(), String> {
    let e = Array2::from_shape_fn((n_users + n_items, 3), |_| rng.gen_range(-1.0..1.0));
    let mut train = vec![Vec::new(); n_users];
    let mut test = vec![Vec::new(); n_users];
    for u in 0..n_users {
        for i in 0..n_items as u32 {
            match rng.gen_range(0..3) {
                0 => train[u].push(i),
                1 => test[u].push(i),
                _ => {}
            }
        }
    }
    let users: Vec<usize> = (0..n_users).filter(|&u| !test[u].is_empty()).collect();
    if users.is_empty() {
        return Ok(());
    }
    for k in 1..=n_items {
        let ranked = rank_topk(&e, n_users, &train, &users, k);
        let targets: Vec<Vec<u32>> = users.iter().map(|&u| test[u].clone()).collect();
        let (mut r_sum, mut n_sum) = (0.0, 0.0);
        for &u in &users {
            let mut order: Vec<(f64, usize)> = (0..n_items)
                .filter(|i| !train[u].contains(&(*i as u32)))
                .map(|i| (e.row(u).dot(&e.row(n_users + i)), i))
                .collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let top: Vec<usize> = order.iter().take(k).map(|x| x.1).collect();
            let hits = top.iter().filter(|i| test[u].contains(&(**i as u32))).count();
            r_sum += hits as f64 / test[u].len() as f64;
            let dcg: f64 = top
                .iter()
                .enumerate()
                .filter(|(_, i)| test[u].contains(&(**i as u32)))
                .map(|(j, _)| 1.0 / (j as f64 + 2.0).log2())
                .sum();
            let idcg: f64 = (0..k.min(test[u].len())).map(|j| 1.0 / (j as f64 + 2.0).log2()).sum();
            n_sum += dcg / idcg;
        }
        let m = users.len() as f64;
        check(recall_at_k(&ranked, &targets, k) == r_sum / m, || format!("recall@{k} differs"))?;
        check(ndcg_at_k(&ranked, &targets, k) == n_sum / m, || format!("ndcg@{k} differs"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 3-5. synthetic training

fn synthetic_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs: 500,
        knn_k: 5,
        seed,
        ..TrainConfig::default()
    }
}

fn synthetic(seed: u64) -> Result<(SplitDataset, Context), String> {
    let data = block_dataset(BlockSpec::default(), seed);
    let split = data.split(seed).map_err(|e| e.to_string())?;
    let ctx = data.context(&split, 5, true).map_err(|e| e.to_string())?;
    Ok((split, ctx))
}

fn criterion_overfit() -> Outcome {
    let (split, ctx) = synthetic(0)?;
    let cfg = synthetic_config(0);
    let (model, log) = train_loop(&cfg, &split, &ctx).map_err(|e| e.to_string())?;
    let r10 = model.best_valid.recall10;
    check(r10 >= 0.95, || {
        format!("best validation Recall@10 {r10:.4} < 0.95 after {} epochs", log.len())
    })?;
    Ok(format!("validation Recall@10 {r10:.4} at epoch {} ({} epochs run)", model.best_epoch, log.len()))
}

fn criterion_alignment() -> Outcome {
    let mut with = 0.0;
    let mut without = 0.0;
    for seed in 0..3 {
        let (split, ctx) = synthetic(seed)?;
        for (lambda, acc) in [(1.0, &mut with), (0.0, &mut without)] {
            let cfg = TrainConfig { lambda_align: lambda, ..synthetic_config(seed) };
            let (model, _) = train_loop(&cfg, &split, &ctx).map_err(|e| e.to_string())?;
            let emb = forward(&model.params, &ctx, cfg.forward_config()).map_err(|e| e.to_string())?;
            let v = gaussian_moments(emb.enhanced_v.view()).map_err(|e| e.to_string())?;
            let t = gaussian_moments(emb.enhanced_t.view()).map_err(|e| e.to_string())?;
            *acc += moment_distance(&v, &t).map_err(|e| e.to_string())? / 3.0;
        }
    }
    check(with < without, || format!("mean visual/textual moment distance {with:.5} (aligned) >= {without:.5} (unaligned)"))?;
    Ok(format!("mean moment distance {with:.5} aligned vs {without:.5} unaligned"))
}

fn criterion_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut full_wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let (split, ctx) = synthetic(seed)?;
        let cfg = synthetic_config(seed);
        for (set, variants) in [
            ("alignment", &AblationVariant::ALIGNMENT[..]),
            ("enhancement", &AblationVariant::ENHANCEMENT[..]),
        ] {
            let rows = run_ablation(&cfg, variants, &split, &ctx).map_err(|e| e.to_string())?;
            check(rows.len() == variants.len(), || format!("{set}: {} rows", rows.len()))?;
            for row in &rows {
                for m in [row.test.recall10, row.test.recall20, row.test.ndcg10, row.test.ndcg20] {
                    check((0.0..=1.0).contains(&m), || format!("{set}/{}: metric {m} out of range", row.variant.name()))?;
                }
                let enhancement_logged = row.log.iter().any(|l| l.enhance_feature.is_some() || l.enhance_graph.is_some());
                if row.variant == AblationVariant::Fg {
                    check(!enhancement_logged, || "fg log carries enhancement terms".into())?;
                }
            }
            let path = dir.path().join(format!("{set}_{seed}.tsv"));
            write_metrics_tsv(&path, rows.iter().map(|r| (r.variant.name(), r.test))).map_err(|e| e.to_string())?;
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            let lines: Vec<&str> = text.lines().collect();
            check(lines[0] == METRICS_HEADER && lines.len() == variants.len() + 1, || format!("{set}: bad table"))?;
            check(lines[1..].iter().all(|l| l.split('\t').count() == 5), || format!("{set}: ragged row"))?;
            if set == "alignment" {
                let valid = |v: AblationVariant| rows.iter().find(|r| r.variant == v).unwrap().valid.recall20;
                let (full, base) = (valid(AblationVariant::Full), valid(AblationVariant::Base));
                if full >= base {
                    full_wins += 1;
                }
                detail.push(format!("{full:.3}/{base:.3}"));
            }
        }
    }
    check(full_wins >= 2, || format!("full >= base validation R@20 in only {full_wins}/3 seeds ({})", detail.join(", ")))?;
    Ok(format!("both tables complete for 3 seeds; full >= base in {full_wins}/3 (full/base R@20: {})", detail.join(", ")))
}

// ---------------------------------------------------------------------------
// 6. structural invariants

fn random_raw(rng: &mut ChaCha8Rng) -> RawInteractions {
    let n_users = rng.gen_range(3..30);
    let n_items = rng.gen_range(3..30);
    let density = rng.gen_range(0.1..0.6);
    let mut pairs = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if rng.gen_bool(density) {
                pairs.push((format!("u{u}"), format!("i{i}")));
            }
        }
    }
    RawInteractions::from_pairs(pairs)
}

fn criterion_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..60 {
        let raw = random_raw(&mut rng);
        let k = rng.gen_range(1..5);
        let Ok(core) = apply_k_core(&raw, k) else { continue };
        check(apply_k_core(&core, k).ok().as_ref() == Some(&core), || format!("trial {trial}: k-core not idempotent"))?;

        let seed = rng.gen();
        let split = build_split(&core, seed).map_err(|e| e.to_string())?;
        check(split == build_split(&core, seed).unwrap(), || format!("trial {trial}: split not deterministic"))?;
        let mut all: Vec<(u32, u32)> = split.train.iter().chain(&split.valid).chain(&split.test).copied().collect();
        let n_parts = all.len();
        all.sort_unstable();
        all.dedup();
        check(all.len() == n_parts && n_parts == core.len(), || format!("trial {trial}: split is not a partition"))?;

        if let Ok(adj) = build_norm_adjacency(&split) {
            check(adj.matrix.is_symmetric(), || format!("trial {trial}: adjacency not symmetric"))?;
            check((0..adj.n_nodes()).all(|n| adj.matrix.get(n, n) == 0.0), || format!("trial {trial}: self loop"))?;
        }
    }

    // knn row counts and graphs unchanged by training
    let (split, ctx) = synthetic(1)?;
    for m in Modality::ALL {
        let g = ctx.item_graph(m);
        check((0..g.n_items()).all(|i| g.neighbors(i).len() == 5), || format!("{m}: knn row count"))?;
        check(g.is_frozen(), || format!("{m}: graph not frozen"))?;
    }
    let hashes = |c: &Context| Modality::ALL.map(|m| c.item_graph(m).content_hash());
    let before = hashes(&ctx);
    let cfg = TrainConfig { epochs: 3, ..synthetic_config(1) };
    let (model, _) = train_loop(&cfg, &split, &ctx).map_err(|e| e.to_string())?;
    check(hashes(&ctx) == before, || "item graph hash changed across epochs".into())?;

    // top-K masking and metric monotonicity on a trained model
    let emb = forward(&model.params, &ctx, cfg.forward_config()).map_err(|e| e.to_string())?;
    let train = split.train_by_user();
    let users: Vec<usize> = (0..split.n_users).collect();
    for (u, list) in users.iter().zip(rank_topk(&emb.fused, split.n_users, &train, &users, 20)) {
        check(list.iter().all(|i| !train[*u].contains(i)), || format!("user {u}: train item in top-K"))?;
    }
    let report = evaluate(&model.params, &ctx, &split, &cfg, EvalSplit::Test).map_err(|e| e.to_string())?;
    let s = report.summary;
    check(s.recall10 <= s.recall20 && s.ndcg10 <= s.ndcg20, || format!("metrics@10 > metrics@20: {s:?}"))?;
    for trial in 0..40 {
        let n_users = rng.gen_range(1..8);
        let n_items = rng.gen_range(2..40);
        let e = Array2::from_shape_fn((n_users + n_items, 3), |_| rng.gen_range(-1.0..1.0));
        let mut excl = vec![Vec::new(); n_users];
        let mut targets = vec![Vec::new(); n_users];
        for u in 0..n_users {
            for i in 0..n_items as u32 {
                match rng.gen_range(0..5) {
                    0 => excl[u].push(i),
                    1 if targets[u].len() < 10 => targets[u].push(i),
                    _ => {}
                }
            }
        }
        let s = evaluate_embeddings(&e, n_users, &excl, &targets).summary;
        check(s.recall10 <= s.recall20 && s.ndcg10 <= s.ndcg20 + 1e-12, || format!("trial {trial}: {s:?}"))?;
    }
    Ok("k-core, split, adjacency, knn, frozen hash, masking and monotonicity hold".into())
}

// ---------------------------------------------------------------------------
// 7. optional full-size reproduction

fn criterion_reproduction(dir: PathBuf) -> Outcome {
    let raw = load_interactions(&dir.join("interactions.tsv")).map_err(|e| e.to_string())?;
    let core = apply_k_core(&raw, 5).map_err(|e| e.to_string())?;
    let split = build_split(&core, 0).map_err(|e| e.to_string())?;
    let v = load_features(&dir.join("visual.mmf"), &split.item_map, Modality::Visual).map_err(|e| e.to_string())?;
    let t = load_features(&dir.join("textual.mmf"), &split.item_map, Modality::Textual).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        dropout: 0.5,
        lambda_f: 1.5,
        lambda_g: 1e-3,
        tau: 0.2,
        lambda_align: 1.0,
        align_levels: AlignLevels::ALL,
        ..TrainConfig::default()
    };
    let ctx = Context::build(&split, &v, &t, cfg.knn_k, cfg.knn_normalize).map_err(|e| e.to_string())?;
    let (model, _) = train_loop(&cfg, &split, &ctx).map_err(|e| e.to_string())?;
    let s = evaluate(&model.params, &ctx, &split, &cfg, EvalSplit::Test).map_err(|e| e.to_string())?.summary;
    check((s.recall20 - 0.1048).abs() <= 0.005 && (s.ndcg20 - 0.0450).abs() <= 0.003, || {
        format!("R@20 {:.4} N@20 {:.4}", s.recall20, s.ndcg20)
    })?;
    Ok(format!("R@20 {:.4} N@20 {:.4}", s.recall20, s.ndcg20))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 6] = [
        ("1 gradient exactness", criterion_gradients),
        ("2 oracle equivalence", criterion_oracles),
        ("3 overfit capability", criterion_overfit),
        ("4 alignment effect", criterion_alignment),
        ("5 ablation machinery", criterion_ablation),
        ("6 structural invariants", criterion_structure),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {name}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.1}s) {msg}");
            }
        }
    }
    match std::env::var_os("MENTOR_REPRO_DIR") {
        Some(dir) => match criterion_reproduction(PathBuf::from(dir)) {
            Ok(msg) => println!("criterion 7 full reproduction: PASS {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion 7 full reproduction: FAIL {msg}");
            }
        },
        None => println!("criterion 7 full reproduction: SKIP (set MENTOR_REPRO_DIR to run)"),
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
