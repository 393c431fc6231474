//! BPR sampling, the joint objective and its exact gradient, Adam, and the
//! early-stopped training loop.

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::eval::{evaluate_embeddings, MetricSummary};
use crate::graphs::propagate_item_graph_transposed;
use crate::ingest::{Modality, SplitDataset};
use crate::model::{forward, init_parameters, propagate_ui, Context, ForwardConfig, FusionMode, ModelState, Params};
use crate::rng::{StepSeeds, Stream};
use crate::ssl::{
    alignment_backward, alignment_loss, enhancement_loss, stack_halves, unstack_halves, AlignLevels, EnhanceConfig,
    NceNegatives,
};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub embedding_dim: usize,
    /// User-item propagation layers.
    pub ui_layers: usize,
    /// Item-item propagation layers.
    pub item_layers: usize,
    pub knn_k: usize,
    pub knn_normalize: bool,
    pub fusion: FusionMode,
    /// Feature-mask dropout ratio.
    pub dropout: f64,
    pub lambda_f: f64,
    pub lambda_g: f64,
    pub lambda_align: f64,
    pub align_levels: AlignLevels,
    pub tau: f64,
    /// L2 weight on the visual/textual parameters.
    pub lambda_e: f64,
    /// Scale of the uniform noise in graph perturbation.
    pub noise_eps: f64,
    pub nce_negatives: NceNegatives,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 1000,
            batch_size: 2048,
            early_stop_patience: 20,
            embedding_dim: 64,
            ui_layers: 2,
            item_layers: 1,
            knn_k: 40,
            knn_normalize: true,
            fusion: FusionMode::Sum,
            dropout: 0.5,
            lambda_f: 1.5,
            lambda_g: 1e-3,
            lambda_align: 1.0,
            align_levels: AlignLevels::ALL,
            tau: 0.2,
            lambda_e: 1e-4,
            noise_eps: 0.1,
            nce_negatives: NceNegatives::Batch,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    /// Name of the first field outside its valid range, if any.
    pub fn invalid_field(&self) -> Option<&'static str> {
        let checks: [(&'static str, bool); 15] = [
            ("learning_rate", self.learning_rate > 0.0 && self.learning_rate.is_finite()),
            ("epochs", self.epochs >= 1),
            ("batch_size", self.batch_size >= 1),
            ("early_stop_patience", self.early_stop_patience >= 1),
            ("embedding_dim", self.embedding_dim >= 1),
            ("ui_layers", self.ui_layers >= 1 || self.lambda_g == 0.0),
            ("item_layers", self.item_layers >= 1),
            ("knn_k", self.knn_k >= 1),
            ("dropout", (0.0..1.0).contains(&self.dropout)),
            ("lambda_f", self.lambda_f >= 0.0 && self.lambda_f.is_finite()),
            ("lambda_g", self.lambda_g >= 0.0 && self.lambda_g.is_finite()),
            ("lambda_align", self.lambda_align >= 0.0 && self.lambda_align.is_finite()),
            ("tau", self.tau > 0.0 && self.tau.is_finite()),
            ("lambda_e", self.lambda_e >= 0.0 && self.lambda_e.is_finite()),
            ("noise_eps", self.noise_eps > 0.0 && self.noise_eps.is_finite()),
        ];
        checks.iter().find(|(_, ok)| !ok).map(|(k, _)| *k)
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            ui_layers: self.ui_layers,
            item_layers: self.item_layers,
            fusion: self.fusion,
        }
    }

    pub fn enhance_config(&self) -> EnhanceConfig {
        EnhanceConfig {
            lambda_f: self.lambda_f,
            lambda_g: self.lambda_g,
            tau: self.tau,
            dropout: self.dropout,
            noise_eps: self.noise_eps,
            ui_layers: self.ui_layers,
            negatives: self.nce_negatives,
        }
    }
}

/// `(user, positive, negative)` item triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleBatch {
    pub triples: Vec<(u32, u32, u32)>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct users, ascending.
    pub fn users(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.triples.iter().map(|t| t.0 as usize).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Distinct positive items, ascending.
    pub fn positive_items(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.triples.iter().map(|t| t.1 as usize).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Train pairs plus per-user sorted item lists for negative rejection.
#[derive(Debug, Clone)]
pub struct TrainIndex {
    pub n_items: usize,
    pub pairs: Vec<(u32, u32)>,
    pub seen: Vec<Vec<u32>>,
}

impl TrainIndex {
    pub fn new(split: &SplitDataset) -> Self {
        Self {
            n_items: split.n_items,
            pairs: split.train.clone(),
            seen: split.train_by_user(),
        }
    }

    pub fn interacted(&self, user: u32, item: u32) -> bool {
        self.seen[user as usize].binary_search(&item).is_ok()
    }
}

/// Uniform positives from the train pairs, rejection-sampled negatives.
pub fn sample_triples<R: Rng + ?Sized>(index: &TrainIndex, batch_size: usize, rng: &mut R) -> Result<TripleBatch> {
    if index.pairs.is_empty() {
        return Err(Error::InvalidArgument("no train interactions".into()));
    }
    let mut triples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (u, p) = index.pairs[rng.gen_range(0..index.pairs.len())];
        if index.seen[u as usize].len() >= index.n_items {
            return Err(Error::NoNegativesAvailable(u as usize));
        }
        let n = loop {
            let cand = rng.gen_range(0..index.n_items as u32);
            if !index.interacted(u, cand) {
                break cand;
            }
        };
        triples.push((u, p, n));
    }
    Ok(TripleBatch { triples })
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-ln sigmoid(pos - neg)`.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    ensure_dim(pos_scores.len(), neg_scores.len())?;
    if pos_scores.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pos_scores.iter().zip(neg_scores).map(|(p, n)| softplus(n - p)).sum();
    Ok(sum / pos_scores.len() as f64)
}

/// BPR over the fused embedding, accumulating its gradient into `grad`.
fn bpr_with_grad(fused: &Array2<f64>, n_users: usize, batch: &TripleBatch, grad: Option<&mut Array2<f64>>) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    for &(u, p, n) in &batch.triples {
        let (u, p, n) = (u as usize, n_users + p as usize, n_users + n as usize);
        let fu = fused.row(u);
        let diff = &fused.row(p) - &fused.row(n);
        let margin = fu.dot(&diff);
        loss += softplus(-margin);
        if let Some(g) = grad.as_deref_mut() {
            let c = -sigmoid(-margin) * scale;
            let fu = fu.to_owned();
            g.row_mut(u).scaled_add(c, &diff);
            g.row_mut(p).scaled_add(c, &fu);
            g.row_mut(n).scaled_add(-c, &fu);
        }
    }
    loss * scale
}

/// Per-term values of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub align_l1: f64,
    pub align_l2: f64,
    pub align_l3: f64,
    pub align_l4: f64,
    pub align_total: f64,
    pub enhance_feature: f64,
    pub enhance_graph: f64,
    pub enhance_total: f64,
    pub l2_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn fields_mut(&mut self) -> [&mut f64; 11] {
        [
            &mut self.bpr,
            &mut self.align_l1,
            &mut self.align_l2,
            &mut self.align_l3,
            &mut self.align_l4,
            &mut self.align_total,
            &mut self.enhance_feature,
            &mut self.enhance_graph,
            &mut self.enhance_total,
            &mut self.l2_reg,
            &mut self.total,
        ]
    }

    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        let mut o = *other;
        for (a, b) in self.fields_mut().into_iter().zip(o.fields_mut()) {
            *a += weight * *b;
        }
    }
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(term))
    }
}

/// Evaluates the joint objective and optionally its gradient w.r.t. every
/// parameter. `include_bpr = false` drops the ranking term, which lets the
/// self-supervised terms be checked in isolation.
pub fn evaluate_objective(
    params: &Params,
    ctx: &Context,
    batch: &TripleBatch,
    cfg: &TrainConfig,
    seeds: &StepSeeds,
    include_bpr: bool,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Params>)> {
    let emb = forward(params, ctx, cfg.forward_config())?;
    let n_users = ctx.n_users();
    let d = params.e_user_v.ncols();
    let mut out = LossBreakdown::default();
    let mut g_fused = want_grad.then(|| Array2::<f64>::zeros(emb.fused.raw_dim()));

    if include_bpr {
        out.bpr = finite("bpr", bpr_with_grad(&emb.fused, n_users, batch, g_fused.as_mut()))?;
    }

    let align_on = !cfg.align_levels.is_empty() && cfg.lambda_align != 0.0;
    let mut channel_grads = None;
    if align_on {
        let stacked;
        let fused_view = match cfg.fusion {
            FusionMode::Sum => emb.fused.view(),
            FusionMode::Concat => {
                stacked = stack_halves(emb.fused.view(), d);
                stacked.view()
            }
        };
        let args = (
            fused_view,
            emb.enhanced_id.view(),
            emb.enhanced_v.view(),
            emb.enhanced_t.view(),
            cfg.lambda_align,
            cfg.align_levels,
        );
        let a = alignment_loss(args.0, args.1, args.2, args.3, args.4, args.5)?;
        out.align_l1 = a.l1;
        out.align_l2 = a.l2;
        out.align_l3 = a.l3;
        out.align_l4 = a.l4;
        out.align_total = finite("align", a.total)?;
        if let Some(gf) = g_fused.as_mut() {
            let g = alignment_backward(args.0, args.1, args.2, args.3, args.4, args.5)?;
            match cfg.fusion {
                FusionMode::Sum => *gf += &g.fused,
                FusionMode::Concat => *gf += &unstack_halves(g.fused.view()),
            }
            channel_grads = Some((g.id, g.visual, g.textual));
        }
    }

    let (users, items) = (batch.users(), batch.positive_items());
    let (enh, enh_grads) = enhancement_loss(
        &ctx.adj,
        &emb,
        &params.w_pred,
        &params.b_pred,
        &cfg.enhance_config(),
        &users,
        &items,
        seeds,
        want_grad,
    )?;
    out.enhance_feature = finite("enhance_feature", enh.feature)?;
    out.enhance_graph = finite("enhance_graph", enh.graph)?;
    out.enhance_total = enh.total;
    out.l2_reg = finite("l2_reg", cfg.lambda_e * params.modality_sq_norm())?;
    out.total = finite("total", out.bpr + out.align_total + out.enhance_total + out.l2_reg)?;

    let Some(mut g_fused) = g_fused else {
        return Ok((out, None));
    };
    let enh_grads = enh_grads.expect("requested");
    g_fused += &enh_grads.fused;

    let mut grads = params.zeros_like();
    grads.w_pred = enh_grads.w_pred;
    grads.b_pred = enh_grads.b_pred;

    let zeros = || Array2::<f64>::zeros(emb.enhanced_v.raw_dim());
    let (g_id, mut g_v, mut g_t) = channel_grads.unwrap_or_else(|| (zeros(), zeros(), zeros()));

    // fusion
    let alpha = params.alpha();
    let d_alpha = match cfg.fusion {
        FusionMode::Sum => {
            g_v.scaled_add(alpha, &g_fused);
            g_t.scaled_add(1.0 - alpha, &g_fused);
            (&g_fused * &(&emb.enhanced_v - &emb.enhanced_t)).sum()
        }
        FusionMode::Concat => {
            let left = g_fused.slice(s![.., ..d]);
            let right = g_fused.slice(s![.., d..]);
            g_v.scaled_add(alpha, &left);
            g_t.scaled_add(1.0 - alpha, &right);
            (&left * &emb.enhanced_v).sum() - (&right * &emb.enhanced_t).sum()
        }
    };
    grads.alpha[[0, 0]] = d_alpha;

    // enhancement + propagation, back to the channel inputs
    for (m, g_m, g_extra) in [
        (Modality::Visual, &g_v, &enh_grads.input_v),
        (Modality::Textual, &g_t, &enh_grads.input_t),
    ] {
        let mut g_in = propagate_ui(&ctx.adj, g_m.view(), cfg.ui_layers)?;
        g_in += g_extra;
        let sem_back =
            propagate_item_graph_transposed(ctx.item_graph(m), g_m.slice(s![n_users.., ..]), cfg.item_layers)?;
        let mut item_part = g_in.slice_mut(s![n_users.., ..]);
        item_part += &sem_back;

        let g_users = g_in.slice(s![..n_users, ..]).to_owned();
        let g_items = g_in.slice(s![n_users.., ..]);
        let g_w = ctx.features(m).t().dot(&g_items);
        let g_b = g_items.sum_axis(Axis(0)).insert_axis(Axis(0));
        match m {
            Modality::Visual => {
                grads.e_user_v = g_users;
                grads.w_v = g_w;
                grads.b_v = g_b;
            }
            Modality::Textual => {
                grads.e_user_t = g_users;
                grads.w_t = g_w;
                grads.b_t = g_b;
            }
        }
    }
    grads.e_id = propagate_ui(&ctx.adj, g_id.view(), cfg.ui_layers)?;

    if cfg.lambda_e != 0.0 {
        let c = 2.0 * cfg.lambda_e;
        grads.e_user_v.scaled_add(c, &params.e_user_v);
        grads.e_user_t.scaled_add(c, &params.e_user_t);
        grads.w_v.scaled_add(c, &params.w_v);
        grads.b_v.scaled_add(c, &params.b_v);
        grads.w_t.scaled_add(c, &params.w_t);
        grads.b_t.scaled_add(c, &params.b_t);
    }
    Ok((out, Some(grads)))
}

pub fn total_loss(
    params: &Params,
    ctx: &Context,
    batch: &TripleBatch,
    cfg: &TrainConfig,
    seeds: &StepSeeds,
) -> Result<LossBreakdown> {
    Ok(evaluate_objective(params, ctx, batch, cfg, seeds, true, false)?.0)
}

pub fn compute_gradients(
    params: &Params,
    ctx: &Context,
    batch: &TripleBatch,
    cfg: &TrainConfig,
    seeds: &StepSeeds,
) -> Result<(LossBreakdown, Params)> {
    let (loss, grads) = evaluate_objective(params, ctx, batch, cfg, seeds, true, true)?;
    Ok((loss, grads.expect("requested")))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam step over every tensor. Parameters are rounded
/// to `f32` precision and `alpha` is clamped to `[0, 1]` afterwards. On a
/// non-finite result the state is left untouched.
pub fn adam_step(state: &mut ModelState, grads: &Params, lr: f64) -> Result<()> {
    let t = state.step + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut next = state.clone();
    next.step = t;
    let names = crate::model::TENSOR_NAMES;
    for (k, ((p, m), v)) in next
        .params
        .tensors_mut()
        .into_iter()
        .zip(next.first_moment.tensors_mut())
        .zip(next.second_moment.tensors_mut())
        .enumerate()
    {
        let g = grads.tensors()[k];
        ensure_dim(p.len(), g.len())?;
        ndarray::Zip::from(&mut *p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = (*p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32 as f64;
        });
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteUpdate(names[k]));
        }
    }
    next.params.alpha.mapv_inplace(|a| a.clamp(0.0, 1.0));
    *state = next;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// One JSON-lines record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bpr: f64,
    pub align_l1: f64,
    pub align_l2: f64,
    pub align_l3: f64,
    pub align_l4: f64,
    pub align_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub enhance_feature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub enhance_graph: Option<f64>,
    pub enhance_total: f64,
    pub l2_reg: f64,
    pub total: f64,
    #[serde(rename = "valid")]
    pub valid: MetricSummary,
    pub improved: bool,
}

impl EpochLog {
    fn new(epoch: usize, loss: &LossBreakdown, cfg: &TrainConfig, valid: MetricSummary, improved: bool) -> Self {
        Self {
            epoch,
            bpr: loss.bpr,
            align_l1: loss.align_l1,
            align_l2: loss.align_l2,
            align_l3: loss.align_l3,
            align_l4: loss.align_l4,
            align_total: loss.align_total,
            enhance_feature: (cfg.lambda_f != 0.0).then_some(loss.enhance_feature),
            enhance_graph: (cfg.lambda_g != 0.0).then_some(loss.enhance_graph),
            enhance_total: loss.enhance_total,
            l2_reg: loss.l2_reg,
            total: loss.total,
            valid,
            improved,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: Params,
    pub best_epoch: usize,
    pub best_valid: MetricSummary,
    pub epochs_run: usize,
}

/// Stream id for the run-level generator, distinct from initialization.
const RUN_STREAM: u64 = 0x0072_616e;

pub fn train_loop(cfg: &TrainConfig, split: &SplitDataset, ctx: &Context) -> Result<(TrainedModel, Vec<EpochLog>)> {
    train_loop_with(cfg, split, ctx, |_| {})
}

/// [`train_loop`] with a callback invoked after every epoch.
pub fn train_loop_with(
    cfg: &TrainConfig,
    split: &SplitDataset,
    ctx: &Context,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    if let Some(key) = cfg.invalid_field() {
        return Err(Error::InvalidArgument(format!("{key} out of range")));
    }
    if split.valid.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut state = init_parameters(ctx.dims(cfg.embedding_dim, cfg.fusion), cfg.seed);
    let index = TrainIndex::new(split);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(RUN_STREAM);
    let n_batches = split.train.len().div_ceil(cfg.batch_size);
    let exclude = split.train_by_user();
    let valid = split.valid_by_user();

    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best = (state.params.clone(), MetricSummary::default(), 0usize);
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut acc = LossBreakdown::default();
        for _ in 0..n_batches {
            let seeds = StepSeeds::draw(&mut rng);
            let batch = sample_triples(&index, cfg.batch_size, &mut seeds.stream(Stream::Negatives))?;
            let (loss, grads) = compute_gradients(&state.params, ctx, &batch, cfg, &seeds).map_err(|e| match e {
                Error::NonFiniteLoss(_) => Error::Diverged(epoch),
                other => other,
            })?;
            adam_step(&mut state, &grads, cfg.learning_rate).map_err(|e| match e {
                Error::NonFiniteUpdate(_) => Error::Diverged(epoch),
                other => other,
            })?;
            acc.accumulate(&loss, 1.0 / n_batches as f64);
        }
        let emb = forward(&state.params, ctx, cfg.forward_config())?;
        let report = evaluate_embeddings(&emb.fused, split.n_users, &exclude, &valid);
        let decision = stopper.observe(epoch, report.summary.recall20);
        let improved = decision == StopDecision::Improved;
        if improved {
            best = (state.params.clone(), report.summary, epoch);
        }
        let log = EpochLog::new(epoch, &acc, cfg, report.summary, improved);
        on_epoch(&log);
        logs.push(log);
        if decision == StopDecision::Stop {
            break;
        }
    }
    let epochs_run = logs.len();
    Ok((
        TrainedModel {
            params: best.0,
            best_valid: best.1,
            best_epoch: best.2,
            epochs_run,
        },
        logs,
    ))
}
