//! Multilevel moment-matching alignment and the two enhancement losses
//! (feature masking and graph perturbation), each with its analytic
//! backward pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::graphs::NormAdjacency;
use crate::ingest::Modality;
use crate::model::{propagate_ui, PropagatedEmbeddings};
use crate::rng::{StepSeeds, Stream};

/// Added to the variance before the square root.
pub const STD_EPS: f64 = 1e-12;

/// Column-wise mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

pub fn gaussian_moments(m: ArrayView2<'_, f64>) -> Result<GaussianMoments> {
    let n = m.nrows();
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mu = m.mean_axis(Axis(0)).expect("non-empty");
    let centered = &m - &mu;
    let var = centered.mapv(|x| x * x).sum_axis(Axis(0)) / n as f64;
    let sigma = var.mapv(|v| (v + STD_EPS).sqrt());
    Ok(GaussianMoments { mu, sigma })
}

/// `mean|mu_a - mu_b| + mean|sigma_a - sigma_b|`.
pub fn moment_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    ensure_dim(a.mu.len(), b.mu.len())?;
    let d = a.mu.len() as f64;
    let mu: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).abs()).sum();
    let sigma: f64 = a.sigma.iter().zip(&b.sigma).map(|(x, y)| (x - y).abs()).sum();
    Ok(mu / d + sigma / d)
}

/// Subset of the four alignment levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignLevels {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
    pub l4: bool,
}

impl AlignLevels {
    pub const ALL: Self = Self { l1: true, l2: true, l3: true, l4: true };
    pub const NONE: Self = Self { l1: false, l2: false, l3: false, l4: false };

    /// The first `n` levels.
    pub fn first(n: usize) -> Self {
        Self { l1: n >= 1, l2: n >= 2, l3: n >= 3, l4: n >= 4 }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }
}

impl std::fmt::Display for AlignLevels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = [(self.l1, "L1"), (self.l2, "L2"), (self.l3, "L3"), (self.l4, "L4")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl std::str::FromStr for AlignLevels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Self::NONE;
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(out);
        }
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        for part in s.split(',') {
            match part.trim().to_ascii_uppercase().as_str() {
                "L1" => out.l1 = true,
                "L2" => out.l2 = true,
                "L3" => out.l3 = true,
                "L4" => out.l4 = true,
                other => return Err(Error::InvalidArgument(format!("unknown alignment level {other:?}"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentLoss {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

/// Gradients of the alignment total w.r.t. its four inputs.
#[derive(Debug, Clone)]
pub struct AlignmentGrads {
    pub fused: Array2<f64>,
    pub id: Array2<f64>,
    pub visual: Array2<f64>,
    pub textual: Array2<f64>,
}

const FUSED: usize = 0;
const ID: usize = 1;
const VIS: usize = 2;
const TXT: usize = 3;

/// (level, a, b) pairs making up each level.
const PAIRS: [(usize, usize, usize); 6] = [
    (1, ID, FUSED),
    (2, ID, VIS),
    (2, ID, TXT),
    (3, FUSED, VIS),
    (3, FUSED, TXT),
    (4, VIS, TXT),
];

fn level_on(levels: AlignLevels, level: usize) -> bool {
    match level {
        1 => levels.l1,
        2 => levels.l2,
        3 => levels.l3,
        _ => levels.l4,
    }
}

/// Moments are per column, so only the widths must agree.
fn check_shapes(mats: &[ArrayView2<'_, f64>; 4]) -> Result<()> {
    for m in &mats[1..] {
        ensure_dim(mats[0].ncols(), m.ncols())?;
    }
    Ok(())
}

pub fn alignment_loss(
    fused: ArrayView2<'_, f64>,
    id: ArrayView2<'_, f64>,
    visual: ArrayView2<'_, f64>,
    textual: ArrayView2<'_, f64>,
    lambda: f64,
    levels: AlignLevels,
) -> Result<AlignmentLoss> {
    let mats = [fused, id, visual, textual];
    check_shapes(&mats)?;
    let mut out = AlignmentLoss::default();
    if levels.is_empty() {
        return Ok(out);
    }
    let moments = mats.iter().map(|m| gaussian_moments(m.view())).collect::<Result<Vec<_>>>()?;
    for &(level, a, b) in &PAIRS {
        if !level_on(levels, level) {
            continue;
        }
        let dist = moment_distance(&moments[a], &moments[b])?;
        match level {
            1 => out.l1 += dist,
            2 => out.l2 += dist,
            3 => out.l3 += dist,
            _ => out.l4 += dist,
        }
    }
    out.total = lambda * (out.l1 + out.l2 + out.l3 + out.l4);
    Ok(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `alignment_loss(..).total`. The subgradient of `|x|` at 0 is 0.
pub fn alignment_backward(
    fused: ArrayView2<'_, f64>,
    id: ArrayView2<'_, f64>,
    visual: ArrayView2<'_, f64>,
    textual: ArrayView2<'_, f64>,
    lambda: f64,
    levels: AlignLevels,
) -> Result<AlignmentGrads> {
    let mats = [fused, id, visual, textual];
    check_shapes(&mats)?;
    let d = fused.ncols();
    if levels.is_empty() || lambda == 0.0 {
        let zeros = |m: &ArrayView2<'_, f64>| Array2::<f64>::zeros(m.raw_dim());
        return Ok(AlignmentGrads { fused: zeros(&fused), id: zeros(&id), visual: zeros(&visual), textual: zeros(&textual) });
    }
    let moments = mats.iter().map(|m| gaussian_moments(m.view())).collect::<Result<Vec<_>>>()?;
    let mut d_mu = vec![Array1::<f64>::zeros(d); 4];
    let mut d_sigma = vec![Array1::<f64>::zeros(d); 4];
    let scale = lambda / d as f64;
    for &(level, a, b) in &PAIRS {
        if !level_on(levels, level) {
            continue;
        }
        for j in 0..d {
            let gm = scale * sign(moments[a].mu[j] - moments[b].mu[j]);
            d_mu[a][j] += gm;
            d_mu[b][j] -= gm;
            let gs = scale * sign(moments[a].sigma[j] - moments[b].sigma[j]);
            d_sigma[a][j] += gs;
            d_sigma[b][j] -= gs;
        }
    }
    // dmu_j/dM_ij = 1/n ; dsigma_j/dM_ij = (M_ij - mu_j) / (n sigma_j), n = rows of M
    let back = |k: usize| -> Array2<f64> {
        let m = &mats[k];
        let n = m.nrows();
        let mom = &moments[k];
        let coef = &d_sigma[k] / &mom.sigma / n as f64;
        let mut g = (&m.view() - &mom.mu) * &coef;
        g += &(&d_mu[k] / n as f64);
        g
    };
    Ok(AlignmentGrads {
        fused: back(FUSED),
        id: back(ID),
        visual: back(VIS),
        textual: back(TXT),
    })
}

/// Stacks the two width-`d` halves of a concat-fused matrix vertically so
/// its moments are comparable with width-`d` channels.
pub fn stack_halves(fused: ArrayView2<'_, f64>, d: usize) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[fused.slice(s![.., ..d]), fused.slice(s![.., d..])]).expect("same width")
}

/// Inverse of [`stack_halves`] applied to a gradient.
pub fn unstack_halves(grad: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = grad.nrows() / 2;
    ndarray::concatenate(Axis(1), &[grad.slice(s![..n, ..]), grad.slice(s![n.., ..])]).expect("same height")
}

/// Keep-mask with entries 0 (probability `p`) or 1, drawn row-major.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
}

/// `1 - mean_r cos(target_r, pred_r)` and its gradient w.r.t. `pred`
/// (target is a constant).
fn cosine_loss_and_grad(target: &Array2<f64>, pred: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = target.nrows();
    let mut grad = Array2::zeros(pred.raw_dim());
    if n == 0 {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for r in 0..n {
        let a = target.row(r);
        let x = pred.row(r);
        let na = a.dot(&a).sqrt();
        let nx = x.dot(&x).sqrt();
        if na == 0.0 || nx == 0.0 {
            continue;
        }
        let cos = a.dot(&x) / (na * nx);
        sum += cos;
        // d cos / dx = a / (|a||x|) - cos * x / |x|^2
        let g = (&a / (na * nx) - &(&x * (cos / (nx * nx)))) * (-1.0 / n as f64);
        grad.row_mut(r).assign(&g);
    }
    (1.0 - sum / n as f64, grad)
}

/// Dropout-masked views under stop-gradient against an affine predictor.
#[derive(Debug, Clone)]
pub struct FeatureMaskGrads {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
    pub w_pred: Array2<f64>,
    pub b_pred: Array2<f64>,
}

/// Loss and gradients for explicit masks. Gradients flow only through the
/// predictor branch; the masked view is a constant.
pub fn feature_mask_with_masks(
    users: ArrayView2<'_, f64>,
    items: ArrayView2<'_, f64>,
    user_mask: &Array2<f64>,
    item_mask: &Array2<f64>,
    w_pred: &Array2<f64>,
    b_pred: &Array2<f64>,
) -> Result<(f64, FeatureMaskGrads)> {
    ensure_dim(users.ncols(), w_pred.nrows())?;
    ensure_dim(items.ncols(), w_pred.nrows())?;
    let mut total = 0.0;
    let mut w_grad = Array2::zeros(w_pred.raw_dim());
    let mut b_grad = Array2::zeros(b_pred.raw_dim());
    let mut side = |x: ArrayView2<'_, f64>, mask: &Array2<f64>| -> Array2<f64> {
        let target = &x * mask;
        let pred = x.dot(w_pred) + b_pred;
        let (loss, d_pred) = cosine_loss_and_grad(&target, &pred);
        total += loss;
        w_grad += &x.t().dot(&d_pred);
        b_grad += &d_pred.sum_axis(Axis(0)).insert_axis(Axis(0));
        d_pred.dot(&w_pred.t())
    };
    let users_grad = side(users, user_mask);
    let items_grad = side(items, item_mask);
    Ok((
        total,
        FeatureMaskGrads {
            users: users_grad,
            items: items_grad,
            w_pred: w_grad,
            b_pred: b_grad,
        },
    ))
}

/// Masks are drawn from `rng` (user rows first, then item rows).
pub fn feature_mask_loss<R: Rng + ?Sized>(
    users: ArrayView2<'_, f64>,
    items: ArrayView2<'_, f64>,
    p: f64,
    w_pred: &Array2<f64>,
    b_pred: &Array2<f64>,
    rng: &mut R,
) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout ratio {p} outside [0, 1)")));
    }
    let um = dropout_mask(users.nrows(), users.ncols(), p, rng);
    let im = dropout_mask(items.nrows(), items.ncols(), p, rng);
    Ok(feature_mask_with_masks(users, items, &um, &im, w_pred, b_pred)?.0)
}

/// Propagation with `eps * U[0,1)` noise added after every layer.
pub fn perturbed_propagate<R: Rng + ?Sized>(
    adj: &NormAdjacency,
    emb: ArrayView2<'_, f64>,
    layers: usize,
    eps: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if layers == 0 {
        return Err(Error::InvalidArgument("perturbed propagation needs >= 1 layer".into()));
    }
    ensure_dim(adj.n_nodes(), emb.nrows())?;
    let mut acc = emb.to_owned();
    let mut cur = emb.to_owned();
    for _ in 0..layers {
        cur = adj.matrix.matmul(cur.view())?;
        cur.mapv_inplace(|v| v + eps * rng.gen::<f64>());
        acc += &cur;
    }
    Ok(acc)
}

fn normalized_rows(view: ArrayView2<'_, f64>, rows: &[usize]) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut z = Array2::zeros((rows.len(), view.ncols()));
    let mut norms = Vec::with_capacity(rows.len());
    for (k, &r) in rows.iter().enumerate() {
        let src = view.row(r);
        let nrm = src.dot(&src).sqrt();
        if nrm == 0.0 {
            return Err(Error::ZeroRow(r));
        }
        z.row_mut(k).assign(&(&src / nrm));
        norms.push(nrm);
    }
    Ok((z, norms))
}

/// Gradients w.r.t. the two views.
pub type ViewGrads = (Array2<f64>, Array2<f64>);

/// InfoNCE over `rows` with the same rows serving as negatives. Returns the
/// summed loss and, if requested, gradients w.r.t. both full views.
pub fn info_nce_with_grad(
    view1: ArrayView2<'_, f64>,
    view2: ArrayView2<'_, f64>,
    tau: f64,
    rows: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<ViewGrads>)> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("InfoNCE needs at least one row".into()));
    }
    ensure_dim(view1.nrows(), view2.nrows())?;
    ensure_dim(view1.ncols(), view2.ncols())?;
    let (z1, n1) = normalized_rows(view1, rows)?;
    let (z2, n2) = normalized_rows(view2, rows)?;
    let logits = z1.dot(&z2.t()) / tau;
    let mut loss = 0.0;
    let mut soft = Array2::<f64>::zeros(logits.raw_dim());
    for (r, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[r];
        if want_grad {
            for (c, &v) in row.iter().enumerate() {
                soft[[r, c]] = (v - max).exp() / sum;
            }
            soft[[r, r]] -= 1.0;
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let dz1 = soft.dot(&z2) / tau;
    let dz2 = soft.t().dot(&z1) / tau;
    let mut g1 = Array2::zeros(view1.raw_dim());
    let mut g2 = Array2::zeros(view2.raw_dim());
    // through v -> v/|v|: dv = (dz - z (z . dz)) / |v|
    for (k, &r) in rows.iter().enumerate() {
        for (g, z, dz, nrm) in [(&mut g1, &z1, &dz1, n1[k]), (&mut g2, &z2, &dz2, n2[k])] {
            let zr = z.row(k);
            let dzr = dz.row(k);
            let proj = zr.dot(&dzr);
            let mut dst = g.row_mut(r);
            dst += &((&dzr - &(&zr * proj)) / nrm);
        }
    }
    Ok((loss, Some((g1, g2))))
}

pub fn info_nce(view1: ArrayView2<'_, f64>, view2: ArrayView2<'_, f64>, tau: f64, rows: &[usize]) -> Result<f64> {
    Ok(info_nce_with_grad(view1, view2, tau, rows, false)?.0)
}

/// Which rows act as negatives in the graph-perturbation InfoNCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NceNegatives {
    /// Rows of the current batch.
    #[default]
    Batch,
    /// Every user (resp. item).
    All,
}

impl std::str::FromStr for NceNegatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidArgument(format!("unknown negatives mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for NceNegatives {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnhanceConfig {
    pub lambda_f: f64,
    pub lambda_g: f64,
    pub tau: f64,
    pub dropout: f64,
    pub noise_eps: f64,
    pub ui_layers: usize,
    pub negatives: NceNegatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnhancementLoss {
    pub feature: f64,
    pub graph: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct EnhancementGrads {
    /// w.r.t. the fused embedding (feature term).
    pub fused: Array2<f64>,
    /// w.r.t. the un-propagated visual/textual channel inputs (graph term).
    pub input_v: Array2<f64>,
    pub input_t: Array2<f64>,
    pub w_pred: Array2<f64>,
    pub b_pred: Array2<f64>,
}

/// Perturbed views of one modality for the two noise streams.
pub fn perturbed_views(
    adj: &NormAdjacency,
    input: ArrayView2<'_, f64>,
    m: Modality,
    cfg: &EnhanceConfig,
    seeds: &StepSeeds,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (s1, s2) = match m {
        Modality::Visual => (Stream::NoiseVisual1, Stream::NoiseVisual2),
        Modality::Textual => (Stream::NoiseTextual1, Stream::NoiseTextual2),
    };
    let v1 = perturbed_propagate(adj, input, cfg.ui_layers, cfg.noise_eps, &mut seeds.stream(s1))?;
    let v2 = perturbed_propagate(adj, input, cfg.ui_layers, cfg.noise_eps, &mut seeds.stream(s2))?;
    Ok((v1, v2))
}

/// Both enhancement terms. `batch_users` and `batch_items` are user and
/// item indices (items not offset by `n_users`). Terms whose weight is zero
/// are skipped and reported as 0.
#[allow(clippy::too_many_arguments)]
pub fn enhancement_loss(
    adj: &NormAdjacency,
    emb: &PropagatedEmbeddings,
    w_pred: &Array2<f64>,
    b_pred: &Array2<f64>,
    cfg: &EnhanceConfig,
    batch_users: &[usize],
    batch_items: &[usize],
    seeds: &StepSeeds,
    want_grad: bool,
) -> Result<(EnhancementLoss, Option<EnhancementGrads>)> {
    let n_users = emb.n_users;
    let n_nodes = emb.fused.nrows();
    let mut out = EnhancementLoss::default();
    let mut grads = want_grad.then(|| EnhancementGrads {
        fused: Array2::zeros(emb.fused.raw_dim()),
        input_v: Array2::zeros(emb.input_v.raw_dim()),
        input_t: Array2::zeros(emb.input_t.raw_dim()),
        w_pred: Array2::zeros(w_pred.raw_dim()),
        b_pred: Array2::zeros(b_pred.raw_dim()),
    });

    if cfg.lambda_f != 0.0 {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::InvalidArgument(format!("dropout ratio {} outside [0, 1)", cfg.dropout)));
        }
        let item_rows: Vec<usize> = batch_items.iter().map(|&i| n_users + i).collect();
        let users = emb.fused.select(Axis(0), batch_users);
        let items = emb.fused.select(Axis(0), &item_rows);
        let mut rng = seeds.stream(Stream::Mask);
        let um = dropout_mask(users.nrows(), users.ncols(), cfg.dropout, &mut rng);
        let im = dropout_mask(items.nrows(), items.ncols(), cfg.dropout, &mut rng);
        let (loss, fg) = feature_mask_with_masks(users.view(), items.view(), &um, &im, w_pred, b_pred)?;
        out.feature = loss;
        if let Some(g) = grads.as_mut() {
            let lf = cfg.lambda_f;
            for (k, &r) in batch_users.iter().enumerate() {
                let mut dst = g.fused.row_mut(r);
                dst.scaled_add(lf, &fg.users.row(k));
            }
            for (k, &r) in item_rows.iter().enumerate() {
                let mut dst = g.fused.row_mut(r);
                dst.scaled_add(lf, &fg.items.row(k));
            }
            g.w_pred.scaled_add(lf, &fg.w_pred);
            g.b_pred.scaled_add(lf, &fg.b_pred);
        }
    }

    if cfg.lambda_g != 0.0 {
        let (user_rows, item_rows): (Vec<usize>, Vec<usize>) = match cfg.negatives {
            NceNegatives::Batch => (
                batch_users.to_vec(),
                batch_items.iter().map(|&i| n_users + i).collect(),
            ),
            NceNegatives::All => ((0..n_users).collect(), (n_users..n_nodes).collect()),
        };
        for m in Modality::ALL {
            let (v1, v2) = perturbed_views(adj, emb.input(m).view(), m, cfg, seeds)?;
            let mut view_grad = grads.as_ref().map(|_| Array2::<f64>::zeros(v1.raw_dim()));
            for rows in [&user_rows, &item_rows] {
                if rows.is_empty() {
                    continue;
                }
                let (loss, g) = info_nce_with_grad(v1.view(), v2.view(), cfg.tau, rows, want_grad)?;
                out.graph += loss;
                if let (Some(acc), Some((g1, g2))) = (view_grad.as_mut(), g) {
                    *acc += &g1;
                    *acc += &g2;
                }
            }
            // Both views are propagate_ui(input) + constant noise.
            if let (Some(g), Some(vg)) = (grads.as_mut(), view_grad) {
                let back = propagate_ui(adj, vg.view(), cfg.ui_layers)? * cfg.lambda_g;
                match m {
                    Modality::Visual => g.input_v += &back,
                    Modality::Textual => g.input_t += &back,
                }
            }
        }
    }

    out.total = cfg.lambda_g * out.graph + cfg.lambda_f * out.feature;
    Ok((out, grads))
}
