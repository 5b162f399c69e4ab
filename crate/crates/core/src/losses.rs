//! Training objectives with analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Axis-aligned box as center and extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox<F> {
    pub cx: F,
    pub cy: F,
    pub w: F,
    pub h: F,
}

impl<F: Scalar> BBox<F> {
    pub fn new(cx: F, cy: F, w: F, h: F) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: F, y1: F, x2: F, y2: F) -> Self {
        let two = F::lit(2.0);
        Self::new((x1 + x2) / two, (y1 + y2) / two, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [F; 4] {
        let two = F::lit(2.0);
        [self.cx - self.w / two, self.cy - self.h / two, self.cx + self.w / two, self.cy + self.h / two]
    }

    pub fn area(&self) -> F {
        self.w.max(F::zero()) * self.h.max(F::zero())
    }

    pub fn to_array(&self) -> [F; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [F; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn scaled(&self, s: F) -> Self {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    pub fn translated(&self, dx: F, dy: F) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

/// Plain IoU; zero when the union is empty.
pub fn iou<F: Scalar>(a: &BBox<F>, b: &BBox<F>) -> F {
    let (ca, cb) = (a.corners(), b.corners());
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(F::zero());
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(F::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= F::zero() {
        F::zero()
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights<F> {
    pub lambda_1: F,
    pub lambda_giou: F,
    pub lambda_mmc: F,
    pub lambda_orth: F,
    pub tau: F,
    pub n_neg: usize,
}

impl<F: Scalar> Default for LossWeights<F> {
    fn default() -> Self {
        Self {
            lambda_1: F::lit(5.0),
            lambda_giou: F::lit(2.0),
            lambda_mmc: F::lit(0.1),
            lambda_orth: F::lit(0.1),
            tau: F::lit(0.07),
            n_neg: 9,
        }
    }
}

impl<F: Scalar> LossWeights<F> {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_1, self.lambda_giou, self.lambda_mmc, self.lambda_orth];
        if ws.iter().any(|w| !(*w >= F::zero())) || !(self.tau > F::zero()) {
            return Err(Error::Config("loss weights must be nonnegative and tau positive".into()));
        }
        Ok(())
    }
}

/// Square search grid of `grid × grid` patches of side `patch` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub grid: usize,
    pub patch: usize,
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.patch
    }

    /// Row-major index of the cell holding the box center, clamped to the grid.
    pub fn center_cell<F: Scalar>(&self, b: &BBox<F>) -> usize {
        let (x, y) = self.center_xy(b);
        y * self.grid + x
    }

    pub fn center_xy<F: Scalar>(&self, b: &BBox<F>) -> (usize, usize) {
        let p = self.patch as f64;
        let clamp = |v: f64| (v / p).floor().clamp(0.0, (self.grid - 1) as f64) as usize;
        (clamp(b.cx.to_f64_lossy()), clamp(b.cy.to_f64_lossy()))
    }

    /// Cells whose center lies inside the box; the center cell is always included.
    pub fn in_box_mask<F: Scalar>(&self, b: &BBox<F>) -> Vec<bool> {
        let [x1, y1, x2, y2] = b.corners().map(|v| v.to_f64_lossy());
        let p = self.patch as f64;
        let mut m: Vec<bool> = (0..self.cells())
            .map(|i| {
                let (r, c) = (i / self.grid, i % self.grid);
                let (px, py) = ((c as f64 + 0.5) * p, (r as f64 + 0.5) * p);
                px >= x1 && px <= x2 && py >= y1 && py <= y2
            })
            .collect();
        m[self.center_cell(b)] = true;
        m
    }
}

/// `−log(e^{s_p} / (e^{s_p} + Σ e^{s_n}))` with gradients w.r.t. `s_p` and each `s_n`.
pub fn info_nce<F: Scalar>(sp: F, negs: &[F]) -> (F, F, Vec<F>) {
    let m = negs.iter().fold(sp, |m, &v| m.max(v));
    let ep = (sp - m).exp();
    let en: Vec<F> = negs.iter().map(|&v| (v - m).exp()).collect();
    let z = ep + en.iter().copied().sum::<F>();
    let loss = z.ln() - (sp - m);
    (loss, ep / z - F::one(), en.iter().map(|&e| e / z).collect())
}

fn cosine_with_grads<F: Scalar>(a: &[F], b: &[F], op: &'static str) -> Result<(F, Vec<F>, Vec<F>)> {
    let na = a.iter().map(|&v| v * v).sum::<F>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<F>().sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(Error::degenerate(op, "zero-norm vector"));
    }
    let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let cos = dot / (na * nb);
    let ga = a.iter().zip(b).map(|(&x, &y)| y / (na * nb) - cos * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x / (na * nb) - cos * y / (nb * nb)).collect();
    Ok((cos, ga, gb))
}

/// Loss value and gradients w.r.t. the semantic token and the search embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MmcOutput<F> {
    pub loss: F,
    pub grad_token: Vec<F>,
    pub grad_search: Tensor<F>,
    pub negatives: Vec<usize>,
}

/// Contrastive loss pulling the token toward the box-center patch and away from the
/// `n_neg` most similar out-of-box patches (ties to the lowest index).
pub fn mmc_loss<F: Scalar>(
    token: &[F],
    search: &Tensor<F>,
    gt: &BBox<F>,
    grid: GridSpec,
    weights: &LossWeights<F>,
) -> Result<MmcOutput<F>> {
    if search.rows() != grid.cells() || search.cols() != token.len() {
        return Err(Error::shape(
            "mmc_loss",
            format!("{}x{}", grid.cells(), token.len()),
            format!("{}x{}", search.rows(), search.cols()),
        ));
    }
    let inside = grid.in_box_mask(gt);
    let pos = grid.center_cell(gt);
    let mut out_cells: Vec<usize> = (0..grid.cells()).filter(|&i| !inside[i]).collect();
    if out_cells.is_empty() {
        return Err(Error::degenerate("mmc_loss", "no out-of-box patch"));
    }
    let tau = weights.tau;
    let mut sims = Vec::with_capacity(grid.cells());
    for i in 0..grid.cells() {
        sims.push(cosine_with_grads(token, search.row(i), "mmc_loss")?);
    }
    out_cells.sort_by(|&a, &b| {
        sims[b].0.partial_cmp(&sims[a].0).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    out_cells.truncate(weights.n_neg.max(1));
    let sp = sims[pos].0 / tau;
    let negs: Vec<F> = out_cells.iter().map(|&i| sims[i].0 / tau).collect();
    let (loss, dsp, dneg) = info_nce(sp, &negs);
    let c = token.len();
    let mut grad_token = vec![F::zero(); c];
    let mut grad_search = Tensor::zeros(&[grid.cells(), c]);
    let mut acc = |cell: usize, d: F| {
        let (_, ga, gb) = &sims[cell];
        for j in 0..c {
            grad_token[j] += d / tau * ga[j];
        }
        for (o, &g) in grad_search.row_mut(cell).iter_mut().zip(gb) {
            *o += d / tau * g;
        }
    };
    acc(pos, dsp);
    for (&cell, &d) in out_cells.iter().zip(&dneg) {
        acc(cell, d);
    }
    Ok(MmcOutput {
        loss,
        grad_token,
        grad_search,
        negatives: out_cells,
    })
}

pub const PROB_EPS: f64 = 1e-7;

fn check_probs<F: Scalar>(p: &[F], op: &'static str) -> Result<()> {
    if p.iter().any(|v| !(*v >= F::zero() && *v <= F::one())) {
        return Err(Error::range(op, "probabilities must lie in [0, 1]"));
    }
    Ok(())
}

fn clamp_prob<F: Scalar>(p: F) -> (F, bool) {
    let eps = F::lit(PROB_EPS);
    if p < eps {
        (eps, true)
    } else if p > F::one() - eps {
        (F::one() - eps, true)
    } else {
        (p, false)
    }
}

/// Mean binary cross-entropy; gradient is zero where the clamp is active.
pub fn bce_mean<F: Scalar>(p: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if p.len() != target.len() || p.is_empty() {
        return Err(Error::shape("bce_mean", target.len(), p.len()));
    }
    check_probs(p, "bce_mean")?;
    let n = F::from_usize_lossy(p.len());
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &y) in p.iter().zip(target) {
        let (q, clamped) = clamp_prob(pi);
        loss -= y * q.ln() + (F::one() - y) * (F::one() - q).ln();
        grad.push(if clamped {
            F::zero()
        } else {
            -(y / q - (F::one() - y) / (F::one() - q)) / n
        });
    }
    Ok((loss / n, grad))
}

/// BCE of the target-similarity map against the in-box indicator.
pub fn target_map_loss<F: Scalar>(l_hat: &[F], gt: &BBox<F>, grid: GridSpec) -> Result<(F, Vec<F>)> {
    if l_hat.len() != grid.cells() {
        return Err(Error::shape("target_map_loss", grid.cells(), l_hat.len()));
    }
    let target: Vec<F> = grid
        .in_box_mask(gt)
        .into_iter()
        .map(|b| if b { F::one() } else { F::zero() })
        .collect();
    bce_mean(l_hat, &target)
}

/// Gaussian bump peaked (exactly 1) at the center cell, `σ = extent_cells / 6`.
pub fn gaussian_center_target<F: Scalar>(gt: &BBox<F>, grid: GridSpec) -> Vec<F> {
    let (x0, y0) = grid.center_xy(gt);
    let extent = (gt.w + gt.h).to_f64_lossy() / 2.0 / grid.patch as f64;
    let sigma = (extent / 6.0).max(1e-3);
    (0..grid.cells())
        .map(|i| {
            let (r, c) = ((i / grid.grid) as f64, (i % grid.grid) as f64);
            let d2 = (c - x0 as f64).powi(2) + (r - y0 as f64).powi(2);
            F::lit((-d2 / (2.0 * sigma * sigma)).exp())
        })
        .collect()
}

/// Penalty-reduced focal loss (α = 2, β = 4) normalized by the number of positives.
pub fn focal_loss<F: Scalar>(p: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if p.len() != target.len() || p.is_empty() {
        return Err(Error::shape("focal_loss", target.len(), p.len()));
    }
    check_probs(p, "focal_loss")?;
    let num_pos = target.iter().filter(|&&y| y == F::one()).count().max(1);
    let n = F::from_usize_lossy(num_pos);
    let two = F::lit(2.0);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &y) in p.iter().zip(target) {
        let (q, clamped) = clamp_prob(pi);
        let (l, d) = if y == F::one() {
            let om = F::one() - q;
            (-om * om * q.ln(), two * om * q.ln() - om * om / q)
        } else {
            let w = (F::one() - y).powi(4);
            let lg = (F::one() - q).ln();
            (-w * q * q * lg, -w * (two * q * lg - q * q / (F::one() - q)))
        };
        loss += l;
        grad.push(if clamped { F::zero() } else { d / n });
    }
    Ok((loss / n, grad))
}

pub fn center_loss<F: Scalar>(c_hat: &[F], gt: &BBox<F>, grid: GridSpec) -> Result<(F, Vec<F>)> {
    if c_hat.len() != grid.cells() {
        return Err(Error::shape("center_loss", grid.cells(), c_hat.len()));
    }
    focal_loss(c_hat, &gaussian_center_target(gt, grid))
}

pub fn giou<F: Scalar>(a: &BBox<F>, b: &BBox<F>) -> Result<F> {
    giou_with_grad(a, b).map(|(g, _)| g)
}

/// GIoU and its gradient w.r.t. `(cx, cy, w, h)` of `a`.
pub fn giou_with_grad<F: Scalar>(a: &BBox<F>, b: &BBox<F>) -> Result<(F, [F; 4])> {
    if a.w < F::zero() || a.h < F::zero() || b.w < F::zero() || b.h < F::zero() {
        return Err(Error::range("giou", "negative extent"));
    }
    let (aa, ab) = (a.area(), b.area());
    if aa == F::zero() && ab == F::zero() {
        return Err(Error::degenerate("giou", "both boxes have zero area"));
    }
    let (ca, cb) = (a.corners(), b.corners());
    let zero = F::zero();
    let one = F::one();
    // per axis: (intersection extent, d/d lo_a, d/d hi_a), (hull extent, d/d lo_a, d/d hi_a)
    let axis = |lo_a: F, hi_a: F, lo_b: F, hi_b: F| {
        let ie = hi_a.min(hi_b) - lo_a.max(lo_b);
        let (ie, di_lo, di_hi) = if ie > zero {
            (ie, if lo_a > lo_b { -one } else { zero }, if hi_a < hi_b { one } else { zero })
        } else {
            (zero, zero, zero)
        };
        let he = hi_a.max(hi_b) - lo_a.min(lo_b);
        let dh_lo = if lo_a < lo_b { -one } else { zero };
        let dh_hi = if hi_a > hi_b { one } else { zero };
        (ie, di_lo, di_hi, he, dh_lo, dh_hi)
    };
    let (iw, diw_x1, diw_x2, hw, dhw_x1, dhw_x2) = axis(ca[0], ca[2], cb[0], cb[2]);
    let (ih, dih_y1, dih_y2, hh, dhh_y1, dhh_y2) = axis(ca[1], ca[3], cb[1], cb[3]);
    let inter = iw * ih;
    let union = aa + ab - inter;
    let hull = hw * hh;
    let g = inter / union - (hull - union) / hull;
    // partials of g
    let dg_du = -inter / (union * union) + one / hull;
    let dg_di = one / union - dg_du;
    let dg_dh = -union / (hull * hull);
    let dg_daa = dg_du;
    // area of a: w*h; dw/dx1 = -1, dw/dx2 = 1
    let (wa, ha) = (ca[2] - ca[0], ca[3] - ca[1]);
    let d_x1 = dg_di * diw_x1 * ih + dg_dh * dhw_x1 * hh - dg_daa * ha;
    let d_x2 = dg_di * diw_x2 * ih + dg_dh * dhw_x2 * hh + dg_daa * ha;
    let d_y1 = dg_di * dih_y1 * iw + dg_dh * dhh_y1 * hw - dg_daa * wa;
    let d_y2 = dg_di * dih_y2 * iw + dg_dh * dhh_y2 * hw + dg_daa * wa;
    let half = F::lit(0.5);
    Ok((g, [d_x1 + d_x2, d_y1 + d_y2, (d_x2 - d_x1) * half, (d_y2 - d_y1) * half]))
}

/// `λ1·mean|pred − gt|` on coordinates normalized by `image_size`, plus `λ_giou·(1 − GIoU)`.
/// The gradient is w.r.t. the pixel-space prediction.
pub fn box_loss<F: Scalar>(pred: &BBox<F>, gt: &BBox<F>, image_size: F, weights: &LossWeights<F>) -> Result<(F, [F; 4])> {
    if !(image_size > F::zero()) {
        return Err(Error::range("box_loss", "image size must be positive"));
    }
    let (g, dg) = giou_with_grad(pred, gt)?;
    let (pa, ga) = (pred.to_array(), gt.to_array());
    let four = F::lit(4.0);
    let mut l1 = F::zero();
    let mut grad = [F::zero(); 4];
    for k in 0..4 {
        let d = (pa[k] - ga[k]) / image_size;
        l1 += d.abs();
        let sign = if d > F::zero() {
            F::one()
        } else if d < F::zero() {
            -F::one()
        } else {
            F::zero()
        };
        grad[k] = weights.lambda_1 * sign / (four * image_size) - weights.lambda_giou * dg[k];
    }
    Ok((weights.lambda_1 * l1 / four + weights.lambda_giou * (F::one() - g), grad))
}

/// Per-sample stage-one loss terms; `mmc` holds one entry per encoder layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage1Components<F> {
    pub target: F,
    pub center: F,
    pub boxl: F,
    pub mmc: Vec<F>,
}

/// `L_tgt + L_cls + L_box + λ_mmc·Σ L_mmc^i` and its partials w.r.t. (target, center, box, each mmc).
pub fn stage1_total<F: Scalar>(c: &Stage1Components<F>, weights: &LossWeights<F>) -> (F, [F; 4]) {
    let mmc: F = c.mmc.iter().copied().sum();
    (
        c.target + c.center + c.boxl + weights.lambda_mmc * mmc,
        [F::one(), F::one(), F::one(), weights.lambda_mmc],
    )
}

/// `‖PᵀP − I‖² + ‖QQᵀ − I‖²` with gradients `4P(PᵀP − I)` and `4(QQᵀ − I)Q`.
pub fn orthogonality<F: Scalar>(p: &Tensor<F>, q: &Tensor<F>) -> Result<(F, Tensor<F>, Tensor<F>)> {
    if p.cols() != q.rows() {
        return Err(Error::shape("orthogonality", p.cols(), q.rows()));
    }
    let r = p.cols();
    let eye = |t: &mut Tensor<F>| {
        for i in 0..r {
            let v = t.at(i, i) - F::one();
            t.set(i, i, v);
        }
    };
    let mut ptp = p.transpose().matmul(p)?;
    eye(&mut ptp);
    let mut qqt = q.matmul_t(q)?;
    eye(&mut qqt);
    let loss = ptp.dot(&ptp) + qqt.dot(&qqt);
    let four = F::lit(4.0);
    let gp = p.matmul(&ptp)?.scale(four);
    let gq = qqt.matmul(q)?.scale(four);
    Ok((loss, gp, gq))
}

/// Stage-one loss plus `λ_orth` times the orthogonality penalty of every block.
pub fn stage2_total<F: Scalar>(
    stage1: F,
    blocks: &[(&Tensor<F>, &Tensor<F>)],
    weights: &LossWeights<F>,
) -> Result<(F, Vec<(Tensor<F>, Tensor<F>)>)> {
    let mut total = stage1;
    let mut grads = Vec::with_capacity(blocks.len());
    for (p, q) in blocks {
        let (l, gp, gq) = orthogonality(p, q)?;
        total += weights.lambda_orth * l;
        grads.push((gp.scale(weights.lambda_orth), gq.scale(weights.lambda_orth)));
    }
    Ok((total, grads))
}

fn vec_tensor<F: Scalar>(like: &Tensor<F>, data: Vec<F>) -> Tensor<F> {
    Tensor::new(like.dims().to_vec(), data).expect("gradient dims")
}

/// Graph node for [`mmc_loss`]; `token` is `1×C`, `search` is `N_x×C`.
pub fn mmc_loss_node<F: Scalar>(
    g: &mut Graph<F>,
    token: Var,
    search: Var,
    gt: &BBox<F>,
    grid: GridSpec,
    weights: &LossWeights<F>,
) -> Result<Var> {
    let out = mmc_loss(g.value(token).data(), g.value(search), gt, grid, weights)?;
    let gt_t = vec_tensor(g.value(token), out.grad_token);
    Ok(g.custom(&[token, search], out.loss, vec![gt_t, out.grad_search]))
}

/// Graph node for [`target_map_loss`] on an `N_x×1` probability column.
pub fn target_map_loss_node<F: Scalar>(g: &mut Graph<F>, l_hat: Var, gt: &BBox<F>, grid: GridSpec) -> Result<Var> {
    let (loss, grad) = target_map_loss(g.value(l_hat).data(), gt, grid)?;
    let gr = vec_tensor(g.value(l_hat), grad);
    Ok(g.custom(&[l_hat], loss, vec![gr]))
}

pub fn center_loss_node<F: Scalar>(g: &mut Graph<F>, c_hat: Var, gt: &BBox<F>, grid: GridSpec) -> Result<Var> {
    let (loss, grad) = center_loss(g.value(c_hat).data(), gt, grid)?;
    let gr = vec_tensor(g.value(c_hat), grad);
    Ok(g.custom(&[c_hat], loss, vec![gr]))
}

/// Graph node for [`box_loss`]; `pred` is a `1×4` row `(cx, cy, w, h)` in pixels.
pub fn box_loss_node<F: Scalar>(g: &mut Graph<F>, pred: Var, gt: &BBox<F>, image_size: F, weights: &LossWeights<F>) -> Result<Var> {
    let d = g.value(pred).data();
    let pb = BBox::new(d[0], d[1], d[2], d[3]);
    let (loss, grad) = box_loss(&pb, gt, image_size, weights)?;
    let gr = vec_tensor(g.value(pred), grad.to_vec());
    Ok(g.custom(&[pred], loss, vec![gr]))
}

/// Graph node for `λ_orth·(‖PᵀP − I‖² + ‖QQᵀ − I‖²)`.
pub fn orthogonality_node<F: Scalar>(g: &mut Graph<F>, p: Var, q: Var, lambda_orth: F) -> Result<Var> {
    let (l, gp, gq) = orthogonality(g.value(p), g.value(q))?;
    Ok(g.custom(&[p, q], lambda_orth * l, vec![gp.scale(lambda_orth), gq.scale(lambda_orth)]))
}

fn log_sigmoid<F: Scalar>(z: F) -> F {
    // -softplus(-z)
    if z >= F::zero() {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Mean BCE evaluated from logits; agrees with [`bce_mean`] wherever the clamp is inactive.
pub fn bce_mean_logits<F: Scalar>(z: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if z.len() != target.len() || z.is_empty() {
        return Err(Error::shape("bce_mean_logits", target.len(), z.len()));
    }
    let n = F::from_usize_lossy(z.len());
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(z.len());
    for (&zi, &y) in z.iter().zip(target) {
        loss -= y * log_sigmoid(zi) + (F::one() - y) * log_sigmoid(-zi);
        grad.push((sigmoid(zi) - y) / n);
    }
    Ok((loss / n, grad))
}

/// Focal loss of [`focal_loss`] evaluated from logits.
pub fn focal_loss_logits<F: Scalar>(z: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if z.len() != target.len() || z.is_empty() {
        return Err(Error::shape("focal_loss_logits", target.len(), z.len()));
    }
    let num_pos = target.iter().filter(|&&y| y == F::one()).count().max(1);
    let n = F::from_usize_lossy(num_pos);
    let two = F::lit(2.0);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(z.len());
    for (&zi, &y) in z.iter().zip(target) {
        let p = sigmoid(zi);
        let (lp, lq) = (log_sigmoid(zi), log_sigmoid(-zi));
        let om = sigmoid(-zi);
        if y == F::one() {
            loss -= om * om * lp;
            grad.push(om * om * (two * p * lp - om) / n);
        } else {
            let w = (F::one() - y).powi(4);
            loss -= w * p * p * lq;
            grad.push(w * p * p * (p - two * om * lq) / n);
        }
    }
    Ok((loss / n, grad))
}

/// Target-map BCE node on an `N_x×1` logit column.
pub fn target_map_logit_node<F: Scalar>(g: &mut Graph<F>, logits: Var, in_box: &[bool]) -> Result<Var> {
    let target: Vec<F> = in_box.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
    let (loss, grad) = bce_mean_logits(g.value(logits).data(), &target)?;
    let gr = vec_tensor(g.value(logits), grad);
    Ok(g.custom(&[logits], loss, vec![gr]))
}

/// Center focal-loss node on an `N_x×1` logit column.
pub fn center_logit_node<F: Scalar>(g: &mut Graph<F>, logits: Var, gt: &BBox<F>, grid: GridSpec) -> Result<Var> {
    if g.value(logits).len() != grid.cells() {
        return Err(Error::shape("center_logit_node", grid.cells(), g.value(logits).len()));
    }
    let (loss, grad) = focal_loss_logits(g.value(logits).data(), &gaussian_center_target(gt, grid))?;
    let gr = vec_tensor(g.value(logits), grad);
    Ok(g.custom(&[logits], loss, vec![gr]))
}
