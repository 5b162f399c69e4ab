//! Finite-difference checks of every loss and of the adapter block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmtrack::autodiff::Graph;
use mmtrack::encoder::VideoModality;
use mmtrack::losses::{
    box_loss, center_loss, focal_loss_logits, bce_mean_logits, gaussian_center_target, mmc_loss, orthogonality,
    target_map_loss, BBox, GridSpec, LossWeights,
};
use mmtrack::numerics::{finite_difference_gradient, gradient_check, GradReport};
use mmtrack::params::ParamStore;
use mmtrack::rama::{amtb_forward, AdapterBlock};
use mmtrack::Tensor;

use crate::error::{HarnessError, Result};

pub const H: f64 = 1e-6;
pub const RTOL: f64 = 1e-5;
/// Components whose absolute error is below this pass regardless of relative error;
/// it sits above the central-difference rounding floor for O(1) losses.
pub const ATOL: f64 = 1e-8;

pub const OPS: [&str; 8] = [
    "mmc_loss",
    "target_map_loss",
    "center_loss",
    "box_loss",
    "orthogonality",
    "amtb_forward",
    "target_map_logits",
    "center_logits",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub seeds: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl OpReport {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

const GRID: GridSpec = GridSpec { grid: 4, patch: 4 };

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("dims")
}

fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BBox<f64> {
    let w = rng.random_range(0.15..0.5) * size;
    let h = rng.random_range(0.15..0.5) * size;
    BBox::new(
        rng.random_range(w / 2.0..size - w / 2.0),
        rng.random_range(h / 2.0..size - h / 2.0),
        w,
        h,
    )
}

fn merge(reports: &[GradReport]) -> GradReport {
    GradReport {
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        max_abs_error: reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max),
        checked_count: reports.iter().map(|r| r.checked_count).sum(),
        pass: reports.iter().all(|r| r.pass),
    }
}

fn compare(analytic: &Tensor<f64>, f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Result<GradReport> {
    let numeric = finite_difference_gradient(f, x, H)?;
    Ok(gradient_check(analytic, &numeric, RTOL, ATOL)?)
}

fn vec_of(v: Vec<f64>) -> Tensor<f64> {
    Tensor::vector(v)
}

fn check_mmc(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let c = 6;
    let token = randn(rng, &[c]);
    let search = randn(rng, &[GRID.cells(), c]);
    let gt = random_box(rng, GRID.image_size() as f64);
    let w = LossWeights {
        n_neg: 5,
        ..LossWeights::default()
    };
    let out = mmc_loss(token.data(), &search, &gt, GRID, &w)?;
    let f_t = |t: &Tensor<f64>| mmc_loss(t.data(), &search, &gt, GRID, &w).map(|o| o.loss).unwrap_or(f64::NAN);
    let a = compare(&vec_of(out.grad_token.clone()), f_t, &token)?;
    let f_s = |s: &Tensor<f64>| mmc_loss(token.data(), s, &gt, GRID, &w).map(|o| o.loss).unwrap_or(f64::NAN);
    let b = compare(&out.grad_search, f_s, &search)?;
    Ok(merge(&[a, b]))
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    vec_of((0..n).map(|_| rng.random_range(0.05..0.95)).collect())
}

fn check_target_map(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let l = probs(rng, GRID.cells());
    let gt = random_box(rng, GRID.image_size() as f64);
    let (_, g) = target_map_loss(l.data(), &gt, GRID)?;
    compare(&vec_of(g), |x| target_map_loss(x.data(), &gt, GRID).map(|r| r.0).unwrap_or(f64::NAN), &l)
}

fn check_center(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let c = probs(rng, GRID.cells());
    let gt = random_box(rng, GRID.image_size() as f64);
    let (_, g) = center_loss(c.data(), &gt, GRID)?;
    compare(&vec_of(g), |x| center_loss(x.data(), &gt, GRID).map(|r| r.0).unwrap_or(f64::NAN), &c)
}

fn check_box(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let size = 32.0;
    let gt = random_box(rng, size);
    let pred = random_box(rng, size);
    let w = LossWeights::default();
    let (_, g) = box_loss(&pred, &gt, size, &w)?;
    let x = vec_of(pred.to_array().to_vec());
    let f = |t: &Tensor<f64>| {
        let d = t.data();
        box_loss(&BBox::new(d[0], d[1], d[2], d[3]), &gt, size, &w).map(|r| r.0).unwrap_or(f64::NAN)
    };
    compare(&vec_of(g.to_vec()), f, &x)
}

fn check_orth(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (d, r) = (6, 3);
    let p = randn(rng, &[d, r]);
    let q = randn(rng, &[r, d + 2]);
    let (_, gp, gq) = orthogonality(&p, &q)?;
    let a = compare(&gp, |x| orthogonality(x, &q).map(|o| o.0).unwrap_or(f64::NAN), &p)?;
    let b = compare(&gq, |x| orthogonality(&p, x).map(|o| o.0).unwrap_or(f64::NAN), &q)?;
    Ok(merge(&[a, b]))
}

/// Projects the block output onto fixed random weights and checks the gradients of that
/// scalar against the graph form, w.r.t. every input and factor.
fn check_amtb(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (n, d_in, d_out, r) = (5, 6, 7, 4);
    let a = VideoModality::AUXILIARY[rng.random_range(0..3)];
    let e_r = randn(rng, &[n, d_in]);
    let e_a = randn(rng, &[n, d_in]);
    let w = randn(rng, &[d_in, d_out]);
    let p = randn(rng, &[d_in, r]);
    let q = randn(rng, &[r, d_out]);
    let lam: [Vec<f64>; 4] = std::array::from_fn(|_| (0..r).map(|_| rng.random_range(-1.0..1.0)).collect());
    let proj = randn(rng, &[n, d_out]);
    let block = AdapterBlock::new(0, w.clone(), p.clone(), q.clone(), lam.clone())?;
    let objective = |b: &AdapterBlock<f64>, er: &Tensor<f64>, ea: &Tensor<f64>| -> f64 {
        amtb_forward(er, Some(ea), b, a).map(|o| o.dot(&proj)).unwrap_or(f64::NAN)
    };

    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let v_er = g.input(e_r.clone());
    let v_ea = g.input(e_a.clone());
    let v_w = g.input(w.clone());
    let v_p = g.input(p.clone());
    let v_q = g.input(q.clone());
    let v_lr = g.input(Tensor::row_vector(lam[VideoModality::Rgb.index()].clone()));
    let v_la = g.input(Tensor::row_vector(lam[a.index()].clone()));
    let out = mmtrack::rama::amtb_forward_graph(&mut g, v_er, Some(v_ea), v_w, v_p, v_q, v_lr, Some(v_la));
    let pv = g.constant(proj.clone());
    let prod = g.mul(out, pv);
    let s = g.sum(prod);
    let grads = g.backward(s);
    let grad = |v| grads.of(v).cloned().ok_or_else(|| HarnessError::Invalid("missing gradient".into()));

    let with = |f: &dyn Fn(&mut AdapterBlock<f64>)| {
        let mut b = block.clone();
        f(&mut b);
        b
    };
    let mut reports = vec![
        compare(&grad(v_er)?, |x| objective(&block, x, &e_a), &e_r)?,
        compare(&grad(v_ea)?, |x| objective(&block, &e_r, x), &e_a)?,
        compare(&grad(v_w)?, |x| objective(&with(&|b| b.w = x.clone()), &e_r, &e_a), &w)?,
        compare(&grad(v_p)?, |x| objective(&with(&|b| b.p = x.clone()), &e_r, &e_a), &p)?,
        compare(&grad(v_q)?, |x| objective(&with(&|b| b.q = x.clone()), &e_r, &e_a), &q)?,
    ];
    for (v, idx) in [(v_lr, VideoModality::Rgb.index()), (v_la, a.index())] {
        let x = Tensor::row_vector(lam[idx].clone());
        let f = |t: &Tensor<f64>| objective(&with(&|b| b.lambda[idx] = t.data().to_vec()), &e_r, &e_a);
        reports.push(compare(&grad(v)?, f, &x)?);
    }
    Ok(merge(&reports))
}

fn check_target_logits(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let z = randn(rng, &[GRID.cells()]).scale(3.0);
    let gt = random_box(rng, GRID.image_size() as f64);
    let target: Vec<f64> = GRID.in_box_mask(&gt).iter().map(|&b| f64::from(u8::from(b))).collect();
    let (_, g) = bce_mean_logits(z.data(), &target)?;
    compare(&vec_of(g), |x| bce_mean_logits(x.data(), &target).map(|r| r.0).unwrap_or(f64::NAN), &z)
}

fn check_center_logits(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let z = randn(rng, &[GRID.cells()]).scale(3.0);
    let gt = random_box(rng, GRID.image_size() as f64);
    let target = gaussian_center_target(&gt, GRID);
    let (_, g) = focal_loss_logits(z.data(), &target)?;
    compare(&vec_of(g), |x| focal_loss_logits(x.data(), &target).map(|r| r.0).unwrap_or(f64::NAN), &z)
}

/// One check of `op` on inputs drawn from `seed`.
pub fn check_once(op: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        "mmc_loss" => check_mmc(&mut rng),
        "target_map_loss" => check_target_map(&mut rng),
        "center_loss" => check_center(&mut rng),
        "box_loss" => check_box(&mut rng),
        "orthogonality" => check_orth(&mut rng),
        "amtb_forward" => check_amtb(&mut rng),
        "target_map_logits" => check_target_logits(&mut rng),
        "center_logits" => check_center_logits(&mut rng),
        _ => Err(HarnessError::Invalid(format!("unknown op {op:?}; known: {}", OPS.join(", ")))),
    }
}

/// Runs `op` over seeds `0..seeds`.
pub fn check_op(op: &str, seeds: u64) -> Result<OpReport> {
    let mut rep = OpReport {
        op: op.to_string(),
        seeds: seeds as usize,
        failures: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for s in 0..seeds {
        let r = check_once(op, s)?;
        rep.failures += usize::from(!r.pass);
        rep.max_rel_error = rep.max_rel_error.max(r.max_rel_error);
        rep.max_abs_error = rep.max_abs_error.max(r.max_abs_error);
    }
    Ok(rep)
}
