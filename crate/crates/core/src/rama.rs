//! Rank-adaptive auxiliary-modality adapters.
//!
//! Each adapter block adds `E_R·P·diag(Λ^R)·Q + ReLU(E_a·P·diag(Λ^a)·Q)` to a frozen
//! projection `E_R·W`. `P` and `Q` are shared across video modalities; each modality
//! owns its own singular values `Λ^a`. Ranks are allocated by smoothed
//! sensitivity/uncertainty importance, first per shared tuple, then per modality.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::{normal_tensor, LayerRef, VideoModality};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Which projection of a layer an adapter is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Query,
    Key,
    Value,
    MlpIn,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Self::Query, Self::Key, Self::Value, Self::MlpIn];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Query => "q",
            Self::Key => "k",
            Self::Value => "v",
            Self::MlpIn => "mlp1",
        }
    }
}

/// Parameter handles of one adapter block inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdapterIds {
    pub layer: LayerRef,
    pub projection: Projection,
    pub p: ParamId,
    pub q: ParamId,
    /// Indexed by [`VideoModality::index`].
    pub lambda: [ParamId; 4],
}

impl AdapterIds {
    pub fn prefix(&self) -> String {
        format!("adapter.{}.{}", self.layer.tag(), self.projection.tag())
    }
}

/// Registers one adapter per site. `P` and `Q` are random, `Λ` starts at zero so the
/// adapted model initially equals the base model.
pub fn init_adapters<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    sites: &[(LayerRef, Projection, usize, usize)],
    rank: usize,
) -> Vec<AdapterIds> {
    sites
        .iter()
        .map(|&(layer, projection, d_in, d_out)| {
            let prefix = format!("adapter.{}.{}", layer.tag(), projection.tag());
            let g = ParamGroup::Auxiliary;
            let p = store.add(format!("{prefix}.P"), normal_tensor(rng, &[d_in, rank], 1.0 / (d_in as f64).sqrt()), g);
            let q = store.add(format!("{prefix}.Q"), normal_tensor(rng, &[rank, d_out], 1.0 / (d_out as f64).sqrt()), g);
            let lambda = VideoModality::ALL
                .map(|m| store.add(format!("{prefix}.lambda.{}", m.letter()), Tensor::zeros(&[1, rank]), g));
            AdapterIds {
                layer,
                projection,
                p,
                q,
                lambda,
            }
        })
        .collect()
}

/// Value form of one adapter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock<F> {
    pub index: usize,
    pub w: Tensor<F>,
    pub p: Tensor<F>,
    pub q: Tensor<F>,
    /// `Λ^a` for a in R, D, T, E.
    pub lambda: [Vec<F>; 4],
    /// Tuples that survived the last shared allocation.
    pub shared_mask: Vec<bool>,
}

impl<F: Scalar> AdapterBlock<F> {
    pub fn new(index: usize, w: Tensor<F>, p: Tensor<F>, q: Tensor<F>, lambda: [Vec<F>; 4]) -> Result<Self> {
        let r = p.cols();
        if w.rows() != p.rows() || q.rows() != r || q.cols() != w.cols() || lambda.iter().any(|l| l.len() != r) {
            return Err(Error::shape(
                "AdapterBlock::new",
                format!("W {}x{}, P {}x{r}", w.rows(), w.cols(), w.rows()),
                format!("P {:?}, Q {:?}", p.dims(), q.dims()),
            ));
        }
        Ok(Self {
            index,
            w,
            p,
            q,
            lambda,
            shared_mask: vec![true; r],
        })
    }

    pub fn from_store(index: usize, ids: &AdapterIds, store: &ParamStore<F>, w: ParamId) -> Result<Self> {
        let mut b = Self::new(
            index,
            store.get(w).clone(),
            store.get(ids.p).clone(),
            store.get(ids.q).clone(),
            ids.lambda.map(|l| store.get(l).data().to_vec()),
        )?;
        b.shared_mask = (0..b.rank()).map(|i| b.lambda.iter().any(|l| l[i] != F::zero())).collect();
        Ok(b)
    }

    pub fn rank(&self) -> usize {
        self.p.cols()
    }

    pub fn lambda_of(&self, a: VideoModality) -> &[F] {
        &self.lambda[a.index()]
    }

    pub fn nonzero_count(&self, a: VideoModality) -> usize {
        self.lambda_of(a).iter().filter(|v| **v != F::zero()).count()
    }
}

fn low_rank<F: Scalar>(e: &Tensor<F>, p: &Tensor<F>, lambda: &[F], q: &Tensor<F>) -> Result<Tensor<F>> {
    let mut ep = e.matmul(p)?;
    for r in 0..ep.rows() {
        for (v, &l) in ep.row_mut(r).iter_mut().zip(lambda) {
            *v *= l;
        }
    }
    ep.matmul(q)
}

/// `E_R·W + E_R·P·diag(Λ^R)·Q + ReLU(E_a·P·diag(Λ^a)·Q)`.
pub fn amtb_forward<F: Scalar>(
    e_r: &Tensor<F>,
    e_a: Option<&Tensor<F>>,
    block: &AdapterBlock<F>,
    a: VideoModality,
) -> Result<Tensor<F>> {
    let mut out = e_r.matmul(&block.w)?;
    out.add_assign(&low_rank(e_r, &block.p, block.lambda_of(VideoModality::Rgb), &block.q)?);
    if let Some(e_a) = e_a {
        if !a.is_auxiliary() {
            return Err(Error::Config("auxiliary input supplied with modality RGB".into()));
        }
        if e_a.dims() != e_r.dims() {
            return Err(Error::shape("amtb_forward", format!("{:?}", e_r.dims()), format!("{:?}", e_a.dims())));
        }
        let aux = low_rank(e_a, &block.p, block.lambda_of(a), &block.q)?;
        out.add_assign(&aux.map(|v| v.max(F::zero())));
    }
    Ok(out)
}

/// Graph form of [`amtb_forward`] for gradient checks and training.
pub fn amtb_forward_graph<F: Scalar>(
    g: &mut Graph<F>,
    e_r: Var,
    e_a: Option<Var>,
    w: Var,
    p: Var,
    q: Var,
    lambda_r: Var,
    lambda_a: Option<Var>,
) -> Var {
    let base = g.matmul(e_r, w);
    let ep = g.matmul(e_r, p);
    let ep = g.mul_row(ep, lambda_r);
    let d = g.matmul(ep, q);
    let mut out = g.add(base, d);
    if let (Some(e_a), Some(la)) = (e_a, lambda_a) {
        let ap = g.matmul(e_a, p);
        let ap = g.mul_row(ap, la);
        let ad = g.matmul(ap, q);
        let ad = g.relu(ad);
        out = g.add(out, ad);
    }
    out
}

/// Drops rank indices that are zero for both RGB and `a`. The other modalities'
/// singular values are sliced along but are meaningless for the compact block.
pub fn prune_block<F: Scalar>(block: &AdapterBlock<F>, a: VideoModality) -> AdapterBlock<F> {
    let r_l = block.lambda_of(VideoModality::Rgb);
    let a_l = block.lambda_of(a);
    let keep: Vec<usize> = (0..block.rank())
        .filter(|&i| r_l[i] != F::zero() || a_l[i] != F::zero())
        .collect();
    let p = block.p.transpose().gather_rows(&keep).transpose();
    let p = if keep.is_empty() { Tensor::zeros(&[block.p.rows(), 0]) } else { p };
    let q = block.q.gather_rows(&keep);
    let q = if keep.is_empty() { Tensor::zeros(&[0, block.q.cols()]) } else { q };
    let lambda = block.lambda.clone().map(|l| keep.iter().map(|&i| l[i]).collect());
    AdapterBlock {
        index: block.index,
        w: block.w.clone(),
        p,
        q,
        lambda,
        shared_mask: keep.iter().map(|&i| block.shared_mask[i]).collect(),
    }
}

/// `|w·g|`.
pub fn sensitivity<F: Scalar>(w: F, grad: F) -> F {
    (w * grad).abs()
}

/// Smoothed sensitivity and uncertainty of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState<F> {
    pub i_bar: Vec<F>,
    pub u_bar: Vec<F>,
    pub beta1: F,
    pub beta2: F,
    pub step: u64,
}

impl<F: Scalar> ImportanceState<F> {
    pub fn new(len: usize, beta1: F, beta2: F) -> Self {
        Self {
            i_bar: vec![F::zero(); len],
            u_bar: vec![F::zero(); len],
            beta1,
            beta2,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.i_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i_bar.is_empty()
    }
}

/// One EMA step: `Ī ← β1 Ī + (1−β1) I`, then `Ū ← β2 Ū + (1−β2) |Ī − I|`.
pub fn update_importance<F: Scalar>(state: &mut ImportanceState<F>, sens: &[F]) -> Result<()> {
    if sens.len() != state.len() {
        return Err(Error::shape("update_importance", state.len(), sens.len()));
    }
    let (b1, b2) = (state.beta1, state.beta2);
    for ((ib, ub), &i) in state.i_bar.iter_mut().zip(state.u_bar.iter_mut()).zip(sens) {
        *ib = b1 * *ib + (F::one() - b1) * i;
        *ub = b2 * *ub + (F::one() - b2) * (*ib - i).abs();
    }
    state.step += 1;
    Ok(())
}

/// `s = Ī·Ū` per parameter.
pub fn importance_score<F: Scalar>(state: &ImportanceState<F>) -> Vec<F> {
    state.i_bar.iter().zip(&state.u_bar).map(|(&i, &u)| i * u).collect()
}

/// Importance states of the `P`, `Q` and four `Λ` tensors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockImportance<F> {
    pub p: ImportanceState<F>,
    pub q: ImportanceState<F>,
    pub lambda: [ImportanceState<F>; 4],
}

impl<F: Scalar> BlockImportance<F> {
    pub fn new(block: &AdapterBlock<F>, beta1: F, beta2: F) -> Self {
        let r = block.rank();
        Self {
            p: ImportanceState::new(block.p.len(), beta1, beta2),
            q: ImportanceState::new(block.q.len(), beta1, beta2),
            lambda: std::array::from_fn(|_| ImportanceState::new(r, beta1, beta2)),
        }
    }

    /// Feeds the sensitivities `|w·g|` of the current parameter values and gradients.
    pub fn observe(&mut self, block: &AdapterBlock<F>, gp: &Tensor<F>, gq: &Tensor<F>, glambda: &[&[F]; 4]) -> Result<()> {
        let sens = |w: &[F], g: &[F]| -> Vec<F> { w.iter().zip(g).map(|(&w, &g)| sensitivity(w, g)).collect() };
        update_importance(&mut self.p, &sens(block.p.data(), gp.data()))?;
        update_importance(&mut self.q, &sens(block.q.data(), gq.data()))?;
        for (a, st) in self.lambda.iter_mut().enumerate() {
            update_importance(st, &sens(&block.lambda[a], glambda[a]))?;
        }
        Ok(())
    }

    /// Mean score of column `i` of `P` and row `i` of `Q`.
    fn vector_terms(&self, rank: usize) -> Vec<F> {
        let sp = importance_score(&self.p);
        let sq = importance_score(&self.q);
        let d1 = sp.len() / rank.max(1);
        let d2 = sq.len() / rank.max(1);
        (0..rank)
            .map(|i| {
                let pc: F = (0..d1).map(|j| sp[j * rank + i]).sum::<F>() / F::from_usize_lossy(d1.max(1));
                let qr: F = sq[i * d2..(i + 1) * d2].iter().copied().sum::<F>() / F::from_usize_lossy(d2.max(1));
                pc + qr
            })
            .collect()
    }
}

fn check_states<F: Scalar>(blocks: &[AdapterBlock<F>], states: &[BlockImportance<F>]) -> Result<()> {
    if blocks.len() != states.len() {
        return Err(Error::shape("importance", blocks.len(), states.len()));
    }
    for (b, s) in blocks.iter().zip(states) {
        if s.p.len() != b.p.len() || s.q.len() != b.q.len() || s.lambda.iter().any(|l| l.len() != b.rank()) {
            return Err(Error::shape("importance", b.rank(), s.lambda[0].len()));
        }
    }
    Ok(())
}

/// `S_{k,i} = Σ_a s(λ^a_{k,i}) + mean_j s(P_{k,ji}) + mean_j s(Q_{k,ij})`.
pub fn shared_importance<F: Scalar>(blocks: &[AdapterBlock<F>], states: &[BlockImportance<F>]) -> Result<Vec<Vec<F>>> {
    check_states(blocks, states)?;
    Ok(blocks
        .iter()
        .zip(states)
        .map(|(b, st)| {
            let r = b.rank();
            let vec_terms = st.vector_terms(r);
            let lam: Vec<Vec<F>> = st.lambda.iter().map(importance_score).collect();
            (0..r).map(|i| lam.iter().map(|l| l[i]).sum::<F>() + vec_terms[i]).collect()
        })
        .collect())
}

/// Sorts candidates by descending score; equal scores keep their (ascending) key order.
fn top_keys<K: Copy + Ord, F: Scalar>(mut cands: Vec<(K, F)>, keep: usize) -> Vec<K> {
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    cands.into_iter().take(keep).map(|c| c.0).collect()
}

/// Keeps the global top-`n` tuples; every other tuple has `λ` zeroed for all modalities.
pub fn allocate_shared<F: Scalar>(blocks: &mut [AdapterBlock<F>], scores: &[Vec<F>], n: usize) -> Result<()> {
    if scores.len() != blocks.len() || blocks.iter().zip(scores).any(|(b, s)| s.len() != b.rank()) {
        return Err(Error::shape("allocate_shared", blocks.len(), scores.len()));
    }
    let cands: Vec<((usize, usize), F)> = scores
        .iter()
        .enumerate()
        .flat_map(|(k, s)| s.iter().enumerate().map(move |(i, &v)| ((k, i), v)))
        .collect();
    let keep = top_keys(cands, n);
    for (k, b) in blocks.iter_mut().enumerate() {
        for i in 0..b.rank() {
            let on = keep.contains(&(k, i));
            b.shared_mask[i] = on;
            if !on {
                for l in b.lambda.iter_mut() {
                    l[i] = F::zero();
                }
            }
        }
    }
    Ok(())
}

/// One modality-specific candidate `(k, i, a)` and its score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecificScore<F> {
    pub block: usize,
    pub index: usize,
    pub modality: VideoModality,
    pub score: F,
}

/// `S^a_{k,i} = s(λ^a_{k,i}) + mean_j s(P_{k,ji}) + mean_j s(Q_{k,ij})` over shared survivors.
pub fn specific_importance<F: Scalar>(blocks: &[AdapterBlock<F>], states: &[BlockImportance<F>]) -> Result<Vec<SpecificScore<F>>> {
    check_states(blocks, states)?;
    let mut out = Vec::new();
    for (k, (b, st)) in blocks.iter().zip(states).enumerate() {
        let vec_terms = st.vector_terms(b.rank());
        let lam: Vec<Vec<F>> = st.lambda.iter().map(importance_score).collect();
        for i in (0..b.rank()).filter(|&i| b.shared_mask[i]) {
            for a in VideoModality::ALL {
                out.push(SpecificScore {
                    block: k,
                    index: i,
                    modality: a,
                    score: lam[a.index()][i] + vec_terms[i],
                });
            }
        }
    }
    Ok(out)
}

/// Keeps the global top-`m` (tuple, modality) singular values, zeroing the rest.
pub fn allocate_specific<F: Scalar>(blocks: &mut [AdapterBlock<F>], scores: &[SpecificScore<F>], m: usize) -> Result<()> {
    let cands: Vec<((usize, usize, VideoModality), F)> =
        scores.iter().map(|s| ((s.block, s.index, s.modality), s.score)).collect();
    if let Some(bad) = cands.iter().find(|c| c.0 .0 >= blocks.len() || c.0 .1 >= blocks[c.0 .0].rank()) {
        return Err(Error::range("allocate_specific", format!("candidate {:?} outside blocks", bad.0)));
    }
    let keep = top_keys(cands.clone(), m);
    for ((k, i, a), _) in cands {
        if !keep.contains(&(k, i, a)) {
            blocks[k].lambda[a.index()][i] = F::zero();
        }
    }
    // Only scored tuples may carry rank.
    for b in blocks.iter_mut() {
        for i in 0..b.rank() {
            if !b.shared_mask[i] {
                for l in b.lambda.iter_mut() {
                    l[i] = F::zero();
                }
            }
        }
    }
    Ok(())
}

/// Block-average budgets; totals scale with the number of blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankBudget {
    pub n_hat: usize,
    pub m_hat: usize,
    pub blocks: usize,
}

impl RankBudget {
    pub fn n(&self) -> usize {
        self.n_hat * self.blocks
    }

    pub fn m(&self) -> usize {
        self.m_hat * self.blocks
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        if self.n() > rank * self.blocks {
            return Err(Error::Config(format!("shared budget {} exceeds {} tuples", self.n(), rank * self.blocks)));
        }
        if self.m() > 4 * self.n() {
            return Err(Error::Config(format!("specific budget {} exceeds 4n = {}", self.m(), 4 * self.n())));
        }
        Ok(())
    }
}

/// Shared then specific allocation with the given budget.
pub fn allocate<F: Scalar>(blocks: &mut [AdapterBlock<F>], states: &[BlockImportance<F>], budget: RankBudget) -> Result<()> {
    let s = shared_importance(blocks, states)?;
    allocate_shared(blocks, &s, budget.n())?;
    let sp = specific_importance(blocks, states)?;
    allocate_specific(blocks, &sp, budget.m())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocationAction {
    None,
    Allocate,
}

/// `interval == 0` disables periodic allocation.
pub fn allocation_schedule(step: usize, warmup: usize, interval: usize) -> AllocationAction {
    if interval > 0 && step >= warmup && step.is_multiple_of(interval) {
        AllocationAction::Allocate
    } else {
        AllocationAction::None
    }
}

/// Per-modality nonzero rank counts across all blocks.
pub fn rank_histogram<F: Scalar>(blocks: &[AdapterBlock<F>]) -> [usize; 4] {
    VideoModality::ALL.map(|a| blocks.iter().map(|b| b.nonzero_count(a)).sum())
}

/// Number of shared tuples holding rank.
pub fn surviving_tuples<F: Scalar>(blocks: &[AdapterBlock<F>]) -> usize {
    blocks.iter().map(|b| b.shared_mask.iter().filter(|&&m| m).count()).sum()
}
