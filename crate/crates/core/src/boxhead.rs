//! Reference-adaptive box head.
//!
//! Context tokens are split by attention into target, distractor and background
//! sets. Each set yields an aggregated token that refines a prototype; patches are
//! scored against the three prototypes, and the resulting target-similarity map
//! multiplies the center map before decoding.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::normal_tensor;
use crate::error::{Error, Result};
use crate::losses::{BBox, GridSpec};
use crate::numerics::{masked_softmax, AdditiveMask, Tensor};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Cumulative-probability threshold separating distractors from background.
    pub beta: f64,
    /// Use inclusive prefix sums for the threshold rule.
    pub inclusive: bool,
    pub tau: f64,
    pub confidence_threshold: f64,
    /// Frames between cache refreshes; `None` never refreshes after initialization.
    pub update_interval: Option<usize>,
    pub memory_capacity: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            beta: 0.75,
            inclusive: false,
            tau: 0.07,
            confidence_threshold: 0.5,
            update_interval: Some(20),
            memory_capacity: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBranch {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Head parameter handles: learned distractor/background prototypes and the
/// center, offset and size branches.
#[derive(Clone, Debug)]
pub struct HeadIds {
    pub proto_d: ParamId,
    pub proto_b: ParamId,
    pub center: ConvBranch,
    pub offset: ConvBranch,
    pub size: ConvBranch,
}

pub fn init_head<F: Scalar, R: Rng>(dim: usize, store: &mut ParamStore<F>, rng: &mut R) -> HeadIds {
    let g = ParamGroup::Head;
    let proto_d = store.add("head.proto_d", normal_tensor(rng, &[1, dim], 0.5), g);
    let proto_b = store.add("head.proto_b", normal_tensor(rng, &[1, dim], 0.5), g);
    let hidden = (dim / 2).max(1);
    let mut branch = |name: &str, out: usize, bias: f64, store: &mut ParamStore<F>| {
        let s1 = 1.0 / ((9 * dim) as f64).sqrt();
        let s2 = 1.0 / ((9 * hidden) as f64).sqrt();
        ConvBranch {
            w1: store.add(format!("head.{name}.conv1.w"), normal_tensor(rng, &[9 * dim, hidden], s1), g),
            b1: store.add(format!("head.{name}.conv1.b"), Tensor::zeros(&[1, hidden]), g),
            w2: store.add(format!("head.{name}.conv2.w"), normal_tensor(rng, &[9 * hidden, out], s2), g),
            b2: store.add(format!("head.{name}.conv2.b"), Tensor::filled(&[1, out], F::lit(bias)), g),
        }
    };
    let center = branch("center", 1, -2.0, store);
    let offset = branch("offset", 2, 0.0, store);
    let size = branch("size", 2, -1.0, store);
    HeadIds {
        proto_d,
        proto_b,
        center,
        offset,
        size,
    }
}

/// In-box and out-box attention of the semantic token over context tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct InOutAttention<F> {
    pub a_in: Vec<F>,
    pub a_out: Vec<F>,
    pub t_t: Vec<F>,
}

fn check_context<F: Scalar>(token: &[F], e_t: &Tensor<F>, in_box: &[bool], op: &'static str) -> Result<()> {
    if e_t.cols() != token.len() || e_t.rows() != in_box.len() {
        return Err(Error::shape(
            op,
            format!("{}x{}", in_box.len(), token.len()),
            format!("{}x{}", e_t.rows(), e_t.cols()),
        ));
    }
    if !in_box.iter().any(|&b| b) {
        return Err(Error::degenerate(op, "empty in-box set"));
    }
    Ok(())
}

fn attention_logits<F: Scalar>(token: &[F], e_t: &Tensor<F>) -> Tensor<F> {
    let t = Tensor::row_vector(token.to_vec());
    let inv = F::one() / F::from_usize_lossy(token.len()).sqrt();
    t.matmul_t(e_t).expect("checked dims").scale(inv)
}

fn aggregate<F: Scalar>(weights: &Tensor<F>, e_t: &Tensor<F>) -> Vec<F> {
    weights.matmul(e_t).expect("checked dims").into_data()
}

pub fn in_out_attention<F: Scalar>(token: &[F], e_t: &Tensor<F>, in_box: &[bool]) -> Result<InOutAttention<F>> {
    check_context(token, e_t, in_box, "in_out_attention")?;
    let logits = attention_logits(token, e_t);
    let m_in = AdditiveMask::row_from_open(in_box);
    let out_open: Vec<bool> = in_box.iter().map(|b| !b).collect();
    let m_out = AdditiveMask::row_from_open(&out_open);
    let a_in = masked_softmax(&logits, &m_in)?;
    let a_out = masked_softmax(&logits, &m_out)?;
    let t_t = aggregate(&a_in, e_t);
    Ok(InOutAttention {
        a_in: a_in.into_data(),
        a_out: a_out.into_data(),
        t_t,
    })
}

/// Distractor membership of each context token (in-box tokens are never distractors).
///
/// Out-box tokens are ranked by descending probability, ties by index. A token is a
/// distractor iff the probability mass ranked strictly above it (or including it, with
/// `inclusive`) is below `beta`.
pub fn distractor_set<F: Scalar>(a_out: &[F], in_box: &[bool], beta: F, inclusive: bool) -> Vec<bool> {
    let mut order: Vec<usize> = (0..a_out.len()).filter(|&i| !in_box[i]).collect();
    order.sort_by(|&a, &b| {
        a_out[b].partial_cmp(&a_out[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut is_d = vec![false; a_out.len()];
    let mut prefix = F::zero();
    for i in order {
        let mass = if inclusive { prefix + a_out[i] } else { prefix };
        is_d[i] = mass < beta;
        prefix += a_out[i];
    }
    is_d
}

/// `(M_d, M̃_d)`: distractor and background masks over the context tokens.
pub fn split_distractor_mask<F: Scalar>(
    a_out: &[F],
    in_box: &[bool],
    beta: F,
    inclusive: bool,
) -> Result<(AdditiveMask, AdditiveMask)> {
    if a_out.len() != in_box.len() {
        return Err(Error::shape("split_distractor_mask", in_box.len(), a_out.len()));
    }
    if !(beta >= F::zero() && beta <= F::one()) {
        return Err(Error::range("split_distractor_mask", "beta outside [0, 1]"));
    }
    let d = distractor_set(a_out, in_box, beta, inclusive);
    let bg: Vec<bool> = (0..d.len()).map(|i| !in_box[i] && !d[i]).collect();
    Ok((AdditiveMask::row_from_open(&d), AdditiveMask::row_from_open(&bg)))
}

/// Aggregated target, distractor and background tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTokens<F> {
    pub t_t: Vec<F>,
    pub t_d: Vec<F>,
    pub t_b: Vec<F>,
}

impl<F: Scalar> ScenarioTokens<F> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            t_t: vec![F::zero(); dim],
            t_d: vec![F::zero(); dim],
            t_b: vec![F::zero(); dim],
        }
    }
}

/// An empty distractor (or background) set yields a zero token.
pub fn scenario_tokens<F: Scalar>(
    token: &[F],
    e_t: &Tensor<F>,
    in_box: &[bool],
    beta: F,
    inclusive: bool,
) -> Result<ScenarioTokens<F>> {
    let io = in_out_attention(token, e_t, in_box)?;
    let (m_d, m_b) = split_distractor_mask(&io.a_out, in_box, beta, inclusive)?;
    let logits = attention_logits(token, e_t);
    let t_d = aggregate(&masked_softmax(&logits, &m_d)?, e_t);
    let t_b = aggregate(&masked_softmax(&logits, &m_b)?, e_t);
    Ok(ScenarioTokens { t_t: io.t_t, t_d, t_b })
}

/// Cosine of `f` with `p`, zero if either vector has zero norm.
fn safe_cosine<F: Scalar>(f: &[F], p: &[F]) -> F {
    let nf = f.iter().map(|&v| v * v).sum::<F>().sqrt();
    let np = p.iter().map(|&v| v * v).sum::<F>().sqrt();
    if nf == F::zero() || np == F::zero() {
        return F::zero();
    }
    let c = f.iter().zip(p).map(|(&a, &b)| a * b).sum::<F>() / (nf * np);
    c.max(-F::one()).min(F::one())
}

/// Per-patch `sigmoid(α̂_t − max(α̂_d, α̂_b, 0))` with `P_t = T + T_t`,
/// `P_d = P̂_d + T_d`, `P_b = P̂_b + T_b`.
pub fn target_score_map<F: Scalar>(
    search: &Tensor<F>,
    semantic: &[F],
    proto_d: &[F],
    proto_b: &[F],
    tokens: &ScenarioTokens<F>,
    tau: F,
) -> Result<Vec<F>> {
    if !(tau > F::zero()) {
        return Err(Error::range("target_score_map", "tau must be positive"));
    }
    let c = semantic.len();
    if search.cols() != c || [proto_d.len(), proto_b.len(), tokens.t_t.len(), tokens.t_d.len(), tokens.t_b.len()].iter().any(|&l| l != c) {
        return Err(Error::shape("target_score_map", c, search.cols()));
    }
    let add = |a: &[F], b: &[F]| -> Vec<F> { a.iter().zip(b).map(|(&x, &y)| x + y).collect() };
    let p_t = add(semantic, &tokens.t_t);
    let p_d = add(proto_d, &tokens.t_d);
    let p_b = add(proto_b, &tokens.t_b);
    let mut zero_rows = 0usize;
    let out = (0..search.rows())
        .map(|r| {
            let f = search.row(r);
            if f.iter().all(|v| *v == F::zero()) {
                zero_rows += 1;
            }
            let at = safe_cosine(f, &p_t) / tau;
            let ab = (safe_cosine(f, &p_d) / tau).max(safe_cosine(f, &p_b) / tau).max(F::zero());
            F::one() / (F::one() + (ab - at).exp())
        })
        .collect();
    if zero_rows > 0 {
        log::debug!("target_score_map: {zero_rows} zero-norm patch embeddings scored as similarity 0");
    }
    Ok(out)
}

/// Head maps over the `g×g` search grid, row-major. `offset` and `size` hold two
/// values per cell (x then y).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps<F> {
    pub grid: usize,
    pub center: Vec<F>,
    pub offset: Vec<[F; 2]>,
    pub size: Vec<[F; 2]>,
    pub target: Vec<F>,
}

/// Argmax of `Ĉ·L̂` (ties to the smallest row-major index), then
/// `cx = (x_c + Ô_0)·p`, `cy = (y_c + Ô_1)·p`, `w = Ŝ_0·H_x`, `h = Ŝ_1·W_x`.
pub fn decode_box<F: Scalar>(maps: &ScoreMaps<F>, patch: usize, h_x: usize, w_x: usize) -> Result<(BBox<F>, F)> {
    let n = maps.grid * maps.grid;
    if [maps.center.len(), maps.offset.len(), maps.size.len(), maps.target.len()].iter().any(|&l| l != n) {
        return Err(Error::shape("decode_box", n, maps.center.len()));
    }
    let mut best = 0;
    let mut best_v = maps.center[0] * maps.target[0];
    for i in 1..n {
        let v = maps.center[i] * maps.target[i];
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    let (yc, xc) = (best / maps.grid, best % maps.grid);
    let p = F::from_usize_lossy(patch);
    let o = maps.offset[best];
    let s = maps.size[best];
    let b = BBox::new(
        (F::from_usize_lossy(xc) + o[0]) * p,
        (F::from_usize_lossy(yc) + o[1]) * p,
        s[0] * F::from_usize_lossy(h_x),
        s[1] * F::from_usize_lossy(w_x),
    );
    Ok((b, best_v))
}

/// Graph handles of the head outputs; every map is `N_x×k`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub center_logit: Var,
    pub center: Var,
    pub offset: Var,
    pub size: Var,
    pub target_logit: Var,
    pub target: Var,
}

fn conv_branch<F: Scalar>(g: &mut Graph<F>, br: &ConvBranch, x: Var, grid: usize) -> Var {
    let cols = g.im2col3(x, grid);
    let (w1, b1) = (g.param(br.w1), g.param(br.b1));
    let h = g.linear(cols, w1, b1);
    let h = g.relu(h);
    let cols2 = g.im2col3(h, grid);
    let (w2, b2) = (g.param(br.w2), g.param(br.b2));
    g.linear(cols2, w2, b2)
}

/// Center, offset and size maps (after sigmoid) plus the center logits.
pub fn regression_head_graph<F: Scalar>(g: &mut Graph<F>, ids: &HeadIds, search: Var, grid: usize) -> (Var, Var, Var, Var) {
    let cl = conv_branch(g, &ids.center, search, grid);
    let c = g.sigmoid(cl);
    let ol = conv_branch(g, &ids.offset, search, grid);
    let o = g.sigmoid(ol);
    let sl = conv_branch(g, &ids.size, search, grid);
    let s = g.sigmoid(sl);
    (cl, c, o, s)
}

/// Value-level regression head: `(Ĉ, Ô, Ŝ)`.
pub fn regression_head<F: Scalar>(search: &Tensor<F>, store: &ParamStore<F>, ids: &HeadIds) -> Result<(Vec<F>, Vec<[F; 2]>, Vec<[F; 2]>)> {
    let n = search.rows();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::shape("regression_head", "square token count", n));
    }
    let mut g = Graph::new(store);
    let x = g.constant(search.clone());
    let (_, c, o, s) = regression_head_graph(&mut g, ids, x, grid);
    let pairs = |t: &Tensor<F>| (0..n).map(|i| [t.at(i, 0), t.at(i, 1)]).collect();
    Ok((g.value(c).data().to_vec(), pairs(g.value(o)), pairs(g.value(s))))
}

/// Where the head gets its scenario tokens from.
pub enum ScenarioSource<'a, F> {
    /// No context: all three tokens are zero.
    None,
    /// Context embeddings on the graph, with their in-box mask.
    Live { context: Var, in_box: &'a [bool] },
    /// Tokens cached by the context memory.
    Cached(&'a ScenarioTokens<F>),
}

fn masked_aggregate<F: Scalar>(g: &mut Graph<F>, logits: Var, mask: &AdditiveMask, ctx: Var) -> Var {
    let a = g.masked_softmax(logits, mask);
    g.matmul(a, ctx)
}

/// Scenario tokens on the graph; gradients flow through attention, the split is fixed.
pub fn scenario_tokens_graph<F: Scalar>(
    g: &mut Graph<F>,
    semantic: Var,
    context: Var,
    in_box: &[bool],
    beta: F,
    inclusive: bool,
) -> Result<(Var, Var, Var)> {
    check_context(g.value(semantic).data(), g.value(context), in_box, "scenario_tokens")?;
    let c = g.value(semantic).cols();
    let logits = g.matmul_t(semantic, context);
    let logits = g.scale(logits, F::one() / F::from_usize_lossy(c).sqrt());
    let m_in = AdditiveMask::row_from_open(in_box);
    let out_open: Vec<bool> = in_box.iter().map(|b| !b).collect();
    let a_out = masked_softmax(g.value(logits), &AdditiveMask::row_from_open(&out_open))?;
    let (m_d, m_b) = split_distractor_mask(a_out.data(), in_box, beta, inclusive)?;
    let t_t = masked_aggregate(g, logits, &m_in, context);
    let t_d = masked_aggregate(g, logits, &m_d, context);
    let t_b = masked_aggregate(g, logits, &m_b, context);
    Ok((t_t, t_d, t_b))
}

/// Full head on the graph: regression maps and the target-similarity map.
pub fn head_forward<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &HeadConfig,
    ids: &HeadIds,
    search: Var,
    semantic: Var,
    scenario: ScenarioSource<'_, F>,
) -> Result<HeadOutput> {
    let n = g.value(search).rows();
    let c = g.value(search).cols();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::shape("head_forward", "square token count", n));
    }
    let (center_logit, center, offset, size) = regression_head_graph(g, ids, search, grid);
    let (t_t, t_d, t_b) = match scenario {
        ScenarioSource::None => {
            let z = || Tensor::zeros(&[1, c]);
            (g.constant(z()), g.constant(z()), g.constant(z()))
        }
        ScenarioSource::Live { context, in_box } => {
            scenario_tokens_graph(g, semantic, context, in_box, F::lit(cfg.beta), cfg.inclusive)?
        }
        ScenarioSource::Cached(tok) => (
            g.constant(Tensor::row_vector(tok.t_t.clone())),
            g.constant(Tensor::row_vector(tok.t_d.clone())),
            g.constant(Tensor::row_vector(tok.t_b.clone())),
        ),
    };
    let p_t = g.add(semantic, t_t);
    let pd = g.param(ids.proto_d);
    let p_d = g.add(pd, t_d);
    let pb = g.param(ids.proto_b);
    let p_b = g.add(pb, t_b);
    let protos = g.concat_rows(&[p_t, p_d, p_b]);
    let protos = g.normalize_rows(protos);
    let feats = g.normalize_rows(search);
    let sims = g.matmul_t(feats, protos);
    let sims = g.scale(sims, F::one() / F::lit(cfg.tau));
    let st = g.slice_cols(sims, 0, 1);
    let sd = g.slice_cols(sims, 1, 1);
    let sb = g.slice_cols(sims, 2, 1);
    let zero = g.constant(Tensor::zeros(&[n, 1]));
    let bg = g.max3(sd, sb, zero);
    let target_logit = g.sub(st, bg);
    let target = g.sigmoid(target_logit);
    Ok(HeadOutput {
        center_logit,
        center,
        offset,
        size,
        target_logit,
        target,
    })
}

/// Reads the head maps off a finished graph.
pub fn score_maps<F: Scalar>(g: &Graph<F>, out: &HeadOutput) -> ScoreMaps<F> {
    let c = g.value(out.center);
    let n = c.rows();
    let o = g.value(out.offset);
    let s = g.value(out.size);
    ScoreMaps {
        grid: (n as f64).sqrt().round() as usize,
        center: c.data().to_vec(),
        offset: (0..n).map(|i| [o.at(i, 0), o.at(i, 1)]).collect(),
        size: (0..n).map(|i| [s.at(i, 0), s.at(i, 1)]).collect(),
        target: g.value(out.target).data().to_vec(),
    }
}

/// One stored context frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<F> {
    pub embeddings: Tensor<F>,
    pub in_box: Vec<bool>,
}

impl<F: Scalar> MemoryEntry<F> {
    /// Entry whose in-box mask is derived from `bbox` on `grid`.
    pub fn from_box(embeddings: Tensor<F>, bbox: &BBox<F>, grid: GridSpec) -> Self {
        Self {
            embeddings,
            in_box: grid.in_box_mask(bbox),
        }
    }
}

/// Template plus recent high-confidence frames, and the scenario tokens derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMemory<F> {
    pub entries: Vec<MemoryEntry<F>>,
    pub cached: ScenarioTokens<F>,
    pub frames_since_update: usize,
    pub refreshes: usize,
}

impl<F: Scalar> ContextMemory<F> {
    /// Starts from the template entry and computes the initial cache.
    pub fn new(template: MemoryEntry<F>, semantic: &[F], cfg: &HeadConfig) -> Result<Self> {
        let mut m = Self {
            entries: vec![template],
            cached: ScenarioTokens::zeros(semantic.len()),
            frames_since_update: 0,
            refreshes: 0,
        };
        m.refresh(semantic, cfg)?;
        Ok(m)
    }

    /// Memory without any entry; tokens stay zero until a frame is stored and refreshed.
    pub fn empty(dim: usize) -> Self {
        Self {
            entries: Vec::new(),
            cached: ScenarioTokens::zeros(dim),
            frames_since_update: 0,
            refreshes: 0,
        }
    }

    fn refresh(&mut self, semantic: &[F], cfg: &HeadConfig) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let parts: Vec<&Tensor<F>> = self.entries.iter().map(|e| &e.embeddings).collect();
        let e_t = Tensor::concat_rows(&parts)?;
        let in_box: Vec<bool> = self.entries.iter().flat_map(|e| e.in_box.iter().copied()).collect();
        self.cached = scenario_tokens(semantic, &e_t, &in_box, F::lit(cfg.beta), cfg.inclusive)?;
        self.refreshes += 1;
        Ok(())
    }

    /// Advances one frame: stores the frame if `confidence` clears the threshold and
    /// refreshes the cache when the interval elapses.
    pub fn update_context(&mut self, entry: MemoryEntry<F>, confidence: F, semantic: &[F], cfg: &HeadConfig) -> Result<()> {
        self.frames_since_update += 1;
        if confidence > F::lit(cfg.confidence_threshold) {
            let cap = cfg.memory_capacity.max(1);
            if self.entries.len() >= cap {
                // keep the template (first entry), drop the oldest context frame
                let drop = if cap == 1 { 0 } else { 1 };
                self.entries.remove(drop);
            }
            self.entries.push(entry);
        }
        if let Some(interval) = cfg.update_interval {
            if self.frames_since_update >= interval.max(1) {
                self.refresh(semantic, cfg)?;
                self.frames_since_update = 0;
            }
        }
        Ok(())
    }
}
