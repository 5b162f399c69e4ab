//! Reference-generalized feature extractor.
//!
//! The joint token sequence is laid out as
//! `[T_l | E_l (N_l) | T_v | E_z (N_z) | E_az (N_z) | E_x (N_x) | E_ax (N_x)]`.
//! Language and vision are encoded by two independent shallow stacks, then a
//! deep stack lets every available token interact. Unavailable tokens are
//! zero-filled and masked as both queries and keys, so they stay zero.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::{AdditiveMask, Tensor};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rama::{AdapterIds, Projection};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReferenceModality {
    Bbox,
    Nl,
    NlBbox,
}

impl ReferenceModality {
    pub const ALL: [ReferenceModality; 3] = [Self::Bbox, Self::Nl, Self::NlBbox];

    pub fn has_language(self) -> bool {
        matches!(self, Self::Nl | Self::NlBbox)
    }

    pub fn has_template(self) -> bool {
        matches!(self, Self::Bbox | Self::NlBbox)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bbox => "bbox",
            Self::Nl => "nl",
            Self::NlBbox => "nl+bbox",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bbox" => Some(Self::Bbox),
            "nl" => Some(Self::Nl),
            "nl+bbox" | "nl_bbox" | "nlbbox" => Some(Self::NlBbox),
            _ => None,
        }
    }
}

/// RGB is the base stream; the other three are auxiliary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VideoModality {
    Rgb,
    Depth,
    Thermal,
    Event,
}

impl VideoModality {
    pub const ALL: [VideoModality; 4] = [Self::Rgb, Self::Depth, Self::Thermal, Self::Event];
    pub const AUXILIARY: [VideoModality; 3] = [Self::Depth, Self::Thermal, Self::Event];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Self::Rgb => 'R',
            Self::Depth => 'D',
            Self::Thermal => 'T',
            Self::Event => 'E',
        }
    }

    pub fn is_auxiliary(self) -> bool {
        self != Self::Rgb
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    LangSemantic,
    Lang,
    VisSemantic,
    Template,
    AuxTemplate,
    Search,
    AuxSearch,
}

impl Segment {
    pub const ORDER: [Segment; 7] = [
        Self::LangSemantic,
        Self::Lang,
        Self::VisSemantic,
        Self::Template,
        Self::AuxTemplate,
        Self::Search,
        Self::AuxSearch,
    ];

    pub fn is_language(self) -> bool {
        matches!(self, Self::LangSemantic | Self::Lang)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    ShallowLang,
    ShallowVision,
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageType {
    Template,
    Search,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub shallow_layers: usize,
    pub deep_layers: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub max_text_len: usize,
    pub vocab: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 2,
            shallow_layers: 2,
            deep_layers: 2,
            patch: 4,
            template_size: 16,
            search_size: 32,
            max_text_len: 8,
            vocab: 64,
            channels: 3,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.patch == 0 || !self.template_size.is_multiple_of(self.patch) || !self.search_size.is_multiple_of(self.patch) {
            return Err(Error::Config("image sizes must be multiples of the patch size".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        Ok(())
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / self.patch).pow(2)
    }

    pub fn grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn total_layers(&self) -> usize {
        self.shallow_layers + self.deep_layers
    }

    pub fn sequence_len(&self) -> usize {
        2 + self.max_text_len + 2 * self.template_tokens() + 2 * self.search_tokens()
    }
}

/// Index ranges of the joint sequence plus per-row availability.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    ranges: [Range<usize>; 7],
    available: Vec<bool>,
}

impl TokenLayout {
    pub fn new(cfg: &EncoderConfig, reference: ReferenceModality, lang_len: usize, has_aux: bool) -> Self {
        let lens = [
            1,
            cfg.max_text_len,
            1,
            cfg.template_tokens(),
            cfg.template_tokens(),
            cfg.search_tokens(),
            cfg.search_tokens(),
        ];
        let mut start = 0;
        let ranges: [Range<usize>; 7] = std::array::from_fn(|i| {
            let r = start..start + lens[i];
            start += lens[i];
            r
        });
        let mut available = vec![false; start];
        let nl = reference.has_language();
        let tmpl = reference.has_template();
        for (seg, r) in Segment::ORDER.iter().zip(&ranges) {
            let on = match seg {
                Segment::LangSemantic => nl,
                Segment::Lang => nl,
                Segment::VisSemantic | Segment::Search => true,
                Segment::Template => tmpl,
                Segment::AuxTemplate => tmpl && has_aux,
                Segment::AuxSearch => has_aux,
            };
            for (k, row) in r.clone().enumerate() {
                available[row] = on && (*seg != Segment::Lang || k < lang_len);
            }
        }
        Self { ranges, available }
    }

    pub fn range(&self, seg: Segment) -> Range<usize> {
        let i = Segment::ORDER.iter().position(|s| *s == seg).expect("segment");
        self.ranges[i].clone()
    }

    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    pub fn is_available(&self, row: usize) -> bool {
        self.available[row]
    }

    pub fn available(&self) -> &[bool] {
        &self.available
    }

    pub fn segment_available(&self, seg: Segment) -> bool {
        self.range(seg).any(|r| self.available[r])
    }

    pub fn segment_of(&self, row: usize) -> Segment {
        Segment::ORDER[self.ranges.iter().position(|r| r.contains(&row)).expect("row in layout")]
    }

    /// Aux partner of an RGB template/search row.
    pub fn aux_partner(&self, row: usize) -> Option<usize> {
        let (t, at, s, asr) = (
            self.range(Segment::Template),
            self.range(Segment::AuxTemplate),
            self.range(Segment::Search),
            self.range(Segment::AuxSearch),
        );
        let partner = if t.contains(&row) {
            at.start + (row - t.start)
        } else if s.contains(&row) {
            asr.start + (row - s.start)
        } else {
            return None;
        };
        (self.available[row] && self.available[partner]).then_some(partner)
    }
}

/// Attention mask of one layer kind for one reference modality.
pub fn build_attention_mask(reference: ReferenceModality, layout: &TokenLayout, kind: LayerKind) -> Result<AdditiveMask> {
    if !reference.has_template() && layout.segment_available(Segment::Template) {
        return Err(Error::Config("template available for a language-only reference".into()));
    }
    if !reference.has_language() && layout.segment_available(Segment::LangSemantic) {
        return Err(Error::Config("language available for a box-only reference".into()));
    }
    let n = layout.len();
    let group_ok = |row: usize| -> bool {
        if !layout.is_available(row) {
            return false;
        }
        let lang = layout.segment_of(row).is_language();
        match kind {
            LayerKind::ShallowLang => lang,
            LayerKind::ShallowVision => !lang,
            LayerKind::Deep => true,
        }
    };
    let ok: Vec<bool> = (0..n).map(group_ok).collect();
    let mut blocked = vec![true; n * n];
    for i in 0..n {
        if !ok[i] {
            continue;
        }
        for j in 0..n {
            if ok[j] {
                blocked[i * n + j] = false;
            }
        }
    }
    AdditiveMask::from_blocked(n, n, blocked)
}

/// Parameter handles of one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerIds {
    pub fn weight(&self, proj: Projection) -> (ParamId, ParamId) {
        match proj {
            Projection::Query => (self.wq, self.bq),
            Projection::Key => (self.wk, self.bk),
            Projection::Value => (self.wv, self.bv),
            Projection::MlpIn => (self.w1, self.b1),
        }
    }
}

/// Which layer of the encoder a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerRef {
    ShallowLang(usize),
    ShallowVision(usize),
    Deep(usize),
}

impl LayerRef {
    pub fn tag(self) -> String {
        match self {
            Self::ShallowLang(i) => format!("shallow_lang.{i}"),
            Self::ShallowVision(i) => format!("shallow_vis.{i}"),
            Self::Deep(i) => format!("deep.{i}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub lang_table: ParamId,
    pub lang_pos: ParamId,
    pub lang_token: ParamId,
    pub vis_token: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub aux_patch_w: ParamId,
    pub aux_patch_b: ParamId,
    pub shallow_lang: Vec<LayerIds>,
    pub shallow_vis: Vec<LayerIds>,
    pub deep: Vec<LayerIds>,
}

impl EncoderIds {
    pub fn layer(&self, r: LayerRef) -> &LayerIds {
        match r {
            LayerRef::ShallowLang(i) => &self.shallow_lang[i],
            LayerRef::ShallowVision(i) => &self.shallow_vis[i],
            LayerRef::Deep(i) => &self.deep[i],
        }
    }
}

pub(crate) fn normal_tensor<F: Scalar, R: Rng>(rng: &mut R, dims: &[usize], std: f64) -> Tensor<F> {
    let n: usize = dims.iter().product();
    let dist = Normal::new(0.0, std).expect("std");
    Tensor::new(dims.to_vec(), (0..n).map(|_| F::lit(dist.sample(rng))).collect()).expect("dims")
}

fn init_layer<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, prefix: &str, c: usize, hidden: usize) -> LayerIds {
    let g = ParamGroup::Encoder;
    let sc = 1.0 / (c as f64).sqrt();
    let sh = 1.0 / (hidden as f64).sqrt();
    let mut lin = |name: &str, rows: usize, cols: usize, std: f64, store: &mut ParamStore<F>| {
        let w = store.add(format!("{prefix}.{name}.w"), normal_tensor(rng, &[rows, cols], std), g);
        let b = store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[1, cols]), g);
        (w, b)
    };
    let ln1_g = store.add(format!("{prefix}.ln1.g"), Tensor::filled(&[1, c], F::one()), g);
    let ln1_b = store.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[1, c]), g);
    let (wq, bq) = lin("q", c, c, sc, store);
    let (wk, bk) = lin("k", c, c, sc, store);
    let (wv, bv) = lin("v", c, c, sc, store);
    let (wo, bo) = lin("o", c, c, sc * 0.5, store);
    let ln2_g = store.add(format!("{prefix}.ln2.g"), Tensor::filled(&[1, c], F::one()), g);
    let ln2_b = store.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[1, c]), g);
    let (w1, b1) = lin("mlp1", c, hidden, sc, store);
    let (w2, b2) = lin("mlp2", hidden, c, sh * 0.5, store);
    LayerIds {
        ln1_g,
        ln1_b,
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        ln2_g,
        ln2_b,
        w1,
        b1,
        w2,
        b2,
    }
}

/// Registers every encoder parameter in `store`.
pub fn init_encoder<F: Scalar, R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore<F>, rng: &mut R) -> EncoderIds {
    let c = cfg.dim;
    let g = ParamGroup::Encoder;
    let emb_std = 0.5;
    let lang_table = store.add("enc.lang_table", normal_tensor(rng, &[cfg.vocab, c], emb_std), g);
    let lang_pos = store.add("enc.lang_pos", normal_tensor(rng, &[cfg.max_text_len, c], 0.1), g);
    let lang_token = store.add("enc.lang_token", normal_tensor(rng, &[1, c], emb_std), g);
    let vis_token = store.add("enc.vis_token", normal_tensor(rng, &[1, c], emb_std), g);
    let pd = cfg.patch_dim();
    let patch_w = store.add("enc.patch.w", normal_tensor(rng, &[pd, c], 1.0 / (pd as f64).sqrt()), g);
    let patch_b = store.add("enc.patch.b", Tensor::zeros(&[1, c]), g);
    let pos_template = store.add("enc.pos_template", normal_tensor(rng, &[cfg.template_tokens(), c], 0.1), g);
    let pos_search = store.add("enc.pos_search", normal_tensor(rng, &[cfg.search_tokens(), c], 0.1), g);
    let hidden = c * cfg.mlp_ratio;
    let shallow_lang = (0..cfg.shallow_layers)
        .map(|i| init_layer(store, rng, &format!("enc.{}", LayerRef::ShallowLang(i).tag()), c, hidden))
        .collect();
    let shallow_vis = (0..cfg.shallow_layers)
        .map(|i| init_layer(store, rng, &format!("enc.{}", LayerRef::ShallowVision(i).tag()), c, hidden))
        .collect();
    let deep = (0..cfg.deep_layers)
        .map(|i| init_layer(store, rng, &format!("enc.{}", LayerRef::Deep(i).tag()), c, hidden))
        .collect();
    let aux_patch_w = store.add("aux.patch.w", Tensor::zeros(&[pd, c]), ParamGroup::Auxiliary);
    let aux_patch_b = store.add("aux.patch.b", Tensor::zeros(&[1, c]), ParamGroup::Auxiliary);
    EncoderIds {
        lang_table,
        lang_pos,
        lang_token,
        vis_token,
        patch_w,
        patch_b,
        pos_template,
        pos_search,
        aux_patch_w,
        aux_patch_b,
        shallow_lang,
        shallow_vis,
        deep,
    }
}

/// Flattens an `H×W×ch` frame into row-major `p×p×ch` patches.
pub fn patchify<F: Scalar>(frame: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let d = frame.dims();
    if d.len() != 3 {
        return Err(Error::shape("patchify", "H×W×ch", format!("{d:?}")));
    }
    let (h, w, ch) = (d[0], d[1], d[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", format!("multiples of {p}"), format!("{h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w * ch);
    let src = frame.data();
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * w + px * p) * ch;
                data.extend_from_slice(&src[start..start + p * ch]);
            }
        }
    }
    Ok(Tensor::from_rows(gh * gw, p * p * ch, data))
}

/// Token ids padded to `max_text_len`; `0` is reserved for padding.
pub const PAD_ID: usize = 0;

fn check_ids(ids: &[usize], cfg: &EncoderConfig) -> Result<()> {
    if ids.len() > cfg.max_text_len {
        return Err(Error::range("embed_language", format!("{} tokens > {}", ids.len(), cfg.max_text_len)));
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= cfg.vocab || i == PAD_ID) {
        return Err(Error::range("embed_language", format!("token id {bad} outside 1..{}", cfg.vocab)));
    }
    Ok(())
}

/// `N_l×C` language embeddings: table row plus position for each id, zero for padding.
pub fn embed_language<F: Scalar>(ids: &[usize], cfg: &EncoderConfig, store: &ParamStore<F>, enc: &EncoderIds) -> Result<Tensor<F>> {
    check_ids(ids, cfg)?;
    let table = store.get(enc.lang_table);
    let pos = store.get(enc.lang_pos);
    let mut out = Tensor::zeros(&[cfg.max_text_len, cfg.dim]);
    for (i, &id) in ids.iter().enumerate() {
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = table.at(id, j) + pos.at(i, j);
        }
    }
    Ok(out)
}

/// Patch embeddings of one frame. The projection depends on whether the modality is
/// auxiliary; the position table depends only on the image type.
pub fn patchify_embed<F: Scalar>(
    frame: &Tensor<F>,
    image_type: ImageType,
    modality: VideoModality,
    cfg: &EncoderConfig,
    store: &ParamStore<F>,
    enc: &EncoderIds,
) -> Result<Tensor<F>> {
    let patches = patchify(frame, cfg.patch)?;
    let (w, b) = if modality.is_auxiliary() {
        (enc.aux_patch_w, enc.aux_patch_b)
    } else {
        (enc.patch_w, enc.patch_b)
    };
    let pos = match image_type {
        ImageType::Template => enc.pos_template,
        ImageType::Search => enc.pos_search,
    };
    let pos = store.get(pos);
    if patches.cols() != store.get(w).rows() || patches.rows() != pos.rows() {
        return Err(Error::shape(
            "patchify_embed",
            format!("{}x{}", pos.rows(), store.get(w).rows()),
            format!("{}x{}", patches.rows(), patches.cols()),
        ));
    }
    let mut out = patches.matmul(store.get(w))?;
    let bias = store.get(b);
    for r in 0..out.rows() {
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o += bias.data()[j] + pos.at(r, j);
        }
    }
    Ok(out)
}

/// Semantic token used for a reference: language, visual, or their mean.
pub fn semantic_token<F: Scalar>(t_l: &Tensor<F>, t_v: &Tensor<F>, reference: ReferenceModality) -> Tensor<F> {
    match reference {
        ReferenceModality::Nl => t_l.clone(),
        ReferenceModality::Bbox => t_v.clone(),
        ReferenceModality::NlBbox => t_l.add(t_v).expect("token dims").scale(F::lit(0.5)),
    }
}

/// Adapters active during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AdapterSet<'a> {
    pub blocks: &'a [AdapterIds],
    pub modality: VideoModality,
}

impl<'a> AdapterSet<'a> {
    fn find(&self, layer: LayerRef, proj: Projection) -> Option<&'a AdapterIds> {
        self.blocks.iter().find(|b| b.layer == layer && b.projection == proj)
    }
}

struct AdapterVars {
    p: Var,
    q: Var,
    lambda_rgb: Var,
    lambda_aux: Option<Var>,
}

fn adapter_vars<F: Scalar>(g: &mut Graph<F>, ids: &AdapterIds, modality: VideoModality, aux_present: bool) -> AdapterVars {
    AdapterVars {
        p: g.param(ids.p),
        q: g.param(ids.q),
        lambda_rgb: g.param(ids.lambda[VideoModality::Rgb.index()]),
        lambda_aux: (aux_present && modality.is_auxiliary()).then(|| g.param(ids.lambda[modality.index()])),
    }
}

/// `h·W + b`, plus the low-rank fusion `h·P·diag(Λ^R)·Q + ReLU(h_a·P·diag(Λ^a)·Q)` when an
/// adapter is attached; `pairs[i]` names the aux row fused into row `i`.
fn project<F: Scalar>(
    g: &mut Graph<F>,
    h: Var,
    w: ParamId,
    b: ParamId,
    adapter: Option<&AdapterVars>,
    pairs: &[Option<usize>],
) -> Var {
    let wv = g.param(w);
    let bv = g.param(b);
    let mut out = g.linear(h, wv, bv);
    if let Some(a) = adapter {
        let hp = g.matmul(h, a.p);
        let scaled = g.mul_row(hp, a.lambda_rgb);
        let delta = g.matmul(scaled, a.q);
        out = g.add(out, delta);
        if let Some(la) = a.lambda_aux {
            if pairs.iter().any(|p| p.is_some()) {
                let hap = g.gather_rows(hp, pairs.to_vec());
                let sa = g.mul_row(hap, la);
                let da = g.matmul(sa, a.q);
                let ra = g.relu(da);
                out = g.add(out, ra);
            }
        }
    }
    out
}

/// One pre-norm transformer layer on the graph. Rows whose mask row is fully
/// blocked are inert: their output is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward_graph<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &EncoderConfig,
    lp: &LayerIds,
    x: Var,
    mask: Option<&AdditiveMask>,
    layer: LayerRef,
    adapters: Option<AdapterSet<'_>>,
    pairs: &[Option<usize>],
) -> Var {
    let n = g.value(x).rows();
    let c = cfg.dim;
    let eps = F::lit(cfg.ln_eps);
    let aux_present = pairs.iter().any(|p| p.is_some());
    let vars = |g: &mut Graph<F>, proj: Projection| {
        adapters
            .and_then(|s| s.find(layer, proj).map(|ids| (ids, s.modality)))
            .map(|(ids, m)| adapter_vars(g, ids, m, aux_present))
    };
    let keep: Option<Vec<bool>> = mask.map(|m| (0..n).map(|r| !m.row_blocked(r)).collect());

    let g1 = g.param(lp.ln1_g);
    let b1 = g.param(lp.ln1_b);
    let h = g.layer_norm(x, g1, b1, eps);
    let aq = vars(g, Projection::Query);
    let ak = vars(g, Projection::Key);
    let av = vars(g, Projection::Value);
    let q = project(g, h, lp.wq, lp.bq, aq.as_ref(), pairs);
    let k = project(g, h, lp.wk, lp.bk, ak.as_ref(), pairs);
    let v = project(g, h, lp.wv, lp.bv, av.as_ref(), pairs);

    let dh = c / cfg.heads;
    let inv = F::one() / F::from_usize_lossy(dh).sqrt();
    let attn_mask = mask.cloned().unwrap_or_else(|| AdditiveMask::open(n, n));
    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = g.slice_cols(q, hd * dh, dh);
        let kh = g.slice_cols(k, hd * dh, dh);
        let vh = g.slice_cols(v, hd * dh, dh);
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, inv);
        let a = g.masked_softmax(s, &attn_mask);
        heads.push(g.matmul(a, vh));
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    let wo = g.param(lp.wo);
    let bo = g.param(lp.bo);
    let o = g.linear(cat, wo, bo);
    let mut x1 = g.add(x, o);
    if let Some(k) = &keep {
        x1 = g.mask_rows(x1, k);
    }

    let g2 = g.param(lp.ln2_g);
    let b2 = g.param(lp.ln2_b);
    let h2 = g.layer_norm(x1, g2, b2, eps);
    let am = vars(g, Projection::MlpIn);
    let m = project(g, h2, lp.w1, lp.b1, am.as_ref(), pairs);
    let m = g.gelu(m);
    let w2 = g.param(lp.w2);
    let bb2 = g.param(lp.b2);
    let m = g.linear(m, w2, bb2);
    let mut out = g.add(x1, m);
    if let Some(k) = &keep {
        out = g.mask_rows(out, k);
    }
    out
}

/// Value-level single layer forward (no adapters).
pub fn encoder_layer_forward<F: Scalar>(
    e: &Tensor<F>,
    mask: &AdditiveMask,
    cfg: &EncoderConfig,
    store: &ParamStore<F>,
    layer: &LayerIds,
) -> Result<Tensor<F>> {
    let n = e.rows();
    if mask.rows() != n || mask.cols() != n {
        return Err(Error::shape("encoder_layer_forward", format!("{n}x{n}"), format!("{}x{}", mask.rows(), mask.cols())));
    }
    if e.cols() != cfg.dim {
        return Err(Error::shape("encoder_layer_forward", cfg.dim, e.cols()));
    }
    let mut g = Graph::new(store);
    let x = g.constant(e.clone());
    let pairs = vec![None; n];
    let out = layer_forward_graph(&mut g, cfg, layer, x, Some(mask), LayerRef::Deep(0), None, &pairs);
    Ok(g.value(out).clone())
}

/// Frames supplied for one auxiliary modality.
#[derive(Clone, Copy, Debug)]
pub struct AuxFrames<'a, F> {
    pub modality: VideoModality,
    pub template: Option<&'a Tensor<F>>,
    pub search: &'a Tensor<F>,
}

/// Everything the encoder consumes for one search region.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInputs<'a, F> {
    pub reference: ReferenceModality,
    pub lang_ids: &'a [usize],
    pub template: Option<&'a Tensor<F>>,
    pub search: &'a Tensor<F>,
    pub aux: Option<AuxFrames<'a, F>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Full padded sequence with task-oriented masks.
    Masked,
    /// Unavailable rows removed, plain attention.
    Pruned,
}

/// Graph handles produced by one encoder pass.
pub struct EncoderTrace {
    pub layout: TokenLayout,
    /// Layout row of every sequence row.
    pub seq_rows: Vec<usize>,
    /// Sequence after each layer (`N + M` entries).
    pub layers: Vec<Var>,
    pub t_l: Option<usize>,
    pub t_v: usize,
    pub template: Option<Range<usize>>,
    pub search: Range<usize>,
}

impl EncoderTrace {
    fn locate(seq_rows: &[usize], r: Range<usize>) -> Option<Range<usize>> {
        let start = seq_rows.iter().position(|&x| x == r.start)?;
        Some(start..start + r.len())
    }

    pub fn final_output(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }

    /// Semantic token for `reference` after layer `i` (0-based).
    pub fn semantic<F: Scalar>(&self, g: &mut Graph<F>, i: usize, reference: ReferenceModality) -> Var {
        let x = self.layers[i];
        let tv = g.slice_rows(x, self.t_v, 1);
        match (reference, self.t_l) {
            (ReferenceModality::Bbox, _) | (_, None) => tv,
            (ReferenceModality::Nl, Some(l)) => g.slice_rows(x, l, 1),
            (ReferenceModality::NlBbox, Some(l)) => {
                let tl = g.slice_rows(x, l, 1);
                let s = g.add(tl, tv);
                g.scale(s, F::lit(0.5))
            }
        }
    }

    pub fn search_rows<F: Scalar>(&self, g: &mut Graph<F>, i: usize) -> Var {
        g.slice_rows(self.layers[i], self.search.start, self.search.len())
    }

    pub fn template_rows<F: Scalar>(&self, g: &mut Graph<F>, i: usize) -> Option<Var> {
        self.template.clone().map(|r| g.slice_rows(self.layers[i], r.start, r.len()))
    }
}

fn check_frame<F: Scalar>(t: &Tensor<F>, size: usize, ch: usize, what: &str) -> Result<()> {
    if t.dims() != [size, size, ch] {
        return Err(Error::Shape {
            op: "extract_features",
            expected: format!("{what} {size}x{size}x{ch}"),
            got: format!("{:?}", t.dims()),
        });
    }
    Ok(())
}

/// Runs the shallow and deep stacks on the graph.
pub fn encode<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &EncoderConfig,
    enc: &EncoderIds,
    inputs: &EncoderInputs<'_, F>,
    mode: AttentionMode,
    adapters: Option<AdapterSet<'_>>,
) -> Result<EncoderTrace> {
    let reference = inputs.reference;
    if reference.has_template() != inputs.template.is_some() {
        return Err(Error::Config(format!(
            "reference {} {} a template",
            reference.name(),
            if reference.has_template() { "requires" } else { "forbids" }
        )));
    }
    if reference.has_language() && inputs.lang_ids.is_empty() {
        return Err(Error::Config("language reference without tokens".into()));
    }
    let lang_ids: &[usize] = if reference.has_language() { inputs.lang_ids } else { &[] };
    check_ids(lang_ids, cfg)?;
    check_frame(inputs.search, cfg.search_size, cfg.channels, "search")?;
    if let Some(t) = inputs.template {
        check_frame(t, cfg.template_size, cfg.channels, "template")?;
    }
    if let Some(aux) = &inputs.aux {
        if !aux.modality.is_auxiliary() {
            return Err(Error::Config("auxiliary frames tagged as RGB".into()));
        }
        check_frame(aux.search, cfg.search_size, cfg.channels, "aux search")?;
        if reference.has_template() != aux.template.is_some() {
            return Err(Error::Config("aux template must match the RGB template".into()));
        }
        if let Some(t) = aux.template {
            check_frame(t, cfg.template_size, cfg.channels, "aux template")?;
        }
    }
    let layout = TokenLayout::new(cfg, reference, lang_ids.len(), inputs.aux.is_some());
    let c = cfg.dim;

    // embeddings per segment (None = unavailable)
    let lang_tok = reference.has_language().then(|| g.param(enc.lang_token));
    let lang_rows = if lang_ids.is_empty() {
        None
    } else {
        let table = g.param(enc.lang_table);
        let rows = g.gather_rows(table, lang_ids.iter().map(|&i| Some(i)).collect());
        let pos = g.param(enc.lang_pos);
        let pos = g.slice_rows(pos, 0, lang_ids.len());
        Some(g.add(rows, pos))
    };
    let vis_tok = g.param(enc.vis_token);
    let embed = |g: &mut Graph<F>, frame: &Tensor<F>, aux: bool, ty: ImageType| -> Result<Var> {
        let patches = g.constant(patchify(frame, cfg.patch)?);
        let (w, b) = if aux { (enc.aux_patch_w, enc.aux_patch_b) } else { (enc.patch_w, enc.patch_b) };
        let (w, b) = (g.param(w), g.param(b));
        let e = g.linear(patches, w, b);
        let pos = g.param(match ty {
            ImageType::Template => enc.pos_template,
            ImageType::Search => enc.pos_search,
        });
        Ok(g.add(e, pos))
    };
    let tmpl = match inputs.template {
        Some(t) => Some(embed(g, t, false, ImageType::Template)?),
        None => None,
    };
    let search = embed(g, inputs.search, false, ImageType::Search)?;
    let (aux_tmpl, aux_search) = match &inputs.aux {
        Some(a) => (
            match a.template {
                Some(t) => Some(embed(g, t, true, ImageType::Template)?),
                None => None,
            },
            Some(embed(g, a.search, true, ImageType::Search)?),
        ),
        None => (None, None),
    };

    let seq_rows: Vec<usize> = match mode {
        AttentionMode::Masked => (0..layout.len()).collect(),
        AttentionMode::Pruned => (0..layout.len()).filter(|&r| layout.is_available(r)).collect(),
    };
    let mut parts = Vec::new();
    {
        let zeros = |g: &mut Graph<F>, n: usize| g.constant(Tensor::zeros(&[n, c]));
        let masked = mode == AttentionMode::Masked;
        let segs: [(Option<Var>, usize); 7] = [
            (lang_tok, 1),
            (lang_rows, cfg.max_text_len),
            (Some(vis_tok), 1),
            (tmpl, cfg.template_tokens()),
            (aux_tmpl, cfg.template_tokens()),
            (Some(search), cfg.search_tokens()),
            (aux_search, cfg.search_tokens()),
        ];
        for (k, (v, full)) in segs.into_iter().enumerate() {
            match v {
                Some(v) => {
                    parts.push(v);
                    let have = g.value(v).rows();
                    if masked && have < full {
                        parts.push(zeros(g, full - have));
                    }
                    debug_assert!(k != 1 || have == lang_ids.len());
                }
                None if masked => parts.push(zeros(g, full)),
                None => {}
            }
        }
    }
    let mut x = g.concat_rows(&parts);

    let pos_of: Vec<Option<usize>> = {
        let mut v = vec![None; layout.len()];
        for (i, &r) in seq_rows.iter().enumerate() {
            v[r] = Some(i);
        }
        v
    };
    let pairs: Vec<Option<usize>> = seq_rows
        .iter()
        .map(|&r| layout.aux_partner(r).and_then(|p| pos_of[p]))
        .collect();
    let n_lang = seq_rows.iter().filter(|&&r| layout.segment_of(r).is_language()).count();

    let mut layers = Vec::with_capacity(cfg.total_layers());
    match mode {
        AttentionMode::Masked => {
            let m_lang = build_attention_mask(reference, &layout, LayerKind::ShallowLang)?;
            let m_vis = build_attention_mask(reference, &layout, LayerKind::ShallowVision)?;
            let m_deep = build_attention_mask(reference, &layout, LayerKind::Deep)?;
            for i in 0..cfg.shallow_layers {
                let a = layer_forward_graph(g, cfg, &enc.shallow_lang[i], x, Some(&m_lang), LayerRef::ShallowLang(i), adapters, &pairs);
                let b = layer_forward_graph(g, cfg, &enc.shallow_vis[i], x, Some(&m_vis), LayerRef::ShallowVision(i), adapters, &pairs);
                x = g.add(a, b);
                layers.push(x);
            }
            for i in 0..cfg.deep_layers {
                x = layer_forward_graph(g, cfg, &enc.deep[i], x, Some(&m_deep), LayerRef::Deep(i), adapters, &pairs);
                layers.push(x);
            }
        }
        AttentionMode::Pruned => {
            let n = seq_rows.len();
            let vis_pairs: Vec<Option<usize>> = pairs[n_lang..].iter().map(|p| p.map(|q| q - n_lang)).collect();
            for i in 0..cfg.shallow_layers {
                let vis_in = g.slice_rows(x, n_lang, n - n_lang);
                let vis_out =
                    layer_forward_graph(g, cfg, &enc.shallow_vis[i], vis_in, None, LayerRef::ShallowVision(i), adapters, &vis_pairs);
                x = if n_lang > 0 {
                    let lang_in = g.slice_rows(x, 0, n_lang);
                    let no_pairs = vec![None; n_lang];
                    let lang_out =
                        layer_forward_graph(g, cfg, &enc.shallow_lang[i], lang_in, None, LayerRef::ShallowLang(i), adapters, &no_pairs);
                    g.concat_rows(&[lang_out, vis_out])
                } else {
                    vis_out
                };
                layers.push(x);
            }
            for i in 0..cfg.deep_layers {
                x = layer_forward_graph(g, cfg, &enc.deep[i], x, None, LayerRef::Deep(i), adapters, &pairs);
                layers.push(x);
            }
        }
    }

    let t_l = pos_of[layout.range(Segment::LangSemantic).start].filter(|_| reference.has_language());
    let t_v = pos_of[layout.range(Segment::VisSemantic).start].expect("visual token always present");
    let template = if reference.has_template() {
        EncoderTrace::locate(&seq_rows, layout.range(Segment::Template))
    } else {
        None
    };
    let search_r = EncoderTrace::locate(&seq_rows, layout.range(Segment::Search)).expect("search present");
    Ok(EncoderTrace {
        layout,
        seq_rows,
        layers,
        t_l,
        t_v,
        template,
        search: search_r,
    })
}

/// Joint embeddings after the last layer plus per-layer semantic tokens.
#[derive(Clone, Debug)]
pub struct EmbeddingSet<F> {
    pub joint: Tensor<F>,
    pub layout: TokenLayout,
    /// `T_l^i` for i = 1..N+M (zero when language is unavailable).
    pub lang_tokens: Vec<Tensor<F>>,
    /// `T_v^i` for i = 1..N+M.
    pub vis_tokens: Vec<Tensor<F>>,
}

impl<F: Scalar> EmbeddingSet<F> {
    pub fn segment(&self, seg: Segment) -> Tensor<F> {
        let r = self.layout.range(seg);
        self.joint.slice_rows(r.start, r.len())
    }
}

/// Scatters a trace back onto the full joint layout.
pub fn embedding_set<F: Scalar>(g: &Graph<F>, trace: &EncoderTrace, dim: usize) -> EmbeddingSet<F> {
    let n = trace.layout.len();
    let fin = g.value(trace.final_output());
    let mut joint = Tensor::zeros(&[n, dim]);
    for (i, &r) in trace.seq_rows.iter().enumerate() {
        joint.row_mut(r).copy_from_slice(fin.row(i));
    }
    let mut lang_tokens = Vec::new();
    let mut vis_tokens = Vec::new();
    for &l in &trace.layers {
        let v = g.value(l);
        lang_tokens.push(match trace.t_l {
            Some(i) => Tensor::row_vector(v.row(i).to_vec()),
            None => Tensor::zeros(&[1, dim]),
        });
        vis_tokens.push(Tensor::row_vector(v.row(trace.t_v).to_vec()));
    }
    EmbeddingSet {
        joint,
        layout: trace.layout.clone(),
        lang_tokens,
        vis_tokens,
    }
}

/// Value-level feature extraction.
pub fn extract_features<F: Scalar>(
    cfg: &EncoderConfig,
    store: &ParamStore<F>,
    enc: &EncoderIds,
    inputs: &EncoderInputs<'_, F>,
    mode: AttentionMode,
    adapters: Option<AdapterSet<'_>>,
) -> Result<EmbeddingSet<F>> {
    let mut g = Graph::new(store);
    let trace = encode(&mut g, cfg, enc, inputs, mode, adapters)?;
    Ok(embedding_set(&g, &trace, cfg.dim))
}
