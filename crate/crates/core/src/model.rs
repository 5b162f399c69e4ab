//! The full tracker: encoder, box head and optional adapters over one parameter store.

use rand::SeedableRng;

use crate::autodiff::{Graph, Var};
use crate::boxhead::{head_forward, init_head, score_maps, HeadConfig, HeadIds, HeadOutput, ScenarioSource, ScenarioTokens, ScoreMaps};
use crate::encoder::{
    encode, init_encoder, AdapterSet, AttentionMode, EncoderConfig, EncoderIds, EncoderInputs, EncoderTrace, LayerRef,
    ReferenceModality, VideoModality,
};
use crate::error::{Error, Result};
use crate::losses::{
    box_loss_node, center_logit_node, mmc_loss_node, orthogonality_node, target_map_logit_node, BBox, GridSpec, LossWeights,
};
use crate::numerics::Tensor;
use crate::params::{ParamGroup, ParamStore};
use crate::rama::{init_adapters, AdapterBlock, AdapterIds, Projection};
use crate::scalar::Scalar;

/// Which layers receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterPlacement {
    DeepOnly,
    AllLayers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub adapter_rank: usize,
    pub adapter_placement: AdapterPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            adapter_rank: 8,
            adapter_placement: AdapterPlacement::DeepOnly,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec {
            grid: self.encoder.grid(),
            patch: self.encoder.patch,
        }
    }

    pub fn template_grid(&self) -> GridSpec {
        GridSpec {
            grid: self.encoder.template_size / self.encoder.patch,
            patch: self.encoder.patch,
        }
    }

    /// `(layer, projection, d_in, d_out)` for every adapter site.
    pub fn adapter_sites(&self) -> Vec<(LayerRef, Projection, usize, usize)> {
        let c = self.encoder.dim;
        let hidden = c * self.encoder.mlp_ratio;
        let mut layers = Vec::new();
        if self.adapter_placement == AdapterPlacement::AllLayers {
            for i in 0..self.encoder.shallow_layers {
                layers.push(LayerRef::ShallowVision(i));
            }
        }
        for i in 0..self.encoder.deep_layers {
            layers.push(LayerRef::Deep(i));
        }
        layers
            .into_iter()
            .flat_map(|l| {
                Projection::ALL.map(|p| (l, p, c, if p == Projection::MlpIn { hidden } else { c }))
            })
            .collect()
    }
}

/// One search region together with its reference payload and ground truth in
/// search-region pixel coordinates.
#[derive(Clone, Debug)]
pub struct RegionSample<F> {
    pub reference: ReferenceModality,
    pub lang_ids: Vec<usize>,
    pub template: Option<Tensor<F>>,
    pub search: Tensor<F>,
    pub aux: Option<AuxSample<F>>,
    pub gt: BBox<F>,
    /// In-box mask of the template grid (present iff the template is).
    pub template_in_box: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct AuxSample<F> {
    pub modality: VideoModality,
    pub template: Option<Tensor<F>>,
    pub search: Tensor<F>,
}

impl<F: Scalar> RegionSample<F> {
    pub fn encoder_inputs(&self) -> EncoderInputs<'_, F> {
        EncoderInputs {
            reference: self.reference,
            lang_ids: &self.lang_ids,
            template: self.template.as_ref(),
            search: &self.search,
            aux: self.aux.as_ref().map(|a| crate::encoder::AuxFrames {
                modality: a.modality,
                template: a.template.as_ref(),
                search: &a.search,
            }),
        }
    }
}

/// Graph handles for one encoded region.
pub struct RegionForward {
    pub trace: EncoderTrace,
    pub semantic: Var,
    pub search: Var,
    pub template: Option<Var>,
}

/// Per-unit loss terms (values), for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub target: f64,
    pub center: f64,
    pub boxl: f64,
    pub mmc: f64,
    pub orth: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.target + self.center + self.boxl + self.mmc + self.orth
    }

    pub fn add(&mut self, o: &Self) {
        self.target += o.target;
        self.center += o.center;
        self.boxl += o.boxl;
        self.mmc += o.mmc;
        self.orth += o.orth;
    }
}

#[derive(Clone, Debug)]
pub struct Tracker<F> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub enc: EncoderIds,
    pub head: HeadIds,
    pub adapters: Vec<AdapterIds>,
}

impl<F: Scalar> Tracker<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.encoder.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = init_encoder(&cfg.encoder, &mut store, &mut rng);
        let head = init_head(cfg.encoder.dim, &mut store, &mut rng);
        Ok(Self {
            cfg,
            store,
            enc,
            head,
            adapters: Vec::new(),
        })
    }

    /// Adds adapter parameters (idempotent).
    pub fn attach_adapters(&mut self, seed: u64) {
        if !self.adapters.is_empty() {
            return;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
        self.adapters = init_adapters(&mut self.store, &mut rng, &self.cfg.adapter_sites(), self.cfg.adapter_rank);
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    pub fn grid(&self) -> GridSpec {
        self.cfg.grid()
    }

    /// Value forms of every adapter block, in site order.
    pub fn adapter_blocks(&self) -> Result<Vec<AdapterBlock<F>>> {
        self.adapters
            .iter()
            .enumerate()
            .map(|(k, ids)| {
                let w = self.enc.layer(ids.layer).weight(ids.projection).0;
                AdapterBlock::from_store(k, ids, &self.store, w)
            })
            .collect()
    }

    /// Writes allocated singular values back into the store.
    pub fn write_lambdas(&mut self, blocks: &[AdapterBlock<F>]) {
        for (ids, b) in self.adapters.iter().zip(blocks) {
            for (a, &pid) in ids.lambda.iter().enumerate() {
                self.store.get_mut(pid).data_mut().copy_from_slice(&b.lambda[a]);
            }
        }
    }

    /// Stage 1 trains encoder and head; stage 2 trains only auxiliary parameters.
    pub fn set_stage(&mut self, stage: u8) {
        self.store.set_trainable_groups(|g| match stage {
            1 => g != ParamGroup::Auxiliary,
            _ => g == ParamGroup::Auxiliary,
        });
    }

    pub fn encode_region(&self, g: &mut Graph<F>, inputs: &EncoderInputs<'_, F>, mode: AttentionMode) -> Result<RegionForward> {
        let adapters = match (&inputs.aux, self.has_adapters()) {
            (Some(aux), true) => Some(AdapterSet {
                blocks: &self.adapters,
                modality: aux.modality,
            }),
            _ => None,
        };
        let trace = encode(g, &self.cfg.encoder, &self.enc, inputs, mode, adapters)?;
        let last = self.cfg.encoder.total_layers() - 1;
        let semantic = trace.semantic(g, last, inputs.reference);
        let search = trace.search_rows(g, last);
        let template = trace.template_rows(g, last);
        Ok(RegionForward {
            trace,
            semantic,
            search,
            template,
        })
    }

    pub fn head(&self, g: &mut Graph<F>, region: &RegionForward, scenario: ScenarioSource<'_, F>) -> Result<HeadOutput> {
        head_forward(g, &self.cfg.head, &self.head, region.search, region.semantic, scenario)
    }

    /// Loss of one region whose scenario context is `context` (rows plus in-box mask).
    #[allow(clippy::too_many_arguments)]
    fn region_loss(
        &self,
        g: &mut Graph<F>,
        region: &RegionForward,
        sample: &RegionSample<F>,
        context: Option<(Var, Vec<bool>)>,
        weights: &LossWeights<F>,
        breakdown: &mut LossBreakdown,
    ) -> Result<Var> {
        let grid = self.grid();
        let scenario = match &context {
            Some((v, m)) => ScenarioSource::Live { context: *v, in_box: m },
            None => ScenarioSource::None,
        };
        let out = self.head(g, region, scenario)?;
        let gt = &sample.gt;
        let l_tgt = target_map_logit_node(g, out.target_logit, &grid.in_box_mask(gt))?;
        let l_cls = center_logit_node(g, out.center_logit, gt, grid)?;
        // box regressed at the ground-truth center cell
        let (xc, yc) = grid.center_xy(gt);
        let cell = yc * grid.grid + xc;
        let p = F::from_usize_lossy(grid.patch);
        let size = F::from_usize_lossy(grid.image_size());
        let o = g.slice_rows(out.offset, cell, 1);
        let base = g.constant(Tensor::row_vector(vec![F::from_usize_lossy(xc), F::from_usize_lossy(yc)]));
        let ctr = g.add(o, base);
        let ctr = g.scale(ctr, p);
        let s = g.slice_rows(out.size, cell, 1);
        let wh = g.scale(s, size);
        let pred = g.concat_cols(&[ctr, wh]);
        let l_box = box_loss_node(g, pred, gt, size, weights)?;
        let mut terms = vec![l_tgt, l_cls, l_box];
        breakdown.target += g.value(l_tgt).data()[0].to_f64_lossy();
        breakdown.center += g.value(l_cls).data()[0].to_f64_lossy();
        breakdown.boxl += g.value(l_box).data()[0].to_f64_lossy();
        if weights.lambda_mmc > F::zero() {
            for i in 0..self.cfg.encoder.total_layers() {
                let t = region.trace.semantic(g, i, sample.reference);
                let e = region.trace.search_rows(g, i);
                let l = mmc_loss_node(g, t, e, gt, grid, weights)?;
                let l = g.scale(l, weights.lambda_mmc);
                breakdown.mmc += g.value(l).data()[0].to_f64_lossy();
                terms.push(l);
            }
        }
        let cat = g.concat_rows(&terms);
        Ok(g.sum(cat))
    }

    /// Total loss of a training unit: regions sharing one reference, each using the
    /// others (and its own template) as scenario context.
    pub fn unit_loss(
        &self,
        g: &mut Graph<F>,
        regions: &[RegionSample<F>],
        use_context: bool,
        weights: &LossWeights<F>,
    ) -> Result<(Var, LossBreakdown)> {
        if regions.is_empty() {
            return Err(Error::Config("empty training unit".into()));
        }
        let grid = self.grid();
        let fwd: Vec<RegionForward> = regions
            .iter()
            .map(|r| self.encode_region(g, &r.encoder_inputs(), AttentionMode::Pruned))
            .collect::<Result<_>>()?;
        let mut breakdown = LossBreakdown::default();
        let mut losses = Vec::with_capacity(regions.len() + 1);
        for (i, (region, sample)) in fwd.iter().zip(regions).enumerate() {
            let context = if use_context {
                let mut rows = Vec::new();
                let mut mask = Vec::new();
                if let (Some(t), Some(m)) = (region.template, &sample.template_in_box) {
                    rows.push(t);
                    mask.extend_from_slice(m);
                }
                for (j, (other, os)) in fwd.iter().zip(regions).enumerate() {
                    if j != i {
                        rows.push(other.search);
                        mask.extend(grid.in_box_mask(&os.gt));
                    }
                }
                (!rows.is_empty()).then(|| (g.concat_rows(&rows), mask))
            } else {
                None
            };
            losses.push(self.region_loss(g, region, sample, context, weights, &mut breakdown)?);
        }
        if self.has_adapters() && weights.lambda_orth > F::zero() && regions.iter().any(|r| r.aux.is_some()) {
            for ids in &self.adapters {
                if !self.store.is_trainable(ids.p) {
                    continue;
                }
                let (p, q) = (g.param(ids.p), g.param(ids.q));
                let l = orthogonality_node(g, p, q, weights.lambda_orth)?;
                breakdown.orth += g.value(l).data()[0].to_f64_lossy();
                losses.push(l);
            }
        }
        let cat = g.concat_rows(&losses);
        Ok((g.sum(cat), breakdown))
    }

    /// Runs encoder and head for inference; returns maps, the final semantic token and
    /// the final search embeddings.
    pub fn infer(&self, inputs: &EncoderInputs<'_, F>, scenario: Option<&ScenarioTokens<F>>) -> Result<Inference<F>> {
        let mut g = Graph::new(&self.store);
        let region = self.encode_region(&mut g, inputs, AttentionMode::Pruned)?;
        let src = match scenario {
            Some(t) => ScenarioSource::Cached(t),
            None => ScenarioSource::None,
        };
        let out = self.head(&mut g, &region, src)?;
        let semantic = g.value(region.semantic).data().to_vec();
        let last = self.cfg.encoder.total_layers() - 1;
        let vis_token = g.value(region.trace.layers[last]).row(region.trace.t_v).to_vec();
        let lang_token = region
            .trace
            .t_l
            .map(|l| g.value(region.trace.layers[last]).row(l).to_vec());
        Ok(Inference {
            maps: score_maps(&g, &out),
            semantic,
            search: g.value(region.search).clone(),
            template: region.template.map(|t| g.value(t).clone()),
            vis_token,
            lang_token,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub maps: ScoreMaps<F>,
    pub semantic: Vec<F>,
    pub search: Tensor<F>,
    pub template: Option<Tensor<F>>,
    pub vis_token: Vec<F>,
    pub lang_token: Option<Vec<F>>,
}
