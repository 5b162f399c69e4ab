//! Stage-one and stage-two training loops.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmtrack::autodiff::Graph;
use mmtrack::encoder::VideoModality;
use mmtrack::model::{LossBreakdown, Tracker};
use mmtrack::params::{ParamGroup, ParamId};
use mmtrack::rama::{allocate, allocation_schedule, AdapterBlock, AllocationAction, BlockImportance};
use mmtrack::{Tensor, Tracker64};

use crate::config::TrainConfig;
use crate::data::{sample_training_unit, TrainingUnit};
use crate::error::{HarnessError, Result};
use crate::optim::{clip_global_norm, lr_scale, AdamW, GroupRates};
use crate::scene::{generate_set, load_dir, SyntheticScene};

/// Scenes named by the config: a directory of scene files, or a generated set.
pub fn load_scenes(cfg: &TrainConfig) -> Result<Vec<SyntheticScene>> {
    match &cfg.data {
        Some(dir) => load_dir(dir),
        None => generate_set(cfg.scene_seed, cfg.scenes, cfg.hard_fraction, &cfg.scene),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// `(step, mean unit loss)` every `log_every` steps and at the last step.
    pub history: Vec<(usize, f64)>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationReport {
    /// Nonzero singular values per video modality (R, D, T, E).
    pub histogram: [usize; 4],
    pub surviving_tuples: usize,
    pub nonzero_total: usize,
    pub n_budget: usize,
    pub m_budget: usize,
}

impl AllocationReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "surviving tuples {} / n = {}; nonzero singular values {} / m = {}\n",
            self.surviving_tuples, self.n_budget, self.nonzero_total, self.m_budget
        );
        for a in VideoModality::ALL {
            s.push_str(&format!("  {:<8} {}\n", crate::scene::modality_label(a), self.histogram[a.index()]));
        }
        s
    }
}

/// Aux modality for one stage-two unit: the scene's hard channel, else uniform.
fn pick_aux<R: Rng>(scene: &SyntheticScene, rng: &mut R) -> VideoModality {
    scene
        .hard
        .unwrap_or_else(|| VideoModality::AUXILIARY[rng.random_range(0..VideoModality::AUXILIARY.len())])
}

fn draw_unit<R: Rng>(cfg: &TrainConfig, scenes: &[SyntheticScene], stage: u8, rng: &mut R) -> TrainingUnit {
    let scene = &scenes[rng.random_range(0..scenes.len())];
    let reference = cfg.reference_for(rng.random());
    let aux = (stage == 2).then(|| pick_aux(scene, rng));
    sample_training_unit(scene, reference, aux, cfg, rng)
}

/// Loss and parameter gradients of one unit.
fn unit_grads(tracker: &Tracker64, cfg: &TrainConfig, unit: &TrainingUnit) -> Result<(LossBreakdown, Vec<Option<Tensor<f64>>>)> {
    let mut g = Graph::new(&tracker.store);
    let (loss, breakdown) = tracker.unit_loss(&mut g, &unit.regions, unit.use_context, &cfg.weights)?;
    let grads = g.backward(loss).into_param_grads();
    Ok((breakdown, grads))
}

fn accumulate(acc: &mut Vec<Option<Tensor<f64>>>, grads: Vec<Option<Tensor<f64>>>, scale: f64) {
    if acc.len() < grads.len() {
        acc.resize(grads.len(), None);
    }
    for (slot, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            let g = g.scale(scale);
            match slot {
                Some(a) => a.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
}

fn check_finite(step: usize, b: &LossBreakdown, grads: &[Option<Tensor<f64>>]) -> Result<()> {
    if !b.total().is_finite() {
        return Err(HarnessError::NonFiniteLoss {
            step,
            detail: format!("{b:?}"),
        });
    }
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.is_finite())) {
        return Err(HarnessError::NonFiniteLoss {
            step,
            detail: format!("gradient of parameter #{i} is not finite"),
        });
    }
    Ok(())
}

/// Mean loss over `count` units drawn from a fixed seed; used for validation and
/// round-trip checks.
pub fn validation_loss(tracker: &Tracker64, cfg: &TrainConfig, scenes: &[SyntheticScene], seed: u64, count: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stage = if tracker.has_adapters() { 2 } else { 1 };
    let mut total = 0.0;
    for _ in 0..count {
        let unit = draw_unit(cfg, scenes, stage, &mut rng);
        let mut g = Graph::new(&tracker.store);
        let (_, b) = tracker.unit_loss(&mut g, &unit.regions, unit.use_context, &cfg.weights)?;
        total += b.total();
    }
    Ok(total / count.max(1) as f64)
}

fn rates(cfg: &TrainConfig) -> GroupRates {
    GroupRates {
        encoder: cfg.lr_encoder,
        head: cfg.lr_head,
        auxiliary: cfg.lr_aux,
    }
}

/// One optimizer step over a batch. `hook` sees the averaged gradients before the update.
fn batch_step<R: Rng>(
    tracker: &mut Tracker64,
    cfg: &TrainConfig,
    scenes: &[SyntheticScene],
    opt: &mut AdamW,
    step: usize,
    stage: u8,
    rng: &mut R,
    mut hook: impl FnMut(&Tracker64, &[Option<Tensor<f64>>]) -> Result<()>,
) -> Result<f64> {
    let mut acc: Vec<Option<Tensor<f64>>> = Vec::new();
    let mut total = LossBreakdown::default();
    let inv = 1.0 / cfg.batch as f64;
    for _ in 0..cfg.batch {
        let unit = draw_unit(cfg, scenes, stage, rng);
        let (b, grads) = unit_grads(tracker, cfg, &unit)?;
        check_finite(step, &b, &grads)?;
        total.add(&b);
        accumulate(&mut acc, grads, inv);
    }
    hook(tracker, &acc)?;
    clip_global_norm(&mut acc, cfg.clip);
    opt.step(&mut tracker.store, &acc, lr_scale(step, cfg.steps, cfg.warmup));
    Ok(total.total() * inv)
}

fn log_progress(report: &mut TrainReport, cfg: &TrainConfig, step: usize, loss: f64) {
    if (cfg.log_every > 0 && step.is_multiple_of(cfg.log_every)) || step + 1 == cfg.steps {
        info!("step {step}: loss {loss:.4}");
        report.history.push((step, loss));
    }
}

/// Trains encoder, head and prototypes from scratch.
pub fn train_stage1(cfg: &TrainConfig, scenes: &[SyntheticScene]) -> Result<(Tracker64, TrainReport)> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(HarnessError::Invalid(format!("config is tagged stage {}, expected 1", cfg.stage)));
    }
    if scenes.is_empty() {
        return Err(HarnessError::Invalid("no training scenes".into()));
    }
    let mut tracker = Tracker::new(cfg.model.clone(), cfg.seed)?;
    tracker.set_stage(1);
    let mut opt = AdamW::new(rates(cfg), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let loss = batch_step(&mut tracker, cfg, scenes, &mut opt, step, 1, &mut rng, |_, _| Ok(()))?;
        log_progress(&mut report, cfg, step, loss);
        report.final_loss = loss;
    }
    report.steps = cfg.steps;
    Ok((tracker, report))
}

/// Order-sensitive digest of the bytes of every parameter outside the auxiliary group.
pub fn frozen_digest(tracker: &Tracker64) -> Vec<(String, u64)> {
    tracker
        .store
        .ids()
        .filter(|&id| tracker.store.group(id) != ParamGroup::Auxiliary)
        .map(|id| {
            let mut h = DefaultHasher::new();
            for v in tracker.store.get(id).data() {
                h.write_u64(v.to_bits());
            }
            (tracker.store.name(id).to_string(), h.finish())
        })
        .collect()
}

fn check_frozen(before: &[(String, u64)], tracker: &Tracker64) -> Result<()> {
    let after = frozen_digest(tracker);
    if after.len() != before.len() {
        return Err(HarnessError::FrozenDrift("parameter set changed".into()));
    }
    match before.iter().zip(&after).find(|(a, b)| a != b) {
        Some((a, _)) => Err(HarnessError::FrozenDrift(a.0.clone())),
        None => Ok(()),
    }
}

/// Survivors of one allocation: shared tuples and per-modality singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    pub shared: Vec<bool>,
    pub lambda: [Vec<bool>; 4],
}

/// Which tuples and singular values survive an allocation; computed on a copy with
/// unit `Λ` so a surviving value that happens to be exactly zero is still recognized.
fn allocation_mask(blocks: &[AdapterBlock<f64>], states: &[BlockImportance<f64>], cfg: &TrainConfig) -> Result<Vec<BlockMask>> {
    let mut probe: Vec<AdapterBlock<f64>> = blocks.to_vec();
    for b in probe.iter_mut() {
        for l in b.lambda.iter_mut() {
            l.iter_mut().for_each(|v| *v = 1.0);
        }
        b.shared_mask.iter_mut().for_each(|m| *m = true);
    }
    allocate(&mut probe, states, cfg.budget())?;
    Ok(probe
        .iter()
        .map(|b| BlockMask {
            shared: b.shared_mask.clone(),
            lambda: std::array::from_fn(|a| b.lambda[a].iter().map(|&v| v != 0.0).collect()),
        })
        .collect())
}

fn apply_mask(tracker: &mut Tracker64, mask: &[BlockMask]) {
    for (ids, m) in tracker.adapters.iter().zip(mask) {
        for (a, &pid) in ids.lambda.iter().enumerate() {
            for (v, &keep) in tracker.store.get_mut(pid).data_mut().iter_mut().zip(&m.lambda[a]) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

pub struct Stage2Outcome {
    pub tracker: Tracker64,
    pub report: TrainReport,
    pub allocation: AllocationReport,
    /// Final per-block survival masks.
    pub mask: Vec<BlockMask>,
}

/// Freezes the stage-one model, attaches adapters and trains only auxiliary parameters,
/// allocating ranks on schedule and once more at the end.
pub fn train_stage2(cfg: &TrainConfig, base: Tracker64, scenes: &[SyntheticScene]) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(HarnessError::Invalid(format!("config is tagged stage {}, expected 2", cfg.stage)));
    }
    if scenes.is_empty() {
        return Err(HarnessError::Invalid("no training scenes".into()));
    }
    if base.cfg.encoder != cfg.model.encoder {
        return Err(HarnessError::Incompatible("encoder config differs from the stage-one checkpoint".into()));
    }
    let mut tracker = base;
    if !tracker.has_adapters() {
        // head and adapter settings may change between stages
        tracker.cfg = cfg.model.clone();
    }
    tracker.attach_adapters(cfg.seed);
    tracker.set_stage(2);
    let before = frozen_digest(&tracker);
    let blocks = tracker.adapter_blocks()?;
    let mut states: Vec<BlockImportance<f64>> = blocks
        .iter()
        .map(|b| BlockImportance::new(b, cfg.importance_beta1, cfg.importance_beta2))
        .collect();
    let mut opt = AdamW::new(rates(cfg), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 2);
    let mut report = TrainReport::default();
    let mut mask: Option<Vec<BlockMask>> = None;
    for step in 0..cfg.steps {
        let loss = batch_step(&mut tracker, cfg, scenes, &mut opt, step, 2, &mut rng, |t, grads| {
            observe_importance(t, grads, &mut states)
        })?;
        if allocation_schedule(step + 1, cfg.alloc_warmup, cfg.alloc_interval) == AllocationAction::Allocate {
            let blocks = tracker.adapter_blocks()?;
            mask = Some(allocation_mask(&blocks, &states, cfg)?);
        }
        if let Some(m) = &mask {
            apply_mask(&mut tracker, m);
        }
        log_progress(&mut report, cfg, step, loss);
        report.final_loss = loss;
    }
    report.steps = cfg.steps;
    let blocks = tracker.adapter_blocks()?;
    let final_mask = allocation_mask(&blocks, &states, cfg)?;
    apply_mask(&mut tracker, &final_mask);
    check_frozen(&before, &tracker)?;
    let budget = cfg.budget();
    let histogram: [usize; 4] = std::array::from_fn(|a| final_mask.iter().map(|m| m.lambda[a].iter().filter(|&&k| k).count()).sum());
    let allocation = AllocationReport {
        histogram,
        surviving_tuples: final_mask.iter().map(|m| m.shared.iter().filter(|&&k| k).count()).sum(),
        nonzero_total: histogram.iter().sum(),
        n_budget: budget.n(),
        m_budget: budget.m(),
    };
    info!("allocation: {allocation:?}");
    Ok(Stage2Outcome {
        tracker,
        report,
        allocation,
        mask: final_mask,
    })
}

fn observe_importance(tracker: &Tracker64, grads: &[Option<Tensor<f64>>], states: &mut [BlockImportance<f64>]) -> Result<()> {
    let blocks = tracker.adapter_blocks()?;
    let grad_of = |id: ParamId| -> Tensor<f64> {
        grads
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(tracker.store.get(id).dims()))
    };
    for ((ids, block), st) in tracker.adapters.iter().zip(&blocks).zip(states.iter_mut()) {
        let gp = grad_of(ids.p);
        let gq = grad_of(ids.q);
        let gl: Vec<Tensor<f64>> = ids.lambda.iter().map(|&l| grad_of(l)).collect();
        let refs: [&[f64]; 4] = std::array::from_fn(|a| gl[a].data());
        st.observe(block, &gp, &gq, &refs)?;
    }
    Ok(())
}
