//! `key = value` configuration files with `#` comments.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmtrack::encoder::ReferenceModality;
use mmtrack::losses::LossWeights;
use mmtrack::model::{AdapterPlacement, ModelConfig};
use mmtrack::rama::RankBudget;

use crate::error::{io_err, HarnessError, Result};
use crate::scene::SceneConfig;

/// Everything a training run needs. Unset keys keep their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights<f64>,
    /// Directory of scene files; when absent, scenes are generated from `scene_seed`.
    pub data: Option<PathBuf>,
    pub scene_seed: u64,
    pub scenes: usize,
    pub hard_fraction: f64,
    pub scene: SceneConfig,
    /// BBOX : NL : NL+BBOX sampling weights.
    pub ratio: [f64; 3],
    pub max_interval: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub lr_aux: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub clip: f64,
    pub center_jitter: f64,
    pub scale_jitter: f64,
    pub n_hat: usize,
    pub m_hat: usize,
    pub alloc_warmup: usize,
    pub alloc_interval: usize,
    pub importance_beta1: f64,
    pub importance_beta2: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            seed: 7,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            data: None,
            scene_seed: 1000,
            scenes: 32,
            hard_fraction: 0.0,
            scene: SceneConfig::default(),
            ratio: [4.0, 1.0, 4.0],
            max_interval: 200,
            steps: 1000,
            batch: 8,
            lr_encoder: 1e-3,
            lr_head: 2e-3,
            lr_aux: 5e-3,
            weight_decay: 1e-4,
            warmup: 50,
            clip: 5.0,
            center_jitter: 0.6,
            scale_jitter: 0.15,
            // budgets scaled from 16 / 32 at rank 32 to the toy rank of 8
            n_hat: 4,
            m_hat: 8,
            alloc_warmup: 100,
            alloc_interval: 100,
            importance_beta1: 0.85,
            importance_beta2: 0.85,
            log_every: 100,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HarnessError::Config {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config {
            line,
            msg: format!("bad boolean {v:?} for {key}"),
        }),
    }
}

/// Parses `a:b:c` sampling weights.
pub fn parse_ratio(v: &str) -> Option<[f64; 3]> {
    let parts: Vec<f64> = v.split(':').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    (parts.len() == 3).then(|| [parts[0], parts[1], parts[2]])
}

/// `inf` (or `0`) disables the periodic refresh.
fn parse_interval(line: usize, key: &str, v: &str) -> Result<Option<usize>> {
    if v == "inf" || v == "0" {
        Ok(None)
    } else {
        parse(line, key, v).map(Some)
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse_str(&text)?;
        if let Some(d) = &cfg.data {
            if d.is_relative() {
                if let Some(parent) = path.parent() {
                    cfg.data = Some(parent.join(d));
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| HarnessError::Config {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            cfg.set(line, k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let h = &mut self.model.head;
        let w = &mut self.weights;
        match key {
            "stage" => self.stage = parse(line, key, v)?,
            "seed" => self.seed = parse(line, key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "scene_seed" => self.scene_seed = parse(line, key, v)?,
            "scenes" => self.scenes = parse(line, key, v)?,
            "hard_fraction" => self.hard_fraction = parse(line, key, v)?,
            "world" => self.scene.world = parse(line, key, v)?,
            "frames" => self.scene.frames = parse(line, key, v)?,
            "min_size" => self.scene.min_size = parse(line, key, v)?,
            "max_size" => self.scene.max_size = parse(line, key, v)?,
            "distractors" => self.scene.distractors = parse(line, key, v)?,
            "ratio" => {
                self.ratio = parse_ratio(v).ok_or_else(|| HarnessError::Config {
                    line,
                    msg: format!("ratio must look like 4:1:4, got {v:?}"),
                })?
            }
            "max_interval" => self.max_interval = parse(line, key, v)?,
            "steps" => self.steps = parse(line, key, v)?,
            "batch" => self.batch = parse(line, key, v)?,
            "lr_encoder" => self.lr_encoder = parse(line, key, v)?,
            "lr_head" => self.lr_head = parse(line, key, v)?,
            "lr_aux" => self.lr_aux = parse(line, key, v)?,
            "weight_decay" => self.weight_decay = parse(line, key, v)?,
            "warmup" => self.warmup = parse(line, key, v)?,
            "clip" => self.clip = parse(line, key, v)?,
            "center_jitter" => self.center_jitter = parse(line, key, v)?,
            "scale_jitter" => self.scale_jitter = parse(line, key, v)?,
            "n_hat" => self.n_hat = parse(line, key, v)?,
            "m_hat" => self.m_hat = parse(line, key, v)?,
            "alloc_warmup" => self.alloc_warmup = parse(line, key, v)?,
            "alloc_interval" => self.alloc_interval = parse(line, key, v)?,
            "importance_beta1" => self.importance_beta1 = parse(line, key, v)?,
            "importance_beta2" => self.importance_beta2 = parse(line, key, v)?,
            "log_every" => self.log_every = parse(line, key, v)?,
            "lambda_1" => w.lambda_1 = parse(line, key, v)?,
            "lambda_giou" => w.lambda_giou = parse(line, key, v)?,
            "lambda_mmc" => w.lambda_mmc = parse(line, key, v)?,
            "lambda_orth" => w.lambda_orth = parse(line, key, v)?,
            "tau" => w.tau = parse(line, key, v)?,
            "n_neg" => w.n_neg = parse(line, key, v)?,
            "dim" => e.dim = parse(line, key, v)?,
            "heads" => e.heads = parse(line, key, v)?,
            "shallow_layers" => e.shallow_layers = parse(line, key, v)?,
            "deep_layers" => e.deep_layers = parse(line, key, v)?,
            "patch" => e.patch = parse(line, key, v)?,
            "template_size" => e.template_size = parse(line, key, v)?,
            "search_size" => e.search_size = parse(line, key, v)?,
            "max_text_len" => e.max_text_len = parse(line, key, v)?,
            "vocab" => e.vocab = parse(line, key, v)?,
            "mlp_ratio" => e.mlp_ratio = parse(line, key, v)?,
            "beta" => h.beta = parse(line, key, v)?,
            "inclusive" => h.inclusive = parse_bool(line, key, v)?,
            "head_tau" => h.tau = parse(line, key, v)?,
            "confidence_threshold" => h.confidence_threshold = parse(line, key, v)?,
            "update_interval" => h.update_interval = parse_interval(line, key, v)?,
            "memory_capacity" => h.memory_capacity = parse(line, key, v)?,
            "rank" => self.model.adapter_rank = parse(line, key, v)?,
            "adapter_placement" => {
                self.model.adapter_placement = match v {
                    "deep" => AdapterPlacement::DeepOnly,
                    "all" => AdapterPlacement::AllLayers,
                    _ => {
                        return Err(HarnessError::Config {
                            line,
                            msg: format!("adapter_placement must be deep or all, got {v:?}"),
                        })
                    }
                }
            }
            _ => {
                return Err(HarnessError::Config {
                    line,
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        if !(self.stage == 1 || self.stage == 2) {
            return bad("stage must be 1 or 2");
        }
        if self.ratio.iter().any(|r| !(*r >= 0.0)) || self.ratio.iter().sum::<f64>() <= 0.0 {
            return bad("ratio components must be >= 0 and not all zero");
        }
        if self.batch == 0 || self.scenes == 0 {
            return bad("batch and scenes must be positive");
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.model.head.beta) {
            return bad("beta must lie in [0, 1]");
        }
        self.weights.validate()?;
        self.model.encoder.validate()?;
        self.budget().validate(self.model.adapter_rank)?;
        self.scene.validate()?;
        Ok(())
    }

    pub fn budget(&self) -> RankBudget {
        RankBudget {
            n_hat: self.n_hat,
            m_hat: self.m_hat,
            blocks: self.model.adapter_sites().len(),
        }
    }

    /// Reference modality for a uniform draw `u ∈ [0, 1)`.
    pub fn reference_for(&self, u: f64) -> ReferenceModality {
        let total: f64 = self.ratio.iter().sum();
        let mut acc = 0.0;
        for (r, w) in ReferenceModality::ALL.iter().zip(self.ratio) {
            acc += w / total;
            if u < acc && w > 0.0 {
                return *r;
            }
        }
        *ReferenceModality::ALL
            .iter()
            .zip(self.ratio)
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(r, _)| r)
            .expect("validated ratio")
    }
}
