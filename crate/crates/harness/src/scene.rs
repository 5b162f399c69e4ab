//! Synthetic multi-modal tracking scenes.
//!
//! A scene is a small description (objects, paths, aux attributes) from which every
//! frame of every modality is rendered deterministically. Hard scenes add a twin of
//! the target with identical RGB appearance that crosses its path early and differs
//! from it in exactly one auxiliary channel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mmtrack::encoder::VideoModality;
use mmtrack::losses::BBox;
use mmtrack::Tensor;

use crate::error::{io_err, HarnessError, Result};

pub const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.15],
    [0.9, 0.2, 0.9],
    [0.15, 0.9, 0.9],
    [0.95, 0.55, 0.1],
    [0.95, 0.95, 0.95],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Self::Square, Self::Circle, Self::Triangle, Self::Cross];

    /// Coverage test in box-normalized coordinates `u, v ∈ [0, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        match self {
            Self::Square => true,
            Self::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Self::Triangle => (u - 0.5).abs() <= v / 2.0,
            Self::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
        }
    }
}

/// Language vocabulary: 0 pad, 1..=8 colors, 9..=12 shapes, 13..=21 coarse positions.
pub fn language_ids(color: usize, shape: usize, cx: f64, cy: f64, world: f64) -> Vec<usize> {
    let bin = |v: f64| ((3.0 * v / world).floor() as usize).min(2);
    vec![1 + color, 9 + shape, 13 + 3 * bin(cy) + bin(cx)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub world: usize,
    pub frames: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            world: 40,
            frames: 24,
            min_size: 6.0,
            max_size: 10.0,
            distractors: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(HarnessError::Invalid("object sizes must satisfy 0 < min_size <= max_size".into()));
        }
        if self.max_size * 2.0 > self.world as f64 {
            return Err(HarnessError::Scene(format!(
                "objects up to {} px do not fit a {} px world",
                self.max_size, self.world
            )));
        }
        if self.frames < 2 {
            return Err(HarnessError::Invalid("scenes need at least two frames".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: usize,
    pub shape: Shape,
    pub w: f64,
    pub h: f64,
    /// Center per frame.
    pub path: Vec<[f64; 2]>,
    pub depth: f64,
    pub temperature: f64,
    pub luminance: f64,
    /// Luminance alternates by ± this amount every frame.
    pub flicker: f64,
}

impl ObjectSpec {
    pub fn bbox(&self, t: usize) -> BBox<f64> {
        BBox::new(self.path[t][0], self.path[t][1], self.w, self.h)
    }

    fn lum(&self, t: i64) -> f64 {
        let sign = if t.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        self.luminance + sign * self.flicker
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
    /// Auxiliary channel that separates the target from its RGB twin.
    #[serde(with = "modality_name")]
    pub hard: Option<VideoModality>,
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub gt: Vec<[f64; 4]>,
    pub lang_ids: Vec<usize>,
    pub background_phase: [f64; 2],
}

/// Straight-line motion with reflection at the walls, so the box stays inside.
fn bounce_path(start: [f64; 2], vel: [f64; 2], steps: usize, half: [f64; 2], world: f64) -> Vec<[f64; 2]> {
    let mut p = start;
    let mut v = vel;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(p);
        for k in 0..2 {
            p[k] += v[k];
            let (lo, hi) = (half[k], world - half[k]);
            if p[k] < lo {
                p[k] = 2.0 * lo - p[k];
                v[k] = -v[k];
            }
            if p[k] > hi {
                p[k] = 2.0 * hi - p[k];
                v[k] = -v[k];
            }
            p[k] = p[k].clamp(lo, hi);
        }
    }
    out
}

/// Path that passes through `anchor` at frame `k`.
fn path_through(anchor: [f64; 2], k: usize, vel: [f64; 2], frames: usize, half: [f64; 2], world: f64) -> Vec<[f64; 2]> {
    let fwd = bounce_path(anchor, vel, frames - k, half, world);
    let back = bounce_path(anchor, [-vel[0], -vel[1]], k + 1, half, world);
    let mut out: Vec<[f64; 2]> = back.into_iter().skip(1).rev().collect();
    out.extend(fwd);
    out
}

fn random_velocity(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 2] {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let s = rng.random_range(lo..hi);
    [s * a.cos(), s * a.sin()]
}

fn random_object(rng: &mut ChaCha8Rng, cfg: &SceneConfig, color: usize, shape: Shape) -> ObjectSpec {
    let world = cfg.world as f64;
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    let h = rng.random_range(cfg.min_size..=cfg.max_size);
    let half = [w / 2.0, h / 2.0];
    let start = [
        rng.random_range(half[0]..world - half[0]),
        rng.random_range(half[1]..world - half[1]),
    ];
    let vel = random_velocity(rng, 0.4, 1.2);
    ObjectSpec {
        color,
        shape,
        w,
        h,
        path: bounce_path(start, vel, cfg.frames, half, world),
        depth: rng.random_range(0.2..0.9),
        temperature: rng.random_range(0.2..0.9),
        luminance: rng.random_range(0.3..0.7),
        flicker: if rng.random_bool(0.5) { rng.random_range(0.15..0.3) } else { 0.0 },
    }
}

/// Deterministic scene from `seed`. `hard` selects the auxiliary channel that
/// separates the target from its RGB twin.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, hard: Option<VideoModality>) -> Result<SyntheticScene> {
    cfg.validate()?;
    if hard == Some(VideoModality::Rgb) {
        return Err(HarnessError::Invalid("hard scenes need an auxiliary modality".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = cfg.world as f64;
    let t_color = rng.random_range(0..PALETTE.len());
    let t_shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let mut target = random_object(&mut rng, cfg, t_color, t_shape);
    let mut distractors = Vec::new();
    for _ in 0..cfg.distractors {
        // never the target's exact appearance
        let (c, s) = loop {
            let c = rng.random_range(0..PALETTE.len());
            let s = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            if c != t_color {
                break (c, s);
            }
        };
        distractors.push(random_object(&mut rng, cfg, c, s));
    }
    if let Some(m) = hard {
        let k = rng.random_range(3..=6usize).min(cfg.frames - 1);
        let mut twin = target.clone();
        let anchor = target.path[k];
        let nxt = target.path[(k + 1).min(cfg.frames - 1)];
        let prv = target.path[k.saturating_sub(1)];
        let tv = [nxt[0] - prv[0], nxt[1] - prv[1]];
        let ang = tv[1].atan2(tv[0]) + rng.random_range(0.6..1.0) * std::f64::consts::PI * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let speed = rng.random_range(0.8..1.3);
        twin.path = path_through(anchor, k, [speed * ang.cos(), speed * ang.sin()], cfg.frames, [twin.w / 2.0, twin.h / 2.0], world);
        match m {
            VideoModality::Depth => {
                target.depth = rng.random_range(0.2..0.4);
                twin.depth = target.depth + rng.random_range(0.4..0.55);
            }
            VideoModality::Thermal => {
                target.temperature = rng.random_range(0.7..0.95);
                twin.temperature = target.temperature - rng.random_range(0.5..0.65);
            }
            VideoModality::Event => {
                target.flicker = rng.random_range(0.25..0.3);
                twin.flicker = 0.0;
            }
            VideoModality::Rgb => unreachable!(),
        }
        distractors.push(twin);
    }
    let gt = (0..cfg.frames).map(|t| target.bbox(t).to_array()).collect();
    let lang_ids = language_ids(t_color, shape_index(t_shape), target.path[0][0], target.path[0][1], world);
    // the literal range is part of the scene format; TAU would change every scene
    #[allow(clippy::approx_constant)]
    let phases = [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)];
    Ok(SyntheticScene {
        seed,
        config: cfg.clone(),
        hard,
        target,
        distractors,
        gt,
        lang_ids,
        background_phase: phases,
    })
}

fn shape_index(s: Shape) -> usize {
    Shape::ALL.iter().position(|x| *x == s).expect("shape")
}

/// Sub-pixel coverage offsets (4 samples per pixel).
const SUB: [f64; 2] = [0.25, 0.75];

impl SyntheticScene {
    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn world(&self) -> usize {
        self.config.world
    }

    pub fn gt_box(&self, t: usize) -> BBox<f64> {
        BBox::from_array(self.gt[t])
    }

    /// Back to front: distractors first, the target last (on top).
    fn draw_order(&self) -> Vec<&ObjectSpec> {
        let mut v: Vec<&ObjectSpec> = self.distractors.iter().collect();
        v.push(&self.target);
        v
    }

    /// Per-pixel coverage of each object at frame `t` (same order as `draw_order`).
    fn coverage(&self, obj: &ObjectSpec, pos: [f64; 2]) -> Vec<(usize, f64)> {
        let n = self.world();
        let x1 = pos[0] - obj.w / 2.0;
        let y1 = pos[1] - obj.h / 2.0;
        let mut out = Vec::new();
        let (px0, px1) = ((x1.floor().max(0.0)) as usize, ((x1 + obj.w).ceil() as usize).min(n));
        let (py0, py1) = ((y1.floor().max(0.0)) as usize, ((y1 + obj.h).ceil() as usize).min(n));
        for y in py0..py1 {
            for x in px0..px1 {
                let mut c = 0.0;
                for sy in SUB {
                    for sx in SUB {
                        let u = (x as f64 + sx - x1) / obj.w;
                        let v = (y as f64 + sy - y1) / obj.h;
                        if obj.shape.contains(u, v) {
                            c += 0.25;
                        }
                    }
                }
                if c > 0.0 {
                    out.push((y * n + x, c));
                }
            }
        }
        out
    }

    fn composite(&self, t: usize, base: impl Fn(usize, usize) -> [f64; 3], value: impl Fn(&ObjectSpec) -> [f64; 3]) -> Tensor<f64> {
        let n = self.world();
        let mut img = vec![[0.0; 3]; n * n];
        for (i, px) in img.iter_mut().enumerate() {
            *px = base(i / n, i % n);
        }
        for obj in self.draw_order() {
            let val = value(obj);
            for (i, c) in self.coverage(obj, obj.path[t]) {
                for k in 0..3 {
                    img[i][k] = img[i][k] * (1.0 - c) + val[k] * c;
                }
            }
        }
        Tensor::new(vec![n, n, 3], img.into_iter().flatten().collect()).expect("frame dims")
    }

    fn rgb(&self, t: usize) -> Tensor<f64> {
        let n = self.world() as f64;
        let [a, b] = self.background_phase;
        self.composite(
            t,
            |y, x| {
                let v = 0.15 + 0.05 * ((x as f64 / n * 6.0 + a).sin() * (y as f64 / n * 5.0 + b).cos());
                [v, v, v * 1.1]
            },
            |o| PALETTE[o.color],
        )
    }

    fn luminance_map(&self, t: i64) -> Vec<f64> {
        let n = self.world();
        let pos_t = t.max(0) as usize;
        let mut img = vec![0.0; n * n];
        for obj in self.draw_order() {
            let l = obj.lum(t);
            for (i, c) in self.coverage(obj, obj.path[pos_t]) {
                img[i] = img[i] * (1.0 - c) + l * c;
            }
        }
        img
    }

    /// One frame of `modality`, `world × world × 3`.
    pub fn render(&self, t: usize, modality: VideoModality) -> Tensor<f64> {
        let n = self.world();
        match modality {
            VideoModality::Rgb => self.rgb(t),
            VideoModality::Depth => self.composite(
                t,
                |y, _| {
                    let v = 0.3 + 0.4 * y as f64 / n as f64;
                    [v; 3]
                },
                |o| [o.depth; 3],
            ),
            VideoModality::Thermal => self.composite(t, |_, _| [0.1; 3], |o| [o.temperature; 3]),
            VideoModality::Event => {
                let cur = self.luminance_map(t as i64);
                let prev = self.luminance_map(t as i64 - 1);
                // frame 0 compares against the same positions one flicker phase earlier
                let prev = if t == 0 {
                    let n = self.world();
                    let mut img = vec![0.0; n * n];
                    for obj in self.draw_order() {
                        let l = obj.lum(-1);
                        for (i, c) in self.coverage(obj, obj.path[0]) {
                            img[i] = img[i] * (1.0 - c) + l * c;
                        }
                    }
                    img
                } else {
                    prev
                };
                let data = cur.iter().zip(&prev).flat_map(|(a, b)| [(a - b).abs(); 3]).collect();
                Tensor::new(vec![n, n, 3], data).expect("frame dims")
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let s: Self = serde_json::from_str(&text)?;
        s.check()?;
        Ok(s)
    }

    /// Structural checks for scenes read from disk.
    pub fn check(&self) -> Result<()> {
        let f = self.frames();
        let w = self.world() as f64;
        if self.gt.len() != f || self.target.path.len() != f || self.distractors.iter().any(|d| d.path.len() != f) {
            return Err(HarnessError::Scene("path or ground-truth length differs from the frame count".into()));
        }
        for b in &self.gt {
            let c = BBox::from_array(*b).corners();
            if c[0] < -1e-9 || c[1] < -1e-9 || c[2] > w + 1e-9 || c[3] > w + 1e-9 {
                return Err(HarnessError::Scene(format!("ground-truth box {b:?} leaves the frame")));
            }
        }
        Ok(())
    }
}

/// `count` scenes; the first `round(count·hard_fraction)` are hard, cycling through
/// depth, thermal and event.
pub fn generate_set(seed: u64, count: usize, hard_fraction: f64, cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    let n_hard = (count as f64 * hard_fraction).round() as usize;
    (0..count)
        .map(|i| {
            let hard = (i < n_hard).then(|| VideoModality::AUXILIARY[i % 3]);
            generate_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), cfg, hard)
        })
        .collect()
}

pub fn scene_file_name(i: usize) -> String {
    format!("scene_{i:04}.json")
}

/// Loads every `scene_*.json` in `dir`, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scene_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::Scene(format!("no scene files in {}", dir.display())));
    }
    paths.iter().map(|p| SyntheticScene::load(p)).collect()
}

pub fn modality_label(m: VideoModality) -> &'static str {
    match m {
        VideoModality::Rgb => "rgb",
        VideoModality::Depth => "depth",
        VideoModality::Thermal => "thermal",
        VideoModality::Event => "event",
    }
}

pub fn modality_from_label(s: &str) -> Option<VideoModality> {
    VideoModality::ALL.into_iter().find(|m| modality_label(*m) == s)
}

mod modality_name {
    use super::{modality_from_label, modality_label};
    use mmtrack::encoder::VideoModality;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<VideoModality>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => s.serialize_some(modality_label(*m)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<VideoModality>, D::Error> {
        let v: Option<String> = Option::deserialize(d)?;
        v.map(|s| modality_from_label(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown modality {s}"))))
            .transpose()
    }
}
