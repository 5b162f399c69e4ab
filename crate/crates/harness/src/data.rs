//! Crops and training units.

use rand::Rng;

use mmtrack::encoder::{ReferenceModality, VideoModality};
use mmtrack::losses::{BBox, GridSpec};
use mmtrack::model::{AuxSample, ModelConfig, RegionSample};
use mmtrack::Tensor;

use crate::config::TrainConfig;
use crate::scene::SyntheticScene;

/// Square window of side `side` frame pixels centered at `(cx, cy)`, resampled to `out × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    /// Window around `b` whose side is `factor·sqrt(w·h)`.
    pub fn around(b: &BBox<f64>, factor: f64, out: usize) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            side: factor * (b.w.max(1e-3) * b.h.max(1e-3)).sqrt(),
            out,
        }
    }

    /// The whole `world × world` frame.
    pub fn full_frame(world: usize, out: usize) -> Self {
        let w = world as f64;
        Self {
            cx: w / 2.0,
            cy: w / 2.0,
            side: w,
            out,
        }
    }

    fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    pub fn to_crop(&self, b: &BBox<f64>) -> BBox<f64> {
        let (x0, y0) = self.origin();
        let k = self.scale();
        BBox::new((b.cx - x0) * k, (b.cy - y0) * k, b.w * k, b.h * k)
    }

    pub fn to_frame(&self, b: &BBox<f64>) -> BBox<f64> {
        let (x0, y0) = self.origin();
        let k = self.scale();
        BBox::new(b.cx / k + x0, b.cy / k + y0, b.w / k, b.h / k)
    }

    /// Bilinear resampling averaged over 2×2 sub-positions per output pixel; samples
    /// outside the frame read zero.
    pub fn sample(&self, frame: &Tensor<f64>) -> Tensor<f64> {
        let d = frame.dims();
        let (h, w, ch) = (d[0], d[1], d[2]);
        let src = frame.data();
        let (x0, y0) = self.origin();
        let step = self.side / self.out as f64;
        let at = |y: i64, x: i64, c: usize| -> f64 {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                0.0
            } else {
                src[(y as usize * w + x as usize) * ch + c]
            }
        };
        let mut out = vec![0.0; self.out * self.out * ch];
        for oy in 0..self.out {
            for ox in 0..self.out {
                for sy in [0.25, 0.75] {
                    for sx in [0.25, 0.75] {
                        // continuous source coordinate in pixel-center convention
                        let fx = x0 + (ox as f64 + sx) * step - 0.5;
                        let fy = y0 + (oy as f64 + sy) * step - 0.5;
                        let (ix, iy) = (fx.floor(), fy.floor());
                        let (ax, ay) = (fx - ix, fy - iy);
                        let (ix, iy) = (ix as i64, iy as i64);
                        for c in 0..ch {
                            let v = at(iy, ix, c) * (1.0 - ax) * (1.0 - ay)
                                + at(iy, ix + 1, c) * ax * (1.0 - ay)
                                + at(iy + 1, ix, c) * (1.0 - ax) * ay
                                + at(iy + 1, ix + 1, c) * ax * ay;
                            out[(oy * self.out + ox) * ch + c] += 0.25 * v;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.out, self.out, ch], out).expect("crop dims")
    }
}

pub const TEMPLATE_FACTOR: f64 = 2.0;
pub const SEARCH_FACTOR: f64 = 4.0;

/// Template crop, its aux counterpart and in-box mask for the box `b` of frame `t`.
pub fn template_view(
    scene: &SyntheticScene,
    t: usize,
    b: &BBox<f64>,
    aux: Option<VideoModality>,
    model: &ModelConfig,
) -> (Tensor<f64>, Option<Tensor<f64>>, Vec<bool>, CropWindow) {
    let win = CropWindow::around(b, TEMPLATE_FACTOR, model.encoder.template_size);
    let img = win.sample(&scene.render(t, VideoModality::Rgb));
    let aux_img = aux.map(|m| win.sample(&scene.render(t, m)));
    let mask = template_mask(&win.to_crop(b), model.template_grid());
    (img, aux_img, mask, win)
}

pub fn template_mask(b: &BBox<f64>, grid: GridSpec) -> Vec<bool> {
    grid.in_box_mask(b)
}

/// A group of regions trained together.
#[derive(Clone, Debug)]
pub struct TrainingUnit {
    pub regions: Vec<RegionSample<f64>>,
    pub use_context: bool,
}

fn pick_pair<R: Rng>(rng: &mut R, frames: usize, anchor: usize, max_interval: usize) -> usize {
    let lo = anchor.saturating_sub(max_interval);
    let hi = (anchor + max_interval).min(frames - 1);
    rng.random_range(lo..=hi)
}

/// One template (frame `t0`) and two jittered search regions, or two grounding views
/// for language-only references.
pub fn sample_training_unit<R: Rng>(
    scene: &SyntheticScene,
    reference: ReferenceModality,
    aux: Option<VideoModality>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> TrainingUnit {
    let frames = scene.frames();
    let model = &cfg.model;
    let t0 = rng.random_range(0..frames);
    let t1 = pick_pair(rng, frames, t0, cfg.max_interval);
    let t2 = pick_pair(rng, frames, t0, cfg.max_interval);
    let lang_ids = if reference.has_language() { scene.lang_ids.clone() } else { Vec::new() };
    if !reference.has_template() {
        let regions = [t1, t2]
            .iter()
            .map(|&t| {
                let win = CropWindow::full_frame(scene.world(), model.encoder.search_size);
                RegionSample {
                    reference,
                    lang_ids: lang_ids.clone(),
                    template: None,
                    search: win.sample(&scene.render(t, VideoModality::Rgb)),
                    aux: aux.map(|m| AuxSample {
                        modality: m,
                        template: None,
                        search: win.sample(&scene.render(t, m)),
                    }),
                    gt: win.to_crop(&scene.gt_box(t)),
                    template_in_box: None,
                }
            })
            .collect();
        return TrainingUnit {
            regions,
            use_context: false,
        };
    }
    let (tmpl, aux_tmpl, tmask, _) = template_view(scene, t0, &scene.gt_box(t0), aux, model);
    let regions = [t1, t2]
        .iter()
        .map(|&t| {
            let gt = scene.gt_box(t);
            let sz = (gt.w * gt.h).sqrt();
            let mut win = CropWindow::around(&gt, SEARCH_FACTOR, model.encoder.search_size);
            win.side *= 1.0 + rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter);
            win.cx += rng.random_range(-cfg.center_jitter..=cfg.center_jitter) * sz;
            win.cy += rng.random_range(-cfg.center_jitter..=cfg.center_jitter) * sz;
            RegionSample {
                reference,
                lang_ids: lang_ids.clone(),
                template: Some(tmpl.clone()),
                search: win.sample(&scene.render(t, VideoModality::Rgb)),
                aux: aux.map(|m| AuxSample {
                    modality: m,
                    template: aux_tmpl.clone(),
                    search: win.sample(&scene.render(t, m)),
                }),
                gt: win.to_crop(&gt),
                template_in_box: Some(tmask.clone()),
            }
        })
        .collect();
    TrainingUnit {
        regions,
        use_context: true,
    }
}
