//! Grounding and tracking loops, per-frame results and their summary.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use mmtrack::boxhead::{decode_box, ContextMemory, MemoryEntry};
use mmtrack::encoder::{AuxFrames, EncoderInputs, ReferenceModality, VideoModality};
use mmtrack::losses::{iou, BBox};
use mmtrack::model::Inference;
use mmtrack::{Tensor, Tracker64};

use crate::data::{template_view, CropWindow, SEARCH_FACTOR};
use crate::error::{io_err, HarnessError, Result};
use crate::scene::SyntheticScene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<BBox<f64>> for BoxRecord {
    fn from(b: BBox<f64>) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl From<BoxRecord> for BBox<f64> {
    fn from(b: BoxRecord) -> Self {
        BBox::new(b.cx, b.cy, b.w, b.h)
    }
}

/// One line of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoxRecord,
    pub confidence: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub scene: String,
    pub frames: Vec<FrameRecord>,
}

impl TrackResult {
    pub fn mean_iou(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.iou))
    }

    pub fn success(&self) -> f64 {
        success_rate(self.frames.iter().map(|f| f.iou))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Fraction of frames with IoU ≥ 0.5.
pub fn success_rate(v: impl Iterator<Item = f64>) -> f64 {
    let (hit, n) = v.fold((0usize, 0usize), |(h, n), x| (h + usize::from(x >= 0.5), n + 1));
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Video-modality argument: `rgb`, `rgbd`, `rgbt` or `rgbe`.
pub fn parse_video(s: &str) -> Option<Option<VideoModality>> {
    match s {
        "rgb" => Some(None),
        "rgbd" => Some(Some(VideoModality::Depth)),
        "rgbt" => Some(Some(VideoModality::Thermal)),
        "rgbe" => Some(Some(VideoModality::Event)),
        _ => None,
    }
}

pub fn video_label(aux: Option<VideoModality>) -> &'static str {
    match aux {
        None => "rgb",
        Some(VideoModality::Depth) => "rgbd",
        Some(VideoModality::Thermal) => "rgbt",
        Some(VideoModality::Event) => "rgbe",
        Some(VideoModality::Rgb) => "rgb",
    }
}

/// Keeps a box at least one pixel wide and inside the frame.
pub fn clamp_box(b: &BBox<f64>, world: usize) -> BBox<f64> {
    let s = world as f64;
    let w = if b.w.is_finite() { b.w.clamp(1.0, s) } else { 1.0 };
    let h = if b.h.is_finite() { b.h.clamp(1.0, s) } else { 1.0 };
    let cx = if b.cx.is_finite() { b.cx.clamp(w / 2.0, s - w / 2.0) } else { s / 2.0 };
    let cy = if b.cy.is_finite() { b.cy.clamp(h / 2.0, s - h / 2.0) } else { s / 2.0 };
    BBox::new(cx, cy, w, h)
}

struct View {
    rgb: Tensor<f64>,
    aux: Option<Tensor<f64>>,
}

fn view(scene: &SyntheticScene, t: usize, win: &CropWindow, aux: Option<VideoModality>) -> View {
    View {
        rgb: win.sample(&scene.render(t, VideoModality::Rgb)),
        aux: aux.map(|m| win.sample(&scene.render(t, m))),
    }
}

struct Reference {
    kind: ReferenceModality,
    lang: Vec<usize>,
    template: Option<View>,
}

fn run(
    tracker: &Tracker64,
    r: &Reference,
    search: &View,
    aux: Option<VideoModality>,
    memory: Option<&ContextMemory<f64>>,
) -> Result<Inference<f64>> {
    let inputs = EncoderInputs {
        reference: r.kind,
        lang_ids: &r.lang,
        template: r.template.as_ref().map(|t| &t.rgb),
        search: &search.rgb,
        aux: aux.zip(search.aux.as_ref()).map(|(m, s)| AuxFrames {
            modality: m,
            template: r.template.as_ref().and_then(|t| t.aux.as_ref()),
            search: s,
        }),
    };
    Ok(tracker.infer(&inputs, memory.map(|m| &m.cached))?)
}

fn decode(tracker: &Tracker64, inf: &Inference<f64>) -> Result<(BBox<f64>, f64)> {
    let s = tracker.cfg.encoder.search_size;
    Ok(decode_box(&inf.maps, tracker.cfg.encoder.patch, s, s)?)
}

/// Localizes the target from language alone on the full first frame.
pub fn ground(tracker: &Tracker64, scene: &SyntheticScene, aux: Option<VideoModality>) -> Result<(BBox<f64>, f64)> {
    let r = Reference {
        kind: ReferenceModality::Nl,
        lang: scene.lang_ids.clone(),
        template: None,
    };
    let win = CropWindow::full_frame(scene.world(), tracker.cfg.encoder.search_size);
    let inf = run(tracker, &r, &view(scene, 0, &win, aux), aux, None)?;
    let (b, conf) = decode(tracker, &inf)?;
    Ok((clamp_box(&win.to_frame(&b), scene.world()), conf))
}

/// Tracks the scene's target through every frame. Language-only references ground the
/// first frame, then continue with the grounded box as template.
pub fn track(
    tracker: &Tracker64,
    scene: &SyntheticScene,
    reference: ReferenceModality,
    aux: Option<VideoModality>,
    name: &str,
) -> Result<TrackResult> {
    let world = scene.world();
    let (first, conf0) = if reference.has_template() {
        (scene.gt_box(0), 1.0)
    } else {
        ground(tracker, scene, aux)?
    };
    let kind = if reference.has_template() { reference } else { ReferenceModality::NlBbox };
    let (tmpl, aux_tmpl, tmask, _) = template_view(scene, 0, &first, aux, &tracker.cfg);
    let r = Reference {
        kind,
        lang: if kind.has_language() { scene.lang_ids.clone() } else { Vec::new() },
        template: Some(View { rgb: tmpl, aux: aux_tmpl }),
    };
    // initial context: the template alone
    let win = CropWindow::around(&first, SEARCH_FACTOR, tracker.cfg.encoder.search_size);
    let inf = run(tracker, &r, &view(scene, 0, &win, aux), aux, None)?;
    let t_emb = inf
        .template
        .clone()
        .ok_or_else(|| HarnessError::Invalid("template embeddings missing".into()))?;
    let mut memory = ContextMemory::new(MemoryEntry { embeddings: t_emb, in_box: tmask }, &inf.semantic, &tracker.cfg.head)?;
    let mut frames = vec![FrameRecord {
        scene: Some(name.to_string()),
        frame: 0,
        bbox: first.into(),
        confidence: conf0,
        iou: iou(&first, &scene.gt_box(0)).clamp(0.0, 1.0),
    }];
    let mut last = first;
    let grid = tracker.grid();
    for t in 1..scene.frames() {
        let win = CropWindow::around(&last, SEARCH_FACTOR, tracker.cfg.encoder.search_size);
        let inf = run(tracker, &r, &view(scene, t, &win, aux), aux, Some(&memory))?;
        let (b, conf) = decode(tracker, &inf)?;
        let pred = clamp_box(&win.to_frame(&b), world);
        let entry = MemoryEntry::from_box(inf.search.clone(), &win.to_crop(&pred), grid);
        memory.update_context(entry, conf, &inf.semantic, &tracker.cfg.head)?;
        frames.push(FrameRecord {
            scene: Some(name.to_string()),
            frame: t,
            bbox: pred.into(),
            confidence: conf,
            iou: iou(&pred, &scene.gt_box(t)).clamp(0.0, 1.0),
        });
        last = pred;
    }
    Ok(TrackResult {
        scene: name.to_string(),
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneSummary {
    pub scene: String,
    pub frames: usize,
    pub mean_iou: f64,
    pub success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub frames: usize,
    pub mean_iou: f64,
    pub success: f64,
    pub per_scene: Vec<SceneSummary>,
}

/// Frame-weighted aggregate over all results plus a per-scene breakdown, in input order.
pub fn evaluate(results: &[TrackResult]) -> Result<Summary> {
    if results.is_empty() || results.iter().all(|r| r.frames.is_empty()) {
        return Err(HarnessError::Invalid("no results to evaluate".into()));
    }
    let all = || results.iter().flat_map(|r| r.frames.iter().map(|f| f.iou));
    Ok(Summary {
        frames: all().count(),
        mean_iou: mean(all()),
        success: success_rate(all()),
        per_scene: results
            .iter()
            .map(|r| SceneSummary {
                scene: r.scene.clone(),
                frames: r.frames.len(),
                mean_iou: r.mean_iou(),
                success: r.success(),
            })
            .collect(),
    })
}

pub fn write_jsonl(path: &Path, results: &[TrackResult]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for r in results {
        for f in &r.frames {
            serde_json::to_writer(&mut out, f)?;
            out.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

/// Reads a results file, grouping consecutive records by scene name.
pub fn read_jsonl(path: &Path) -> Result<Vec<TrackResult>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut results: Vec<TrackResult> = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line)?;
        if !(0.0..=1.0).contains(&rec.iou) {
            return Err(HarnessError::Invalid(format!("iou {} outside [0, 1]", rec.iou)));
        }
        let name = rec.scene.clone().unwrap_or_default();
        match results.last_mut() {
            Some(r) if r.scene == name => r.frames.push(rec),
            _ => results.push(TrackResult {
                scene: name,
                frames: vec![rec],
            }),
        }
    }
    Ok(results)
}
