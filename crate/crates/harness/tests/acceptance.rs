//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmtrack::boxhead::{in_out_attention, scenario_tokens, split_distractor_mask};
use mmtrack::encoder::{extract_features, AdapterSet, AttentionMode, AuxFrames, EncoderInputs, ReferenceModality, VideoModality};
use mmtrack::model::{ModelConfig, Tracker};
use mmtrack::params::ParamGroup;
use mmtrack::numerics::cosine_similarity;
use mmtrack::rama::{allocate, amtb_forward, prune_block, AdapterBlock, BlockImportance, RankBudget};
use mmtrack::{Tensor, Tracker64};

use mmtrack_harness::checkpoint::{save_tracker, tracker_entries};
use mmtrack_harness::config::TrainConfig;
use mmtrack_harness::data::{template_view, CropWindow, SEARCH_FACTOR};
use mmtrack_harness::gradcheck::{check_op, OPS};
use mmtrack_harness::scene::{generate_set, load_dir, scene_file_name, SyntheticScene};
use mmtrack_harness::track::{evaluate, track, write_jsonl, TrackResult};
use mmtrack_harness::train::{frozen_digest, load_scenes, train_stage1, train_stage2};

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
}

fn report(lines: &mut Vec<Line>, id: u8, name: &'static str, pass: bool, detail: String) {
    println!("criterion {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    lines.push(Line { id, name, pass });
}

fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f64> {
    Tensor::new(vec![size, size, 3], (0..size * size * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn gradient_suite() -> (bool, String) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for op in OPS {
        match check_op(op, 20) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error.min(r.max_abs_error / 1e-8));
                if !r.pass() {
                    failed.push(format!("{op} ({} seeds failed)", r.failures));
                }
            }
            Err(e) => failed.push(format!("{op}: {e}")),
        }
    }
    let t = start.elapsed();
    let pass = failed.is_empty() && t < Duration::from_secs(60);
    (pass, format!("{} ops x 20 seeds in {t:.2?}; failures: {failed:?}", OPS.len()))
}

fn masked_pruned() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut err = None;
    for draw in 0..50u64 {
        let mut tr = Tracker::<f64>::new(ModelConfig::default(), 100 + draw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let with_aux = draw % 2 == 1;
        if with_aux {
            tr.attach_adapters(draw);
            // nonzero singular values so the adapters matter
            for ids in &tr.adapters {
                for &l in &ids.lambda {
                    tr.store.get_mut(l).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                }
            }
            for name in ["aux.patch.w", "aux.patch.b"] {
                let id = tr.store.id(name).unwrap();
                tr.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        let tm = random_frame(&mut rng, 16);
        let se = random_frame(&mut rng, 32);
        let atm = random_frame(&mut rng, 16);
        let ase = random_frame(&mut rng, 32);
        let lang: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(1..64)).collect();
        let modality = VideoModality::AUXILIARY[(draw % 3) as usize];
        for r in ReferenceModality::ALL {
            let inp = EncoderInputs {
                reference: r,
                lang_ids: if r.has_language() { &lang } else { &[] },
                template: r.has_template().then_some(&tm),
                search: &se,
                aux: with_aux.then(|| AuxFrames {
                    modality,
                    template: r.has_template().then_some(&atm),
                    search: &ase,
                }),
            };
            let set = with_aux.then(|| AdapterSet {
                blocks: &tr.adapters,
                modality,
            });
            let a = extract_features(&tr.cfg.encoder, &tr.store, &tr.enc, &inp, AttentionMode::Masked, set);
            let b = extract_features(&tr.cfg.encoder, &tr.store, &tr.enc, &inp, AttentionMode::Pruned, set);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    for row in 0..a.layout.len() {
                        if a.layout.is_available(row) {
                            let d = a.joint.row(row).iter().zip(b.joint.row(row)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                            worst = worst.max(d);
                        }
                    }
                }
                (Err(e), _) | (_, Err(e)) => err = Some(e.to_string()),
            }
        }
    }
    let pass = err.is_none() && worst <= 1e-10;
    (pass, format!("50 draws x 3 references, max |masked - pruned| = {worst:.3e}{}", err.map(|e| format!(", error {e}")).unwrap_or_default()))
}

fn random_block(rng: &mut ChaCha8Rng, index: usize, rank: usize, zero_prob: f64) -> AdapterBlock<f64> {
    let (d_in, d_out) = (rng.random_range(2..8), rng.random_range(2..8));
    let m = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::from_rows(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let w = m(rng, d_in, d_out);
    let p = m(rng, d_in, rank);
    let q = m(rng, rank, d_out);
    let lambda = std::array::from_fn(|_| {
        (0..rank)
            .map(|_| if rng.random_bool(zero_prob) { 0.0 } else { rng.random_range(-1.0..1.0) })
            .collect()
    });
    AdapterBlock::new(index, w, p, q, lambda).unwrap()
}

fn amtb_prune() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let rank = rng.random_range(1..9);
        let block = random_block(&mut rng, k, rank, 0.5);
        let a = VideoModality::AUXILIARY[k % 3];
        let n = rng.random_range(1..6);
        let d_in = block.w.rows();
        let e_r = Tensor::from_rows(n, d_in, (0..n * d_in).map(|_| rng.random_range(-1.0..1.0)).collect());
        let e_a = Tensor::from_rows(n, d_in, (0..n * d_in).map(|_| rng.random_range(-1.0..1.0)).collect());
        let full = amtb_forward(&e_r, Some(&e_a), &block, a).unwrap();
        let pruned = amtb_forward(&e_r, Some(&e_a), &prune_block(&block, a), a).unwrap();
        worst = worst.max(full.max_abs_diff(&pruned));
    }
    (worst <= 1e-12, format!("100 blocks, max |full - pruned| = {worst:.3e}"))
}

fn allocation_invariants() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let rank = 8;
    // 16 and 32 per block at rank 32, scaled to rank 8
    let (n_hat, m_hat) = (16 * rank / 32, 32 * rank / 32);
    let mut bad = Vec::new();
    for trial in 0..50 {
        let nb = rng.random_range(2..10);
        let mut blocks: Vec<AdapterBlock<f64>> = (0..nb).map(|k| random_block(&mut rng, k, rank, 0.0)).collect();
        let states: Vec<BlockImportance<f64>> = blocks
            .iter()
            .map(|b| {
                let mut s = BlockImportance::new(b, 0.85, 0.85);
                for st in [&mut s.p, &mut s.q].into_iter().chain(s.lambda.iter_mut()) {
                    st.i_bar.iter_mut().for_each(|v| *v = rng.random::<f64>());
                    st.u_bar.iter_mut().for_each(|v| *v = rng.random::<f64>());
                }
                s
            })
            .collect();
        let budget = RankBudget { n_hat, m_hat, blocks: nb };
        allocate(&mut blocks, &states, budget).unwrap();
        let tuples: usize = blocks.iter().map(|b| b.shared_mask.iter().filter(|&&m| m).count()).sum();
        let nonzero: usize = blocks.iter().map(|b| b.lambda.iter().flatten().filter(|&&v| v != 0.0).count()).sum();
        let outside = blocks
            .iter()
            .any(|b| (0..rank).any(|i| !b.shared_mask[i] && b.lambda.iter().any(|l| l[i] != 0.0)));
        if tuples != budget.n() || nonzero != budget.m() || outside {
            bad.push(format!("trial {trial}: tuples {tuples}/{}, nonzero {nonzero}/{}, outside {outside}", budget.n(), budget.m()));
        }
    }
    (bad.is_empty(), format!("50 random allocations with n_hat={n_hat}, m_hat={m_hat}; violations: {bad:?}"))
}

/// Direct evaluation of the scenario tokens: enumerate every candidate distractor mask
/// and keep the one consistent with the exclusive prefix rule.
fn brute_force(token: &[f64], e: &[Vec<f64>], in_box: &[bool], beta: f64) -> (Vec<bool>, [Vec<f64>; 3]) {
    let n = e.len();
    let c = token.len();
    let s: Vec<f64> = e.iter().map(|r| r.iter().zip(token).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt()).collect();
    let soft = |set: &[bool]| -> Vec<f64> {
        let idx: Vec<usize> = (0..n).filter(|&i| set[i]).collect();
        if idx.is_empty() {
            return vec![0.0; c];
        }
        let m = idx.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.iter().map(|&i| (s[i] - m).exp()).sum();
        let mut out = vec![0.0; c];
        for &i in &idx {
            let w = (s[i] - m).exp() / z;
            for (o, v) in out.iter_mut().zip(&e[i]) {
                *o += w * v;
            }
        }
        out
    };
    let out_set: Vec<bool> = in_box.iter().map(|b| !b).collect();
    // out-box attention probabilities
    let mo = (0..n).filter(|&i| out_set[i]).map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
    let zo: f64 = (0..n).filter(|&i| out_set[i]).map(|i| (s[i] - mo).exp()).sum();
    let a: Vec<f64> = (0..n).map(|i| if out_set[i] { (s[i] - mo).exp() / zo } else { 0.0 }).collect();
    let above = |i: usize, j: usize| a[j] > a[i] || (a[j] == a[i] && j < i);
    let mut found = None;
    for bits in 0u32..(1 << n) {
        let d: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        if (0..n).any(|i| d[i] && in_box[i]) {
            continue;
        }
        let ok = (0..n).filter(|&i| out_set[i]).all(|i| {
            let mass: f64 = (0..n).filter(|&j| out_set[j] && above(i, j)).map(|j| a[j]).sum();
            d[i] == (mass < beta)
        });
        if ok {
            found = Some(d);
            break;
        }
    }
    let d = found.expect("exactly one consistent mask exists");
    let bg: Vec<bool> = (0..n).map(|i| out_set[i] && !d[i]).collect();
    let toks = [soft(in_box), soft(&d), soft(&bg)];
    (d, toks)
}

fn boxhead_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    let mut scenes = 0;
    for _ in 0..400 {
        let n = rng.random_range(2..=8);
        let c = rng.random_range(2..6);
        let mut in_box: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        in_box[0] = true;
        if in_box.iter().all(|&b| b) {
            in_box[n - 1] = false;
        }
        let token: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let et = Tensor::from_rows(n, c, e.concat());
        let beta = rng.random::<f64>();
        let (d, toks) = brute_force(&token, &e, &in_box, beta);
        let got = scenario_tokens(&token, &et, &in_box, beta, false).unwrap();
        let io = in_out_attention(&token, &et, &in_box).unwrap();
        let (m_d, _) = split_distractor_mask(&io.a_out, &in_box, beta, false).unwrap();
        let got_d: Vec<bool> = (0..n).map(|i| !m_d.is_blocked(0, i)).collect();
        mismatches += usize::from(got_d != d);
        for (x, y) in [(&got.t_t, &toks[0]), (&got.t_d, &toks[1]), (&got.t_b, &toks[2])] {
            worst = worst.max(x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        scenes += 1;
    }
    // monotone sweep and the empty set at beta = 0
    let mut monotone = true;
    let mut empty_at_zero = true;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let mut in_box: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        in_box[0] = true;
        in_box[n - 1] = false;
        let c = 3;
        let token: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let et = Tensor::from_rows(n, c, (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect());
        let io = in_out_attention(&token, &et, &in_box).unwrap();
        let mut prev: Option<Vec<bool>> = None;
        for k in 0..=100 {
            let beta = k as f64 / 100.0;
            let (m_d, _) = split_distractor_mask(&io.a_out, &in_box, beta, false).unwrap();
            let d: Vec<bool> = (0..n).map(|i| !m_d.is_blocked(0, i)).collect();
            if k == 0 && d.iter().any(|&x| x) {
                empty_at_zero = false;
            }
            if let Some(p) = &prev {
                if p.iter().zip(&d).any(|(&a, &b)| a && !b) {
                    monotone = false;
                }
            }
            prev = Some(d);
        }
    }
    let pass = worst <= 1e-12 && mismatches == 0 && monotone && empty_at_zero;
    (
        pass,
        format!(
            "{scenes} scenes, max token error {worst:.3e}, mask mismatches {mismatches}, monotone in beta {monotone}, empty at beta=0 {empty_at_zero}"
        ),
    )
}

fn mean_token_cosine(tr: &Tracker64, cfg: &TrainConfig, scenes: &[SyntheticScene]) -> f64 {
    let mut cs = Vec::new();
    for s in scenes {
        for f in [0, s.frames() / 3, 2 * s.frames() / 3] {
            let gt = s.gt_box(f);
            let (tm, _, _, _) = template_view(s, f, &gt, None, &cfg.model);
            let win = CropWindow::around(&gt, SEARCH_FACTOR, cfg.model.encoder.search_size);
            let se = win.sample(&s.render(f, VideoModality::Rgb));
            let inp = EncoderInputs {
                reference: ReferenceModality::NlBbox,
                lang_ids: &s.lang_ids,
                template: Some(&tm),
                search: &se,
                aux: None,
            };
            let inf = tr.infer(&inp, None).unwrap();
            cs.push(cosine_similarity(&inf.vis_token, inf.lang_token.as_ref().unwrap()).unwrap());
        }
    }
    cs.iter().sum::<f64>() / cs.len() as f64
}

fn track_all(tr: &Tracker64, scenes: &[SyntheticScene], r: ReferenceModality, aux: Option<VideoModality>) -> Vec<TrackResult> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| track(tr, s, r, aux, &scene_file_name(i)).unwrap())
        .collect()
}

/// Small end-to-end run through files: scenes, both stages, tracking. Returns the bytes
/// of both checkpoints and of the results file.
fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let mut cfg = TrainConfig::default();
    cfg.scene.frames = 8;
    let scenes = generate_set(5, 4, 0.5, &cfg.scene).unwrap();
    let data = dir.join("scenes");
    std::fs::create_dir_all(&data).unwrap();
    for (i, s) in scenes.iter().enumerate() {
        s.save(&data.join(scene_file_name(i))).unwrap();
    }
    cfg.data = Some(data.clone());
    cfg.steps = 12;
    cfg.batch = 2;
    cfg.warmup = 2;
    let scenes = load_dir(&data).unwrap();
    let (s1, _) = train_stage1(&cfg, &scenes).unwrap();
    let c1 = dir.join("s1.ckpt");
    save_tracker(&c1, &s1, None).unwrap();
    let mut c2cfg = cfg.clone();
    c2cfg.stage = 2;
    c2cfg.steps = 8;
    c2cfg.alloc_warmup = 3;
    c2cfg.alloc_interval = 3;
    let out = train_stage2(&c2cfg, s1, &scenes).unwrap();
    let shared: Vec<Vec<bool>> = out.mask.iter().map(|m| m.shared.clone()).collect();
    let c2 = dir.join("s2.ckpt");
    save_tracker(&c2, &out.tracker, Some(&shared)).unwrap();
    let results: Vec<TrackResult> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| track(&out.tracker, s, ReferenceModality::ALL[i % 3], s.hard, &scene_file_name(i)).unwrap())
        .collect();
    let res = dir.join("results.jsonl");
    write_jsonl(&res, &results).unwrap();
    (std::fs::read(c1).unwrap(), std::fs::read(c2).unwrap(), std::fs::read(res).unwrap())
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let (p, d) = gradient_suite();
    report(&mut lines, 1, "gradient suite", p, d);
    let (p, d) = masked_pruned();
    report(&mut lines, 2, "masked/pruned equivalence", p, d);
    let (p, d) = amtb_prune();
    report(&mut lines, 3, "adapter prune equivalence", p, d);
    let (p, d) = allocation_invariants();
    report(&mut lines, 4, "rank-allocation invariants", p, d);
    let (p, d) = boxhead_oracle();
    report(&mut lines, 5, "box-head oracle", p, d);

    // stage one on the default desk-scale schedule
    let cfg = TrainConfig::default();
    let scenes = load_scenes(&cfg).unwrap();
    let start = Instant::now();
    let (s1, _) = train_stage1(&cfg, &scenes).unwrap();
    let mut ious = Vec::new();
    let mut grounded = Vec::new();
    for r in ReferenceModality::ALL {
        let results = track_all(&s1, &scenes, r, None);
        if r == ReferenceModality::Nl {
            grounded = results.iter().map(|t| t.frames[0].iou).collect();
        }
        ious.push((r, evaluate(&results).unwrap().mean_iou));
    }
    let elapsed = start.elapsed();
    let pass = ious.iter().all(|(_, v)| *v >= 0.7) && elapsed < Duration::from_secs(600);
    let detail = ious.iter().map(|(r, v)| format!("{} {v:.3}", r.name())).collect::<Vec<_>>().join(", ");
    let hits = grounded.iter().filter(|&&v| v >= 0.5).count();
    report(
        &mut lines,
        6,
        "stage-one overfit",
        pass,
        format!(
            "mean IoU on {} training scenes: {detail}; language grounding IoU >= 0.5 on frame 0 for {hits}/{}; {elapsed:.1?}",
            scenes.len(),
            grounded.len()
        ),
    );

    // stage two on hard scenes, evaluated on held-out hard scenes
    let mut cfg2 = cfg.clone();
    cfg2.stage = 2;
    cfg2.steps = 600;
    cfg2.scene_seed = 2000;
    cfg2.hard_fraction = 1.0;
    let train2 = load_scenes(&cfg2).unwrap();
    let before = frozen_digest(&s1);
    let test = generate_set(777, 24, 1.0, &cfg.scene).unwrap();
    match train_stage2(&cfg2, s1.clone(), &train2) {
        Ok(out) => {
            let frozen = frozen_digest(&out.tracker) == before && {
                // entry-level check of every non-auxiliary parameter
                let after = tracker_entries(&out.tracker, None);
                tracker_entries(&s1, None)
                    .iter()
                    .filter(|(n, _)| s1.store.id(n).is_some_and(|id| s1.store.group(id) != ParamGroup::Auxiliary))
                    .all(|(n, t)| after.iter().any(|(m, u)| m == n && u == t))
            };
            let mut gaps = Vec::new();
            for a in VideoModality::AUXILIARY {
                let sub: Vec<SyntheticScene> = test.iter().filter(|s| s.hard == Some(a)).cloned().collect();
                let rgb = evaluate(&track_all(&out.tracker, &sub, ReferenceModality::Bbox, None)).unwrap().success;
                let aux = evaluate(&track_all(&out.tracker, &sub, ReferenceModality::Bbox, Some(a))).unwrap().success;
                gaps.push((a, rgb, aux));
            }
            let pass = frozen && gaps.iter().all(|(_, r, x)| x - r >= 0.20);
            let detail = gaps
                .iter()
                .map(|(a, r, x)| format!("{}: rgb {r:.3} vs aux {x:.3}", mmtrack_harness::scene::modality_label(*a)))
                .collect::<Vec<_>>()
                .join(", ");
            report(&mut lines, 7, "stage-two benefit", pass, format!("success@0.5 on held-out hard scenes, {detail}; stage-one bytes unchanged {frozen}"));
        }
        Err(e) => report(&mut lines, 7, "stage-two benefit", false, format!("stage two failed: {e}")),
    }

    // contrastive alignment ablation
    let with = mean_token_cosine(&s1, &cfg, &scenes);
    let mut cfg0 = cfg.clone();
    cfg0.weights.lambda_mmc = 0.0;
    let (s0, _) = train_stage1(&cfg0, &scenes).unwrap();
    let without = mean_token_cosine(&s0, &cfg0, &scenes);
    report(
        &mut lines,
        8,
        "contrastive alignment",
        with > without,
        format!("mean cos(T_v, T_l): {with:.4} with the contrastive term vs {without:.4} without"),
    );

    // determinism
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    let same = ra == rb;
    report(
        &mut lines,
        9,
        "determinism",
        same,
        format!(
            "two pipeline runs: stage-one checkpoint {} bytes equal {}, stage-two checkpoint equal {}, results equal {}",
            ra.0.len(),
            ra.0 == rb.0,
            ra.1 == rb.1,
            ra.2 == rb.2
        ),
    );

    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| format!("{} ({})", l.id, l.name)).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
