use mmtrack::boxhead::{
    decode_box, distractor_set, in_out_attention, init_head, regression_head, scenario_tokens, split_distractor_mask,
    target_score_map, ContextMemory, HeadConfig, MemoryEntry, ScenarioTokens, ScoreMaps,
};
use mmtrack::params::ParamStore;
use mmtrack::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn rows(n: usize, c: usize, v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_rows(n, c, v)
}

fn open_set(m: &mmtrack::AdditiveMask) -> Vec<bool> {
    (0..m.cols()).map(|i| !m.is_blocked(0, i)).collect()
}

#[test]
fn in_out_attention_examples() {
    let e = rows(3, 2, vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
    let io = in_out_attention(&[0.3, 0.7], &e, &[false, true, false]).unwrap();
    assert_eq!(io.a_in, vec![0.0, 1.0, 0.0]);
    assert_eq!(io.t_t, vec![0.5, -1.0]);

    let same = rows(4, 2, [1.0, 1.0].repeat(4));
    let io = in_out_attention(&[0.2, -0.4], &same, &[true, false, false, false]).unwrap();
    for &a in &io.a_out[1..] {
        assert!(close(a, 1.0 / 3.0, 1e-15));
    }

    // hand logits T·E/√C with C = 1: [0, ln 2, ln 3, 0]
    let e = rows(4, 1, vec![0.0, 2f64.ln(), 3f64.ln(), 0.0]);
    let io = in_out_attention(&[1.0], &e, &[true, false, false, true]).unwrap();
    assert!(close(io.a_in[0], 0.5, 1e-15) && close(io.a_in[3], 0.5, 1e-15));
    assert!(close(io.a_out[1], 0.4, 1e-15) && close(io.a_out[2], 0.6, 1e-15));

    assert!(in_out_attention(&[1.0], &e, &[false; 4]).is_err());
}

#[test]
fn split_examples() {
    let a = [0.5, 0.3, 0.15, 0.05];
    let out = [false; 4];
    let (d, b) = split_distractor_mask(&a, &out, 0.0, false).unwrap();
    assert_eq!(open_set(&d), vec![false; 4]);
    assert_eq!(open_set(&b), vec![true; 4]);
    let (d, _) = split_distractor_mask(&a, &out, 1.0, false).unwrap();
    assert_eq!(open_set(&d), vec![true; 4]);
    let (d, b) = split_distractor_mask(&a, &out, 0.75, false).unwrap();
    assert_eq!(open_set(&d), vec![true, true, false, false]);
    assert_eq!(open_set(&b), vec![false, false, true, true]);

    // in-box tokens are in neither set
    let (d, b) = split_distractor_mask(&[0.0, 0.6, 0.4], &[true, false, false], 1.0, false).unwrap();
    assert!(!open_set(&d)[0] && !open_set(&b)[0]);
    assert!(split_distractor_mask(&a, &out, 1.5, false).is_err());

    // inclusive prefix drops the token that crosses beta
    assert_eq!(distractor_set(&a, &out, 0.75, true), vec![true, false, false, false]);
}

#[test]
fn scenario_token_examples() {
    let e = rows(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    let tok = [0.5, 0.5];
    let s = scenario_tokens(&tok, &e, &[true, false, true], 1.0, false).unwrap();
    assert_eq!(s.t_d, vec![0.0, 1.0]);
    assert_eq!(s.t_b, vec![0.0, 0.0]);

    let s = scenario_tokens(&tok, &e, &[true, false, false], 0.0, false).unwrap();
    assert_eq!(s.t_d, vec![0.0, 0.0]);
    let io = in_out_attention(&tok, &e, &[true, false, false]).unwrap();
    let expect = [io.a_out[1] * 0.0 + io.a_out[2] * 2.0, io.a_out[1] * 1.0 + io.a_out[2] * 3.0];
    assert!(close(s.t_b[0], expect[0], 1e-15) && close(s.t_b[1], expect[1], 1e-15));
}

#[test]
fn target_score_examples() {
    let none = ScenarioTokens::zeros(2);
    // orthogonal to every prototype
    let f = rows(1, 2, vec![1.0, 0.0]);
    let l = target_score_map(&f, &[0.0, 1.0], &[0.0, -1.0], &[0.0, 1.0], &none, 0.07).unwrap();
    assert_eq!(l, vec![0.5]);
    // α̂_t = 2 (cos 1, τ 0.5), both distractor and background similarities negative
    let l = target_score_map(&f, &[3.0, 0.0], &[-1.0, 0.0], &[-1.0, 0.5], &none, 0.5).unwrap();
    assert!(close(l[0], 2f64.exp() / (2f64.exp() + 1.0), 1e-15));
    assert!(close(l[0], 0.8808, 1e-4));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (e, t, pd, pb) = (rows(5, 3, r(15)), r(3), r(3), r(3));
    let toks = ScenarioTokens { t_t: r(3), t_d: r(3), t_b: r(3) };
    let base = target_score_map(&e, &t, &pd, &pb, &toks, 0.1).unwrap();
    let s = 3.7;
    let sc = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
    let stoks = ScenarioTokens { t_t: sc(&toks.t_t), t_d: sc(&toks.t_d), t_b: sc(&toks.t_b) };
    let scaled = target_score_map(&e.scale(s), &sc(&t), &sc(&pd), &sc(&pb), &stoks, 0.1).unwrap();
    for (a, b) in base.iter().zip(&scaled) {
        assert!(close(*a, *b, 1e-12));
        assert!(*a > 0.0 && *a < 1.0);
    }
}

fn head_store(dim: usize, seed: u64) -> (ParamStore<f64>, mmtrack::boxhead::HeadIds) {
    let mut store = ParamStore::new();
    let ids = init_head(dim, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, ids)
}

#[test]
fn regression_head_examples() {
    let (dim, g) = (4, 8);
    let (mut store, ids) = head_store(dim, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rows(g * g, dim, (0..g * g * dim).map(|_| rng.random_range(-2.0..2.0)).collect());
    let (c, o, s) = regression_head(&x, &store, &ids).unwrap();
    assert!(c.iter().all(|v| *v > 0.0 && *v < 1.0));
    assert!(o.iter().chain(&s).flatten().all(|v| *v > 0.0 && *v < 1.0));

    // shift the map one cell right; interior cells shift identically
    let mut shifted = Tensor::zeros(&[g * g, dim]);
    for r in 0..g {
        for col in 1..g {
            shifted.row_mut(r * g + col).copy_from_slice(x.row(r * g + col - 1));
        }
    }
    let (c2, _, _) = regression_head(&shifted, &store, &ids).unwrap();
    for r in 2..g - 2 {
        for col in 3..g - 2 {
            assert!(close(c2[r * g + col], c[r * g + col - 1], 1e-13));
        }
    }

    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains("conv") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let (c, o, s) = regression_head(&x, &store, &ids).unwrap();
    assert!(c.iter().chain(o.iter().chain(&s).flatten()).all(|&v| v == 0.5));
    assert!(regression_head(&rows(5, dim, vec![0.0; 5 * dim]), &store, &ids).is_err());
}

fn maps(grid: usize, center: Vec<f64>, target: Vec<f64>) -> ScoreMaps<f64> {
    let n = grid * grid;
    ScoreMaps {
        grid,
        center,
        offset: vec![[0.0; 2]; n],
        size: vec![[0.0; 2]; n],
        target,
    }
}

#[test]
fn decode_box_examples() {
    let g = 16;
    let mut m = maps(g, vec![0.1; g * g], vec![0.5; g * g]);
    let best = 4 * g + 3;
    m.center[best] = 0.9;
    m.offset[best] = [0.5, 0.25];
    m.size[best] = [0.25, 0.5];
    let (b, conf) = decode_box(&m, 16, 256, 256).unwrap();
    assert_eq!((b.cx, b.cy), (56.0, 68.0));
    assert_eq!((b.w, b.h), (64.0, 128.0));
    assert!(close(conf, 0.45, 1e-15));

    let m = maps(4, vec![0.3; 16], vec![0.3; 16]);
    let (b, _) = decode_box(&m, 4, 16, 16).unwrap();
    assert_eq!((b.cx, b.cy), (0.0, 0.0));
}

fn cfg(interval: Option<usize>) -> HeadConfig {
    HeadConfig {
        update_interval: interval,
        ..HeadConfig::default()
    }
}

fn entry(rng: &mut ChaCha8Rng, n: usize) -> MemoryEntry<f64> {
    let mut in_box = vec![false; n];
    in_box[0] = true;
    MemoryEntry {
        embeddings: rows(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()),
        in_box,
    }
}

#[test]
fn context_memory_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sem = [0.3, -0.2, 0.9];
    let c = cfg(Some(20));
    let mut mem = ContextMemory::new(entry(&mut rng, 4), &sem, &c).unwrap();
    assert_eq!(mem.refreshes, 1);

    let before = mem.clone();
    mem.update_context(entry(&mut rng, 4), 0.4, &sem, &c).unwrap();
    assert_eq!(mem.entries, before.entries);
    assert_eq!(mem.cached, before.cached);
    assert_eq!(mem.frames_since_update, 1);

    mem.frames_since_update = 19;
    let e = entry(&mut rng, 4);
    mem.update_context(e.clone(), 0.9, &sem, &c).unwrap();
    assert_eq!(mem.entries.len(), 2);
    assert_eq!(mem.entries[1], e);
    assert_eq!(mem.refreshes, 2);
    assert_eq!(mem.frames_since_update, 0);

    // capacity 2 keeps the template and replaces the context frame
    let e2 = entry(&mut rng, 4);
    mem.update_context(e2.clone(), 0.9, &sem, &c).unwrap();
    assert_eq!(mem.entries, vec![before.entries[0].clone(), e2]);

    let never = cfg(None);
    let mut mem = ContextMemory::new(entry(&mut rng, 4), &sem, &never).unwrap();
    for _ in 0..100 {
        mem.update_context(entry(&mut rng, 4), 0.9, &sem, &never).unwrap();
    }
    assert_eq!(mem.refreshes, 1);
}

proptest! {
    #[test]
    fn distractor_partition_and_monotone(probs in prop::collection::vec(0.01f64..1.0, 2..9),
                                        inb in prop::collection::vec(any::<bool>(), 9),
                                        b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0) {
        let n = probs.len();
        let in_box: Vec<bool> = inb[..n].to_vec();
        let z: f64 = (0..n).filter(|&i| !in_box[i]).map(|i| probs[i]).sum();
        let a: Vec<f64> = (0..n).map(|i| if in_box[i] { 0.0 } else { probs[i] / z.max(1e-12) }).collect();
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let (d, b) = split_distractor_mask(&a, &in_box, lo, false).unwrap();
        let (d_hi, _) = split_distractor_mask(&a, &in_box, hi, false).unwrap();
        let (d, b, d_hi) = (open_set(&d), open_set(&b), open_set(&d_hi));
        for i in 0..n {
            if in_box[i] {
                prop_assert!(!d[i] && !b[i]);
            } else {
                prop_assert!(d[i] != b[i]);
            }
            prop_assert!(!d[i] || d_hi[i]);
        }
    }

    #[test]
    fn decode_argmax_scale_invariant(c in prop::collection::vec(0.01f64..1.0, 16), l in prop::collection::vec(0.01f64..1.0, 16), k in 0.1f64..10.0) {
        let m = maps(4, c.clone(), l.clone());
        let s = maps(4, c.iter().map(|v| v * k).collect(), l.iter().map(|v| v * k).collect());
        let (a, _) = decode_box(&m, 4, 16, 16).unwrap();
        let (b, _) = decode_box(&s, 4, 16, 16).unwrap();
        prop_assert_eq!((a.cx, a.cy), (b.cx, b.cy));
    }
}
