use mmtrack::encoder::{ReferenceModality, VideoModality};
use mmtrack::losses::BBox;
use mmtrack_harness::config::TrainConfig;
use mmtrack_harness::data::{sample_training_unit, CropWindow, SEARCH_FACTOR, TEMPLATE_FACTOR};
use mmtrack_harness::scene::{generate_scene, SceneConfig};
use mmtrack_harness::train::load_scenes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn crop_sides_scale_with_box() {
    let b = BBox::new(20.0, 15.0, 8.0, 8.0);
    let s = CropWindow::around(&b, SEARCH_FACTOR, 64);
    assert!(close(s.side / b.w, 4.0));
    let t = CropWindow::around(&b, TEMPLATE_FACTOR, 32);
    assert!(close(t.side / b.w, 2.0));
    // the box maps to the crop center with a quarter of the crop side
    let c = s.to_crop(&b);
    assert!(close(c.cx, 32.0) && close(c.cy, 32.0) && close(c.w, 16.0));
    let back = s.to_frame(&c);
    assert!(close(back.cx, b.cx) && close(back.w, b.w));
}

#[test]
fn crop_outside_frame_reads_zero() {
    let s = generate_scene(1, &SceneConfig::default(), None).unwrap();
    let frame = s.render(0, VideoModality::Rgb);
    let far = CropWindow { cx: -100.0, cy: -100.0, side: 10.0, out: 8 };
    assert!(far.sample(&frame).data().iter().all(|&v| v == 0.0));
    let full = CropWindow::full_frame(s.world(), 16).sample(&frame);
    assert_eq!(full.dims(), &[16, 16, 3]);
}

#[test]
fn units_fill_unused_slots_per_reference() {
    let cfg = TrainConfig::default();
    let scene = generate_scene(4, &cfg.scene, Some(VideoModality::Depth)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let u = sample_training_unit(&scene, ReferenceModality::Nl, Some(VideoModality::Depth), &cfg, &mut rng);
    assert!(!u.use_context);
    for r in &u.regions {
        assert!(r.template.is_none() && r.template_in_box.is_none());
        assert!(r.aux.as_ref().unwrap().template.is_none());
        assert_eq!(r.lang_ids, scene.lang_ids);
    }

    let u = sample_training_unit(&scene, ReferenceModality::Bbox, None, &cfg, &mut rng);
    assert!(u.use_context);
    for r in &u.regions {
        assert!(r.lang_ids.is_empty());
        assert!(r.template.is_some() && r.aux.is_none());
        assert_eq!(r.search.dims()[0], cfg.model.encoder.search_size);
    }

    let u = sample_training_unit(&scene, ReferenceModality::NlBbox, Some(VideoModality::Depth), &cfg, &mut rng);
    assert_eq!(u.regions.len(), 2);
    for r in &u.regions {
        assert!(!r.lang_ids.is_empty() && r.template.is_some());
        assert!(r.aux.as_ref().unwrap().template.is_some());
    }
}

#[test]
fn bbox_only_ratio_samples_bbox() {
    let cfg = TrainConfig::parse_str("ratio = 1:0:0\nscenes = 2").unwrap();
    let scenes = load_scenes(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..200 {
        let r = cfg.reference_for(rand::Rng::random(&mut rng));
        assert_eq!(r, ReferenceModality::Bbox);
        let u = sample_training_unit(&scenes[i % 2], r, None, &cfg, &mut rng);
        assert!(u.regions.iter().all(|x| x.reference == ReferenceModality::Bbox));
    }
}
