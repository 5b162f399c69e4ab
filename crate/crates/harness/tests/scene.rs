use mmtrack::encoder::VideoModality;
use mmtrack::losses::iou;
use mmtrack_harness::scene::{generate_scene, generate_set, load_dir, scene_file_name, SceneConfig, SyntheticScene};
use proptest::prelude::*;

#[test]
fn generation_is_deterministic() {
    let cfg = SceneConfig::default();
    let a = generate_scene(11, &cfg, Some(VideoModality::Thermal)).unwrap();
    let b = generate_scene(11, &cfg, Some(VideoModality::Thermal)).unwrap();
    assert_eq!(a, b);
    for m in VideoModality::ALL {
        assert_eq!(a.render(5, m), b.render(5, m));
    }
    assert_ne!(a, generate_scene(12, &cfg, Some(VideoModality::Thermal)).unwrap());
}

#[test]
fn hard_set_layout() {
    let set = generate_set(3, 6, 0.5, &SceneConfig::default()).unwrap();
    let hard: Vec<_> = set.iter().map(|s| s.hard).collect();
    use VideoModality::*;
    assert_eq!(hard, vec![Some(Depth), Some(Thermal), Some(Event), None, None, None]);
    assert!(generate_scene(1, &SceneConfig::default(), Some(Rgb)).is_err());
}

/// The twin shares the target's RGB appearance and meets it mid-scene.
#[test]
fn hard_scene_has_rgb_twin() {
    let cfg = SceneConfig::default();
    for (i, m) in VideoModality::AUXILIARY.into_iter().enumerate() {
        let s = generate_scene(40 + i as u64, &cfg, Some(m)).unwrap();
        let twin = s.distractors.last().unwrap();
        assert_eq!((twin.color, twin.shape, twin.w, twin.h), (s.target.color, s.target.shape, s.target.w, s.target.h));
        let meets = (0..s.frames()).any(|t| iou(&twin.bbox(t), &s.gt_box(t)) > 0.99);
        assert!(meets);
        match m {
            VideoModality::Depth => assert!((twin.depth - s.target.depth).abs() >= 0.4),
            VideoModality::Thermal => assert!((twin.temperature - s.target.temperature).abs() >= 0.5),
            _ => assert!(s.target.flicker > 0.0 && twin.flicker == 0.0),
        }
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_set(9, 3, 1.0, &SceneConfig::default()).unwrap();
    for (i, s) in set.iter().enumerate() {
        s.save(&dir.path().join(scene_file_name(i))).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    assert_eq!(load_dir(dir.path()).unwrap(), set);

    let mut broken = set[0].clone();
    broken.gt.pop();
    let p = dir.path().join("broken.json");
    std::fs::write(&p, serde_json::to_string(&broken).unwrap()).unwrap();
    assert!(SyntheticScene::load(&p).is_err());
    assert!(load_dir(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn config_validation() {
    assert!(SceneConfig { frames: 1, ..SceneConfig::default() }.validate().is_err());
    assert!(SceneConfig { max_size: 30.0, ..SceneConfig::default() }.validate().is_err());
    assert!(SceneConfig { min_size: 12.0, ..SceneConfig::default() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frames_stay_in_range(seed in any::<u64>(), hard in 0usize..4) {
        let hard = (hard > 0).then(|| VideoModality::ALL[hard]);
        let s = generate_scene(seed, &SceneConfig::default(), hard).unwrap();
        s.check().unwrap();
        for m in VideoModality::ALL {
            let f = s.render(seed as usize % s.frames(), m);
            prop_assert!(f.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}
