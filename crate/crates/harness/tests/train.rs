use mmtrack_harness::checkpoint::{load_tracker, save_tracker};
use mmtrack_harness::config::TrainConfig;
use mmtrack_harness::train::{frozen_digest, load_scenes, train_stage1, train_stage2, validation_loss};
use mmtrack::model::Tracker;

fn tiny(stage: u8, steps: usize) -> TrainConfig {
    TrainConfig::parse_str(&format!(
        "stage = {stage}\nsteps = {steps}\nbatch = 2\nwarmup = 2\nscenes = 4\nframes = 8\nhard_fraction = 0.5\nshallow_layers = 1\ndeep_layers = 1\nalloc_warmup = 2\nalloc_interval = 2\nn_hat = 2\nm_hat = 4\n"
    ))
    .unwrap()
}

#[test]
fn loss_decreases_over_ten_steps() {
    let cfg = tiny(1, 10);
    let scenes = load_scenes(&cfg).unwrap();
    let before = validation_loss(&Tracker::new(cfg.model.clone(), cfg.seed).unwrap(), &cfg, &scenes, 99, 8).unwrap();
    let (trained, report) = train_stage1(&cfg, &scenes).unwrap();
    let after = validation_loss(&trained, &cfg, &scenes, 99, 8).unwrap();
    assert!(after < before, "{after} >= {before}");
    assert_eq!(report.steps, 10);
    assert_eq!(report.history.last().unwrap().0, 9);
}

#[test]
fn reload_reproduces_validation_loss() {
    let cfg = tiny(1, 3);
    let scenes = load_scenes(&cfg).unwrap();
    let (trained, _) = train_stage1(&cfg, &scenes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s1.ckpt");
    save_tracker(&p, &trained, None).unwrap();
    let loaded = load_tracker(&p).unwrap().tracker;
    assert_eq!(
        validation_loss(&trained, &cfg, &scenes, 5, 4).unwrap(),
        validation_loss(&loaded, &cfg, &scenes, 5, 4).unwrap()
    );
}

#[test]
fn stage_two_keeps_base_frozen_and_respects_budget() {
    let cfg1 = tiny(1, 2);
    let scenes = load_scenes(&cfg1).unwrap();
    let (base, _) = train_stage1(&cfg1, &scenes).unwrap();
    let digest = frozen_digest(&base);
    let cfg2 = tiny(2, 5);
    let out = train_stage2(&cfg2, base, &scenes).unwrap();
    assert_eq!(frozen_digest(&out.tracker), digest);
    assert_eq!(out.allocation.surviving_tuples, cfg2.budget().n());
    assert!(out.allocation.nonzero_total <= cfg2.budget().m());

    assert!(train_stage1(&cfg2, &scenes).is_err());
    assert!(train_stage1(&cfg1, &[]).is_err());
}
