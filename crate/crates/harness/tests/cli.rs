use std::process::Command;

fn mmtrack(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mmtrack")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "stage = 5\n").unwrap();
    let out = dir.path().join("x.ckpt");
    let o = mmtrack(&["train-stage1", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage"));

    let o = mmtrack(&["gen-data", "--seed", "1", "--count", "1", "--hard-fraction", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let o = mmtrack(&["gen-data", "--seed", "3", "--count", "2", "--out", scenes.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(scenes.join("scene_0001.json").exists());

    let res = dir.path().join("r.jsonl");
    std::fs::write(&res, "{\"frame\":0,\"box\":{\"cx\":1,\"cy\":1,\"w\":1,\"h\":1},\"confidence\":1,\"iou\":0.6}\n{\"frame\":1,\"box\":{\"cx\":1,\"cy\":1,\"w\":1,\"h\":1},\"confidence\":1,\"iou\":0.4}\n").unwrap();
    let o = mmtrack(&["eval", "--results", res.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["success"], 0.5);
}

#[test]
fn gradcheck_subcommand_passes() {
    let o = mmtrack(&["gradcheck", "--op", "box_loss", "--seeds", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let o = mmtrack(&["gradcheck", "--op", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
}
