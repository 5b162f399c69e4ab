use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use mmtrack::encoder::ReferenceModality;
use mmtrack_harness::checkpoint::{load_tracker, save_tracker};
use mmtrack_harness::config::TrainConfig;
use mmtrack_harness::gradcheck::{check_op, OPS};
use mmtrack_harness::scene::{generate_set, load_dir, scene_file_name, SceneConfig, SyntheticScene};
use mmtrack_harness::track::{evaluate, parse_video, read_jsonl, track, write_jsonl};
use mmtrack_harness::train::{load_scenes, train_stage1, train_stage2};
use mmtrack_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "mmtrack", version, about = "Multi-modal single object tracking on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes as JSON files.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0.0)]
        hard_fraction: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional config whose scene keys (world, frames, ...) are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train encoder and head from scratch.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train auxiliary adapters on top of a frozen stage-one checkpoint.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one scene file, or every scene in a directory.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// bbox, nl or nl+bbox
        #[arg(long, default_value = "bbox")]
        reference: String,
        /// rgb, rgbd, rgbt or rgbe
        #[arg(long, default_value = "rgb")]
        modality: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a results file.
    Eval {
        #[arg(long)]
        results: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn scene_config(config: Option<&Path>) -> Result<SceneConfig> {
    Ok(match config {
        Some(p) => TrainConfig::load(p)?.scene,
        None => SceneConfig::default(),
    })
}

fn scenes_at(path: &Path) -> Result<Vec<(String, SyntheticScene)>> {
    if path.is_dir() {
        let scenes = load_dir(path)?;
        Ok(scenes.into_iter().enumerate().map(|(i, s)| (scene_file_name(i), s)).collect())
    } else {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("scene").to_string();
        Ok(vec![(name, SyntheticScene::load(path)?)])
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData {
            seed,
            count,
            hard_fraction,
            out,
            config,
        } => {
            if !(0.0..=1.0).contains(&hard_fraction) {
                return Err(HarnessError::Invalid("hard-fraction must lie in [0, 1]".into()));
            }
            let cfg = scene_config(config.as_deref())?;
            cfg.validate()?;
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::Io {
                path: out.clone(),
                source: e,
            })?;
            for (i, s) in generate_set(seed, count, hard_fraction, &cfg)?.iter().enumerate() {
                s.save(&out.join(scene_file_name(i)))?;
            }
            println!("wrote {count} scenes to {}", out.display());
        }
        Cmd::TrainStage1 { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let scenes = load_scenes(&cfg)?;
            info!("stage one: {} scenes, {} steps", scenes.len(), cfg.steps);
            let (tracker, report) = train_stage1(&cfg, &scenes)?;
            save_tracker(&out, &tracker, None)?;
            println!("final loss {:.4}; checkpoint {}", report.final_loss, out.display());
        }
        Cmd::TrainStage2 { config, init, out } => {
            let cfg = TrainConfig::load(&config)?;
            let loaded = load_tracker(&init)?;
            let scenes = load_scenes(&cfg)?;
            info!("stage two: {} scenes, {} steps", scenes.len(), cfg.steps);
            let outcome = train_stage2(&cfg, loaded.tracker, &scenes)?;
            let shared: Vec<Vec<bool>> = outcome.mask.iter().map(|m| m.shared.clone()).collect();
            save_tracker(&out, &outcome.tracker, Some(&shared))?;
            println!("final loss {:.4}; checkpoint {}", outcome.report.final_loss, out.display());
            print!("{}", outcome.allocation.render());
        }
        Cmd::Track {
            ckpt,
            scene,
            reference,
            modality,
            out,
        } => {
            let reference = ReferenceModality::parse(&reference)
                .ok_or_else(|| HarnessError::Invalid(format!("unknown reference {reference:?}")))?;
            let aux = parse_video(&modality).ok_or_else(|| HarnessError::Invalid(format!("unknown modality {modality:?}")))?;
            let loaded = load_tracker(&ckpt)?;
            if aux.is_some() && !loaded.tracker.has_adapters() {
                info!("checkpoint has no adapters; auxiliary frames only enter through the token sequence");
            }
            let results = scenes_at(&scene)?
                .iter()
                .map(|(name, s)| track(&loaded.tracker, s, reference, aux, name))
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&out, &results)?;
            let summary = evaluate(&results)?;
            println!("mean IoU {:.4}, success@0.5 {:.4} over {} frames", summary.mean_iou, summary.success, summary.frames);
        }
        Cmd::Eval { results } => {
            let summary = evaluate(&read_jsonl(&results)?)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Gradcheck { op, seeds } => {
            let ops: Vec<String> = match op {
                Some(o) => vec![o],
                None => OPS.iter().map(|s| s.to_string()).collect(),
            };
            let mut ok = true;
            for o in ops {
                let r = check_op(&o, seeds)?;
                println!(
                    "{:<18} {} seeds={} max_rel={:.2e} max_abs={:.2e}",
                    r.op,
                    if r.pass() { "PASS" } else { "FAIL" },
                    r.seeds,
                    r.max_rel_error,
                    r.max_abs_error
                );
                ok &= r.pass();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

/// Errors caused by bad input rather than by a failed computation.
fn is_validation(e: &HarnessError) -> bool {
    !matches!(
        e,
        HarnessError::Io { .. } | HarnessError::NonFiniteLoss { .. } | HarnessError::FrozenDrift(_)
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
