use std::path::Path;

use smfnet::imaging::save_png;
use smfnet::metrics::evaluate_directory;
use smfnet::train::{
    fuse_directory, plot_loss_curves, run_pipeline, synthetic_pairs, train_stage1, train_stage2,
    AblationId, RunContext, TrainOutcome,
};
use smfnet::{Checkpoint, Device, Fuser, PairedDataset, SsimReduction, Stage, TrainConfig};

use crate::args::{Command, ConfigArgs, DataArgs, SsimMode};

/// Scenes fused and scored after an ablation run, and their side length.
const ABLATION_SCENES: usize = 4;
const ABLATION_SCENE_SIZE: usize = 64;

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration: exit status 1.
    Usage(String),
    /// Everything else: exit status 2.
    Runtime(smfnet::Error),
}

impl From<smfnet::Error> for Failure {
    fn from(e: smfnet::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

pub fn run(command: Command) -> Result<()> {
    let device = Device::Cpu;
    match command {
        Command::TrainStage1 { config, data, out } => {
            let cfg = build_config(&config)?;
            let data = load_data(&data, &cfg, &device)?;
            let outcome = train_stage1(&cfg, &data, &context(&out, Stage::Stage1, &device)?)?;
            finish(&outcome, &out, Stage::Stage1)
        }
        Command::TrainStage2 {
            config,
            data,
            init,
            out,
        } => {
            let cfg = build_config(&config)?;
            let init = Checkpoint::load(&init, &device)?;
            let data = load_data(&data, &cfg, &device)?;
            let outcome =
                train_stage2(&cfg, &data, &init, &context(&out, Stage::Stage2, &device)?)?;
            finish(&outcome, &out, Stage::Stage2)
        }
        Command::Fuse { ckpt, ir, vis, out } => {
            let fuser = Fuser::from_checkpoint(&Checkpoint::load(&ckpt, &device)?, &device)?;
            let written = fuse_directory(&fuser, &ir, &vis, &out)?;
            log::info!("fused {} pairs into {}", written.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            fused,
            ir,
            vis,
            out,
            ssim,
        } => evaluate(&fused, &ir, &vis, &out, ssim),
        Command::Ablate {
            variant,
            config,
            data,
            out,
        } => {
            let id: AblationId = variant
                .parse()
                .map_err(|e: smfnet::Error| Failure::Usage(e.to_string()))?;
            let cfg = id.apply(&build_config(&config)?);
            log::info!("{id}: {}", id.description());
            let data = load_data(&data, &cfg, &device)?;
            let outcome = run_pipeline(&cfg, &data, &device, &out)?;
            let manifest = &outcome.last.checkpoint.manifest;
            log::info!(
                "{id}: stages {:?}, graph branch {}, decoder input {} channels",
                manifest.stages,
                if manifest.use_graph {
                    "present"
                } else {
                    "absent"
                },
                manifest.decoder_in_channels
            );
            score_ablation(&outcome.checkpoint_path, &cfg, &out, &device)
        }
    }
}

fn build_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let usage = |e: smfnet::Error| Failure::Usage(e.to_string());
    let base = match (&args.config, args.toy) {
        (Some(path), _) => TrainConfig::from_file(path).map_err(|e| match e {
            smfnet::Error::Io { .. } => Failure::Runtime(e),
            other => usage(other),
        })?,
        (None, true) => TrainConfig::toy(),
        (None, false) => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.overrides).map_err(usage)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_data(args: &DataArgs, cfg: &TrainConfig, device: &Device) -> Result<PairedDataset> {
    let data = match &args.data {
        Some(dir) => PairedDataset::from_dir(dir, cfg.patch()?)?,
        None => PairedDataset::synthetic(cfg.batch_size, cfg.patch_size, cfg.seed, device)?,
    };
    log::info!(
        "{} training patches of {} pixels",
        data.len(),
        data.patch_size()
    );
    Ok(data)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Stage1 => "stage1",
        Stage::Stage2 => "stage2",
        Stage::Joint => "joint",
    }
}

fn context(out: &Path, stage: Stage, device: &Device) -> Result<RunContext> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    Ok(RunContext {
        device: device.clone(),
        log_csv: Some(out.join(format!("{}_log.csv", stage_name(stage)))),
        diagnostics_dir: Some(out.join("diagnostics")),
    })
}

fn finish(outcome: &TrainOutcome, out: &Path, stage: Stage) -> Result<()> {
    let path = out.join(format!("{}.ckpt", stage_name(stage)));
    outcome.checkpoint.save(&path)?;
    plot_loss_curves(
        &outcome.epochs,
        out.join(format!("{}_loss.png", stage_name(stage))),
    )?;
    if let Some(last) = outcome.epochs.last() {
        log::info!("final epoch loss {:.4}", last.report.total());
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn evaluate(fused: &Path, ir: &Path, vis: &Path, out: &Path, mode: SsimMode) -> Result<()> {
    let reduction = match mode {
        SsimMode::Sum => SsimReduction::Sum,
        SsimMode::Mean => SsimReduction::Mean,
    };
    let table = evaluate_directory(fused, ir, vis, reduction)?;
    print!("{}", table.to_text());
    if table.is_empty() {
        return Err(Failure::Runtime(smfnet::Error::Validation(format!(
            "no fused image in {} has both source images",
            fused.display()
        ))));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    table.write_csv(out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

/// Fuses a few fresh synthetic scenes with the trained variant and writes
/// their metrics next to the checkpoints.
fn score_ablation(ckpt: &Path, cfg: &TrainConfig, out: &Path, device: &Device) -> Result<()> {
    let scenes = out.join("scenes");
    let (ir_dir, vis_dir) = (scenes.join("ir"), scenes.join("vis"));
    for d in [&ir_dir, &vis_dir] {
        std::fs::create_dir_all(d).map_err(|e| io_error(d, e))?;
    }
    let pairs = synthetic_pairs(
        ABLATION_SCENES,
        ABLATION_SCENE_SIZE,
        cfg.seed.wrapping_add(1),
        device,
    )?;
    for (i, (ir, vis)) in pairs.iter().enumerate() {
        save_png(ir, ir_dir.join(format!("{i:02}.png")))?;
        save_png(vis, vis_dir.join(format!("{i:02}.png")))?;
    }
    let fuser = Fuser::from_checkpoint(&Checkpoint::load(ckpt, device)?, device)?;
    let fused = out.join("fused");
    fuse_directory(&fuser, &ir_dir, &vis_dir, &fused)?;
    evaluate(
        &fused,
        &ir_dir,
        &vis_dir,
        &out.join("metrics.csv"),
        SsimMode::Sum,
    )
}

fn io_error(path: &Path, source: std::io::Error) -> Failure {
    Failure::Runtime(smfnet::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
