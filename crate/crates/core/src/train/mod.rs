//! Two-stage training, checkpoints and inference.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod fuse;
pub mod plot;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::{invalid, Error, Result};
use crate::imaging::{save_png, ChannelLayout, ImageTensor};
use crate::losses::{stage1_total, stage2_total, LossReport, WeightedLoss};
use crate::model::{SmfNet, FUSION_PREFIX};
use crate::params::{keyed_rng, Params};

pub use ablation::{ablation_preset, AblationId};
pub use checkpoint::{Checkpoint, Manifest, Stage};
pub use config::TrainConfig;
pub use dataset::{synthetic_pairs, PairedDataset};
pub use fuse::{fuse_directory, load_network, Fuser};
pub use plot::plot_loss_curves;

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    /// Per-iteration reports in order.
    pub iterations: Vec<LossReport>,
}

/// Where a run writes its side outputs.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub device: Device,
    /// Append-only CSV of per-epoch loss terms.
    pub log_csv: Option<PathBuf>,
    /// Receives the offending batch when a loss turns non-finite.
    pub diagnostics_dir: Option<PathBuf>,
}

impl Default for RunContext {
    fn default() -> Self {
        Self {
            device: Device::Cpu,
            log_csv: None,
            diagnostics_dir: None,
        }
    }
}

fn stage_key(stage: Stage) -> &'static str {
    match stage {
        Stage::Stage1 => "stage1",
        Stage::Stage2 => "stage2",
        Stage::Joint => "joint",
    }
}

fn stage_loss(
    stage: Stage,
    cfg: &TrainConfig,
    net: &SmfNet,
    vis: &Tensor,
    ir: &Tensor,
) -> Result<WeightedLoss> {
    match stage {
        Stage::Stage1 => {
            let r = net.reconstruct(vis, ir)?;
            stage1_total(
                vis,
                &r.vis_hat,
                ir,
                &r.ir_hat,
                &r.vis,
                &r.ir,
                &cfg.losses,
                &cfg.switches,
            )
        }
        Stage::Stage2 | Stage::Joint => {
            let f = net.fuse(vis, ir)?;
            stage2_total(&f.fused, vis, ir, &f.vis, &f.ir, &cfg.losses, &cfg.switches)
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn save_diagnostics(
    dir: &Path,
    stage: Stage,
    vis: &Tensor,
    ir: &Tensor,
    report: &LossReport,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in [("vis", vis), ("ir", ir)] {
        for b in 0..t.dim(0)? {
            let img = t.narrow(0, b, 1)?.clamp(0f32, 1f32)?;
            let img = ImageTensor::new(img, ChannelLayout::Gray1)?;
            save_png(
                &img,
                dir.join(format!("{}_{name}_{b}.png", stage_key(stage))),
            )?;
        }
    }
    let text: String = report
        .terms
        .iter()
        .map(|t| format!("{} = {}\n", t.name, t.value))
        .collect();
    let path = dir.join(format!("{}_loss.txt", stage_key(stage)));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        let mut header = vec!["stage".to_string(), "epoch".to_string()];
        header.extend(record.report.terms.iter().map(|t| t.name.clone()));
        header.push("total".into());
        w.write_record(&header)?;
    }
    let mut row = vec![
        stage_key(record.stage).to_string(),
        record.epoch.to_string(),
    ];
    row.extend(record.report.terms.iter().map(|t| t.value.to_string()));
    row.push(record.report.total().to_string());
    w.write_record(&row)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[allow(clippy::too_many_arguments)]
fn optimize(
    stage: Stage,
    cfg: &TrainConfig,
    data: &PairedDataset,
    net: &SmfNet,
    trainable: Vec<Var>,
    epochs: usize,
    ctx: &RunContext,
) -> Result<(Vec<EpochRecord>, Vec<LossReport>)> {
    let mut opt = AdamW::new(
        trainable.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate_for(stage),
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = keyed_rng(cfg.seed, &format!("shuffle.{}", stage_key(stage)));
    let mut history = Vec::with_capacity(epochs);
    let mut iterations = Vec::new();
    for epoch in 0..epochs {
        let batches = data.epoch_batches(cfg.batch_size, &mut rng)?;
        let mut reports = Vec::with_capacity(batches.len());
        for (it, (vis, ir)) in batches.iter().enumerate() {
            let loss = stage_loss(stage, cfg, net, vis, ir)?;
            if !loss.report.is_finite() {
                if let Some(dir) = &ctx.diagnostics_dir {
                    save_diagnostics(dir, stage, vis, ir, &loss.report)?;
                }
                let detail = loss
                    .report
                    .terms
                    .iter()
                    .map(|t| format!("{}={}", t.name, t.value))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: it,
                    detail,
                });
            }
            let mut grads = loss.total.backward()?;
            let norm = clip_gradients(&mut grads, &trainable, cfg.grad_clip)?;
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: it,
                    detail: "gradient norm is not finite".into(),
                });
            }
            opt.step(&grads)?;
            reports.push(loss.report.clone());
            iterations.push(loss.report);
        }
        let record = EpochRecord {
            stage,
            epoch,
            report: LossReport::mean(&reports)
                .ok_or_else(|| invalid!("epoch produced no batches"))?,
        };
        log::info!(
            "{} epoch {epoch}: total {:.5}",
            stage_key(stage),
            record.report.total()
        );
        if let Some(path) = &ctx.log_csv {
            append_log(path, &record)?;
        }
        history.push(record);
    }
    Ok((history, iterations))
}

fn make_checkpoint(
    stage: Stage,
    epochs: usize,
    cfg: &TrainConfig,
    params: &Params,
    net: &SmfNet,
    stages: Vec<Stage>,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        manifest: Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            stage,
            epoch: epochs,
            seed: cfg.seed,
            stages,
            use_graph: cfg.ablation.use_graph,
            decoder_in_channels: net.decoder.input_channels(),
            parameter_count: params.element_count(),
            config: cfg.clone(),
        },
        tensors: params.snapshot()?,
    })
}

fn all_vars(params: &Params) -> Vec<Var> {
    params
        .vars_with_prefix(&[])
        .into_iter()
        .map(|(_, v)| v)
        .collect()
}

/// Freshly initialized weights packaged as a checkpoint of `stage`, as if
/// zero epochs had been trained.
pub fn initial_checkpoint(cfg: &TrainConfig, stage: Stage, device: &Device) -> Result<Checkpoint> {
    cfg.validate()?;
    let params = Params::new(cfg.seed, DType::F32, device);
    let net = SmfNet::new(
        params.builder(),
        &cfg.model,
        &cfg.ablation,
        stage.has_fusion_layers(),
    )?;
    make_checkpoint(stage, 0, cfg, &params, &net, vec![stage])
}

/// Stage I: train encoder and decoder to reconstruct both modalities.
pub fn train_stage1(
    cfg: &TrainConfig,
    data: &PairedDataset,
    ctx: &RunContext,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = Params::new(cfg.seed, DType::F32, &ctx.device);
    let net = SmfNet::new(params.builder(), &cfg.model, &cfg.ablation, false)?;
    let (epochs, iterations) = optimize(
        Stage::Stage1,
        cfg,
        data,
        &net,
        all_vars(&params),
        cfg.epochs_stage1,
        ctx,
    )?;
    Ok(TrainOutcome {
        checkpoint: make_checkpoint(
            Stage::Stage1,
            cfg.epochs_stage1,
            cfg,
            &params,
            &net,
            vec![Stage::Stage1],
        )?,
        epochs,
        iterations,
    })
}

/// Stage II: insert the fusion layers and train on the fusion objective,
/// starting from a stage-I checkpoint.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &PairedDataset,
    init: &Checkpoint,
    ctx: &RunContext,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.manifest.stage != Stage::Stage1 {
        return Err(invalid!(
            "stage II must start from a stage-I checkpoint, got {:?}",
            init.manifest.stage
        ));
    }
    let prior = &init.manifest.config;
    if prior.model != cfg.model || prior.ablation != cfg.ablation {
        return Err(invalid!(
            "model or ablation settings differ from the stage-I checkpoint"
        ));
    }
    let params = Params::new(cfg.seed, DType::F32, &ctx.device);
    let net = SmfNet::new(params.builder(), &cfg.model, &cfg.ablation, true)?;
    let missing = params.load_matching(&init.tensors)?;
    if let Some(m) = missing.iter().find(|m| !m.starts_with(FUSION_PREFIX)) {
        return Err(Error::Checkpoint(format!(
            "stage-I checkpoint lacks parameter {m}"
        )));
    }
    let trainable = if cfg.freeze_pretrained {
        params
            .vars_with_prefix(&[FUSION_PREFIX])
            .into_iter()
            .map(|(_, v)| v)
            .collect()
    } else {
        all_vars(&params)
    };
    let (epochs, iterations) = optimize(
        Stage::Stage2,
        cfg,
        data,
        &net,
        trainable,
        cfg.epochs_stage2,
        ctx,
    )?;
    let mut stages = init.manifest.stages.clone();
    stages.push(Stage::Stage2);
    Ok(TrainOutcome {
        checkpoint: make_checkpoint(Stage::Stage2, cfg.epochs_stage2, cfg, &params, &net, stages)?,
        epochs,
        iterations,
    })
}

/// Single-stage alternative: everything trained together on the fusion
/// objective for the combined epoch budget.
pub fn train_joint(
    cfg: &TrainConfig,
    data: &PairedDataset,
    ctx: &RunContext,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = Params::new(cfg.seed, DType::F32, &ctx.device);
    let net = SmfNet::new(params.builder(), &cfg.model, &cfg.ablation, true)?;
    let total = cfg.epochs_stage1 + cfg.epochs_stage2;
    let (epochs, iterations) =
        optimize(Stage::Joint, cfg, data, &net, all_vars(&params), total, ctx)?;
    Ok(TrainOutcome {
        checkpoint: make_checkpoint(Stage::Joint, total, cfg, &params, &net, vec![Stage::Joint])?,
        epochs,
        iterations,
    })
}

/// Outputs of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Absent for joint training.
    pub stage1: Option<TrainOutcome>,
    pub last: TrainOutcome,
    pub checkpoint_path: PathBuf,
}

/// Runs both stages (or the joint stage when `cfg.joint`), writing
/// checkpoints, CSV logs and loss-curve plots into `out_dir`.
pub fn run_pipeline(
    cfg: &TrainConfig,
    data: &PairedDataset,
    device: &Device,
    out_dir: &Path,
) -> Result<PipelineOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ctx = |stage: Stage| RunContext {
        device: device.clone(),
        log_csv: Some(out_dir.join(format!("{}_log.csv", stage_key(stage)))),
        diagnostics_dir: Some(out_dir.join("diagnostics")),
    };
    let finish = |stage: Stage, o: &TrainOutcome| -> Result<PathBuf> {
        let path = out_dir.join(format!("{}.ckpt", stage_key(stage)));
        o.checkpoint.save(&path)?;
        plot_loss_curves(
            &o.epochs,
            out_dir.join(format!("{}_loss.png", stage_key(stage))),
        )?;
        Ok(path)
    };
    if cfg.joint {
        let last = train_joint(cfg, data, &ctx(Stage::Joint))?;
        let checkpoint_path = finish(Stage::Joint, &last)?;
        return Ok(PipelineOutcome {
            stage1: None,
            last,
            checkpoint_path,
        });
    }
    let s1 = train_stage1(cfg, data, &ctx(Stage::Stage1))?;
    finish(Stage::Stage1, &s1)?;
    let s2 = train_stage2(cfg, data, &s1.checkpoint, &ctx(Stage::Stage2))?;
    let checkpoint_path = finish(Stage::Stage2, &s2)?;
    Ok(PipelineOutcome {
        stage1: Some(s1),
        last: s2,
        checkpoint_path,
    })
}
