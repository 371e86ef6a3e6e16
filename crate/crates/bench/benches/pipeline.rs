use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use smfnet::losses::{ssim_loss, stage2_total};
use smfnet::metrics::evaluate_pair;
use smfnet::params::uniform;
use smfnet::train::{initial_checkpoint, synthetic_pairs};
use smfnet::{
    ChannelLayout, DType, Device, Fuser, ImageTensor, Params, SmfNet, SsimReduction, Stage,
    TrainConfig,
};

fn image(c: usize, size: usize, seed: u64) -> ImageTensor {
    let layout = if c == 1 {
        ChannelLayout::Gray1
    } else {
        ChannelLayout::Rgb3
    };
    let t = uniform((1, c, size, size), 0.0, 1.0, seed, DType::F32, &Device::Cpu).unwrap();
    ImageTensor::new(t, layout).unwrap()
}

fn fuse(c: &mut Criterion) {
    let dev = Device::Cpu;
    let ckpt = initial_checkpoint(&TrainConfig::toy(), Stage::Stage2, &dev).unwrap();
    let fuser = Fuser::from_checkpoint(&ckpt, &dev).unwrap();
    let mut group = c.benchmark_group("fuse_pair");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(10));
    for size in [64, 128] {
        let (ir, vis) = (image(1, size, 1), image(3, size, 2));
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| fuser.fuse_pair(black_box(&ir), black_box(&vis)).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let dev = Device::Cpu;
    let cfg = TrainConfig::toy();
    let params = Params::new(cfg.seed, DType::F32, &dev);
    let net = SmfNet::new(params.builder(), &cfg.model, &cfg.ablation, true).unwrap();
    let vis = uniform(
        (cfg.batch_size, 1, cfg.patch_size, cfg.patch_size),
        0.0,
        1.0,
        3,
        DType::F32,
        &dev,
    )
    .unwrap();
    let ir = uniform(
        (cfg.batch_size, 1, cfg.patch_size, cfg.patch_size),
        0.0,
        1.0,
        4,
        DType::F32,
        &dev,
    )
    .unwrap();
    let mut group = c.benchmark_group("training_step");
    group.sample_size(10);
    group.bench_function("stage2_forward_backward", |b| {
        b.iter(|| {
            let f = net.fuse(&vis, &ir).unwrap();
            let loss = stage2_total(
                &f.fused,
                &vis,
                &ir,
                &f.vis,
                &f.ir,
                &cfg.losses,
                &cfg.switches,
            )
            .unwrap();
            loss.total.backward().unwrap()
        })
    });
    group.bench_function("ssim_loss", |b| {
        b.iter(|| ssim_loss(black_box(&vis), black_box(&ir)).unwrap())
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let pairs = synthetic_pairs(2, 256, 5, &Device::Cpu).unwrap();
    let (ir, vis) = &pairs[0];
    let fused = &pairs[1].1;
    let mut group = c.benchmark_group("metrics");
    group.sample_size(10);
    group.bench_function("evaluate_pair_256", |b| {
        b.iter(|| evaluate_pair(black_box(fused), ir, vis, SsimReduction::Sum).unwrap())
    });
    group.finish();
}

criterion_group!(benches, fuse, training_step, metrics);
criterion_main!(benches);
