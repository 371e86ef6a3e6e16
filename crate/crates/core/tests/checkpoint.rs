mod common;

use common::{cpu, max_abs_diff};
use smfnet::params::uniform;
use smfnet::train::{initial_checkpoint, load_network, Checkpoint, Fuser, Stage, TrainConfig};
use smfnet::{ChannelLayout, DType, Error, ImageTensor};

fn inputs(h: usize, w: usize) -> (ImageTensor, ImageTensor) {
    let dev = cpu();
    let ir = uniform((1, 1, h, w), 0.0, 1.0, 1, DType::F32, &dev).unwrap();
    let vis = uniform((1, 3, h, w), 0.0, 1.0, 2, DType::F32, &dev).unwrap();
    (
        ImageTensor::new(ir, ChannelLayout::Gray1).unwrap(),
        ImageTensor::new(vis, ChannelLayout::Rgb3).unwrap(),
    )
}

#[test]
fn file_round_trip_gives_identical_fusion() {
    let dev = cpu();
    let ckpt = initial_checkpoint(&TrainConfig::toy(), Stage::Stage2, &dev).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path, &dev).unwrap();

    assert_eq!(loaded.manifest, ckpt.manifest);
    assert_eq!(
        loaded.tensors.keys().collect::<Vec<_>>(),
        ckpt.tensors.keys().collect::<Vec<_>>()
    );
    for (name, t) in &ckpt.tensors {
        assert_eq!(max_abs_diff(t, &loaded.tensors[name]), 0.0, "{name}");
    }

    let (ir, vis) = inputs(24, 40);
    let before = Fuser::from_checkpoint(&ckpt, &dev)
        .unwrap()
        .fuse_pair(&ir, &vis)
        .unwrap();
    let after = Fuser::from_checkpoint(&loaded, &dev)
        .unwrap()
        .fuse_pair(&ir, &vis)
        .unwrap();
    assert_eq!(max_abs_diff(before.tensor(), after.tensor()), 0.0);
}

#[test]
fn byte_round_trip_is_stable() {
    let ckpt = initial_checkpoint(&TrainConfig::toy(), Stage::Stage1, &cpu()).unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    let again = Checkpoint::from_bytes(&bytes, &cpu())
        .unwrap()
        .to_bytes()
        .unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn corrupt_files_are_rejected() {
    let ckpt = initial_checkpoint(&TrainConfig::toy(), Stage::Stage1, &cpu()).unwrap();
    let bytes = ckpt.to_bytes().unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(
        Checkpoint::from_bytes(&bad_magic, &cpu()),
        Err(Error::Checkpoint(_))
    ));

    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert!(matches!(
        Checkpoint::from_bytes(&bad_version, &cpu()),
        Err(Error::Checkpoint(_))
    ));

    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..30], &cpu()),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 4], &cpu()),
        Err(Error::Checkpoint(_))
    ));

    let missing = tempfile::tempdir().unwrap().path().join("absent.ckpt");
    assert!(Checkpoint::load(missing, &cpu()).is_err());
}

#[test]
fn reconstruction_checkpoint_cannot_fuse() {
    let ckpt = initial_checkpoint(&TrainConfig::toy(), Stage::Stage1, &cpu()).unwrap();
    assert!(!ckpt.has_fusion_layers());
    assert!(Fuser::from_checkpoint(&ckpt, &cpu()).is_err());
    // The encoder and decoder still load for reconstruction.
    let net = load_network(&ckpt, &cpu()).unwrap();
    assert!(net.fusion.is_none());
}

#[test]
fn missing_weight_is_reported() {
    let mut ckpt = initial_checkpoint(&TrainConfig::toy(), Stage::Stage2, &cpu()).unwrap();
    let victim = ckpt.tensors.keys().next().unwrap().clone();
    ckpt.tensors.remove(&victim);
    let err = load_network(&ckpt, &cpu()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}
