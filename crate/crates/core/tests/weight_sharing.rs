mod common;

use common::{cpu, max_abs_diff, randomize};
use smfnet::params::uniform;
use smfnet::{Ablation, DType, ModelConfig, Params, SmfNet};

fn network(ablation: &Ablation) -> (Params, SmfNet) {
    let params = Params::new(3, DType::F64, &cpu());
    let net = SmfNet::new(params.builder(), &ModelConfig::miniature(), ablation, true).unwrap();
    randomize(&params, 0.3, 3);
    (params, net)
}

#[test]
fn encoder_has_one_set_of_weights_for_both_modalities() {
    let (params, _) = network(&Ablation::default());
    for name in params.names() {
        let lower = name.to_lowercase();
        assert!(
            !lower.contains("vis") && !lower.contains("ir.") && !lower.contains("infrared"),
            "modality-specific parameter {name}"
        );
    }
}

#[test]
fn swapping_inputs_swaps_detail_and_base_features() {
    let (_, net) = network(&Ablation::default());
    let dev = cpu();
    let a = uniform((1, 1, 16, 16), 0.0, 1.0, 10, DType::F64, &dev).unwrap();
    let b = uniform((1, 1, 16, 16), 0.0, 1.0, 11, DType::F64, &dev).unwrap();
    let (fa, fb) = net.encoder.encode_pair(&a, &b).unwrap();
    let (ga, gb) = net.encoder.encode_pair(&b, &a).unwrap();
    assert_eq!(max_abs_diff(&fa.detail, &gb.detail), 0.0);
    assert_eq!(max_abs_diff(&fa.base, &gb.base), 0.0);
    assert_eq!(max_abs_diff(&fb.detail, &ga.detail), 0.0);
    assert_eq!(max_abs_diff(&fb.base, &ga.base), 0.0);
}

#[test]
fn reconstruction_decodes_each_modality_with_the_same_decoder() {
    let (_, net) = network(&Ablation::default());
    let dev = cpu();
    let a = uniform((1, 1, 16, 16), 0.0, 1.0, 12, DType::F64, &dev).unwrap();
    let b = uniform((1, 1, 16, 16), 0.0, 1.0, 13, DType::F64, &dev).unwrap();
    let r = net.reconstruct(&a, &b).unwrap();
    let direct = net.decoder.decode(&r.vis).unwrap();
    assert_eq!(max_abs_diff(&direct, &r.vis_hat), 0.0);
}
