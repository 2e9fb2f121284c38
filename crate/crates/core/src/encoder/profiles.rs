//! Backbone/head constructors for the built-in architecture profiles.

use super::{Backbone, Block, EncoderModel, Normalization, Profile};
use crate::nn::{
    ChannelNorm, Conv2d, ConvLayer, ConvStack, DenseLayer, FeatureNorm, FrozenBatchNorm1d,
    FrozenBatchNorm2d, Linear, MaxPool2d, Mlp, ResidualBlock, Scalar,
};
use ndarray::{Array1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv<F: Scalar>(
    rng: &mut ChaCha8Rng,
    path: String,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    bias: bool,
) -> Conv2d<F> {
    let fan_in = c_in * kernel * kernel;
    let weight = crate::nn::he_init::<F>(rng, &[c_out, fan_in], fan_in)
        .into_dimensionality::<Ix2>()
        .expect("conv weight rank");
    Conv2d {
        path,
        weight,
        bias: bias.then(|| Array1::zeros(c_out)),
        c_in,
        c_out,
        kernel,
        stride,
        pad,
    }
}

fn linear<F: Scalar>(
    rng: &mut ChaCha8Rng,
    path: String,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) -> Linear<F> {
    let weight = crate::nn::he_init::<F>(rng, &[out_dim, in_dim], in_dim)
        .into_dimensionality::<Ix2>()
        .expect("linear weight rank");
    Linear {
        path,
        weight,
        bias: bias.then(|| Array1::zeros(out_dim)),
    }
}

/// Small profile: five conv blocks, 128-d embedding, freeze boundary after
/// the third block. Channel-wise layer normalization keeps every sample
/// independent of its batch.
pub fn small<F: Scalar>(num_classes: usize, seed: u64) -> EncoderModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_b = 128;
    let d_z = 128;

    // (name, c_in, c_out, kernel, stride, pad)
    let specs = [
        ("block1", 3, 32, 8, 8, 0),
        ("block2", 32, 64, 3, 2, 1),
        ("block3", 64, 96, 3, 1, 1),
        ("block4", 96, 128, 3, 2, 1),
        ("block5", 128, 128, 3, 1, 1),
    ];
    let mut blocks = Vec::new();
    for (name, c_in, c_out, k, s, p) in specs {
        let base = format!("backbone.{name}");
        blocks.push(Block {
            name: name.to_string(),
            layers: ConvStack(vec![
                ConvLayer::Conv(conv(&mut rng, format!("{base}.conv"), c_in, c_out, k, s, p, true)),
                ConvLayer::Norm(ChannelNorm::new(format!("{base}.norm"), c_out)),
                ConvLayer::Relu,
            ]),
        });
    }

    // SimSiam-style heads scaled to the 128-d embedding: a three-layer
    // projector and a two-layer bottleneck predictor (bottleneck d_z/4).
    let projector = Mlp {
        layers: vec![
            DenseLayer::Linear(linear(&mut rng, "projector.0".into(), d_b, d_z, true)),
            DenseLayer::Norm(FeatureNorm::new("projector.1".into(), d_z)),
            DenseLayer::Relu,
            DenseLayer::Linear(linear(&mut rng, "projector.2".into(), d_z, d_z, true)),
            DenseLayer::Norm(FeatureNorm::new("projector.3".into(), d_z)),
            DenseLayer::Relu,
            DenseLayer::Linear(linear(&mut rng, "projector.4".into(), d_z, d_z, true)),
            DenseLayer::Norm(FeatureNorm::new("projector.5".into(), d_z)),
        ],
    };
    let bottleneck = d_z / 4;
    let predictor = Mlp {
        layers: vec![
            DenseLayer::Linear(linear(&mut rng, "predictor.0".into(), d_z, bottleneck, true)),
            DenseLayer::Norm(FeatureNorm::new("predictor.1".into(), bottleneck)),
            DenseLayer::Relu,
            DenseLayer::Linear(linear(&mut rng, "predictor.2".into(), bottleneck, d_z, true)),
        ],
    };
    let classifier = linear(&mut rng, "classifier".into(), d_b, num_classes, true);

    EncoderModel {
        profile: Profile::Small,
        backbone: Backbone { blocks },
        projector,
        predictor,
        classifier,
        num_classes,
        backbone_dim: d_b,
        projection_dim: d_z,
        freeze_boundary: "block3".to_string(),
        partial_frozen: false,
        normalization: Normalization::default(),
        input_size: Some(super::INPUT_SIZE),
    }
}

fn bottleneck_block<F: Scalar>(
    rng: &mut ChaCha8Rng,
    base: &str,
    c_in: usize,
    c_mid: usize,
    c_out: usize,
    stride: usize,
) -> Vec<ConvLayer<F>> {
    let main = ConvStack(vec![
        ConvLayer::Conv(conv(rng, format!("{base}.conv1"), c_in, c_mid, 1, 1, 0, false)),
        ConvLayer::FrozenBn(FrozenBatchNorm2d::new(format!("{base}.bn1"), c_mid)),
        ConvLayer::Relu,
        ConvLayer::Conv(conv(rng, format!("{base}.conv2"), c_mid, c_mid, 3, stride, 1, false)),
        ConvLayer::FrozenBn(FrozenBatchNorm2d::new(format!("{base}.bn2"), c_mid)),
        ConvLayer::Relu,
        ConvLayer::Conv(conv(rng, format!("{base}.conv3"), c_mid, c_out, 1, 1, 0, false)),
        ConvLayer::FrozenBn(FrozenBatchNorm2d::new(format!("{base}.bn3"), c_out)),
    ]);
    let shortcut = if c_in != c_out || stride != 1 {
        ConvStack(vec![
            ConvLayer::Conv(conv(
                rng,
                format!("{base}.downsample.conv"),
                c_in,
                c_out,
                1,
                stride,
                0,
                false,
            )),
            ConvLayer::FrozenBn(FrozenBatchNorm2d::new(format!("{base}.downsample.bn"), c_out)),
        ])
    } else {
        ConvStack(Vec::new())
    };
    vec![
        ConvLayer::Residual(ResidualBlock { main, shortcut }),
        ConvLayer::Relu,
    ]
}

/// ResNet50-shaped profile: bottleneck stages `[3, 4, 6, 3]`, 2048-d
/// embedding, freeze boundary after the third stage. Batch norms run on
/// stored statistics so externally trained weights drop in unchanged.
pub fn resnet50_compat<F: Scalar>(num_classes: usize, seed: u64) -> EncoderModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_b = 2048;
    let d_z = 2048;

    let stem = Block {
        name: "stem".to_string(),
        layers: ConvStack(vec![
            ConvLayer::Conv(conv(&mut rng, "backbone.stem.conv".into(), 3, 64, 7, 2, 3, false)),
            ConvLayer::FrozenBn(FrozenBatchNorm2d::new("backbone.stem.bn".into(), 64)),
            ConvLayer::Relu,
            ConvLayer::MaxPool(MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 1,
            }),
        ]),
    };

    let stage_specs: [(&str, usize, usize, usize, usize); 4] = [
        ("stage1", 64, 64, 256, 3),
        ("stage2", 256, 128, 512, 4),
        ("stage3", 512, 256, 1024, 6),
        ("stage4", 1024, 512, 2048, 3),
    ];
    let mut blocks = vec![stem];
    for (name, c_in, c_mid, c_out, repeats) in stage_specs {
        let mut layers = Vec::new();
        for r in 0..repeats {
            let stride = if r == 0 && name != "stage1" { 2 } else { 1 };
            let input = if r == 0 { c_in } else { c_out };
            layers.extend(bottleneck_block(
                &mut rng,
                &format!("backbone.{name}.{r}"),
                input,
                c_mid,
                c_out,
                stride,
            ));
        }
        blocks.push(Block {
            name: name.to_string(),
            layers: ConvStack(layers),
        });
    }

    let mut projector_layers = Vec::new();
    for i in 0..2 {
        projector_layers.push(DenseLayer::Linear(linear(
            &mut rng,
            format!("projector.{}", i * 3),
            d_z,
            d_z,
            false,
        )));
        projector_layers.push(DenseLayer::FrozenBn(FrozenBatchNorm1d::new(
            format!("projector.{}", i * 3 + 1),
            d_z,
        )));
        projector_layers.push(DenseLayer::Relu);
    }
    projector_layers.push(DenseLayer::Linear(linear(
        &mut rng,
        "projector.6".into(),
        d_z,
        d_z,
        false,
    )));
    projector_layers.push(DenseLayer::FrozenBn(FrozenBatchNorm1d::new(
        "projector.7".into(),
        d_z,
    )));

    let bottleneck = 512;
    let predictor = Mlp {
        layers: vec![
            DenseLayer::Linear(linear(&mut rng, "predictor.0".into(), d_z, bottleneck, false)),
            DenseLayer::FrozenBn(FrozenBatchNorm1d::new("predictor.1".into(), bottleneck)),
            DenseLayer::Relu,
            DenseLayer::Linear(linear(&mut rng, "predictor.2".into(), bottleneck, d_z, true)),
        ],
    };
    let classifier = linear(&mut rng, "classifier".into(), d_b, num_classes, true);

    EncoderModel {
        profile: Profile::ResNet50Compat,
        backbone: Backbone { blocks },
        projector: Mlp {
            layers: projector_layers,
        },
        predictor,
        classifier,
        num_classes,
        backbone_dim: d_b,
        projection_dim: d_z,
        freeze_boundary: "stage3".to_string(),
        partial_frozen: false,
        normalization: Normalization::default(),
        input_size: Some(super::INPUT_SIZE),
    }
}
