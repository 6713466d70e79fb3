use super::{expand_bottleneck, Activation, BottleneckSpec, LayerKind, LayerSpec, NetworkSpec};
use crate::tensor::TensorShape;

/// Bottleneck rows of MobileNetV2: `(t, c, n, s)`.
pub const MOBILENET_V2_ROWS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// MobileNetV2 at 224x224x3 with every bottleneck expanded.
///
/// 3x3 stride-2 standard conv to 32, the 17 bottlenecks, PWC to 1280, global
/// 7x7 average pool and the 1000-way PWC classifier (no BN, no activation).
pub fn build_mobilenet_v2() -> NetworkSpec {
    let input = TensorShape {
        height: 224,
        width: 224,
        channels: 3,
    };
    let mut layers = vec![LayerSpec::standard(input, 3, 2, 32)];
    let mut shape = layers[0].output();
    for (t, c, n, s) in MOBILENET_V2_ROWS {
        let block = expand_bottleneck(
            shape,
            BottleneckSpec {
                expand_factor: t,
                out_channels: c,
                repeat: n,
                first_stride: s,
            },
        )
        .expect("table rows are valid");
        shape = block.last().expect("non-empty block").output();
        layers.extend(block);
    }
    let head = LayerSpec::pointwise(shape, 1280);
    let pool = LayerSpec::pool(LayerKind::AvgPool, head.output(), 7);
    let classifier = LayerSpec::pointwise(pool.output(), 1000)
        .with_batchnorm(false)
        .with_activation(Activation::None);
    layers.extend([head, pool, classifier]);
    NetworkSpec::new("mobilenet_v2", input, layers).expect("MobileNetV2 chains")
}
