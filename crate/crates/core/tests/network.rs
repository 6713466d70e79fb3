use std::time::Instant;

use dscsim_core::network::{
    build_mobilenet_v2, expand_bottleneck, network_cost, ops_dsc, ops_standard, parse_network, reduction_factors,
    weights_dsc, weights_standard, write_network, BottleneckSpec, LayerKind, NetworkSpec, TensorShape,
};
use num_rational::Ratio;
use proptest::prelude::*;

const FIXTURE: &str = include_str!("../../../fixtures/mobilenet_v2.net");

fn factor(k: u64, p: u64) -> Ratio<u128> {
    Ratio::new(1, p as u128) + Ratio::new(1, (k * k) as u128)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reduction_factor_identity(m in 1u64..=512, k in 1u64..=11, n in 1u64..=2048, p in 1u64..=2048) {
        let w = Ratio::new(weights_dsc(k, n, p).unwrap() as u128, weights_standard(k, n, p).unwrap() as u128);
        let o = Ratio::new(ops_dsc(m, k, n, p).unwrap() as u128, ops_standard(m, k, n, p).unwrap() as u128);
        prop_assert_eq!(w, factor(k, p));
        prop_assert_eq!(o, factor(k, p));
        let (fw, fo) = reduction_factors(k, p).unwrap();
        prop_assert_eq!(Ratio::new(*fw.numer() as u128, *fw.denom() as u128), factor(k, p));
        prop_assert_eq!(fw, fo);
    }

    #[test]
    fn bottleneck_shapes_chain(side in 1usize..=56, c_in in 1usize..=64, t in 1usize..=6, c in 1usize..=64,
                               n in 1usize..=4, s in 1usize..=2) {
        let input = TensorShape::square(side, c_in).unwrap();
        let spec = BottleneckSpec { expand_factor: t, out_channels: c, repeat: n, first_stride: s };
        let layers = expand_bottleneck(input, spec).unwrap();
        prop_assert_eq!(layers.len(), 3 * n);
        let net = NetworkSpec::new("b", input, layers.clone()).unwrap();
        prop_assert_eq!(net.output_shape(), TensorShape::square(side.div_ceil(s), c).unwrap());
        for (r, rep) in layers.chunks(3).enumerate() {
            let stride = if r == 0 { s } else { 1 };
            prop_assert_eq!(rep[1].stride, stride);
            let residual = stride == 1 && rep[0].input.channels == c;
            prop_assert_eq!(rep[2].shortcut.is_some(), residual);
        }
    }
}

#[test]
fn reduction_factor_runtime() {
    let start = Instant::now();
    let mut checked = 0;
    for i in 0..1000u64 {
        let (m, k, n, p) = (1 + i % 224, 1 + i % 7, 1 + (i * 7) % 960, 1 + (i * 13) % 1280);
        let w = Ratio::new(
            weights_dsc(k, n, p).unwrap() as u128,
            weights_standard(k, n, p).unwrap() as u128,
        );
        let o = Ratio::new(
            ops_dsc(m, k, n, p).unwrap() as u128,
            ops_standard(m, k, n, p).unwrap() as u128,
        );
        assert_eq!((w, o), (factor(k, p), factor(k, p)));
        checked += 1;
    }
    assert_eq!(checked, 1000);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn cost_examples() {
    assert_eq!(weights_standard(3, 3, 32).unwrap(), 864);
    assert_eq!(weights_standard(3, 32, 64).unwrap(), 18_432);
    assert_eq!(ops_standard(112, 3, 3, 32).unwrap(), 10_838_016);
    assert!(weights_standard(0, 3, 3).is_err());
}

#[test]
fn fixture_parses_to_the_builtin_network() {
    let parsed = parse_network(FIXTURE).unwrap();
    assert_eq!(parsed, build_mobilenet_v2());
    assert_eq!(parse_network(&write_network(&parsed)).unwrap(), parsed);
}

#[test]
fn mobilenet_structure() {
    let net = build_mobilenet_v2();
    let first = &net.layers[0];
    assert_eq!(
        (first.kind, first.kernel, first.stride),
        (LayerKind::StandardConv, 3, 2)
    );
    assert_eq!(first.output(), TensorShape::square(112, 32).unwrap());
    let pool = net.layers.iter().position(|l| l.kind == LayerKind::AvgPool).unwrap();
    assert_eq!(net.layers[pool + 1].input, TensorShape::square(1, 1280).unwrap());
    assert_eq!(net.output_shape(), TensorShape::square(1, 1000).unwrap());
    assert!(net
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::DepthwiseConv)
        .all(|l| l.kernel == 3));
    // 17 bottlenecks of three layers, plus the stem, the 1280 PWC, pool and classifier.
    assert_eq!(net.layers.len(), 17 * 3 + 4);
    assert_eq!(net.layers.iter().filter(|l| l.shortcut.is_some()).count(), 10);
}

#[test]
fn mobilenet_cost_totals() {
    let net = build_mobilenet_v2();
    let cost = network_cost(&net).unwrap();
    assert_eq!(
        cost.conv_macs,
        cost.layers
            .iter()
            .filter(|l| l.kind.is_conv())
            .map(|l| l.macs)
            .sum::<u64>()
    );
    assert_eq!(cost.total_macs, cost.layers.iter().map(|l| l.macs).sum::<u64>());
    assert_eq!(cost.total_weights, cost.layers.iter().map(|l| l.weights).sum::<u64>());
    assert_eq!(cost.total_ops(), 2 * cost.total_macs);
    assert!((280e6..=340e6).contains(&(cost.total_macs as f64)));
    // Independent per-layer count at output resolution.
    let mut macs = 0u64;
    for l in &net.layers {
        let o = l.output();
        let px = (o.height * o.width) as u64;
        let k2 = (l.kernel * l.kernel) as u64;
        macs += match l.kind {
            LayerKind::StandardConv => px * k2 * l.input.channels as u64 * o.channels as u64,
            LayerKind::DepthwiseConv => px * k2 * o.channels as u64,
            LayerKind::PointwiseConv => px * l.input.channels as u64 * o.channels as u64,
            _ => 0,
        };
    }
    assert_eq!(cost.conv_macs, macs);
    for pair in &cost.dsc_pairs {
        assert_eq!(pair.weight_factor, pair.ops_factor);
        assert_eq!(Ratio::new(pair.weights_dsc, pair.weights_standard), pair.weight_factor);
    }
}

#[test]
fn malformed_networks_are_rejected() {
    assert!(parse_network("input 224x200x3\n").is_err());
    assert!(parse_network("input 8x8x3\n8x8x4 pwconv - 4 1 1\n").is_err());
    assert!(parse_network("input 8x8x3\n8x8x3 bottleneck 0 4 1 1\n").is_err());
}
