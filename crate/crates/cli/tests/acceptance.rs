//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any line is FAIL.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::ops::Range;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{conv, layer_weights, params, qtensor, rng, Post};
use dscsim_core::design::{explore, resources_for, DeviceSpec, ExploreRanges, ResourceModel, Resources};
use dscsim_core::fixedpoint::{
    activate_fixed, dequantize_value, fold_batchnorm, quantize, quantize_value, BatchNorm, OpStats, QParams, QTensor,
};
use dscsim_core::functional::io::{read_tensor, TensorFile};
use dscsim_core::functional::{
    conv_depthwise_q, conv_pointwise_direct_q, conv_pointwise_tiled_q, conv_standard_q, run_network_q, TilePlan,
    INPUT_TILE, OUTPUT_TILE,
};
use dscsim_core::memory::feature_map_residency;
use dscsim_core::network::{
    build_mobilenet_v2, ops_dsc, ops_standard, parse_network, weights_dsc, weights_standard, Activation, LayerKind,
    LayerSpec, NetworkSpec, TensorShape,
};
use dscsim_core::scheduler::{
    estimate_network, schedule_layer, simulate_network, AcceleratorConfig, DwcPolicy, PerformanceReport, PwcPolicy,
};
use dscsim_core::weights::{generate_weights, quantize_weights, random_input, read_bundle, QNetworkWeights};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;

// Pinned tolerances and budgets.
const REDUCTION_SAMPLES: usize = 1_000;
const REDUCTION_BUDGET: Duration = Duration::from_secs(1);
const COST_BUDGET: Duration = Duration::from_secs(1);
const MACS_BAND: (u64, u64) = (280_000_000, 340_000_000);
const ORACLE_INSTANCES: usize = 200;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const COSIM_BUDGET: Duration = Duration::from_secs(120);
const RANDOM_LAYERS: usize = 100;
const LATENCY_MS: (f64, f64) = (3.0, 4.7);
const FPS: (f64, f64) = (213.0, 333.0);
const PEAK_GOPS: f64 = 306.4;
const PEAK_GOPS_TOL: f64 = 0.05;
const TARGET_UTILIZATION: f64 = 170.6 / 306.4;
const UTILIZATION_TOL: f64 = 0.08;
const LARGEST_TENSOR_BITS: u64 = 19_267_584;
const FEATURE_MAP_BITS: u64 = 25_690_112;
const PWC_TILE_BITS: u64 = 18_432;
const BANK_BITS: u64 = 18_432;
const WORST_TRANSFER: u64 = 37;
const WORST_COMPUTE: u64 = 49;
const TABLE_RESOURCES: Resources = Resources {
    alms: 81_753,
    dsps: 1_278,
    m20k: 1_844,
};
const MAX_DSP_FEASIBLE_MMES: usize = 5;
const ROUND_TRIPS_PER_SCALE: usize = 10_000;
const PROPERTY_CASES: usize = 10_000;
const BN_REL_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn reference_config() -> AcceleratorConfig {
    AcceleratorConfig::from_toml(&fs::read_to_string(fixture("paper.cfg")).unwrap()).unwrap()
}

fn reduction_identity() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    for _ in 0..REDUCTION_SAMPLES {
        let (m, k) = (r.random_range(1..=512u64), r.random_range(1..=11u64));
        let (n, p) = (r.random_range(1..=2048u64), r.random_range(1..=2048u64));
        let want = Ratio::new(1u128, p as u128) + Ratio::new(1, (k * k) as u128);
        let w = Ratio::new(
            weights_dsc(k, n, p).unwrap() as u128,
            weights_standard(k, n, p).unwrap() as u128,
        );
        let o = Ratio::new(
            ops_dsc(m, k, n, p).unwrap() as u128,
            ops_standard(m, k, n, p).unwrap() as u128,
        );
        ensure!(w == want && o == want, "M={m} K={k} N={n} P={p}: {w} / {o} vs {want}");
    }
    let t = start.elapsed();
    ensure!(t < REDUCTION_BUDGET, "took {t:?}");
    Ok(format!("{REDUCTION_SAMPLES} samples exact in {t:?}"))
}

fn mobilenet_cost() -> Outcome {
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_dscsim"))
        .arg("--out")
        .arg(out.path())
        .args(["cost", "--net"])
        .arg(fixture("mobilenet_v2.net"))
        .output()
        .unwrap();
    let t = start.elapsed();
    ensure!(
        o.status.success(),
        "cost failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = String::from_utf8(o.stdout).unwrap();
    let field = |key: &str| -> u64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key)?.strip_prefix(" = ")?.parse().ok())
            .unwrap_or_else(|| panic!("no {key} line"))
    };
    let macs = field("total_macs");
    ensure!((MACS_BAND.0..=MACS_BAND.1).contains(&macs), "total_macs {macs}");
    ensure!(t < COST_BUDGET, "took {t:?}");
    let implied = 170.6e9 / 266.6 / 2.0;
    Ok(format!(
        "total_macs {macs} ({:.3} GOP/frame, target {:.3}) in {t:?}",
        2.0 * macs as f64 / 1e9,
        2.0 * implied / 1e9
    ))
}

fn partition(r: &mut impl Rng, total: usize, max: usize) -> Vec<Range<usize>> {
    let mut tiles = Vec::new();
    let mut start = 0;
    while start < total {
        let len = r.random_range(1..=max.min(total - start));
        tiles.push(start..start + len);
        start += len;
    }
    tiles
}

fn random_plan(r: &mut impl Rng, n: usize, p: usize) -> TilePlan {
    let input_tiles = partition(r, n, INPUT_TILE);
    let output_tiles = partition(r, p, OUTPUT_TILE);
    let mut order: Vec<(usize, usize)> = (0..input_tiles.len())
        .flat_map(|i| (0..output_tiles.len()).map(move |o| (i, o)))
        .collect();
    order.shuffle(r);
    TilePlan {
        input_tiles,
        output_tiles,
        order,
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut plans = 0;
    for kind in [
        LayerKind::StandardConv,
        LayerKind::DepthwiseConv,
        LayerKind::PointwiseConv,
    ] {
        for case in 0..ORACLE_INSTANCES {
            let m = r.random_range(1..=14);
            let n = r.random_range(1..=96);
            let k = if kind == LayerKind::PointwiseConv {
                1
            } else {
                [1, 3, 5][r.random_range(0..3)]
            };
            let s = if kind == LayerKind::PointwiseConv {
                1
            } else {
                r.random_range(1..=2)
            };
            let p = if kind == LayerKind::DepthwiseConv {
                n
            } else {
                r.random_range(1..=32)
            };
            let x = qtensor(&mut r, m, n);
            let depthwise = kind == LayerKind::DepthwiseConv;
            let w = layer_weights(&mut r, p, if depthwise { 1 } else { n }, k);
            let act = common::activation(&mut r);
            let ep = w.epilogue(act);
            let want = conv(&x, &w.kernel, s, depthwise, &Post::of(&w, act));
            let stats = &mut OpStats::default();
            let got = match kind {
                LayerKind::StandardConv => conv_standard_q(&x, &w.kernel, &ep, s, (k - 1) / 2, stats),
                LayerKind::DepthwiseConv => conv_depthwise_q(&x, &w.kernel, &ep, s, (k - 1) / 2, stats),
                _ => conv_pointwise_direct_q(&x, &w.kernel, &ep, stats),
            }
            .unwrap();
            ensure!(got == want, "{kind:?} case {case} (M={m} N={n} P={p} K={k} s={s})");
            if kind == LayerKind::PointwiseConv {
                for plan in [TilePlan::hardware(n, p).unwrap(), random_plan(&mut r, n, p)] {
                    let (tiled, _) = conv_pointwise_tiled_q(&x, &w.kernel, &ep, &plan, stats).unwrap();
                    ensure!(tiled == want, "tiled PWC case {case} plan {:?}", plan.grid());
                    plans += 1;
                }
            }
        }
    }
    let t = start.elapsed();
    ensure!(t < ORACLE_BUDGET, "took {t:?}");
    Ok(format!(
        "{ORACLE_INSTANCES} instances each of SC/DWC/PWC, {plans} tiled plans, in {t:?}"
    ))
}

fn tiling_lossless() -> Outcome {
    let mut r = rng(4);
    let (m, n, p) = (7, 320, 36);
    let x = qtensor(&mut r, m, n);
    let w = layer_weights(&mut r, p, n, 1);
    let mut checked = 0;
    for act in [Activation::None, Activation::Relu, Activation::Relu6] {
        let ep = w.epilogue(act);
        let direct = conv_pointwise_direct_q(&x, &w.kernel, &ep, &mut OpStats::default()).unwrap();
        let hw = TilePlan::hardware(n, p).unwrap();
        ensure!(hw.grid() == (10, 4), "hardware grid {:?}", hw.grid());
        let mut plans = vec![hw];
        for width in [1, 5, 16, 32] {
            plans.push(TilePlan::uniform(n, p, width, OUTPUT_TILE).unwrap());
        }
        plans.extend((0..16).map(|_| random_plan(&mut r, n, p)));
        for plan in &plans {
            let (tiled, partials) = conv_pointwise_tiled_q(&x, &w.kernel, &ep, plan, &mut OpStats::default()).unwrap();
            ensure!(tiled == direct, "{act:?} plan {:?}", plan.grid());
            ensure!(partials.len() == plan.order.len(), "partial count");
            checked += 1;
        }
    }
    Ok(format!("{checked} plans of the 7x7x320 -> 36 decomposition bit-exact"))
}

fn toy() -> (NetworkSpec, QNetworkWeights, QTensor) {
    let net = parse_network(&fs::read_to_string(fixture("toy.net")).unwrap()).unwrap();
    let w = read_bundle(&mut fs::File::open(fixture("toy_weights.dscb")).unwrap()).unwrap();
    let TensorFile::Real(x) = read_tensor(&mut fs::File::open(fixture("toy_input.dsct")).unwrap()).unwrap() else {
        panic!("toy input is stored as reals");
    };
    let qx = quantize(&x, w.input, &mut OpStats::default());
    (net, w, qx)
}

/// Criterion 5, returning the MobileNet co-simulation report for criterion 6.
fn cosimulation(mobilenet: &mut Option<PerformanceReport>) -> Outcome {
    let start = Instant::now();
    let cfg = reference_config();
    let (net, w, qx) = toy();
    let golden = run_network_q(&net, &w, &qx, false).unwrap().output;
    ensure!(
        simulate_network(&net, &w, &qx, &cfg).unwrap().output == golden,
        "toy output differs"
    );

    let net = build_mobilenet_v2();
    let weights = generate_weights(&net, 2024).unwrap();
    let q = quantize_weights(&net, &weights, &random_input(net.input_shape, 2025)).unwrap();
    let qx = quantize(&random_input(net.input_shape, 7), q.input, &mut OpStats::default());
    let golden = run_network_q(&net, &q, &qx, false).unwrap().output;
    let sim = simulate_network(&net, &q, &qx, &cfg).unwrap();
    ensure!(sim.output == golden, "MobileNetV2 output differs");
    let t = start.elapsed();
    ensure!(t < COSIM_BUDGET, "took {t:?}");
    *mobilenet = Some(sim.report);
    Ok(format!(
        "toy and MobileNetV2 ({} outputs) bit-identical in {t:?}",
        golden.data.len()
    ))
}

fn random_layer(r: &mut impl Rng) -> LayerSpec {
    let m = r.random_range(3..=28);
    let s = r.random_range(1..=2);
    match r.random_range(0..3) {
        0 => LayerSpec::standard(TensorShape::square(m, 3).unwrap(), 3, s, r.random_range(1..=48)),
        1 => LayerSpec::depthwise(TensorShape::square(m, r.random_range(1..=200)).unwrap(), 3, s),
        _ => LayerSpec::pointwise(
            TensorShape::square(m, r.random_range(1..=200)).unwrap(),
            r.random_range(1..=64),
        ),
    }
}

fn cycle_agreement(mobilenet: Option<&PerformanceReport>) -> Outcome {
    let cfg = reference_config();
    let net = build_mobilenet_v2();
    let sim = mobilenet.ok_or("co-simulation did not produce a report")?;
    let est = estimate_network(&net, &cfg).unwrap();
    ensure!(sim.layers.len() == net.layers.len(), "layer count");
    for (s, e) in sim.layers.iter().zip(&est.layers) {
        ensure!(
            s.cycles() == e.cycles(),
            "MobileNetV2 layer {}: {} vs {}",
            s.index,
            s.cycles(),
            e.cycles()
        );
    }
    let mut r = rng(6);
    for case in 0..RANDOM_LAYERS {
        let layer = random_layer(&mut r);
        let net = NetworkSpec::new("one", layer.input, vec![layer.clone()]).unwrap();
        let mut c = AcceleratorConfig {
            num_mmes: r.random_range(1..=4),
            ..cfg
        };
        c.policy.depthwise = [DwcPolicy::ChannelSplit, DwcPolicy::TimeMultiplex][r.random_range(0..2)];
        c.policy.pointwise = [PwcPolicy::OutputSplit, PwcPolicy::InputSplit][r.random_range(0..2)];
        if r.random_bool(0.3) {
            c.external_memory.bandwidth_bytes_per_s = r.random_range(20_000_000..2_000_000_000);
        }
        let depthwise = layer.kind == LayerKind::DepthwiseConv;
        let lw = layer_weights(
            &mut r,
            layer.output_channels(),
            if depthwise { 1 } else { layer.input.channels },
            layer.kernel,
        );
        let w = QNetworkWeights {
            input: params(&mut r, 6, 14),
            layers: vec![Some(lw)],
        };
        let x = QTensor {
            params: w.input,
            ..qtensor(&mut r, layer.input.side(), layer.input.channels)
        };
        let s = simulate_network(&net, &w, &x, &c).unwrap().report;
        let e = estimate_network(&net, &c).unwrap();
        ensure!(
            s.layers[0].cycles() == e.layers[0].cycles(),
            "random case {case}: {layer:?}"
        );
    }
    Ok(format!(
        "{} MobileNetV2 layers and {RANDOM_LAYERS} random layers agree exactly",
        net.layers.len()
    ))
}

fn throughput_band() -> Outcome {
    let r = estimate_network(&build_mobilenet_v2(), &reference_config()).unwrap();
    let ms = r.latency_s() * 1e3;
    let fps = r.fps();
    ensure!((LATENCY_MS.0..=LATENCY_MS.1).contains(&ms), "latency {ms:.3} ms");
    ensure!((FPS.0..=FPS.1).contains(&fps), "fps {fps:.1}");
    Ok(format!("latency {ms:.3} ms, {fps:.1} fps"))
}

fn peak_and_utilization() -> Outcome {
    let cfg = reference_config();
    let peak = cfg.num_mmes as u128 * 288 * 2 * cfg.clock_hz as u128;
    ensure!(cfg.peak_ops_per_second() == peak, "peak identity");
    let gops = peak as f64 / 1e9;
    ensure!((gops - PEAK_GOPS).abs() < PEAK_GOPS_TOL, "peak {gops} GOPS");
    let r = estimate_network(&build_mobilenet_v2(), &cfg).unwrap();
    ensure!(r.peak_ops_per_second == peak, "report peak");
    let u = r.utilization_ratio();
    ensure!(
        u > Ratio::from_integer(0) && u <= Ratio::from_integer(1),
        "utilization {u}"
    );
    ensure!(u == r.achieved_ratio() / Ratio::from_integer(peak), "achieved/peak");
    let uf = r.utilization();
    ensure!(
        (uf - TARGET_UTILIZATION).abs() <= UTILIZATION_TOL,
        "utilization {uf:.4} vs {TARGET_UTILIZATION:.4}"
    );
    Ok(format!(
        "peak {gops:.3} GOPS, achieved {:.1} GOPS, utilization {uf:.4} (target {TARGET_UTILIZATION:.4})",
        r.achieved_gops()
    ))
}

fn memory_feasibility() -> Outcome {
    let cfg = reference_config();
    let net = build_mobilenet_v2();
    let res = feature_map_residency(&net, &cfg.feature_map);
    ensure!(
        res.largest_tensor_bits == LARGEST_TENSOR_BITS,
        "largest tensor {}",
        res.largest_tensor_bits
    );
    ensure!(cfg.feature_map.capacity_bits == FEATURE_MAP_BITS, "capacity");
    ensure!(
        res.fits && res.peak_bits <= FEATURE_MAP_BITS,
        "live peak {} does not fit",
        res.peak_bits
    );
    ensure!(cfg.weight_buffer.bank_bits == BANK_BITS, "bank size");
    let widest = LayerSpec::pointwise(TensorShape::square(7, 320).unwrap(), 1280);
    let tile = schedule_layer(&widest, &cfg).unwrap().max_weight_bits();
    ensure!(tile == PWC_TILE_BITS && tile <= BANK_BITS, "PWC tile {tile} bits");
    let transfer = cfg.external_memory.data_cycles(PWC_TILE_BITS / 8, cfg.clock_hz);
    ensure!(
        transfer == WORST_TRANSFER && transfer <= WORST_COMPUTE,
        "transfer {transfer}"
    );
    let r = estimate_network(&net, &cfg).unwrap();
    let mut checked = 0;
    let mut bound = Vec::new();
    for l in r
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::DepthwiseConv | LayerKind::PointwiseConv))
    {
        let window = (l.input.side() * l.input.side()) as u64;
        if window >= WORST_TRANSFER {
            ensure!(l.stall == 0, "layer {} ({}) stalls {}", l.index, l.input, l.stall);
            checked += 1;
        } else {
            bound.push(format!("layer {} {} stall {}", l.index, l.input, l.stall));
        }
    }
    Ok(format!(
        "largest tensor {} bits, live peak {} bits <= {FEATURE_MAP_BITS}; tile {tile} bits; {checked} DSC layers stall-free (transfer {transfer} <= {WORST_COMPUTE}); weight-bound below M^2 < {WORST_TRANSFER}: {}",
        res.largest_tensor_bits,
        res.peak_bits,
        if bound.is_empty() { "none".to_string() } else { bound.join(", ") }
    ))
}

fn resource_calibration() -> Outcome {
    let cfg = reference_config();
    let model = ResourceModel::calibrated();
    let r = resources_for(&cfg, &model).unwrap();
    ensure!(r == TABLE_RESOURCES, "{r:?}");
    let device = DeviceSpec::from_toml(&fs::read_to_string(fixture("arria10.dev")).unwrap()).unwrap();
    let ex = explore(
        &build_mobilenet_v2(),
        &device,
        &cfg,
        &model,
        &ExploreRanges::mmes(1..=8, &cfg),
    )
    .unwrap();
    for p in &ex.points {
        let n = p.config.num_mmes;
        let dsp_violation = p.violations.iter().any(|v| v.starts_with("dsp "));
        ensure!(
            dsp_violation == (n > MAX_DSP_FEASIBLE_MMES),
            "{n} MMEs: {:?}",
            p.violations
        );
        ensure!(n <= MAX_DSP_FEASIBLE_MMES || !p.feasible, "{n} MMEs marked feasible");
    }
    Ok(format!(
        "ALM {} DSP {} M20K {}; MME counts > {MAX_DSP_FEASIBLE_MMES} DSP-infeasible",
        r.alms, r.dsps, r.m20k
    ))
}

fn quantization_bounds() -> Outcome {
    let mut r = rng(11);
    for e in QParams::MIN_FRAC_BITS as i32..=QParams::MAX_FRAC_BITS as i32 {
        let p = QParams::new(e).unwrap();
        let ulp = 2f64.powi(-e);
        let (lo, hi) = (i16::MIN as f64 * ulp, i16::MAX as f64 * ulp);
        for _ in 0..ROUND_TRIPS_PER_SCALE {
            let x = r.random_range(lo..=hi);
            let (q, _) = quantize_value(x, p);
            let err = (dequantize_value(q, p) - x).abs();
            ensure!(err <= ulp / 2.0, "{x} at e={e}: error {err}");
        }
    }
    for _ in 0..PROPERTY_CASES {
        let p = QParams::new(r.random_range(-8..=15)).unwrap();
        let q: i16 = r.random();
        let six = quantize_value(6.0, p).0;
        let y = activate_fixed(q, Activation::Relu6, p);
        ensure!(
            y == q.clamp(0, six) && activate_fixed(y, Activation::Relu6, p) == y,
            "ReLU6 {q} at {p:?}"
        );
    }
    for _ in 0..PROPERTY_CASES {
        let (gamma, beta, mean) = (
            r.random_range(-4.0..4.0),
            r.random_range(-4.0..4.0),
            r.random_range(-4.0..4.0),
        );
        let (var, eps, x) = (
            r.random_range(0.0..16.0),
            r.random_range(1e-5..1e-1),
            r.random_range(-100.0..100.0),
        );
        let bias: f64 = r.random_range(-2.0..2.0);
        let bn = BatchNorm {
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            var: vec![var],
            eps,
        };
        let folded = fold_batchnorm(&bn, Some(&[bias])).unwrap();
        let want = gamma * (x + bias - mean) / (var + eps).sqrt() + beta;
        let got = folded.apply(0, x);
        ensure!(
            (got - want).abs() <= BN_REL_TOL * (1.0 + want.abs()),
            "BN {got} vs {want}"
        );
    }
    let scales = QParams::MAX_FRAC_BITS as i32 - QParams::MIN_FRAC_BITS as i32 + 1;
    Ok(format!(
        "{ROUND_TRIPS_PER_SCALE} round trips at each of {scales} scales; {PROPERTY_CASES} ReLU6 and BN cases"
    ))
}

fn main() -> ExitCode {
    let mut mobilenet = None;
    let results: Vec<(&str, Outcome)> = vec![
        ("1 reduction-factor identity", reduction_identity()),
        ("2 MobileNetV2 cost", mobilenet_cost()),
        ("3 oracle equivalence", oracle_equivalence()),
        ("4 tiling losslessness", tiling_lossless()),
        ("5 co-simulation", cosimulation(&mut mobilenet)),
        (
            "6 closed-form vs event-driven cycles",
            cycle_agreement(mobilenet.as_ref()),
        ),
        ("7 throughput band", throughput_band()),
        ("8 peak and utilization", peak_and_utilization()),
        ("9 memory feasibility", memory_feasibility()),
        ("10 resource calibration", resource_calibration()),
        ("11 quantization bounds", quantization_bounds()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
