//! The `dscsim` command line: cost analytics, seeded generation, functional
//! runs, cycle simulation and design-space exploration.
//!
//! Every command writes its results and a `manifest.json` into the output
//! directory (`--out`, else `DSCSIM_OUT`, else `dscsim-out`).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dscsim_core::design::{explore, DeviceSpec, ExploreRanges, ResourceModel};
use dscsim_core::fixedpoint::{dequantize, quantize, OpStats};
use dscsim_core::functional::io::{read_tensor, write_qtensor, write_tensor, TensorFile};
use dscsim_core::functional::{run_network, run_network_q};
use dscsim_core::network::{network_cost, parse_network, NetworkSpec, TensorShape};
use dscsim_core::scheduler::{estimate_network, simulate_network, AcceleratorConfig, PerformanceReport};
use dscsim_core::tensor::{QTensor, Tensor};
use dscsim_core::weights::{
    generate_weights, quantize_weights, random_input, read_bundle, write_bundle, QNetworkWeights,
};
use dscsim_core::Error;

/// The three-layer depthwise-separable block written by `gen toy-net`.
pub const TOY_NET: &str = "\
name toy
input 14x14x16
# input    operator    t  c   n  s
14x14x16   bottleneck  6  16  1  1
";

pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const PARSE: u8 = 3;
    pub const INFEASIBLE: u8 = 4;
    pub const IO: u8 = 5;
    pub const MISMATCH: u8 = 6;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Format(_) => exit::PARSE,
        Error::Infeasible(_) => exit::INFEASIBLE,
        Error::Io(_) => exit::IO,
        Error::Shape(_) | Error::ShapeChain { .. } | Error::MissingWeights(_) | Error::WeightMismatch { .. } => {
            exit::MISMATCH
        }
        _ => exit::FAILURE,
    }
}

/// Core error with the file it came from, if any.
fn fail(path: Option<&Path>, e: Error) -> CliError {
    let message = match path {
        Some(p) => format!("{}: {e}", p.display()),
        None => e.to_string(),
    };
    CliError {
        code: code_for(&e),
        message,
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: exit::USAGE,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dscsim", version, about = "Depthwise-separable CNN accelerator simulator")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "DSCSIM_OUT", default_value = "dscsim-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    RandomWeights,
    ToyNet,
    TestTensor,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer and total weights, MACs, ops and DSC reduction factors.
    Cost {
        #[arg(long)]
        net: PathBuf,
    },
    /// Seeded generation of weight bundles, the toy network and input tensors.
    Gen {
        kind: GenKind,
        #[arg(long)]
        seed: u64,
        /// Network the weights or tensor are generated for.
        #[arg(long)]
        net: Option<PathBuf>,
        /// Tensor shape `HxWxC` when no network is given.
        #[arg(long, default_value = "224x224x3")]
        shape: String,
        /// File name inside the output directory.
        #[arg(long)]
        name: Option<String>,
    },
    /// Functional inference in fixed point (default) or in reals.
    #[command(group(ArgGroup::new("arith").args(["quantized", "real"])))]
    Run {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        quantized: bool,
        #[arg(long)]
        real: bool,
        /// Also write every layer's output.
        #[arg(long)]
        dump_activations: bool,
    },
    /// Cycle estimate, or full co-simulation when weights and input are given.
    Simulate {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, requires = "input")]
        weights: Option<PathBuf>,
        #[arg(long, requires = "weights")]
        input: Option<PathBuf>,
    },
    /// Sweeps MME count and buffer sizes against a device.
    Explore {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        device: PathBuf,
        /// Base configuration; defaults to the four-MME design.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `a..b` (inclusive), `a` or `a,b,c`.
        #[arg(long, default_value = "1..8")]
        mmes: String,
        /// Bank sizes in bits; defaults to the base configuration's.
        #[arg(long)]
        bank_bits: Option<String>,
        /// Feature-map buffer sizes in bits; defaults to the base configuration's.
        #[arg(long)]
        fm_bits: Option<String>,
    },
}

/// Inputs and outputs of one command; identical manifests give identical outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub options: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            inputs: BTreeMap::new(),
            options: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), path.display().to_string());
    }

    fn option(&mut self, key: &str, value: impl ToString) {
        self.options.insert(key.into(), value.to_string());
    }
}

/// Parses `a..b` (inclusive; empty when `b < a`), a single value or a comma list.
pub fn parse_range(s: &str) -> Result<Vec<u64>, String> {
    let num = |t: &str| {
        t.trim()
            .replace('_', "")
            .parse::<u64>()
            .map_err(|_| format!("`{t}` is not a non-negative integer"))
    };
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        return Ok((a..=b).collect());
    }
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(num).collect()
}

struct Out {
    dir: PathBuf,
    written: Vec<String>,
}

impl Out {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| fail(Some(dir), e.into()))?;
        Ok(Out {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| fail(Some(&p), e.into()))
    }

    fn binary(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<fs::File>) -> dscsim_core::Result<()>,
    ) -> CliResult<()> {
        let p = self.path(name);
        let file = fs::File::create(&p).map_err(|e| fail(Some(&p), e.into()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(|e| fail(Some(&p), e))?;
        w.flush().map_err(|e| fail(Some(&p), e.into()))
    }

    fn finish(mut self, mut manifest: RunManifest) -> CliResult<()> {
        manifest.outputs = std::mem::take(&mut self.written);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let p = self.dir.join("manifest.json");
        fs::write(&p, json + "\n").map_err(|e| fail(Some(&p), e.into()))
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| fail(Some(path), e.into()))
}

fn load_net(path: &Path) -> CliResult<NetworkSpec> {
    parse_network(&read_text(path)?).map_err(|e| fail(Some(path), e))
}

fn load_config(path: &Path) -> CliResult<AcceleratorConfig> {
    AcceleratorConfig::from_toml(&read_text(path)?).map_err(|e| fail(Some(path), e))
}

fn load_bundle(path: &Path) -> CliResult<QNetworkWeights> {
    let file = fs::File::open(path).map_err(|e| fail(Some(path), e.into()))?;
    read_bundle(&mut BufReader::new(file)).map_err(|e| fail(Some(path), e))
}

fn load_tensor(path: &Path) -> CliResult<TensorFile> {
    let file = fs::File::open(path).map_err(|e| fail(Some(path), e.into()))?;
    read_tensor(&mut BufReader::new(file)).map_err(|e| fail(Some(path), e))
}

/// The input at the bundle's input scale; a fixed-point file must already use it.
fn quantized_input(t: TensorFile, w: &QNetworkWeights, path: &Path) -> CliResult<QTensor> {
    match t {
        TensorFile::Real(t) => Ok(quantize(&t, w.input, &mut OpStats::default())),
        TensorFile::Fixed(q) if q.params == w.input => Ok(q),
        TensorFile::Fixed(q) => Err(fail(
            Some(path),
            Error::Shape(format!(
                "input has {} fraction bits but the weights expect {}",
                q.params.frac_bits(),
                w.input.frac_bits()
            )),
        )),
    }
}

fn real_input(t: TensorFile) -> Tensor {
    match t {
        TensorFile::Real(t) => t,
        TensorFile::Fixed(q) => dequantize(&q),
    }
}

pub fn cost_text(net: &NetworkSpec) -> dscsim_core::Result<String> {
    let c = network_cost(net)?;
    let mut s = String::new();
    let _ = writeln!(s, "network = {}", net.name);
    let _ = writeln!(s, "layers = {}", net.layers.len());
    let _ = writeln!(s, "total_weights = {}", c.total_weights);
    let _ = writeln!(s, "conv_macs = {}", c.conv_macs);
    let _ = writeln!(s, "pool_macs = {}", c.pool_macs);
    let _ = writeln!(s, "total_macs = {}", c.total_macs);
    let _ = writeln!(s, "total_ops = {}", c.total_ops());
    let _ = writeln!(s, "residual_adds = {}", c.residual_adds);
    let _ = writeln!(
        s,
        "\n{:>5} {:<7} {:>12} {:>12} {:>9} {:>11}",
        "layer", "kind", "input", "output", "weights", "macs"
    );
    for (l, spec) in c.layers.iter().zip(&net.layers) {
        let _ = writeln!(
            s,
            "{:>5} {:<7} {:>12} {:>12} {:>9} {:>11}",
            l.index,
            l.kind.to_string(),
            spec.input.to_string(),
            spec.output().to_string(),
            l.weights,
            l.macs
        );
    }
    let _ = writeln!(
        s,
        "\n{:>3} {:>3} {:>11} {:>16} {:>11} {:>14} {:>14} {:>9}",
        "dw", "pw", "weights_dsc", "weights_standard", "ops_dsc", "ops_standard", "factor", "factor_f"
    );
    for p in &c.dsc_pairs {
        let _ = writeln!(
            s,
            "{:>3} {:>3} {:>11} {:>16} {:>11} {:>14} {:>14} {:>9.6}",
            p.depthwise,
            p.pointwise,
            p.weights_dsc,
            p.weights_standard,
            p.ops_dsc,
            p.ops_standard,
            p.ops_factor.to_string(),
            *p.ops_factor.numer() as f64 / *p.ops_factor.denom() as f64
        );
    }
    Ok(s)
}

fn write_report(out: &mut Out, report: &PerformanceReport) -> CliResult<String> {
    let text = report.to_text();
    out.text("report.txt", &text)?;
    out.text("layers.csv", &report.to_csv())?;
    Ok(text)
}

/// Runs one parsed command, printing its summary to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let mut out = Out::new(&cli.out)?;
    let print =
        |stdout: &mut dyn Write, text: &str| stdout.write_all(text.as_bytes()).map_err(|e| fail(None, e.into()));
    match &cli.command {
        Command::Cost { net } => {
            let mut m = RunManifest::new("cost");
            m.input("net", net);
            let spec = load_net(net)?;
            let text = cost_text(&spec).map_err(|e| fail(Some(net), e))?;
            out.text("cost.txt", &text)?;
            print(stdout, &text)?;
            out.finish(m)
        }
        Command::Gen {
            kind,
            seed,
            net,
            shape,
            name,
        } => {
            let mut m = RunManifest::new("gen");
            m.seed = Some(*seed);
            m.option(
                "kind",
                kind.to_possible_value().expect("every kind has a name").get_name(),
            );
            match kind {
                GenKind::ToyNet => {
                    let file = name.as_deref().unwrap_or("toy.net");
                    out.text(file, TOY_NET)?;
                }
                GenKind::RandomWeights => {
                    let path = net.as_ref().ok_or_else(|| usage("random-weights needs --net"))?;
                    m.input("net", path);
                    let spec = load_net(path)?;
                    let w = generate_weights(&spec, *seed).map_err(|e| fail(None, e))?;
                    let calib = random_input(spec.input_shape, seed.wrapping_add(1));
                    let q = quantize_weights(&spec, &w, &calib).map_err(|e| fail(None, e))?;
                    out.binary(name.as_deref().unwrap_or("weights.dscb"), |f| write_bundle(f, &q))?;
                }
                GenKind::TestTensor => {
                    let shape = match net {
                        Some(path) => {
                            m.input("net", path);
                            load_net(path)?.input_shape
                        }
                        None => {
                            m.option("shape", shape);
                            parse_shape(shape)?
                        }
                    };
                    let t = random_input(shape, *seed);
                    out.binary(name.as_deref().unwrap_or("tensor.dsct"), |f| write_tensor(f, &t))?;
                }
            }
            let _ = writeln!(stdout, "wrote {}", out.written.join(", "));
            out.finish(m)
        }
        Command::Run {
            net,
            weights,
            input,
            real,
            dump_activations,
            ..
        } => {
            let mut m = RunManifest::new("run");
            m.input("net", net);
            m.input("weights", weights);
            m.input("input", input);
            m.option("arithmetic", if *real { "real" } else { "quantized" });
            m.option("dump_activations", dump_activations);
            let spec = load_net(net)?;
            let w = load_bundle(weights)?;
            w.check(&spec).map_err(|e| fail(Some(weights), e))?;
            let x = load_tensor(input)?;
            if *real {
                let r = run_network(&spec, &w.dequantize(), &real_input(x), *dump_activations)
                    .map_err(|e| fail(None, e))?;
                out.binary("output.dsct", |f| write_tensor(f, &r.output))?;
                for (i, a) in r.activations.iter().enumerate() {
                    out.binary(&format!("layer_{i:03}.dsct"), |f| write_tensor(f, a))?;
                }
                let _ = writeln!(stdout, "output {} ({} MACs)", r.output.shape, r.stats.macs);
            } else {
                let qx = quantized_input(x, &w, input)?;
                let r = run_network_q(&spec, &w, &qx, *dump_activations).map_err(|e| fail(None, e))?;
                out.binary("output.dsct", |f| write_qtensor(f, &r.output))?;
                for (i, a) in r.activations.iter().enumerate() {
                    out.binary(&format!("layer_{i:03}.dsct"), |f| write_qtensor(f, a))?;
                }
                let _ = writeln!(
                    stdout,
                    "output {} ({} MACs, {} saturations)",
                    r.output.shape, r.stats.macs, r.stats.saturations
                );
            }
            out.finish(m)
        }
        Command::Simulate {
            net,
            config,
            weights,
            input,
        } => {
            let mut m = RunManifest::new("simulate");
            m.input("net", net);
            m.input("config", config);
            let spec = load_net(net)?;
            let cfg = load_config(config)?;
            let report = match (weights, input) {
                (Some(wp), Some(ip)) => {
                    m.input("weights", wp);
                    m.input("input", ip);
                    let w = load_bundle(wp)?;
                    w.check(&spec).map_err(|e| fail(Some(wp), e))?;
                    let qx = quantized_input(load_tensor(ip)?, &w, ip)?;
                    let sim = simulate_network(&spec, &w, &qx, &cfg).map_err(|e| fail(None, e))?;
                    out.binary("output.dsct", |f| write_qtensor(f, &sim.output))?;
                    sim.report
                }
                _ => estimate_network(&spec, &cfg).map_err(|e| fail(None, e))?,
            };
            let text = write_report(&mut out, &report)?;
            print(stdout, &text)?;
            out.finish(m)
        }
        Command::Explore {
            net,
            device,
            config,
            mmes,
            bank_bits,
            fm_bits,
        } => {
            let mut m = RunManifest::new("explore");
            m.input("net", net);
            m.input("device", device);
            m.option("mmes", mmes);
            let spec = load_net(net)?;
            let dev = DeviceSpec::from_toml(&read_text(device)?).map_err(|e| fail(Some(device), e))?;
            let base = match config {
                Some(p) => {
                    m.input("config", p);
                    load_config(p)?
                }
                None => AcceleratorConfig::reference(),
            };
            let list = |s: &Option<String>, default: u64, key: &str, m: &mut RunManifest| -> CliResult<Vec<u64>> {
                match s {
                    Some(s) => {
                        m.option(key, s);
                        parse_range(s).map_err(usage)
                    }
                    None => Ok(vec![default]),
                }
            };
            let ranges = ExploreRanges {
                num_mmes: parse_range(mmes)
                    .map_err(usage)?
                    .into_iter()
                    .map(|v| v as usize)
                    .collect(),
                bank_bits: list(bank_bits, base.weight_buffer.bank_bits, "bank_bits", &mut m)?,
                feature_map_bits: list(fm_bits, base.feature_map.capacity_bits, "fm_bits", &mut m)?,
            };
            if ranges.num_mmes.contains(&0) {
                return Err(usage("MME counts start at 1"));
            }
            let ex = explore(&spec, &dev, &base, &ResourceModel::calibrated(), &ranges).map_err(|e| fail(None, e))?;
            let csv = ex.to_csv();
            let summary = ex.front_summary();
            out.text("design.csv", &csv)?;
            out.text("pareto.txt", &summary)?;
            print(stdout, &csv)?;
            print(stdout, &summary)?;
            out.finish(m)
        }
    }
}

fn parse_shape(s: &str) -> CliResult<TensorShape> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().map_err(|_| usage(format!("bad shape `{s}`, expected HxWxC"))))
        .collect::<CliResult<_>>()?;
    match dims[..] {
        [h, w, c] => TensorShape::new(h, w, c).map_err(|e| usage(e.to_string())),
        _ => Err(usage(format!("bad shape `{s}`, expected HxWxC"))),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
