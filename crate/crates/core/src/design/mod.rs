//! Linear resource model, device gating and Pareto fronts over configurations.
//!
//! The resource model is calibrated to one synthesized design point and
//! scales linearly; it is a model, not a synthesis result.

use std::fmt::Write as _;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::scheduler::{estimate_network, AcceleratorConfig, PerformanceReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub alms: u64,
    pub m20k_blocks: u64,
    pub dsp_blocks: u64,
}

impl DeviceSpec {
    pub fn arria10() -> Self {
        DeviceSpec {
            name: "Arria 10 SoC 10AS066N3F40E2SG".into(),
            alms: 251_680,
            m20k_blocks: 2131,
            dsp_blocks: 1687,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alms == 0 || self.m20k_blocks == 0 || self.dsp_blocks == 0 {
            return Err(Error::invalid("device resources must all be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let dev: DeviceSpec = toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        dev.validate().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        Ok(dev)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("device serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Resources {
    pub alms: u64,
    pub dsps: u64,
    pub m20k: u64,
}

impl std::ops::Add for Resources {
    type Output = Resources;
    fn add(self, o: Resources) -> Resources {
        Resources {
            alms: self.alms + o.alms,
            dsps: self.dsps + o.dsps,
            m20k: self.m20k + o.m20k,
        }
    }
}

/// Per-unit costs as exact rationals; each table row is rounded up on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceModel {
    pub mme_alms: Ratio<u64>,
    pub mme_dsps: Ratio<u64>,
    pub mme_m20k: Ratio<u64>,
    /// ALMs per bit of total weight-buffer capacity.
    pub weight_buffer_alms_per_bit: Ratio<u64>,
    pub feature_map_alms_per_bit: Ratio<u64>,
    pub feature_map_m20k_per_bit: Ratio<u64>,
    pub other: Resources,
}

impl ResourceModel {
    /// Calibrated so the four-MME, 2 x 18,432-bit, 25,690,112-bit design
    /// reproduces the reference totals: 81,753 ALM, 1,278 DSP, 1,844 M20K.
    pub fn calibrated() -> Self {
        const FM_BITS: u64 = 25_690_112;
        ResourceModel {
            mme_alms: Ratio::new(66_127, 4),
            mme_dsps: Ratio::new(1278, 4),
            mme_m20k: Ratio::new(51, 4),
            weight_buffer_alms_per_bit: Ratio::new(9317, 36_864),
            feature_map_alms_per_bit: Ratio::new(1, FM_BITS),
            feature_map_m20k_per_bit: Ratio::new(1779, FM_BITS),
            other: Resources {
                alms: 6308,
                dsps: 0,
                m20k: 14,
            },
        }
    }
}

impl Default for ResourceModel {
    fn default() -> Self {
        Self::calibrated()
    }
}

fn scaled(unit: Ratio<u64>, count: u64) -> u64 {
    (unit * count).ceil().to_integer()
}

/// MME rows scale with `num_mmes`, buffer rows with their configured bits.
pub fn resources_for(cfg: &AcceleratorConfig, model: &ResourceModel) -> Result<Resources> {
    cfg.validate()?;
    let m = cfg.num_mmes as u64;
    let wb_bits = cfg.weight_buffer.total_bits();
    let fm_bits = cfg.feature_map.capacity_bits;
    let mme = Resources {
        alms: scaled(model.mme_alms, m),
        dsps: scaled(model.mme_dsps, m),
        m20k: scaled(model.mme_m20k, m),
    };
    let weight_buffer = Resources {
        alms: scaled(model.weight_buffer_alms_per_bit, wb_bits),
        ..Default::default()
    };
    let feature_map = Resources {
        alms: scaled(model.feature_map_alms_per_bit, fm_bits),
        dsps: 0,
        m20k: scaled(model.feature_map_m20k_per_bit, fm_bits),
    };
    Ok(mme + weight_buffer + feature_map + model.other)
}

/// Values swept by `explore`; every combination is one design point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExploreRanges {
    pub num_mmes: Vec<usize>,
    pub bank_bits: Vec<u64>,
    pub feature_map_bits: Vec<u64>,
}

impl ExploreRanges {
    /// MME counts over `mmes`; buffers fixed at `base`.
    pub fn mmes(mmes: impl IntoIterator<Item = usize>, base: &AcceleratorConfig) -> Self {
        ExploreRanges {
            num_mmes: mmes.into_iter().collect(),
            bank_bits: vec![base.weight_buffer.bank_bits],
            feature_map_bits: vec![base.feature_map.capacity_bits],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.num_mmes.is_empty() || self.bank_bits.is_empty() || self.feature_map_bits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub config: AcceleratorConfig,
    pub resources: Resources,
    /// `None` when the network cannot be scheduled on this configuration.
    pub performance: Option<PerformanceReport>,
    /// Violated constraints; empty exactly when the point is feasible.
    pub violations: Vec<String>,
    pub feasible: bool,
}

impl DesignPoint {
    fn key(&self) -> (usize, u64, u64) {
        (
            self.config.num_mmes,
            self.config.weight_buffer.bank_bits,
            self.config.feature_map.capacity_bits,
        )
    }

    /// `a` dominates `b`: no worse in fps, DSP and M20K, better in one.
    pub fn dominates(&self, other: &DesignPoint) -> bool {
        let (Some(a), Some(b)) = (&self.performance, &other.performance) else {
            return false;
        };
        let (fa, fb) = (a.fps_ratio(), b.fps_ratio());
        let (ra, rb) = (self.resources, other.resources);
        fa >= fb && ra.dsps <= rb.dsps && ra.m20k <= rb.m20k && (fa > fb || ra.dsps < rb.dsps || ra.m20k < rb.m20k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exploration {
    /// Sorted by (MMEs, bank bits, feature-map bits).
    pub points: Vec<DesignPoint>,
    /// Indices into `points` of the feasible, non-dominated points.
    pub front: Vec<usize>,
}

fn evaluate(
    net: &NetworkSpec,
    device: &DeviceSpec,
    model: &ResourceModel,
    config: AcceleratorConfig,
) -> Result<DesignPoint> {
    let resources = resources_for(&config, model)?;
    let mut violations = Vec::new();
    for (name, used, limit) in [
        ("alm", resources.alms, device.alms),
        ("dsp", resources.dsps, device.dsp_blocks),
        ("m20k", resources.m20k, device.m20k_blocks),
    ] {
        if used > limit {
            violations.push(format!("{name} {used} > {limit}"));
        }
    }
    let performance = match estimate_network(net, &config) {
        Ok(r) => Some(r),
        Err(Error::Infeasible(why)) => {
            violations.push(why.to_string());
            None
        }
        Err(e) => return Err(e),
    };
    Ok(DesignPoint {
        config,
        resources,
        performance,
        feasible: violations.is_empty(),
        violations,
    })
}

/// Evaluates every combination of `ranges` on top of `base` in parallel.
pub fn explore(
    net: &NetworkSpec,
    device: &DeviceSpec,
    base: &AcceleratorConfig,
    model: &ResourceModel,
    ranges: &ExploreRanges,
) -> Result<Exploration> {
    device.validate()?;
    let mut configs = Vec::new();
    for &m in &ranges.num_mmes {
        for &bank in &ranges.bank_bits {
            for &fm in &ranges.feature_map_bits {
                let mut c = *base;
                c.num_mmes = m;
                c.weight_buffer.bank_bits = bank;
                c.feature_map.capacity_bits = fm;
                configs.push(c);
            }
        }
    }
    let mut points = configs
        .into_par_iter()
        .map(|c| evaluate(net, device, model, c))
        .collect::<Result<Vec<_>>>()?;
    points.sort_by_key(DesignPoint::key);
    let front = (0..points.len())
        .filter(|&i| points[i].feasible)
        .filter(|&i| !points.iter().any(|q| q.feasible && q.dominates(&points[i])))
        .collect();
    Ok(Exploration { points, front })
}

impl Exploration {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "num_mmes,bank_bits,feature_map_bits,alms,dsps,m20k,feasible,total_cycles,fps,achieved_gops,utilization,pareto,violations\n",
        );
        for (i, p) in self.points.iter().enumerate() {
            let (cycles, fps, gops, util) = match &p.performance {
                Some(r) => (
                    r.total_cycles.to_string(),
                    format!("{:.3}", r.fps()),
                    format!("{:.3}", r.achieved_gops()),
                    format!("{:.6}", r.utilization()),
                ),
                None => Default::default(),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},\"{}\"",
                p.config.num_mmes,
                p.config.weight_buffer.bank_bits,
                p.config.feature_map.capacity_bits,
                p.resources.alms,
                p.resources.dsps,
                p.resources.m20k,
                p.feasible,
                cycles,
                fps,
                gops,
                util,
                self.front.contains(&i),
                p.violations.join("; ")
            );
        }
        s
    }

    /// One line per front member, highest fps first.
    pub fn front_summary(&self) -> String {
        let mut front = self.front.clone();
        front.sort_by(|&a, &b| {
            let fps = |i: usize| self.points[i].performance.as_ref().map(|r| r.fps_ratio());
            fps(b).cmp(&fps(a)).then(a.cmp(&b))
        });
        let mut s =
            String::from("# pareto front (fps up, dsp down, m20k down); resources are a linear model, not synthesis\n");
        for i in front {
            let p = &self.points[i];
            let fps = p.performance.as_ref().map_or(0.0, |r| r.fps());
            let _ = writeln!(
                s,
                "num_mmes={} bank_bits={} feature_map_bits={} fps={:.3} dsps={} m20k={} alms={}",
                p.config.num_mmes,
                p.config.weight_buffer.bank_bits,
                p.config.feature_map.capacity_bits,
                fps,
                p.resources.dsps,
                p.resources.m20k,
                p.resources.alms
            );
        }
        s
    }
}
