//! Cost model of a folded dataflow accelerator.
//!
//! Every dense layer is one pipeline stage with `pe` processing elements
//! each consuming `simd` inputs per cycle. Stages run concurrently, so the
//! slowest one sets the initiation interval.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config_name;
use crate::streamline::{accumulator_bits, input_code_range, IntegerNetwork, LayerOutput};

pub const BITS_PER_BRAM18: u64 = 18 * 1024;
pub const INPUT_BYTES_PER_IMAGE: u64 = 1024;
pub const DEFAULT_CLOCK_MHZ: f64 = 100.0;
pub const DEFAULT_FIFO_DEPTH: usize = 2;

pub const DEFAULT_LOGIC_COST: &str = include_str!("../configs/logic_cost.toml");
pub const BOARD_PRESETS: &str = include_str!("../configs/boards.toml");

/// Shape and widths of one dense stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub in_features: usize,
    pub out_features: usize,
    pub w_bits: u8,
    /// Width of the layer input codes.
    pub in_bits: u8,
    /// Activation width of the thresholds after this layer, if any.
    pub act_bits: Option<u8>,
    pub acc_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub name: String,
    pub a_bits: u8,
    pub w_bits: u8,
    pub layers: Vec<LayerDims>,
}

impl NetworkDims {
    pub fn from_integer(inet: &IntegerNetwork) -> Self {
        let layers = inet
            .layers
            .iter()
            .map(|l| {
                // 255 for pixels, 2^a - 1 for activations.
                let in_bits = (32 - (l.input_range.1 as u32).leading_zeros()) as u8;
                LayerDims {
                    in_features: l.in_features,
                    out_features: l.out_features,
                    w_bits: l.weight_bits,
                    in_bits,
                    act_bits: match l.output {
                        LayerOutput::Thresholds { bits, .. } => Some(bits),
                        LayerOutput::Affine { .. } => None,
                    },
                    acc_bits: l.acc_bits,
                }
            })
            .collect();
        Self {
            name: inet.name.clone(),
            a_bits: inet.a_bits,
            w_bits: inet.w_bits,
            layers,
        }
    }

    /// The MLP topology without a trained network behind it.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, a_bits: u8, w_bits: u8) -> Result<Self> {
        if !(1..=8).contains(&a_bits) || !(2..=8).contains(&w_bits) {
            return Err(Error::arg(format!("unsupported widths A{a_bits}W{w_bits}")));
        }
        let widths: Vec<usize> = std::iter::once(inputs)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        if widths.contains(&0) {
            return Err(Error::arg("layer widths must be positive"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let first = i == 0;
                let range = input_code_range(if first { None } else { Some(a_bits) });
                LayerDims {
                    in_features: w[0],
                    out_features: w[1],
                    w_bits,
                    in_bits: if first { 8 } else { a_bits },
                    act_bits: (i + 1 < widths.len() - 1).then_some(a_bits),
                    acc_bits: accumulator_bits(w[0], w_bits, range),
                }
            })
            .collect();
        Ok(Self {
            name: config_name(a_bits, w_bits),
            a_bits,
            w_bits,
            layers,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFold {
    pub pe: usize,
    pub simd: usize,
    pub fifo_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldingConfig {
    pub layers: Vec<LayerFold>,
    pub clock_mhz: f64,
    /// Multiplier on the ideal throughput, in `(0, 1]`.
    pub efficiency: f64,
}

impl FoldingConfig {
    /// Same `pe`/`simd` for every layer, clamped to each layer's width.
    /// Fails only when a value exceeds the width of every layer.
    pub fn uniform(dims: &NetworkDims, pe: usize, simd: usize) -> Result<Self> {
        if pe == 0 || simd == 0 {
            return Err(Error::arg("pe and simd must be at least 1"));
        }
        let max_out = dims.layers.iter().map(|l| l.out_features).max().unwrap_or(0);
        let max_in = dims.layers.iter().map(|l| l.in_features).max().unwrap_or(0);
        if pe > max_out {
            return Err(Error::arg(format!("pe {pe} exceeds every layer's output width (max {max_out})")));
        }
        if simd > max_in {
            return Err(Error::arg(format!("simd {simd} exceeds every layer's input width (max {max_in})")));
        }
        Ok(Self {
            layers: dims
                .layers
                .iter()
                .map(|l| LayerFold {
                    pe: pe.min(l.out_features),
                    simd: simd.min(l.in_features),
                    fifo_depth: DEFAULT_FIFO_DEPTH,
                })
                .collect(),
            clock_mhz: DEFAULT_CLOCK_MHZ,
            efficiency: 1.0,
        })
    }

    pub fn with_clock(mut self, clock_mhz: f64) -> Self {
        self.clock_mhz = clock_mhz;
        self
    }

    pub fn with_efficiency(mut self, efficiency: f64) -> Self {
        self.efficiency = efficiency;
        self
    }

    pub fn validate(&self, dims: &NetworkDims) -> Result<()> {
        if self.layers.len() != dims.layers.len() {
            return Err(Error::arg(format!(
                "folding has {} entries for {} layers",
                self.layers.len(),
                dims.layers.len()
            )));
        }
        for (i, (f, l)) in self.layers.iter().zip(&dims.layers).enumerate() {
            if f.pe == 0 || f.pe > l.out_features || f.simd == 0 || f.simd > l.in_features || f.fifo_depth == 0 {
                return Err(Error::arg(format!(
                    "layer {i}: pe {} / simd {} / fifo {} invalid for {}x{}",
                    f.pe, f.simd, f.fifo_depth, l.out_features, l.in_features
                )));
            }
        }
        if !(self.clock_mhz > 0.0 && self.clock_mhz.is_finite()) {
            return Err(Error::arg("clock must be positive"));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::arg("efficiency must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardBudget {
    #[serde(default)]
    pub name: String,
    pub luts: u64,
    pub flip_flops: u64,
    pub bram18: u64,
    pub bram_bytes: u64,
}

impl BoardBudget {
    pub fn pynq_z1() -> Self {
        Self::preset("pynq-z1").expect("built-in preset")
    }

    /// Built-in preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_presets(BOARD_PRESETS, name)
    }

    /// Looks up `name` in a presets file (one TOML table per board).
    pub fn from_presets(text: &str, name: &str) -> Result<Self> {
        let all = parse_presets(text)?;
        all.into_iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Config(format!("unknown board `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.luts == 0 || self.flip_flops == 0 || self.bram18 == 0 || self.bram_bytes == 0 {
            return Err(Error::Config(format!("board `{}`: all budgets must be positive", self.name)));
        }
        Ok(())
    }
}

pub fn parse_presets(text: &str) -> Result<Vec<BoardBudget>> {
    let table: BTreeMap<String, BoardBudget> =
        toml::from_str(text).map_err(|e| Error::Config(format!("board presets: {e}")))?;
    table
        .into_iter()
        .map(|(name, mut b)| {
            b.name = name;
            b.validate()?;
            Ok(b)
        })
        .collect()
}

/// Constants of the linear logic estimate; see `configs/logic_cost.toml`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogicCostModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub f0: f64,
    pub f1: f64,
}

impl Default for LogicCostModel {
    fn default() -> Self {
        Self::from_toml(DEFAULT_LOGIC_COST).expect("built-in cost model")
    }
}

impl LogicCostModel {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("logic cost model: {e}")))?;
        if [m.c0, m.c1, m.c2, m.f0, m.f1].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("logic cost constants must be finite and nonnegative".into()));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

pub fn layer_cycles(out_f: usize, in_f: usize, pe: usize, simd: usize) -> Result<u64> {
    if pe == 0 || simd == 0 || pe > out_f || simd > in_f {
        return Err(Error::arg(format!("pe {pe} / simd {simd} do not fold a {out_f}x{in_f} layer")));
    }
    Ok((out_f.div_ceil(pe) * in_f.div_ceil(simd)) as u64)
}

pub fn initiation_interval(dims: &NetworkDims, folding: &FoldingConfig) -> Result<u64> {
    folding.validate(dims)?;
    dims.layers
        .iter()
        .zip(&folding.layers)
        .map(|(l, f)| layer_cycles(l.out_features, l.in_features, f.pe, f.simd))
        .try_fold(0, |m, c| c.map(|c| m.max(c)))
}

/// Images per second.
pub fn throughput(dims: &NetworkDims, folding: &FoldingConfig) -> Result<f64> {
    let ii = initiation_interval(dims, folding)?;
    Ok(folding.clock_mhz * 1e6 * folding.efficiency / ii as f64)
}

/// Bytes per second streamed in from DRAM.
pub fn dram_in_bandwidth(throughput: f64, input_bytes_per_image: u64) -> f64 {
    throughput * input_bytes_per_image as f64
}

pub fn threshold_memory_bits(channels: usize, a_bits: u8, acc_bits: u32) -> u64 {
    channels as u64 * ((1u64 << a_bits) - 1) * u64::from(acc_bits)
}

pub fn weight_memory_bits(out_f: usize, in_f: usize, w_bits: u8) -> Result<u64> {
    if out_f == 0 || in_f == 0 {
        return Err(Error::arg("layer without features"));
    }
    Ok(out_f as u64 * in_f as u64 * u64::from(w_bits))
}

pub fn bram18_count(total_bits: u64) -> u64 {
    total_bits.div_ceil(BITS_PER_BRAM18)
}

/// LUT and FF estimate of one stage.
pub fn logic_estimate(model: &LogicCostModel, layer: &LayerDims, fold: &LayerFold) -> (u64, u64) {
    let macs = (fold.pe * fold.simd) as f64;
    let (w, x) = (f64::from(layer.w_bits), f64::from(layer.in_bits));
    let comparators = layer
        .act_bits
        .map_or(0.0, |a| model.c2 * ((1u64 << a) - 1) as f64 * fold.pe as f64);
    let luts = macs * (model.c0 + model.c1 * w * x) + comparators;
    let ffs = macs * (model.f0 + model.f1 * (w + x + f64::from(layer.acc_bits)));
    (luts.ceil() as u64, ffs.ceil() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub pe: usize,
    pub simd: usize,
    pub cycles: u64,
    pub weight_bits: u64,
    pub threshold_bits: u64,
    pub bram18: u64,
    pub luts: u64,
    pub ffs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub name: String,
    pub abits: u8,
    pub wbits: u8,
    /// Folding of the first layer, the usual label of a configuration.
    pub pe: usize,
    pub simd: usize,
    pub board: String,
    pub layers: Vec<LayerReport>,
    /// Sum of stage cycles: latency of one image through the pipeline.
    pub cycles_per_image: u64,
    pub ii_cycles: u64,
    pub img_per_s: f64,
    pub dram_in_bytes_per_s: f64,
    pub weight_bits: u64,
    pub threshold_bits: u64,
    pub bram18: u64,
    pub luts: u64,
    pub ffs: u64,
    pub fits: bool,
}

pub const CSV_HEADER: &str = "name,abits,wbits,pe,simd,ii_cycles,img_per_s,dram_MB_s,luts,ffs,bram18,fits";

impl ResourceReport {
    pub fn dram_mb_s(&self) -> f64 {
        self.dram_in_bytes_per_s / 1e6
    }

    pub fn csv_row(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(HardwareRow::from(self)).expect("row serializes");
        let bytes = w.into_inner().expect("in-memory writer");
        String::from_utf8(bytes).expect("utf-8").trim_end().to_string()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One line of the hardware CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareRow {
    pub name: String,
    pub abits: u8,
    pub wbits: u8,
    pub pe: usize,
    pub simd: usize,
    pub ii_cycles: u64,
    pub img_per_s: f64,
    #[serde(rename = "dram_MB_s")]
    pub dram_mb_s: f64,
    pub luts: u64,
    pub ffs: u64,
    pub bram18: u64,
    pub fits: bool,
}

impl From<&ResourceReport> for HardwareRow {
    fn from(r: &ResourceReport) -> Self {
        Self {
            name: r.name.clone(),
            abits: r.abits,
            wbits: r.wbits,
            pe: r.pe,
            simd: r.simd,
            ii_cycles: r.ii_cycles,
            img_per_s: r.img_per_s,
            dram_mb_s: r.dram_mb_s(),
            luts: r.luts,
            ffs: r.ffs,
            bram18: r.bram18,
            fits: r.fits,
        }
    }
}

pub fn simulate_dims(
    dims: &NetworkDims,
    folding: &FoldingConfig,
    budget: &BoardBudget,
    cost: &LogicCostModel,
) -> Result<ResourceReport> {
    folding.validate(dims)?;
    budget.validate()?;
    let mut layers = Vec::with_capacity(dims.layers.len());
    for (l, f) in dims.layers.iter().zip(&folding.layers) {
        let cycles = layer_cycles(l.out_features, l.in_features, f.pe, f.simd)?;
        let weight_bits = weight_memory_bits(l.out_features, l.in_features, l.w_bits)?;
        let threshold_bits = l
            .act_bits
            .map_or(0, |a| threshold_memory_bits(l.out_features, a, l.acc_bits));
        let (luts, ffs) = logic_estimate(cost, l, f);
        layers.push(LayerReport {
            pe: f.pe,
            simd: f.simd,
            cycles,
            weight_bits,
            threshold_bits,
            bram18: bram18_count(weight_bits) + bram18_count(threshold_bits),
            luts,
            ffs,
        });
    }
    let ii_cycles = layers.iter().map(|l| l.cycles).max().unwrap_or(1);
    let img_per_s = folding.clock_mhz * 1e6 * folding.efficiency / ii_cycles as f64;
    let sum = |f: fn(&LayerReport) -> u64| layers.iter().map(f).sum::<u64>();
    let (weight_bits, threshold_bits) = (sum(|l| l.weight_bits), sum(|l| l.threshold_bits));
    let (bram18, luts, ffs) = (sum(|l| l.bram18), sum(|l| l.luts), sum(|l| l.ffs));
    let fits = luts <= budget.luts
        && ffs <= budget.flip_flops
        && bram18 <= budget.bram18
        && (weight_bits + threshold_bits).div_ceil(8) <= budget.bram_bytes;
    Ok(ResourceReport {
        name: dims.name.clone(),
        abits: dims.a_bits,
        wbits: dims.w_bits,
        pe: folding.layers.first().map_or(0, |f| f.pe),
        simd: folding.layers.first().map_or(0, |f| f.simd),
        board: budget.name.clone(),
        cycles_per_image: sum(|l| l.cycles),
        ii_cycles,
        img_per_s,
        dram_in_bytes_per_s: dram_in_bandwidth(img_per_s, INPUT_BYTES_PER_IMAGE),
        weight_bits,
        threshold_bits,
        bram18,
        luts,
        ffs,
        fits,
        layers,
    })
}

pub fn simulate(
    inet: &IntegerNetwork,
    folding: &FoldingConfig,
    budget: &BoardBudget,
    cost: &LogicCostModel,
) -> Result<ResourceReport> {
    simulate_dims(&NetworkDims::from_integer(inet), folding, budget, cost)
}
