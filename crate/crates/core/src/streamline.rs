//! Compiles a trained [`NetworkSpec`] into an integer-only graph.
//!
//! Each hidden block `Dense -> BatchNorm -> QuantHardTanh` becomes one
//! integer dot product over weight and input codes followed by a per-channel
//! comparison against integer thresholds. Batch-norm, the dense bias and
//! both quantization scales are absorbed into those thresholds. The final
//! dense layer keeps a real output affine so logits stay recoverable.
//!
//! Threshold convention: channel `c` outputs level index
//! `#{ j : T[c][j] <= v }` where `v` is the accumulator, or its negation for
//! channels whose affine scale is negative.

use std::fmt;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{
    accumulator_scale, dense_output, BatchNormParams, Dense, Layer, NetworkSpec, INPUT_CODE_DEN,
};
use crate::numerics::{argmax, Tensor};
use crate::quantizers::{quantize_input, ThresholdSet};

pub const INTEGER_KIND: &str = "integer";

/// Per-channel affine map `x -> a·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineParams {
    pub fn new(scale: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(Error::shape("affine scale and bias lengths differ"));
        }
        Ok(Self { scale, bias })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, c: usize, x: f64) -> f64 {
        self.scale[c] * x + self.bias[c]
    }
}

/// Eval-mode batch-norm as an affine map.
pub fn fold_batchnorm(bn: &BatchNormParams) -> AffineParams {
    let (scale, bias) = (0..bn.channels())
        .map(|c| {
            let a = bn.gamma.data()[c] / (bn.running_var.data()[c] + bn.eps).sqrt();
            (a, bn.beta.data()[c] - a * bn.running_mean.data()[c])
        })
        .unzip();
    AffineParams { scale, bias }
}

/// Real-valued thresholds of one channel.
///
/// With `negated == false` the level index of `x` is `#{ j : t[j] < x }`;
/// with `negated == true` it is `#{ j : t[j] < -x }`. Thresholds are
/// nondecreasing either way.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelThresholds {
    pub negated: bool,
    pub thresholds: Vec<f64>,
}

impl ChannelThresholds {
    pub fn level_index(&self, x: f64) -> usize {
        let v = if self.negated { -x } else { x };
        self.thresholds.partition_point(|&t| t < v)
    }
}

/// Moves the affine of channel `c` from the input of `ts` onto its
/// thresholds, so `level_index(x)` equals `ts.level_index(a·x + b)`.
pub fn push_affine_into_thresholds(aff: &AffineParams, ts: &ThresholdSet, c: usize) -> Result<ChannelThresholds> {
    let (a, b) = (aff.scale[c], aff.bias[c]);
    if a == 0.0 {
        return Err(Error::DegenerateChannel { layer: 0, channel: c });
    }
    let negated = a < 0.0;
    let thresholds = ts
        .thresholds()
        .iter()
        .map(|&t| {
            let t = (t - b) / a;
            if negated {
                -t
            } else {
                t
            }
        })
        .collect();
    Ok(ChannelThresholds { negated, thresholds })
}

/// Integer thresholds of one channel in accumulator units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntThresholds {
    pub negated: bool,
    pub values: Vec<i32>,
}

impl IntThresholds {
    pub fn level_index(&self, acc: i64) -> usize {
        let v = if self.negated { -acc } else { acc };
        self.values.partition_point(|&t| i64::from(t) <= v)
    }
}

/// Real thresholds divided by the accumulator unit `s_w·s_x`.
///
/// `T = floor(t / (s_w·s_x)) + 1`, so `acc >= T` exactly when
/// `acc·s_w·s_x > t`. Values outside `acc_range` (widened by one at the top)
/// are clamped; the returned indices name the clamped thresholds.
pub fn integerize_thresholds(
    real: &ChannelThresholds,
    s_w: f64,
    s_x: f64,
    acc_range: (i64, i64),
) -> (IntThresholds, Vec<usize>) {
    let unit = s_w * s_x;
    let (lo, hi) = acc_range;
    let mut saturated = Vec::new();
    let values = real
        .thresholds
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let est = (t / unit).floor() + 1.0;
            if !(est >= lo as f64 && est <= (hi + 1) as f64) {
                saturated.push(j);
            }
            clamp_to(est, lo, hi + 1) as i32
        })
        .collect();
    (
        IntThresholds {
            negated: real.negated,
            values,
        },
        saturated,
    )
}

fn clamp_to(v: f64, lo: i64, hi: i64) -> i64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo as f64, hi as f64) as i64
    }
}

/// Smallest `v` in `[lo, hi + 1]` with `t < f(v)`, `f` nondecreasing and
/// `f(hi + 1)` read as `+inf`. `guess` is tried first.
fn first_exceeding(f: impl Fn(i64) -> f64, t: f64, guess: i64, lo: i64, hi: i64) -> i64 {
    let fires = |v: i64| v > hi || t < f(v);
    let g = guess.clamp(lo, hi + 1);
    if fires(g) && (g == lo || !fires(g - 1)) {
        return g;
    }
    let (mut a, mut b) = (lo, hi + 1);
    while a < b {
        let m = a + (b - a) / 2;
        if fires(m) {
            b = m;
        } else {
            a = m + 1;
        }
    }
    a
}

/// Bits of a two's-complement register holding `[-m, m]`.
pub fn signed_bits(max_abs: i64) -> u32 {
    (64 - (max_abs as u64).leading_zeros()) + 1
}

/// Worst-case accumulator bound for `in_features` inputs with codes in
/// `input_range` and `w_bits` signed weight codes.
pub fn accumulator_bound(in_features: usize, w_bits: u8, input_range: (i32, i32)) -> i64 {
    let qmax = (1i64 << (w_bits - 1)) - 1;
    let m = i64::from(input_range.0.unsigned_abs().max(input_range.1.unsigned_abs()));
    in_features as i64 * qmax * m
}

pub fn accumulator_bits(in_features: usize, w_bits: u8, input_range: (i32, i32)) -> u32 {
    signed_bits(accumulator_bound(in_features, w_bits, input_range))
}

/// Input code range of the first layer and of a layer fed by `a`-bit
/// activations.
pub fn input_code_range(a_bits: Option<u8>) -> (i32, i32) {
    match a_bits {
        None => (0, 255),
        Some(a) => {
            let n = (1i32 << a) - 1;
            (-n, n)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOutput {
    /// Level indices; the next layer sees codes `2i - (2^bits - 1)`.
    Thresholds { bits: u8, channels: Vec<IntThresholds> },
    /// `logit = scale·acc + bias[c]`.
    Affine { scale: f64, bias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegerLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight_bits: u8,
    /// `in_features × out_features` signed codes.
    pub weights: Vec<i32>,
    /// Inclusive code range of the layer input.
    pub input_range: (i32, i32),
    /// Inclusive worst-case accumulator range.
    pub acc_range: (i64, i64),
    pub acc_bits: u32,
    pub output: LayerOutput,
}

impl IntegerLayer {
    pub fn accumulate(&self, codes: &[i32]) -> Vec<i64> {
        let mut acc = vec![0i64; self.out_features];
        for (i, &x) in codes.iter().enumerate() {
            if x == 0 {
                continue;
            }
            let row = &self.weights[i * self.out_features..(i + 1) * self.out_features];
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += i64::from(x) * i64::from(w);
            }
        }
        acc
    }
}

/// Clamped threshold, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaturationRecord {
    pub layer: usize,
    pub channel: usize,
    pub threshold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegerNetwork {
    pub name: String,
    pub a_bits: u8,
    pub w_bits: u8,
    pub input_features: usize,
    pub layers: Vec<IntegerLayer>,
    pub saturations: Vec<SaturationRecord>,
}

/// Integer inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerOutput {
    pub logits: Tensor,
    /// One `n × features` block per thresholded layer.
    pub levels: Vec<Vec<u16>>,
}

impl IntegerNetwork {
    pub fn output_features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_features)
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.output, LayerOutput::Thresholds { .. }))
            .count()
    }

    /// Logits and level indices for one image of 8-bit input codes.
    pub fn infer_one(&self, input: &[u8]) -> (Vec<f64>, Vec<Vec<u16>>) {
        let mut codes: Vec<i32> = input.iter().map(|&b| i32::from(b)).collect();
        let mut levels = Vec::new();
        for layer in &self.layers {
            let acc = layer.accumulate(&codes);
            match &layer.output {
                LayerOutput::Thresholds { bits, channels } => {
                    let n = (1i32 << bits) - 1;
                    let idx: Vec<u16> = acc
                        .iter()
                        .zip(channels)
                        .map(|(&a, ch)| ch.level_index(a) as u16)
                        .collect();
                    codes = idx.iter().map(|&i| 2 * i32::from(i) - n).collect();
                    levels.push(idx);
                }
                LayerOutput::Affine { scale, bias } => {
                    let logits = acc
                        .iter()
                        .zip(bias)
                        .map(|(&a, &b)| dense_output(a as f64, *scale, b))
                        .collect();
                    return (logits, levels);
                }
            }
        }
        (Vec::new(), levels)
    }

    /// Inference over `n × input_features` 8-bit codes.
    pub fn infer_codes(&self, codes: &[u8]) -> Result<IntegerOutput> {
        let f = self.input_features;
        if !codes.len().is_multiple_of(f) {
            return Err(Error::shape(format!("{} codes is not a multiple of {f}", codes.len())));
        }
        let n = codes.len() / f;
        let per: Vec<(Vec<f64>, Vec<Vec<u16>>)> = codes.par_chunks(f).map(|x| self.infer_one(x)).collect();
        let classes = self.output_features();
        let mut logits = Vec::with_capacity(n * classes);
        let mut levels: Vec<Vec<u16>> = vec![Vec::new(); self.hidden_layers()];
        for (l, lv) in per {
            logits.extend(l);
            for (dst, src) in levels.iter_mut().zip(lv) {
                dst.extend(src);
            }
        }
        Ok(IntegerOutput {
            logits: Tensor::matrix(n, classes, logits)?,
            levels,
        })
    }

    /// Inference on pixel intensities in `[0, 1]`.
    pub fn infer(&self, batch: &Tensor) -> Result<IntegerOutput> {
        if batch.shape().len() != 2 || batch.cols() != self.input_features {
            return Err(Error::shape(format!(
                "expected a batch of {} features, got shape {:?}",
                self.input_features,
                batch.shape()
            )));
        }
        let codes: Vec<u8> = batch.data().iter().map(|&v| quantize_input(v)).collect();
        self.infer_codes(&codes)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let out = self.infer(batch)?;
        (0..out.logits.rows()).map(|r| argmax(out.logits.row(r))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("integer network has no layers"));
        }
        let mut width = self.input_features;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_features != width || l.weights.len() != l.in_features * l.out_features {
                return Err(Error::shape(format!("integer layer {i}: dimensions")));
            }
            let last = i + 1 == self.layers.len();
            match &l.output {
                LayerOutput::Thresholds { bits, channels } => {
                    if last || channels.len() != l.out_features {
                        return Err(Error::arg(format!("integer layer {i}: threshold layout")));
                    }
                    let steps = (1usize << bits) - 1;
                    for (c, ch) in channels.iter().enumerate() {
                        if ch.values.len() != steps || ch.values.windows(2).any(|w| w[0] > w[1]) {
                            return Err(Error::arg(format!(
                                "integer layer {i} channel {c}: thresholds must be {steps} nondecreasing values"
                            )));
                        }
                    }
                }
                LayerOutput::Affine { bias, .. } => {
                    if !last || bias.len() != l.out_features {
                        return Err(Error::arg(format!("integer layer {i}: output affine layout")));
                    }
                }
            }
            width = l.out_features;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(INTEGER_KIND);
        c.set("integer", "true");
        c.set("name", &self.name);
        c.set("abits", self.a_bits);
        c.set("wbits", self.w_bits);
        c.set("input_features", self.input_features);
        c.set("layers", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            c.set(
                format!("layer.{i}"),
                format!(
                    "{} {} {} {} {} {} {} {} {}",
                    l.in_features,
                    l.out_features,
                    l.weight_bits,
                    l.acc_bits,
                    l.input_range.0,
                    l.input_range.1,
                    l.acc_range.0,
                    l.acc_range.1,
                    match &l.output {
                        LayerOutput::Thresholds { bits, .. } => format!("thresholds {bits}"),
                        LayerOutput::Affine { .. } => "affine".to_string(),
                    }
                ),
            );
            c.push_i32(format!("{i}.weights"), &[l.in_features, l.out_features], l.weights.clone());
            match &l.output {
                LayerOutput::Thresholds { channels, .. } => {
                    let steps = channels.first().map_or(0, |ch| ch.values.len());
                    let values = channels.iter().flat_map(|ch| ch.values.iter().copied()).collect();
                    c.push_i32(format!("{i}.thresholds"), &[channels.len(), steps], values);
                    let neg = channels.iter().map(|ch| i32::from(ch.negated)).collect();
                    c.push_i32(format!("{i}.negated"), &[channels.len()], neg);
                }
                LayerOutput::Affine { scale, bias } => {
                    c.push_f64(format!("{i}.out_scale"), &[1], vec![*scale]);
                    c.push_f64(format!("{i}.out_bias"), &[bias.len()], bias.clone());
                }
            }
        }
        let sat: Vec<i32> = self
            .saturations
            .iter()
            .flat_map(|s| [s.layer as i32, s.channel as i32, s.threshold as i32])
            .collect();
        c.push_i32("saturations", &[self.saturations.len(), 3], sat);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind() != INTEGER_KIND || c.get("integer") != Some("true") {
            return Err(c.malformed("not an integer network"));
        }
        let count: usize = c.parse_key("layers")?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let desc = c.require(&format!("layer.{i}"))?;
            let f: Vec<&str> = desc.split_whitespace().collect();
            if f.len() < 9 {
                return Err(c.malformed(format!("layer {i}: descriptor `{desc}`")));
            }
            let num = |k: usize| -> Result<i64> {
                f[k].parse().map_err(|_| c.malformed(format!("layer {i}: field `{}`", f[k])))
            };
            let (in_f, out_f) = (num(0)? as usize, num(1)? as usize);
            let (_, weights) = c.i32(&format!("{i}.weights"))?;
            let output = match f[8] {
                "thresholds" => {
                    let bits: u8 = f
                        .get(9)
                        .and_then(|b| b.parse().ok())
                        .ok_or_else(|| c.malformed(format!("layer {i}: threshold bits")))?;
                    let (shape, values) = c.i32(&format!("{i}.thresholds"))?;
                    let (_, neg) = c.i32(&format!("{i}.negated"))?;
                    let steps = shape.get(1).copied().unwrap_or(0);
                    if steps == 0 || neg.len() * steps != values.len() {
                        return Err(c.malformed(format!("layer {i}: threshold tensor shape")));
                    }
                    let channels = values
                        .chunks(steps)
                        .zip(neg)
                        .map(|(v, &n)| IntThresholds {
                            negated: n != 0,
                            values: v.to_vec(),
                        })
                        .collect();
                    LayerOutput::Thresholds { bits, channels }
                }
                "affine" => LayerOutput::Affine {
                    scale: c.f64(&format!("{i}.out_scale"))?.1.first().copied().unwrap_or(1.0),
                    bias: c.f64(&format!("{i}.out_bias"))?.1.to_vec(),
                },
                other => return Err(c.malformed(format!("layer {i}: output kind `{other}`"))),
            };
            layers.push(IntegerLayer {
                in_features: in_f,
                out_features: out_f,
                weight_bits: num(2)? as u8,
                weights: weights.to_vec(),
                acc_bits: num(3)? as u32,
                input_range: (num(4)? as i32, num(5)? as i32),
                acc_range: (num(6)?, num(7)?),
                output,
            });
        }
        let saturations = c
            .i32("saturations")?
            .1
            .chunks(3)
            .map(|s| SaturationRecord {
                layer: s[0] as usize,
                channel: s[1] as usize,
                threshold: s[2] as usize,
            })
            .collect();
        let net = Self {
            name: c.require("name")?.to_string(),
            a_bits: c.parse_key("abits")?,
            w_bits: c.parse_key("wbits")?,
            input_features: c.parse_key("input_features")?,
            layers,
            saturations,
        };
        net.validate().map_err(|e| c.malformed(e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// A model file of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Float(NetworkSpec),
    Integer(IntegerNetwork),
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyModel> {
    let c = Container::read(path)?;
    if c.kind() == INTEGER_KIND {
        IntegerNetwork::from_container(&c).map(AnyModel::Integer)
    } else {
        NetworkSpec::read_from(&c).map(AnyModel::Float)
    }
}

/// [`streamline`] for a model of either kind; integer input is rejected.
pub fn streamline_any(model: &AnyModel) -> Result<IntegerNetwork> {
    match model {
        AnyModel::Float(net) => streamline(net),
        AnyModel::Integer(_) => Err(Error::Compile("network is already integer".into())),
    }
}

/// One `Dense [BatchNorm] [QuantActivation]` group of the source network.
struct Block<'a> {
    dense_index: usize,
    dense: &'a Dense,
    bn: Option<&'a BatchNormParams>,
    act: Option<&'a ThresholdSet>,
}

fn blocks(net: &NetworkSpec) -> Result<Vec<Block<'_>>> {
    let pair_error = |i: usize| {
        let prev = if i == 0 { "start" } else { net.layers[i - 1].kind_name() };
        Error::Compile(format!(
            "unsupported layer order: {prev} followed by {} at layer {i}",
            net.layers[i].kind_name()
        ))
    };
    let mut out: Vec<Block<'_>> = Vec::new();
    // What may follow: 0 = input quant, 1 = dense, 2 = bn/act/end, 3 = act, 4 = dropout/dense.
    let mut expect = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        match (layer, expect) {
            (Layer::InputQuant { .. }, 0) => expect = 1,
            (Layer::Dense(d), 1 | 4) => {
                out.push(Block {
                    dense_index: i,
                    dense: d,
                    bn: None,
                    act: None,
                });
                expect = 2;
            }
            (Layer::BatchNorm(bn), 2) => {
                out.last_mut().unwrap().bn = Some(bn);
                expect = 3;
            }
            (Layer::QuantActivation { thresholds, .. }, 2 | 3) => {
                out.last_mut().unwrap().act = Some(thresholds);
                expect = 4;
            }
            (Layer::Dropout { .. }, 4) => {}
            _ => return Err(pair_error(i)),
        }
    }
    if expect != 2 {
        let last = net.layers.len().saturating_sub(1);
        return Err(Error::Compile(format!(
            "network must end with a dense layer, found {} at layer {last}",
            net.layers.get(last).map_or("nothing", |l| l.kind_name())
        )));
    }
    Ok(out)
}

/// Compiles `net` (eval-mode statistics) into an [`IntegerNetwork`].
pub fn streamline(net: &NetworkSpec) -> Result<IntegerNetwork> {
    net.validate()?;
    let blocks = blocks(net)?;
    let mut layers = Vec::with_capacity(blocks.len());
    let mut saturations = Vec::new();
    let mut input_range = input_code_range(None);
    let mut input_den = INPUT_CODE_DEN;

    for (li, block) in blocks.iter().enumerate() {
        let d = block.dense;
        let layer_input = input_range;
        let q = d.quantized_weight();
        let bound = accumulator_bound(d.in_features, d.weight_spec.bits(), input_range);
        let acc_range = (-bound, bound);
        let acc_bits = signed_bits(bound);
        let scale = accumulator_scale(q.scale(), input_den);
        let bias = d.bias.data();

        let output = match block.act {
            None => LayerOutput::Affine {
                scale,
                bias: bias.to_vec(),
            },
            Some(ts) => {
                let bn_aff = match block.bn {
                    Some(bn) => fold_batchnorm(bn),
                    None => AffineParams::new(vec![1.0; d.out_features], vec![0.0; d.out_features])?,
                };
                // Dense bias folded in: v = a·(s·acc) + (a·bias + b).
                let aff = AffineParams::new(
                    bn_aff.scale.clone(),
                    (0..d.out_features).map(|c| bn_aff.apply(c, bias[c])).collect(),
                )?;
                let mut channels = Vec::with_capacity(d.out_features);
                for c in 0..d.out_features {
                    let gamma_zero = block.bn.is_some_and(|bn| bn.gamma.data()[c] == 0.0);
                    if gamma_zero || aff.scale[c] == 0.0 {
                        return Err(Error::DegenerateChannel {
                            layer: block.dense_index,
                            channel: c,
                        });
                    }
                    let real = push_affine_into_thresholds(&aff, ts, c)?;
                    let (estimate, clamped) = integerize_thresholds(&real, q.scale(), 1.0 / input_den, acc_range);
                    // The reference forward evaluates exactly this expression;
                    // it is monotone in `acc`, so a search pins the cut point.
                    let f = |acc: i64| {
                        let y = dense_output(acc as f64, scale, bias[c]);
                        block.bn.map_or(y, |bn| bn.eval(c, y))
                    };
                    let values = ts
                        .thresholds()
                        .iter()
                        .zip(&estimate.values)
                        .map(|(&t, &guess)| {
                            let v = if real.negated {
                                first_exceeding(|m| f(-m), t, i64::from(guess), -bound, bound)
                            } else {
                                first_exceeding(f, t, i64::from(guess), -bound, bound)
                            };
                            v as i32
                        })
                        .collect();
                    saturations.extend(clamped.into_iter().map(|j| SaturationRecord {
                        layer: li,
                        channel: c,
                        threshold: j,
                    }));
                    channels.push(IntThresholds {
                        negated: real.negated,
                        values,
                    });
                }
                input_range = input_code_range(Some(ts.bits()));
                input_den = f64::from(ts.steps());
                LayerOutput::Thresholds {
                    bits: ts.bits(),
                    channels,
                }
            }
        };
        layers.push(IntegerLayer {
            in_features: d.in_features,
            out_features: d.out_features,
            weight_bits: d.weight_spec.bits(),
            weights: q.codes().to_vec(),
            input_range: layer_input,
            acc_range,
            acc_bits,
            output,
        });
    }
    if !saturations.is_empty() {
        warn!(
            "{}: {} thresholds saturated at the accumulator range",
            net.name,
            saturations.len()
        );
    }
    let inet = IntegerNetwork {
        name: net.name.clone(),
        a_bits: net.a_bits,
        w_bits: net.w_bits,
        input_features: net.input_features(),
        layers,
        saturations,
    };
    inet.validate()?;
    Ok(inet)
}

/// One disagreement between the reference and integer paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mismatch {
    Level {
        input: usize,
        layer: usize,
        channel: usize,
        reference: u16,
        integer: u16,
    },
    Argmax {
        input: usize,
        reference: usize,
        integer: usize,
    },
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mismatch::Level {
                input,
                layer,
                channel,
                reference,
                integer,
            } => write!(
                f,
                "input {input}: layer {layer} channel {channel}: level {integer}, expected {reference}"
            ),
            Mismatch::Argmax {
                input,
                reference,
                integer,
            } => write!(f, "input {input}: argmax {integer}, expected {reference}"),
        }
    }
}

/// Outcome of [`verify_equivalence`]. For each failing input only the
/// first differing layer is listed, with every differing channel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EquivalenceReport {
    pub inputs: usize,
    pub mismatches: Vec<Mismatch>,
}

impl EquivalenceReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn failing_inputs(&self) -> usize {
        let mut ids: Vec<usize> = self
            .mismatches
            .iter()
            .map(|m| match m {
                Mismatch::Level { input, .. } | Mismatch::Argmax { input, .. } => *input,
            })
            .collect();
        ids.dedup();
        ids.len()
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} inputs checked, {} mismatching",
            self.inputs,
            self.failing_inputs()
        )
    }
}

/// Compares hidden level indices and output argmax of both paths over
/// `n × input_features` 8-bit input codes.
pub fn verify_equivalence(net: &NetworkSpec, inet: &IntegerNetwork, codes: &[u8]) -> Result<EquivalenceReport> {
    let f = inet.input_features;
    if f != net.input_features() || inet.output_features() != net.output_features() {
        return Err(Error::arg("networks have different input or output widths"));
    }
    if !codes.len().is_multiple_of(f) {
        return Err(Error::shape(format!("{} codes is not a multiple of {f}", codes.len())));
    }
    let widths: Vec<usize> = inet.layers.iter().map(|l| l.out_features).collect();
    let mut report = EquivalenceReport {
        inputs: codes.len() / f,
        mismatches: Vec::new(),
    };
    const CHUNK: usize = 2000;
    for (k, chunk) in codes.chunks(CHUNK * f).enumerate() {
        let n = chunk.len() / f;
        let pixels = Tensor::matrix(n, f, chunk.iter().map(|&b| f64::from(b) / INPUT_CODE_DEN).collect())?;
        let reference = net.forward_trace(&pixels)?;
        let integer = inet.infer_codes(chunk)?;
        if reference.levels.len() != integer.levels.len() {
            return Err(Error::arg("networks have different numbers of hidden layers"));
        }
        for i in 0..n {
            let input = k * CHUNK + i;
            let mut found = false;
            for (layer, (r, q)) in reference.levels.iter().zip(&integer.levels).enumerate() {
                let w = widths[layer];
                for c in 0..w {
                    let (rv, qv) = (r[i * w + c], q[i * w + c]);
                    if rv != qv {
                        found = true;
                        report.mismatches.push(Mismatch::Level {
                            input,
                            layer,
                            channel: c,
                            reference: rv,
                            integer: qv,
                        });
                    }
                }
                if found {
                    break;
                }
            }
            if !found {
                let (ra, qa) = (argmax(reference.logits.row(i))?, argmax(integer.logits.row(i))?);
                if ra != qa {
                    report.mismatches.push(Mismatch::Argmax {
                        input,
                        reference: ra,
                        integer: qa,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp_with, MlpShape};
    use crate::numerics::Rng;
    use crate::quantizers::hardtanh_thresholds;

    fn toy_shape() -> MlpShape {
        MlpShape {
            inputs: 4,
            hidden: vec![3],
            classes: 2,
            dropout_p: 0.2,
        }
    }

    /// Random eval statistics; roughly half the scales negative when asked.
    fn randomize(net: &mut NetworkSpec, rng: &mut Rng, negative: bool) {
        for layer in &mut net.layers {
            match layer {
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    let mut g = rng.uniform_vec(0.3, 3.0, c).unwrap();
                    if negative {
                        g.iter_mut().for_each(|v| {
                            if rng.next_f64() < 0.5 {
                                *v = -*v
                            }
                        });
                    }
                    bn.gamma = Tensor::vector(g).unwrap();
                    bn.beta = Tensor::vector(rng.uniform_vec(-0.5, 0.5, c).unwrap()).unwrap();
                    bn.running_mean = Tensor::vector(rng.uniform_vec(-0.5, 0.5, c).unwrap()).unwrap();
                    bn.running_var = Tensor::vector(rng.uniform_vec(0.01, 0.5, c).unwrap()).unwrap();
                }
                Layer::Dense(d) => {
                    let n = d.bias.len();
                    d.bias = Tensor::vector(rng.uniform_vec(-0.3, 0.3, n).unwrap()).unwrap();
                }
                _ => {}
            }
        }
    }

    fn bn(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> BatchNormParams {
        let mut p = BatchNormParams::identity(1).unwrap();
        p.gamma = Tensor::vector(vec![gamma]).unwrap();
        p.beta = Tensor::vector(vec![beta]).unwrap();
        p.running_mean = Tensor::vector(vec![mean]).unwrap();
        p.running_var = Tensor::vector(vec![var]).unwrap();
        p.eps = eps;
        p
    }

    #[test]
    fn fold_examples() {
        let a = fold_batchnorm(&bn(1.0, 0.0, 0.0, 1.0, 0.0));
        assert_eq!((a.scale[0], a.bias[0]), (1.0, 0.0));
        let a = fold_batchnorm(&bn(2.0, 3.0, 1.0, 4.0, 0.0));
        assert_eq!((a.scale[0], a.bias[0]), (1.0, 2.0));
    }

    #[test]
    fn fold_matches_eval_batchnorm() {
        let mut rng = Rng::new(3);
        let mut p = BatchNormParams::identity(16).unwrap();
        p.gamma = Tensor::vector(rng.uniform_vec(-2.0, 2.0, 16).unwrap()).unwrap();
        p.beta = Tensor::vector(rng.uniform_vec(-1.0, 1.0, 16).unwrap()).unwrap();
        p.running_mean = Tensor::vector(rng.uniform_vec(-1.0, 1.0, 16).unwrap()).unwrap();
        p.running_var = Tensor::vector(rng.uniform_vec(0.1, 2.0, 16).unwrap()).unwrap();
        let aff = fold_batchnorm(&p);
        for _ in 0..1000 {
            let c = rng.below(16);
            let x = rng.next_f64() * 20.0 - 10.0;
            let direct = p.gamma.data()[c] * (x - p.running_mean.data()[c])
                / (p.running_var.data()[c] + p.eps).sqrt()
                + p.beta.data()[c];
            assert!((aff.apply(c, x) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn push_examples() {
        let ts = hardtanh_thresholds(2).unwrap();
        let id = AffineParams::new(vec![1.0], vec![0.0]).unwrap();
        let r = push_affine_into_thresholds(&id, &ts, 0).unwrap();
        assert_eq!(r.thresholds, ts.thresholds());
        assert!(!r.negated);
        let two = AffineParams::new(vec![2.0], vec![0.0]).unwrap();
        let r = push_affine_into_thresholds(&two, &ts, 0).unwrap();
        assert_eq!(r.thresholds, [-1.0 / 3.0, 0.0, 1.0 / 3.0]);
        let zero = AffineParams::new(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(
            push_affine_into_thresholds(&zero, &ts, 0),
            Err(Error::DegenerateChannel { .. })
        ));
    }

    #[test]
    fn push_composes_for_both_signs() {
        let mut rng = Rng::new(5);
        for bits in 1..=4 {
            let ts = hardtanh_thresholds(bits).unwrap();
            for sign in [1.0, -1.0] {
                let a = sign * (0.1 + 3.0 * rng.next_f64());
                let b = rng.next_f64() - 0.5;
                let aff = AffineParams::new(vec![a], vec![b]).unwrap();
                let r = push_affine_into_thresholds(&aff, &ts, 0).unwrap();
                assert!(r.thresholds.windows(2).all(|w| w[0] <= w[1]));
                for _ in 0..10_000 {
                    let x = rng.next_f64() * 4.0 - 2.0;
                    assert_eq!(r.level_index(x), ts.level_index(a * x + b), "a={a} b={b} x={x}");
                }
            }
        }
    }

    #[test]
    fn integerize_examples() {
        let real = |t: f64| ChannelThresholds {
            negated: false,
            thresholds: vec![t],
        };
        let (t, _) = integerize_thresholds(&real(0.75), 0.5, 1.0, (-100, 100));
        assert_eq!(t.values, [2]);
        assert_eq!(t.level_index(1), 0);
        assert_eq!(t.level_index(2), 1);
        // A threshold at zero: accumulator 0 does not exceed it, 1 does.
        let (t, _) = integerize_thresholds(&real(0.0), 0.5, 1.0, (-100, 100));
        assert_eq!(t.level_index(0), 0);
        assert_eq!(t.level_index(1), 1);
        let (t, sat) = integerize_thresholds(&real(1e9), 1.0, 1.0, (-10, 10));
        assert_eq!((t.values[0], sat), (11, vec![0]));
        let (t, sat) = integerize_thresholds(&real(-1e9), 1.0, 1.0, (-10, 10));
        assert_eq!((t.values[0], sat), (-10, vec![0]));
    }

    #[test]
    fn integerize_matches_real_compare_everywhere() {
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            // Dyadic unit so exact hits stay exact in floating point.
            let unit = (1 + rng.below(64)) as f64 / 64.0;
            let negated = rng.next_f64() < 0.5;
            let mut thresholds = rng.uniform_vec(-50.0, 50.0, 7).unwrap();
            thresholds.sort_by(f64::total_cmp);
            // Include exact hits on the accumulator grid.
            thresholds[3] = (thresholds[3] / unit).round() * unit;
            let real = ChannelThresholds { negated, thresholds };
            let (int, _) = integerize_thresholds(&real, unit, 1.0, (-200, 200));
            for acc in -200i64..=200 {
                let x = acc as f64 * unit;
                assert_eq!(int.level_index(acc), real.level_index(x));
            }
        }
    }

    #[test]
    fn accumulator_width_covers_first_layer() {
        for w in 2..=8u8 {
            for inputs in [4usize, 5, 784, 1000, 1024] {
                let bits = accumulator_bits(inputs, w, input_code_range(None));
                let need = (inputs as f64).log2().ceil() as u32 + u32::from(w - 1) + 8;
                assert!(bits >= need, "in={inputs} w={w}: {bits} < {need}");
                let bound = accumulator_bound(inputs, w, input_code_range(None));
                assert!(bound <= (1i64 << (bits - 1)) - 1);
            }
        }
        assert_eq!(accumulator_bits(1024, 2, (0, 255)), 19);
    }

    #[test]
    fn exhaustive_toy_accumulators() {
        let mut rng = Rng::new(11);
        for seed in 0..10 {
            let mut net = build_mlp_with(&toy_shape(), 2, 2, seed).unwrap();
            randomize(&mut net, &mut rng, true);
            let inet = streamline(&net).unwrap();
            let (Layer::Dense(d), Layer::BatchNorm(bn), Layer::QuantActivation { thresholds, .. }) =
                (&net.layers[1], &net.layers[2], &net.layers[3])
            else {
                panic!("toy layout");
            };
            let scale = accumulator_scale(d.quantized_weight().scale(), INPUT_CODE_DEN);
            let layer = &inet.layers[0];
            let LayerOutput::Thresholds { channels, .. } = &layer.output else {
                panic!("hidden layer")
            };
            for (c, ch) in channels.iter().enumerate() {
                for acc in layer.acc_range.0..=layer.acc_range.1 {
                    let real = bn.eval(c, dense_output(acc as f64, scale, d.bias.data()[c]));
                    assert_eq!(ch.level_index(acc), thresholds.level_index(real), "channel {c} acc {acc}");
                }
            }
        }
    }

    fn random_codes(rng: &mut Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.below(256) as u8).collect()
    }

    #[test]
    fn toy_equivalence_on_random_inputs() {
        let mut rng = Rng::new(12);
        for (a, w) in [(2, 2), (3, 5), (8, 8)] {
            let mut net = build_mlp_with(&toy_shape(), a, w, 40 + u64::from(a)).unwrap();
            randomize(&mut net, &mut rng, true);
            let inet = streamline(&net).unwrap();
            let codes = random_codes(&mut rng, 80_000);
            let report = verify_equivalence(&net, &inet, &codes).unwrap();
            assert!(report.is_ok(), "A{a}W{w}: {report} {:?}", report.mismatches.first());
            assert_eq!(report.inputs, 20_000);
            // Logits agree bit for bit.
            let pixels = Tensor::matrix(20_000, 4, codes.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
            assert_eq!(inet.infer(&pixels).unwrap().logits, net.forward_eval(&pixels).unwrap());
        }
    }

    #[test]
    fn negative_scale_channels() {
        let mut net = build_mlp_with(&toy_shape(), 2, 2, 3).unwrap();
        randomize(&mut net, &mut Rng::new(1), false);
        if let Layer::BatchNorm(bn) = &mut net.layers[2] {
            bn.gamma = Tensor::vector(vec![-1.5, 0.7, -0.2]).unwrap();
        }
        let inet = streamline(&net).unwrap();
        let LayerOutput::Thresholds { channels, .. } = &inet.layers[0].output else {
            panic!()
        };
        assert_eq!(
            channels.iter().map(|c| c.negated).collect::<Vec<_>>(),
            [true, false, true]
        );
        assert!(channels.iter().all(|c| c.values.windows(2).all(|w| w[0] <= w[1])));
        let codes = random_codes(&mut Rng::new(2), 40_000);
        assert!(verify_equivalence(&net, &inet, &codes).unwrap().is_ok());
    }

    #[test]
    fn fault_injection_is_pinpointed() {
        let mut rng = Rng::new(21);
        let mut net = build_mlp_with(&toy_shape(), 2, 2, 9).unwrap();
        randomize(&mut net, &mut rng, true);
        let mut inet = streamline(&net).unwrap();
        let codes = random_codes(&mut rng, 40_000);
        let accs: Vec<Vec<i64>> = codes
            .chunks(4)
            .map(|x| inet.layers[0].accumulate(&x.iter().map(|&b| i32::from(b)).collect::<Vec<_>>()))
            .collect();

        // Threshold hit exactly by the most inputs.
        let LayerOutput::Thresholds { channels, .. } = &inet.layers[0].output else {
            panic!()
        };
        let mut best = (0, 0, 0);
        for (c, ch) in channels.iter().enumerate() {
            for (j, &t) in ch.values.iter().enumerate() {
                let hits = accs
                    .iter()
                    .filter(|a| (if ch.negated { -a[c] } else { a[c] }) == i64::from(t))
                    .count();
                if hits > best.2 {
                    best = (c, j, hits);
                }
            }
        }
        let (c, j, hits) = best;
        assert!(hits > 0, "no input lands on a threshold");
        let negated = channels[c].negated;
        let t = i64::from(channels[c].values[j]);
        if let LayerOutput::Thresholds { channels, .. } = &mut inet.layers[0].output {
            channels[c].values[j] += 1;
        }
        let report = verify_equivalence(&net, &inet, &codes).unwrap();
        let expected: Vec<usize> = accs
            .iter()
            .enumerate()
            .filter(|(_, a)| (if negated { -a[c] } else { a[c] }) == t)
            .map(|(i, _)| i)
            .collect();
        let got: Vec<usize> = report
            .mismatches
            .iter()
            .map(|m| match m {
                Mismatch::Level {
                    input, layer, channel, ..
                } => {
                    assert_eq!((*layer, *channel), (0, c));
                    *input
                }
                Mismatch::Argmax { .. } => panic!("expected a level mismatch: {m}"),
            })
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_inputs_give_empty_report() {
        let net = build_mlp_with(&toy_shape(), 2, 2, 1).unwrap();
        let inet = streamline(&net).unwrap();
        let report = verify_equivalence(&net, &inet, &[]).unwrap();
        assert!(report.is_ok());
        assert_eq!(report.inputs, 0);
    }

    #[test]
    fn zero_gamma_is_degenerate() {
        let mut net = build_mlp_with(&toy_shape(), 2, 2, 1).unwrap();
        if let Layer::BatchNorm(bn) = &mut net.layers[2] {
            bn.gamma = Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap();
        }
        assert!(matches!(
            streamline(&net),
            Err(Error::DegenerateChannel { channel: 1, .. })
        ));
    }

    #[test]
    fn already_integer_is_rejected() {
        let net = build_mlp_with(&toy_shape(), 2, 2, 1).unwrap();
        let inet = streamline(&net).unwrap();
        assert!(matches!(
            streamline_any(&AnyModel::Integer(inet)),
            Err(Error::Compile(_))
        ));
    }

    #[test]
    fn unsupported_order_names_the_pair() {
        let mut net = build_mlp_with(&toy_shape(), 2, 2, 1).unwrap();
        net.layers.swap(2, 3);
        let err = streamline(&net).unwrap_err().to_string();
        assert!(err.contains("Dense followed by QuantActivation") || err.contains("QuantActivation followed by BatchNorm"), "{err}");
    }

    #[test]
    fn dropout_is_erased_and_shapes_kept() {
        let net = crate::model::build_mlp(2, 2, &[64, 64], 5).unwrap();
        let inet = streamline(&net).unwrap();
        assert_eq!(inet.layers.len(), 3);
        let dims: Vec<_> = inet.layers.iter().map(|l| (l.in_features, l.out_features)).collect();
        assert_eq!(dims, [(1024, 64), (64, 64), (64, 10)]);
        for l in &inet.layers[..2] {
            let LayerOutput::Thresholds { channels, .. } = &l.output else {
                panic!()
            };
            assert!(channels.iter().all(|c| c.values.len() == 3));
        }
        assert_eq!(inet.layers[1].input_range, (-3, 3));
    }

    #[test]
    fn file_round_trip() {
        let mut net = build_mlp_with(&toy_shape(), 3, 4, 2).unwrap();
        randomize(&mut net, &mut Rng::new(4), true);
        let inet = streamline(&net).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qnni");
        inet.save(&path).unwrap();
        assert_eq!(IntegerNetwork::load(&path).unwrap(), inet);
        assert!(matches!(load_any(&path).unwrap(), AnyModel::Integer(_)));
        assert!(matches!(crate::model::load_model(&path), Err(Error::Compile(_))));
    }
}
