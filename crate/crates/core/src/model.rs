//! The quantized MLP: topology, fake-quantized forward/backward passes and
//! the `.qnn` model file.
//!
//! Layer stack built by [`build_mlp`]:
//!
//! ```text
//! InputQuant(8, unsigned) -> [Dense -> BatchNorm -> QuantHardTanh(a) -> Dropout] x hidden -> Dense(classes)
//! ```
//!
//! Dense weights are stored `in_features × out_features` so a batch
//! `X[n × in]` maps to `X · W + b`.

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::{matmul_raw, Rng, Tensor};
use crate::quantizers::{
    apply_thresholds, dequantize, hardtanh_thresholds, quantize_input, quantize_weights,
    ste_backward, QuantSpec, QuantizedTensor, ThresholdSet,
};

pub const INPUT_FEATURES: usize = 32 * 32;
pub const CLASSES: usize = 10;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_DROPOUT: f64 = 0.2;
pub const INPUT_BITS: u8 = 8;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const MODEL_KIND: &str = "float";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether quantizers round (`Quantized`) or pass values through unchanged.
///
/// Pass-through turns the network into its float counterpart: weights are
/// used as-is, activations become a plain HardTanh and the input is not
/// rounded. Gradients are identical in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Quantized,
    PassThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight_spec: QuantSpec,
    /// `in_features × out_features`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn quantized_weight(&self) -> QuantizedTensor {
        quantize_weights(&self.weight, self.weight_spec.bits())
            .expect("dense weight spec is validated at construction")
    }

    fn effective_weight(&self, quant: QuantMode) -> Tensor {
        match quant {
            QuantMode::Quantized => dequantize(&self.quantized_weight()),
            QuantMode::PassThrough => self.weight.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::filled(vec![channels], 1.0)?,
            beta: Tensor::zeros(vec![channels])?,
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::filled(vec![channels], 1.0)?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [&self.beta, &self.running_mean, &self.running_var]
            .iter()
            .any(|t| t.len() != c)
        {
            return Err(Error::shape("batch-norm parameter lengths differ"));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("negative running variance"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg("batch-norm epsilon must be positive"));
        }
        Ok(())
    }

    /// Eval-mode normalisation of channel `c`.
    pub fn eval(&self, c: usize, x: f64) -> f64 {
        let mean = self.running_mean.data()[c];
        let var = self.running_var.data()[c];
        self.gamma.data()[c] * (x - mean) / (var + self.eps).sqrt() + self.beta.data()[c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    InputQuant { features: usize, spec: QuantSpec },
    Dense(Dense),
    BatchNorm(BatchNormParams),
    QuantActivation { features: usize, thresholds: ThresholdSet },
    Dropout { p: f64 },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::InputQuant { .. } => "InputQuant",
            Layer::Dense(_) => "Dense",
            Layer::BatchNorm(_) => "BatchNorm",
            Layer::QuantActivation { .. } => "QuantActivation",
            Layer::Dropout { .. } => "Dropout",
        }
    }

    fn out_features(&self, input: usize) -> usize {
        match self {
            Layer::Dense(d) => d.out_features,
            _ => input,
        }
    }
}

/// Layer widths of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpShape {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub dropout_p: f64,
}

impl MlpShape {
    pub fn with_hidden(hidden: &[usize]) -> Self {
        Self {
            inputs: INPUT_FEATURES,
            hidden: hidden.to_vec(),
            classes: CLASSES,
            dropout_p: DEFAULT_DROPOUT,
        }
    }
}

impl Default for MlpShape {
    fn default() -> Self {
        Self::with_hidden(&DEFAULT_HIDDEN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub seed: u64,
    pub a_bits: u8,
    pub w_bits: u8,
    pub layers: Vec<Layer>,
}

/// Inputs enter the first layer as `code / 255`.
pub const INPUT_CODE_DEN: f64 = 255.0;

/// Real value of one accumulator unit: weight scale over the input code
/// denominator.
pub fn accumulator_scale(weight_scale: f64, input_den: f64) -> f64 {
    weight_scale / input_den
}

/// Dense output from an exact integer accumulator.
pub fn dense_output(acc: f64, scale: f64, bias: f64) -> f64 {
    acc * scale + bias
}

pub fn config_name(a_bits: u8, w_bits: u8) -> String {
    format!("A{a_bits}W{w_bits}")
}

fn check_bits(a_bits: u8, w_bits: u8) -> Result<()> {
    for (what, b) in [("activation", a_bits), ("weight", w_bits)] {
        if !(2..=8).contains(&b) {
            return Err(Error::arg(format!("{what} bit-width must be within 2..=8, got {b}")));
        }
    }
    Ok(())
}

/// The benchmark MLP: 1024 inputs, `hidden` widths, 10 logits.
pub fn build_mlp(a_bits: u8, w_bits: u8, hidden: &[usize], seed: u64) -> Result<NetworkSpec> {
    build_mlp_with(&MlpShape::with_hidden(hidden), a_bits, w_bits, seed)
}

pub fn build_mlp_with(shape: &MlpShape, a_bits: u8, w_bits: u8, seed: u64) -> Result<NetworkSpec> {
    check_bits(a_bits, w_bits)?;
    if shape.inputs == 0 || shape.classes == 0 || shape.hidden.contains(&0) {
        return Err(Error::arg("layer widths must be positive"));
    }
    if !(0.0..1.0).contains(&shape.dropout_p) {
        return Err(Error::arg(format!("dropout p must be in [0, 1), got {}", shape.dropout_p)));
    }
    let mut rng = Rng::new(seed);
    let weight_spec = QuantSpec::signed(w_bits)?;
    let dense = |rng: &mut Rng, fan_in: usize, fan_out: usize| -> Result<Layer> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::matrix(fan_in, fan_out, rng.uniform_vec(-bound, bound, fan_in * fan_out)?)?;
        let bias = Tensor::vector(rng.uniform_vec(-bound, bound, fan_out)?)?;
        Ok(Layer::Dense(Dense {
            in_features: fan_in,
            out_features: fan_out,
            weight_spec,
            weight,
            bias,
        }))
    };

    let mut layers = vec![Layer::InputQuant {
        features: shape.inputs,
        spec: QuantSpec::unsigned(INPUT_BITS)?,
    }];
    let mut width = shape.inputs;
    for &h in &shape.hidden {
        layers.push(dense(&mut rng, width, h)?);
        layers.push(Layer::BatchNorm(BatchNormParams::identity(h)?));
        layers.push(Layer::QuantActivation {
            features: h,
            thresholds: hardtanh_thresholds(a_bits)?,
        });
        layers.push(Layer::Dropout { p: shape.dropout_p });
        width = h;
    }
    layers.push(dense(&mut rng, width, shape.classes)?);

    let net = NetworkSpec {
        name: config_name(a_bits, w_bits),
        seed,
        a_bits,
        w_bits,
        layers,
    };
    net.validate()?;
    Ok(net)
}

/// Per-layer state recorded by a training forward pass.
#[derive(Debug)]
enum Cache {
    None,
    Dense { input: Tensor, weight: Tensor },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Activation { pre: Vec<f64> },
    Dropout { mask: Vec<f64> },
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Debug)]
pub struct Tape {
    batch: usize,
    caches: Vec<Cache>,
    bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Eval-mode forward result with hidden activation level indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Tensor,
    /// One `n × features` row-major block per activation layer.
    pub levels: Vec<Vec<u16>>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.a_bits, self.w_bits)?;
        if self.name != config_name(self.a_bits, self.w_bits) {
            return Err(Error::arg(format!(
                "name `{}` does not match A{}W{}",
                self.name, self.a_bits, self.w_bits
            )));
        }
        let mut width = match self.layers.first() {
            Some(Layer::InputQuant { features, .. }) => *features,
            _ => return Err(Error::arg("network must start with an InputQuant layer")),
        };
        let mut dense_seen = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::InputQuant { features, spec } => {
                    if i != 0 || *features != width || spec.is_signed() {
                        return Err(Error::arg(format!("unexpected input quantizer at layer {i}")));
                    }
                }
                Layer::Dense(d) => {
                    if d.in_features != width {
                        return Err(Error::shape(format!(
                            "layer {i}: dense expects {} inputs but receives {width}",
                            d.in_features
                        )));
                    }
                    if d.weight.shape() != [d.in_features, d.out_features] || d.bias.len() != d.out_features {
                        return Err(Error::shape(format!("layer {i}: dense parameter shapes")));
                    }
                    if d.weight_spec.bits() != self.w_bits || !d.weight_spec.is_signed() {
                        return Err(Error::arg(format!("layer {i}: weight spec differs from W{}", self.w_bits)));
                    }
                    dense_seen = true;
                }
                Layer::BatchNorm(bn) => {
                    bn.validate()?;
                    if bn.channels() != width {
                        return Err(Error::shape(format!("layer {i}: batch-norm width")));
                    }
                }
                Layer::QuantActivation { features, thresholds } => {
                    if *features != width || thresholds.bits() != self.a_bits {
                        return Err(Error::arg(format!("layer {i}: activation spec")));
                    }
                }
                Layer::Dropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(Error::arg(format!("layer {i}: dropout p {p}")));
                    }
                }
            }
            width = layer.out_features(width);
        }
        if !dense_seen {
            return Err(Error::arg("network has no dense layer"));
        }
        Ok(())
    }

    pub fn input_features(&self) -> usize {
        match self.layers.first() {
            Some(Layer::InputQuant { features, .. }) => *features,
            _ => 0,
        }
    }

    pub fn output_features(&self) -> usize {
        self.layers
            .iter()
            .fold(self.input_features(), |w, l| l.out_features(w))
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }

    /// Sets the drop probability of every dropout layer.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout p must be in [0, 1), got {p}")));
        }
        for layer in &mut self.layers {
            if let Layer::Dropout { p: q } = layer {
                *q = p;
            }
        }
        Ok(())
    }

    /// Trainable parameters in a fixed order with stable names.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push((format!("{i}.weight"), &d.weight));
                    out.push((format!("{i}.bias"), &d.bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{i}.gamma"), &bn.gamma));
                    out.push((format!("{i}.beta"), &bn.beta));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                _ => {}
            }
        }
        out
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.shape().len() != 2 || batch.cols() != self.input_features() {
            return Err(Error::shape(format!(
                "expected a batch of {} features, got shape {:?}",
                self.input_features(),
                batch.shape()
            )));
        }
        Ok(batch.rows())
    }

    /// Shared forward pass. Never mutates `self`; train-mode batch
    /// statistics are returned in the tape.
    fn run(
        &self,
        batch: &Tensor,
        mode: Mode,
        quant: QuantMode,
        mut rng: Option<&mut Rng>,
        keep_tape: bool,
        keep_levels: bool,
    ) -> Result<(Tensor, Option<Tape>, Vec<Vec<u16>>)> {
        let n = self.check_batch(batch)?;
        let mut x: Vec<f64> = batch.data().to_vec();
        let mut width = self.input_features();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        let mut levels = Vec::new();
        // Denominator of the integer grid `x` currently sits on, if any.
        let mut code_den: Option<f64> = None;

        for (li, layer) in self.layers.iter().enumerate() {
            let cache = match layer {
                Layer::InputQuant { .. } => {
                    if quant == QuantMode::Quantized {
                        x.iter_mut()
                            .for_each(|v| *v = f64::from(quantize_input(*v)) / INPUT_CODE_DEN);
                        code_den = Some(INPUT_CODE_DEN);
                    }
                    Cache::None
                }
                Layer::Dense(d) => {
                    let (y, weight) = match (quant, code_den) {
                        (QuantMode::Quantized, Some(den)) => {
                            let q = d.quantized_weight();
                            let codes: Vec<f64> = x.iter().map(|v| (v * den).round()).collect();
                            let qw: Vec<f64> = q.codes().iter().map(|&c| f64::from(c)).collect();
                            let mut y = matmul_raw(&codes, &qw, n, d.in_features, d.out_features);
                            let scale = accumulator_scale(q.scale(), den);
                            for row in y.chunks_mut(d.out_features) {
                                for (v, b) in row.iter_mut().zip(d.bias.data()) {
                                    *v = dense_output(*v, scale, *b);
                                }
                            }
                            (y, if keep_tape { Some(dequantize(&q)) } else { None })
                        }
                        _ => {
                            let weight = d.effective_weight(quant);
                            let mut y = matmul_raw(&x, weight.data(), n, d.in_features, d.out_features);
                            for row in y.chunks_mut(d.out_features) {
                                for (v, b) in row.iter_mut().zip(d.bias.data()) {
                                    *v += b;
                                }
                            }
                            (y, Some(weight))
                        }
                    };
                    code_den = None;
                    let input = std::mem::replace(&mut x, y);
                    if let (true, Some(weight)) = (keep_tape, weight) {
                        Cache::Dense {
                            input: Tensor::matrix(n, d.in_features, input)?,
                            weight,
                        }
                    } else {
                        Cache::None
                    }
                }
                Layer::BatchNorm(bn) => match mode {
                    Mode::Eval => {
                        for row in x.chunks_mut(width) {
                            for (c, v) in row.iter_mut().enumerate() {
                                *v = bn.eval(c, *v);
                            }
                        }
                        Cache::None
                    }
                    Mode::Train => {
                        let mut mean = vec![0.0; width];
                        for row in x.chunks(width) {
                            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                        }
                        mean.iter_mut().for_each(|m| *m /= n as f64);
                        let mut var = vec![0.0; width];
                        for row in x.chunks(width) {
                            for c in 0..width {
                                let d = row[c] - mean[c];
                                var[c] += d * d;
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= n as f64);
                        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                        let mut xhat = vec![0.0; x.len()];
                        for (row, hrow) in x.chunks_mut(width).zip(xhat.chunks_mut(width)) {
                            for c in 0..width {
                                hrow[c] = (row[c] - mean[c]) * inv_std[c];
                                row[c] = bn.gamma.data()[c] * hrow[c] + bn.beta.data()[c];
                            }
                        }
                        let unbiased = if n > 1 {
                            var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
                        } else {
                            var.clone()
                        };
                        bn_stats.push((li, mean, unbiased));
                        Cache::BatchNorm { xhat, inv_std }
                    }
                },
                Layer::QuantActivation { thresholds, .. } => {
                    let pre = if keep_tape { x.clone() } else { Vec::new() };
                    match quant {
                        QuantMode::Quantized => {
                            let mut idx = Vec::with_capacity(if keep_levels { x.len() } else { 0 });
                            for v in x.iter_mut() {
                                let (level, i) = apply_thresholds(*v, thresholds);
                                *v = level;
                                if keep_levels {
                                    idx.push(i as u16);
                                }
                            }
                            if keep_levels {
                                levels.push(idx);
                            }
                            code_den = Some(f64::from(thresholds.steps()));
                        }
                        QuantMode::PassThrough => x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
                    }
                    if keep_tape {
                        Cache::Activation { pre }
                    } else {
                        Cache::None
                    }
                }
                Layer::Dropout { p } => {
                    if mode == Mode::Train && *p > 0.0 {
                        let rng = rng
                            .as_deref_mut()
                            .ok_or_else(|| Error::arg("train-mode dropout needs an rng"))?;
                        let keep = 1.0 / (1.0 - p);
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.next_f64() < *p { 0.0 } else { keep })
                            .collect();
                        x.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        code_den = None;
                        Cache::Dropout { mask }
                    } else {
                        Cache::None
                    }
                }
            };
            caches.push(cache);
            width = layer.out_features(width);
        }

        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward"));
        }
        let logits = Tensor::matrix(n, width, x)?;
        let tape = keep_tape.then_some(Tape {
            batch: n,
            caches,
            bn_stats,
        });
        Ok((logits, tape, levels))
    }

    /// Quantized forward pass. Train mode uses batch statistics, updates the
    /// running statistics and applies dropout drawn from `rng`.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let keep_tape = mode == Mode::Train;
        let (logits, tape, _) = self.run(batch, mode, QuantMode::Quantized, Some(rng), keep_tape, false)?;
        if let Some(tape) = tape {
            self.apply_batch_stats(&tape);
        }
        Ok(logits)
    }

    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.run(batch, Mode::Eval, QuantMode::Quantized, None, false, false)?.0)
    }

    pub fn forward_trace(&self, batch: &Tensor) -> Result<ForwardTrace> {
        let (logits, _, levels) = self.run(batch, Mode::Eval, QuantMode::Quantized, None, false, true)?;
        Ok(ForwardTrace { logits, levels })
    }

    /// Train-mode forward that records a [`Tape`] without touching running
    /// statistics; pair with [`NetworkSpec::backward`] and
    /// [`NetworkSpec::apply_batch_stats`].
    pub fn forward_train(&self, batch: &Tensor, quant: QuantMode, rng: &mut Rng) -> Result<(Tensor, Tape)> {
        let (logits, tape, _) = self.run(batch, Mode::Train, quant, Some(rng), true, false)?;
        Ok((logits, tape.expect("tape requested")))
    }

    pub fn apply_batch_stats(&mut self, tape: &Tape) {
        for (li, mean, var) in &tape.bn_stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[*li] {
                let m = bn.momentum;
                for (r, v) in bn.running_mean.data_mut().iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in bn.running_var.data_mut().iter_mut().zip(var) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }

    /// Gradients of the loss w.r.t. [`NetworkSpec::parameters`], given the
    /// gradient w.r.t. the logits. Weight quantizers pass the gradient
    /// straight through; activations use the clipped straight-through rule.
    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let n = tape.batch;
        let mut g: Vec<f64> = grad_logits.data().to_vec();
        if grad_logits.rows() != n || grad_logits.cols() != self.output_features() {
            return Err(Error::shape("gradient does not match the taped batch"));
        }
        let first_param_layer = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Dense(_) | Layer::BatchNorm(_)))
            .unwrap_or(0);
        let mut grads: Vec<(usize, Vec<Tensor>)> = Vec::new();

        for (li, layer) in self.layers.iter().enumerate().rev() {
            if li < first_param_layer {
                break;
            }
            match (layer, &tape.caches[li]) {
                (Layer::Dense(d), Cache::Dense { input, weight }) => {
                    let (fi, fo) = (d.in_features, d.out_features);
                    let xt = input.transpose()?;
                    let dw = matmul_raw(xt.data(), &g, fi, n, fo);
                    let mut db = vec![0.0; fo];
                    for row in g.chunks(fo) {
                        db.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                    grads.push((li, vec![Tensor::matrix(fi, fo, dw)?, Tensor::vector(db)?]));
                    if li > first_param_layer {
                        let wt = weight.transpose()?;
                        g = matmul_raw(&g, wt.data(), n, fo, fi);
                    }
                }
                (Layer::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std }) => {
                    let c_n = bn.channels();
                    let mut dgamma = vec![0.0; c_n];
                    let mut dbeta = vec![0.0; c_n];
                    let mut sum_dxhat = vec![0.0; c_n];
                    let mut sum_dxhat_xhat = vec![0.0; c_n];
                    for (grow, hrow) in g.chunks(c_n).zip(xhat.chunks(c_n)) {
                        for c in 0..c_n {
                            dgamma[c] += grow[c] * hrow[c];
                            dbeta[c] += grow[c];
                            let dxh = grow[c] * bn.gamma.data()[c];
                            sum_dxhat[c] += dxh;
                            sum_dxhat_xhat[c] += dxh * hrow[c];
                        }
                    }
                    let nf = n as f64;
                    for (grow, hrow) in g.chunks_mut(c_n).zip(xhat.chunks(c_n)) {
                        for c in 0..c_n {
                            let dxh = grow[c] * bn.gamma.data()[c];
                            grow[c] = inv_std[c] / nf * (nf * dxh - sum_dxhat[c] - hrow[c] * sum_dxhat_xhat[c]);
                        }
                    }
                    grads.push((li, vec![Tensor::vector(dgamma)?, Tensor::vector(dbeta)?]));
                }
                (Layer::QuantActivation { .. }, Cache::Activation { pre }) => {
                    g.iter_mut().zip(pre).for_each(|(gv, &x)| *gv = ste_backward(x, *gv));
                }
                (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
                    g.iter_mut().zip(mask).for_each(|(gv, m)| *gv *= m);
                }
                (Layer::Dropout { .. }, Cache::None) | (Layer::InputQuant { .. }, _) => {}
                (layer, _) => {
                    return Err(Error::arg(format!(
                        "tape does not match layer {li} ({})",
                        layer.kind_name()
                    )))
                }
            }
        }
        grads.sort_by_key(|(li, _)| *li);
        Ok(grads.into_iter().flat_map(|(_, g)| g).collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(MODEL_KIND);
        self.write_into(&mut c);
        c
    }

    /// Writes the manifest keys and tensors describing this network.
    pub fn write_into(&self, c: &mut Container) {
        c.set("name", &self.name);
        c.set("seed", self.seed);
        c.set("abits", self.a_bits);
        c.set("wbits", self.w_bits);
        c.set("layers", self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let desc = match layer {
                Layer::InputQuant { features, spec } => {
                    format!("input_quant {features} {} {}", spec.bits(), spec.is_signed())
                }
                Layer::Dense(d) => {
                    c.push_f64(format!("{i}.weight"), d.weight.shape(), d.weight.data().to_vec());
                    c.push_f64(format!("{i}.bias"), d.bias.shape(), d.bias.data().to_vec());
                    format!("dense {} {} {}", d.in_features, d.out_features, d.weight_spec.bits())
                }
                Layer::BatchNorm(bn) => {
                    for (name, t) in [
                        ("gamma", &bn.gamma),
                        ("beta", &bn.beta),
                        ("running_mean", &bn.running_mean),
                        ("running_var", &bn.running_var),
                    ] {
                        c.push_f64(format!("{i}.{name}"), t.shape(), t.data().to_vec());
                    }
                    c.push_f64(format!("{i}.eps_momentum"), &[2], vec![bn.eps, bn.momentum]);
                    format!("batchnorm {}", bn.channels())
                }
                Layer::QuantActivation { features, thresholds } => {
                    format!("hardtanh {features} {}", thresholds.bits())
                }
                Layer::Dropout { p } => {
                    c.push_f64(format!("{i}.p"), &[1], vec![*p]);
                    "dropout".to_string()
                }
            };
            c.set(format!("layer.{i}"), desc);
        }
    }

    /// Reads a network from any container carrying the float-model keys.
    pub fn read_from(c: &Container) -> Result<Self> {
        let count: usize = c.parse_key("layers")?;
        let tensor = |name: String| -> Result<Tensor> {
            let (shape, data) = c.f64(&name)?;
            Tensor::new(shape.to_vec(), data.to_vec()).map_err(|e| c.malformed(format!("{name}: {e}")))
        };
        let w_bits: u8 = c.parse_key("wbits")?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let desc = c.require(&format!("layer.{i}"))?;
            let fields: Vec<&str> = desc.split(' ').collect();
            let num = |k: usize| -> Result<usize> {
                fields
                    .get(k)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| c.malformed(format!("layer {i}: bad descriptor `{desc}`")))
            };
            let layer = match fields[0] {
                "input_quant" => Layer::InputQuant {
                    features: num(1)?,
                    spec: QuantSpec::new(num(2)? as u8, fields.get(3) == Some(&"true"))?,
                },
                "dense" => {
                    let weight = tensor(format!("{i}.weight"))?;
                    let bias = tensor(format!("{i}.bias"))?;
                    Layer::Dense(Dense {
                        in_features: num(1)?,
                        out_features: num(2)?,
                        weight_spec: QuantSpec::signed(num(3)? as u8)?,
                        weight,
                        bias,
                    })
                }
                "batchnorm" => {
                    let em = tensor(format!("{i}.eps_momentum"))?;
                    Layer::BatchNorm(BatchNormParams {
                        gamma: tensor(format!("{i}.gamma"))?,
                        beta: tensor(format!("{i}.beta"))?,
                        running_mean: tensor(format!("{i}.running_mean"))?,
                        running_var: tensor(format!("{i}.running_var"))?,
                        eps: em.data()[0],
                        momentum: em.data()[1],
                    })
                }
                "hardtanh" => Layer::QuantActivation {
                    features: num(1)?,
                    thresholds: hardtanh_thresholds(num(2)? as u8)?,
                },
                "dropout" => Layer::Dropout {
                    p: tensor(format!("{i}.p"))?.data()[0],
                },
                other => return Err(c.malformed(format!("layer {i}: unknown kind `{other}`"))),
            };
            layers.push(layer);
        }
        let net = NetworkSpec {
            name: c.require("name")?.to_string(),
            seed: c.parse_key("seed")?,
            a_bits: c.parse_key("abits")?,
            w_bits,
            layers,
        };
        net.validate().map_err(|e| c.malformed(e.to_string()))?;
        Ok(net)
    }
}

pub fn save_model(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    net.to_container().write(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let c = Container::read(path)?;
    match c.kind() {
        MODEL_KIND | crate::trainer::CHECKPOINT_KIND => NetworkSpec::read_from(&c),
        crate::streamline::INTEGER_KIND => Err(Error::Compile(
            "file holds an integer network that is already streamlined".into(),
        )),
        other => Err(c.malformed(format!("unexpected container kind `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax;

    fn toy(a: u8, w: u8, seed: u64) -> NetworkSpec {
        let shape = MlpShape {
            inputs: 12,
            hidden: vec![6, 5],
            classes: 3,
            dropout_p: 0.2,
        };
        build_mlp_with(&shape, a, w, seed).unwrap()
    }

    #[test]
    fn paper_shapes_and_names() {
        let net = build_mlp(3, 3, &DEFAULT_HIDDEN, 1).unwrap();
        assert_eq!(net.name, "A3W3");
        let shapes: Vec<_> = net.dense_layers().map(|d| (d.in_features, d.out_features)).collect();
        assert_eq!(shapes, [(1024, 64), (64, 64), (64, 10)]);
        assert_eq!(build_mlp(2, 5, &DEFAULT_HIDDEN, 1).unwrap().name, "A2W5");
        assert!(matches!(build_mlp(9, 3, &DEFAULT_HIDDEN, 1), Err(Error::Argument(_))));
        assert!(build_mlp(3, 1, &DEFAULT_HIDDEN, 1).is_err());
    }

    #[test]
    fn layer_order() {
        let net = build_mlp(2, 2, &DEFAULT_HIDDEN, 1).unwrap();
        let kinds: Vec<_> = net.layers.iter().map(Layer::kind_name).collect();
        assert_eq!(
            kinds,
            [
                "InputQuant", "Dense", "BatchNorm", "QuantActivation", "Dropout", "Dense", "BatchNorm",
                "QuantActivation", "Dropout", "Dense"
            ]
        );
    }

    #[test]
    fn init_bounds() {
        let net = build_mlp(4, 4, &DEFAULT_HIDDEN, 5).unwrap();
        for d in net.dense_layers() {
            let bound = 1.0 / (d.in_features as f64).sqrt();
            assert!(d.weight.data().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn zero_batch_eval() {
        let net = build_mlp(2, 2, &DEFAULT_HIDDEN, 3).unwrap();
        let batch = Tensor::zeros(vec![4, INPUT_FEATURES]).unwrap();
        let a = net.forward_eval(&batch).unwrap();
        assert_eq!(a.shape(), &[4, 10]);
        assert_eq!(a, net.forward_eval(&batch).unwrap());
        let mut net2 = net.clone();
        let b = net2.forward(&batch, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(net, net2);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = toy(2, 2, 1);
        assert!(matches!(
            net.forward_eval(&Tensor::zeros(vec![2, 5]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    /// Independent eval path: dequantized weights materialised up front and
    /// activations rounded by explicit nearest-level search.
    fn reference_forward(net: &NetworkSpec, x: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = x.to_vec();
        for layer in &net.layers {
            v = match layer {
                Layer::InputQuant { .. } => v.iter().map(|p| (p * 255.0).round_ties_even() / 255.0).collect(),
                Layer::Dense(d) => {
                    let q = d.quantized_weight();
                    let w: Vec<f64> = q.codes().iter().map(|&c| f64::from(c) * q.scale()).collect();
                    (0..d.out_features)
                        .map(|o| {
                            let mut acc = 0.0;
                            for i in 0..d.in_features {
                                acc += v[i] * w[i * d.out_features + o];
                            }
                            acc + d.bias.data()[o]
                        })
                        .collect()
                }
                Layer::BatchNorm(bn) => v.iter().enumerate().map(|(c, &x)| bn.eval(c, x)).collect(),
                Layer::QuantActivation { thresholds, .. } => v
                    .iter()
                    .map(|&x| {
                        let c = x.clamp(-1.0, 1.0);
                        let mut best = thresholds.levels()[0];
                        for &l in thresholds.levels() {
                            if (l - c).abs() < (best - c).abs() {
                                best = l;
                            }
                        }
                        best
                    })
                    .collect(),
                Layer::Dropout { .. } => v,
            };
        }
        v
    }

    #[test]
    fn eval_forward_matches_reference_path() {
        let mut net = build_mlp(3, 4, &[32, 16], 8).unwrap();
        // Non-trivial statistics so batch-norm matters.
        let mut rng = Rng::new(2);
        for layer in &mut net.layers {
            if let Layer::BatchNorm(bn) = layer {
                let c = bn.channels();
                bn.gamma = Tensor::vector(rng.uniform_vec(0.5, 2.0, c).unwrap()).unwrap();
                bn.beta = Tensor::vector(rng.uniform_vec(-0.3, 0.3, c).unwrap()).unwrap();
                bn.running_mean = Tensor::vector(rng.uniform_vec(-0.2, 0.2, c).unwrap()).unwrap();
                bn.running_var = Tensor::vector(rng.uniform_vec(0.01, 0.1, c).unwrap()).unwrap();
            }
        }
        let batch = Tensor::matrix(100, INPUT_FEATURES, rng.uniform_vec(0.0, 1.0, 100 * INPUT_FEATURES).unwrap()).unwrap();
        let logits = net.forward_eval(&batch).unwrap();
        for r in 0..100 {
            let want = reference_forward(&net, batch.row(r));
            for (a, b) in logits.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "row {r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dropout_irrelevant_in_eval() {
        let mut net = toy(2, 3, 4);
        let batch = Tensor::matrix(3, 12, Rng::new(1).uniform_vec(0.0, 1.0, 36).unwrap()).unwrap();
        let a = net.forward_eval(&batch).unwrap();
        net.set_dropout(0.7).unwrap();
        assert_eq!(a, net.forward_eval(&batch).unwrap());
    }

    #[test]
    fn hidden_levels_belong_to_level_set() {
        let net = toy(3, 3, 9);
        let batch = Tensor::matrix(20, 12, Rng::new(3).uniform_vec(0.0, 1.0, 240).unwrap()).unwrap();
        let trace = net.forward_trace(&batch).unwrap();
        assert_eq!(trace.levels.len(), 2);
        assert!(trace.levels.iter().flatten().all(|&i| i < 8));
        assert_eq!(trace.logits, net.forward_eval(&batch).unwrap());
    }

    #[test]
    fn weight_bits_do_not_touch_thresholds() {
        let a = build_mlp(3, 2, &DEFAULT_HIDDEN, 1).unwrap();
        let b = build_mlp(3, 7, &DEFAULT_HIDDEN, 1).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            if let (Layer::QuantActivation { thresholds: ta, .. }, Layer::QuantActivation { thresholds: tb, .. }) = (la, lb) {
                assert_eq!(ta, tb);
            }
        }
        for (da, db) in a.dense_layers().zip(b.dense_layers()) {
            assert_eq!(da.weight, db.weight);
            assert_ne!(dequantize(&da.quantized_weight()), dequantize(&db.quantized_weight()));
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut net = toy(2, 2, 1);
        let before = net.clone();
        let batch = Tensor::matrix(8, 12, Rng::new(3).uniform_vec(0.0, 1.0, 96).unwrap()).unwrap();
        let logits = net.forward(&batch, Mode::Train, &mut Rng::new(5)).unwrap();
        assert_eq!(logits.shape(), &[8, 3]);
        assert_ne!(before, net);
        assert_eq!(before.parameters().len(), net.parameters().len());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qnn");
        let mut net = toy(2, 5, 11);
        net.forward(&Tensor::filled(vec![4, 12], 0.5).unwrap(), Mode::Train, &mut Rng::new(1)).unwrap();
        save_model(&net, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_container().to_bytes(), net.to_container().to_bytes());
        let batch = Tensor::filled(vec![1, 12], 0.25).unwrap();
        assert_eq!(
            argmax(back.forward_eval(&batch).unwrap().data()).unwrap(),
            argmax(net.forward_eval(&batch).unwrap().data()).unwrap()
        );
    }

    #[test]
    fn corrupt_model_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qnn");
        save_model(&toy(2, 2, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse { .. })));

        let text = String::from_utf8_lossy(&bytes).replacen("format_version=1", "format_version=999", 1);
        std::fs::write(&path, text.as_bytes()).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Version { found: 999, .. })));
    }
}
