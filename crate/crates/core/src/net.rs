//! A small differentiable classifier: 1-D convolutions, dense layers, ReLU,
//! global average pooling and a softmax head, with hand-written
//! backpropagation and a central-difference gradient oracle.
//!
//! Activations are `(channels, length)` blocks per sample. A dense layer
//! flattens its input and produces `(units, 1)`.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::loss::LossSpec;
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        kernel: usize,
        channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    GlobalAvgPool,
    Softmax,
}

fn default_stride() -> usize {
    1
}

/// Conv1d(k=7, c=16) → ReLU → Conv1d(k=5, c=16) → ReLU → GAP → Dense → Softmax.
pub fn default_architecture(n_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv1d {
            kernel: 7,
            channels: 16,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv1d {
            kernel: 5,
            channels: 16,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { units: n_classes },
        LayerSpec::Softmax,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerPlan {
    spec: LayerSpec,
    in_shape: (usize, usize),
    out_shape: (usize, usize),
    offset: usize,
    n_params: usize,
}

impl LayerPlan {
    fn in_len(&self) -> usize {
        self.in_shape.0 * self.in_shape.1
    }

    fn out_len(&self) -> usize {
        self.out_shape.0 * self.out_shape.1
    }
}

fn plan_layers(input_shape: (usize, usize), layers: &[LayerSpec]) -> Result<Vec<LayerPlan>> {
    let mut shape = input_shape;
    let mut offset = 0;
    let mut plans = Vec::with_capacity(layers.len());
    for (idx, &spec) in layers.iter().enumerate() {
        let (c, l) = shape;
        let (out_shape, n_params) = match spec {
            LayerSpec::Conv1d {
                kernel,
                channels,
                stride,
            } => {
                if kernel == 0 || channels == 0 || stride == 0 {
                    return Err(Error::Config(format!(
                        "layer {idx}: conv1d kernel, channels and stride must be >= 1"
                    )));
                }
                if kernel > l {
                    return Err(Error::Config(format!(
                        "layer {idx}: kernel {kernel} longer than input length {l}"
                    )));
                }
                (
                    (channels, (l - kernel) / stride + 1),
                    channels * c * kernel + channels,
                )
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(Error::Config(format!(
                        "layer {idx}: dense units must be >= 1"
                    )));
                }
                ((units, 1), units * c * l + units)
            }
            LayerSpec::Relu => (shape, 0),
            LayerSpec::GlobalAvgPool => ((c, 1), 0),
            LayerSpec::Softmax => {
                if idx + 1 != layers.len() {
                    return Err(Error::Config("softmax must be the final layer".into()));
                }
                ((c * l, 1), 0)
            }
        };
        plans.push(LayerPlan {
            spec,
            in_shape: shape,
            out_shape,
            offset,
            n_params,
        });
        offset += n_params;
        shape = out_shape;
    }
    Ok(plans)
}

/// Loss value with its gradient with respect to the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[b][l]` is the input to layer `l` for sample `b`; the final
    /// entry is the model output.
    acts: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    layers: Vec<LayerSpec>,
    plans: Vec<LayerPlan>,
    params: Vec<f64>,
    input_shape: (usize, usize),
    n_classes: usize,
}

impl Classifier {
    /// Build a classifier with seeded He-uniform weights and zero biases.
    pub fn new(
        input_shape: (usize, usize),
        n_classes: usize,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        if input_shape.0 == 0 || input_shape.1 == 0 || n_classes == 0 {
            return Err(Error::Config(
                "input shape and class count must be non-zero".into(),
            ));
        }
        if layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::Config("final layer must be softmax".into()));
        }
        let plans = plan_layers(input_shape, &layers)?;
        let out = plans.last().expect("non-empty").out_len();
        if out != n_classes {
            return Err(Error::Config(format!(
                "softmax width {out} does not match {n_classes} classes"
            )));
        }
        let total = plans.iter().map(|p| p.n_params).sum();
        let mut params = vec![0.0; total];
        let mut rng = rng_from(seed);
        for p in &plans {
            let (n_weights, fan_in) = match p.spec {
                LayerSpec::Conv1d {
                    kernel, channels, ..
                } => (channels * p.in_shape.0 * kernel, p.in_shape.0 * kernel),
                LayerSpec::Dense { units } => (units * p.in_len(), p.in_len()),
                _ => continue,
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in &mut params[p.offset..p.offset + n_weights] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(Self {
            layers,
            plans,
            params,
            input_shape,
            n_classes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Parameter range `(offset, len)` of layer `idx`.
    pub fn layer_param_range(&self, idx: usize) -> (usize, usize) {
        let p = &self.plans[idx];
        (p.offset, p.n_params)
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} params, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let (d, l) = self.input_shape;
        match batch.shape() {
            [b, bd, bl] if *bd == d && *bl == l => Ok(*b),
            other => Err(Error::Shape(format!(
                "batch shape {other:?} does not match [B, {d}, {l}]"
            ))),
        }
    }

    /// Class probabilities `[B, n_classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let mut out = Vec::with_capacity(b * self.n_classes);
        for x in batch.rows() {
            let mut a = x.to_vec();
            for p in &self.plans {
                a = self.layer_forward(p, &a);
            }
            out.extend(a);
        }
        Tensor::new(vec![b, self.n_classes], out)
    }

    /// Forward pass that keeps every intermediate activation.
    pub fn forward_trace(&self, batch: &Tensor) -> Result<(Tensor, Trace)> {
        let b = self.check_batch(batch)?;
        let mut out = Vec::with_capacity(b * self.n_classes);
        let mut acts = Vec::with_capacity(b);
        for x in batch.rows() {
            let mut sample = Vec::with_capacity(self.plans.len() + 1);
            sample.push(x.to_vec());
            for p in &self.plans {
                let next = self.layer_forward(p, sample.last().expect("non-empty"));
                sample.push(next);
            }
            out.extend_from_slice(sample.last().expect("non-empty"));
            acts.push(sample);
        }
        Ok((Tensor::new(vec![b, self.n_classes], out)?, Trace { acts }))
    }

    /// Parameter gradient of `Σ upstream ⊙ output`, summed over the batch.
    pub fn backward_trace(&self, trace: &Trace, upstream: &Tensor) -> Result<Vec<f64>> {
        let b = trace.acts.len();
        if upstream.shape() != [b, self.n_classes] {
            return Err(Error::Shape(format!(
                "upstream shape {:?} does not match [{b}, {}]",
                upstream.shape(),
                self.n_classes
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        for (sample, up) in trace.acts.iter().zip(upstream.rows()) {
            let mut g = up.to_vec();
            for (idx, p) in self.plans.iter().enumerate().rev() {
                let need_input_grad = idx > 0;
                g = self.layer_backward(
                    p,
                    &sample[idx],
                    &sample[idx + 1],
                    &g,
                    &mut grad,
                    need_input_grad,
                );
            }
        }
        Ok(grad)
    }

    fn layer_forward(&self, p: &LayerPlan, a: &[f64]) -> Vec<f64> {
        let (c, l) = p.in_shape;
        match p.spec {
            LayerSpec::Conv1d { kernel, stride, .. } => {
                let (oc, ol) = p.out_shape;
                let w = &self.params[p.offset..p.offset + oc * c * kernel];
                let bias = &self.params[p.offset + oc * c * kernel..p.offset + p.n_params];
                let mut out = vec![0.0; oc * ol];
                for o in 0..oc {
                    let row = &mut out[o * ol..(o + 1) * ol];
                    row.fill(bias[o]);
                    for i in 0..c {
                        let x = &a[i * l..(i + 1) * l];
                        for j in 0..kernel {
                            let wv = w[(o * c + i) * kernel + j];
                            if stride == 1 {
                                for (r, xv) in row.iter_mut().zip(&x[j..j + ol]) {
                                    *r += wv * xv;
                                }
                            } else {
                                for (t, r) in row.iter_mut().enumerate() {
                                    *r += wv * x[t * stride + j];
                                }
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::Dense { units } => {
                let f = c * l;
                let w = &self.params[p.offset..p.offset + units * f];
                let bias = &self.params[p.offset + units * f..p.offset + p.n_params];
                (0..units)
                    .map(|u| {
                        bias[u]
                            + w[u * f..(u + 1) * f]
                                .iter()
                                .zip(a)
                                .map(|(wv, av)| wv * av)
                                .sum::<f64>()
                    })
                    .collect()
            }
            LayerSpec::Relu => a.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::GlobalAvgPool => a
                .chunks(l)
                .map(|row| row.iter().sum::<f64>() / l as f64)
                .collect(),
            LayerSpec::Softmax => softmax(a),
        }
    }

    fn layer_backward(
        &self,
        p: &LayerPlan,
        input: &[f64],
        output: &[f64],
        g: &[f64],
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Vec<f64> {
        let (c, l) = p.in_shape;
        match p.spec {
            LayerSpec::Conv1d { kernel, stride, .. } => {
                let (oc, ol) = p.out_shape;
                let nw = oc * c * kernel;
                let w = &self.params[p.offset..p.offset + nw];
                let (gw, gb) = grad[p.offset..p.offset + p.n_params].split_at_mut(nw);
                let mut da = if need_input_grad {
                    vec![0.0; c * l]
                } else {
                    Vec::new()
                };
                for o in 0..oc {
                    let go = &g[o * ol..(o + 1) * ol];
                    gb[o] += go.iter().sum::<f64>();
                    for i in 0..c {
                        let x = &input[i * l..(i + 1) * l];
                        for j in 0..kernel {
                            let widx = (o * c + i) * kernel + j;
                            if stride == 1 {
                                gw[widx] += go
                                    .iter()
                                    .zip(&x[j..j + ol])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                                if need_input_grad {
                                    let wv = w[widx];
                                    for (d, gv) in da[i * l + j..i * l + j + ol].iter_mut().zip(go)
                                    {
                                        *d += gv * wv;
                                    }
                                }
                            } else {
                                let mut acc = 0.0;
                                for (t, gv) in go.iter().enumerate() {
                                    acc += gv * x[t * stride + j];
                                    if need_input_grad {
                                        da[i * l + t * stride + j] += gv * w[widx];
                                    }
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                da
            }
            LayerSpec::Dense { units } => {
                let f = c * l;
                let w = &self.params[p.offset..p.offset + units * f];
                let (gw, gb) = grad[p.offset..p.offset + p.n_params].split_at_mut(units * f);
                let mut da = if need_input_grad {
                    vec![0.0; f]
                } else {
                    Vec::new()
                };
                for u in 0..units {
                    let gu = g[u];
                    gb[u] += gu;
                    for (gwv, av) in gw[u * f..(u + 1) * f].iter_mut().zip(input) {
                        *gwv += gu * av;
                    }
                    if need_input_grad {
                        for (d, wv) in da.iter_mut().zip(&w[u * f..(u + 1) * f]) {
                            *d += gu * wv;
                        }
                    }
                }
                da
            }
            LayerSpec::Relu => input
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                .collect(),
            LayerSpec::GlobalAvgPool => {
                let mut da = vec![0.0; c * l];
                for (ch, &gv) in g.iter().enumerate() {
                    da[ch * l..(ch + 1) * l].fill(gv / l as f64);
                }
                da
            }
            LayerSpec::Softmax => {
                let dot: f64 = output.iter().zip(g).map(|(p, gv)| p * gv).sum();
                output.iter().zip(g).map(|(p, gv)| p * (gv - dot)).collect()
            }
        }
    }

    /// Write params as one JSON header line (architecture manifest) followed
    /// by little-endian `f64` values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ParamHeader {
            format: PARAM_FORMAT.into(),
            version: 1,
            input_shape: [self.input_shape.0, self.input_shape.1],
            n_classes: self.n_classes,
            n_params: self.params.len(),
            layers: self.layers.clone(),
        };
        let mut buf = serde_json::to_vec(&header).expect("header serializes");
        buf.push(b'\n');
        for v in &self.params {
            buf.write_all(&v.to_le_bytes()).expect("write to vec");
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("param file lacks a header line".into()))?;
        let header: ParamHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("bad param header: {e}")))?;
        if header.format != PARAM_FORMAT {
            return Err(Error::Format(format!(
                "unexpected format {:?}",
                header.format
            )));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.n_params * 8 {
            return Err(Error::Format(format!(
                "expected {} param bytes, found {}",
                header.n_params * 8,
                body.len()
            )));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut model = Classifier::new(
            (header.input_shape[0], header.input_shape[1]),
            header.n_classes,
            header.layers,
            0,
        )?;
        model.set_params(params)?;
        Ok(model)
    }
}

const PARAM_FORMAT: &str = "imblab-params";

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    format: String,
    version: u32,
    input_shape: [usize; 2],
    n_classes: usize,
    n_params: usize,
    layers: Vec<LayerSpec>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of `Σ upstream ⊙ forward(batch)` with respect to the params.
pub fn backward(model: &Classifier, batch: &Tensor, upstream: &Tensor) -> Result<GradientBundle> {
    let (out, trace) = model.forward_trace(batch)?;
    let grad = model.backward_trace(&trace, upstream)?;
    if upstream.shape() != out.shape() {
        return Err(Error::Shape("upstream does not match output".into()));
    }
    let loss = out
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(a, b)| a * b)
        .sum();
    Ok(GradientBundle { loss, grad })
}

/// Loss and parameter gradient of `loss` on one batch.
pub fn loss_and_grad(
    model: &Classifier,
    loss: &LossSpec,
    batch: &Tensor,
    labels: &[usize],
) -> Result<GradientBundle> {
    let (probs, trace) = model.forward_trace(batch)?;
    let value = loss.evaluate(&probs, labels)?;
    let grad = model.backward_trace(&trace, &value.grad)?;
    Ok(GradientBundle {
        loss: value.loss,
        grad,
    })
}

/// Upper bound on parameters for which the finite-difference oracle runs.
pub const GRADIENT_CHECK_MAX_PARAMS: usize = 10_000;

/// Compare the analytic gradient against central differences with step
/// `h`. Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check(
    model: &Classifier,
    loss: &LossSpec,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    if model.n_params() > GRADIENT_CHECK_MAX_PARAMS {
        return Err(Error::Argument(format!(
            "gradient check limited to {GRADIENT_CHECK_MAX_PARAMS} params, model has {}",
            model.n_params()
        )));
    }
    let analytic = loss_and_grad(model, loss, batch, labels)?.grad;
    let mut probe = model.clone();
    let eval = |m: &Classifier| -> Result<f64> {
        let probs = m.forward(batch)?;
        Ok(loss.evaluate(&probs, labels)?.loss)
    };
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = probe.params[k];
        probe.params[k] = orig + h;
        let up = eval(&probe)?;
        probe.params[k] = orig - h;
        let down = eval(&probe)?;
        probe.params[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// One plain SGD step: `params - lr * grad`.
pub fn sgd_step(model: &Classifier, grads: &GradientBundle, lr: f64) -> Result<Classifier> {
    let mut next = model.clone();
    Sgd::new(0.0).step(&mut next, &grads.grad, lr)?;
    Ok(next)
}

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Classifier, grad: &[f64], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if grad.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, model has {} params",
                grad.len(),
                model.params.len()
            )));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerics(format!(
                "gradient entry {k} is {}",
                grad[k]
            )));
        }
        if self.momentum == 0.0 {
            for (p, g) in model.params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        } else {
            if self.velocity.len() != grad.len() {
                self.velocity = vec![0.0; grad.len()];
            }
            for ((p, v), g) in model.params.iter_mut().zip(&mut self.velocity).zip(grad) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random_batch(b: usize, d: usize, l: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let data = (0..b * d * l)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(vec![b, d, l], data).unwrap()
    }

    fn tiny_conv(seed: u64) -> Classifier {
        Classifier::new(
            (2, 12),
            3,
            vec![
                LayerSpec::Conv1d {
                    kernel: 3,
                    channels: 4,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv1d {
                    kernel: 3,
                    channels: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Softmax,
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn rows_are_probabilities() {
        let model = tiny_conv(1);
        let out = model.forward(&random_batch(5, 2, 12, 2)).unwrap();
        for row in out.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut model = tiny_conv(3);
        let head = model.layers().len() - 2;
        let (off, n) = model.layer_param_range(head);
        model.params_mut()[off..off + n].fill(0.0);
        let out = model.forward(&random_batch(4, 2, 12, 5)).unwrap();
        assert!(out.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn empty_batch_and_shape_errors() {
        let model = tiny_conv(1);
        let out = model.forward(&Tensor::zeros(vec![0, 2, 12])).unwrap();
        assert_eq!(out.shape(), [0, 3]);
        assert!(matches!(
            model.forward(&Tensor::zeros(vec![1, 3, 12])),
            Err(Error::Shape(_))
        ));
        let batch = random_batch(2, 2, 12, 0);
        assert!(matches!(
            backward(&model, &batch, &Tensor::zeros(vec![2, 4])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let model = tiny_conv(4);
        let batch = random_batch(3, 2, 12, 6);
        let g = backward(&model, &batch, &Tensor::zeros(vec![3, 3])).unwrap();
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_doubles_grad() {
        let model = tiny_conv(7);
        let one = random_batch(1, 2, 12, 8);
        let two = Tensor::new(vec![2, 2, 12], [one.data(), one.data()].concat()).unwrap();
        let up1 = Tensor::new(vec![1, 3], vec![0.3, -1.0, 0.5]).unwrap();
        let up2 = Tensor::new(vec![2, 3], vec![0.3, -1.0, 0.5, 0.3, -1.0, 0.5]).unwrap();
        let g1 = backward(&model, &one, &up1).unwrap().grad;
        let g2 = backward(&model, &two, &up2).unwrap().grad;
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }

    #[test]
    fn backward_matches_central_differences_on_linear_functional() {
        let model = tiny_conv(9);
        let batch = random_batch(3, 2, 12, 10);
        let up = Tensor::new(
            vec![3, 3],
            vec![1.0, -2.0, 0.5, 0.0, 1.5, -1.0, 2.0, 0.1, -0.3],
        )
        .unwrap();
        let analytic = backward(&model, &batch, &up).unwrap().grad;
        let f = |m: &Classifier| -> f64 {
            let out = m.forward(&batch).unwrap();
            out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let mut probe = model.clone();
        for (k, &want) in analytic.iter().enumerate() {
            let orig = probe.params()[k];
            probe.params_mut()[k] = orig + h;
            let a = f(&probe);
            probe.params_mut()[k] = orig - h;
            let b = f(&probe);
            probe.params_mut()[k] = orig;
            let numeric = (a - b) / (2.0 * h);
            assert!(
                (numeric - want).abs() / want.abs().max(1.0) < 1e-7,
                "param {k}"
            );
        }
    }

    #[test]
    fn gradient_check_rejects_zero_step() {
        let model = tiny_conv(1);
        let batch = random_batch(2, 2, 12, 1);
        assert!(matches!(
            gradient_check(&model, &LossSpec::UnweightedCe, &batch, &[0, 1], 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sgd_arithmetic_and_errors() {
        let mut model = Classifier::new(
            (1, 1),
            2,
            vec![LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
            0,
        )
        .unwrap();
        model.set_params(vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let g = GradientBundle {
            loss: 0.0,
            grad: vec![1.0, -1.0, 0.0, 0.0],
        };
        let next = sgd_step(&model, &g, 0.5).unwrap();
        assert_eq!(&next.params()[..2], &[0.5, 2.5]);
        assert!(matches!(sgd_step(&model, &g, 0.0), Err(Error::Argument(_))));
        let bad = GradientBundle {
            loss: 0.0,
            grad: vec![f64::NAN, 0.0, 0.0, 0.0],
        };
        assert!(matches!(
            sgd_step(&model, &bad, 0.1),
            Err(Error::Numerics(_))
        ));
        let tiny = sgd_step(&model, &g, 1e-300).unwrap();
        assert_eq!(tiny.params(), model.params());
    }

    #[test]
    fn architecture_validation() {
        assert!(Classifier::new((1, 4), 2, vec![LayerSpec::Dense { units: 2 }], 0).is_err());
        assert!(Classifier::new(
            (1, 4),
            3,
            vec![LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
            0
        )
        .is_err());
        assert!(Classifier::new(
            (1, 4),
            2,
            vec![
                LayerSpec::Conv1d {
                    kernel: 5,
                    channels: 2,
                    stride: 1
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Softmax
            ],
            0
        )
        .is_err());
        let m = Classifier::new((1, 128), 4, default_architecture(4), 0).unwrap();
        assert_eq!(m.n_params(), 16 * 7 + 16 + 16 * 16 * 5 + 16 + 16 * 4 + 4);
    }

    #[test]
    fn params_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = tiny_conv(21);
        model.save(&path).unwrap();
        assert_eq!(Classifier::load(&path).unwrap(), model);
    }
}
