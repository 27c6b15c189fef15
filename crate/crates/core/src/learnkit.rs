//! Minimal dense-network kit shared by the federated client models and the
//! Q-networks.
//!
//! Parameters live in one flat `f64` vector. Layer `l` stores its weights as
//! a `fan_in x fan_out` row-major block followed by `fan_out` biases. Layers
//! before `base_cut` form the shared base region, the remaining layers the
//! personalization region; both are contiguous.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PARAM_MAGIC: [u8; 4] = *b"CFPV";
pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected} columns, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("batch has {rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("parameter layout mismatch (expected hash {expected:016x}, got {got:016x})")]
    Layout { expected: u64, got: u64 },
    #[error("splice of {got} values into a region of {expected}")]
    SpliceLength { expected: usize, got: usize },
    #[error("loss head mismatch: {0}")]
    Head(&'static str),
    #[error("bad parameter blob: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Identity,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    All,
    Base,
    Personalization,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub layer_sizes: Vec<usize>,
    pub output: OutputHead,
    pub base_cut: usize,
}

/// Layer widths, output head and base/personalization cut, with the derived
/// flat layout. Hidden layers use rectifiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NetworkShape", into = "NetworkShape")]
pub struct NetworkSpec {
    shape: NetworkShape,
    layers: Vec<LayerLayout>,
    total: usize,
    hash: u64,
}

impl TryFrom<NetworkShape> for NetworkSpec {
    type Error = LearnError;

    fn try_from(shape: NetworkShape) -> Result<Self, LearnError> {
        NetworkSpec::new(shape.layer_sizes, shape.output, shape.base_cut)
    }
}

impl From<NetworkSpec> for NetworkShape {
    fn from(spec: NetworkSpec) -> Self {
        spec.shape
    }
}

impl NetworkSpec {
    /// `base_cut` counts weight layers in the base region. It must leave at
    /// least one layer on each side, except for a single-layer network
    /// whose only layer is base.
    pub fn new(layer_sizes: Vec<usize>, output: OutputHead, base_cut: usize) -> Result<Self, LearnError> {
        if layer_sizes.len() < 2 {
            return Err(LearnError::InvalidSpec("need an input and an output width".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(LearnError::InvalidSpec("layer widths must be at least 1".into()));
        }
        let num_layers = layer_sizes.len() - 1;
        let cut_ok = if num_layers == 1 { base_cut == 1 } else { (1..num_layers).contains(&base_cut) };
        if !cut_ok {
            return Err(LearnError::InvalidSpec(format!(
                "base_cut {base_cut} invalid for {num_layers} layers"
            )));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut offset = 0;
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = offset..offset + fan_in * fan_out;
            let bias = weights.end..weights.end + fan_out;
            offset = bias.end;
            layers.push(LayerLayout { fan_in, fan_out, weights, bias });
        }
        let shape = NetworkShape { layer_sizes, output, base_cut };
        let hash = layout_hash(&shape);
        Ok(Self { shape, layers, total: offset, hash })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.shape.layer_sizes
    }

    pub fn output(&self) -> OutputHead {
        self.shape.output
    }

    pub fn base_cut(&self) -> usize {
        self.shape.base_cut
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn input_width(&self) -> usize {
        self.shape.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.shape.layer_sizes.last().unwrap()
    }

    pub fn layout_hash(&self) -> u64 {
        self.hash
    }

    pub fn region(&self, region: Region) -> Range<usize> {
        let split = self.layers.get(self.shape.base_cut).map_or(self.total, |l| l.weights.start);
        match region {
            Region::All => 0..self.total,
            Region::Base => 0..split,
            Region::Personalization => split..self.total,
        }
    }
}

fn layout_hash(shape: &NetworkShape) -> u64 {
    let text = format!(
        "layers={:?};head={:?};cut={}",
        shape.layer_sizes, shape.output, shape.base_cut
    );
    let digest = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

/// Flat learnable parameters tagged with the layout they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: u64,
}

impl ParameterVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self { values: vec![0.0; spec.num_params()], layout: spec.layout_hash() }
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self, LearnError> {
        if values.len() != spec.num_params() {
            return Err(LearnError::SpliceLength { expected: spec.num_params(), got: values.len() });
        }
        Ok(Self { values, layout: spec.layout_hash() })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for layer in spec.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut p.values[layer.weights.clone()] {
                *w = rng.random_range(-limit..limit);
            }
        }
        p
    }

    pub fn layout_hash(&self) -> u64 {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<(), LearnError> {
        if self.layout != spec.layout_hash() || self.values.len() != spec.num_params() {
            return Err(LearnError::Layout { expected: spec.layout_hash(), got: self.layout });
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `magic | version u32 | layout hash u64 | count u64 | count x f64`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.values.len());
        out.extend_from_slice(&PARAM_MAGIC);
        out.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.layout.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(spec: &NetworkSpec, bytes: &[u8]) -> Result<Self, LearnError> {
        let fmt = |m: &str| LearnError::Format(m.to_string());
        if bytes.len() < 24 {
            return Err(fmt("truncated header"));
        }
        if bytes[..4] != PARAM_MAGIC {
            return Err(fmt("wrong magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != PARAM_FORMAT_VERSION {
            return Err(LearnError::Format(format!("unsupported version {version}")));
        }
        let layout = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if layout != spec.layout_hash() {
            return Err(LearnError::Layout { expected: spec.layout_hash(), got: layout });
        }
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if count != spec.num_params() {
            return Err(fmt("parameter count does not match layout"));
        }
        let body = &bytes[24..];
        if body.len() != count * 8 {
            return Err(fmt("payload length does not match count"));
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { values, layout })
    }
}

/// Row-major batch of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "batch data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Pre-activations and activations kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input; `activations[l]` the output of layer `l`
    /// (post-rectifier for hidden layers, raw logits for the last one).
    activations: Vec<Batch>,
}

impl Trace {
    /// Raw output of the last layer (logits before any softmax).
    pub fn logits(&self) -> &Batch {
        self.activations.last().unwrap()
    }
}

fn dense(input: &Batch, params: &[f64], layer: &LayerLayout) -> Batch {
    let w = &params[layer.weights.clone()];
    let b = &params[layer.bias.clone()];
    let mut out = Batch::zeros(input.rows, layer.fan_out);
    for r in 0..input.rows {
        let x = input.row(r);
        let y = out.row_mut(r);
        y.copy_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * layer.fan_out..(i + 1) * layer.fan_out];
            for (yo, &wo) in y.iter_mut().zip(wrow) {
                *yo += xi * wo;
            }
        }
    }
    out
}

pub fn forward_trace(spec: &NetworkSpec, params: &ParameterVector, input: &Batch) -> Result<Trace, LearnError> {
    params.check(spec)?;
    if input.cols != spec.input_width() {
        return Err(LearnError::InputWidth { expected: spec.input_width(), got: input.cols });
    }
    let last = spec.layers().len() - 1;
    let mut activations = Vec::with_capacity(spec.layers().len() + 1);
    activations.push(input.clone());
    for (l, layer) in spec.layers().iter().enumerate() {
        let mut z = dense(activations.last().unwrap(), params.values(), layer);
        if l < last {
            for v in &mut z.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        activations.push(z);
    }
    Ok(Trace { activations })
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Batch) -> Batch {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn forward(spec: &NetworkSpec, params: &ParameterVector, input: &Batch) -> Result<Batch, LearnError> {
    let trace = forward_trace(spec, params, input)?;
    let logits = trace.activations.into_iter().last().unwrap();
    Ok(match spec.output() {
        OutputHead::Identity => logits,
        OutputHead::Softmax => softmax_rows(&logits),
    })
}

/// Backpropagates `d loss / d logits` through the trace.
pub fn backprop(spec: &NetworkSpec, params: &ParameterVector, trace: &Trace, dlogits: &Batch) -> ParameterVector {
    let mut grad = ParameterVector::zeros(spec);
    let p = params.values();
    let mut delta = dlogits.clone();
    for l in (0..spec.layers().len()).rev() {
        let layer = &spec.layers()[l];
        let input = &trace.activations[l];
        let g = grad.values_mut();
        for r in 0..delta.rows {
            let d = delta.row(r);
            for (o, &dv) in d.iter().enumerate() {
                g[layer.bias.start + o] += dv;
            }
            for (i, &xi) in input.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let start = layer.weights.start + i * layer.fan_out;
                for (gw, &dv) in g[start..start + layer.fan_out].iter_mut().zip(d) {
                    *gw += xi * dv;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &p[layer.weights.clone()];
        let mut prev = Batch::zeros(delta.rows, layer.fan_in);
        for r in 0..delta.rows {
            let d = delta.row(r);
            let a = input.row(r);
            let out = prev.row_mut(r);
            for i in 0..layer.fan_in {
                // Rectifier derivative: zero where the activation was clipped.
                if a[i] <= 0.0 {
                    continue;
                }
                let wrow = &w[i * layer.fan_out..(i + 1) * layer.fan_out];
                out[i] = wrow.iter().zip(d).map(|(w, d)| w * d).sum();
            }
        }
        delta = prev;
    }
    grad
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Batch, labels: &[usize]) -> Result<(f64, Batch), LearnError> {
    if labels.len() != logits.rows {
        return Err(LearnError::LabelCount { rows: logits.rows, labels: labels.len() });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= logits.cols) {
        return Err(LearnError::LabelRange { label, classes: logits.cols });
    }
    let probs = softmax_rows(logits);
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut grad = probs;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean cross-entropy loss and its parameter gradient for a softmax network.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParameterVector,
    batch: &Batch,
    labels: &[usize],
) -> Result<(f64, ParameterVector), LearnError> {
    if spec.output() != OutputHead::Softmax {
        return Err(LearnError::Head("cross-entropy needs a softmax head"));
    }
    let trace = forward_trace(spec, params, batch)?;
    let (loss, dlogits) = softmax_cross_entropy(trace.logits(), labels)?;
    Ok((loss, backprop(spec, params, &trace, &dlogits)))
}

/// Mean cross-entropy only.
pub fn loss(spec: &NetworkSpec, params: &ParameterVector, batch: &Batch, labels: &[usize]) -> Result<f64, LearnError> {
    let trace = forward_trace(spec, params, batch)?;
    softmax_cross_entropy(trace.logits(), labels).map(|(l, _)| l)
}

pub fn sgd_step(params: &ParameterVector, grad: &ParameterVector, lr: f64) -> Result<ParameterVector, LearnError> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, lr, None)?;
    Ok(out)
}

/// `params -= lr * grad`, optionally restricted to a flat range.
pub fn sgd_step_in_place(
    params: &mut ParameterVector,
    grad: &ParameterVector,
    lr: f64,
    range: Option<Range<usize>>,
) -> Result<(), LearnError> {
    if params.layout != grad.layout || params.len() != grad.len() {
        return Err(LearnError::Layout { expected: params.layout, got: grad.layout });
    }
    let range = range.unwrap_or(0..params.len());
    for (p, g) in params.values[range.clone()].iter_mut().zip(&grad.values[range]) {
        *p -= lr * g;
    }
    Ok(())
}

pub fn masked_slice(spec: &NetworkSpec, params: &ParameterVector, region: Region) -> Result<Vec<f64>, LearnError> {
    params.check(spec)?;
    Ok(params.values[spec.region(region)].to_vec())
}

pub fn masked_splice(
    spec: &NetworkSpec,
    params: &mut ParameterVector,
    region: Region,
    values: &[f64],
) -> Result<(), LearnError> {
    params.check(spec)?;
    let range = spec.region(region);
    if values.len() != range.len() {
        return Err(LearnError::SpliceLength { expected: range.len(), got: values.len() });
    }
    params.values[range].copy_from_slice(values);
    Ok(())
}

/// Central finite-difference gradient of `f` at `params`.
pub fn central_difference<F>(params: &ParameterVector, step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&ParameterVector) -> f64,
{
    let mut probe = params.clone();
    (0..params.len())
        .map(|k| {
            let orig = probe.values[k];
            probe.values[k] = orig + step;
            let up = f(&probe);
            probe.values[k] = orig - step;
            let down = f(&probe);
            probe.values[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Denominator floor of [`max_relative_error`]: components smaller than
/// this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// `max_k |a_k - b_k| / max(|a_k|, |b_k|, GRADCHECK_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn spec(sizes: &[usize], head: OutputHead, cut: usize) -> NetworkSpec {
        NetworkSpec::new(sizes.to_vec(), head, cut).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![4], OutputHead::Identity, 1).is_err());
        assert!(NetworkSpec::new(vec![4, 0, 2], OutputHead::Identity, 1).is_err());
        assert!(NetworkSpec::new(vec![4, 3, 2], OutputHead::Identity, 2).is_err());
        assert!(NetworkSpec::new(vec![4, 3, 2], OutputHead::Identity, 0).is_err());
        assert!(NetworkSpec::new(vec![1, 1], OutputHead::Identity, 1).is_ok());
        let s = spec(&[4, 3, 2], OutputHead::Softmax, 1);
        assert_eq!(s.num_params(), 4 * 3 + 3 + 3 * 2 + 2);
        assert_ne!(s.layout_hash(), spec(&[4, 3, 2], OutputHead::Identity, 1).layout_hash());
    }

    #[test]
    fn regions_partition_the_vector() {
        let s = spec(&[5, 4, 3, 2], OutputHead::Softmax, 2);
        let base = s.region(Region::Base);
        let pers = s.region(Region::Personalization);
        assert_eq!(base.start, 0);
        assert_eq!(base.end, pers.start);
        assert_eq!(pers.end, s.num_params());
        // cut before the last layer: personalization is exactly that layer
        assert_eq!(pers.len(), 3 * 2 + 2);
        let single = spec(&[3, 2], OutputHead::Identity, 1);
        assert_eq!(single.region(Region::Personalization).len(), 0);
    }

    #[test]
    fn zero_network_outputs() {
        let s = spec(&[3, 4, 10], OutputHead::Identity, 1);
        let out = forward(&s, &ParameterVector::zeros(&s), &Batch::new(2, 3, vec![1.0; 6])).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        let s = spec(&[3, 4, 10], OutputHead::Softmax, 1);
        let out = forward(&s, &ParameterVector::zeros(&s), &Batch::new(2, 3, vec![1.0; 6])).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn linear_hand_value() {
        let s = spec(&[1, 1], OutputHead::Identity, 1);
        let p = ParameterVector::from_values(&s, vec![2.0, 1.0]).unwrap();
        let out = forward(&s, &p, &Batch::new(1, 1, vec![3.0])).unwrap();
        assert_eq!(out.data, vec![7.0]);
    }

    #[test]
    fn input_width_error() {
        let s = spec(&[3, 2], OutputHead::Identity, 1);
        let err = forward(&s, &ParameterVector::zeros(&s), &Batch::zeros(1, 4)).unwrap_err();
        assert_eq!(err, LearnError::InputWidth { expected: 3, got: 4 });
    }

    #[test]
    fn uniform_prediction_loss_is_ln10() {
        let s = spec(&[2, 3, 10], OutputHead::Softmax, 1);
        let (l, _) = backward(&s, &ParameterVector::zeros(&s), &Batch::new(1, 2, vec![0.3, -1.0]), &[4]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_no_loss() {
        let s = spec(&[1, 2], OutputHead::Softmax, 1);
        // logits = (0, 60) for input 1
        let p = ParameterVector::from_values(&s, vec![0.0, 30.0, 0.0, 30.0]).unwrap();
        let (l, g) = backward(&s, &p, &Batch::new(1, 1, vec![1.0]), &[1]).unwrap();
        assert!(l < 1e-20);
        assert!(g.norm() < 1e-20);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let s = spec(&[5, 7, 6, 4], OutputHead::Softmax, 2);
            let mut r = rng::stream(seed, Stream::Oracle);
            let p = ParameterVector::glorot(&s, &mut r);
            let x = Batch::new(3, 5, (0..15).map(|_| r.random_range(-1.0..1.0)).collect());
            let y = [0, 3, 2];
            let (_, g) = backward(&s, &p, &x, &y).unwrap();
            let num = central_difference(&p, 1e-4, |q| loss(&s, q, &x, &y).unwrap());
            let err = max_relative_error(g.values(), &num);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn labels_are_validated() {
        let s = spec(&[2, 3], OutputHead::Softmax, 1);
        let p = ParameterVector::zeros(&s);
        let x = Batch::zeros(2, 2);
        assert_eq!(backward(&s, &p, &x, &[0]).unwrap_err(), LearnError::LabelCount { rows: 2, labels: 1 });
        assert_eq!(backward(&s, &p, &x, &[0, 3]).unwrap_err(), LearnError::LabelRange { label: 3, classes: 3 });
        let s = spec(&[2, 3], OutputHead::Identity, 1);
        assert!(matches!(backward(&s, &ParameterVector::zeros(&s), &x, &[0, 1]), Err(LearnError::Head(_))));
    }

    #[test]
    fn sgd_examples() {
        let s = spec(&[1, 1], OutputHead::Identity, 1);
        let p = ParameterVector::from_values(&s, vec![1.0, 1.0]).unwrap();
        let g = ParameterVector::from_values(&s, vec![0.5, 0.5]).unwrap();
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        assert_eq!(sgd_step(&p, &g, 0.1).unwrap().values(), &[0.95, 0.95]);
        let other = spec(&[2, 1], OutputHead::Identity, 1);
        assert!(sgd_step(&p, &ParameterVector::zeros(&other), 0.1).is_err());
    }

    #[test]
    fn slice_and_splice() {
        let s = spec(&[3, 4, 2], OutputHead::Softmax, 1);
        let mut r = rng::stream(3, Stream::ModelInit);
        let v = ParameterVector::glorot(&s, &mut r);
        let base = masked_slice(&s, &v, Region::Base).unwrap();
        let pers = masked_slice(&s, &v, Region::Personalization).unwrap();
        assert_eq!(base.len() + pers.len(), v.len());
        assert_eq!(pers.len(), 4 * 2 + 2);
        let mut w = v.clone();
        masked_splice(&s, &mut w, Region::Base, &base).unwrap();
        assert_eq!(w, v);
        assert_eq!(
            masked_splice(&s, &mut w, Region::Base, &pers).unwrap_err(),
            LearnError::SpliceLength { expected: base.len(), got: pers.len() }
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Batch::new(2, 3, vec![1000.0, -5.0, 3.0, 0.1, 0.2, 0.3]);
        let p = softmax_rows(&logits);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blob_round_trip_and_errors() {
        let s = spec(&[3, 2], OutputHead::Identity, 1);
        let mut r = rng::stream(1, Stream::ModelInit);
        let v = ParameterVector::glorot(&s, &mut r);
        let bytes = v.to_bytes();
        assert_eq!(ParameterVector::from_bytes(&s, &bytes).unwrap(), v);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParameterVector::from_bytes(&s, &bad), Err(LearnError::Format(_))));
        let other = spec(&[4, 2], OutputHead::Identity, 1);
        assert!(matches!(ParameterVector::from_bytes(&other, &bytes), Err(LearnError::Layout { .. })));
        assert!(ParameterVector::from_bytes(&s, &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let s = spec(&[3, 5, 2], OutputHead::Softmax, 1);
        let json = serde_json::to_string(&s).unwrap();
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<NetworkSpec>(r#"{"layer_sizes":[3],"output":"softmax","base_cut":1}"#).is_err());
    }
}
