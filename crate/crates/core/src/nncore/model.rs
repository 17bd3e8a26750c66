//! The two-conv, three-FC classifier: parameters, forward and backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{
    conv_backward, conv_forward, dense_backward, dense_forward, relu_inplace, relu_mask, relu_maxpool,
    relu_maxpool_backward, softmax, ConvGeom, Scalar,
};
use crate::error::{invalid, Error, Result};
use crate::midt::{Bundle, Tensor};

/// Samples per forward/backward chunk; bounds activation memory.
const CHUNK: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture description. Layer counts are fixed: two conv blocks
/// (conv, ReLU, 2x2 max-pool), three ReLU dense layers and a linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_side: usize,
    pub conv_channels: [usize; 2],
    pub kernel_size: usize,
    #[serde(default = "unit_strides")]
    pub conv_strides: [usize; 2],
    pub fc_widths: [usize; 3],
    pub n_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn unit_strides() -> [usize; 2] {
    [1, 1]
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_side: 64,
            conv_channels: [16, 32],
            kernel_size: 5,
            conv_strides: [1, 1],
            fc_widths: [256, 128, 64],
            n_classes: 3,
            activation: Activation::Relu,
        }
    }
}

/// Resolved per-layer sizes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub conv1: ConvGeom,
    pub conv2: ConvGeom,
    pub flat: usize,
}

impl ModelSpec {
    /// The default architecture on 2x-downsampled 32x32 inputs.
    pub fn reduced_input() -> Self {
        Self { input_side: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid("n_classes must be at least 2"));
        }
        if self.conv_channels.contains(&0) || self.fc_widths.contains(&0) || self.kernel_size == 0 {
            return Err(invalid("layer widths must be positive"));
        }
        self.geometry().map(|_| ())
    }

    pub(crate) fn geometry(&self) -> Result<Geometry> {
        let bad = || invalid(format!("input side {} too small for {:?}", self.input_side, self));
        let conv1 = ConvGeom::new(1, self.conv_channels[0], self.kernel_size, self.conv_strides[0], self.input_side)
            .ok_or_else(bad)?;
        let pool1_side = conv1.out_side / 2;
        let conv2 = ConvGeom::new(
            self.conv_channels[0],
            self.conv_channels[1],
            self.kernel_size,
            self.conv_strides[1],
            pool1_side,
        )
        .ok_or_else(bad)?;
        let pool2_side = conv2.out_side / 2;
        if pool2_side == 0 {
            return Err(bad());
        }
        Ok(Geometry { conv1, conv2, flat: self.conv_channels[1] * pool2_side * pool2_side })
    }

    pub fn input_len(&self) -> usize {
        self.input_side * self.input_side
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc_widths[2]
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let g = self.geometry()?;
        let [c1, c2] = self.conv_channels;
        let [f1, f2, f3] = self.fc_widths;
        let k = self.kernel_size;
        Ok(vec![
            ("conv1.weight", vec![c1, 1, k, k]),
            ("conv1.bias", vec![c1]),
            ("conv2.weight", vec![c2, c1, k, k]),
            ("conv2.bias", vec![c2]),
            ("fc1.weight", vec![f1, g.flat]),
            ("fc1.bias", vec![f1]),
            ("fc2.weight", vec![f2, f1]),
            ("fc2.bias", vec![f2]),
            ("fc3.weight", vec![f3, f2]),
            ("fc3.bias", vec![f3]),
            ("classifier.weight", vec![self.n_classes, f3]),
            ("classifier.bias", vec![self.n_classes]),
        ])
    }
}

/// Index of the classifier weight tensor; everything before it is the encoder.
pub const CLASSIFIER_WEIGHT: usize = 10;
pub const CLASSIFIER_BIAS: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub spec: ModelSpec,
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = spec
            .param_layout()?
            .into_iter()
            .map(|(_, shape)| vec![T::zero(); shape.iter().product()])
            .collect();
        Ok(Self { spec: spec.clone(), tensors })
    }

    /// Fan-in scaled uniform initialization: weights and biases drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let layout = spec.param_layout()?;
        for pair in 0..layout.len() / 2 {
            let wshape = &layout[2 * pair].1;
            let fan_in: usize = wshape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            for idx in [2 * pair, 2 * pair + 1] {
                for v in params.tensors[idx].iter_mut() {
                    *v = T::from_f64(rng.random_range(-bound..bound)).unwrap();
                }
            }
        }
        Ok(params)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            spec: self.spec.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Replaces the classifier layer; `weight` is `[n_classes, embedding_dim]`.
    pub fn set_classifier(&mut self, weight: Vec<T>, bias: Vec<T>) -> Result<()> {
        let nc = self.spec.n_classes;
        if weight.len() != nc * self.spec.embedding_dim() || bias.len() != nc {
            return Err(Error::ShapeMismatch {
                expected: format!("[{nc}, {}] weight and [{nc}] bias", self.spec.embedding_dim()),
                actual: format!("{} weight and {} bias entries", weight.len(), bias.len()),
            });
        }
        self.tensors[CLASSIFIER_WEIGHT] = weight;
        self.tensors[CLASSIFIER_BIAS] = bias;
        Ok(())
    }

    pub fn encoder_tensors(&self) -> &[Vec<T>] {
        &self.tensors[..CLASSIFIER_WEIGHT]
    }

    fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + scale * y;
            }
        }
    }
}

impl ModelParams<f32> {
    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut bundle = Bundle::new();
        for ((name, shape), data) in self.spec.param_layout()?.into_iter().zip(&self.tensors) {
            bundle.push(name, Tensor::f32(shape.iter().map(|&d| d as u64).collect(), data.clone())?);
        }
        Ok(bundle)
    }

    pub fn from_bundle(spec: &ModelSpec, bundle: &Bundle) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        for (i, (name, shape)) in spec.param_layout()?.into_iter().enumerate() {
            let t = bundle.get(name)?;
            let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
            if t.dims != dims {
                return Err(Error::ShapeMismatch { expected: format!("{name} {dims:?}"), actual: format!("{:?}", t.dims) });
            }
            params.tensors[i] = t.as_f32()?.to_vec();
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint contains non-finite parameters".into()));
        }
        Ok(params)
    }
}

/// Cached intermediate values of one forward pass over a chunk.
pub(crate) struct Activations<T> {
    pub batch: usize,
    pub input: Vec<T>,
    a1: Vec<T>,
    p1: Vec<T>,
    arg1: Vec<u32>,
    a2: Vec<T>,
    p2: Vec<T>,
    arg2: Vec<u32>,
    z1: Vec<T>,
    r1: Vec<T>,
    z2: Vec<T>,
    r2: Vec<T>,
    z3: Vec<T>,
    /// Penultimate (post-ReLU) activations, `[batch, fc_widths[2]]`.
    pub embedding: Vec<T>,
    /// Raw class scores, `[batch, n_classes]`.
    pub logits: Vec<T>,
}

pub(crate) fn forward_chunk<T: Scalar>(params: &ModelParams<T>, input: Vec<T>, batch: usize) -> Result<Activations<T>> {
    let spec = &params.spec;
    let g = spec.geometry()?;
    if input.len() != batch * spec.input_len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{batch} x {} inputs", spec.input_len()),
            actual: format!("{} values", input.len()),
        });
    }
    let t = &params.tensors;
    let [f1, f2, f3] = spec.fc_widths;
    let nc = spec.n_classes;
    let mut cols = Vec::new();

    let mut a1 = vec![T::zero(); batch * g.conv1.out_len()];
    conv_forward(&input, &t[0], &t[1], &g.conv1, batch, &mut a1, &mut cols);
    let mut p1 = vec![T::zero(); batch * g.conv2.in_len()];
    let mut arg1 = vec![0u32; p1.len()];
    relu_maxpool(&a1, batch * g.conv1.cout, g.conv1.out_side, &mut p1, &mut arg1);

    let mut a2 = vec![T::zero(); batch * g.conv2.out_len()];
    conv_forward(&p1, &t[2], &t[3], &g.conv2, batch, &mut a2, &mut cols);
    let mut p2 = vec![T::zero(); batch * g.flat];
    let mut arg2 = vec![0u32; p2.len()];
    relu_maxpool(&a2, batch * g.conv2.cout, g.conv2.out_side, &mut p2, &mut arg2);

    let mut z1 = vec![T::zero(); batch * f1];
    dense_forward(&p2, &t[4], &t[5], batch, g.flat, f1, &mut z1);
    let mut r1 = z1.clone();
    relu_inplace(&mut r1);
    let mut z2 = vec![T::zero(); batch * f2];
    dense_forward(&r1, &t[6], &t[7], batch, f1, f2, &mut z2);
    let mut r2 = z2.clone();
    relu_inplace(&mut r2);
    let mut z3 = vec![T::zero(); batch * f3];
    dense_forward(&r2, &t[8], &t[9], batch, f2, f3, &mut z3);
    let mut embedding = z3.clone();
    relu_inplace(&mut embedding);
    let mut logits = vec![T::zero(); batch * nc];
    dense_forward(&embedding, &t[10], &t[11], batch, f3, nc, &mut logits);

    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {} of sample {} in chunk", i % nc, i / nc)));
    }
    Ok(Activations { batch, input, a1, p1, arg1, a2, p2, arg2, z1, r1, z2, r2, z3, embedding, logits })
}

/// Backpropagates `dlogits` through a cached chunk, accumulating into `grads`.
pub(crate) fn backward_chunk<T: Scalar>(params: &ModelParams<T>, acts: &Activations<T>, dlogits: &[T], grads: &mut ModelParams<T>) -> Result<()> {
    let spec = &params.spec;
    let g = spec.geometry()?;
    let t = &params.tensors;
    let [f1, f2, f3] = spec.fc_widths;
    let nc = spec.n_classes;
    let b = acts.batch;
    let (head, tail) = grads.tensors.split_at_mut(10);

    let mut d3 = vec![T::zero(); b * f3];
    {
        let (w, bias) = tail.split_at_mut(1);
        dense_backward(&acts.embedding, dlogits, &t[10], b, f3, nc, &mut w[0], &mut bias[0], Some(&mut d3));
    }
    relu_mask(&acts.z3, &mut d3);
    let mut d2 = vec![T::zero(); b * f2];
    {
        let (w, bias) = head[8..10].split_at_mut(1);
        dense_backward(&acts.r2, &d3, &t[8], b, f2, f3, &mut w[0], &mut bias[0], Some(&mut d2));
    }
    relu_mask(&acts.z2, &mut d2);
    let mut d1 = vec![T::zero(); b * f1];
    {
        let (w, bias) = head[6..8].split_at_mut(1);
        dense_backward(&acts.r1, &d2, &t[6], b, f1, f2, &mut w[0], &mut bias[0], Some(&mut d1));
    }
    relu_mask(&acts.z1, &mut d1);
    let mut dflat = vec![T::zero(); b * g.flat];
    {
        let (w, bias) = head[4..6].split_at_mut(1);
        dense_backward(&acts.p2, &d1, &t[4], b, g.flat, f1, &mut w[0], &mut bias[0], Some(&mut dflat));
    }

    let mut da2 = vec![T::zero(); acts.a2.len()];
    relu_maxpool_backward(&dflat, &acts.a2, &acts.arg2, b * g.conv2.cout, g.conv2.out_side, &mut da2);
    let mut dp1 = vec![T::zero(); acts.p1.len()];
    let (mut cols, mut dcols) = (Vec::new(), Vec::new());
    {
        let (w, bias) = head[2..4].split_at_mut(1);
        conv_backward(&acts.p1, &da2, &t[2], &g.conv2, b, &mut w[0], &mut bias[0], Some(&mut dp1), &mut cols, &mut dcols);
    }
    let mut da1 = vec![T::zero(); acts.a1.len()];
    relu_maxpool_backward(&dp1, &acts.a1, &acts.arg1, b * g.conv1.cout, g.conv1.out_side, &mut da1);
    {
        let (w, bias) = head[0..2].split_at_mut(1);
        conv_backward(&acts.input, &da1, &t[0], &g.conv1, b, &mut w[0], &mut bias[0], None, &mut cols, &mut dcols);
    }
    Ok(())
}

/// Embedding and logits for a batch of flattened inputs.
pub fn forward_batch<T: Scalar>(params: &ModelParams<T>, inputs: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let n_in = params.spec.input_len();
    if inputs.len() % n_in != 0 {
        return Err(Error::ShapeMismatch { expected: format!("multiple of {n_in} values"), actual: inputs.len().to_string() });
    }
    let (mut emb, mut logits) = (Vec::new(), Vec::new());
    for chunk in inputs.chunks(CHUNK * n_in) {
        let acts = forward_chunk(params, chunk.to_vec(), chunk.len() / n_in)?;
        emb.extend(acts.embedding);
        logits.extend(acts.logits);
    }
    Ok((emb, logits))
}

/// Mean cross-entropy of a batch and its gradient for every parameter.
pub fn loss_and_grad<T: Scalar>(params: &ModelParams<T>, inputs: &[T], labels: &[usize]) -> Result<(T, ModelParams<T>)> {
    let (loss, grads, _) = loss_grad_correct(params, inputs, labels)?;
    Ok((loss, grads))
}

/// As [`loss_and_grad`], also counting correct argmax predictions.
pub(crate) fn loss_grad_correct<T: Scalar>(params: &ModelParams<T>, inputs: &[T], labels: &[usize]) -> Result<(T, ModelParams<T>, usize)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("loss_and_grad needs a non-empty batch".into()));
    }
    let n_in = params.spec.input_len();
    if inputs.len() != n * n_in {
        return Err(Error::ShapeMismatch { expected: format!("{n} x {n_in} inputs"), actual: inputs.len().to_string() });
    }
    let nc = params.spec.n_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= nc) {
        return Err(invalid(format!("label {bad} out of range for {nc} classes")));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grads = ModelParams::zeros(&params.spec)?;
    let mut loss = T::zero();
    let mut correct = 0;
    for (ci, chunk_labels) in labels.chunks(CHUNK).enumerate() {
        let start = ci * CHUNK * n_in;
        let chunk_in = inputs[start..start + chunk_labels.len() * n_in].to_vec();
        let acts = forward_chunk(params, chunk_in, chunk_labels.len())?;
        let mut dlogits = vec![T::zero(); acts.logits.len()];
        for (j, &y) in chunk_labels.iter().enumerate() {
            let row = &acts.logits[j * nc..(j + 1) * nc];
            let p = softmax(row);
            loss = loss - p[y].max(T::min_positive_value()).ln();
            if super::kernels::argmax(row) == y {
                correct += 1;
            }
            for c in 0..nc {
                let target = if c == y { T::one() } else { T::zero() };
                dlogits[j * nc + c] = (p[c] - target) * inv_n;
            }
        }
        backward_chunk(params, &acts, &dlogits, &mut grads)?;
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss:?}")));
    }
    Ok((loss, grads, correct))
}

/// Plain gradient step, used by the SGD optimizer and tests.
pub(crate) fn sgd_step<T: Scalar>(params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: T) {
    params.add_scaled(grads, -lr);
}
