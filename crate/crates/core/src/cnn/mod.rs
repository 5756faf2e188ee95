//! Inception-style convolutional classifier with exact backpropagation.
//!
//! A [`Network`] is a validated list of [`LayerSpec`]s plus one flat parameter
//! vector. Convolutions and hidden dense layers use ReLU; the last dense
//! layer produces the logits consumed by the terminal softmax.

mod ops;

use thiserror::Error;

use crate::numerics::{RngStream, Tensor3};
use crate::par;

pub use ops::softmax;
use ops::{global_avg_pool, global_avg_pool_backward, ConvOp, DenseOp, InceptionCache, InceptionOp, PoolOp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("label {0} outside the class range")]
    InvalidLabel(u8),
}

pub type Result<T> = std::result::Result<T, CnnError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        out_channels: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Path widths: 1x1, 1x1->3x3, 1x1->5x5, pool->1x1.
    Inception {
        paths: [usize; 4],
    },
    Dense {
        units: usize,
    },
    Softmax,
}

/// Knobs for the default desk-scale topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub stem_channels: usize,
    pub block1: [usize; 4],
    pub block2: [usize; 4],
    /// How many copies of each inception block to stack.
    pub inception_repeat: usize,
    pub dense_units: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            block1: [8, 16, 4, 8],
            block2: [16, 32, 8, 16],
            inception_repeat: 1,
            dense_units: 32,
        }
    }
}

impl ArchConfig {
    /// Conv3x3 -> Inception(block1) -> MaxPool3 s2 -> Inception(block2) ->
    /// GAP -> Dense -> Dense(2) -> Softmax.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v = vec![LayerSpec::Conv {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            out_channels: self.stem_channels,
        }];
        v.extend(std::iter::repeat_n(LayerSpec::Inception { paths: self.block1 }, self.inception_repeat));
        v.push(LayerSpec::MaxPool { kernel: 3, stride: 2 });
        v.extend(std::iter::repeat_n(LayerSpec::Inception { paths: self.block2 }, self.inception_repeat));
        v.push(LayerSpec::GlobalAvgPool);
        v.push(LayerSpec::Dense { units: self.dense_units });
        v.push(LayerSpec::Dense { units: 2 });
        v.push(LayerSpec::Softmax);
        v
    }
}

/// Flat gradient aligned with a network's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(ConvOp),
    Pool(PoolOp),
    Gap((usize, usize, usize)),
    Inception(Box<InceptionOp>),
    Dense(DenseOp),
    Softmax,
}

enum Cache {
    Conv(Tensor3),
    Pool(Vec<usize>),
    Gap,
    Inception(Box<InceptionCache>),
    Dense(Vec<f64>),
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: (usize, usize, usize),
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    params: Vec<f64>,
    head_layer: usize,
    head_offset: usize,
    classes: usize,
}

fn compile(input_shape: (usize, usize, usize), specs: &[LayerSpec]) -> Result<(Vec<Layer>, usize, usize, usize)> {
    if input_shape.0 == 0 || input_shape.1 == 0 || input_shape.2 == 0 {
        return Err(CnnError::InvalidSpec(format!("input shape {input_shape:?}")));
    }
    let mut layers = Vec::with_capacity(specs.len());
    let mut shape = input_shape;
    let mut flat = false;
    let mut offset = 0;
    let mut head = None;
    let last_dense = specs.iter().rposition(|s| matches!(s, LayerSpec::Dense { .. }));
    for (i, spec) in specs.iter().enumerate() {
        let spatial = |name: &str| {
            if flat {
                Err(CnnError::InvalidSpec(format!("{name} at layer {i} follows a flat layer")))
            } else {
                Ok(())
            }
        };
        let layer = match *spec {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                stride,
                out_channels,
            } => {
                spatial("conv")?;
                if kernel_h == 0 || kernel_w == 0 || stride == 0 || out_channels == 0 {
                    return Err(CnnError::InvalidSpec(format!("conv at layer {i} has a zero dimension")));
                }
                let op = ConvOp::new(shape, kernel_h, kernel_w, stride, out_channels, true, offset);
                offset += op.param_count();
                shape = op.out_shape();
                Layer::Conv(op)
            }
            LayerSpec::MaxPool { kernel, stride } => {
                spatial("pool")?;
                if kernel == 0 || stride == 0 {
                    return Err(CnnError::InvalidSpec(format!("pool at layer {i} has a zero dimension")));
                }
                let op = PoolOp::new(shape, kernel, stride);
                shape = op.out_shape();
                Layer::Pool(op)
            }
            LayerSpec::GlobalAvgPool => {
                spatial("global pool")?;
                let l = Layer::Gap(shape);
                shape = (1, 1, shape.2);
                flat = true;
                l
            }
            LayerSpec::Inception { paths } => {
                spatial("inception")?;
                if paths.contains(&0) {
                    return Err(CnnError::InvalidSpec(format!("inception at layer {i} has an empty path")));
                }
                let op = InceptionOp::new(shape, paths, offset);
                offset += op.param_count();
                shape = op.out_shape();
                Layer::Inception(Box::new(op))
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(CnnError::InvalidSpec(format!("dense at layer {i} has no units")));
                }
                if head.is_none() {
                    head = Some((i, offset));
                }
                let op = DenseOp {
                    inputs: shape.0 * shape.1 * shape.2,
                    units,
                    relu: Some(i) != last_dense,
                    offset,
                };
                offset += op.param_count();
                shape = (1, 1, units);
                flat = true;
                Layer::Dense(op)
            }
            LayerSpec::Softmax => {
                if i + 1 != specs.len() {
                    return Err(CnnError::InvalidSpec("softmax must be the last layer".into()));
                }
                if last_dense != Some(i.wrapping_sub(1)) {
                    return Err(CnnError::InvalidSpec("softmax must follow a dense layer".into()));
                }
                Layer::Softmax
            }
        };
        layers.push(layer);
    }
    if !matches!(specs.last(), Some(LayerSpec::Softmax)) {
        return Err(CnnError::InvalidSpec("architecture must end with softmax".into()));
    }
    let (head_layer, head_offset) = head.expect("softmax follows a dense layer");
    if shape.2 < 2 {
        return Err(CnnError::InvalidSpec("need at least two classes".into()));
    }
    Ok((layers, head_layer, head_offset, offset))
}

fn he_uniform(params: &mut [f64], fan_in: usize, rng: &mut RngStream) {
    let limit = (6.0 / fan_in as f64).sqrt();
    for p in params {
        *p = (2.0 * rng.unit() - 1.0) * limit;
    }
}

impl Network {
    /// Builds and initialises a network (He-uniform weights, zero biases).
    pub fn new(input_shape: (usize, usize, usize), specs: Vec<LayerSpec>, rng: &RngStream) -> Result<Self> {
        let (layers, head_layer, head_offset, n) = compile(input_shape, &specs)?;
        let classes = match specs[specs.len() - 2] {
            LayerSpec::Dense { units } => units,
            _ => unreachable!("validated by compile"),
        };
        let mut net = Self {
            input_shape,
            specs,
            layers,
            params: vec![0.0; n],
            head_layer,
            head_offset,
            classes,
        };
        net.init_layers(0, &mut rng.child("init"));
        Ok(net)
    }

    /// Rebuilds a network from stored parameters.
    pub fn from_parts(input_shape: (usize, usize, usize), specs: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let (layers, head_layer, head_offset, n) = compile(input_shape, &specs)?;
        if params.len() != n {
            return Err(CnnError::ShapeMismatch(format!("{} parameters for an architecture needing {n}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CnnError::ShapeMismatch("non-finite parameter".into()));
        }
        let classes = match specs[specs.len() - 2] {
            LayerSpec::Dense { units } => units,
            _ => unreachable!("validated by compile"),
        };
        Ok(Self {
            input_shape,
            specs,
            layers,
            params,
            head_layer,
            head_offset,
            classes,
        })
    }

    fn init_layers(&mut self, from: usize, rng: &mut RngStream) {
        let mut convs: Vec<ConvOp> = Vec::new();
        let mut denses: Vec<DenseOp> = Vec::new();
        for layer in &self.layers[from..] {
            match layer {
                Layer::Conv(c) => convs.push(c.clone()),
                Layer::Inception(b) => convs.extend(b.convs().into_iter().cloned()),
                Layer::Dense(d) => denses.push(d.clone()),
                _ => {}
            }
        }
        for c in convs {
            let w = c.weight_count();
            he_uniform(&mut self.params[c.offset..c.offset + w], c.fan_in(), rng);
            self.params[c.offset + w..c.offset + c.param_count()].fill(0.0);
        }
        for d in denses {
            let w = d.inputs * d.units;
            he_uniform(&mut self.params[d.offset..d.offset + w], d.inputs, rng);
            self.params[d.offset + w..d.offset + d.param_count()].fill(0.0);
        }
    }

    /// Draws fresh head parameters (every layer from the first dense one on).
    pub fn reinit_head(&mut self, rng: &RngStream) {
        self.init_layers(self.head_layer, &mut rng.child("head-init"));
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Index of the first dense layer.
    pub fn head_layer(&self) -> usize {
        self.head_layer
    }

    /// Parameters before this offset belong to the convolutional backbone.
    pub fn head_offset(&self) -> usize {
        self.head_offset
    }

    pub fn backbone_params(&self) -> &[f64] {
        &self.params[..self.head_offset]
    }

    pub fn head_params(&self) -> &[f64] {
        &self.params[self.head_offset..]
    }

    /// `true` for head parameters only.
    pub fn head_mask(&self) -> Vec<bool> {
        (0..self.params.len()).map(|i| i >= self.head_offset).collect()
    }

    pub fn full_mask(&self) -> Vec<bool> {
        vec![true; self.params.len()]
    }

    fn check_input(&self, input: &Tensor3) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(CnnError::ShapeMismatch(format!(
                "input {:?}, network expects {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn run(&self, from: usize, input: Tensor3, keep: bool) -> (Vec<(Tensor3, Cache)>, Vec<f64>) {
        let p = &self.params;
        let mut trace = Vec::new();
        let mut x = input;
        let mut logits = Vec::new();
        for layer in &self.layers[from..] {
            let (y, cache) = match layer {
                Layer::Conv(c) => {
                    let y = c.forward(p, &x);
                    (y.clone(), Cache::Conv(y))
                }
                Layer::Pool(op) => {
                    let (y, arg) = op.forward(&x);
                    (y, Cache::Pool(arg))
                }
                Layer::Gap(_) => {
                    let v = global_avg_pool(&x);
                    let n = v.len();
                    (Tensor3::from_data(1, 1, n, v).expect("finite"), Cache::Gap)
                }
                Layer::Inception(b) => {
                    let (y, c) = b.forward(p, &x);
                    (y, Cache::Inception(Box::new(c)))
                }
                Layer::Dense(d) => {
                    let v = d.forward(p, x.data());
                    let n = v.len();
                    (Tensor3::from_data(1, 1, n, v.clone()).expect("finite"), Cache::Dense(v))
                }
                Layer::Softmax => {
                    logits = x.data().to_vec();
                    let n = logits.len();
                    let prob = softmax(&logits);
                    (Tensor3::from_data(1, 1, n, prob).expect("finite"), Cache::Softmax)
                }
            };
            let out_cache = if keep { Some(cache) } else { None };
            let prev = std::mem::replace(&mut x, y);
            if let Some(c) = out_cache {
                trace.push((prev, c));
            }
        }
        (trace, logits)
    }

    /// Class probabilities for one image.
    pub fn forward(&self, input: &Tensor3) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let (_, logits) = self.run(0, input.clone(), false);
        Ok(softmax(&logits))
    }

    /// Probability of class 1 for each input, computed in parallel.
    pub fn score_batch(&self, inputs: &[Tensor3]) -> Result<Vec<f64>> {
        par::map(inputs, |x| self.forward(x).map(|p| p[1])).into_iter().collect()
    }

    /// Output of the backbone (the input seen by the first dense layer).
    pub fn backbone_features(&self, input: &Tensor3) -> Result<Tensor3> {
        self.check_input(input)?;
        let p = &self.params;
        let mut x = input.clone();
        for layer in &self.layers[..self.head_layer] {
            x = match layer {
                Layer::Conv(c) => c.forward(p, &x),
                Layer::Pool(op) => op.forward(&x).0,
                Layer::Gap(_) => {
                    let v = global_avg_pool(&x);
                    let n = v.len();
                    Tensor3::from_data(1, 1, n, v).expect("finite")
                }
                Layer::Inception(b) => b.forward(p, &x).0,
                Layer::Dense(_) | Layer::Softmax => unreachable!("head starts at the first dense layer"),
            };
        }
        Ok(x)
    }

    /// Cross-entropy loss `-ln p(label)` and its exact gradient.
    pub fn backward(&self, input: &Tensor3, label: u8) -> Result<(f64, Gradients)> {
        self.check_input(input)?;
        self.backward_from(0, input.clone(), label)
    }

    /// Like [`Network::backward`], but starting from backbone features; the
    /// backbone part of the returned gradient is zero.
    pub fn head_backward(&self, features: &Tensor3, label: u8) -> Result<(f64, Gradients)> {
        self.backward_from(self.head_layer, features.clone(), label)
    }

    /// Class probabilities computed from backbone features.
    pub fn head_forward(&self, features: &Tensor3) -> Vec<f64> {
        let (_, logits) = self.run(self.head_layer, features.clone(), false);
        softmax(&logits)
    }

    fn backward_from(&self, from: usize, input: Tensor3, label: u8) -> Result<(f64, Gradients)> {
        if label as usize >= self.classes {
            return Err(CnnError::InvalidLabel(label));
        }
        let (trace, logits) = self.run(from, input, true);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let loss = lse - logits[label as usize];

        let p = &self.params;
        let mut grads = Gradients::zeros(p.len());
        let mut g: Option<Tensor3> = None;
        for (idx, (layer, (input, cache))) in self.layers[from..].iter().zip(&trace).enumerate().rev() {
            let want_input = idx > 0;
            g = match (layer, cache) {
                (Layer::Softmax, Cache::Softmax) => {
                    let mut probs = softmax(&logits);
                    probs[label as usize] -= 1.0;
                    let n = probs.len();
                    Some(Tensor3::from_data(1, 1, n, probs).expect("finite"))
                }
                (Layer::Dense(d), Cache::Dense(out)) => {
                    let go = g.take().expect("upstream gradient");
                    let gi = d.backward(p, input.data(), out, go.data(), &mut grads.0);
                    let (h, w, c) = input.shape();
                    Some(Tensor3::from_data(h, w, c, gi).expect("finite"))
                }
                (Layer::Gap(shape), Cache::Gap) => {
                    let go = g.take().expect("upstream gradient");
                    Some(global_avg_pool_backward(*shape, go.data()))
                }
                (Layer::Pool(op), Cache::Pool(arg)) => {
                    let go = g.take().expect("upstream gradient");
                    Some(op.backward(arg, &go))
                }
                (Layer::Conv(c), Cache::Conv(out)) => {
                    let go = g.take().expect("upstream gradient");
                    c.backward(p, input, out, &go, &mut grads.0, want_input)
                }
                (Layer::Inception(b), Cache::Inception(c)) => {
                    let go = g.take().expect("upstream gradient");
                    b.backward(p, input, c, &go, &mut grads.0, want_input)
                }
                _ => unreachable!("trace mirrors layers"),
            };
            if !want_input {
                break;
            }
        }
        Ok((loss, grads))
    }
}

/// Conv layer as a free function: cross-correlation with zero "same" padding
/// (no activation). `kernels` is `[kh][kw][c_in][c_out]`.
pub fn conv2d(
    input: &Tensor3,
    kernels: &[f64],
    bias: &[f64],
    kernel: (usize, usize),
    stride: usize,
) -> Result<Tensor3> {
    let cin = input.channels();
    let cout = bias.len();
    if kernels.len() != kernel.0 * kernel.1 * cin * cout || stride == 0 || cout == 0 {
        return Err(CnnError::ShapeMismatch(format!(
            "{} kernel values for {}x{}x{}x{}",
            kernels.len(),
            kernel.0,
            kernel.1,
            cin,
            cout
        )));
    }
    let op = ConvOp::new(input.shape(), kernel.0, kernel.1, stride, cout, false, 0);
    let mut params = kernels.to_vec();
    params.extend_from_slice(bias);
    Ok(op.forward(&params, input))
}

pub fn maxpool(input: &Tensor3, kernel: usize, stride: usize) -> Result<Tensor3> {
    if kernel == 0 || stride == 0 {
        return Err(CnnError::ShapeMismatch("pool kernel and stride must be positive".into()));
    }
    Ok(PoolOp::new(input.shape(), kernel, stride).forward(input).0)
}

/// Evaluates a single inception block with explicit parameters laid out as
/// six consecutive convolutions (p1, p2 reduce, p2 3x3, p3 reduce, p3 5x5, p4).
pub fn inception_forward(input: &Tensor3, paths: [usize; 4], params: &[f64]) -> Result<Tensor3> {
    let op = InceptionOp::new(input.shape(), paths, 0);
    if params.len() != op.param_count() {
        return Err(CnnError::ShapeMismatch(format!(
            "{} parameters for a block needing {}",
            params.len(),
            op.param_count()
        )));
    }
    Ok(op.forward(params, input).0)
}

pub fn inception_param_count(in_channels: usize, paths: [usize; 4]) -> usize {
    InceptionOp::new((1, 1, in_channels), paths, 0).param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(h: usize, w: usize, c: usize, rng: &mut RngStream) -> Tensor3 {
        let d = (0..h * w * c).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect();
        Tensor3::from_data(h, w, c, d).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = RngStream::new(1);
        let x = rand_tensor(4, 5, 1, &mut rng);
        let y = conv2d(&x, &[1.0], &[0.0], (1, 1), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_filter_interior() {
        let x = Tensor3::filled(5, 5, 1, 2.0);
        let y = conv2d(&x, &[1.0; 9], &[0.0], (3, 3), 1).unwrap();
        assert_eq!(y.get(2, 2, 0), 18.0);
        assert_eq!(y.get(0, 0, 0), 8.0);
    }

    #[test]
    fn strided_shape() {
        let x = Tensor3::zeros(6, 6, 2);
        let y = conv2d(&x, &vec![0.0; 3 * 3 * 2 * 4], &[0.0; 4], (3, 3), 2).unwrap();
        assert_eq!(y.shape(), (3, 3, 4));
        assert!(conv2d(&x, &[0.0; 5], &[0.0], (3, 3), 1).is_err());
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = RngStream::new(2);
        let a = rand_tensor(6, 5, 3, &mut rng);
        let b = rand_tensor(6, 5, 3, &mut rng);
        let k: Vec<f64> = (0..3 * 3 * 3 * 4).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect();
        let zero = [0.0; 4];
        let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| 2.5 * x - 0.5 * y).collect();
        let mix = Tensor3::from_data(6, 5, 3, mix).unwrap();
        let lhs = conv2d(&mix, &k, &zero, (3, 3), 1).unwrap();
        let ca = conv2d(&a, &k, &zero, (3, 3), 1).unwrap();
        let cb = conv2d(&b, &k, &zero, (3, 3), 1).unwrap();
        for i in 0..lhs.data().len() {
            assert!((lhs.data()[i] - (2.5 * ca.data()[i] - 0.5 * cb.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling() {
        let x = Tensor3::from_data(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool(&x, 2, 2).unwrap().data(), &[4.0]);
        let c = Tensor3::filled(5, 5, 3, -1.5);
        let y = maxpool(&c, 3, 2).unwrap();
        assert_eq!(y.shape(), (3, 3, 3));
        assert!(y.data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn inception_shapes() {
        let x = Tensor3::filled(7, 6, 5, 0.3);
        let paths = [8, 16, 4, 8];
        let n = inception_param_count(5, paths);
        let y = inception_forward(&x, paths, &vec![0.0; n]).unwrap();
        assert_eq!(y.shape(), (7, 6, 36));
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(inception_forward(&x, paths, &[0.0]).is_err());
    }

    #[test]
    fn softmax_values() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0]);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-15);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-15);
    }

    #[test]
    fn architecture_validation() {
        let rng = RngStream::new(0);
        let bad = vec![LayerSpec::Softmax, LayerSpec::Dense { units: 2 }];
        assert!(Network::new((4, 4, 1), bad, &rng).is_err());
        let no_softmax = vec![LayerSpec::GlobalAvgPool, LayerSpec::Dense { units: 2 }];
        assert!(Network::new((4, 4, 1), no_softmax, &rng).is_err());
        let conv_after_flat = vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Conv { kernel_h: 1, kernel_w: 1, stride: 1, out_channels: 1 },
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ];
        assert!(Network::new((4, 4, 1), conv_after_flat, &rng).is_err());
    }

    #[test]
    fn forward_probabilities() {
        let rng = RngStream::new(3);
        let net = Network::new((16, 16, 3), ArchConfig::default().layers(), &rng).unwrap();
        let mut r = RngStream::new(4);
        let x = rand_tensor(16, 16, 3, &mut r);
        let p = net.forward(&x).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(net.forward(&Tensor3::zeros(16, 16, 2)).is_err());
        let feats = net.backbone_features(&x).unwrap();
        assert_eq!(feats.shape(), (1, 1, 72));
        assert_eq!(net.head_forward(&feats), p);
    }

    #[test]
    fn zero_head_gives_ln2() {
        let rng = RngStream::new(5);
        let mut net = Network::new((8, 8, 3), ArchConfig::default().layers(), &rng).unwrap();
        let off = net.head_offset();
        net.params_mut()[off..].fill(0.0);
        let x = Tensor3::filled(8, 8, 3, 0.5);
        let (loss, g) = net.backward(&x, 1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.is_finite());
        assert!(matches!(net.backward(&x, 2), Err(CnnError::InvalidLabel(2))));
    }

    #[test]
    fn saturated_prediction_has_zero_loss() {
        let rng = RngStream::new(6);
        let specs = vec![LayerSpec::GlobalAvgPool, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax];
        let mut net = Network::new((2, 2, 1), specs, &rng).unwrap();
        // weights [2][1], biases [2]
        net.params_mut().copy_from_slice(&[0.0, 0.0, 1000.0, -1000.0]);
        let (loss, g) = net.backward(&Tensor3::filled(2, 2, 1, 1.0), 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_backward_matches_full_on_head() {
        let rng = RngStream::new(7);
        let net = Network::new((8, 8, 3), ArchConfig::default().layers(), &rng).unwrap();
        let mut r = RngStream::new(8);
        let x = rand_tensor(8, 8, 3, &mut r);
        let (l1, g1) = net.backward(&x, 1).unwrap();
        let (l2, g2) = net.head_backward(&net.backbone_features(&x).unwrap(), 1).unwrap();
        assert_eq!(l1, l2);
        let off = net.head_offset();
        assert_eq!(&g1.0[off..], &g2.0[off..]);
        assert!(g2.0[..off].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reinit_head_leaves_backbone() {
        let rng = RngStream::new(9);
        let mut net = Network::new((8, 8, 3), ArchConfig::default().layers(), &rng).unwrap();
        let before = net.clone();
        net.reinit_head(&RngStream::new(10));
        assert_eq!(net.backbone_params(), before.backbone_params());
        assert_ne!(net.head_params(), before.head_params());
        let rebuilt = Network::from_parts(net.input_shape(), net.specs().to_vec(), net.params().to_vec()).unwrap();
        assert_eq!(rebuilt, net);
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::*;

    /// Central differences with h = 1e-5 on a sample of parameters.
    fn check(net: &Network, x: &Tensor3, label: u8, samples: usize, seed: u64) -> f64 {
        let (_, g) = net.backward(x, label).unwrap();
        let mut rng = RngStream::new(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let i = rng.below(net.param_count());
            let mut plus = net.clone();
            plus.params_mut()[i] += 1e-5;
            let mut minus = net.clone();
            minus.params_mut()[i] -= 1e-5;
            let lp = -plus.forward(x).unwrap()[label as usize].ln();
            let lm = -minus.forward(x).unwrap()[label as usize].ln();
            let fd = (lp - lm) / 2e-5;
            let rel = (fd - g.0[i]).abs() / fd.abs().max(g.0[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn toy_net_gradients() {
        let rng = RngStream::new(21);
        let specs = vec![
            LayerSpec::Conv { kernel_h: 3, kernel_w: 3, stride: 2, out_channels: 3 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ];
        let net = Network::new((5, 5, 2), specs, &rng).unwrap();
        let mut r = RngStream::new(22);
        let x = Tensor3::from_data(5, 5, 2, (0..50).map(|_| r.uniform(-1.0, 1.0).unwrap()).collect()).unwrap();
        assert!(check(&net, &x, 0, 40, 1) < 1e-4);
    }

    #[test]
    fn default_arch_gradients() {
        let rng = RngStream::new(23);
        let net = Network::new((16, 16, 3), ArchConfig::default().layers(), &rng).unwrap();
        let mut r = RngStream::new(24);
        let x = Tensor3::from_data(16, 16, 3, (0..768).map(|_| r.uniform(0.0, 1.0).unwrap()).collect()).unwrap();
        assert!(check(&net, &x, 1, 30, 2) < 1e-4);
    }
}
