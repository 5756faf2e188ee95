//! Stacked sparse autoencoder trained greedily, one sigmoid layer at a time,
//! with a Bernoulli-KL sparsity penalty on mean hidden activations.

use thiserror::Error;

use crate::numerics::{Matrix, RngStream};
use crate::optim::{adam_step, AdamState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaeError {
    #[error("expected input width {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss in layer {layer} at epoch {epoch}")]
    NonFinite { layer: usize, epoch: usize },
    #[error("invalid SAE config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SaeError>;

const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeConfig {
    /// Encoder widths after the input; the decoder mirrors them.
    pub layer_sizes: Vec<usize>,
    pub gamma: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![48, 32, 24, 16],
            gamma: 0.05,
            beta: 1.0,
            lr: 1e-3,
            epochs: 30,
            batch_size: 20,
        }
    }
}

impl SaeConfig {
    /// Default widths scaled by `input / 60` when the input is narrower than 60.
    pub fn default_widths(input: usize) -> Vec<usize> {
        let base = [48usize, 32, 24, 16];
        if input >= 60 {
            return base.to_vec();
        }
        base.iter().map(|&w| ((w * input) as f64 / 60.0).round().max(1.0) as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaeError::InvalidConfig(m));
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return bad(format!("layer widths must be positive: {:?}", self.layer_sizes));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0,1), got {}", self.gamma));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One autoencoder layer. Parameters are stored flat as
/// `W_enc (hidden x input), b_enc, W_dec (input x hidden), b_dec`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeLayer {
    pub inputs: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl SaeLayer {
    pub fn param_count(inputs: usize, hidden: usize) -> usize {
        2 * inputs * hidden + inputs + hidden
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            inputs,
            hidden,
            params: vec![0.0; Self::param_count(inputs, hidden)],
        }
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot(inputs: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut layer = Self::zeros(inputs, hidden);
        let a = (6.0 / (inputs + hidden) as f64).sqrt();
        let (we, _, wd, _) = layer.offsets();
        let n = inputs * hidden;
        for i in (we..we + n).chain(wd..wd + n) {
            layer.params[i] = a * (2.0 * rng.unit() - 1.0);
        }
        layer
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let n = self.inputs * self.hidden;
        (0, n, n + self.hidden, 2 * n + self.hidden)
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let (_, be, _, _) = self.offsets();
        let p = &self.params;
        (0..self.hidden)
            .map(|j| {
                let w = &p[j * self.inputs..(j + 1) * self.inputs];
                sigmoid(p[be + j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect()
    }

    pub fn decode(&self, h: &[f64]) -> Vec<f64> {
        let (_, _, wd, bd) = self.offsets();
        let p = &self.params;
        (0..self.inputs)
            .map(|i| {
                let w = &p[wd + i * self.hidden..wd + (i + 1) * self.hidden];
                sigmoid(p[bd + i] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub layers: Vec<SaeLayer>,
}

impl SaeModel {
    pub fn zeros(input: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut prev = input;
        for &w in widths {
            layers.push(SaeLayer::zeros(prev, w));
            prev = w;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn code_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(SaeError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

pub fn encode(m: &SaeModel, x: &[f64]) -> Result<Vec<f64>> {
    m.check(x)?;
    Ok(m.layers.iter().fold(x.to_vec(), |h, l| l.encode(&h)))
}

pub fn reconstruct(m: &SaeModel, x: &[f64]) -> Result<Vec<f64>> {
    let code = encode(m, x)?;
    Ok(m.layers.iter().rev().fold(code, |h, l| l.decode(&h)))
}

pub fn reconstruct_all(m: &SaeModel, x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (i, row) in x.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&reconstruct(m, row)?);
    }
    Ok(out)
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

fn kl(gamma: f64, rho: f64) -> f64 {
    gamma * (gamma / rho).ln() + (1.0 - gamma) * ((1.0 - gamma) / (1.0 - rho)).ln()
}

/// Sum over neurons of `KL(gamma || mean activation)`; rows are samples.
pub fn kl_sparsity(activations: &Matrix, gamma: f64) -> f64 {
    mean_activations(activations).into_iter().map(|r| kl(gamma, clamp(r))).sum()
}

fn mean_activations(a: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; a.cols()];
    for row in a.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = a.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLoss {
    pub mse: f64,
    pub sparsity: f64,
    pub total: f64,
}

fn forward_batch(layer: &SaeLayer, batch: &Matrix) -> Result<(Matrix, Matrix)> {
    if batch.rows() == 0 {
        return Err(SaeError::EmptyBatch);
    }
    if batch.cols() != layer.inputs {
        return Err(SaeError::DimensionMismatch {
            expected: layer.inputs,
            got: batch.cols(),
        });
    }
    let mut h = Matrix::zeros(batch.rows(), layer.hidden);
    let mut y = Matrix::zeros(batch.rows(), layer.inputs);
    for (b, x) in batch.iter_rows().enumerate() {
        let hb = layer.encode(x);
        y.row_mut(b).copy_from_slice(&layer.decode(&hb));
        h.row_mut(b).copy_from_slice(&hb);
    }
    Ok((h, y))
}

fn loss_from(batch: &Matrix, h: &Matrix, y: &Matrix, cfg: &SaeConfig) -> LayerLoss {
    let n = (batch.rows() * batch.cols()) as f64;
    let mse = batch.data().iter().zip(y.data()).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n;
    let sparsity = kl_sparsity(h, cfg.gamma);
    LayerLoss {
        mse,
        sparsity,
        total: mse + cfg.beta * sparsity,
    }
}

/// Reconstruction MSE of a single layer, its sparsity penalty and the
/// weighted total.
pub fn layer_loss(layer: &SaeLayer, batch: &Matrix, cfg: &SaeConfig) -> Result<LayerLoss> {
    let (h, y) = forward_batch(layer, batch)?;
    Ok(loss_from(batch, &h, &y, cfg))
}

/// Loss and its exact gradient with respect to `layer.params`.
pub fn layer_gradient(layer: &SaeLayer, batch: &Matrix, cfg: &SaeConfig) -> Result<(LayerLoss, Vec<f64>)> {
    let (h, y) = forward_batch(layer, batch)?;
    let loss = loss_from(batch, &h, &y, cfg);
    let (ni, nh) = (layer.inputs, layer.hidden);
    let (_, be, wd, bd) = layer.offsets();
    let p = &layer.params;
    let rows = batch.rows() as f64;
    let scale = 2.0 / (rows * ni as f64);

    let dkl: Vec<f64> = mean_activations(&h)
        .into_iter()
        .map(|r| {
            if r < CLAMP || r > 1.0 - CLAMP {
                0.0
            } else {
                cfg.beta * (-cfg.gamma / r + (1.0 - cfg.gamma) / (1.0 - r)) / rows
            }
        })
        .collect();

    let mut g = vec![0.0; p.len()];
    let mut dy = vec![0.0; ni];
    let mut dh = vec![0.0; nh];
    for b in 0..batch.rows() {
        let (x, hb, yb) = (batch.row(b), h.row(b), y.row(b));
        for i in 0..ni {
            dy[i] = scale * (yb[i] - x[i]) * yb[i] * (1.0 - yb[i]);
        }
        dh.copy_from_slice(&dkl);
        for i in 0..ni {
            let row = wd + i * nh;
            for j in 0..nh {
                g[row + j] += dy[i] * hb[j];
                dh[j] += p[row + j] * dy[i];
            }
            g[bd + i] += dy[i];
        }
        for j in 0..nh {
            let d = dh[j] * hb[j] * (1.0 - hb[j]);
            let row = j * ni;
            for i in 0..ni {
                g[row + i] += d * x[i];
            }
            g[be + j] += d;
        }
    }
    Ok((loss, g))
}

/// Per-layer loss on the full layer input: index 0 is the loss before
/// training, index `e + 1` the loss after epoch `e`.
pub type SaeHistory = Vec<Vec<LayerLoss>>;

/// Greedy layer-wise training: each layer is fitted on the codes of the
/// already-trained layers before it, then frozen.
pub fn train_layerwise(x: &Matrix, cfg: &SaeConfig, rng: &RngStream) -> Result<(SaeModel, SaeHistory)> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(SaeError::EmptyBatch);
    }
    let mut layers = Vec::new();
    let mut history = Vec::new();
    let mut input = x.clone();
    for (d, &width) in cfg.layer_sizes.iter().enumerate() {
        let lrng = rng.child_indexed("sae-layer", d);
        let mut layer = SaeLayer::glorot(input.cols(), width, &mut lrng.child("init"));
        let mut adam = AdamState::new(layer.params.len(), cfg.lr);
        let mut hist = vec![layer_loss(&layer, &input, cfg)?];
        let mut order: Vec<usize> = (0..input.rows()).collect();
        for epoch in 0..cfg.epochs {
            lrng.child_indexed("epoch", epoch).shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = input.select_rows(chunk);
                let (_, g) = layer_gradient(&layer, &batch, cfg)?;
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(SaeError::NonFinite { layer: d, epoch });
                }
                adam_step(&mut adam, &mut layer.params, &g, None).map_err(|_| SaeError::NonFinite { layer: d, epoch })?;
            }
            let l = layer_loss(&layer, &input, cfg)?;
            if !l.total.is_finite() {
                return Err(SaeError::NonFinite { layer: d, epoch });
            }
            hist.push(l);
        }
        log::debug!(
            "sae layer {d}: loss {:.6} -> {:.6}",
            hist[0].total,
            hist.last().map_or(f64::NAN, |l| l.total)
        );
        let mut codes = Matrix::zeros(input.rows(), width);
        for (i, row) in input.iter_rows().enumerate() {
            codes.row_mut(i).copy_from_slice(&layer.encode(row));
        }
        input = codes;
        layers.push(layer);
        history.push(hist);
    }
    Ok((SaeModel { layers }, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_unit(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = 0.1 + 0.8 * rng.unit();
            }
        }
        m
    }

    #[test]
    fn encode_examples() {
        let zero = SaeModel::zeros(60, &[48, 32, 24, 16]);
        let x = vec![0.3; 60];
        let code = encode(&zero, &x).unwrap();
        assert_eq!(code.len(), 16);
        assert!(code.iter().all(|&c| c == 0.5));
        assert!(reconstruct(&zero, &x).unwrap().iter().all(|&c| c == 0.5));
        let mut one = SaeLayer::zeros(1, 1);
        one.params[0] = 1.0;
        let m = SaeModel { layers: vec![one] };
        assert!((encode(&m, &[0.5]).unwrap()[0] - 0.622459).abs() < 1e-6);
        assert!(matches!(encode(&m, &[0.5, 0.5]), Err(SaeError::DimensionMismatch { .. })));
    }

    #[test]
    fn kl_examples() {
        let at = |v: f64| Matrix::from_rows(&[[v], [v]]).unwrap();
        assert!(kl_sparsity(&at(0.05), 0.05).abs() < 1e-15);
        let hand = 0.05 * (0.5f64).ln() + 0.95 * (0.95f64 / 0.9).ln();
        assert!((kl_sparsity(&at(0.1), 0.05) - hand).abs() < 1e-15);
        assert!((hand - 0.0167065).abs() < 1e-6);
        assert!(kl_sparsity(&at(0.2), 0.05) > kl_sparsity(&at(0.1), 0.05));
        for i in 1..100 {
            assert!(kl_sparsity(&at(i as f64 / 100.0), 0.05) >= 0.0);
        }
        assert!(kl_sparsity(&at(0.0), 0.05).is_finite());
        assert!(kl_sparsity(&at(1.0), 0.05).is_finite());
    }

    #[test]
    fn loss_examples() {
        // One input, one hidden unit; the decoder bias sets x_re = 0.7.
        let mut layer = SaeLayer::zeros(1, 1);
        layer.params[3] = (0.7f64 / 0.3).ln();
        let batch = Matrix::from_rows(&[[0.5]]).unwrap();
        let cfg = SaeConfig { gamma: 0.5, beta: 0.0, ..SaeConfig::default() };
        let l = layer_loss(&layer, &batch, &cfg).unwrap();
        assert!((l.mse - 0.04).abs() < 1e-12);
        assert_eq!(l.total, l.mse);
        let cfg = SaeConfig { gamma: 0.5, beta: 3.0, ..SaeConfig::default() };
        assert!(layer_loss(&layer, &batch, &cfg).unwrap().sparsity.abs() < 1e-15);
        assert_eq!(layer_loss(&layer, &Matrix::zeros(0, 1), &cfg), Err(SaeError::EmptyBatch));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(21);
        let layer = SaeLayer::glorot(6, 4, &mut rng);
        let batch = random_unit(9, 6, &mut rng);
        let cfg = SaeConfig { gamma: 0.05, beta: 1.0, ..SaeConfig::default() };
        let (_, g) = layer_gradient(&layer, &batch, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..layer.params.len() {
            let mut up = layer.clone();
            up.params[i] += h;
            let mut dn = layer.clone();
            dn.params[i] -= h;
            let num = (layer_loss(&up, &batch, &cfg).unwrap().total - layer_loss(&dn, &batch, &cfg).unwrap().total) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn overfits_without_bottleneck() {
        let mut rng = RngStream::new(5);
        let x = random_unit(50, 4, &mut rng);
        let cfg = SaeConfig {
            layer_sizes: vec![8],
            beta: 0.0,
            lr: 0.01,
            epochs: 400,
            batch_size: 10,
            ..SaeConfig::default()
        };
        let (m, hist) = train_layerwise(&x, &cfg, &RngStream::new(6)).unwrap();
        let last = hist[0].last().unwrap();
        assert!(last.mse <= 1e-3, "mse {}", last.mse);
        let back = reconstruct_all(&m, &x).unwrap();
        let mse: f64 = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 200.0;
        assert!((mse - last.mse).abs() < 1e-12);
    }

    #[test]
    fn layerwise_training_reduces_loss_and_is_deterministic() {
        let mut rng = RngStream::new(8);
        let x = random_unit(60, 12, &mut rng);
        let cfg = SaeConfig {
            layer_sizes: SaeConfig::default_widths(12),
            epochs: 5,
            lr: 0.01,
            ..SaeConfig::default()
        };
        assert_eq!(cfg.layer_sizes, vec![10, 6, 5, 3]);
        let (a, hist) = train_layerwise(&x, &cfg, &RngStream::new(1)).unwrap();
        let (b, _) = train_layerwise(&x, &cfg, &RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(hist.len(), 4);
        assert!(hist[0].last().unwrap().total < hist[0][0].total);
        let back = reconstruct_all(&a, &x).unwrap();
        assert_eq!((back.rows(), back.cols()), (60, 12));
        for i in [0, 17, 59] {
            assert_eq!(back.row(i), &reconstruct(&a, x.row(i)).unwrap()[..]);
        }
        assert!(back.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let x = random_unit(10, 5, &mut RngStream::new(2));
        let cfg = SaeConfig { layer_sizes: vec![3], epochs: 0, ..SaeConfig::default() };
        let (m, _) = train_layerwise(&x, &cfg, &RngStream::new(4)).unwrap();
        let init = SaeLayer::glorot(5, 3, &mut RngStream::new(4).child_indexed("sae-layer", 0).child("init"));
        assert_eq!(m.layers[0], init);
    }

    #[test]
    fn config_validation() {
        assert!(SaeConfig::default().validate().is_ok());
        assert!(SaeConfig { gamma: 1.0, ..SaeConfig::default() }.validate().is_err());
        assert!(SaeConfig { layer_sizes: vec![4, 0], ..SaeConfig::default() }.validate().is_err());
        assert_eq!(SaeConfig::default_widths(60), vec![48, 32, 24, 16]);
    }
}
