//! Channel boosting and the staged transfer-learning protocol.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cnn::{LayerSpec, Network};
use crate::imaging::{encode_row, ChurnImage, ImageLayout};
use crate::numerics::{RngStream, Tensor3};
use crate::optim::{self, ImageSet, OptimError, TrainConfig, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoostError {
    #[error("spatial mismatch: original {original:?}, auxiliary {auxiliary:?}")]
    SpatialMismatch { original: (usize, usize), auxiliary: (usize, usize) },
    #[error("unknown boost mode {0:?} (expected none, replace or stack)")]
    UnknownMode(String),
    #[error("bad channel tags {0:?}")]
    BadTags(String),
    #[error(transparent)]
    Train(#[from] OptimError),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, BoostError>;

/// How auxiliary channels enter the CNN input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoostMode {
    /// Original channels only; the plain-CNN baseline.
    None,
    /// Auxiliary channels substitute the original ones.
    Replace,
    /// Original channels followed by auxiliary channels.
    Stack,
}

impl BoostMode {
    pub fn channels(self, original: usize, auxiliary: usize) -> usize {
        match self {
            BoostMode::None => original,
            BoostMode::Replace => auxiliary,
            BoostMode::Stack => original + auxiliary,
        }
    }

    pub fn uses_auxiliary(self) -> bool {
        self != BoostMode::None
    }

    pub fn name(self) -> &'static str {
        match self {
            BoostMode::None => "none",
            BoostMode::Replace => "replace",
            BoostMode::Stack => "stack",
        }
    }
}

impl fmt::Display for BoostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoostMode {
    type Err = BoostError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "plain" => Ok(BoostMode::None),
            "replace" => Ok(BoostMode::Replace),
            "stack" => Ok(BoostMode::Stack),
            other => Err(BoostError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSource {
    Original,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedImage {
    pub pixels: Tensor3,
    pub provenance: Vec<ChannelSource>,
    pub source_row: usize,
}

impl BoostedImage {
    /// One letter per channel: `O` original, `A` auxiliary.
    pub fn tags(&self) -> String {
        tags(&self.provenance)
    }
}

pub fn tags(p: &[ChannelSource]) -> String {
    p.iter()
        .map(|c| match c {
            ChannelSource::Original => 'O',
            ChannelSource::Auxiliary => 'A',
        })
        .collect()
}

pub fn parse_tags(s: &str) -> Result<Vec<ChannelSource>> {
    s.chars()
        .map(|c| match c {
            'O' => Ok(ChannelSource::Original),
            'A' => Ok(ChannelSource::Auxiliary),
            _ => Err(BoostError::BadTags(s.to_string())),
        })
        .collect()
}

/// Combines an original image with its auxiliary reconstruction.
pub fn boost(original: &ChurnImage, auxiliary: &ChurnImage, mode: BoostMode) -> Result<BoostedImage> {
    let (o, a) = (&original.pixels, &auxiliary.pixels);
    if (o.height(), o.width()) != (a.height(), a.width()) {
        return Err(BoostError::SpatialMismatch {
            original: (o.height(), o.width()),
            auxiliary: (a.height(), a.width()),
        });
    }
    let (pixels, provenance) = match mode {
        BoostMode::None => (o.clone(), vec![ChannelSource::Original; o.channels()]),
        BoostMode::Replace => (a.clone(), vec![ChannelSource::Auxiliary; a.channels()]),
        BoostMode::Stack => {
            let mut p = vec![ChannelSource::Original; o.channels()];
            p.extend(std::iter::repeat_n(ChannelSource::Auxiliary, a.channels()));
            (o.concat_channels(a).expect("spatial dims checked"), p)
        }
    };
    Ok(BoostedImage {
        pixels,
        provenance,
        source_row: original.source_row,
    })
}

/// Scales 0..255 pixels to the unit range the network is trained on.
pub fn network_input(pixels: &Tensor3) -> Tensor3 {
    let (h, w, c) = pixels.shape();
    let data = pixels.data().iter().map(|v| v / 255.0).collect();
    Tensor3::from_data(h, w, c, data).expect("scaling keeps values finite")
}

/// Synthetic source task used in place of a large pretraining corpus.
///
/// Each sample is a random feature row encoded with the target layout and
/// size. Class 1 rows have a raised mean and a wider spread. Auxiliary
/// channels, when the mode uses them, are a contracted copy of the row
/// that mimics an autoencoder reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTask {
    pub samples: usize,
    pub layout: ImageLayout,
    pub size: usize,
    pub mode: BoostMode,
}

impl SourceTask {
    pub fn generate(&self, rng: &RngStream) -> Result<ImageSet> {
        let n = self.layout.len();
        let mut images = Vec::with_capacity(self.samples);
        let mut labels = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let mut r = rng.child_indexed("source-sample", i);
            let label = u8::from(i % 2 == 1);
            let (mean, sd) = if label == 1 { (0.5, 0.22) } else { (0.4, 0.12) };
            let row: Vec<f64> = (0..n).map(|_| 255.0 * (mean + sd * r.normal()).clamp(0.0, 1.0)).collect();
            let aux: Vec<f64> = row.iter().map(|v| 0.5 * v + 0.5 * 255.0 * mean).collect();
            let err = |e: crate::imaging::ImagingError| BoostError::Other(e.to_string());
            let orig = encode_row(&row, self.layout, self.size, i).map_err(err)?;
            let auxi = encode_row(&aux, self.layout, self.size, i).map_err(err)?;
            let b = boost(&orig, &auxi, self.mode)?;
            images.push(network_input(&b.pixels));
            labels.push(label);
        }
        Ok(ImageSet::new(images, labels)?)
    }
}

/// Network trained on the source task.
pub fn pretrain_source(
    arch: Vec<LayerSpec>,
    input_shape: (usize, usize, usize),
    source: &ImageSet,
    cfg: &TrainConfig,
    validation_fraction: f64,
    rng: &RngStream,
) -> Result<(Network, TrainOutcome)> {
    let mut net = Network::new(input_shape, arch, &rng.child("source-net")).map_err(OptimError::from)?;
    let mask = net.full_mask();
    let out = optim::train_with_holdout(&mut net, source, validation_fraction, cfg, &mask, &rng.child("source-train"))?;
    Ok((net, out))
}

/// Source network and per-stage training configs.
#[derive(Debug, Clone)]
pub struct TransferPlan {
    pub source: Network,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl TransferPlan {
    pub fn stage1_mask(&self) -> Vec<bool> {
        self.source.head_mask()
    }

    pub fn stage2_mask(&self) -> Vec<bool> {
        self.source.full_mask()
    }
}

/// Re-initialises the head and trains it with the backbone frozen.
pub fn tl_stage1(
    source: &Network,
    train: &ImageSet,
    val: &ImageSet,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(Network, TrainOutcome)> {
    let mut net = source.clone();
    net.reinit_head(rng);
    let mask = net.head_mask();
    let out = optim::train(&mut net, train, val, cfg, &mask, &rng.child("stage1"))?;
    Ok((net, out))
}

/// Fine-tunes every parameter.
pub fn tl_stage2(
    net: &Network,
    train: &ImageSet,
    val: &ImageSet,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(Network, TrainOutcome)> {
    let mut net = net.clone();
    let mask = net.full_mask();
    let out = optim::train(&mut net, train, val, cfg, &mask, &rng.child("stage2"))?;
    Ok((net, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ArchConfig;

    fn image(h: usize, w: usize, c: usize, v: f64) -> ChurnImage {
        ChurnImage {
            pixels: Tensor3::filled(h, w, c, v),
            source_row: 3,
        }
    }

    #[test]
    fn channel_arithmetic() {
        let o = image(32, 32, 3, 10.0);
        let a = image(32, 32, 3, 200.0);
        let s = boost(&o, &a, BoostMode::Stack).unwrap();
        assert_eq!(s.pixels.shape(), (32, 32, 6));
        assert_eq!(s.tags(), "OOOAAA");
        assert_eq!(s.pixels.get(5, 7, 1), 10.0);
        assert_eq!(s.pixels.get(5, 7, 4), 200.0);
        let r = boost(&o, &a, BoostMode::Replace).unwrap();
        assert_eq!(r.pixels, a.pixels);
        assert_eq!(r.tags(), "AAA");
        assert_eq!(boost(&o, &a, BoostMode::None).unwrap().pixels, o.pixels);
        let small = image(16, 16, 3, 1.0);
        assert!(matches!(boost(&o, &small, BoostMode::Stack), Err(BoostError::SpatialMismatch { .. })));
        assert_eq!(parse_tags(&s.tags()).unwrap(), s.provenance);
        assert!(parse_tags("OX").is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [BoostMode::None, BoostMode::Replace, BoostMode::Stack] {
            assert_eq!(m.name().parse::<BoostMode>().unwrap(), m);
        }
        assert!("both".parse::<BoostMode>().is_err());
        assert_eq!(BoostMode::Stack.channels(3, 3), 6);
        assert_eq!(BoostMode::Replace.channels(3, 3), 3);
    }

    fn small_arch() -> Vec<LayerSpec> {
        ArchConfig {
            stem_channels: 4,
            block1: [2, 4, 2, 2],
            block2: [2, 4, 2, 2],
            inception_repeat: 1,
            dense_units: 8,
        }
        .layers()
    }

    #[test]
    fn transfer_stages() {
        let layout = ImageLayout::new(2, 2, 3).unwrap();
        let task = SourceTask { samples: 60, layout, size: 6, mode: BoostMode::Stack };
        let data = task.generate(&RngStream::new(1)).unwrap();
        assert_eq!(data.images[0].shape(), (6, 6, 6));
        let cfg = TrainConfig { batch_size: 10, lr: 0.01, epochs: 4 };
        let (src, out) = pretrain_source(small_arch(), (6, 6, 6), &data, &cfg, 0.2, &RngStream::new(2)).unwrap();
        assert_eq!(src.specs(), &small_arch()[..]);
        assert!(out.history.iter().any(|r| r.val_auc > 0.5));

        let target = task.generate(&RngStream::new(3)).unwrap();
        let (s1, _) = tl_stage1(&src, &target, &target, &cfg, &RngStream::new(4)).unwrap();
        let bits = |p: &[f64]| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(s1.backbone_params()), bits(src.backbone_params()));
        let mut fresh = src.clone();
        fresh.reinit_head(&RngStream::new(4));
        assert_ne!(s1.head_params(), fresh.head_params());

        let zero = TrainConfig { epochs: 0, ..cfg.clone() };
        let (s0, _) = tl_stage1(&src, &target, &target, &zero, &RngStream::new(4)).unwrap();
        assert_eq!(s0.head_params(), fresh.head_params());

        let (s2, _) = tl_stage2(&s1, &target, &target, &cfg, &RngStream::new(5)).unwrap();
        assert!(s2.backbone_params().iter().zip(s1.backbone_params()).any(|(a, b)| a != b));
        let (same, _) = tl_stage2(&s1, &target, &target, &zero, &RngStream::new(5)).unwrap();
        assert_eq!(same.params(), s1.params());
    }
}
