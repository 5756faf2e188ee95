//! Versioned, checksummed binary container for fitted models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CBCN" | version u32 | section count u32
//! per section: name length u32 | name bytes | payload length u64
//! payloads, in table order
//! first 8 bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cnn::{LayerSpec, Network};
use crate::imaging::PixelScaler;
use crate::numerics::Matrix;
use crate::optim::AdamState;
use crate::pca::PcaModel;
use crate::sae::{SaeLayer, SaeModel};

pub const MAGIC: &[u8; 4] = b"CBCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch; file is truncated or corrupted")]
    ChecksumFail,
    #[error("malformed section {0}")]
    Malformed(String),
    #[error("missing section {0}")]
    MissingSection(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: &str, payload: Vec<u8>) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(s) => s.1 = payload,
            None => self.sections.push((name.to_string(), payload)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name).ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        }
        for (_, payload) in &self.sections {
            out.extend_from_slice(payload);
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(CheckpointError::ChecksumFail);
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != VERSION {
            return Err(CheckpointError::VersionMismatch { found, expected: VERSION });
        }
        if bytes.len() < 20 {
            return Err(CheckpointError::ChecksumFail);
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != sum {
            return Err(CheckpointError::ChecksumFail);
        }
        let mut r = Reader::new(&body[8..], "table");
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.malformed())?;
            table.push((name, r.u64()? as usize));
        }
        let mut sections = Vec::with_capacity(count);
        for (name, len) in table {
            let payload = r.take(len)?.to_vec();
            sections.push((name, payload));
        }
        r.finish()?;
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let h = Sha256::digest(bytes);
    h[..8].try_into().expect("8 bytes")
}

/// Little-endian payload builder.
#[derive(Debug, Default)]
pub struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn usize(&mut self, v: usize) -> &mut Self {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'a str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], section: &'a str) -> Self {
        Self { buf, pos: 0, section }
    }

    fn malformed(&self) -> CheckpointError {
        CheckpointError::Malformed(self.section.to_string())
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.malformed());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.malformed())
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(self.malformed());
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.malformed())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(self.malformed())
        }
    }
}

pub fn encode_pca(m: &PcaModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(m.n_components)
        .f64s(&m.mean)
        .f64s(&m.scale)
        .f64s(&m.eigenvalues)
        .usize(m.components.rows())
        .usize(m.components.cols())
        .f64s(m.components.data());
    w.finish()
}

pub fn decode_pca(b: &[u8]) -> Result<PcaModel> {
    let mut r = Reader::new(b, "pca");
    let n_components = r.usize()?;
    let mean = r.f64s()?;
    let scale = r.f64s()?;
    let eigenvalues = r.f64s()?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let components = Matrix::new(rows, cols, r.f64s()?).map_err(|_| r.malformed())?;
    r.finish()?;
    Ok(PcaModel { mean, scale, components, eigenvalues, n_components })
}

pub fn encode_scaler(s: &PixelScaler) -> Vec<u8> {
    let mut w = Writer::default();
    w.f64s(&s.shift).f64s(&s.max);
    w.finish()
}

pub fn decode_scaler(b: &[u8]) -> Result<PixelScaler> {
    let mut r = Reader::new(b, "scaler");
    let shift = r.f64s()?;
    let max = r.f64s()?;
    r.finish()?;
    Ok(PixelScaler { shift, max })
}

pub fn encode_sae(m: &SaeModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(m.layers.len());
    for l in &m.layers {
        w.usize(l.inputs).usize(l.hidden).f64s(&l.params);
    }
    w.finish()
}

pub fn decode_sae(b: &[u8]) -> Result<SaeModel> {
    let mut r = Reader::new(b, "sae");
    let n = r.usize()?;
    let mut layers = Vec::new();
    for _ in 0..n {
        let inputs = r.usize()?;
        let hidden = r.usize()?;
        let params = r.f64s()?;
        if params.len() != SaeLayer::param_count(inputs, hidden) {
            return Err(r.malformed());
        }
        layers.push(SaeLayer { inputs, hidden, params });
    }
    r.finish()?;
    Ok(SaeModel { layers })
}

fn encode_spec(w: &mut Writer, s: &LayerSpec) {
    match *s {
        LayerSpec::Conv { kernel_h, kernel_w, stride, out_channels } => {
            w.u64(0).usize(kernel_h).usize(kernel_w).usize(stride).usize(out_channels);
        }
        LayerSpec::MaxPool { kernel, stride } => {
            w.u64(1).usize(kernel).usize(stride);
        }
        LayerSpec::GlobalAvgPool => {
            w.u64(2);
        }
        LayerSpec::Inception { paths } => {
            w.u64(3);
            for p in paths {
                w.usize(p);
            }
        }
        LayerSpec::Dense { units } => {
            w.u64(4).usize(units);
        }
        LayerSpec::Softmax => {
            w.u64(5);
        }
    }
}

fn decode_spec(r: &mut Reader) -> Result<LayerSpec> {
    Ok(match r.u64()? {
        0 => LayerSpec::Conv {
            kernel_h: r.usize()?,
            kernel_w: r.usize()?,
            stride: r.usize()?,
            out_channels: r.usize()?,
        },
        1 => LayerSpec::MaxPool { kernel: r.usize()?, stride: r.usize()? },
        2 => LayerSpec::GlobalAvgPool,
        3 => LayerSpec::Inception {
            paths: [r.usize()?, r.usize()?, r.usize()?, r.usize()?],
        },
        4 => LayerSpec::Dense { units: r.usize()? },
        5 => LayerSpec::Softmax,
        _ => return Err(r.malformed()),
    })
}

pub fn encode_network(n: &Network) -> Vec<u8> {
    let mut w = Writer::default();
    let (h, wd, c) = n.input_shape();
    w.usize(h).usize(wd).usize(c).usize(n.specs().len());
    for s in n.specs() {
        encode_spec(&mut w, s);
    }
    w.f64s(n.params());
    w.finish()
}

pub fn decode_network(b: &[u8]) -> Result<Network> {
    let mut r = Reader::new(b, "network");
    let shape = (r.usize()?, r.usize()?, r.usize()?);
    let n = r.usize()?;
    let specs = (0..n).map(|_| decode_spec(&mut r)).collect::<Result<Vec<_>>>()?;
    let params = r.f64s()?;
    r.finish()?;
    Network::from_parts(shape, specs, params).map_err(|e| CheckpointError::Malformed(format!("network: {e}")))
}

pub fn encode_adam(a: &AdamState) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(a.t).f64(a.beta1).f64(a.beta2).f64(a.eps).f64(a.lr).f64s(&a.m).f64s(&a.v);
    w.finish()
}

pub fn decode_adam(b: &[u8]) -> Result<AdamState> {
    let mut r = Reader::new(b, "adam");
    let t = r.u64()?;
    let (beta1, beta2, eps, lr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let m = r.f64s()?;
    let v = r.f64s()?;
    r.finish()?;
    Ok(AdamState { m, v, t, beta1, beta2, eps, lr })
}

pub fn encode_text(s: &str) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(s);
    w.finish()
}

pub fn decode_text(b: &[u8], section: &str) -> Result<String> {
    let mut r = Reader::new(b, section);
    let s = r.str()?;
    r.finish()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ArchConfig;
    use crate::numerics::{RngStream, Tensor3};

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put("a", vec![1, 2, 3]);
        c.put("fingerprint", encode_text("abc"));
        c
    }

    #[test]
    fn container_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        assert_eq!(decode_text(c.get("fingerprint").unwrap(), "fingerprint").unwrap(), "abc");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 9, 12, 9] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::ChecksumFail)), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[14] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::ChecksumFail)));
        let mut bumped = bytes.clone();
        bumped[4] += 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bumped),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE...."), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn network_round_trip_preserves_outputs() {
        let arch = ArchConfig {
            stem_channels: 4,
            block1: [2, 4, 2, 2],
            block2: [2, 4, 2, 2],
            inception_repeat: 2,
            dense_units: 8,
        };
        let net = Network::new((8, 8, 6), arch.layers(), &RngStream::new(1)).unwrap();
        let back = decode_network(&encode_network(&net)).unwrap();
        assert_eq!(back.specs(), net.specs());
        let bits = |p: &[f64]| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.params()), bits(net.params()));
        let mut rng = RngStream::new(2);
        for _ in 0..100 {
            let x = Tensor3::from_data(8, 8, 6, (0..384).map(|_| rng.unit()).collect()).unwrap();
            assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
        }
    }

    #[test]
    fn model_sections_round_trip() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.0, 1.0, 3.0], [2.0, 0.5, 1.0]]).unwrap();
        let pca = crate::pca::fit(&x, true).unwrap();
        assert_eq!(decode_pca(&encode_pca(&pca)).unwrap(), pca);
        let s = PixelScaler::fit(&x);
        assert_eq!(decode_scaler(&encode_scaler(&s)).unwrap(), s);
        let sae = SaeModel {
            layers: vec![SaeLayer::glorot(3, 2, &mut RngStream::new(1)), SaeLayer::zeros(2, 1)],
        };
        assert_eq!(decode_sae(&encode_sae(&sae)).unwrap(), sae);
        let mut a = AdamState::new(4, 0.01);
        a.t = 7;
        a.m[2] = -0.25;
        assert_eq!(decode_adam(&encode_adam(&a)).unwrap(), a);
        assert!(decode_adam(&encode_pca(&pca)).is_err());
    }
}
