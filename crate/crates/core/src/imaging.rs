//! Feature rows to small multi-channel images, plus bilinear upscaling.

use std::io::Write;

use thiserror::Error;

use crate::numerics::{Matrix, Tensor3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("row has {got} features, layout needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("negative value {value} in column {col}")]
    NegativeInput { col: usize, value: f64 },
    #[error("invalid layout {0}")]
    InvalidLayout(String),
    #[error("scaler fitted on {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// `rows x cols` plane per channel; feature `f` goes to channel
/// `f / (rows*cols)`, then row-major within that channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageLayout {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Default for ImageLayout {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 4,
            channels: 3,
        }
    }
}

impl ImageLayout {
    pub fn new(rows: usize, cols: usize, channels: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(ImagingError::InvalidLayout(format!("{rows}x{cols}x{channels}")));
        }
        Ok(Self { rows, cols, channels })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChurnImage {
    pub pixels: Tensor3,
    pub source_row: usize,
}

/// Scales each column by `255 / max`; an all-zero column stays zero.
pub fn normalize_255(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for j in 0..x.cols() {
        let mut m = 0.0f64;
        for i in 0..x.rows() {
            let v = x[(i, j)];
            if v < 0.0 {
                return Err(ImagingError::NegativeInput { col: j, value: v });
            }
            m = m.max(v);
        }
        for i in 0..x.rows() {
            out[(i, j)] = if m > 0.0 { x[(i, j)] / m * 255.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Per-column pixel scaling fitted on training rows and reused on held-out rows.
///
/// Columns with negative training values are first shifted by `-min`
/// (PCA scores are signed); the result is then divided by the training max
/// and multiplied by 255. Held-out values are clamped to `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelScaler {
    pub shift: Vec<f64>,
    pub max: Vec<f64>,
}

impl PixelScaler {
    pub fn fit(x: &Matrix) -> Self {
        let d = x.cols();
        let mut shift = vec![0.0; d];
        let mut max = vec![0.0; d];
        for j in 0..d {
            let col = x.col(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            shift[j] = if lo < 0.0 { -lo } else { 0.0 };
            max[j] = col.iter().map(|v| v + shift[j]).fold(0.0, f64::max);
        }
        Self { shift, max }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.shift.len() {
            return Err(ImagingError::DimensionMismatch {
                expected: self.shift.len(),
                got: x.cols(),
            });
        }
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let m = self.max[j];
                *v = if m > 0.0 {
                    ((*v + self.shift[j]) / m * 255.0).clamp(0.0, 255.0)
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

pub fn to_image(row: &[f64], layout: ImageLayout, source_row: usize) -> Result<ChurnImage> {
    if row.len() != layout.len() {
        return Err(ImagingError::LengthMismatch {
            expected: layout.len(),
            got: row.len(),
        });
    }
    let plane = layout.rows * layout.cols;
    let mut t = Tensor3::zeros(layout.rows, layout.cols, layout.channels);
    for (f, &v) in row.iter().enumerate() {
        let c = f / plane;
        let p = f % plane;
        t.set(p / layout.cols, p % layout.cols, c, v);
    }
    Ok(ChurnImage { pixels: t, source_row })
}

/// Inverse of [`to_image`].
pub fn from_image(img: &Tensor3) -> Vec<f64> {
    let (h, w, ch) = img.shape();
    let mut out = Vec::with_capacity(h * w * ch);
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                out.push(img.get(y, x, c));
            }
        }
    }
    out
}

fn sample_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (s.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Per-channel bilinear resize on a corner-aligned grid.
pub fn resize_bilinear(img: &ChurnImage, out_h: usize, out_w: usize) -> ChurnImage {
    let src = &img.pixels;
    let (h, w, ch) = src.shape();
    let out_h = out_h.max(1);
    let out_w = out_w.max(1);
    let ys = sample_positions(h, out_h);
    let xs = sample_positions(w, out_w);
    let bounds: Vec<(f64, f64)> = (0..ch)
        .map(|c| {
            src.channel(c)
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
        })
        .collect();
    let mut out = Tensor3::zeros(out_h, out_w, ch);
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for (c, &(lo, hi)) in bounds.iter().enumerate() {
                let a = src.get(y0, x0, c);
                let b = src.get(y0, x1, c);
                let cc = src.get(y1, x0, c);
                let d = src.get(y1, x1, c);
                let top = a + (b - a) * tx;
                let bottom = cc + (d - cc) * tx;
                let v = (top + (bottom - top) * ty).clamp(lo, hi);
                out.set(oy, ox, c, v);
            }
        }
    }
    ChurnImage {
        pixels: out,
        source_row: img.source_row,
    }
}

/// Encodes one row into an upscaled image with pixel values in `[0, 255]`.
pub fn encode_row(row: &[f64], layout: ImageLayout, size: usize, source_row: usize) -> Result<ChurnImage> {
    let img = to_image(row, layout, source_row)?;
    Ok(resize_bilinear(&img, size, size))
}

/// Writes one channel as a plain-text graymap (P2).
pub fn write_pgm<W: Write>(img: &Tensor3, channel: usize, mut w: W) -> std::io::Result<()> {
    writeln!(w, "P2\n{} {}\n255", img.width(), img.height())?;
    for y in 0..img.height() {
        let line: Vec<String> = (0..img.width())
            .map(|x| (img.get(y, x, channel).round().clamp(0.0, 255.0) as u8).to_string())
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Writes the first three channels as a plain-text pixmap (P3).
pub fn write_ppm<W: Write>(img: &Tensor3, mut w: W) -> std::io::Result<()> {
    writeln!(w, "P3\n{} {}\n255", img.width(), img.height())?;
    for y in 0..img.height() {
        let mut line = Vec::with_capacity(img.width() * 3);
        for x in 0..img.width() {
            for c in 0..3 {
                let v = if c < img.channels() { img.get(y, x, c) } else { 0.0 };
                line.push((v.round().clamp(0.0, 255.0) as u8).to_string());
            }
        }
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let x = Matrix::from_rows(&[[1.0, 3.0, 0.0], [2.0, 3.0, 0.0], [4.0, 3.0, 0.0]]).unwrap();
        let n = normalize_255(&x).unwrap();
        assert_eq!(n.col(0), vec![63.75, 127.5, 255.0]);
        assert_eq!(n.col(1), vec![255.0; 3]);
        assert_eq!(n.col(2), vec![0.0; 3]);
        let neg = Matrix::from_rows(&[[-1.0]]).unwrap();
        assert!(matches!(normalize_255(&neg), Err(ImagingError::NegativeInput { .. })));
    }

    #[test]
    fn scaler_matches_normalize_on_nonnegative_data() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [4.0, 0.0]]).unwrap();
        let s = PixelScaler::fit(&x);
        assert_eq!(s.apply(&x).unwrap(), normalize_255(&x).unwrap());
        let signed = Matrix::from_rows(&[[-2.0], [0.0], [2.0]]).unwrap();
        let s = PixelScaler::fit(&signed);
        assert_eq!(s.apply(&signed).unwrap().col(0), vec![0.0, 127.5, 255.0]);
        let held_out = Matrix::from_rows(&[[9.0], [-9.0]]).unwrap();
        assert_eq!(s.apply(&held_out).unwrap().col(0), vec![255.0, 0.0]);
    }

    #[test]
    fn layout_fill_order() {
        let row: Vec<f64> = (0..60).map(f64::from).collect();
        let img = to_image(&row, ImageLayout::default(), 0).unwrap();
        assert_eq!(img.pixels.shape(), (5, 4, 3));
        assert_eq!(img.pixels.channel(0), (0..20).map(f64::from).collect::<Vec<_>>());
        assert_eq!(img.pixels.get(1, 2, 1), 26.0);
        let one = to_image(&[42.0], ImageLayout::new(1, 1, 1).unwrap(), 0).unwrap();
        assert_eq!(one.pixels.data(), &[42.0]);
        assert!(matches!(
            to_image(&row[..59], ImageLayout::default(), 0),
            Err(ImagingError::LengthMismatch { expected: 60, got: 59 })
        ));
    }

    #[test]
    fn resize_examples() {
        let c = ChurnImage {
            pixels: Tensor3::filled(3, 2, 2, 7.5),
            source_row: 0,
        };
        let r = resize_bilinear(&c, 9, 5);
        assert!(r.pixels.data().iter().all(|&v| v == 7.5));
        let sq = ChurnImage {
            pixels: Tensor3::from_data(2, 2, 1, vec![0.0, 10.0, 20.0, 30.0]).unwrap(),
            source_row: 0,
        };
        let r = resize_bilinear(&sq, 3, 3);
        assert_eq!(r.pixels.get(1, 1, 0), 15.0);
        assert_eq!(r.pixels.get(0, 2, 0), 10.0);
        let row: Vec<f64> = (0..60).map(f64::from).collect();
        let e = encode_row(&row, ImageLayout::default(), 32, 3).unwrap();
        assert_eq!(e.pixels.shape(), (32, 32, 3));
        assert_eq!(e.source_row, 3);
    }

    #[test]
    fn pnm_export() {
        let img = Tensor3::filled(2, 3, 3, 255.0);
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("P3\n3 2\n255\n"));
        let mut buf = Vec::new();
        write_pgm(&img, 1, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().nth(3), Some("255 255 255"));
    }

    proptest! {
        #[test]
        fn image_round_trip(seed in 0u64..1000, p in 1usize..6, q in 1usize..6, c in 1usize..4) {
            let mut rng = RngStream::new(seed);
            let layout = ImageLayout::new(p, q, c).unwrap();
            let row: Vec<f64> = (0..layout.len()).map(|_| rng.uniform(0.0, 255.0).unwrap()).collect();
            let img = to_image(&row, layout, 0).unwrap();
            prop_assert_eq!(from_image(&img.pixels), row);
        }

        #[test]
        fn resize_has_no_overshoot(seed in 0u64..1000, oh in 1usize..40, ow in 1usize..40) {
            let mut rng = RngStream::new(seed);
            let data: Vec<f64> = (0..5 * 4 * 3).map(|_| rng.uniform(-10.0, 300.0).unwrap()).collect();
            let img = ChurnImage { pixels: Tensor3::from_data(5, 4, 3, data).unwrap(), source_row: 0 };
            let r = resize_bilinear(&img, oh, ow);
            for c in 0..3 {
                let src = img.pixels.channel(c);
                let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r.pixels.channel(c).iter().all(|&v| v >= lo && v <= hi));
            }
        }

        #[test]
        fn normalized_max_is_255(seed in 0u64..1000) {
            let mut rng = RngStream::new(seed);
            let data: Vec<f64> = (0..40).map(|_| rng.uniform(0.0, 1e4).unwrap()).collect();
            let x = Matrix::new(10, 4, data).unwrap();
            let n = normalize_255(&x).unwrap();
            for j in 0..4 {
                prop_assert_eq!(n.col(j).iter().copied().fold(0.0, f64::max), 255.0);
            }
        }
    }
}
