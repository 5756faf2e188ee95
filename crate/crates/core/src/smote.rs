//! Minority oversampling by interpolation toward nearest minority neighbours.

use thiserror::Error;

use crate::dataset::FeatureMatrix;
use crate::numerics::{Matrix, RngStream};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoteError {
    #[error("need more than {k} minority samples, have {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("data contains a single class")]
    SingleClass,
    #[error("invalid SMOTE configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SmoteError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoteConfig {
    pub k: usize,
    /// Desired minority:majority ratio after rebalancing.
    pub target_ratio: f64,
    /// Measure neighbour distances on raw features instead of z-scores.
    pub raw_space: bool,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            k: 5,
            target_ratio: 1.0,
            raw_space: false,
        }
    }
}

impl SmoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SmoteError::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio.is_finite()) {
            return Err(SmoteError::InvalidConfig(format!(
                "target ratio {} must be positive",
                self.target_ratio
            )));
        }
        Ok(())
    }
}

/// Where one synthetic row came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub base: usize,
    pub neighbor: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub x_new: Matrix,
    pub provenance: Vec<Provenance>,
}

/// Interpolates `base + (neighbor - base) * delta`, clamped per coordinate to
/// the segment so rounding can never leave it.
pub fn interpolate(base: &[f64], neighbor: &[f64], delta: f64) -> Vec<f64> {
    base.iter()
        .zip(neighbor)
        .map(|(&b, &n)| (b + (n - b) * delta).clamp(b.min(n), b.max(n)))
        .collect()
}

fn standardize(m: &Matrix) -> Matrix {
    let n = m.rows() as f64;
    let mut out = m.clone();
    for j in 0..m.cols() {
        let col = m.col(j);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..m.rows() {
            out[(i, j)] = (m[(i, j)] - mean) / sd;
        }
    }
    out
}

fn neighbors_in(space: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let xi = space.row(i);
    let mut d: Vec<(f64, usize)> = (0..space.rows())
        .filter(|&j| j != i)
        .map(|j| {
            let dist = space
                .row(j)
                .iter()
                .zip(xi)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            (dist, j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// The `k` rows nearest to row `i` (excluding `i`) in z-scored Euclidean
/// distance, nearest first, ties to the lower index.
pub fn k_nearest(minority: &Matrix, i: usize, k: usize) -> Result<Vec<usize>> {
    if minority.rows() <= k || i >= minority.rows() {
        return Err(SmoteError::TooFewSamples {
            n: minority.rows(),
            k,
        });
    }
    Ok(neighbors_in(&standardize(minority), i, k))
}

/// Emits `count` synthetic rows. Base rows are taken round-robin; each
/// synthetic row `r` draws its neighbour and `delta` from its own child
/// stream of `rng`, so the output does not depend on evaluation order.
pub fn generate(
    minority: &Matrix,
    cfg: &SmoteConfig,
    count: usize,
    rng: &RngStream,
) -> Result<SyntheticBatch> {
    cfg.validate()?;
    let n = minority.rows();
    if n <= cfg.k {
        return Err(SmoteError::TooFewSamples { n, k: cfg.k });
    }
    let space = if cfg.raw_space {
        minority.clone()
    } else {
        standardize(minority)
    };
    let neighbors = par::map_range(n.min(count), |i| neighbors_in(&space, i, cfg.k));

    let rows = par::map_range(count, |r| {
        let mut stream = rng.child_indexed("smote-row", r);
        let base = r % n;
        let nb = &neighbors[base];
        let neighbor = nb[stream.below(nb.len())];
        let delta = stream.unit();
        let x = interpolate(minority.row(base), minority.row(neighbor), delta);
        (x, Provenance { base, neighbor, delta })
    });

    let mut data = Vec::with_capacity(count * minority.cols());
    let mut provenance = Vec::with_capacity(count);
    for (x, p) in rows {
        data.extend(x);
        provenance.push(p);
    }
    Ok(SyntheticBatch {
        x_new: Matrix::new(count, minority.cols(), data).expect("interpolation keeps values finite"),
        provenance,
    })
}

/// Number of synthetic rows needed to reach `ratio` given the class sizes.
pub fn synthetic_count(minority: usize, majority: usize, ratio: f64) -> usize {
    let target = (ratio * majority as f64).round() as usize;
    target.saturating_sub(minority)
}

/// Appends synthetic minority rows after the (unchanged) original rows.
///
/// The returned provenance uses row indices of `data`.
pub fn rebalance(
    data: &FeatureMatrix,
    cfg: &SmoteConfig,
    rng: &RngStream,
) -> Result<(FeatureMatrix, SyntheticBatch)> {
    cfg.validate()?;
    let (neg, pos) = data.class_counts();
    if neg == 0 || pos == 0 {
        return Err(SmoteError::SingleClass);
    }
    let minority_label = if pos <= neg { 1u8 } else { 0u8 };
    let minority_idx: Vec<usize> = (0..data.n_samples())
        .filter(|&i| data.labels[i] == minority_label)
        .collect();
    let count = synthetic_count(minority_idx.len(), neg.max(pos), cfg.target_ratio);
    if count == 0 {
        return Ok((
            data.clone(),
            SyntheticBatch {
                x_new: Matrix::zeros(0, data.n_features()),
                provenance: Vec::new(),
            },
        ));
    }
    let minority = data.x.select_rows(&minority_idx);
    let mut batch = generate(&minority, cfg, count, rng)?;
    for p in &mut batch.provenance {
        p.base = minority_idx[p.base];
        p.neighbor = minority_idx[p.neighbor];
    }
    let x = data.x.vstack(&batch.x_new).expect("column counts agree");
    let mut labels = data.labels.clone();
    labels.extend(std::iter::repeat_n(minority_label, count));
    Ok((
        FeatureMatrix {
            x,
            labels,
            feature_names: data.feature_names.clone(),
        },
        batch,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn nearest_examples() {
        let m = col(&[0.0, 1.0, 10.0]);
        assert_eq!(k_nearest(&m, 0, 1).unwrap(), vec![1]);
        assert_eq!(k_nearest(&m, 0, 2).unwrap(), vec![1, 2]);
        let dup = col(&[3.0, 7.0, 3.0, 4.0]);
        assert_eq!(k_nearest(&dup, 0, 1).unwrap(), vec![2]);
        assert!(matches!(k_nearest(&m, 0, 3), Err(SmoteError::TooFewSamples { .. })));
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolate(&[0.0, 0.0], &[2.0, 4.0], 0.5), vec![1.0, 2.0]);
        assert_eq!(interpolate(&[1.5, -2.0], &[2.0, 4.0], 0.0), vec![1.5, -2.0]);
        let near_one = 1.0f64.next_down();
        let v = interpolate(&[1.5, -2.0], &[2.0, 4.0], near_one);
        assert!((v[0] - 2.0).abs() < 1e-15 && (v[1] - 4.0).abs() < 1e-15);
    }

    fn labelled(minority: usize, majority: usize) -> FeatureMatrix {
        let n = minority + majority;
        let mut x = Matrix::zeros(n, 2);
        let mut labels = Vec::new();
        for i in 0..n {
            x[(i, 0)] = i as f64;
            x[(i, 1)] = (i * 7 % 5) as f64;
            labels.push(u8::from(i < minority));
        }
        FeatureMatrix {
            x,
            labels,
            feature_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn rebalance_counts() {
        let rng = RngStream::new(1);
        let d = labelled(7, 91);
        let (out, batch) = rebalance(&d, &SmoteConfig::default(), &rng).unwrap();
        assert_eq!(batch.provenance.len(), 84);
        assert_eq!(out.class_counts(), (91, 91));
        assert_eq!(out.x.select_rows(&(0..98).collect::<Vec<_>>()), d.x);
        assert!(batch.provenance.iter().all(|p| p.base < 7 && p.neighbor < 7 && p.base != p.neighbor));

        let balanced = labelled(10, 10);
        let (out, batch) = rebalance(&balanced, &SmoteConfig::default(), &rng).unwrap();
        assert!(batch.provenance.is_empty());
        assert_eq!(out, balanced);

        let single = labelled(5, 0);
        assert_eq!(rebalance(&single, &SmoteConfig::default(), &rng).unwrap_err(), SmoteError::SingleClass);
    }

    #[test]
    fn deterministic() {
        let d = labelled(12, 40);
        let a = rebalance(&d, &SmoteConfig::default(), &RngStream::new(5)).unwrap();
        let b = rebalance(&d, &SmoteConfig::default(), &RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        let c = rebalance(&d, &SmoteConfig::default(), &RngStream::new(6)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn invalid_config() {
        let bad = SmoteConfig { k: 0, ..SmoteConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SmoteConfig { target_ratio: 0.0, ..SmoteConfig::default() };
        assert!(bad.validate().is_err());
    }
}
