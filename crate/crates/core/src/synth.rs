//! Reproducible two-Gaussian churn table with optional categorical,
//! sparse and missing cells.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::config::SynthConfig;
use crate::numerics::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("cannot write {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

const CATEGORIES: [&str; 4] = ["basic", "plus", "premium", "legacy"];
const MAJORITY_CAT: [f64; 4] = [0.5, 0.3, 0.15, 0.05];
const MINORITY_CAT: [f64; 4] = [0.25, 0.25, 0.2, 0.3];
const SPARSE_MISSING: f64 = 0.95;

/// Minority rows for `n` samples at one minority row per `ratio` majority rows.
pub fn minority_count(n: usize, ratio: usize) -> usize {
    (n as f64 / (ratio + 1) as f64).round() as usize
}

fn pick(probs: &[f64; 4], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// CSV text with columns `f00..`, `c0..`, `s0..` and a final `label_column`.
pub fn generate_synthetic(cfg: &SynthConfig, label_column: &str, seed: u64) -> Result<String> {
    let bad = |m: &str| Err(SynthError::InvalidParams(m.to_string()));
    if cfg.informative == 0 {
        return bad("need at least one informative feature");
    }
    if !(cfg.minority_sd > 0.0 && cfg.minority_sd.is_finite() && cfg.shift.is_finite()) {
        return bad("class parameters must be finite with positive spread");
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return bad("missing rate must lie in [0,1)");
    }
    let minority = minority_count(cfg.n, cfg.ratio);
    if minority == 0 || minority >= cfg.n {
        return bad("imbalance leaves a class empty");
    }
    let root = RngStream::new(seed).child("synth");
    let mut labels: Vec<u8> = (0..cfg.n).map(|i| u8::from(i < minority)).collect();
    root.child("labels").shuffle(&mut labels);

    let width = (cfg.informative - 1).to_string().len().max(2);
    let mut header: Vec<String> = (0..cfg.informative).map(|j| format!("f{j:0width$}")).collect();
    header.extend((0..cfg.categorical).map(|j| format!("c{j}")));
    header.extend((0..cfg.sparse).map(|j| format!("s{j}")));
    header.push(label_column.to_string());

    let mut out = header.join(",");
    out.push('\n');
    for (i, &label) in labels.iter().enumerate() {
        let mut r = root.child_indexed("row", i);
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        for _ in 0..cfg.informative {
            let z = r.normal();
            let v = if label == 1 { cfg.shift + cfg.minority_sd * z } else { z };
            let missing = r.unit() < cfg.missing_rate;
            cells.push(if missing { String::new() } else { format!("{v:.6}") });
        }
        for _ in 0..cfg.categorical {
            let probs = if label == 1 { &MINORITY_CAT } else { &MAJORITY_CAT };
            let c = CATEGORIES[pick(probs, r.unit())];
            let missing = r.unit() < cfg.missing_rate;
            cells.push(if missing { String::new() } else { c.to_string() });
        }
        for _ in 0..cfg.sparse {
            let v = r.normal();
            let missing = r.unit() < SPARSE_MISSING;
            cells.push(if missing { String::new() } else { format!("{v:.6}") });
        }
        cells.push(label.to_string());
        writeln!(out, "{}", cells.join(",")).expect("writing to a string");
    }
    Ok(out)
}

pub fn write_synthetic(cfg: &SynthConfig, label_column: &str, seed: u64, path: &Path) -> Result<()> {
    let text = generate_synthetic(cfg, label_column, seed)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| SynthError::Io {
            path: dir.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    std::fs::write(path, text).map_err(|e| SynthError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
