//! Channel-boosted CNN pipeline for imbalanced tabular churn prediction.

pub mod dataset;
pub mod numerics;
pub mod par;
pub mod cnn;
pub mod imaging;
pub mod pca;
pub mod smote;
pub mod eval;
pub mod optim;
pub mod sae;
pub mod boost;
pub mod checkpoint;
pub mod config;
pub mod synth;
pub mod pipeline;
