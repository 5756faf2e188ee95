//! Cross-validated channel-boosted pipeline and its persisted stages.
//!
//! Every stage writes its artifact under the output directory with a fixed
//! name, so `cbcnn stage <name>` calls compose into the same files that
//! `cbcnn run` produces:
//!
//! ```text
//! effective.conf, preprocessed.csv, source.cbcn, cv_report.txt, final.cbcn
//! fold<k>/split.csv, test.csv                         balance
//! fold<k>/balanced.csv, balance_rows.csv              balance
//! fold<k>/projection.cbcn                             pca
//! fold<k>/pixels_{train,val,test}.csv                 encode
//! fold<k>/sae.cbcn, recon_{train,val,test}.csv        train-sae
//! fold<k>/model.cbcn, history_stage{1,2}.csv          train
//! fold<k>/scores.csv, roc.csv, metrics.txt            eval
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::boost::{self, BoostMode, SourceTask};
use crate::checkpoint::{self, Checkpoint};
use crate::cnn::Network;
use crate::config::PipelineConfig;
use crate::dataset::{self, FeatureMatrix};
use crate::eval::{self, CvReport, FoldMetrics, RocCurve};
use crate::imaging::{encode_row, ImageLayout, PixelScaler};
use crate::numerics::{Matrix, RngStream};
use crate::optim::{self, AdamState, EpochRecord, ImageSet};
use crate::par;
use crate::pca::{self, PcaModel};
use crate::sae::{self, SaeModel};
use crate::smote;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Balance,
    Pca,
    Encode,
    TrainSae,
    Pretrain,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Preprocess,
        Stage::Balance,
        Stage::Pca,
        Stage::Encode,
        Stage::TrainSae,
        Stage::Pretrain,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Balance => "balance",
            Stage::Pca => "pca",
            Stage::Encode => "encode",
            Stage::TrainSae => "train-sae",
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    /// Whether the stage runs once per fold.
    pub fn per_fold(self) -> bool {
        !matches!(self, Stage::Preprocess | Stage::Pretrain)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
            format!("unknown stage {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage}{}: {message}", fold.map(|f| format!(" (fold {f})")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub fold: Option<usize>,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn tag<E: fmt::Display>(stage: Stage, fold: Option<usize>) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        fold,
        message: e.to_string(),
    }
}

fn fail(stage: Stage, fold: Option<usize>, message: impl Into<String>) -> PipelineError {
    PipelineError {
        stage,
        fold,
        message: message.into(),
    }
}

/// Row indices (into the preprocessed table) of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    /// Rows that SMOTE, PCA, the pixel scaler and the SAE are fitted on.
    pub fit: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified fold assignment plus a stratified validation hold-out inside
/// every training fold.
pub fn split_folds(labels: &[u8], cfg: &PipelineConfig) -> std::result::Result<(Vec<usize>, Vec<FoldSplit>), eval::EvalError> {
    let root = RngStream::new(cfg.seed);
    let assignments = eval::kfold(labels, cfg.folds, &root.child("kfold"))?;
    let splits = (0..cfg.folds)
        .map(|f| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| assignments[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| assignments[i] == f).collect();
            let tl: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
            let (fit, val) = eval::stratified_split(&tl, cfg.validation_fraction, &root.child_indexed("holdout", f));
            FoldSplit {
                fold: f,
                fit: fit.into_iter().map(|i| train[i]).collect(),
                val: val.into_iter().map(|i| train[i]).collect(),
                test,
            }
        })
        .collect();
    Ok((assignments, splits))
}

fn fold_rng(cfg: &PipelineConfig, fold: usize) -> RngStream {
    RngStream::new(cfg.seed).child_indexed("fold", fold)
}

/// Origin of one balanced row: real rows have `base == neighbor` and `delta == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowOrigin {
    pub base: usize,
    pub neighbor: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub data: FeatureMatrix,
    pub origin: Vec<RowOrigin>,
}

pub fn balance(data: &FeatureMatrix, split: &FoldSplit, cfg: &PipelineConfig) -> Result<Balanced> {
    let err = tag(Stage::Balance, Some(split.fold));
    let fit = data.select(&split.fit);
    let (balanced, batch) = smote::rebalance(&fit, &cfg.smote, &fold_rng(cfg, split.fold).child("smote")).map_err(err)?;
    let mut origin: Vec<RowOrigin> = split
        .fit
        .iter()
        .map(|&r| RowOrigin { base: r, neighbor: r, delta: 0.0 })
        .collect();
    origin.extend(batch.provenance.iter().map(|p| RowOrigin {
        base: split.fit[p.base],
        neighbor: split.fit[p.neighbor],
        delta: p.delta,
    }));
    Ok(Balanced { data: balanced, origin })
}

/// PCA followed by the 0..255 pixel scaler, both fitted on balanced training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub pca: PcaModel,
    pub scaler: PixelScaler,
}

impl Projection {
    pub fn fit(x: &Matrix, cfg: &PipelineConfig) -> std::result::Result<Self, String> {
        if x.cols() < cfg.pca_components {
            return Err(format!(
                "{} features after preprocessing, fewer than pca.components = {}",
                x.cols(),
                cfg.pca_components
            ));
        }
        let pca = pca::fit(x, cfg.pca_standardize)
            .and_then(|m| m.with_components(cfg.pca_components))
            .map_err(|e| e.to_string())?;
        let scores = pca.transform(x, pca.n_components).map_err(|e| e.to_string())?;
        let scaler = PixelScaler::fit(&scores);
        Ok(Self { pca, scaler })
    }

    pub fn pixels(&self, x: &Matrix) -> std::result::Result<Matrix, String> {
        let scores = self.pca.transform(x, self.pca.n_components).map_err(|e| e.to_string())?;
        self.scaler.apply(&scores).map_err(|e| e.to_string())
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.put("pca", checkpoint::encode_pca(&self.pca));
        ck.put("scaler", checkpoint::encode_scaler(&self.scaler));
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> checkpoint::Result<Self> {
        Ok(Self {
            pca: checkpoint::decode_pca(ck.require("pca")?)?,
            scaler: checkpoint::decode_scaler(ck.require("scaler")?)?,
        })
    }
}

fn pixel_names(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("p{j:02}")).collect()
}

fn with_features(x: Matrix, labels: &[u8]) -> FeatureMatrix {
    FeatureMatrix {
        feature_names: pixel_names(x.cols()),
        x,
        labels: labels.to_vec(),
    }
}

fn scale(x: &Matrix, s: f64) -> Matrix {
    let data = x.data().iter().map(|v| v * s).collect();
    Matrix::new(x.rows(), x.cols(), data).expect("scaling keeps values finite")
}

/// Pixel rows (0..255) of the fitting, validation and test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSets {
    pub train: FeatureMatrix,
    pub val: FeatureMatrix,
    pub test: FeatureMatrix,
}

impl PixelSets {
    fn parts(&self) -> [(&'static str, &FeatureMatrix); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

pub fn encode_sets(proj: &Projection, balanced: &Balanced, data: &FeatureMatrix, split: &FoldSplit) -> Result<PixelSets> {
    let err = |e: String| fail(Stage::Encode, Some(split.fold), e);
    let px = |m: &FeatureMatrix| proj.pixels(&m.x).map(|x| with_features(x, &m.labels));
    Ok(PixelSets {
        train: px(&balanced.data).map_err(err)?,
        val: px(&data.select(&split.val)).map_err(err)?,
        test: px(&data.select(&split.test)).map_err(err)?,
    })
}

pub fn train_sae(cfg: &PipelineConfig, px: &PixelSets, fold: usize) -> Result<(SaeModel, PixelSets)> {
    let err = tag(Stage::TrainSae, Some(fold));
    let sae_cfg = cfg.sae_for(px.train.n_features());
    let (model, history) =
        sae::train_layerwise(&scale(&px.train.x, 1.0 / 255.0), &sae_cfg, &fold_rng(cfg, fold).child("sae")).map_err(err)?;
    if let (Some(first), Some(last)) = (history.first().and_then(|h| h.first()), history.first().and_then(|h| h.last())) {
        log::info!("fold {fold}: sae layer 1 loss {:.5} -> {:.5}", first.total, last.total);
    }
    let recon = |m: &FeatureMatrix| -> Result<FeatureMatrix> {
        let r = sae::reconstruct_all(&model, &scale(&m.x, 1.0 / 255.0)).map_err(tag(Stage::TrainSae, Some(fold)))?;
        Ok(with_features(scale(&r, 255.0), &m.labels))
    };
    let sets = PixelSets {
        train: recon(&px.train)?,
        val: recon(&px.val)?,
        test: recon(&px.test)?,
    };
    Ok((model, sets))
}

pub fn input_shape(cfg: &PipelineConfig) -> (usize, usize, usize) {
    let c = cfg.layout.channels;
    (cfg.image_size, cfg.image_size, cfg.mode.channels(c, c))
}

/// Network images (unit range) for pixel rows and optional reconstructions.
pub fn build_images(
    pixels: &FeatureMatrix,
    recon: Option<&FeatureMatrix>,
    mode: BoostMode,
    layout: ImageLayout,
    size: usize,
) -> std::result::Result<ImageSet, String> {
    if mode.uses_auxiliary() && recon.is_none() {
        return Err(format!("boost mode {mode} needs SAE reconstructions"));
    }
    let images = par::map_range(pixels.n_samples(), |i| -> std::result::Result<_, String> {
        let orig = encode_row(pixels.x.row(i), layout, size, i).map_err(|e| e.to_string())?;
        let aux = match recon {
            Some(r) => encode_row(r.x.row(i), layout, size, i).map_err(|e| e.to_string())?,
            None => orig.clone(),
        };
        let b = boost::boost(&orig, &aux, mode).map_err(|e| e.to_string())?;
        Ok(boost::network_input(&b.pixels))
    })
    .into_iter()
    .collect::<std::result::Result<Vec<_>, _>>()?;
    ImageSet::new(images, pixels.labels.clone()).map_err(|e| e.to_string())
}

pub fn pretrain(cfg: &PipelineConfig) -> Result<Network> {
    let err = tag(Stage::Pretrain, None);
    let shape = input_shape(cfg);
    let task = SourceTask {
        samples: cfg.pretrain_samples,
        layout: cfg.layout,
        size: cfg.image_size,
        mode: cfg.mode,
    };
    let root = RngStream::new(cfg.seed);
    let data = task.generate(&root.child("source-data")).map_err(err)?;
    let (net, out) =
        boost::pretrain_source(cfg.arch.layers(), shape, &data, &cfg.pretrain, cfg.validation_fraction, &root.child("pretrain"))
            .map_err(tag(Stage::Pretrain, None))?;
    if let Some(best) = out.best_epoch.and_then(|e| out.history.get(e)) {
        log::info!("source task: best validation AUC {:.4} at epoch {}", best.val_auc, best.epoch);
    }
    Ok(net)
}

/// Everything needed to score preprocessed rows.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub projection: Projection,
    pub sae: Option<SaeModel>,
    pub network: Network,
    pub mode: BoostMode,
    pub layout: ImageLayout,
    pub size: usize,
}

impl FittedModel {
    pub fn score(&self, data: &FeatureMatrix) -> std::result::Result<Vec<f64>, String> {
        let px = with_features(self.projection.pixels(&data.x)?, &data.labels);
        let recon = match &self.sae {
            Some(m) if self.mode.uses_auxiliary() => {
                let r = sae::reconstruct_all(m, &scale(&px.x, 1.0 / 255.0)).map_err(|e| e.to_string())?;
                Some(with_features(scale(&r, 255.0), &px.labels))
            }
            _ => None,
        };
        let images = build_images(&px, recon.as_ref(), self.mode, self.layout, self.size)?;
        self.network.score_batch(&images.images).map_err(|e| e.to_string())
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>, fingerprint: &str, meta: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.projection.to_checkpoint(&mut ck);
        if let Some(s) = &self.sae {
            ck.put("sae", checkpoint::encode_sae(s));
        }
        ck.put("network", checkpoint::encode_network(&self.network));
        if let Some(a) = adam {
            ck.put("adam", checkpoint::encode_adam(a));
        }
        ck.put("fingerprint", checkpoint::encode_text(fingerprint));
        let l = self.layout;
        let full_meta = format!(
            "mode = {}\nlayout = {},{},{}\nsize = {}\n{meta}",
            self.mode, l.rows, l.cols, l.channels, self.size
        );
        ck.put("meta", checkpoint::encode_text(&full_meta));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<Self, String> {
        let meta = checkpoint::decode_text(ck.require("meta").map_err(|e| e.to_string())?, "meta").map_err(|e| e.to_string())?;
        let get = |k: &str| {
            meta.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(a, _)| a.trim() == k)
                .map(|(_, b)| b.trim().to_string())
                .ok_or_else(|| format!("checkpoint meta lacks {k}"))
        };
        let mode: BoostMode = get("mode")?.parse().map_err(|e: boost::BoostError| e.to_string())?;
        let dims: Vec<usize> = get("layout")?.split(',').map(|s| s.parse().map_err(|_| "bad layout".to_string())).collect::<std::result::Result<_, _>>()?;
        if dims.len() != 3 {
            return Err("bad layout".into());
        }
        let layout = ImageLayout::new(dims[0], dims[1], dims[2]).map_err(|e| e.to_string())?;
        let size = get("size")?.parse().map_err(|_| "bad size".to_string())?;
        let sae = match ck.get("sae") {
            Some(b) => Some(checkpoint::decode_sae(b).map_err(|e| e.to_string())?),
            None => None,
        };
        Ok(Self {
            projection: Projection::from_checkpoint(ck).map_err(|e| e.to_string())?,
            sae,
            network: checkpoint::decode_network(ck.require("network").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?,
            mode,
            layout,
            size,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: FittedModel,
    pub adam: AdamState,
    pub stage1: Vec<EpochRecord>,
    pub stage2: Vec<EpochRecord>,
}

pub fn train_fold(
    cfg: &PipelineConfig,
    source: &Network,
    projection: Projection,
    px: &PixelSets,
    sae: Option<(SaeModel, PixelSets)>,
    fold: usize,
) -> Result<TrainedFold> {
    let err = |e: String| fail(Stage::Train, Some(fold), e);
    let recon = sae.as_ref().map(|(_, r)| r);
    let mk = |p: &FeatureMatrix, r: Option<&FeatureMatrix>| build_images(p, r, cfg.mode, cfg.layout, cfg.image_size);
    let train = mk(&px.train, recon.map(|r| &r.train)).map_err(err)?;
    let val = mk(&px.val, recon.map(|r| &r.val)).map_err(err)?;
    let rng = fold_rng(cfg, fold).child("tl");
    let (s1, o1) = boost::tl_stage1(source, &train, &val, &cfg.stage1, &rng.child("head")).map_err(tag(Stage::Train, Some(fold)))?;
    let (s2, o2) = boost::tl_stage2(&s1, &train, &val, &cfg.stage2, &rng).map_err(tag(Stage::Train, Some(fold)))?;
    let auc_of = |o: &optim::TrainOutcome| o.best_epoch.and_then(|e| o.history.get(e)).map_or(f64::NAN, |r| r.val_auc);
    log::info!("fold {fold}: validation AUC stage1 {:.4} stage2 {:.4}", auc_of(&o1), auc_of(&o2));
    Ok(TrainedFold {
        model: FittedModel {
            projection,
            sae: sae.map(|(m, _)| m),
            network: s2,
            mode: cfg.mode,
            layout: cfg.layout,
            size: cfg.image_size,
        },
        adam: o2.adam,
        stage1: o1.history,
        stage2: o2.history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldEval {
    pub metrics: FoldMetrics,
    pub scores: Vec<f64>,
    pub roc: RocCurve,
}

pub fn evaluate(model: &FittedModel, test: &FeatureMatrix, fold: usize) -> Result<FoldEval> {
    let err = |e: String| fail(Stage::Eval, Some(fold), e);
    let scores = model.score(test).map_err(err)?;
    score_metrics(scores, &test.labels, fold)
}

fn score_metrics(scores: Vec<f64>, labels: &[u8], fold: usize) -> Result<FoldEval> {
    let err = tag(Stage::Eval, Some(fold));
    let roc = eval::roc(&scores, labels).map_err(err)?;
    let accuracy = eval::accuracy(&scores, labels, 0.5).map_err(tag(Stage::Eval, Some(fold)))?;
    Ok(FoldEval {
        metrics: FoldMetrics {
            fold,
            auc: eval::auc(&roc),
            accuracy,
            n_test: labels.len(),
        },
        scores,
        roc,
    })
}

/// Rows that each fitted component saw, in preprocessed-table indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FitAudit {
    pub fold: usize,
    pub test: BTreeSet<usize>,
    pub smote: BTreeSet<usize>,
    pub pca: BTreeSet<usize>,
    pub scaler: BTreeSet<usize>,
    pub sae: BTreeSet<usize>,
}

impl FitAudit {
    pub fn new(split: &FoldSplit, origin: &[RowOrigin], sae_used: bool) -> Self {
        let contributing: BTreeSet<usize> = origin.iter().flat_map(|o| [o.base, o.neighbor]).collect();
        Self {
            fold: split.fold,
            test: split.test.iter().copied().collect(),
            smote: split.fit.iter().copied().collect(),
            pca: contributing.clone(),
            scaler: contributing.clone(),
            sae: if sae_used { contributing } else { BTreeSet::new() },
        }
    }

    /// `(component, row)` pairs where a test row was used for fitting.
    pub fn leaks(&self) -> Vec<(&'static str, usize)> {
        let mut out = Vec::new();
        for (name, set) in [("smote", &self.smote), ("pca", &self.pca), ("scaler", &self.scaler), ("sae", &self.sae)] {
            out.extend(set.intersection(&self.test).map(|&r| (name, r)));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub trained: TrainedFold,
    pub eval: FoldEval,
    pub audit: FitAudit,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: CvReport,
    pub folds: Vec<FoldOutcome>,
    pub source: Network,
}

/// Writes fold artifacts when an output directory is given.
struct Sink<'a> {
    dir: Option<&'a Path>,
}

impl Sink<'_> {
    fn fold_dir(&self, fold: usize) -> Option<PathBuf> {
        self.dir.map(|d| d.join(format!("fold{fold}")))
    }

    fn write(&self, stage: Stage, fold: Option<usize>, name: &str, f: impl FnOnce(&Path) -> std::result::Result<(), String>) -> Result<()> {
        let dir = match fold {
            Some(k) => self.fold_dir(k),
            None => self.dir.map(Path::to_path_buf),
        };
        let Some(dir) = dir else { return Ok(()) };
        std::fs::create_dir_all(&dir).map_err(tag(stage, fold))?;
        f(&dir.join(name)).map_err(|e| fail(stage, fold, format!("{name}: {e}")))
    }
}

fn save_matrix(m: &FeatureMatrix) -> impl FnOnce(&Path) -> std::result::Result<(), String> + '_ {
    move |p| m.save_csv(p).map_err(|e| e.to_string())
}

fn save_text(s: String) -> impl FnOnce(&Path) -> std::result::Result<(), String> {
    move |p| std::fs::write(p, s).map_err(|e| e.to_string())
}

fn split_text(s: &FoldSplit) -> String {
    let mut rows: Vec<(usize, &str)> = s.fit.iter().map(|&r| (r, "fit")).collect();
    rows.extend(s.val.iter().map(|&r| (r, "val")));
    rows.extend(s.test.iter().map(|&r| (r, "test")));
    rows.sort_unstable();
    let mut out = String::from("row,role\n");
    for (r, role) in rows {
        out.push_str(&format!("{r},{role}\n"));
    }
    out
}

pub fn parse_split(text: &str, fold: usize) -> std::result::Result<FoldSplit, String> {
    let mut s = FoldSplit { fold, fit: vec![], val: vec![], test: vec![] };
    for line in text.lines().skip(1) {
        let (r, role) = line.split_once(',').ok_or("malformed split line")?;
        let r: usize = r.parse().map_err(|_| "bad row index")?;
        match role {
            "fit" => s.fit.push(r),
            "val" => s.val.push(r),
            "test" => s.test.push(r),
            _ => return Err(format!("unknown role {role}")),
        }
    }
    Ok(s)
}

fn origin_text(o: &[RowOrigin]) -> String {
    let mut out = String::from("row,base,neighbor,delta\n");
    for (i, r) in o.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", r.base, r.neighbor, r.delta));
    }
    out
}

pub fn parse_origin(text: &str) -> std::result::Result<Vec<RowOrigin>, String> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err("malformed provenance line".to_string());
            }
            let p = |s: &str| s.parse::<usize>().map_err(|_| "bad index".to_string());
            Ok(RowOrigin {
                base: p(f[1])?,
                neighbor: p(f[2])?,
                delta: f[3].parse().map_err(|_| "bad delta".to_string())?,
            })
        })
        .collect()
}

fn history_text(h: &[EpochRecord]) -> String {
    let mut buf = Vec::new();
    optim::write_history(h, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

fn roc_text(c: &RocCurve) -> String {
    let mut buf = Vec::new();
    c.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

fn scores_text(rows: &[usize], labels: &[u8], scores: &[f64]) -> String {
    let mut out = String::from("row,label,score\n");
    for ((r, l), s) in rows.iter().zip(labels).zip(scores) {
        out.push_str(&format!("{r},{l},{s}\n"));
    }
    out
}

fn metrics_text(m: &FoldMetrics) -> String {
    format!("fold = {}\nauc = {}\naccuracy = {}\nn_test = {}\n", m.fold, m.auc, m.accuracy, m.n_test)
}

pub fn parse_metrics(text: &str) -> std::result::Result<FoldMetrics, String> {
    let get = |k: &str| {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(a, _)| a.trim() == k)
            .map(|(_, b)| b.trim().to_string())
            .ok_or_else(|| format!("metrics lack {k}"))
    };
    Ok(FoldMetrics {
        fold: get("fold")?.parse().map_err(|_| "bad fold")?,
        auc: get("auc")?.parse().map_err(|_| "bad auc")?,
        accuracy: get("accuracy")?.parse().map_err(|_| "bad accuracy")?,
        n_test: get("n_test")?.parse().map_err(|_| "bad n_test")?,
    })
}

fn meta_for(fold: usize, t: &TrainedFold) -> String {
    format!("fold = {fold}\nstage1_epochs = {}\nstage2_epochs = {}\n", t.stage1.len(), t.stage2.len())
}

pub fn load_preprocessed(cfg: &PipelineConfig) -> Result<FeatureMatrix> {
    let table = dataset::load_csv(&cfg.data_file(), &cfg.label_column, &cfg.csv_options()).map_err(tag(Stage::Preprocess, None))?;
    dataset::preprocess(&table, cfg.missing_threshold).map_err(tag(Stage::Preprocess, None))
}

fn run_fold(cfg: &PipelineConfig, data: &FeatureMatrix, split: &FoldSplit, source: &Network, sink: &Sink) -> Result<FoldOutcome> {
    let f = Some(split.fold);
    sink.write(Stage::Balance, f, "split.csv", save_text(split_text(split)))?;
    let test_rows = data.select(&split.test);
    sink.write(Stage::Balance, f, "test.csv", save_matrix(&test_rows))?;
    let balanced = balance(data, split, cfg)?;
    sink.write(Stage::Balance, f, "balanced.csv", save_matrix(&balanced.data))?;
    sink.write(Stage::Balance, f, "balance_rows.csv", save_text(origin_text(&balanced.origin)))?;

    let projection = Projection::fit(&balanced.data.x, cfg).map_err(|e| fail(Stage::Pca, f, e))?;
    let mut ck = Checkpoint::new();
    projection.to_checkpoint(&mut ck);
    sink.write(Stage::Pca, f, "projection.cbcn", |p| ck.save(p).map_err(|e| e.to_string()))?;

    let px = encode_sets(&projection, &balanced, data, split)?;
    for (name, m) in px.parts() {
        sink.write(Stage::Encode, f, &format!("pixels_{name}.csv"), save_matrix(m))?;
    }

    let sae = if cfg.mode.uses_auxiliary() {
        let (model, recon) = train_sae(cfg, &px, split.fold)?;
        let mut ck = Checkpoint::new();
        ck.put("sae", checkpoint::encode_sae(&model));
        sink.write(Stage::TrainSae, f, "sae.cbcn", |p| ck.save(p).map_err(|e| e.to_string()))?;
        for (name, m) in recon.parts() {
            sink.write(Stage::TrainSae, f, &format!("recon_{name}.csv"), save_matrix(m))?;
        }
        Some((model, recon))
    } else {
        None
    };
    let audit = FitAudit::new(split, &balanced.origin, sae.is_some());

    let trained = train_fold(cfg, source, projection, &px, sae, split.fold)?;
    write_trained(sink, cfg, split.fold, &trained)?;

    let ev = evaluate(&trained.model, &test_rows, split.fold)?;
    write_eval(sink, split, &test_rows.labels, &ev)?;
    Ok(FoldOutcome {
        split: split.clone(),
        trained,
        eval: ev,
        audit,
    })
}

fn write_trained(sink: &Sink, cfg: &PipelineConfig, fold: usize, t: &TrainedFold) -> Result<()> {
    let f = Some(fold);
    let ck = t.model.to_checkpoint(Some(&t.adam), &cfg.fingerprint(), &meta_for(fold, t));
    sink.write(Stage::Train, f, "model.cbcn", |p| ck.save(p).map_err(|e| e.to_string()))?;
    sink.write(Stage::Train, f, "history_stage1.csv", save_text(history_text(&t.stage1)))?;
    sink.write(Stage::Train, f, "history_stage2.csv", save_text(history_text(&t.stage2)))
}

fn write_eval(sink: &Sink, split: &FoldSplit, labels: &[u8], ev: &FoldEval) -> Result<()> {
    let f = Some(split.fold);
    sink.write(Stage::Eval, f, "scores.csv", save_text(scores_text(&split.test, labels, &ev.scores)))?;
    sink.write(Stage::Eval, f, "roc.csv", save_text(roc_text(&ev.roc)))?;
    sink.write(Stage::Eval, f, "metrics.txt", save_text(metrics_text(&ev.metrics)))
}

/// Full cross-validated pipeline on preprocessed data. Folds run in
/// parallel; results are assembled in fold order.
pub fn run_cb_pipeline(data: &FeatureMatrix, cfg: &PipelineConfig, out: Option<&Path>) -> Result<RunOutput> {
    let sink = Sink { dir: out };
    let (assignments, splits) = split_folds(&data.labels, cfg).map_err(tag(Stage::Balance, None))?;
    let source = pretrain(cfg)?;
    let mut ck = Checkpoint::new();
    ck.put("network", checkpoint::encode_network(&source));
    ck.put("fingerprint", checkpoint::encode_text(&cfg.fingerprint()));
    sink.write(Stage::Pretrain, None, "source.cbcn", |p| ck.save(p).map_err(|e| e.to_string()))?;

    let folds = par::map(&splits, |s| run_fold(cfg, data, s, &source, &sink)).into_iter().collect::<Result<Vec<_>>>()?;
    let report = CvReport {
        mode: cfg.mode.to_string(),
        folds: folds.iter().map(|f| f.eval.metrics.clone()).collect(),
        assignments,
        fingerprint: cfg.fingerprint(),
    };
    if let Some(dir) = out {
        std::fs::write(dir.join("cv_report.txt"), report.to_text()).map_err(tag(Stage::Eval, None))?;
        if let Some(last) = folds.last() {
            let ck = last.trained.model.to_checkpoint(Some(&last.trained.adam), &cfg.fingerprint(), &meta_for(last.split.fold, &last.trained));
            ck.save(&dir.join("final.cbcn")).map_err(tag(Stage::Eval, None))?;
        }
    }
    Ok(RunOutput { report, folds, source })
}

/// Preprocesses the configured data file and runs the pipeline, writing
/// every artifact under the configured output directory.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<RunOutput> {
    let out = cfg.output_path();
    std::fs::create_dir_all(&out).map_err(tag(Stage::Preprocess, None))?;
    std::fs::write(out.join("effective.conf"), cfg.to_text()).map_err(tag(Stage::Preprocess, None))?;
    let data = load_preprocessed(cfg)?;
    data.save_csv(&out.join("preprocessed.csv")).map_err(tag(Stage::Preprocess, None))?;
    log::info!(
        "{} rows, {} features after preprocessing; mode {}",
        data.n_samples(),
        data.n_features(),
        cfg.mode
    );
    par::with_jobs(cfg.jobs, || run_cb_pipeline(&data, cfg, Some(&out)))
}

// ---- single-stage execution from persisted artifacts ----

fn read_text(stage: Stage, fold: Option<usize>, p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| fail(stage, fold, format!("{}: {e}", p.display())))
}

fn read_matrix(stage: Stage, fold: Option<usize>, p: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::load_csv(p).map_err(|e| fail(stage, fold, format!("{}: {e}", p.display())))
}

fn read_ck(stage: Stage, fold: Option<usize>, p: &Path) -> Result<Checkpoint> {
    Checkpoint::load(p).map_err(|e| fail(stage, fold, format!("{}: {e}", p.display())))
}

fn read_sets(stage: Stage, fold: usize, dir: &Path, prefix: &str) -> Result<PixelSets> {
    let r = |n: &str| read_matrix(stage, Some(fold), &dir.join(format!("{prefix}_{n}.csv")));
    Ok(PixelSets {
        train: r("train")?,
        val: r("val")?,
        test: r("test")?,
    })
}

fn stage_fold(stage: Stage, cfg: &PipelineConfig, out: &Path, fold: usize) -> Result<()> {
    let f = Some(fold);
    let sink = Sink { dir: Some(out) };
    let dir = out.join(format!("fold{fold}"));
    match stage {
        Stage::Balance => {
            let data = read_matrix(stage, None, &out.join("preprocessed.csv"))?;
            let (_, splits) = split_folds(&data.labels, cfg).map_err(tag(stage, f))?;
            let split = &splits[fold];
            sink.write(stage, f, "split.csv", save_text(split_text(split)))?;
            sink.write(stage, f, "test.csv", save_matrix(&data.select(&split.test)))?;
            let b = balance(&data, split, cfg)?;
            sink.write(stage, f, "balanced.csv", save_matrix(&b.data))?;
            sink.write(stage, f, "balance_rows.csv", save_text(origin_text(&b.origin)))
        }
        Stage::Pca => {
            let b = read_matrix(stage, f, &dir.join("balanced.csv"))?;
            let proj = Projection::fit(&b.x, cfg).map_err(|e| fail(stage, f, e))?;
            let mut ck = Checkpoint::new();
            proj.to_checkpoint(&mut ck);
            sink.write(stage, f, "projection.cbcn", |p| ck.save(p).map_err(|e| e.to_string()))
        }
        Stage::Encode => {
            let data = read_matrix(stage, None, &out.join("preprocessed.csv"))?;
            let split = parse_split(&read_text(stage, f, &dir.join("split.csv"))?, fold).map_err(|e| fail(stage, f, e))?;
            let b = read_matrix(stage, f, &dir.join("balanced.csv"))?;
            let proj = Projection::from_checkpoint(&read_ck(stage, f, &dir.join("projection.cbcn"))?).map_err(tag(stage, f))?;
            let balanced = Balanced { data: b, origin: Vec::new() };
            let px = encode_sets(&proj, &balanced, &data, &split)?;
            for (name, m) in px.parts() {
                sink.write(stage, f, &format!("pixels_{name}.csv"), save_matrix(m))?;
            }
            Ok(())
        }
        Stage::TrainSae => {
            if !cfg.mode.uses_auxiliary() {
                log::info!("boost mode none: no autoencoder to train");
                return Ok(());
            }
            let px = read_sets(stage, fold, &dir, "pixels")?;
            let (model, recon) = train_sae(cfg, &px, fold)?;
            let mut ck = Checkpoint::new();
            ck.put("sae", checkpoint::encode_sae(&model));
            sink.write(stage, f, "sae.cbcn", |p| ck.save(p).map_err(|e| e.to_string()))?;
            for (name, m) in recon.parts() {
                sink.write(stage, f, &format!("recon_{name}.csv"), save_matrix(m))?;
            }
            Ok(())
        }
        Stage::Train => {
            let source = checkpoint::decode_network(read_ck(stage, None, &out.join("source.cbcn"))?.require("network").map_err(tag(stage, None))?)
                .map_err(tag(stage, None))?;
            let proj = Projection::from_checkpoint(&read_ck(stage, f, &dir.join("projection.cbcn"))?).map_err(tag(stage, f))?;
            let px = read_sets(stage, fold, &dir, "pixels")?;
            let sae = if cfg.mode.uses_auxiliary() {
                let ck = read_ck(stage, f, &dir.join("sae.cbcn"))?;
                let m = checkpoint::decode_sae(ck.require("sae").map_err(tag(stage, f))?).map_err(tag(stage, f))?;
                Some((m, read_sets(stage, fold, &dir, "recon")?))
            } else {
                None
            };
            let trained = train_fold(cfg, &source, proj, &px, sae, fold)?;
            write_trained(&sink, cfg, fold, &trained)
        }
        Stage::Eval => {
            let model = FittedModel::from_checkpoint(&read_ck(stage, f, &dir.join("model.cbcn"))?).map_err(|e| fail(stage, f, e))?;
            let split = parse_split(&read_text(stage, f, &dir.join("split.csv"))?, fold).map_err(|e| fail(stage, f, e))?;
            let test = read_matrix(stage, f, &dir.join("test.csv"))?;
            let ev = evaluate(&model, &test, fold)?;
            write_eval(&sink, &split, &test.labels, &ev)
        }
        Stage::Preprocess | Stage::Pretrain => unreachable!("not a fold stage"),
    }
}

/// Runs one stage from the artifacts already in the output directory.
/// Fold stages run for `fold` or for every fold when it is `None`. After
/// `eval` over all folds the cross-validation report is written.
pub fn cmd_stage(stage: Stage, cfg: &PipelineConfig, fold: Option<usize>) -> Result<()> {
    let out = cfg.output_path();
    std::fs::create_dir_all(&out).map_err(tag(stage, None))?;
    match stage {
        Stage::Preprocess => {
            std::fs::write(out.join("effective.conf"), cfg.to_text()).map_err(tag(stage, None))?;
            let data = load_preprocessed(cfg)?;
            data.save_csv(&out.join("preprocessed.csv")).map_err(tag(stage, None))
        }
        Stage::Pretrain => {
            let source = pretrain(cfg)?;
            let mut ck = Checkpoint::new();
            ck.put("network", checkpoint::encode_network(&source));
            ck.put("fingerprint", checkpoint::encode_text(&cfg.fingerprint()));
            ck.save(&out.join("source.cbcn")).map_err(tag(stage, None))
        }
        _ => {
            if let Some(k) = fold.filter(|&k| k >= cfg.folds) {
                return Err(fail(stage, Some(k), format!("fold index out of range (folds = {})", cfg.folds)));
            }
            let folds: Vec<usize> = fold.map_or_else(|| (0..cfg.folds).collect(), |k| vec![k]);
            par::with_jobs(cfg.jobs, || {
                par::map(&folds, |&k| stage_fold(stage, cfg, &out, k)).into_iter().collect::<Result<Vec<_>>>()
            })?;
            if stage == Stage::Eval && fold.is_none() {
                write_report_from_dir(cfg, &out)?;
            }
            Ok(())
        }
    }
}

fn write_report_from_dir(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let data = read_matrix(Stage::Eval, None, &out.join("preprocessed.csv"))?;
    let (assignments, _) = split_folds(&data.labels, cfg).map_err(tag(Stage::Eval, None))?;
    let folds = (0..cfg.folds)
        .map(|k| {
            let p = out.join(format!("fold{k}")).join("metrics.txt");
            parse_metrics(&read_text(Stage::Eval, Some(k), &p)?).map_err(|e| fail(Stage::Eval, Some(k), e))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = CvReport {
        mode: cfg.mode.to_string(),
        folds,
        assignments,
        fingerprint: cfg.fingerprint(),
    };
    std::fs::write(out.join("cv_report.txt"), report.to_text()).map_err(tag(Stage::Eval, None))?;
    let last = out.join(format!("fold{}", cfg.folds - 1)).join("model.cbcn");
    std::fs::copy(&last, out.join("final.cbcn")).map_err(tag(Stage::Eval, None))?;
    Ok(())
}

/// Re-derives each fold's fitting audit from the files of a finished run.
pub fn audit_run_dir(cfg: &PipelineConfig, out: &Path) -> Result<Vec<FitAudit>> {
    (0..cfg.folds)
        .map(|k| {
            let dir = out.join(format!("fold{k}"));
            let split = parse_split(&read_text(Stage::Eval, Some(k), &dir.join("split.csv"))?, k).map_err(|e| fail(Stage::Eval, Some(k), e))?;
            let origin = parse_origin(&read_text(Stage::Eval, Some(k), &dir.join("balance_rows.csv"))?).map_err(|e| fail(Stage::Eval, Some(k), e))?;
            Ok(FitAudit::new(&split, &origin, cfg.mode.uses_auxiliary()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("fit".parse::<Stage>().unwrap_err().contains("train-sae"));
    }

    #[test]
    fn error_carries_stage_and_fold() {
        let e = fail(Stage::TrainSae, Some(3), "boom");
        assert_eq!(e.to_string(), "train-sae (fold 3): boom");
        assert_eq!(fail(Stage::Preprocess, None, "x").to_string(), "preprocess: x");
    }

    #[test]
    fn split_and_origin_text_round_trip() {
        let s = FoldSplit { fold: 1, fit: vec![0, 3, 4], val: vec![2], test: vec![1, 5] };
        assert_eq!(parse_split(&split_text(&s), 1).unwrap(), s);
        let o = vec![RowOrigin { base: 3, neighbor: 3, delta: 0.0 }, RowOrigin { base: 4, neighbor: 0, delta: 0.123456789 }];
        assert_eq!(parse_origin(&origin_text(&o)).unwrap(), o);
        let m = FoldMetrics { fold: 2, auc: 0.8125, accuracy: 0.9, n_test: 40 };
        assert_eq!(parse_metrics(&metrics_text(&m)).unwrap(), m);
    }

    #[test]
    fn folds_partition_rows() {
        let labels: Vec<u8> = (0..140).map(|i| u8::from(i % 14 == 0)).collect();
        let cfg = PipelineConfig::default();
        let (assign, splits) = split_folds(&labels, &cfg).unwrap();
        assert_eq!(assign.len(), 140);
        for s in &splits {
            let mut all: Vec<usize> = s.fit.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..140).collect::<Vec<_>>());
            assert!(s.val.iter().any(|&r| labels[r] == 1) || s.val.len() < 14);
            let audit = FitAudit::new(s, &[], false);
            assert!(audit.leaks().is_empty());
        }
        let s = &splits[0];
        let leaky = [RowOrigin { base: s.fit[0], neighbor: s.test[0], delta: 0.5 }];
        let audit = FitAudit::new(s, &leaky, true);
        assert_eq!(audit.leaks().len(), 3);
    }
}
