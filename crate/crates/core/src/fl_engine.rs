//! Clustered federated learning with hierarchical transfer for compromised
//! users.
//!
//! Each station averages its members' models every round. When transfer is
//! enabled, members whose accuracy fell strictly below their cluster mean in
//! the previous epoch share only the base layers and keep training their own
//! personalization layers; everyone else averages both regions.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learnkit::{self, Batch, LearnError, NetworkSpec, OutputHead, ParameterVector, Region};
use crate::scenario::AssociationMatrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq)]
pub enum IdxError {
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum FlError {
    #[error("cannot cover {classes} classes with {samples} samples per user")]
    CoverageImpossible { samples: usize, classes: usize },
    #[error("data source has no samples of class {class}")]
    MissingClass { class: usize },
    #[error("swap pair {pair:?} outside {classes} classes")]
    SwapPairRange { pair: [usize; 2], classes: usize },
    #[error("user {user} has an empty dataset")]
    EmptyDataset { user: usize },
    #[error("user {user} has an empty test set")]
    EmptyTestSet { user: usize },
    #[error("batch size {batch} exceeds {available} training samples")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("aggregation weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
    #[error("negative aggregation weight {weight}")]
    NegativeWeight { weight: f64 },
    #[error("nothing to aggregate")]
    NoModels,
    #[error("{0} users in association, {1} in datasets/models")]
    UserCount(usize, usize),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Idx(#[from] IdxError),
}

/// Labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn empty(dim: usize) -> Self {
        Self { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, k: usize) -> &[f64] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    pub fn push(&mut self, feature: &[f64], label: usize) {
        debug_assert_eq!(feature.len(), self.dim);
        self.features.extend_from_slice(feature);
        self.labels.push(label);
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.len(), self.dim, self.features.clone())
    }

    pub fn select(&self, indices: &[usize]) -> (Batch, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &k in indices {
            data.extend_from_slice(self.feature(k));
            labels.push(self.labels[k]);
        }
        (Batch::new(indices.len(), self.dim, data), labels)
    }
}

/// One user's local data after its cluster's label swap.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDataset {
    pub train: Samples,
    pub test: Samples,
    pub swap_pair: [usize; 2],
}

impl UserDataset {
    pub fn size(&self) -> usize {
        self.train.len()
    }
}

pub fn swap_label(label: usize, pair: [usize; 2]) -> usize {
    if label == pair[0] {
        pair[1]
    } else if label == pair[1] {
        pair[0]
    } else {
        label
    }
}

/// Decoded IDX image/label files.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    pub rows: usize,
    pub cols: usize,
    /// Pixels scaled to `[0, 1]`, one image per `rows * cols` chunk.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImagePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, k: usize) -> &[f64] {
        &self.pixels[k * self.dim()..(k + 1) * self.dim()]
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(IdxError::Truncated { needed: at + 4, available: bytes.len() })
}

/// Parses an IDX images file (`0x00000803`, three dimensions).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::WrongMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .and_then(|x| x.checked_add(16))
        .unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(IdxError::Truncated { needed, available: bytes.len() });
    }
    Ok((count, rows, cols, &bytes[16..needed]))
}

/// Parses an IDX labels file (`0x00000801`, one dimension).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::WrongMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4)? as usize;
    let needed = count.saturating_add(8);
    if bytes.len() < needed {
        return Err(IdxError::Truncated { needed, available: bytes.len() });
    }
    Ok(&bytes[8..needed])
}

pub fn idx_pool_from_bytes(images: &[u8], labels: &[u8]) -> Result<ImagePool, IdxError> {
    let (count, rows, cols, raw) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch { images: count, labels: labels.len() });
    }
    Ok(ImagePool {
        rows,
        cols,
        pixels: raw.iter().map(|&p| f64::from(p) / 255.0).collect(),
        labels: labels.iter().map(|&l| usize::from(l)).collect(),
    })
}

pub fn ingest_idx(images_path: &Path, labels_path: &Path) -> Result<ImagePool, IdxError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| IdxError::Io { path: p.display().to_string(), reason: e.to_string() })
    };
    idx_pool_from_bytes(&read(images_path)?, &read(labels_path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples_per_user: usize,
    pub num_classes: usize,
    /// Feature width of the synthetic source.
    pub feature_dim: usize,
    /// Per-coordinate std of the synthetic class means (noise std is 1).
    pub class_separation: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples_per_user: 500, num_classes: 10, feature_dim: 16, class_separation: 1.0, test_fraction: 0.2 }
    }
}

/// Base distribution before label swapping.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Gaussian class blobs with unit covariance around seeded means.
    Synthetic { means: Vec<Vec<f64>> },
    Images(ImagePool),
}

impl DataSource {
    pub fn synthetic<R: Rng + ?Sized>(cfg: &DataConfig, rng: &mut R) -> Self {
        let means = (0..cfg.num_classes)
            .map(|_| {
                (0..cfg.feature_dim)
                    .map(|_| cfg.class_separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        DataSource::Synthetic { means }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSource::Synthetic { means } => means.first().map_or(0, Vec::len),
            DataSource::Images(pool) => pool.dim(),
        }
    }
}

/// Draws every user's local data from `source` and applies its swap pair.
///
/// Each user's draw starts with one sample of every class, so all classes
/// are covered; the rest are uniform over classes. Train/test are split
/// after a shuffle.
pub fn generate_label_swap_data<R: Rng + ?Sized>(
    cfg: &DataConfig,
    source: &DataSource,
    swap_pairs: &[[usize; 2]],
    rng: &mut R,
) -> Result<Vec<UserDataset>, FlError> {
    if cfg.samples_per_user < cfg.num_classes || cfg.num_classes == 0 {
        return Err(FlError::CoverageImpossible { samples: cfg.samples_per_user, classes: cfg.num_classes });
    }
    if let Some(&pair) = swap_pairs.iter().find(|p| p[0] >= cfg.num_classes || p[1] >= cfg.num_classes) {
        return Err(FlError::SwapPairRange { pair, classes: cfg.num_classes });
    }
    let by_class: Vec<Vec<usize>> = match source {
        DataSource::Images(pool) => {
            let mut by_class = vec![Vec::new(); cfg.num_classes];
            for (k, &l) in pool.labels.iter().enumerate() {
                if l < cfg.num_classes {
                    by_class[l].push(k);
                }
            }
            if let Some(class) = by_class.iter().position(Vec::is_empty) {
                return Err(FlError::MissingClass { class });
            }
            by_class
        }
        DataSource::Synthetic { .. } => Vec::new(),
    };
    let dim = source.dim();
    let n_test = ((cfg.samples_per_user as f64) * cfg.test_fraction).round() as usize;
    let mut users = Vec::with_capacity(swap_pairs.len());
    let mut feature = vec![0.0; dim];
    for &pair in swap_pairs {
        let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
        classes.extend((cfg.num_classes..cfg.samples_per_user).map(|_| rng.random_range(0..cfg.num_classes)));
        classes.shuffle(rng);
        let mut train = Samples::empty(dim);
        let mut test = Samples::empty(dim);
        for (k, &c) in classes.iter().enumerate() {
            match source {
                DataSource::Synthetic { means } => {
                    for (f, m) in feature.iter_mut().zip(&means[c]) {
                        *f = m + rng.sample::<f64, _>(StandardNormal);
                    }
                }
                DataSource::Images(pool) => {
                    let pick = by_class[c][rng.random_range(0..by_class[c].len())];
                    feature.copy_from_slice(pool.image(pick));
                }
            }
            let target = if k < n_test { &mut test } else { &mut train };
            target.push(&feature, swap_label(c, pair));
        }
        users.push(UserDataset { train, test, swap_pair: pair });
    }
    Ok(users)
}

/// Dense classifier `input -> hidden... -> classes` with the cut before the
/// final layer.
pub fn classifier_spec(input: usize, hidden: &[usize], classes: usize) -> Result<NetworkSpec, LearnError> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(classes);
    let cut = sizes.len() - 2;
    NetworkSpec::new(sizes, OutputHead::Softmax, cut.max(1))
}

/// One SGD step on a random mini-batch, optionally limited to one region.
#[allow(clippy::too_many_arguments)]
pub fn local_update<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &ParameterVector,
    data: &Samples,
    lr: f64,
    batch_size: usize,
    region: Region,
    rng: &mut R,
) -> Result<ParameterVector, FlError> {
    if data.is_empty() {
        return Err(FlError::EmptyDataset { user: 0 });
    }
    if batch_size > data.len() {
        return Err(FlError::BatchTooLarge { batch: batch_size, available: data.len() });
    }
    let picks = index::sample(rng, data.len(), batch_size).into_vec();
    let (x, y) = data.select(&picks);
    let (_, grad) = learnkit::backward(spec, params, &x, &y)?;
    let mut out = params.clone();
    learnkit::sgd_step_in_place(&mut out, &grad, lr, Some(spec.region(region)))?;
    Ok(out)
}

/// Weighted elementwise mean over `region`; entries outside the region are 0.
pub fn aggregate(
    spec: &NetworkSpec,
    models: &[&ParameterVector],
    weights: &[f64],
    region: Region,
) -> Result<ParameterVector, FlError> {
    if models.is_empty() {
        return Err(FlError::NoModels);
    }
    if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
        return Err(FlError::NegativeWeight { weight: w });
    }
    let sum: f64 = weights.iter().sum();
    if weights.len() != models.len() || (sum - 1.0).abs() > 1e-9 {
        return Err(FlError::WeightSum { sum });
    }
    for m in models {
        m.check(spec)?;
    }
    let range = spec.region(region);
    let mut out = ParameterVector::zeros(spec);
    let acc = &mut out.values_mut()[range.clone()];
    for (m, &w) in models.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(&m.values()[range.clone()]) {
            *a += w * v;
        }
    }
    Ok(out)
}

/// Data-size-proportional weights `|D_i| / sum |D_k|` over `members`.
pub fn data_weights(members: &[usize], datasets: &[UserDataset]) -> Vec<f64> {
    let total: usize = members.iter().map(|&i| datasets[i].size()).sum();
    members.iter().map(|&i| datasets[i].size() as f64 / total as f64).collect()
}

/// Fraction of `data` whose argmax prediction equals the label.
pub fn accuracy(spec: &NetworkSpec, params: &ParameterVector, data: &Samples) -> Result<f64, FlError> {
    let out = learnkit::forward(spec, params, &data.as_batch())?;
    let correct = (0..out.rows)
        .filter(|&r| {
            let row = out.row(r);
            let pred = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            pred == data.labels[r]
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    /// Test accuracy of every user on its own model.
    pub per_user: Vec<f64>,
    /// Mean over users.
    pub system: f64,
    /// `true` where accuracy strictly improved on the previous report.
    pub improved: Vec<bool>,
}

impl AccuracyReport {
    pub fn from_per_user(per_user: Vec<f64>, previous: Option<&AccuracyReport>) -> Self {
        let system = per_user.iter().sum::<f64>() / per_user.len() as f64;
        let improved = match previous {
            Some(prev) => per_user.iter().zip(&prev.per_user).map(|(now, before)| now > before).collect(),
            None => vec![false; per_user.len()],
        };
        Self { per_user, system, improved }
    }
}

pub fn evaluate(
    spec: &NetworkSpec,
    models: &[ParameterVector],
    assoc: &AssociationMatrix,
    datasets: &[UserDataset],
    previous: Option<&AccuracyReport>,
) -> Result<AccuracyReport, FlError> {
    if assoc.num_users() != models.len() || models.len() != datasets.len() {
        return Err(FlError::UserCount(assoc.num_users(), models.len().min(datasets.len())));
    }
    let per_user = models
        .iter()
        .zip(datasets)
        .enumerate()
        .map(|(i, (m, d))| {
            if d.test.is_empty() {
                Err(FlError::EmptyTestSet { user: i })
            } else {
                accuracy(spec, m, &d.test)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AccuracyReport::from_per_user(per_user, previous))
}

/// Members strictly below their station's mean accuracy.
pub fn identify_compromised(report: &AccuracyReport, assoc: &AssociationMatrix) -> Vec<Vec<usize>> {
    (0..assoc.num_stations())
        .map(|j| {
            let members = assoc.members(j);
            if members.is_empty() {
                return Vec::new();
            }
            let mean = members.iter().map(|&i| report.per_user[i]).sum::<f64>() / members.len() as f64;
            members.into_iter().filter(|&i| report.per_user[i] < mean).collect()
        })
        .collect()
}

/// Per-station loss `sum_i l_i * mean_n f_i(w_i; x_n, y_n)` on training data.
pub fn cluster_loss(
    spec: &NetworkSpec,
    models: &[ParameterVector],
    assoc: &AssociationMatrix,
    datasets: &[UserDataset],
) -> Result<Vec<f64>, FlError> {
    (0..assoc.num_stations())
        .map(|j| {
            let members = assoc.members(j);
            if members.is_empty() {
                return Ok(0.0);
            }
            let weights = data_weights(&members, datasets);
            members.iter().zip(weights).try_fold(0.0, |acc, (&i, w)| {
                let d = &datasets[i].train;
                Ok(acc + w * learnkit::loss(spec, &models[i], &d.as_batch(), &d.labels)?)
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlSettings {
    /// Rounds per epoch.
    pub rounds: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for FlSettings {
    fn default() -> Self {
        Self { rounds: 5, learning_rate: 0.05, batch_size: 32 }
    }
}

/// Every user's local model plus per-station aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModelState {
    pub spec: NetworkSpec,
    pub user_models: Vec<ParameterVector>,
    pub station_models: Vec<Option<ParameterVector>>,
    /// Compromised members per station for the current epoch.
    pub compromised: Vec<Vec<usize>>,
}

impl ClusterModelState {
    /// All users start from one shared initialization.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, num_users: usize, num_stations: usize, rng: &mut R) -> Self {
        let init = ParameterVector::glorot(&spec, rng);
        Self {
            spec,
            user_models: vec![init; num_users],
            station_models: vec![None; num_stations],
            compromised: vec![Vec::new(); num_stations],
        }
    }

    pub fn is_compromised(&self, user: usize) -> bool {
        self.compromised.iter().any(|set| set.contains(&user))
    }
}

/// Runs `settings.rounds` rounds under `assoc` and evaluates.
///
/// Compromised sets are recomputed from `previous` against the current
/// association before the first round (empty when there is no previous
/// report or transfer is off).
pub fn run_fl_rounds<R: Rng + ?Sized>(
    state: &mut ClusterModelState,
    assoc: &AssociationMatrix,
    datasets: &[UserDataset],
    settings: &FlSettings,
    transfer: bool,
    previous: Option<&AccuracyReport>,
    rng: &mut R,
) -> Result<AccuracyReport, FlError> {
    let n = assoc.num_users();
    if state.user_models.len() != n || datasets.len() != n {
        return Err(FlError::UserCount(n, state.user_models.len().min(datasets.len())));
    }
    let m = assoc.num_stations();
    state.station_models.resize(m, None);
    state.compromised = match (transfer, previous) {
        (true, Some(report)) => identify_compromised(report, assoc),
        _ => vec![Vec::new(); m],
    };
    let spec = state.spec.clone();
    let base = spec.region(Region::Base);
    let pers = spec.region(Region::Personalization);

    for _ in 0..settings.rounds {
        for (i, data) in datasets.iter().enumerate() {
            state.user_models[i] = local_update(
                &spec,
                &state.user_models[i],
                &data.train,
                settings.learning_rate,
                settings.batch_size,
                Region::All,
                rng,
            )
            .map_err(|e| match e {
                FlError::EmptyDataset { .. } => FlError::EmptyDataset { user: i },
                other => other,
            })?;
        }
        for j in 0..m {
            let members = assoc.members(j);
            if members.is_empty() {
                continue;
            }
            let weights = data_weights(&members, datasets);
            let models: Vec<&ParameterVector> = members.iter().map(|&i| &state.user_models[i]).collect();
            let compromised = &state.compromised[j];
            let merged = if compromised.is_empty() {
                aggregate(&spec, &models, &weights, Region::All)?
            } else {
                let mut merged = aggregate(&spec, &models, &weights, Region::Base)?;
                let keep: Vec<usize> = members.iter().copied().filter(|i| !compromised.contains(i)).collect();
                let keep_models: Vec<&ParameterVector> = keep.iter().map(|&i| &state.user_models[i]).collect();
                let pers_avg = aggregate(&spec, &keep_models, &data_weights(&keep, datasets), Region::Personalization)?;
                merged.values_mut()[pers.clone()].copy_from_slice(&pers_avg.values()[pers.clone()]);
                merged
            };
            for &i in &members {
                let target = state.user_models[i].values_mut();
                if compromised.contains(&i) {
                    target[base.clone()].copy_from_slice(&merged.values()[base.clone()]);
                } else {
                    target.copy_from_slice(merged.values());
                }
            }
            state.station_models[j] = Some(merged);
        }
    }
    evaluate(&spec, &state.user_models, assoc, datasets, previous)
}
