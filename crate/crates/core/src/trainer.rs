//! Mutual learning: supervised feature learning on the current place labels
//! (stage 1) alternating with re-clustering of a slice of the grid with the
//! improved descriptors (stage 2).

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clusterer::{
    assign_place_labels, heading_bin_labels, purity, reassignment_diff, CellClusters, ClusterState,
    KMeansConfig, PlaceLabel, ReassignmentReport,
};
use crate::diffcore::{AdamConfig, Tensor2};
use crate::encoder::{encode_batch, Descriptor, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::geogrid::{grid_cell, CellId};
use crate::lmcl::{lmcl_backward, remap_after_recluster, ClassifierWeights};
use crate::synthworld::{derive_seed, GeoImage, ImageId};

/// Where place labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Per-cell K-means on learned descriptors, refreshed in stage 2.
    Adaptive,
    /// Fixed orientation bins (`K` bins of `360/K` degrees); never re-clustered.
    HeadingBins,
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Adaptive => "adaptive",
            LabelMode::HeadingBins => "heading",
        })
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(LabelMode::Adaptive),
            "heading" => Ok(LabelMode::HeadingBins),
            other => Err(Error::Parameter(format!("unknown label mode {other:?} (adaptive|heading)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub cell_size: f64,
    pub k: usize,
    pub group_count: usize,
    pub recluster_fraction: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub gamma: f64,
    pub margin: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub label_mode: LabelMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cell_size: 10.0,
            k: 3,
            group_count: 8,
            recluster_fraction: 0.2,
            epochs: 10,
            iterations_per_epoch: 200,
            batch_size: 32,
            lr_encoder: 1e-5,
            lr_classifier: 1e-2,
            gamma: 30.0,
            margin: 0.4,
            seed: 0,
            encoder: EncoderConfig::default(),
            kmeans_restarts: 5,
            kmeans_max_iter: 50,
            label_mode: LabelMode::Adaptive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.recluster_fraction >= 0.0 && self.recluster_fraction <= 1.0) {
            return bad(format!("recluster_fraction must lie in [0, 1], got {}", self.recluster_fraction));
        }
        if self.group_count == 0 || self.k == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("group_count, k, batch_size and epochs must be >= 1".into());
        }
        if !(self.lr_encoder > 0.0 && self.lr_classifier > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(self.cell_size > 0.0) || !self.gamma.is_finite() || !self.margin.is_finite() {
            return bad("cell_size must be > 0 and gamma, margin finite".into());
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be >= 1".into());
        }
        self.encoder.validate()
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.iterations_per_epoch) as u64
    }

    fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            restarts: self.kmeans_restarts,
            max_iter: self.kmeans_max_iter,
        }
    }
}

/// `lr_max · (1 + cos(π · step / total)) / 2`, clamped at the final value.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_max * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub purity: Option<f64>,
    pub reassignment: f64,
    /// Encoder learning rate at the last step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderParams,
    pub classifier: ClassifierWeights,
    pub clusters: ClusterState,
    /// Cells of each UTM group, fixed at initialization.
    pub groups: Vec<Vec<CellId>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn labels(&self) -> BTreeMap<ImageId, PlaceLabel> {
        self.clusters.labels()
    }
}

/// Training images with lookup tables.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<GeoImage>,
    index: HashMap<ImageId, usize>,
    cells: BTreeMap<CellId, Vec<usize>>,
}

impl Dataset {
    pub fn new(images: Vec<GeoImage>, cell_size: f64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let mut index = HashMap::with_capacity(images.len());
        let mut cells: BTreeMap<CellId, Vec<usize>> = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.id, i).is_some() {
                return Err(Error::Dataset(format!("duplicate image id {}", img.id)));
            }
            cells.entry(grid_cell(img.position, cell_size)?).or_default().push(i);
        }
        Ok(Self { images, index, cells })
    }

    pub fn get(&self, id: ImageId) -> Option<&GeoImage> {
        self.index.get(&id).map(|&i| &self.images[i])
    }

    pub fn cells(&self) -> &BTreeMap<CellId, Vec<usize>> {
        &self.cells
    }

    /// Ground-truth groups, if every image carries one.
    pub fn truth(&self) -> Option<BTreeMap<ImageId, usize>> {
        self.images.iter().map(|i| i.true_group.map(|g| (i.id, g))).collect()
    }
}

fn encode_cells(
    data: &Dataset,
    encoder: &EncoderParams,
    cells: &[CellId],
) -> Result<BTreeMap<CellId, Vec<(ImageId, Descriptor)>>> {
    let mut out = BTreeMap::new();
    for cell in cells {
        let members = &data.cells[cell];
        let descs = encode_batch(members.iter().map(|&i| &data.images[i].tokens), encoder)?;
        out.insert(*cell, members.iter().map(|&i| data.images[i].id).zip(descs).collect());
    }
    Ok(out)
}

/// Builds a cluster state from fixed labels, with centroids at the mean
/// descriptor of each label.
fn state_from_labels(
    encoded: &BTreeMap<CellId, Vec<(ImageId, Descriptor)>>,
    labels: &BTreeMap<ImageId, PlaceLabel>,
) -> ClusterState {
    let mut state = ClusterState::default();
    for (cell, members) in encoded {
        let used: std::collections::BTreeSet<usize> = members.iter().map(|(id, _)| labels[id].h).collect();
        let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(new, old)| (*old, new)).collect();
        let d = members[0].1.len();
        let mut sums = vec![vec![0.0; d]; used.len()];
        let mut counts = vec![0usize; used.len()];
        let assignments: Vec<usize> = members.iter().map(|(id, _)| remap[&labels[id].h]).collect();
        for ((_, desc), &a) in members.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(desc).for_each(|(s, v)| *s += v);
        }
        for (s, c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= *c as f64);
        }
        let objective = members
            .iter()
            .zip(&assignments)
            .map(|((_, desc), &a)| crate::diffcore::tensor::sq_dist(desc, &sums[a]))
            .sum();
        state.cells.insert(
            *cell,
            CellClusters {
                ids: members.iter().map(|(id, _)| *id).collect(),
                assignments,
                centroids: sums,
                objective,
            },
        );
    }
    state
}

fn partition_cells(cells: Vec<CellId>, group_count: usize, seed: u64) -> Vec<Vec<CellId>> {
    let mut cells = cells;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6072]));
    cells.shuffle(&mut rng);
    let g = group_count.min(cells.len()).max(1);
    let mut groups = vec![Vec::new(); g];
    for (i, c) in cells.into_iter().enumerate() {
        groups[i % g].push(c);
    }
    groups.iter_mut().for_each(|grp| grp.sort());
    groups
}

/// Encodes every image with a freshly initialized encoder, clusters every
/// cell and points the classifier rows at the cluster centroids.
pub fn initialize(data: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if data.cells.is_empty() {
        return Err(Error::Dataset("no populated grid cells".into()));
    }
    let encoder = EncoderParams::init(cfg.encoder.clone(), derive_seed(cfg.seed, &[0xe4c]))?;
    let cells: Vec<CellId> = data.cells.keys().copied().collect();
    let encoded = encode_cells(data, &encoder, &cells)?;
    let clusters = match cfg.label_mode {
        LabelMode::Adaptive => assign_place_labels(&encoded, cfg.kmeans(), derive_seed(cfg.seed, &[0, 0xc1]))?.state,
        LabelMode::HeadingBins => {
            let labels = heading_bin_labels(&data.images, cfg.k, cfg.cell_size)?;
            state_from_labels(&encoded, &labels)
        }
    };
    let classifier = ClassifierWeights::from_clusters(&clusters, cfg.gamma, cfg.margin)?;
    Ok(TrainState {
        encoder,
        classifier,
        clusters,
        groups: partition_cells(cells, cfg.group_count, cfg.seed),
        epoch: 0,
        step: 0,
        history: Vec::new(),
    })
}

/// Class-balanced batches: every batch holds distinct classes, one image each.
/// Returns the batches and a warning when the batch had to shrink.
pub fn make_batches(
    classes: &BTreeMap<PlaceLabel, Vec<ImageId>>,
    batch_size: usize,
    count: usize,
    seed: u64,
) -> (Vec<Vec<(ImageId, PlaceLabel)>>, Option<String>) {
    let labels: Vec<&PlaceLabel> = classes.keys().filter(|l| !classes[l].is_empty()).collect();
    let size = batch_size.min(labels.len());
    let warning = (size < batch_size).then(|| {
        format!("batch size {batch_size} exceeds {} active classes; using {size}", labels.len())
    });
    if size == 0 {
        return (Vec::new(), warning);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = (0..count)
        .map(|_| {
            rand::seq::index::sample(&mut rng, labels.len(), size)
                .into_iter()
                .map(|i| {
                    let label = *labels[i];
                    let members = &classes[&label];
                    (members[rng.random_range(0..members.len())], label)
                })
                .collect()
        })
        .collect();
    (batches, warning)
}

/// What one epoch did, beyond the metrics record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub metrics: EpochMetrics,
    pub group: usize,
    pub reclustered: Vec<CellId>,
    pub reassignment: Option<ReassignmentReport>,
    pub warnings: Vec<String>,
}

const PURPOSE_BATCHES: u64 = 1;
const PURPOSE_RECLUSTER: u64 = 2;
const PURPOSE_KMEANS: u64 = 3;

/// Runs stage 1 then stage 2 for the next epoch.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<EpochReport> {
    cfg.validate()?;
    let epoch = state.epoch;
    let group_index = epoch % state.groups.len();
    let group = state.groups[group_index].clone();
    let mut warnings = Vec::new();

    // Stage 1.
    let mut classes: BTreeMap<PlaceLabel, Vec<ImageId>> = BTreeMap::new();
    for cell in &group {
        let cc = &state.clusters.cells[cell];
        for (id, &h) in cc.ids.iter().zip(&cc.assignments) {
            classes.entry(PlaceLabel { cell: *cell, h }).or_default().push(*id);
        }
    }
    let (batches, warn) = make_batches(
        &classes,
        cfg.batch_size,
        cfg.iterations_per_epoch,
        derive_seed(cfg.seed, &[epoch as u64, PURPOSE_BATCHES]),
    );
    if let Some(w) = warn {
        log::warn!("epoch {epoch}: {w}");
        warnings.push(w);
    }
    let adam = AdamConfig::default();
    let total = cfg.total_steps();
    let mut loss_sum = 0.0;
    let mut lr = cosine_lr(state.step, total, cfg.lr_encoder);
    for batch in &batches {
        let mut traces = Vec::with_capacity(batch.len());
        let mut features = Tensor2::zeros(batch.len(), cfg.encoder.desc_dim);
        let mut targets = Vec::with_capacity(batch.len());
        for (row, (id, label)) in batch.iter().enumerate() {
            let img = data
                .get(*id)
                .ok_or_else(|| Error::Dataset(format!("label refers to unknown image {id}")))?;
            let trace = state.encoder.forward_trace(&img.tokens)?;
            features.row_mut(row).copy_from_slice(trace.descriptor.data());
            traces.push(trace);
            targets.push(state.classifier.row_index(label).ok_or_else(|| {
                Error::Contract(format!("label {label} has no classifier row"))
            })?);
        }
        let (loss, dfeat, dw) = lmcl_backward(&features, &targets, &state.classifier)?;
        if !loss.is_finite() || !dfeat.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at epoch {epoch}, step {}",
                state.step
            )));
        }
        loss_sum += loss;
        for (row, trace) in traces.iter().enumerate() {
            let grads = state.encoder.backward(trace, &Tensor2::row_vector(dfeat.row(row).to_vec()));
            for (slot, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    state.encoder.store.accumulate(slot, g)?;
                }
            }
        }
        lr = cosine_lr(state.step, total, cfg.lr_encoder);
        if lr > 0.0 {
            state.encoder.store.adam_step(lr, adam)?;
        } else {
            state.encoder.store.zero_grad();
        }
        state.encoder.clamp_gem_p();
        state.classifier.adam_step(&dw, cfg.lr_classifier, adam)?;
        state.step += 1;
    }
    let mean_loss = if batches.is_empty() { f64::NAN } else { loss_sum / batches.len() as f64 };

    // Stage 2.
    let mut reclustered = Vec::new();
    let mut reassignment = None;
    let mut fraction = 0.0;
    if cfg.label_mode == LabelMode::Adaptive && cfg.recluster_fraction > 0.0 && !group.is_empty() {
        let n = ((cfg.recluster_fraction * group.len() as f64).ceil() as usize).min(group.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, PURPOSE_RECLUSTER]));
        reclustered = rand::seq::index::sample(&mut rng, group.len(), n)
            .into_iter()
            .map(|i| group[i])
            .collect();
        reclustered.sort();
        let encoded = encode_cells(data, &state.encoder, &reclustered)?;
        let fresh = assign_place_labels(
            &encoded,
            cfg.kmeans(),
            derive_seed(cfg.seed, &[epoch as u64 + 1, PURPOSE_KMEANS]),
        )?;
        warnings.extend(fresh.warnings);
        let before = ClusterState {
            epoch,
            cells: reclustered.iter().map(|c| (*c, state.clusters.cells[c].clone())).collect(),
        };
        let report = reassignment_diff(&before, &fresh.state)?;
        fraction = report.fraction();
        reassignment = Some(report);
        state.classifier = remap_after_recluster(&state.classifier, &fresh.state.cells)?;
        for (cell, cc) in fresh.state.cells {
            state.clusters.cells.insert(cell, cc);
        }
    }
    state.epoch += 1;
    state.clusters.epoch = state.epoch;

    let purity = match data.truth() {
        Some(truth) => Some(purity(&state.labels(), &truth)?),
        None => None,
    };
    let metrics = EpochMetrics {
        epoch: state.epoch,
        mean_loss,
        purity,
        reassignment: fraction,
        lr,
    };
    state.history.push(metrics.clone());
    log::info!(
        "epoch {} group {group_index}: loss {mean_loss:.4}, reassigned {fraction:.3}, lr {lr:.3e}",
        state.epoch
    );
    Ok(EpochReport {
        metrics,
        group: group_index,
        reclustered,
        reassignment,
        warnings,
    })
}

/// Trains until `cfg.epochs` epochs are complete.
pub fn train(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::new();
    while state.epoch < cfg.epochs {
        reports.push(train_epoch(state, data, cfg)?);
    }
    Ok(reports)
}

/// Unit descriptors of `images` under the current encoder.
pub fn embed(encoder: &EncoderParams, images: &[GeoImage]) -> Result<Vec<Descriptor>> {
    encode_batch(images.iter().map(|i| &i.tokens), encoder)
}
