//! Per-cell adaptive K-means pseudo-labels, the heading-bin baseline
//! labeler, and cluster quality / reassignment metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::tensor::sq_dist;
use crate::encoder::Descriptor;
use crate::error::{Error, Result};
use crate::geogrid::{grid_cell, CellId};
use crate::synthworld::{derive_seed, GeoImage, ImageId};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_RESTARTS: usize = 5;
pub const DEFAULT_MAX_ITER: usize = 50;

/// Training class identity: grid cell plus within-cell cluster index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlaceLabel {
    pub cell: CellId,
    pub h: usize,
}

impl std::fmt::Display for PlaceLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.cell, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every iteration of every restart, indexed by restart.
    pub history: Vec<Vec<f64>>,
}

impl KMeansResult {
    pub fn k_eff(&self) -> usize {
        self.centroids.len()
    }
}

/// Sum of squared distances of points to their assigned centroids.
pub fn objective(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<BTreeSet<_>>()
        .len()
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Greedy k-means++: each new seed is the best of `2 + ln k` candidates
/// drawn with probability proportional to squared distance.
fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let mut target = rng.random_range(0.0..total);
                let mut chosen = None;
                for (i, &w) in d2.iter().enumerate() {
                    if w > 0.0 {
                        chosen = Some(i);
                        if target < w {
                            break;
                        }
                        target -= w;
                    }
                }
                chosen.expect("positive total has a positive weight")
            } else {
                rng.random_range(0..n)
            };
            let next: Vec<f64> = d2
                .iter()
                .zip(points)
                .map(|(d, p)| d.min(sq_dist(p, &points[pick])))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, next));
            }
        }
        let (_, pick, next) = best.expect("at least one trial");
        centroids.push(points[pick].clone());
        d2 = next;
    }
    centroids
}

/// Relative slack a move must beat. Guards the monotone objective against
/// rounding in the mean update.
const MOVE_SLACK: f64 = 1e-12;

/// Fills empty clusters with the point farthest from its own centroid.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], k: usize) -> Vec<Vec<f64>> {
    loop {
        let (centroids, counts) = means(points, assignments, k);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return centroids;
        };
        let far = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignments[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        if far == usize::MAX {
            return centroids;
        }
        assignments[far] = empty;
    }
}

/// One restart: Lloyd iterations followed by single-point Hartigan moves.
fn lloyd_run(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    centroids = repair_empty(points, &mut assignments, k);
    let mut history = vec![objective(points, &assignments, &centroids)];

    for _ in 0..max_iter {
        let mut changed = false;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let current = sq_dist(p, &centroids[*a]);
            let (best, dist) = nearest(p, &centroids);
            if best != *a && dist < current - MOVE_SLACK * (1.0 + current) {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        centroids = repair_empty(points, &mut assignments, k);
        history.push(objective(points, &assignments, &centroids));
    }

    // Hartigan refinement: move a point when the exact change in objective,
    // accounting for both mean shifts, is negative.
    let (mut centroids, mut counts) = means(points, &assignments, k);
    let mut improved = true;
    let mut sweeps = 0;
    while improved && sweeps < max_iter {
        improved = false;
        sweeps += 1;
        for i in 0..points.len() {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let removal = na / (na - 1.0) * sq_dist(&points[i], &centroids[a]);
            let mut best = (a, 0.0);
            for (b, c) in centroids.iter().enumerate() {
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(&points[i], c) - removal;
                if delta < best.1 - MOVE_SLACK * (1.0 + removal) {
                    best = (b, delta);
                }
            }
            if best.0 != a {
                assignments[i] = best.0;
                let fresh = means(points, &assignments, k);
                centroids = fresh.0;
                counts = fresh.1;
                history.push(objective(points, &assignments, &centroids));
                improved = true;
            }
        }
    }
    (assignments, centroids, history)
}

/// K-means with k-means++ seeding, best of `restarts` runs.
/// `K_eff = min(K, distinct points)`.
pub fn kmeans(points: &[Vec<f64>], cfg: KMeansConfig, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Parameter("kmeans needs at least one point".into()));
    }
    if cfg.k == 0 || cfg.restarts == 0 {
        return Err(Error::Parameter(format!("kmeans needs k, restarts >= 1: {cfg:?}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("kmeans", "points of differing dimension"));
    }
    let k = cfg.k.min(distinct_count(points));
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    let mut history = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
        let (a, c, h) = lloyd_run(points, k, cfg.max_iter, &mut rng);
        let obj = *h.last().expect("history is never empty");
        if best.as_ref().is_none_or(|b| obj < b.2) {
            best = Some((a, c, obj));
        }
        history.push(h);
    }
    let (assignments, centroids, objective) = best.expect("restarts >= 1");
    Ok(KMeansResult {
        assignments,
        centroids,
        objective,
        history,
    })
}

/// Clusters of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellClusters {
    pub ids: Vec<ImageId>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
}

impl CellClusters {
    pub fn k_eff(&self) -> usize {
        self.centroids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterState {
    pub epoch: usize,
    pub cells: BTreeMap<CellId, CellClusters>,
}

impl ClusterState {
    pub fn labels(&self) -> BTreeMap<ImageId, PlaceLabel> {
        let mut out = BTreeMap::new();
        for (cell, cc) in &self.cells {
            for (id, &h) in cc.ids.iter().zip(&cc.assignments) {
                out.insert(*id, PlaceLabel { cell: *cell, h });
            }
        }
        out
    }

    pub fn class_count(&self) -> usize {
        self.cells.values().map(CellClusters::k_eff).sum()
    }

    /// Checks nearest-centroid assignment and the stored objective against
    /// the given descriptors.
    pub fn verify(&self, descriptors: &HashMap<ImageId, Descriptor>) -> Result<()> {
        for (cell, cc) in &self.cells {
            let mut total = 0.0;
            for (id, &h) in cc.ids.iter().zip(&cc.assignments) {
                let p = descriptors
                    .get(id)
                    .ok_or_else(|| Error::Contract(format!("no descriptor for image {id}")))?;
                let own = sq_dist(p, &cc.centroids[h]);
                let (_, best) = nearest(p, &cc.centroids);
                if own > best + 1e-9 * (1.0 + best) {
                    return Err(Error::Contract(format!(
                        "image {id} in cell {cell} is closer to another centroid"
                    )));
                }
                total += own;
            }
            if (total - cc.objective).abs() > 1e-9 * total.max(1e-12) {
                return Err(Error::Contract(format!(
                    "cell {cell} objective {} differs from recomputed {total}",
                    cc.objective
                )));
            }
        }
        Ok(())
    }
}

/// Labels plus non-fatal notes produced while clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub state: ClusterState,
    pub labels: BTreeMap<ImageId, PlaceLabel>,
    pub warnings: Vec<String>,
}

/// Seed used to cluster one cell.
pub fn cell_seed(seed: u64, cell: CellId) -> u64 {
    derive_seed(seed, &[cell.e as u64, cell.n as u64])
}

/// Runs K-means independently in every cell.
pub fn assign_place_labels(
    cell_groups: &BTreeMap<CellId, Vec<(ImageId, Descriptor)>>,
    cfg: KMeansConfig,
    seed: u64,
) -> Result<Labeling> {
    let mut state = ClusterState::default();
    let mut warnings = Vec::new();
    for (cell, members) in cell_groups {
        if members.is_empty() {
            let msg = format!("cell {cell} has no images, skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let points: Vec<Vec<f64>> = members.iter().map(|(_, d)| d.clone()).collect();
        let result = kmeans(&points, cfg, cell_seed(seed, *cell))?;
        state.cells.insert(
            *cell,
            CellClusters {
                ids: members.iter().map(|(id, _)| *id).collect(),
                assignments: result.assignments,
                centroids: result.centroids,
                objective: result.objective,
            },
        );
    }
    let labels = state.labels();
    Ok(Labeling {
        state,
        labels,
        warnings,
    })
}

/// Orientation labels: `h = floor(heading / (360 / bins))`.
pub fn heading_bin_labels(
    images: &[GeoImage],
    bins: usize,
    cell_size: f64,
) -> Result<BTreeMap<ImageId, PlaceLabel>> {
    if bins == 0 {
        return Err(Error::Parameter("heading bins must be >= 1".into()));
    }
    let width = 360.0 / bins as f64;
    images
        .iter()
        .map(|img| {
            if !img.heading.is_finite() || !(0.0..360.0).contains(&img.heading) {
                return Err(Error::Dataset(format!(
                    "image {} has no usable heading ({})",
                    img.id, img.heading
                )));
            }
            let h = ((img.heading / width).floor() as usize).min(bins - 1);
            Ok((img.id, PlaceLabel { cell: grid_cell(img.position, cell_size)?, h }))
        })
        .collect()
}

/// Per-cell purity, weighted by cell size.
pub fn purity(labels: &BTreeMap<ImageId, PlaceLabel>, truth: &BTreeMap<ImageId, usize>) -> Result<f64> {
    if labels.len() != truth.len() || labels.keys().any(|k| !truth.contains_key(k)) {
        return Err(Error::Contract("purity needs identical label and truth key sets".into()));
    }
    if labels.is_empty() {
        return Err(Error::Contract("purity of an empty labeling".into()));
    }
    let mut counts: HashMap<(PlaceLabel, usize), usize> = HashMap::new();
    for (id, label) in labels {
        *counts.entry((*label, truth[id])).or_default() += 1;
    }
    let mut best: HashMap<PlaceLabel, usize> = HashMap::new();
    for ((label, _), c) in counts {
        let e = best.entry(label).or_default();
        *e = (*e).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / labels.len() as f64)
}

/// Result of comparing two cluster snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct ReassignmentReport {
    pub per_cell: BTreeMap<CellId, f64>,
    /// `(image, cell, previous h, next h)` for images whose matched cluster changed.
    pub moved: Vec<(ImageId, CellId, usize, usize)>,
    pub total: usize,
}

impl ReassignmentReport {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.moved.len() as f64 / self.total as f64
        }
    }
}

/// Maps previous cluster ids to next cluster ids maximizing total overlap.
/// Exhaustive for up to 8 clusters, greedy beyond.
pub fn match_clusters(overlap: &[Vec<usize>]) -> Vec<Option<usize>> {
    let kp = overlap.len();
    let kn = overlap.first().map_or(0, Vec::len);
    if kp <= 8 && kn <= 8 {
        fn search(
            i: usize,
            overlap: &[Vec<usize>],
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            score: usize,
            best: &mut (usize, Vec<Option<usize>>),
        ) {
            if i == overlap.len() {
                if score > best.0 || best.1.is_empty() {
                    *best = (score, cur.clone());
                }
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    cur.push(Some(j));
                    search(i + 1, overlap, used, cur, score + overlap[i][j], best);
                    cur.pop();
                    used[j] = false;
                }
            }
            let free = used.iter().filter(|u| !**u).count();
            if free < overlap.len() - i {
                cur.push(None);
                search(i + 1, overlap, used, cur, score, best);
                cur.pop();
            }
        }
        let mut best = (0, Vec::new());
        search(0, overlap, &mut vec![false; kn], &mut Vec::new(), 0, &mut best);
        return best.1;
    }
    let mut pairs: Vec<(usize, usize, usize)> = (0..kp)
        .flat_map(|i| (0..kn).map(move |j| (i, j)))
        .map(|(i, j)| (overlap[i][j], i, j))
        .collect();
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; kp];
    let mut used = vec![false; kn];
    for (_, i, j) in pairs {
        if out[i].is_none() && !used[j] {
            out[i] = Some(j);
            used[j] = true;
        }
    }
    out
}

/// Fraction of images per cell whose cluster changed after matching
/// cluster identities between the two snapshots.
pub fn reassignment_diff(prev: &ClusterState, next: &ClusterState) -> Result<ReassignmentReport> {
    if prev.cells.keys().ne(next.cells.keys()) {
        return Err(Error::Contract("snapshots cover different cells".into()));
    }
    let mut per_cell = BTreeMap::new();
    let mut moved = Vec::new();
    let mut total = 0;
    for (cell, p) in &prev.cells {
        let n = &next.cells[cell];
        let next_h: HashMap<ImageId, usize> = n.ids.iter().copied().zip(n.assignments.iter().copied()).collect();
        if p.ids.len() != n.ids.len() || p.ids.iter().any(|id| !next_h.contains_key(id)) {
            return Err(Error::Contract(format!("cell {cell} holds different images in the two snapshots")));
        }
        let mut overlap = vec![vec![0usize; n.k_eff()]; p.k_eff()];
        for (id, &h) in p.ids.iter().zip(&p.assignments) {
            overlap[h][next_h[id]] += 1;
        }
        let matching = match_clusters(&overlap);
        let mut count = 0;
        for (id, &h) in p.ids.iter().zip(&p.assignments) {
            let now = next_h[id];
            if matching[h] != Some(now) {
                count += 1;
                moved.push((*id, *cell, h, now));
            }
        }
        total += p.ids.len();
        per_cell.insert(*cell, count as f64 / p.ids.len() as f64);
    }
    Ok(ReassignmentReport { per_cell, moved, total })
}

/// Circular mean of headings in degrees, in `[0, 360)`.
pub fn circular_mean(headings: &[f64]) -> f64 {
    let (s, c) = headings.iter().fold((0.0, 0.0), |(s, c), h| {
        let r = h.to_radians();
        (s + r.sin(), c + r.cos())
    });
    s.atan2(c).to_degrees().rem_euclid(360.0)
}

/// Per cell, the cluster ids sorted by the circular mean heading of their
/// members. Analysis only.
pub fn heading_order(
    labels: &BTreeMap<ImageId, PlaceLabel>,
    headings: &HashMap<ImageId, f64>,
) -> BTreeMap<CellId, Vec<usize>> {
    let mut members: BTreeMap<CellId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (id, label) in labels {
        if let Some(&h) = headings.get(id) {
            members.entry(label.cell).or_default().entry(label.h).or_default().push(h);
        }
    }
    members
        .into_iter()
        .map(|(cell, clusters)| {
            let mut order: Vec<(f64, usize)> =
                clusters.iter().map(|(h, hs)| (circular_mean(hs), *h)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            (cell, order.into_iter().map(|(_, h)| h).collect())
        })
        .collect()
}
