//! Large-margin cosine classifier over place labels.

use std::collections::{BTreeMap, HashMap};

use crate::clusterer::{CellClusters, ClusterState, PlaceLabel};
use crate::diffcore::ops::Primitive;
use crate::diffcore::{AdamConfig, Gradients, Tensor2};
use crate::error::{Error, Result};
use crate::geogrid::CellId;

pub const DEFAULT_GAMMA: f64 = 30.0;
pub const DEFAULT_MARGIN: f64 = 0.4;

/// Allowed deviation from unit norm for features and weight rows.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// One unit row per active label, kept sorted by label, with Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    labels: Vec<PlaceLabel>,
    index: HashMap<PlaceLabel, usize>,
    rows: Tensor2,
    m: Tensor2,
    v: Tensor2,
    /// Adam step per row; reset when a row is re-initialized.
    row_steps: Vec<u64>,
    pub gamma: f64,
    pub margin: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        e
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

impl ClassifierWeights {
    /// Builds a classifier from `(label, row)` pairs; rows are normalized.
    pub fn from_rows(entries: Vec<(PlaceLabel, Vec<f64>)>, gamma: f64, margin: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Parameter("classifier needs at least one class".into()));
        }
        let d = entries[0].1.len();
        if d == 0 || entries.iter().any(|(_, r)| r.len() != d) {
            return Err(Error::shape("lmcl", "classifier rows of differing width"));
        }
        let sorted: BTreeMap<PlaceLabel, Vec<f64>> = entries.into_iter().collect();
        let labels: Vec<PlaceLabel> = sorted.keys().copied().collect();
        let data: Vec<f64> = sorted.values().flat_map(|r| unit(r)).collect();
        let c = labels.len();
        Ok(Self {
            index: labels.iter().enumerate().map(|(i, l)| (*l, i)).collect(),
            labels,
            rows: Tensor2::from_vec(c, d, data)?,
            m: Tensor2::zeros(c, d),
            v: Tensor2::zeros(c, d),
            row_steps: vec![0; c],
            gamma,
            margin,
        })
    }

    /// Rows initialized to the normalized cluster centroids.
    pub fn from_clusters(state: &ClusterState, gamma: f64, margin: f64) -> Result<Self> {
        Self::from_rows(centroid_rows(state.cells.iter()), gamma, margin)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn labels(&self) -> &[PlaceLabel] {
        &self.labels
    }

    pub fn rows(&self) -> &Tensor2 {
        &self.rows
    }

    pub fn row_index(&self, label: &PlaceLabel) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Adam moments and per-row step counters, for checkpointing.
    pub fn optimizer_state(&self) -> (&Tensor2, &Tensor2, &[u64]) {
        (&self.m, &self.v, &self.row_steps)
    }

    /// Restores a classifier exactly as saved.
    pub fn from_parts(
        labels: Vec<PlaceLabel>,
        rows: Tensor2,
        m: Tensor2,
        v: Tensor2,
        row_steps: Vec<u64>,
        gamma: f64,
        margin: f64,
    ) -> Result<Self> {
        let c = labels.len();
        if rows.rows() != c || !rows.same_shape(&m) || !rows.same_shape(&v) || row_steps.len() != c {
            return Err(Error::shape("lmcl", "classifier parts disagree on class count"));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("classifier labels must be strictly sorted".into()));
        }
        Ok(Self {
            index: labels.iter().enumerate().map(|(i, l)| (*l, i)).collect(),
            labels,
            rows,
            m,
            v,
            row_steps,
            gamma,
            margin,
        })
    }

    pub fn loss(&self, features: &Tensor2, targets: &[usize]) -> Result<f64> {
        lmcl_loss(features, targets, self)
    }

    /// One Adam step on the rows, then renormalization of every row.
    pub fn adam_step(&mut self, grad: &Tensor2, lr: f64, cfg: AdamConfig) -> Result<()> {
        if !grad.same_shape(&self.rows) {
            return Err(Error::shape(
                "lmcl",
                format!("gradient {:?} vs rows {:?}", grad.shape(), self.rows.shape()),
            ));
        }
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {lr}")));
        }
        let d = self.dim();
        for r in 0..self.len() {
            self.row_steps[r] += 1;
            let t = self.row_steps[r] as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let g = grad.row(r);
            let (m, v) = (self.m.row_mut(r), &mut self.v);
            for j in 0..d {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            }
            let m_row = m.to_vec();
            let v_row = v.row_mut(r);
            let w_row = self.rows.row_mut(r);
            for j in 0..d {
                v_row[j] = cfg.beta2 * v_row[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                w_row[j] -= lr * (m_row[j] / c1) / ((v_row[j] / c2).sqrt() + cfg.eps);
            }
            let normalized = unit(w_row);
            w_row.copy_from_slice(&normalized);
        }
        Ok(())
    }
}

fn centroid_rows<'a>(
    cells: impl Iterator<Item = (&'a CellId, &'a CellClusters)>,
) -> Vec<(PlaceLabel, Vec<f64>)> {
    cells
        .flat_map(|(cell, cc)| {
            cc.centroids
                .iter()
                .enumerate()
                .map(move |(h, c)| (PlaceLabel { cell: *cell, h }, c.clone()))
        })
        .collect()
}

fn check_unit_rows(what: &str, t: &Tensor2) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Contract(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

fn check_inputs(features: &Tensor2, targets: &[usize], rows: &Tensor2) -> Result<()> {
    if features.rows() != targets.len() || features.rows() == 0 {
        return Err(Error::shape(
            "lmcl",
            format!("{} feature rows for {} targets", features.rows(), targets.len()),
        ));
    }
    if features.cols() != rows.cols() {
        return Err(Error::shape(
            "lmcl",
            format!("feature width {} vs class width {}", features.cols(), rows.cols()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= rows.rows()) {
        return Err(Error::OutOfRange {
            index: bad,
            len: rows.rows(),
        });
    }
    check_unit_rows("feature", features)?;
    check_unit_rows("class weight", rows)
}

/// Loss and gradient of the logits, per batch row, from raw cosines.
fn margin_softmax(cos: &Tensor2, targets: &[usize], gamma: f64, margin: f64) -> (f64, Tensor2) {
    let (b, c) = cos.shape();
    let mut dlogits = Tensor2::zeros(b, c);
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let logits: Vec<f64> = (0..c)
            .map(|j| gamma * (cos.get(i, j) - if j == y { margin } else { 0.0 }))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        // -log softmax_y, written as log(1 + Σ_{j≠y} e^{z_j - z_y}) for accuracy
        // when the target dominates.
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != y)
            .map(|(_, z)| (z - logits[y]).exp())
            .sum();
        total += if rest.is_finite() { rest.ln_1p() } else { lse - logits[y] };
        for (j, z) in logits.iter().enumerate() {
            let p = (z - lse).exp();
            dlogits.set(i, j, (p - if j == y { 1.0 } else { 0.0 }) / b as f64);
        }
    }
    (total / b as f64, dlogits)
}

/// Mean large-margin cosine loss of unit `features` (B×d) against `targets`.
pub fn lmcl_loss(features: &Tensor2, targets: &[usize], weights: &ClassifierWeights) -> Result<f64> {
    check_inputs(features, targets, &weights.rows)?;
    let cos = features.matmul_t(&weights.rows);
    Ok(margin_softmax(&cos, targets, weights.gamma, weights.margin).0)
}

/// Loss plus gradients with respect to the features and the weight rows.
pub fn lmcl_backward(
    features: &Tensor2,
    targets: &[usize],
    weights: &ClassifierWeights,
) -> Result<(f64, Tensor2, Tensor2)> {
    check_inputs(features, targets, &weights.rows)?;
    raw_backward(features, targets, &weights.rows, weights.gamma, weights.margin)
}

fn raw_backward(
    features: &Tensor2,
    targets: &[usize],
    rows: &Tensor2,
    gamma: f64,
    margin: f64,
) -> Result<(f64, Tensor2, Tensor2)> {
    let cos = features.matmul_t(rows);
    let (loss, dlogits) = margin_softmax(&cos, targets, gamma, margin);
    let dcos = dlogits.scale(gamma);
    Ok((loss, dcos.matmul(rows), dcos.t_matmul(features)))
}

/// Re-initializes the rows of re-clustered cells to their normalized
/// centroids and resets those rows' optimizer state. Other rows are kept.
pub fn remap_after_recluster(
    weights: &ClassifierWeights,
    reclustered: &BTreeMap<CellId, CellClusters>,
) -> Result<ClassifierWeights> {
    if reclustered.is_empty() {
        return Ok(weights.clone());
    }
    let d = weights.dim();
    let mut kept: BTreeMap<PlaceLabel, (Vec<f64>, Vec<f64>, Vec<f64>, u64)> = BTreeMap::new();
    for (i, label) in weights.labels.iter().enumerate() {
        if !reclustered.contains_key(&label.cell) {
            kept.insert(
                *label,
                (
                    weights.rows.row(i).to_vec(),
                    weights.m.row(i).to_vec(),
                    weights.v.row(i).to_vec(),
                    weights.row_steps[i],
                ),
            );
        }
    }
    for (label, centroid) in centroid_rows(reclustered.iter()) {
        if centroid.len() != d {
            return Err(Error::shape("lmcl", format!("centroid width {} vs {d}", centroid.len())));
        }
        kept.insert(label, (unit(&centroid), vec![0.0; d], vec![0.0; d], 0));
    }
    let c = kept.len();
    let mut rows = Vec::with_capacity(c * d);
    let mut m = Vec::with_capacity(c * d);
    let mut v = Vec::with_capacity(c * d);
    let mut steps = Vec::with_capacity(c);
    for (r, mm, vv, s) in kept.values() {
        rows.extend_from_slice(r);
        m.extend_from_slice(mm);
        v.extend_from_slice(vv);
        steps.push(*s);
    }
    ClassifierWeights::from_parts(
        kept.keys().copied().collect(),
        Tensor2::from_vec(c, d, rows)?,
        Tensor2::from_vec(c, d, m)?,
        Tensor2::from_vec(c, d, v)?,
        steps,
        weights.gamma,
        weights.margin,
    )
}

/// The loss as a differentiable primitive: input features (B×d), one
/// parameter holding the class rows, output a 1×1 loss.
#[derive(Debug, Clone)]
pub struct LmclPrimitive {
    pub targets: Vec<usize>,
    pub gamma: f64,
    pub margin: f64,
}

impl Primitive for LmclPrimitive {
    fn name(&self) -> &'static str {
        "lmcl"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        let rows = params.first().ok_or_else(|| Error::shape("lmcl", "missing class rows"))?;
        check_inputs(input, &self.targets, rows)?;
        let cos = input.matmul_t(rows);
        Ok(Tensor2::scalar(margin_softmax(&cos, &self.targets, self.gamma, self.margin).0))
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        let rows = params.first().ok_or_else(|| Error::shape("lmcl", "missing class rows"))?;
        check_inputs(input, &self.targets, rows)?;
        let (_, df, dw) = raw_backward(input, &self.targets, rows, self.gamma, self.margin)?;
        let g = upstream.get(0, 0);
        Ok(Gradients {
            input: df.scale(g),
            params: vec![dw.scale(g)],
        })
    }
}
