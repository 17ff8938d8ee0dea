//! Exact nearest-neighbor search over unit descriptors, Recall@K, and the
//! adjacent-class descriptor distance analysis.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::clusterer::PlaceLabel;
use crate::diffcore::tensor::sq_dist;
use crate::encoder::Descriptor;
use crate::error::{Error, Result};
use crate::geogrid::{is_positive, CellId, UtmPoint};
use crate::synthworld::ImageId;

pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Upper edge of the close-pair histogram.
pub const CLOSE_PAIR_LIMIT: f64 = 0.8;
pub const CLOSE_PAIR_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DbRecord {
    pub id: ImageId,
    pub position: UtmPoint,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    dim: usize,
    records: Vec<DbRecord>,
}

fn check_unit(what: &str, v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

impl DescriptorDB {
    pub fn new(dim: usize, records: Vec<DbRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.descriptor.len() != dim {
                return Err(Error::shape(
                    "descriptor db",
                    format!("record {} has dimension {}, db uses {dim}", r.id, r.descriptor.len()),
                ));
            }
            check_unit(&format!("descriptor of {}", r.id), &r.descriptor)?;
            if !seen.insert(r.id) {
                return Err(Error::Dataset(format!("duplicate id {} in descriptor db", r.id)));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[DbRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Top `k` records by Euclidean distance, ties broken by ascending id.
pub fn knn(db: &DescriptorDB, query: &[f64], k: usize) -> Result<Vec<(ImageId, f64)>> {
    if db.is_empty() {
        return Err(Error::Dataset("knn on an empty descriptor db".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("knn needs k >= 1".into()));
    }
    if query.len() != db.dim {
        return Err(Error::shape("knn", format!("query dimension {} vs db {}", query.len(), db.dim)));
    }
    let mut scored: Vec<(f64, ImageId)> =
        db.records.iter().map(|r| (sq_dist(query, &r.descriptor), r.id)).collect();
    let cmp = |a: &(f64, ImageId), b: &(f64, ImageId)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(d, id)| (id, d.sqrt())).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: ImageId,
    pub descriptor: Descriptor,
    pub position: UtmPoint,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub id: ImageId,
    pub neighbors: Vec<(ImageId, f64)>,
    /// 0-based rank of the first positive among the neighbors.
    pub first_positive: Option<usize>,
    /// Whether any db record lies within the radius at all.
    pub has_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tag: String,
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub radius: f64,
    pub query_count: usize,
    pub without_positive: usize,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }

    /// Human-readable table followed by one `recall@k\t<value>` line per k.
    pub fn render(&self) -> String {
        let mut out = format!(
            "# {} evaluation: {} queries, radius {} m, {} without any positive\n",
            self.tag, self.query_count, self.radius, self.without_positive
        );
        out.push_str("# k\trecall\n");
        for (k, r) in self.ks.iter().zip(&self.recalls) {
            out.push_str(&format!("recall@{k}\t{r}\n"));
        }
        out
    }
}

fn validate_ks(ks: &[usize], radius: f64) -> Result<()> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!("ks must be ascending and >= 1, got {ks:?}")));
    }
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!("radius must be > 0, got {radius}")));
    }
    Ok(())
}

fn evaluate(db: &DescriptorDB, queries: &[&Query], ks: &[usize], radius: f64, tag: &str) -> Result<EvalReport> {
    validate_ks(ks, radius)?;
    let kmax = *ks.last().expect("validated non-empty");
    let positions: HashMap<ImageId, UtmPoint> = db.records.iter().map(|r| (r.id, r.position)).collect();
    let mut hits = vec![0usize; ks.len()];
    let mut per_query = Vec::with_capacity(queries.len());
    let mut without_positive = 0;
    for q in queries {
        let neighbors = knn(db, &q.descriptor, kmax)?;
        let mut first_positive = None;
        for (rank, (id, _)) in neighbors.iter().enumerate() {
            if is_positive(q.position, positions[id], radius)? {
                first_positive = Some(rank);
                break;
            }
        }
        let has_positive = first_positive.is_some()
            || db.records.iter().any(|r| is_positive(q.position, r.position, radius).unwrap_or(false));
        if !has_positive {
            without_positive += 1;
        }
        if let Some(rank) = first_positive {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *h += 1;
                }
            }
        }
        per_query.push(QueryResult {
            id: q.id,
            neighbors,
            first_positive,
            has_positive,
        });
    }
    let n = queries.len();
    Ok(EvalReport {
        tag: tag.to_string(),
        ks: ks.to_vec(),
        recalls: hits.iter().map(|&h| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect(),
        radius,
        query_count: n,
        without_positive,
        per_query,
    })
}

/// Fraction of queries with a positive (within `radius`) among their top k.
/// Queries with no positive anywhere count as misses.
pub fn recall_at_k(db: &DescriptorDB, queries: &[Query], ks: &[usize], radius: f64) -> Result<EvalReport> {
    evaluate(db, &queries.iter().collect::<Vec<_>>(), ks, radius, "standard")
}

/// Recall over the occluded queries only.
pub fn occlusion_eval(db: &DescriptorDB, queries: &[Query], ks: &[usize], radius: f64) -> Result<EvalReport> {
    let occluded: Vec<&Query> = queries.iter().filter(|q| q.occluded).collect();
    evaluate(db, &occluded, ks, radius, "occlusion")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDistance {
    pub cell: CellId,
    pub a: usize,
    pub b: usize,
    pub min: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterclassReport {
    pub pairs: Vec<PairDistance>,
    /// Counts of cross-class image pairs with distance below
    /// [`CLOSE_PAIR_LIMIT`], in equal-width bins starting at 0.
    pub close_histogram: Vec<usize>,
    pub skipped_cells: usize,
}

impl InterclassReport {
    /// Mean over cells of the per-cell mean adjacent-pair distance.
    pub fn mean_adjacent_distance(&self) -> Option<f64> {
        let mut per_cell: BTreeMap<CellId, (f64, usize)> = BTreeMap::new();
        for p in &self.pairs {
            let e = per_cell.entry(p.cell).or_default();
            e.0 += p.mean;
            e.1 += 1;
        }
        if per_cell.is_empty() {
            return None;
        }
        Some(per_cell.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_cell.len() as f64)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("cell\tclass_a\tclass_b\tmin\tmean\n");
        for p in &self.pairs {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", p.cell, p.a, p.b, p.min, p.mean));
        }
        let width = CLOSE_PAIR_LIMIT / CLOSE_PAIR_BINS as f64;
        out.push_str("# close pairs (distance < 0.8)\n");
        for (i, c) in self.close_histogram.iter().enumerate() {
            out.push_str(&format!("# [{:.1}, {:.1})\t{c}\n", i as f64 * width, (i + 1) as f64 * width));
        }
        match self.mean_adjacent_distance() {
            Some(m) => out.push_str(&format!("# mean adjacent distance\t{m}\n")),
            None => out.push_str("# mean adjacent distance\tnan\n"),
        }
        out.push_str(&format!("# skipped single-class cells\t{}\n", self.skipped_cells));
        out
    }
}

/// Adjacent class pairs of a cell under `order` (cyclic when there are at
/// least three classes, as headings wrap around).
fn adjacent_pairs(order: &[usize]) -> Vec<(usize, usize)> {
    match order.len() {
        0 | 1 => Vec::new(),
        2 => vec![(order[0], order[1])],
        n => (0..n).map(|i| (order[i], order[(i + 1) % n])).collect(),
    }
}

/// Min and mean descriptor distance between every pair of adjacent classes
/// in each cell. `order` gives the class order per cell (for example by mean
/// heading); cells missing from it use ascending class ids.
pub fn interclass_distance_report(
    db: &DescriptorDB,
    labels: &BTreeMap<ImageId, PlaceLabel>,
    order: &BTreeMap<CellId, Vec<usize>>,
) -> Result<InterclassReport> {
    let mut members: BTreeMap<CellId, BTreeMap<usize, Vec<&Descriptor>>> = BTreeMap::new();
    for r in &db.records {
        let label = labels
            .get(&r.id)
            .ok_or_else(|| Error::Contract(format!("db image {} has no label", r.id)))?;
        members.entry(label.cell).or_default().entry(label.h).or_default().push(&r.descriptor);
    }
    let width = CLOSE_PAIR_LIMIT / CLOSE_PAIR_BINS as f64;
    let mut close_histogram = vec![0usize; CLOSE_PAIR_BINS];
    let mut pairs = Vec::new();
    let mut skipped_cells = 0;
    for (cell, classes) in &members {
        if classes.len() < 2 {
            skipped_cells += 1;
            continue;
        }
        let default: Vec<usize> = classes.keys().copied().collect();
        let cell_order: Vec<usize> = order
            .get(cell)
            .map(|o| o.iter().copied().filter(|h| classes.contains_key(h)).collect())
            .unwrap_or(default);
        for (a, b) in adjacent_pairs(&cell_order) {
            let (mut min, mut sum, mut n) = (f64::INFINITY, 0.0, 0usize);
            for x in &classes[&a] {
                for y in &classes[&b] {
                    let d = sq_dist(x, y).sqrt();
                    min = min.min(d);
                    sum += d;
                    n += 1;
                    if d < CLOSE_PAIR_LIMIT {
                        close_histogram[((d / width) as usize).min(CLOSE_PAIR_BINS - 1)] += 1;
                    }
                }
            }
            pairs.push(PairDistance {
                cell: *cell,
                a,
                b,
                min,
                mean: sum / n as f64,
            });
        }
    }
    Ok(InterclassReport {
        pairs,
        close_histogram,
        skipped_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, e: f64, v: Vec<f64>) -> DbRecord {
        DbRecord {
            id: ImageId(id),
            position: UtmPoint::new(e, 0.0),
            descriptor: v,
        }
    }

    #[test]
    fn db_contracts() {
        assert!(DescriptorDB::new(2, vec![rec(1, 0.0, vec![1.0, 0.0]), rec(1, 0.0, vec![0.0, 1.0])]).is_err());
        assert!(DescriptorDB::new(2, vec![rec(1, 0.0, vec![2.0, 0.0])]).is_err());
        assert!(DescriptorDB::new(3, vec![rec(1, 0.0, vec![1.0, 0.0])]).is_err());
        let empty = DescriptorDB::new(2, vec![]).unwrap();
        assert!(knn(&empty, &[1.0, 0.0], 1).is_err());
    }

    #[test]
    fn exact_match_first_and_full_sort() {
        let s = 0.5f64.sqrt();
        let db = DescriptorDB::new(
            2,
            vec![rec(3, 0.0, vec![0.0, 1.0]), rec(1, 0.0, vec![s, s]), rec(2, 0.0, vec![1.0, 0.0])],
        )
        .unwrap();
        let r = knn(&db, &[1.0, 0.0], 10).unwrap();
        assert_eq!(r[0], (ImageId(2), 0.0));
        assert_eq!(r.iter().map(|x| x.0 .0).collect::<Vec<_>>(), vec![2, 1, 3]);
    }

    #[test]
    fn ks_are_validated() {
        let db = DescriptorDB::new(1, vec![rec(1, 0.0, vec![1.0])]).unwrap();
        let q = vec![Query { id: ImageId(9), descriptor: vec![1.0], position: UtmPoint::new(0.0, 0.0), occluded: false }];
        assert!(recall_at_k(&db, &q, &[5, 1], 25.0).is_err());
        assert!(recall_at_k(&db, &q, &[0], 25.0).is_err());
        assert!(recall_at_k(&db, &q, &[1], 0.0).is_err());
        let far = vec![Query { position: UtmPoint::new(100.0, 0.0), ..q[0].clone() }];
        let r = recall_at_k(&db, &far, &[1], 25.0).unwrap();
        assert_eq!(r.recalls, vec![0.0]);
        assert_eq!(r.without_positive, 1);
    }

    #[test]
    fn interclass_geometry() {
        let labels: BTreeMap<ImageId, PlaceLabel> = [(1, 0), (2, 1), (3, 0)]
            .iter()
            .map(|&(id, h)| (ImageId(id), PlaceLabel { cell: CellId::new(id as i64 / 3, 0), h }))
            .collect();
        let db = DescriptorDB::new(
            2,
            vec![rec(1, 0.0, vec![1.0, 0.0]), rec(2, 0.0, vec![0.0, 1.0]), rec(3, 0.0, vec![1.0, 0.0])],
        )
        .unwrap();
        let r = interclass_distance_report(&db, &labels, &BTreeMap::new()).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert!((r.pairs[0].min - 2.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.skipped_cells, 1);
        assert_eq!(r.close_histogram.iter().sum::<usize>(), 0);

        let same = DescriptorDB::new(2, vec![rec(1, 0.0, vec![1.0, 0.0]), rec(2, 0.0, vec![1.0, 0.0])]).unwrap();
        let r = interclass_distance_report(&same, &labels, &BTreeMap::new()).unwrap();
        assert_eq!(r.pairs[0].min, 0.0);
        assert_eq!(r.close_histogram[0], 1);
        assert!(interclass_distance_report(&same, &BTreeMap::new(), &BTreeMap::new()).is_err());
    }

    #[test]
    fn cyclic_adjacency() {
        assert_eq!(adjacent_pairs(&[2, 0, 1]), vec![(2, 0), (0, 1), (1, 2)]);
        assert_eq!(adjacent_pairs(&[1, 0]), vec![(1, 0)]);
        assert!(adjacent_pairs(&[0]).is_empty());
    }
}
