//! Independent oracles and random instances shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mvpr_core::diffcore::ops::{GemPool, L2Normalize, LayerNorm, Linear, Mlp2Layer, ScaleBy, SingleHeadAttention};
use mvpr_core::diffcore::{Primitive, Tensor2};
use mvpr_core::geogrid::UtmPoint;
use mvpr_core::retrieval::{DbRecord, DescriptorDB, Query};
use mvpr_core::synthworld::ImageId;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Best partition cost over every assignment of `n` points to at most `k`
/// labels, computed without any code from the library.
pub fn exhaustive_best(points: &[Vec<f64>], k: usize) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut best = (f64::INFINITY, Vec::new());
    let mut labels = vec![0usize; n];
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut cost = 0.0;
        for g in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let d = members[0].len();
            let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            cost += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
        }
        if cost < best.0 - 1e-12 {
            best = (cost, labels.clone());
        }
    }
    best
}

/// Canonical form of a partition: labels renumbered by first appearance.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, usize) {
    let n = rng.random_range(1..=8);
    let k = rng.random_range(1..=3);
    let pts = (0..n).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    (pts, k)
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_db(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DescriptorDB {
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    ids.shuffle(rng);
    let records = ids[..n]
        .iter()
        .map(|&id| DbRecord {
            id: ImageId(id),
            position: UtmPoint::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)),
            descriptor: unit(rng, d),
        })
        .collect();
    DescriptorDB::new(d, records).unwrap()
}

/// Full sort of every record by (distance, id).
pub fn oracle_knn(db: &DescriptorDB, q: &[f64], k: usize) -> Vec<ImageId> {
    let mut all: Vec<(f64, ImageId)> = db
        .records()
        .iter()
        .map(|r| {
            let d: f64 = r.descriptor.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            (d, r.id)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|x| x.1).collect()
}

/// Double loop over queries and ranks.
pub fn oracle_recall(db: &DescriptorDB, queries: &[Query], ks: &[usize], radius: f64) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            let mut hits = 0;
            for q in queries {
                let top = oracle_knn(db, &q.descriptor, k);
                let mut found = false;
                for id in &top {
                    let r = db.records().iter().find(|r| r.id == *id).unwrap();
                    let dx = r.position.east - q.position.east;
                    let dy = r.position.north - q.position.north;
                    if (dx * dx + dy * dy).sqrt() <= radius {
                        found = true;
                    }
                }
                if found {
                    hits += 1;
                }
            }
            hits as f64 / queries.len() as f64
        })
        .collect()
}

pub fn random_queries(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Query> {
    (0..n)
        .map(|i| Query {
            id: ImageId(1_000_000 + i as u64),
            descriptor: unit(rng, d),
            position: UtmPoint::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)),
            occluded: i % 2 == 0,
        })
        .collect()
}

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Tensor2 {
    Tensor2::randn(r, c, std, rng)
}

/// A primitive with random parameters and input for one seed.
pub fn case(name: &str, seed: u64) -> (Box<dyn Primitive>, Vec<Tensor2>, Tensor2) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=5);
    let d = rng.random_range(2..=6);
    match name {
        "linear" => {
            let o = rng.random_range(1..=5);
            let ps = vec![randn(&mut rng, d, o, 0.5), randn(&mut rng, 1, o, 0.5)];
            (Box::new(Linear), ps, randn(&mut rng, t, d, 1.0))
        }
        "layer_norm" => {
            let ps = vec![randn(&mut rng, 1, d, 1.0).map(|g| 1.0 + 0.3 * g), randn(&mut rng, 1, d, 0.3)];
            (Box::new(LayerNorm::default()), ps, randn(&mut rng, t, d, 1.0))
        }
        "attention" => {
            let ps = (0..4).map(|_| randn(&mut rng, d, d, 0.5)).collect();
            (Box::new(SingleHeadAttention), ps, randn(&mut rng, t, d, 1.0))
        }
        "mlp" => {
            let hdim = rng.random_range(2..=8);
            let ps = vec![
                randn(&mut rng, d, hdim, 0.5),
                randn(&mut rng, 1, hdim, 0.3),
                randn(&mut rng, hdim, d, 0.5),
                randn(&mut rng, 1, d, 0.3),
            ];
            (Box::new(Mlp2Layer), ps, randn(&mut rng, t, d, 1.0))
        }
        "l2_normalize" => (Box::new(L2Normalize), Vec::new(), randn(&mut rng, t, d, 1.0)),
        "gem" => {
            let p = Tensor2::scalar(rng.random_range(1.5..5.0));
            // keep every token well above the clamp so the kink is never crossed
            let x = randn(&mut rng, t, d, 1.0).map(|v| 0.2 + v.abs());
            (Box::new(GemPool::default()), vec![p], x)
        }
        "scale_by" => (Box::new(ScaleBy), vec![Tensor2::scalar(rng.random_range(-2.0..2.0))], randn(&mut rng, t, d, 1.0)),
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: [&str; 7] = ["linear", "layer_norm", "attention", "mlp", "l2_normalize", "gem", "scale_by"];

