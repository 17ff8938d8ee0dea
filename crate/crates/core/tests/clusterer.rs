use std::collections::BTreeMap;

use mvpr_core::clusterer::{assign_place_labels, kmeans, purity, KMeansConfig, PlaceLabel};
use mvpr_core::geogrid::CellId;
use mvpr_core::synthworld::ImageId;
mod common;

use common::{canonical, exhaustive_best, random_instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_triples_match_the_exhaustive_optimum() {
    let pts = vec![
        vec![0.0, 0.0],
        vec![0.3, 0.1],
        vec![0.1, 0.4],
        vec![10.0, 10.0],
        vec![10.2, 9.8],
        vec![9.7, 10.1],
    ];
    let r = kmeans(&pts, KMeansConfig { k: 2, ..Default::default() }, 5).unwrap();
    let (cost, labels) = exhaustive_best(&pts, 2);
    assert_eq!(canonical(&r.assignments), canonical(&labels));
    assert!((r.objective - cost).abs() < 1e-12);
}

#[test]
fn random_small_instances_reach_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (pts, k) = random_instance(&mut rng);
        let r = kmeans(&pts, KMeansConfig { k, ..Default::default() }, case).unwrap();
        let (cost, labels) = exhaustive_best(&pts, k);
        assert_eq!(canonical(&r.assignments), canonical(&labels), "case {case}: {pts:?} k={k}");
        assert!((r.objective - cost).abs() <= 1e-12 * (1.0 + cost));
    }
}

#[test]
fn three_separated_groups_use_all_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let members: Vec<(ImageId, Vec<f64>)> = (0..12)
        .map(|i| {
            let v: Vec<f64> = axes[i % 3].iter().map(|a| a + rng.random_range(-0.05..0.05)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (ImageId(i as u64), v.into_iter().map(|x| x / n).collect())
        })
        .collect();
    let mut groups = BTreeMap::new();
    groups.insert(CellId::new(3, 4), members);
    let out = assign_place_labels(&groups, KMeansConfig::default(), 9).unwrap();
    let mut by_axis: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, label) in &out.labels {
        assert_eq!(label.cell, CellId::new(3, 4));
        by_axis.entry(id.0 as usize % 3).or_default().push(label.h);
    }
    let heads: Vec<usize> = by_axis.values().map(|hs| hs[0]).collect();
    for (axis, hs) in &by_axis {
        assert!(hs.iter().all(|h| *h == hs[0]), "axis {axis} split");
    }
    let mut sorted = heads.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2]);

    let single = assign_place_labels(&groups, KMeansConfig { k: 1, ..Default::default() }, 9).unwrap();
    assert!(single.labels.values().all(|l| l.h == 0));
}

/// Expected max of a multinomial(n, 1/3, 1/3, 1/3), by direct summation.
fn expected_max_multinomial3(n: usize) -> f64 {
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    let ln_third = (1.0f64 / 3.0).ln();
    let mut e = 0.0;
    for a in 0..=n {
        for b in 0..=n - a {
            let c = n - a - b;
            let lp = ln_fact[n] - ln_fact[a] - ln_fact[b] - ln_fact[c] + n as f64 * ln_third;
            e += lp.exp() * a.max(b).max(c) as f64;
        }
    }
    e
}

#[test]
fn random_labels_have_chance_purity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 3000;
    let cell = CellId::new(0, 0);
    let truth: BTreeMap<ImageId, usize> = (0..n).map(|i| (ImageId(i as u64), i % 3)).collect();
    let labels: BTreeMap<ImageId, PlaceLabel> =
        (0..n).map(|i| (ImageId(i as u64), PlaceLabel { cell, h: rng.random_range(0..3) })).collect();
    let mut sizes = [0usize; 3];
    labels.values().for_each(|l| sizes[l.h] += 1);
    let expected: f64 = sizes.iter().map(|&s| expected_max_multinomial3(s)).sum::<f64>() / n as f64;
    let p = purity(&labels, &truth).unwrap();
    assert!((p - expected).abs() < 0.02, "purity {p} vs expected {expected}");
    assert!(expected > 1.0 / 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_never_increases(seed in 0u64..10_000, n in 1usize..40, k in 1usize..6, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = kmeans(&pts, KMeansConfig { k, ..Default::default() }, seed).unwrap();
        for run in &r.history {
            for w in run.windows(2) {
                prop_assert!(w[1] <= w[0], "objective rose {} -> {}", w[0], w[1]);
            }
        }
        prop_assert!(r.k_eff() == k.min(n));
    }

    #[test]
    fn partition_ignores_point_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let pts: Vec<Vec<f64>> = (0..15)
            .map(|i| centers[i % 3].iter().map(|c| c + rng.random_range(-0.5..0.5)).collect())
            .collect();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].clone()).collect();
        let cfg = KMeansConfig::default();
        let a = kmeans(&pts, cfg, seed).unwrap();
        let b = kmeans(&shuffled, cfg, seed).unwrap();
        let mut back = vec![0; pts.len()];
        for (pos, &i) in order.iter().enumerate() {
            back[i] = b.assignments[pos];
        }
        prop_assert_eq!(canonical(&a.assignments), canonical(&back));
    }
}
