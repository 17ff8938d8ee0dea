use std::collections::BTreeMap;

use mvpr_core::clusterer::{CellClusters, PlaceLabel};
use mvpr_core::diffcore::{fd_check, AdamConfig, Tensor2};
use mvpr_core::geogrid::CellId;
use mvpr_core::lmcl::{lmcl_backward, lmcl_loss, remap_after_recluster, ClassifierWeights, LmclPrimitive};
use mvpr_core::synthworld::ImageId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn label(e: i64, h: usize) -> PlaceLabel {
    PlaceLabel { cell: CellId::new(e, 0), h }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let mut t = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (o, x) in t.row_mut(r).iter_mut().zip(v) {
            *o = x / n;
        }
    }
    t
}

fn classifier(rows: &Tensor2, gamma: f64, margin: f64) -> ClassifierWeights {
    let entries = (0..rows.rows()).map(|r| (label(0, r), rows.row(r).to_vec())).collect();
    ClassifierWeights::from_rows(entries, gamma, margin).unwrap()
}

#[test]
fn symmetric_two_class_closed_form() {
    let expected = (1.0f64 + (30.0f64 * 0.4).exp()).ln();
    assert!((expected - 12.000_006_144).abs() < 1e-8);
    for angle in [0.0f64, 0.3, 1.2, 2.0, 3.0] {
        // feature at equal angle from both class directions
        let w = Tensor2::from_vec(2, 2, vec![1.0, 0.0, angle.cos(), angle.sin()]).unwrap();
        let half = angle / 2.0;
        let f = Tensor2::from_vec(1, 2, vec![half.cos(), half.sin()]).unwrap();
        let loss = lmcl_loss(&f, &[0], &classifier(&w, 30.0, 0.4)).unwrap();
        assert!((loss - expected).abs() < 1e-9, "angle {angle}: {loss}");
    }
}

#[test]
fn confident_three_class_case() {
    let w = Tensor2::from_vec(3, 2, vec![1.0, 0.0, -1.0, 0.0, -1.0, 0.0]).unwrap();
    let f = Tensor2::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    let loss = lmcl_loss(&f, &[0], &classifier(&w, 30.0, 0.4)).unwrap();
    let oracle = -((18.0f64).exp() / ((18.0f64).exp() + 2.0 * (-30.0f64).exp())).ln();
    let series = 2.0 * (-48.0f64).exp();
    assert!(loss > 0.0);
    assert!((loss - series).abs() < 1e-6 * series, "{loss} vs {series}");
    assert!(oracle.abs() < 1e-15);
}

#[test]
fn zero_margin_is_scaled_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = unit_rows(&mut rng, 5, 6);
    let f = unit_rows(&mut rng, 3, 6);
    let targets = [1, 4, 0];
    let loss = lmcl_loss(&f, &targets, &classifier(&w, 7.0, 0.0)).unwrap();
    let mut oracle = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let z: Vec<f64> = (0..5)
            .map(|j| 7.0 * f.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        oracle -= (z[y].exp() / denom).ln();
    }
    oracle /= 3.0;
    assert!((loss - oracle).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = unit_rows(&mut rng, 5, 8);
        let f = unit_rows(&mut rng, 4, 8);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let prim = LmclPrimitive { targets, gamma: 30.0, margin: 0.4 };
        let err = fd_check(&prim, &[w], &f, 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn symmetric_gradient_points_toward_target() {
    let w = Tensor2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let s = 0.5f64.sqrt();
    let f = Tensor2::from_vec(1, 2, vec![s, s]).unwrap();
    let (_, df, _) = lmcl_backward(&f, &[0], &classifier(&w, 30.0, 0.4)).unwrap();
    // descent direction -df should move toward the target row (1,0) and away from (0,1)
    assert!(-df.get(0, 0) > 0.0);
    assert!(-df.get(0, 1) < 0.0);
    assert!((df.get(0, 0) + df.get(0, 1)).abs() < 1e-12);
}

#[test]
fn zero_scale_gives_constant_loss_and_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = unit_rows(&mut rng, 4, 5);
    let f = unit_rows(&mut rng, 3, 5);
    let (loss, df, dw) = lmcl_backward(&f, &[0, 1, 3], &classifier(&w, 0.0, 0.4)).unwrap();
    assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    assert!(df.data().iter().all(|v| *v == 0.0));
    assert!(dw.data().iter().all(|v| *v == 0.0));
}

/// Random orthogonal matrix by Gram-Schmidt.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Tensor2 {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor2::from_vec(d, d, q.concat()).unwrap()
}

#[test]
fn rotation_leaves_loss_unchanged() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let w = unit_rows(&mut rng, 6, 7);
        let f = unit_rows(&mut rng, 5, 7);
        let targets = [0, 2, 5, 1, 1];
        let r = random_rotation(&mut rng, 7);
        let before = lmcl_loss(&f, &targets, &classifier(&w, 30.0, 0.4)).unwrap();
        let after = lmcl_loss(&f.matmul(&r), &targets, &classifier(&w.matmul(&r), 30.0, 0.4)).unwrap();
        assert!((before - after).abs() < 1e-9, "{before} vs {after}");
    }
}

#[test]
fn loss_decreases_on_separable_toy_problem() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = unit_rows(&mut rng, 4, 8);
        let mut f = Tensor2::zeros(32, 8);
        let targets: Vec<usize> = (0..32).map(|i| i % 4).collect();
        for (i, &t) in targets.iter().enumerate() {
            let v: Vec<f64> = centers.row(t).iter().map(|c| c + 0.1 * rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            f.row_mut(i).iter_mut().zip(&v).for_each(|(o, x)| *o = x / n);
        }
        let mut w = classifier(&unit_rows(&mut rng, 4, 8), 30.0, 0.4);
        let first = w.loss(&f, &targets).unwrap();
        for _ in 0..50 {
            let (_, _, dw) = lmcl_backward(&f, &targets, &w).unwrap();
            w.adam_step(&dw, 1e-2, AdamConfig::default()).unwrap();
        }
        let last = w.loss(&f, &targets).unwrap();
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

fn clusters(ids: &[u64], assignments: &[usize], centroids: Vec<Vec<f64>>) -> CellClusters {
    CellClusters {
        ids: ids.iter().map(|&i| ImageId(i)).collect(),
        assignments: assignments.to_vec(),
        centroids,
        objective: 0.0,
    }
}

#[test]
fn remap_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = unit_rows(&mut rng, 6, 4);
    let entries = (0..6).map(|r| (label((r / 3) as i64, r % 3), rows.row(r).to_vec())).collect();
    let mut w = ClassifierWeights::from_rows(entries, 30.0, 0.4).unwrap();
    let g = unit_rows(&mut rng, 6, 4);
    w.adam_step(&g, 1e-2, AdamConfig::default()).unwrap();

    let same = remap_after_recluster(&w, &BTreeMap::new()).unwrap();
    assert_eq!(same, w);

    let mut one = BTreeMap::new();
    one.insert(
        CellId::new(1, 0),
        clusters(&[1, 2, 3], &[0, 1, 1], vec![vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 0.0]]),
    );
    let r = remap_after_recluster(&w, &one).unwrap();
    assert_eq!(r.len(), 5);
    for h in 0..3 {
        let i = w.row_index(&label(0, h)).unwrap();
        let j = r.row_index(&label(0, h)).unwrap();
        assert_eq!(w.rows().row(i), r.rows().row(j));
    }
    assert_eq!(r.rows().row(r.row_index(&label(1, 0)).unwrap()), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(r.rows().row(r.row_index(&label(1, 1)).unwrap()), &[0.0, 0.0, 1.0, 0.0]);
    assert!(r.row_index(&label(1, 2)).is_none());
    let (m, _, steps) = r.optimizer_state();
    let j = r.row_index(&label(1, 0)).unwrap();
    assert!(m.row(j).iter().all(|v| *v == 0.0));
    assert_eq!(steps[j], 0);
    for (i, l) in r.labels().iter().enumerate() {
        assert_eq!(r.row_index(l), Some(i));
    }
}
