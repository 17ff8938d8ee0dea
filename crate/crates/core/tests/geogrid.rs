use mvpr_core::geogrid::{grid_cell, is_positive, CellId, UtmPoint};
use proptest::prelude::*;

#[test]
fn default_cell_size_examples() {
    assert_eq!(grid_cell(UtmPoint::new(550_003.7, 4_180_019.99), 10.0).unwrap(), CellId::new(55_000, 418_001));
    assert_eq!(grid_cell(UtmPoint::new(-0.1, 0.0), 10.0).unwrap(), CellId::new(-1, 0));
    assert_eq!(grid_cell(UtmPoint::new(10.0, 9.999), 10.0).unwrap(), CellId::new(1, 0));
    assert!(grid_cell(UtmPoint::new(f64::NAN, 0.0), 10.0).is_err());
    assert!(grid_cell(UtmPoint::new(0.0, 0.0), 0.0).is_err());
}

#[test]
fn positive_radius_is_inclusive() {
    let a = UtmPoint::new(0.0, 0.0);
    assert!(is_positive(a, UtmPoint::new(15.0, 20.0), 25.0).unwrap());
    assert!(!is_positive(a, UtmPoint::new(15.0, 20.001), 25.0).unwrap());
    assert!(is_positive(a, a, 0.0).is_err());
}

proptest! {
    /// Centimeter coordinates against integer floor division.
    #[test]
    fn matches_integer_floor(e_cm in -10_000_000i64..10_000_000, n_cm in -10_000_000i64..10_000_000, m in 1i64..50) {
        let p = UtmPoint::new(e_cm as f64 / 100.0, n_cm as f64 / 100.0);
        let cell = grid_cell(p, m as f64).unwrap();
        prop_assert_eq!(cell, CellId::new(e_cm.div_euclid(100 * m), n_cm.div_euclid(100 * m)));
    }

    #[test]
    fn point_lies_inside_its_cell(e in -1e6f64..1e6, n in -1e6f64..1e6, m in 0.5f64..100.0) {
        let c = grid_cell(UtmPoint::new(e, n), m).unwrap();
        prop_assert!(c.e as f64 * m <= e + 1e-9 && e < (c.e + 1) as f64 * m + 1e-9);
        prop_assert!(c.n as f64 * m <= n + 1e-9 && n < (c.n + 1) as f64 * m + 1e-9);
    }

    #[test]
    fn positivity_is_symmetric(ax in -100.0f64..100.0, ay in -100.0f64..100.0, bx in -100.0f64..100.0, by in -100.0f64..100.0) {
        let (a, b) = (UtmPoint::new(ax, ay), UtmPoint::new(bx, by));
        prop_assert_eq!(is_positive(a, b, 25.0).unwrap(), is_positive(b, a, 25.0).unwrap());
    }
}
