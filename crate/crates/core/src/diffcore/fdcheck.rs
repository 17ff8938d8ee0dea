//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::Primitive;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Seed of the fixed random projection used as the scalar test loss.
const PROJECTION_SEED: u64 = 0x5eed_fd;

/// Largest `|a - f| / max(|a|, |f|, floor)` over every input and parameter
/// coordinate, where `a` is the analytic gradient and `f` the central
/// difference of the scalar `Σ R ⊙ forward(input, params)` for a fixed
/// random `R`. The floor is `max(1e-8, 1e-3 · max|a|)` over the tensor the
/// coordinate belongs to, so entries many orders below the tensor's scale
/// are judged against round-off of the whole output rather than their own
/// magnitude.
pub fn fd_check(
    primitive: &dyn Primitive,
    params: &[Tensor2],
    input: &Tensor2,
    h: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!("fd step must lie in [1e-7, 1e-3], got {h}")));
    }
    let out = primitive.forward(input, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let projection = Tensor2::randn(out.rows(), out.cols(), 1.0, &mut rng);
    let analytic = primitive.backward(input, params, &projection)?;

    // Projecting the output difference (rather than differencing two
    // projected scalars) keeps round-off below the truncation error.
    let central = |plus: &Tensor2, minus: &Tensor2| -> f64 {
        plus.data()
            .iter()
            .zip(minus.data())
            .zip(projection.data())
            .map(|((p, m), r)| (p - m) * r)
            .sum::<f64>()
            / (2.0 * h)
    };

    let mut worst: f64 = 0.0;
    let floor = |t: &Tensor2| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) * FLOOR_FRACTION;
    let input_floor = floor(&analytic.input);
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = primitive.forward(&x, params)?;
        x.data_mut()[i] = orig - h;
        let minus = primitive.forward(&x, params)?;
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err_floor(analytic.input.data()[i], central(&plus, &minus), input_floor));
    }
    let mut ps = params.to_vec();
    for (k, grad) in analytic.params.iter().enumerate() {
        let param_floor = floor(grad);
        for i in 0..ps[k].len() {
            let orig = ps[k].data()[i];
            ps[k].data_mut()[i] = orig + h;
            let plus = primitive.forward(input, &ps)?;
            ps[k].data_mut()[i] = orig - h;
            let minus = primitive.forward(input, &ps)?;
            ps[k].data_mut()[i] = orig;
            worst = worst.max(rel_err_floor(grad.data()[i], central(&plus, &minus), param_floor));
        }
    }
    Ok(worst)
}

const FLOOR_FRACTION: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, 0.0)
}

fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ops::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;

    #[test]
    fn linear_passes() {
        let mut r = rng(1);
        let x = Tensor2::randn(5, 4, 1.0, &mut r);
        let params = [Tensor2::randn(4, 3, 0.5, &mut r), Tensor2::randn(1, 3, 0.5, &mut r)];
        assert!(fd_check(&Linear, &params, &x, H).unwrap() <= TOL);
    }

    #[test]
    fn l2_normalize_at_unit_vector() {
        let mut r = rng(2);
        let x = l2_normalize(&Tensor2::randn(1, 8, 1.0, &mut r)).unwrap().0;
        assert!(fd_check(&L2Normalize, &[], &x, H).unwrap() <= TOL);
    }

    #[test]
    fn gem_p3_positive_inputs() {
        let mut r = rng(3);
        let x = Tensor2::randn(6, 5, 0.3, &mut r).map(|v| v.abs() + 0.1);
        let err = fd_check(&GemPool::default(), &[Tensor2::scalar(3.0)], &x, H).unwrap();
        assert!(err <= TOL, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor2::zeros(1, 1);
        assert!(fd_check(&ScaleBy, &[Tensor2::scalar(1.0)], &x, 1e-2).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Broken;
        impl Primitive for Broken {
            fn name(&self) -> &'static str {
                "broken"
            }
            fn forward(&self, input: &Tensor2, _: &[Tensor2]) -> Result<Tensor2> {
                Ok(input.map(|v| v * v))
            }
            fn backward(&self, input: &Tensor2, _: &[Tensor2], up: &Tensor2) -> Result<Gradients> {
                Ok(Gradients { input: input.hadamard(up), params: vec![] })
            }
        }
        let x = Tensor2::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        assert!(fd_check(&Broken, &[], &x, H).unwrap() > 0.4);
    }
}
