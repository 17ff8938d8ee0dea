//! Differentiable primitives with hand-derived backward passes.
//!
//! Each primitive has a forward function that returns its output together
//! with whatever it needs to run backward, and a backward function that
//! consumes one upstream gradient of the output's shape. The [`Primitive`]
//! trait wraps them behind a uniform `(input, params)` interface used by the
//! finite-difference checker.

use super::tensor::{dot, Tensor2};
use crate::error::{Error, Result};

/// Default GeM clamp floor.
pub const GEM_EPS: f64 = 1e-6;

/// Default layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Analytic gradients of a primitive with respect to its input and params.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor2,
    pub params: Vec<Tensor2>,
}

/// Uniform interface over differentiable building blocks.
pub trait Primitive {
    fn name(&self) -> &'static str;

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2>;

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2)
        -> Result<Gradients>;
}

fn expect_params(name: &'static str, params: &[Tensor2], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::shape(name, format!("expected {n} params, got {}", params.len())));
    }
    Ok(())
}

fn expect_upstream(name: &'static str, out: (usize, usize), upstream: &Tensor2) -> Result<()> {
    if upstream.shape() != out {
        return Err(Error::shape(
            name,
            format!("upstream {:?} does not match output {:?}", upstream.shape(), out),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- linear

/// `y = x·w + b` with `x: T×in`, `w: in×out`, `b: 1×out`.
pub fn linear(x: &Tensor2, w: &Tensor2, b: Option<&Tensor2>) -> Result<Tensor2> {
    if x.cols() != w.rows() {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    let mut y = x.matmul(w);
    if let Some(b) = b {
        if b.shape() != (1, w.cols()) {
            return Err(Error::shape("linear", format!("bias {:?}", b.shape())));
        }
        y.add_row_broadcast(b);
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`; the weight gradients are skipped when
/// `param_grads` is false.
pub fn linear_backward(
    x: &Tensor2,
    w: &Tensor2,
    dy: &Tensor2,
    param_grads: bool,
) -> (Tensor2, Option<(Tensor2, Tensor2)>) {
    let dx = dy.matmul_t(w);
    let pg = param_grads.then(|| (x.t_matmul(dy), dy.sum_rows()));
    (dx, pg)
}

pub struct Linear;

impl Primitive for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        expect_params(self.name(), params, 2)?;
        linear(input, &params[0], Some(&params[1]))
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        expect_params(self.name(), params, 2)?;
        expect_upstream(self.name(), (input.rows(), params[0].cols()), upstream)?;
        let (dx, pg) = linear_backward(input, &params[0], upstream, true);
        let (dw, db) = pg.expect("requested");
        Ok(Gradients {
            input: dx,
            params: vec![dw, db],
        })
    }
}

// ------------------------------------------------------------ layer norm

pub struct LayerNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with affine `gamma`, `beta` (both `1×D`).
pub fn layer_norm(
    x: &Tensor2,
    gamma: &Tensor2,
    beta: &Tensor2,
    eps: f64,
) -> Result<(Tensor2, LayerNormCache)> {
    let d = x.cols();
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(Error::shape(
            "layer_norm",
            format!("affine {:?}/{:?} vs width {d}", gamma.shape(), beta.shape()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("layer_norm epsilon must be > 0, got {eps}")));
    }
    let mut xhat = Tensor2::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        // Second pass corrects the rounding of the first, so constant rows
        // normalize to exact zeros.
        let rough = row.iter().sum::<f64>() / d as f64;
        let mean = rough + row.iter().map(|v| v - rough).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((o, g), b) in y.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor2,
    dy: &Tensor2,
) -> (Tensor2, Tensor2, Tensor2) {
    let d = dy.cols();
    let mut dx = Tensor2::zeros(dy.rows(), d);
    let mut dgamma = Tensor2::zeros(1, d);
    let dbeta = dy.sum_rows();
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        for j in 0..d {
            dxhat[j] = g[j] * gamma.data()[j];
            dgamma.data_mut()[j] += g[j] * xh[j];
        }
        let sum = dxhat.iter().sum::<f64>();
        let sum_xh = dot(&dxhat, xh);
        let scale = cache.inv_std[r] / d as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = scale * (d as f64 * dxhat[j] - sum - xh[j] * sum_xh);
        }
    }
    (dx, dgamma, dbeta)
}

pub struct LayerNorm {
    pub eps: f64,
}

impl Default for LayerNorm {
    fn default() -> Self {
        Self { eps: LN_EPS }
    }
}

impl Primitive for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        expect_params(self.name(), params, 2)?;
        Ok(layer_norm(input, &params[0], &params[1], self.eps)?.0)
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        expect_params(self.name(), params, 2)?;
        expect_upstream(self.name(), input.shape(), upstream)?;
        let (_, cache) = layer_norm(input, &params[0], &params[1], self.eps)?;
        let (dx, dg, db) = layer_norm_backward(&cache, &params[0], upstream);
        Ok(Gradients {
            input: dx,
            params: vec![dg, db],
        })
    }
}

// ------------------------------------------------------------- attention

/// Projection weights of single-head self-attention, each `D×D`.
pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor2,
    pub wk: &'a Tensor2,
    pub wv: &'a Tensor2,
    pub wo: &'a Tensor2,
}

pub struct AttentionCache {
    x: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    attn: Tensor2,
    heads: Tensor2,
}

pub struct AttentionGrads {
    pub dx: Tensor2,
    /// `[dwq, dwk, dwv, dwo]`, present when requested.
    pub params: Option<[Tensor2; 4]>,
}

/// `softmax(Q·Kᵀ/√D)·V·Wo` with `Q = x·Wq`, `K = x·Wk`, `V = x·Wv`.
pub fn attention(x: &Tensor2, w: &AttentionWeights<'_>) -> Result<(Tensor2, AttentionCache)> {
    let d = x.cols();
    for (name, m) in [("wq", w.wq), ("wk", w.wk), ("wv", w.wv), ("wo", w.wo)] {
        if m.shape() != (d, d) {
            return Err(Error::shape(
                "single_head_attention",
                format!("{name} {:?} vs width {d}", m.shape()),
            ));
        }
    }
    let q = x.matmul(w.wq);
    let k = x.matmul(w.wk);
    let v = x.matmul(w.wv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = q.matmul_t(&k);
    for r in 0..attn.rows() {
        let row = attn.row_mut(r);
        let mut max = f64::NEG_INFINITY;
        for s in row.iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in row.iter_mut() {
            *s /= total;
        }
    }
    let heads = attn.matmul(&v);
    let out = heads.matmul(w.wo);
    Ok((
        out,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            heads,
        },
    ))
}

pub fn attention_backward(
    cache: &AttentionCache,
    w: &AttentionWeights<'_>,
    dout: &Tensor2,
    param_grads: bool,
) -> AttentionGrads {
    let d = cache.x.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let dheads = dout.matmul_t(w.wo);
    let dattn = dheads.matmul_t(&cache.v);
    let dv = cache.attn.t_matmul(&dheads);
    // Softmax Jacobian, row by row, folded with the logit scale.
    let mut dscores = Tensor2::zeros(dattn.rows(), dattn.cols());
    for r in 0..dattn.rows() {
        let a = cache.attn.row(r);
        let g = dattn.row(r);
        let inner = dot(a, g);
        for (j, o) in dscores.row_mut(r).iter_mut().enumerate() {
            *o = a[j] * (g[j] - inner) * scale;
        }
    }
    let dq = dscores.matmul(&cache.k);
    let dk = dscores.t_matmul(&cache.q);
    let mut dx = dq.matmul_t(w.wq);
    dx.add_assign(&dk.matmul_t(w.wk));
    dx.add_assign(&dv.matmul_t(w.wv));
    let params = param_grads.then(|| {
        [
            cache.x.t_matmul(&dq),
            cache.x.t_matmul(&dk),
            cache.x.t_matmul(&dv),
            cache.heads.t_matmul(dout),
        ]
    });
    AttentionGrads { dx, params }
}

pub struct SingleHeadAttention;

impl Primitive for SingleHeadAttention {
    fn name(&self) -> &'static str {
        "single_head_attention"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        expect_params(self.name(), params, 4)?;
        let w = AttentionWeights {
            wq: &params[0],
            wk: &params[1],
            wv: &params[2],
            wo: &params[3],
        };
        Ok(attention(input, &w)?.0)
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        expect_params(self.name(), params, 4)?;
        expect_upstream(self.name(), input.shape(), upstream)?;
        let w = AttentionWeights {
            wq: &params[0],
            wk: &params[1],
            wv: &params[2],
            wo: &params[3],
        };
        let (_, cache) = attention(input, &w)?;
        let g = attention_backward(&cache, &w, upstream, true);
        Ok(Gradients {
            input: g.dx,
            params: g.params.expect("requested").into(),
        })
    }
}

// ------------------------------------------------------------------- mlp

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Weights of `GELU(x·w1 + b1)·w2 + b2`.
pub struct MlpWeights<'a> {
    pub w1: &'a Tensor2,
    pub b1: &'a Tensor2,
    pub w2: &'a Tensor2,
    pub b2: &'a Tensor2,
}

pub struct MlpCache {
    x: Tensor2,
    pre: Tensor2,
    act: Tensor2,
}

pub struct MlpGrads {
    pub dx: Tensor2,
    /// `[dw1, db1, dw2, db2]`, present when requested.
    pub params: Option<[Tensor2; 4]>,
}

pub fn mlp(x: &Tensor2, w: &MlpWeights<'_>) -> Result<(Tensor2, MlpCache)> {
    if w.w1.cols() != w.w2.rows() || w.w2.cols() != x.cols() {
        return Err(Error::shape(
            "mlp_2layer",
            format!("w1 {:?}, w2 {:?}, input {:?}", w.w1.shape(), w.w2.shape(), x.shape()),
        ));
    }
    let pre = linear(x, w.w1, Some(w.b1)).map_err(|_| {
        Error::shape("mlp_2layer", format!("first layer {:?} on {:?}", w.w1.shape(), x.shape()))
    })?;
    let act = pre.map(gelu);
    let out = linear(&act, w.w2, Some(w.b2))
        .map_err(|_| Error::shape("mlp_2layer", format!("second bias {:?}", w.b2.shape())))?;
    Ok((
        out,
        MlpCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

pub fn mlp_backward(cache: &MlpCache, w: &MlpWeights<'_>, dy: &Tensor2, param_grads: bool) -> MlpGrads {
    let (dact, pg2) = linear_backward(&cache.act, w.w2, dy, param_grads);
    let dpre = dact.hadamard(&cache.pre.map(gelu_grad));
    let (dx, pg1) = linear_backward(&cache.x, w.w1, &dpre, param_grads);
    let params = match (pg1, pg2) {
        (Some((dw1, db1)), Some((dw2, db2))) => Some([dw1, db1, dw2, db2]),
        _ => None,
    };
    MlpGrads { dx, params }
}

pub struct Mlp2Layer;

impl Primitive for Mlp2Layer {
    fn name(&self) -> &'static str {
        "mlp_2layer"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        expect_params(self.name(), params, 4)?;
        let w = MlpWeights {
            w1: &params[0],
            b1: &params[1],
            w2: &params[2],
            b2: &params[3],
        };
        Ok(mlp(input, &w)?.0)
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        expect_params(self.name(), params, 4)?;
        expect_upstream(self.name(), input.shape(), upstream)?;
        let w = MlpWeights {
            w1: &params[0],
            b1: &params[1],
            w2: &params[2],
            b2: &params[3],
        };
        let (_, cache) = mlp(input, &w)?;
        let g = mlp_backward(&cache, &w, upstream, true);
        Ok(Gradients {
            input: g.dx,
            params: g.params.expect("requested").into(),
        })
    }
}

// ---------------------------------------------------------- l2 normalize

/// Normalizes each row to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor2) -> Result<(Tensor2, Vec<f64>)> {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = dot(x.row(r), x.row(r)).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric(format!("l2_normalize: row {r} has norm {n}")));
        }
        y.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((y, norms))
}

pub fn l2_normalize_backward(y: &Tensor2, norms: &[f64], dy: &Tensor2) -> Tensor2 {
    let mut dx = Tensor2::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let g = dy.row(r);
        let proj = dot(yr, g);
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = (g[j] - yr[j] * proj) / norms[r];
        }
    }
    dx
}

pub struct L2Normalize;

impl Primitive for L2Normalize {
    fn name(&self) -> &'static str {
        "l2_normalize"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        expect_params(self.name(), params, 0)?;
        Ok(l2_normalize(input)?.0)
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        expect_params(self.name(), params, 0)?;
        expect_upstream(self.name(), input.shape(), upstream)?;
        let (y, norms) = l2_normalize(input)?;
        Ok(Gradients {
            input: l2_normalize_backward(&y, &norms, upstream),
            params: vec![],
        })
    }
}

// -------------------------------------------------------------- gem pool

pub struct GemCache {
    clamped: Tensor2,
    mean_pow: Vec<f64>,
    out: Vec<f64>,
    p: f64,
}

/// Generalized-mean pooling over rows: per column
/// `((1/T) Σ_t max(x_t, eps)^p)^(1/p)`. Returns a `1×D` row.
pub fn gem_pool(x: &Tensor2, p: f64, eps: f64) -> Result<(Tensor2, GemCache)> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::Parameter(format!("gem exponent must be >= 1, got {p}")));
    }
    if x.rows() == 0 {
        return Err(Error::shape("gem_pool", "no tokens to pool"));
    }
    let t = x.rows() as f64;
    let clamped = x.map(|v| v.max(eps));
    let mut mean_pow = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean_pow.iter_mut().zip(clamped.row(r)) {
            *m += v.powf(p);
        }
    }
    mean_pow.iter_mut().for_each(|m| *m /= t);
    let out: Vec<f64> = mean_pow.iter().map(|m| m.powf(1.0 / p)).collect();
    Ok((
        Tensor2::row_vector(out.clone()),
        GemCache {
            clamped,
            mean_pow,
            out,
            p,
        },
    ))
}

/// Returns `(dx, dp)`. Clamped entries receive zero gradient.
pub fn gem_pool_backward(x: &Tensor2, cache: &GemCache, dy: &Tensor2, eps: f64) -> (Tensor2, f64) {
    let t = x.rows() as f64;
    let p = cache.p;
    let mut dx = Tensor2::zeros(x.rows(), x.cols());
    let mut dp = 0.0;
    for j in 0..x.cols() {
        let m = cache.mean_pow[j];
        let y = cache.out[j];
        let g = dy.data()[j];
        // dy/dx_t = m^(1/p - 1) * x_t^(p - 1) / T
        let coef = m.powf(1.0 / p - 1.0) / t;
        let mut dm_dp = 0.0;
        for r in 0..x.rows() {
            let c = cache.clamped.get(r, j);
            if x.get(r, j) > eps {
                dx.set(r, j, g * coef * c.powf(p - 1.0));
            }
            dm_dp += c.powf(p) * c.ln();
        }
        dm_dp /= t;
        dp += g * y * (-m.ln() / (p * p) + dm_dp / (p * m));
    }
    (dx, dp)
}

pub struct GemPool {
    pub eps: f64,
}

impl Default for GemPool {
    fn default() -> Self {
        Self { eps: GEM_EPS }
    }
}

impl Primitive for GemPool {
    fn name(&self) -> &'static str {
        "gem_pool"
    }

    /// `params[0]` is the `1×1` exponent.
    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        expect_params(self.name(), params, 1)?;
        Ok(gem_pool(input, params[0].data()[0], self.eps)?.0)
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        expect_params(self.name(), params, 1)?;
        expect_upstream(self.name(), (1, input.cols()), upstream)?;
        let (_, cache) = gem_pool(input, params[0].data()[0], self.eps)?;
        let (dx, dp) = gem_pool_backward(input, &cache, upstream, self.eps);
        Ok(Gradients {
            input: dx,
            params: vec![Tensor2::scalar(dp)],
        })
    }
}

// -------------------------------------------------------------- scale by

/// `y = s·x`; `params[0]` is the `1×1` scale.
pub struct ScaleBy;

impl Primitive for ScaleBy {
    fn name(&self) -> &'static str {
        "scale_by"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        expect_params(self.name(), params, 1)?;
        Ok(input.scale(params[0].data()[0]))
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        expect_params(self.name(), params, 1)?;
        expect_upstream(self.name(), input.shape(), upstream)?;
        Ok(Gradients {
            input: upstream.scale(params[0].data()[0]),
            params: vec![Tensor2::scalar(input.inner(upstream))],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor2::filled(2, 6, 3.7);
        let ones = Tensor2::filled(1, 6, 1.0);
        let zeros = Tensor2::zeros(1, 6);
        let (y, _) = layer_norm(&x, &ones, &zeros, LN_EPS).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        assert!(layer_norm(&x, &ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor2::randn(1, 5, 1.0, &mut rng);
        let ws: Vec<Tensor2> = (0..4).map(|_| Tensor2::randn(5, 5, 0.5, &mut rng)).collect();
        let out = SingleHeadAttention.forward(&x, &ws).unwrap();
        let expected = x.matmul(&ws[2]).matmul(&ws[3]);
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gem_examples() {
        let x = Tensor2::from_vec(2, 1, vec![1.0, 4.0]).unwrap();
        assert_eq!(gem_pool(&x, 1.0, GEM_EPS).unwrap().0.data(), &[2.5]);
        let x = Tensor2::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let y = gem_pool(&x, 3.0, GEM_EPS).unwrap().0.data()[0];
        // ((1 + 8 + 27) / 3)^(1/3) = 12^(1/3)
        assert!((y - 12f64.cbrt()).abs() < 1e-12);
        assert!((y - 2.289_428_485_106_663).abs() < 1e-12);
        let x = Tensor2::filled(4, 2, 0.37);
        for p in [1.0, 2.0, 3.0, 7.5] {
            for v in gem_pool(&x, p, GEM_EPS).unwrap().0.data() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
        assert!(matches!(gem_pool(&x, 0.5, GEM_EPS), Err(Error::Parameter(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let x = Tensor2::zeros(3, 4);
        let err = Linear
            .forward(&x, &[Tensor2::zeros(5, 2), Tensor2::zeros(1, 2)])
            .unwrap_err();
        assert!(err.to_string().contains("linear"), "{err}");
        let err = SingleHeadAttention
            .forward(&x, &[Tensor2::zeros(4, 4), Tensor2::zeros(4, 4), Tensor2::zeros(3, 4), Tensor2::zeros(4, 4)])
            .unwrap_err();
        assert!(err.to_string().contains("single_head_attention"), "{err}");
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = Tensor2::randn(1, 17, 3.0, &mut rng);
            let (y, _) = l2_normalize(&x).unwrap();
            assert!((y.norm() - 1.0).abs() < 1e-9);
        }
        assert!(l2_normalize(&Tensor2::zeros(1, 3)).is_err());
    }
}
