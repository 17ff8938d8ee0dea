//! Descriptor network: input embedding, one adapter-augmented transformer
//! block, GeM pooling over tokens, linear projection and L2 normalization.
//!
//! The block has two residual stages:
//!
//! ```text
//! z' = Attn(LN(z)) + z
//! out = MLP(LN(z')) + s * Adapter(LN(z')) + z'
//! ```
//!
//! where `Adapter` is a `D -> D/4 -> D` GELU bottleneck and `s` a trainable
//! scalar. By default only the embedding, adapter, `s`, the GeM exponent and
//! the projection train; the block itself is frozen unless
//! [`EncoderConfig::train_block`] is set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::ops::{
    self, attention, attention_backward, gem_pool, gem_pool_backward, l2_normalize,
    l2_normalize_backward, layer_norm, layer_norm_backward, linear, linear_backward, mlp,
    mlp_backward, AttentionCache, AttentionWeights, GemCache, Gradients, LayerNormCache, MlpCache,
    MlpWeights, Primitive,
};
use crate::diffcore::{ParamStore, Tensor2};
use crate::error::{Error, Result};

/// Parameter slots, in store order.
pub mod slot {
    pub const EMBED_W: usize = 0;
    pub const EMBED_B: usize = 1;
    pub const LN1_G: usize = 2;
    pub const LN1_B: usize = 3;
    pub const WQ: usize = 4;
    pub const WK: usize = 5;
    pub const WV: usize = 6;
    pub const WO: usize = 7;
    pub const LN2_G: usize = 8;
    pub const LN2_B: usize = 9;
    pub const MLP_W1: usize = 10;
    pub const MLP_B1: usize = 11;
    pub const MLP_W2: usize = 12;
    pub const MLP_B2: usize = 13;
    pub const AD_W1: usize = 14;
    pub const AD_B1: usize = 15;
    pub const AD_W2: usize = 16;
    pub const AD_B2: usize = 17;
    pub const SCALE: usize = 18;
    pub const GEM_P: usize = 19;
    pub const PROJ: usize = 20;
    pub const COUNT: usize = 21;

    /// The block's slots form this contiguous range.
    pub const BLOCK: std::ops::Range<usize> = LN1_G..GEM_P;

    pub const NAMES: [&str; COUNT] = [
        "embed.w", "embed.b", "ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv",
        "attn.wo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
        "adapter.w1", "adapter.b1", "adapter.w2", "adapter.b2", "adapter.scale", "gem.p",
        "proj.w",
    ];
}

/// Initial GeM exponent.
pub const GEM_P_INIT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Token feature width coming from the data.
    pub d_in: usize,
    /// Block width `D`.
    pub width: usize,
    /// Descriptor dimension `d`.
    pub desc_dim: usize,
    /// Unfreezes attention, MLP and layer norms.
    pub train_block: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            width: 32,
            desc_dim: 64,
            train_block: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.desc_dim == 0 || self.width < 4 {
            return Err(Error::Parameter(format!(
                "encoder needs d_in >= 1, width >= 4, desc_dim >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        4 * self.width
    }

    fn adapter_hidden(&self) -> usize {
        (self.width / 4).max(1)
    }
}

/// All trainable quantities of the descriptor network, held in a
/// [`ParamStore`] whose slots follow [`slot`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
}

/// Unit-norm descriptor.
pub type Descriptor = Vec<f64>;

impl EncoderParams {
    /// Seeded random initialization.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (din, dm, dd) = (config.d_in, config.width, config.desc_dim);
        let (hm, ha) = (config.mlp_hidden(), config.adapter_hidden());
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let shapes: [(usize, usize, f64); slot::COUNT] = [
            (din, dm, inv(din)),
            (1, dm, 0.0),
            (1, dm, 0.0),
            (1, dm, 0.0),
            (dm, dm, inv(dm)),
            (dm, dm, inv(dm)),
            (dm, dm, inv(dm)),
            (dm, dm, inv(dm)),
            (1, dm, 0.0),
            (1, dm, 0.0),
            (dm, hm, inv(dm)),
            (1, hm, 0.0),
            (hm, dm, 0.5 * inv(hm)),
            (1, dm, 0.0),
            (dm, ha, inv(dm)),
            (1, ha, 0.0),
            (ha, dm, 0.5 * inv(ha)),
            (1, dm, 0.0),
            (1, 1, 0.0),
            (1, 1, 0.0),
            (dm, dd, inv(dm)),
        ];
        let mut store = ParamStore::new();
        for (i, &(r, c, std)) in shapes.iter().enumerate() {
            let value = match i {
                slot::LN1_G | slot::LN2_G => Tensor2::filled(r, c, 1.0),
                slot::SCALE => Tensor2::scalar(0.5),
                slot::GEM_P => Tensor2::scalar(GEM_P_INIT),
                _ if std == 0.0 => Tensor2::zeros(r, c),
                _ => Tensor2::randn(r, c, std, &mut rng),
            };
            let trainable = config.train_block || !is_block_core(i);
            store.insert(slot::NAMES[i], value, trainable)?;
        }
        Ok(Self { config, store })
    }

    /// Rebuilds from a store, checking every shape against `config`.
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if store.len() != slot::COUNT {
            return Err(Error::Contract(format!(
                "encoder store has {} params, expected {}",
                store.len(),
                slot::COUNT
            )));
        }
        for (a, b) in store.iter().zip(reference.store.iter()) {
            if a.name != b.name || !a.value.same_shape(&b.value) {
                return Err(Error::Contract(format!(
                    "encoder param {} has shape {:?}, expected {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(Self { config, store })
    }

    pub fn weights(&self) -> Vec<&Tensor2> {
        self.store.iter().map(|p| &p.value).collect()
    }

    pub fn adapter_scale(&self) -> f64 {
        self.store.value(slot::SCALE).data()[0]
    }

    pub fn set_adapter_scale(&mut self, s: f64) {
        self.store.value_mut(slot::SCALE).data_mut()[0] = s;
    }

    pub fn gem_p(&self) -> f64 {
        self.store.value(slot::GEM_P).data()[0]
    }

    /// Keeps the GeM exponent inside its valid domain after an update.
    pub fn clamp_gem_p(&mut self) {
        let p = self.store.value_mut(slot::GEM_P);
        p.data_mut()[0] = p.data()[0].max(1.0);
    }

    pub fn encode(&self, tokens: &Tensor2) -> Result<Descriptor> {
        let w = self.weights();
        Ok(encoder_forward(&w, tokens)?.descriptor.into_vec())
    }

    /// Forward pass that keeps the intermediates needed by [`Self::backward`].
    pub fn forward_trace(&self, tokens: &Tensor2) -> Result<EncoderTrace> {
        encoder_forward(&self.weights(), tokens)
    }

    /// Gradients of every slot given `d_descriptor` (`1×d`). Frozen slots
    /// come back as `None`.
    pub fn backward(&self, trace: &EncoderTrace, d_descriptor: &Tensor2) -> Vec<Option<Tensor2>> {
        let want: Vec<bool> = self.store.iter().map(|p| p.trainable).collect();
        let (grads, _) = encoder_backward(&self.weights(), trace, d_descriptor, &want);
        grads
    }
}

fn is_block_core(i: usize) -> bool {
    slot::BLOCK.contains(&i) && !(slot::AD_W1..=slot::SCALE).contains(&i)
}

/// Borrowed weights of the block, slots `LN1_G..=SCALE`.
struct BlockWeights<'a> {
    w: &'a [&'a Tensor2],
}

impl<'a> BlockWeights<'a> {
    /// `w` holds the 17 block tensors in slot order.
    fn new(w: &'a [&'a Tensor2]) -> Self {
        Self { w }
    }

    fn at(&self, s: usize) -> &'a Tensor2 {
        self.w[s - slot::LN1_G]
    }

    fn attn(&self) -> AttentionWeights<'a> {
        AttentionWeights {
            wq: self.at(slot::WQ),
            wk: self.at(slot::WK),
            wv: self.at(slot::WV),
            wo: self.at(slot::WO),
        }
    }

    fn mlp(&self) -> MlpWeights<'a> {
        MlpWeights {
            w1: self.at(slot::MLP_W1),
            b1: self.at(slot::MLP_B1),
            w2: self.at(slot::MLP_W2),
            b2: self.at(slot::MLP_B2),
        }
    }

    fn adapter(&self) -> MlpWeights<'a> {
        MlpWeights {
            w1: self.at(slot::AD_W1),
            b1: self.at(slot::AD_B1),
            w2: self.at(slot::AD_W2),
            b2: self.at(slot::AD_B2),
        }
    }

    fn scale(&self) -> f64 {
        self.at(slot::SCALE).data()[0]
    }
}

pub struct BlockTrace {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
    adapter: MlpCache,
    adapter_out: Tensor2,
}

fn block_forward(z: &Tensor2, bw: &BlockWeights<'_>) -> Result<(Tensor2, BlockTrace)> {
    let (h1, ln1) = layer_norm(z, bw.at(slot::LN1_G), bw.at(slot::LN1_B), ops::LN_EPS)?;
    let (a, attn) = attention(&h1, &bw.attn())?;
    let z_mid = a.add(z);
    let (h2, ln2) = layer_norm(&z_mid, bw.at(slot::LN2_G), bw.at(slot::LN2_B), ops::LN_EPS)?;
    let (mut out, mlp_cache) = mlp(&h2, &bw.mlp())?;
    let (adapter_out, adapter) = mlp(&h2, &bw.adapter())?;
    let s = bw.scale();
    for (o, v) in out.data_mut().iter_mut().zip(adapter_out.data()) {
        *o += s * v;
    }
    out.add_assign(&z_mid);
    Ok((
        out,
        BlockTrace {
            ln1,
            attn,
            ln2,
            mlp: mlp_cache,
            adapter,
            adapter_out,
        },
    ))
}

/// The block without its adapter branch: `MLP(LN(z')) + z'`.
pub fn plain_block(z: &Tensor2, block: &[&Tensor2]) -> Result<Tensor2> {
    check_block_len(block)?;
    let bw = BlockWeights::new(block);
    let (h1, _) = layer_norm(z, bw.at(slot::LN1_G), bw.at(slot::LN1_B), ops::LN_EPS)?;
    let (a, _) = attention(&h1, &bw.attn())?;
    let z_mid = a.add(z);
    let (h2, _) = layer_norm(&z_mid, bw.at(slot::LN2_G), bw.at(slot::LN2_B), ops::LN_EPS)?;
    let (mut out, _) = mlp(&h2, &bw.mlp())?;
    out.add_assign(&z_mid);
    Ok(out)
}

/// Returns `dz` and the 17 block gradients (`None` where not wanted).
fn block_backward(
    bw: &BlockWeights<'_>,
    tr: &BlockTrace,
    dout: &Tensor2,
    want: &[bool],
) -> (Tensor2, Vec<Option<Tensor2>>) {
    let want_at = |s: usize| want[s - slot::LN1_G];
    let mut grads: Vec<Option<Tensor2>> = vec![None; slot::BLOCK.len()];
    let mut put = |s: usize, g: Tensor2| grads[s - slot::LN1_G] = Some(g);

    let s = bw.scale();
    let want_mlp = (slot::MLP_W1..=slot::MLP_B2).any(want_at);
    let g_mlp = mlp_backward(&tr.mlp, &bw.mlp(), dout, want_mlp);
    let want_ad = (slot::AD_W1..=slot::AD_B2).any(want_at);
    let d_ad_out = dout.scale(s);
    let g_ad = mlp_backward(&tr.adapter, &bw.adapter(), &d_ad_out, want_ad);
    if want_at(slot::SCALE) {
        put(slot::SCALE, Tensor2::scalar(tr.adapter_out.inner(dout)));
    }
    if let Some(p) = g_mlp.params {
        for (k, g) in p.into_iter().enumerate() {
            put(slot::MLP_W1 + k, g);
        }
    }
    if let Some(p) = g_ad.params {
        for (k, g) in p.into_iter().enumerate() {
            put(slot::AD_W1 + k, g);
        }
    }
    let mut dh2 = g_mlp.dx;
    dh2.add_assign(&g_ad.dx);
    let (dz_ln2, dg2, db2) = layer_norm_backward(&tr.ln2, bw.at(slot::LN2_G), &dh2);
    if want_at(slot::LN2_G) {
        put(slot::LN2_G, dg2);
    }
    if want_at(slot::LN2_B) {
        put(slot::LN2_B, db2);
    }
    let mut dz_mid = dout.clone();
    dz_mid.add_assign(&dz_ln2);

    let want_attn = (slot::WQ..=slot::WO).any(want_at);
    let g_attn = attention_backward(&tr.attn, &bw.attn(), &dz_mid, want_attn);
    if let Some(p) = g_attn.params {
        for (k, g) in p.into_iter().enumerate() {
            put(slot::WQ + k, g);
        }
    }
    let (dz_ln1, dg1, db1) = layer_norm_backward(&tr.ln1, bw.at(slot::LN1_G), &g_attn.dx);
    if want_at(slot::LN1_G) {
        put(slot::LN1_G, dg1);
    }
    if want_at(slot::LN1_B) {
        put(slot::LN1_B, db1);
    }
    let mut dz = dz_mid;
    dz.add_assign(&dz_ln1);
    (dz, grads)
}

/// Everything the encoder backward pass needs from the forward pass.
pub struct EncoderTrace {
    tokens: Tensor2,
    embedded: Tensor2,
    block: BlockTrace,
    block_out: Tensor2,
    gem: GemCache,
    pooled: Tensor2,
    norm: Vec<f64>,
    pub descriptor: Tensor2,
}

fn encoder_forward(w: &[&Tensor2], tokens: &Tensor2) -> Result<EncoderTrace> {
    if w.len() != slot::COUNT {
        return Err(Error::Contract(format!("encoder expects {} weights", slot::COUNT)));
    }
    if tokens.cols() != w[slot::EMBED_W].rows() {
        return Err(Error::shape(
            "encode",
            format!("tokens {:?} vs embedding {:?}", tokens.shape(), w[slot::EMBED_W].shape()),
        ));
    }
    let embedded = linear(tokens, w[slot::EMBED_W], Some(w[slot::EMBED_B]))?;
    let bw = BlockWeights::new(&w[slot::BLOCK]);
    let (block_out, block) = block_forward(&embedded, &bw)?;
    let (pooled, gem) = gem_pool(&block_out, w[slot::GEM_P].data()[0], ops::GEM_EPS)?;
    let projected = linear(&pooled, w[slot::PROJ], None)?;
    if !projected.is_finite() {
        return Err(Error::Numeric("non-finite activations in encoder".into()));
    }
    let (descriptor, norm) = l2_normalize(&projected)?;
    Ok(EncoderTrace {
        tokens: tokens.clone(),
        embedded,
        block,
        block_out,
        gem,
        pooled,
        norm,
        descriptor,
    })
}

/// Returns per-slot gradients (`None` where `want` is false) and the
/// gradient with respect to the input tokens.
fn encoder_backward(
    w: &[&Tensor2],
    tr: &EncoderTrace,
    d_desc: &Tensor2,
    want: &[bool],
) -> (Vec<Option<Tensor2>>, Tensor2) {
    let mut grads: Vec<Option<Tensor2>> = vec![None; slot::COUNT];
    let d_proj = l2_normalize_backward(&tr.descriptor, &tr.norm, d_desc);
    let (d_pooled, pg) = linear_backward(&tr.pooled, w[slot::PROJ], &d_proj, want[slot::PROJ]);
    if let Some((dw, _)) = pg {
        grads[slot::PROJ] = Some(dw);
    }
    let (d_block_out, dp) = gem_pool_backward(&tr.block_out, &tr.gem, &d_pooled, ops::GEM_EPS);
    if want[slot::GEM_P] {
        grads[slot::GEM_P] = Some(Tensor2::scalar(dp));
    }
    let bw = BlockWeights::new(&w[slot::BLOCK]);
    let (d_emb, block_grads) = block_backward(&bw, &tr.block, &d_block_out, &want[slot::BLOCK]);
    for (k, g) in block_grads.into_iter().enumerate() {
        grads[slot::LN1_G + k] = g;
    }
    let want_embed = want[slot::EMBED_W] || want[slot::EMBED_B];
    let (d_tokens, pg) = linear_backward(&tr.tokens, w[slot::EMBED_W], &d_emb, want_embed);
    if let Some((dw, db)) = pg {
        grads[slot::EMBED_W] = Some(dw);
        grads[slot::EMBED_B] = Some(db);
    }
    debug_assert_eq!(tr.embedded.rows(), d_emb.rows());
    (grads, d_tokens)
}

pub fn encode(tokens: &Tensor2, params: &EncoderParams) -> Result<Descriptor> {
    params.encode(tokens)
}

/// Element-wise [`encode`]; no interaction between batch members.
pub fn encode_batch<'a, I>(token_sets: I, params: &EncoderParams) -> Result<Vec<Descriptor>>
where
    I: IntoIterator<Item = &'a Tensor2>,
{
    token_sets
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            params.encode(t).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("batch item {i}: {m}")),
                Error::Shape { primitive, detail } => Error::Shape {
                    primitive,
                    detail: format!("batch item {i}: {detail}"),
                },
                other => other,
            })
        })
        .collect()
}

fn check_block_len(params: &[&Tensor2]) -> Result<()> {
    if params.len() != slot::BLOCK.len() {
        return Err(Error::shape(
            "adapter_block",
            format!("expected {} block params, got {}", slot::BLOCK.len(), params.len()),
        ));
    }
    Ok(())
}

/// The adapter block as a [`Primitive`]; `params` are the 17 block tensors
/// in slot order (`ln1.gamma` through `adapter.scale`).
pub struct AdapterBlock;

impl Primitive for AdapterBlock {
    fn name(&self) -> &'static str {
        "adapter_block"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        let refs: Vec<&Tensor2> = params.iter().collect();
        check_block_len(&refs)?;
        Ok(block_forward(input, &BlockWeights::new(&refs))?.0)
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        let refs: Vec<&Tensor2> = params.iter().collect();
        check_block_len(&refs)?;
        let bw = BlockWeights::new(&refs);
        let (_, tr) = block_forward(input, &bw)?;
        let (dz, grads) = block_backward(&bw, &tr, upstream, &[true; 17]);
        Ok(Gradients {
            input: dz,
            params: grads.into_iter().map(|g| g.expect("all requested")).collect(),
        })
    }
}

/// The whole encoder as a [`Primitive`] over token input and all 21 slots.
pub struct FullEncoder;

impl Primitive for FullEncoder {
    fn name(&self) -> &'static str {
        "encoder"
    }

    fn forward(&self, input: &Tensor2, params: &[Tensor2]) -> Result<Tensor2> {
        let refs: Vec<&Tensor2> = params.iter().collect();
        Ok(encoder_forward(&refs, input)?.descriptor)
    }

    fn backward(&self, input: &Tensor2, params: &[Tensor2], upstream: &Tensor2) -> Result<Gradients> {
        let refs: Vec<&Tensor2> = params.iter().collect();
        let tr = encoder_forward(&refs, input)?;
        let (grads, d_tokens) = encoder_backward(&refs, &tr, upstream, &[true; slot::COUNT]);
        Ok(Gradients {
            input: d_tokens,
            params: grads.into_iter().map(|g| g.expect("all requested")).collect(),
        })
    }
}
