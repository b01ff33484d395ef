//! The trainable adapter: two intermediate transformer encoders refine the
//! shallow and region feature streams against the deep stream, the refined
//! streams are joined along tokens, and a timestep-aware Q-former compresses
//! them into a fixed number of context tokens.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::encoders::{ReferenceFeatures, StreamTag, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, EncoderBlock, LayerNorm, Linear, Mlp, MultiHeadAttention, INIT_STD};
use crate::params::{Init, ParamId, ParamStore, Partition};
use crate::tensor::{Float, Tensor};

const TRAINABLE: Partition = Partition::AdapterTrainable;

/// Input projection, learned positional table and a stack of encoder blocks.
#[derive(Debug, Clone)]
pub struct IntermediateEncoder {
    pub input_proj: Linear,
    pub positions: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub in_dim: usize,
    pub width: usize,
    pub max_tokens: usize,
}

impl IntermediateEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        heads: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: width {width} not divisible by {heads} heads")));
        }
        let init = Init::TruncNormal(INIT_STD);
        Ok(IntermediateEncoder {
            input_proj: Linear::new(store, &format!("{name}/input_proj"), in_dim, width, true, init, TRAINABLE, rng),
            positions: store.init(format!("{name}/positions"), &[max_tokens, width], init, TRAINABLE, rng),
            blocks: (0..depth)
                .map(|i| EncoderBlock::new(store, &format!("{name}/blocks/{i}"), width, heads, TRAINABLE, rng))
                .collect(),
            in_dim,
            width,
            max_tokens,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input_proj.params();
        p.push(self.positions);
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    /// `[pathway ; highlevel]` per sample, projected, position-coded and
    /// refined with bidirectional self-attention. All tokens are returned,
    /// pathway positions first.
    pub fn forward_graph<F: Float>(&self, g: &mut Graph<F>, pathway: Var, highlevel: Var, batch: usize) -> Var {
        let joined = g.concat_tokens(pathway, highlevel, batch);
        let tokens = g.value(joined).rows() / batch;
        assert!(tokens <= self.max_tokens, "{tokens} tokens exceed the positional table ({})", self.max_tokens);
        let x = self.input_proj.forward(g, joined);
        let pos = g.param(self.positions);
        let mut h = g.add_positional(x, pos, tokens);
        for block in &self.blocks {
            h = block.forward(g, h, batch);
        }
        h
    }
}

/// Refines one feature pathway against the high-level stream.
pub fn refine_pathway<F: Float>(
    store: &ParamStore<F>,
    encoder: &IntermediateEncoder,
    pathway: &TokenSequence<F>,
    highlevel: &TokenSequence<F>,
) -> Result<TokenSequence<F>> {
    if pathway.width() != highlevel.width() || pathway.width() != encoder.in_dim {
        return Err(Error::Shape(format!(
            "pathway width {} and high-level width {} must both equal the encoder input width {}",
            pathway.width(),
            highlevel.width(),
            encoder.in_dim
        )));
    }
    let total = pathway.len() + highlevel.len();
    if total > encoder.max_tokens {
        return Err(Error::Shape(format!("{total} tokens exceed the positional table ({})", encoder.max_tokens)));
    }
    let mut g = Graph::new(store);
    let p = g.input(pathway.tokens.clone());
    let h = g.input(highlevel.tokens.clone());
    let out = encoder.forward_graph(&mut g, p, h, 1);
    TokenSequence::new(g.value(out).clone(), StreamTag::FusedToken)
}

/// Joins two refined streams along the token axis, low-level stream first.
pub fn fuse_pathways<F: Float>(low: &TokenSequence<F>, region: &TokenSequence<F>) -> Result<TokenSequence<F>> {
    if low.width() != region.width() {
        return Err(Error::Shape(format!("pathway widths differ: {} vs {}", low.width(), region.width())));
    }
    let mut data = low.tokens.data.clone();
    data.extend_from_slice(&region.tokens.data);
    TokenSequence::new(Tensor::matrix(low.len() + region.len(), low.width(), data), StreamTag::FusedToken)
}

#[derive(Debug, Clone)]
pub struct QFormerBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// Learnable queries that cross-attend to the fused tokens. The timestep
/// embedding is added to every query before the first block; keys and values
/// carry no positional terms, so the output ignores the order of the fused
/// tokens.
#[derive(Debug, Clone)]
pub struct QFormerHead {
    pub queries: ParamId,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub blocks: Vec<QFormerBlock>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub num_queries: usize,
    pub width: usize,
    pub context_dim: usize,
}

impl QFormerHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        num_queries: usize,
        width: usize,
        blocks: usize,
        heads: usize,
        context_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_queries == 0 {
            return Err(Error::Config("the Q-former needs at least one query".into()));
        }
        if heads == 0 || !width.is_multiple_of(heads) || !width.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: width {width} not divisible by {heads} heads")));
        }
        let init = Init::TruncNormal(INIT_STD);
        let queries = store.init(format!("{name}/queries"), &[num_queries, width], Init::Normal(INIT_STD), TRAINABLE, rng);
        let time_fc1 = Linear::new(store, &format!("{name}/time_mlp/fc1"), width, width, true, init, TRAINABLE, rng);
        let time_fc2 = Linear::new(store, &format!("{name}/time_mlp/fc2"), width, width, true, init, TRAINABLE, rng);
        let blocks = (0..blocks)
            .map(|i| {
                let b = format!("{name}/blocks/{i}");
                QFormerBlock {
                    norm_q: LayerNorm::new(store, &format!("{b}/norm_q"), width, TRAINABLE, rng),
                    norm_kv: LayerNorm::new(store, &format!("{b}/norm_kv"), width, TRAINABLE, rng),
                    attn: MultiHeadAttention::new(store, &format!("{b}/cross_attn"), width, width, heads, init, TRAINABLE, rng),
                    norm_mlp: LayerNorm::new(store, &format!("{b}/norm_mlp"), width, TRAINABLE, rng),
                    mlp: Mlp::new(store, &format!("{b}/mlp"), width, 4 * width, TRAINABLE, rng),
                }
            })
            .collect();
        let out_proj = Linear::new(store, &format!("{name}/out_proj"), width, context_dim, true, init, TRAINABLE, rng);
        let out_norm = LayerNorm::new(store, &format!("{name}/out_norm"), context_dim, TRAINABLE, rng);
        Ok(QFormerHead { queries, time_fc1, time_fc2, blocks, out_norm, out_proj, num_queries, width, context_dim })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.queries];
        p.extend(self.time_fc1.params());
        p.extend(self.time_fc2.params());
        for b in &self.blocks {
            p.extend(b.norm_q.params());
            p.extend(b.norm_kv.params());
            p.extend(b.attn.params());
            p.extend(b.norm_mlp.params());
            p.extend(b.mlp.params());
        }
        p.extend(self.out_proj.params());
        p.extend(self.out_norm.params());
        p
    }

    /// `fused` is `[batch * T, width]`; `t` holds one timestep per sample.
    /// Returns `[batch * num_queries, context_dim]`.
    pub fn forward_graph<F: Float>(&self, g: &mut Graph<F>, fused: Var, t: &[F]) -> Var {
        let batch = t.len();
        let q = g.param(self.queries);
        let mut q = g.repeat_batch(q, batch);
        let temb = g.input(timestep_embedding(t, self.width));
        let temb = self.time_fc1.forward(g, temb);
        let temb = g.silu(temb);
        let temb = self.time_fc2.forward(g, temb);
        q = g.add_per_sample(q, temb);
        for block in &self.blocks {
            let qn = block.norm_q.forward(g, q);
            let kv = block.norm_kv.forward(g, fused);
            let a = block.attn.forward(g, qn, kv, batch);
            q = g.add(q, a);
            let h = block.norm_mlp.forward(g, q);
            let m = block.mlp.forward(g, h);
            q = g.add(q, m);
        }
        let out = self.out_proj.forward(g, q);
        self.out_norm.forward(g, out)
    }
}

/// `num_queries x context_dim` tokens injected into the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens<F = f32> {
    pub tokens: Tensor<F>,
}

fn check_timestep(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Runs the Q-former on one fused token sequence at timestep `t`.
pub fn project<F: Float>(
    store: &ParamStore<F>,
    head: &QFormerHead,
    fused: &TokenSequence<F>,
    t: F,
) -> Result<ContextTokens<F>> {
    check_timestep(t.to_f64().unwrap_or(f64::NAN))?;
    if fused.width() != head.width {
        return Err(Error::Shape(format!("fused width {} does not match the Q-former width {}", fused.width(), head.width)));
    }
    let mut g = Graph::new(store);
    let kv = g.input(fused.tokens.clone());
    let out = head.forward_graph(&mut g, kv, &[t]);
    let tokens = g.value(out).clone();
    if !tokens.is_finite() {
        return Err(Error::Numerical("Q-former produced non-finite context tokens".into()));
    }
    Ok(ContextTokens { tokens })
}

/// The full adapter: both intermediate encoders and the projection head.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub low: IntermediateEncoder,
    pub region: IntermediateEncoder,
    pub qformer: QFormerHead,
}

impl Adapter {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &RunConfig,
        fused_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let a = &cfg.adapter;
        let low = IntermediateEncoder::new(
            store,
            "adapter/intermediate_low",
            fused_width,
            a.width,
            a.depth,
            a.heads,
            a.max_tokens,
            rng,
        )?;
        let region = IntermediateEncoder::new(
            store,
            "adapter/intermediate_region",
            fused_width,
            a.width,
            a.depth,
            a.heads,
            a.max_tokens,
            rng,
        )?;
        let qformer =
            QFormerHead::new(store, "adapter/qformer", a.queries, a.width, a.qformer_blocks, a.heads, a.context_dim, rng)?;
        Ok(Adapter { low, region, qformer })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.low.params();
        p.extend(self.region.params());
        p.extend(self.qformer.params());
        p
    }

    /// Builds the context tokens for a batch of reference features.
    /// Returns `[batch * num_queries, context_dim]`.
    pub fn forward_graph<F: Float>(&self, g: &mut Graph<F>, feats: &ReferenceFeatures<F>, t: &[F]) -> Var {
        assert_eq!(feats.batch, t.len(), "one timestep per reference image");
        let batch = feats.batch;
        let shallow = g.input(feats.shallow.clone());
        let deep = g.input(feats.deep.clone());
        let region = g.input(feats.region.clone());
        let low = self.low.forward_graph(g, shallow, deep, batch);
        let reg = self.region.forward_graph(g, region, deep, batch);
        let fused = g.concat_tokens(low, reg, batch);
        self.qformer.forward_graph(g, fused, t)
    }

    /// Context tokens for each sample of `feats`, stacked along rows.
    pub fn context<F: Float>(&self, store: &ParamStore<F>, feats: &ReferenceFeatures<F>, t: &[F]) -> Result<Tensor<F>> {
        for tv in t {
            check_timestep(tv.to_f64().unwrap_or(f64::NAN))?;
        }
        let mut g = Graph::new(store);
        let out = self.forward_graph(&mut g, feats, t);
        let tokens = g.value(out).clone();
        if !tokens.is_finite() {
            return Err(Error::Numerical("adapter produced non-finite context tokens".into()));
        }
        Ok(tokens)
    }
}
