//! A small rectified-flow diffusion transformer over pixel patches.
//!
//! Each block runs self-attention over image tokens, cross-attention to the
//! caption's token embeddings, an optional adapter cross-attention to
//! context tokens, and a feed-forward layer. The base sublayers use
//! adaLN-Zero modulation from the timestep embedding. The adapter
//! cross-attention has a zero-initialized output projection and is added as
//! `hidden += gain * attn(...)` with one gain per sample, where a gain of
//! exactly zero leaves `hidden` untouched.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::dataset::VOCAB;
use crate::error::{Error, Result};
use crate::image::{patchify, unpatchify, ImageTensor};
use crate::nn::{grid_position_code, timestep_embedding, Linear, Mlp, MultiHeadAttention, INIT_STD};
use crate::params::{Init, ParamId, ParamStore, Partition};
use crate::tensor::{Float, Tensor};

const BASE: Partition = Partition::BaseFrozen;

/// Shift, scale and gate projections of the timestep embedding for one sublayer.
#[derive(Debug, Clone)]
pub struct AdaLn {
    pub shift: Linear,
    pub scale: Linear,
    pub gate: Option<Linear>,
}

impl AdaLn {
    fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, dim: usize, gate: bool, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore<F>, part: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}/{part}"), dim, dim, true, Init::Zeros, BASE, rng)
        };
        AdaLn {
            shift: lin(store, "shift", rng),
            scale: lin(store, "scale", rng),
            gate: gate.then(|| lin(store, "gate", rng)),
        }
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.shift.params();
        p.extend(self.scale.params());
        if let Some(g) = &self.gate {
            p.extend(g.params());
        }
        p
    }

    /// `LN(x) * (1 + scale) + shift` and the gate, all per sample.
    fn apply<F: Float>(&self, g: &mut Graph<F>, x: Var, cond: Var) -> (Var, Option<Var>) {
        let n = g.layer_norm(x, None, None);
        let shift = self.shift.forward(g, cond);
        let scale = self.scale.forward(g, cond);
        let m = g.modulate(n, shift, scale);
        let gate = self.gate.as_ref().map(|l| l.forward(g, cond));
        (m, gate)
    }
}

#[derive(Debug, Clone)]
pub struct DitBlock {
    pub self_mod: AdaLn,
    pub self_attn: MultiHeadAttention,
    pub text_mod: AdaLn,
    pub text_attn: MultiHeadAttention,
    pub ffn_mod: AdaLn,
    pub ffn: Mlp,
}

/// Learnable cross-attention from image tokens to context tokens.
#[derive(Debug, Clone)]
pub struct AdapterCrossAttention {
    pub attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
pub struct ToyDit {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub context_dim: usize,
    pub patch_embed: Linear,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub text_embed: ParamId,
    pub blocks: Vec<DitBlock>,
    pub adapter_xattn: Vec<AdapterCrossAttention>,
    pub final_mod: AdaLn,
    pub final_proj: Linear,
}

/// Context tokens for a batch plus one gain per sample (`scale` times a
/// keep flag). Samples with gain zero are unaffected by the adapter.
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a, F> {
    pub context: Var,
    pub gains: &'a [F],
}

/// `x_t = (1 - t) x0 + t eps` and `v = eps - x0`.
pub fn interpolate<F: Float>(x0: &Tensor<F>, eps: &Tensor<F>, t: F) -> Result<(Tensor<F>, Tensor<F>)> {
    if x0.shape != eps.shape {
        return Err(Error::Shape(format!("interpolate: x0 {:?} vs noise {:?}", x0.shape, eps.shape)));
    }
    let one_t = F::one() - t;
    let xt = x0.data.iter().zip(&eps.data).map(|(a, e)| one_t * *a + t * *e).collect();
    let v = x0.data.iter().zip(&eps.data).map(|(a, e)| *e - *a).collect();
    Ok((Tensor::new(x0.shape.clone(), xt), Tensor::new(x0.shape.clone(), v)))
}

/// [`interpolate`] with one timestep per batch element of a
/// `[batch * tokens, width]` tensor.
pub fn interpolate_batch<F: Float>(x0: &Tensor<F>, eps: &Tensor<F>, t: &[F]) -> Result<(Tensor<F>, Tensor<F>)> {
    if x0.shape != eps.shape || t.is_empty() || !x0.rows().is_multiple_of(t.len()) {
        return Err(Error::Shape(format!("interpolate: x0 {:?} vs noise {:?} over {} samples", x0.shape, eps.shape, t.len())));
    }
    let per = x0.numel() / t.len();
    let mut xt = Vec::with_capacity(x0.numel());
    let mut v = Vec::with_capacity(x0.numel());
    for (i, (a, e)) in x0.data.iter().zip(&eps.data).enumerate() {
        let tv = t[i / per];
        xt.push((F::one() - tv) * *a + tv * *e);
        v.push(*e - *a);
    }
    Ok((Tensor::new(x0.shape.clone(), xt), Tensor::new(x0.shape.clone(), v)))
}

pub fn gaussian<F: Float, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| F::lit(StandardNormal.sample(rng))).collect())
}

impl ToyDit {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let d = &cfg.dit;
        let (dim, heads) = (d.width, d.heads);
        if heads == 0 || dim % heads != 0 || dim % 4 != 0 {
            return Err(Error::Config(format!("DiT width {dim} must be divisible by {heads} heads and by 4")));
        }
        let init = Init::TruncNormal(INIT_STD);
        let pd = d.patch * d.patch * 3;
        let base = "dit/base";
        let patch_embed = Linear::new(store, &format!("{base}/patch_embed"), pd, dim, true, init, BASE, rng);
        let time_fc1 = Linear::new(store, &format!("{base}/time_mlp/fc1"), dim, dim, true, init, BASE, rng);
        let time_fc2 = Linear::new(store, &format!("{base}/time_mlp/fc2"), dim, dim, true, init, BASE, rng);
        let text_embed = store.init(format!("{base}/text_embed"), &[VOCAB.len(), dim], init, BASE, rng);
        let mut blocks = Vec::with_capacity(d.depth);
        for i in 0..d.depth {
            let b = format!("{base}/blocks/{i}");
            blocks.push(DitBlock {
                self_mod: AdaLn::new(store, &format!("{b}/self_mod"), dim, true, rng),
                self_attn: MultiHeadAttention::new(store, &format!("{b}/self_attn"), dim, dim, heads, init, BASE, rng),
                text_mod: AdaLn::new(store, &format!("{b}/text_mod"), dim, true, rng),
                text_attn: MultiHeadAttention::new(store, &format!("{b}/text_attn"), dim, dim, heads, init, BASE, rng),
                ffn_mod: AdaLn::new(store, &format!("{b}/ffn_mod"), dim, true, rng),
                ffn: Mlp::new(store, &format!("{b}/ffn"), dim, 4 * dim, BASE, rng),
            });
        }
        let adapter_xattn = (0..d.depth)
            .map(|i| AdapterCrossAttention {
                attn: MultiHeadAttention::new(
                    store,
                    &format!("dit/adapter_xattn/{i}"),
                    dim,
                    cfg.adapter.context_dim,
                    heads,
                    Init::Zeros,
                    Partition::AdapterTrainable,
                    rng,
                ),
            })
            .collect();
        let final_mod = AdaLn::new(store, &format!("{base}/final_mod"), dim, false, rng);
        let final_proj = Linear::new(store, &format!("{base}/final_proj"), dim, pd, true, Init::Zeros, BASE, rng);
        Ok(ToyDit {
            patch: d.patch,
            width: dim,
            heads,
            context_dim: cfg.adapter.context_dim,
            patch_embed,
            time_fc1,
            time_fc2,
            text_embed,
            blocks,
            adapter_xattn,
            final_mod,
            final_proj,
        })
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        let mut p = self.patch_embed.params();
        p.extend(self.time_fc1.params());
        p.extend(self.time_fc2.params());
        p.push(self.text_embed);
        for b in &self.blocks {
            p.extend(b.self_mod.params());
            p.extend(b.self_attn.params());
            p.extend(b.text_mod.params());
            p.extend(b.text_attn.params());
            p.extend(b.ffn_mod.params());
            p.extend(b.ffn.params());
        }
        p.extend(self.final_mod.params());
        p.extend(self.final_proj.params());
        p
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.adapter_xattn.iter().flat_map(|a| a.attn.params()).collect()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn tokens_for(&self, resolution: usize) -> usize {
        (resolution / self.patch).pow(2)
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        if resolution == 0 || !resolution.is_multiple_of(self.patch) {
            return Err(Error::InvalidInput(format!("resolution {resolution} is not a multiple of patch {}", self.patch)));
        }
        Ok(())
    }

    /// Velocity prediction on the graph.
    ///
    /// `x_t` is `[batch * tokens, patch_dim]` for a square `grid x grid`
    /// token layout, `t` has one entry per sample, and `text` holds
    /// `batch * caption_len` token ids.
    pub fn forward_graph<F: Float>(
        &self,
        g: &mut Graph<F>,
        x_t: Var,
        t: &[F],
        text: &[usize],
        injection: Option<Injection<'_, F>>,
    ) -> Var {
        let batch = t.len();
        let tokens = g.value(x_t).rows() / batch;
        let grid = (tokens as f64).sqrt().round() as usize;
        debug_assert_eq!(grid * grid, tokens);
        let temb = g.input(timestep_embedding(t, self.width));
        let c = self.time_fc1.forward(g, temb);
        let c = g.silu(c);
        let c = self.time_fc2.forward(g, c);
        let cond = g.silu(c);
        let x = self.patch_embed.forward(g, x_t);
        let pos = g.input(grid_position_code(grid, self.width));
        let mut h = g.add_positional(x, pos, tokens);
        let table = g.param(self.text_embed);
        let text_tokens = g.gather(table, text.to_vec());
        let injection = injection.filter(|inj| inj.gains.iter().any(|v| *v != F::zero()));
        for (block, xattn) in self.blocks.iter().zip(&self.adapter_xattn) {
            let (m, gate) = block.self_mod.apply(g, h, cond);
            let a = block.self_attn.forward(g, m, m, batch);
            h = g.gated_add(h, a, gate.expect("gated sublayer"));
            let (m, gate) = block.text_mod.apply(g, h, cond);
            let a = block.text_attn.forward(g, m, text_tokens, batch);
            h = g.gated_add(h, a, gate.expect("gated sublayer"));
            if let Some(inj) = injection {
                let n = g.layer_norm(h, None, None);
                let shift = block.text_mod.shift.forward(g, cond);
                let scale = block.text_mod.scale.forward(g, cond);
                let m = g.modulate(n, shift, scale);
                let a = xattn.attn.forward(g, m, inj.context, batch);
                h = g.row_gated_add(h, a, inj.gains.to_vec());
            }
            let (m, gate) = block.ffn_mod.apply(g, h, cond);
            let f = block.ffn.forward(g, m);
            h = g.gated_add(h, f, gate.expect("gated sublayer"));
        }
        let (m, _) = self.final_mod.apply(g, h, cond);
        self.final_proj.forward(g, m)
    }

    fn validate_text(&self, text: &[Vec<u32>]) -> Result<Vec<usize>> {
        let len = text.first().map(|c| c.len()).unwrap_or(0);
        if len == 0 || text.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidInput("captions in a batch must be non-empty and of equal length".into()));
        }
        let mut ids = Vec::with_capacity(text.len() * len);
        for id in text.iter().flatten() {
            if *id as usize >= VOCAB.len() {
                return Err(Error::InvalidInput(format!("token id {id} outside the {}-word vocabulary", VOCAB.len())));
            }
            ids.push(*id as usize);
        }
        Ok(ids)
    }

    /// Inference forward for a batch. `context` is `[batch * N_q, D_ctx]`;
    /// the adapter branch is skipped when it is absent or `scale == 0`.
    pub fn forward<F: Float>(
        &self,
        store: &ParamStore<F>,
        x_t: &Tensor<F>,
        t: &[F],
        text: &[Vec<u32>],
        context: Option<&Tensor<F>>,
        scale: F,
    ) -> Result<Tensor<F>> {
        if !scale.is_finite() {
            return Err(Error::InvalidInput("adapter scale must be finite".into()));
        }
        if text.len() != t.len() || x_t.cols() != self.patch_dim() || !x_t.rows().is_multiple_of(t.len().max(1)) {
            return Err(Error::Shape(format!(
                "forward: x_t {:?}, {} timesteps, {} captions",
                x_t.shape,
                t.len(),
                text.len()
            )));
        }
        let ids = self.validate_text(text)?;
        let mut g = Graph::new(store);
        let x = g.input(x_t.clone());
        let gains = vec![scale; t.len()];
        let injection = match context {
            Some(ctx) if ctx.cols() == self.context_dim => Some(Injection { context: g.input(ctx.clone()), gains: &gains }),
            Some(ctx) => {
                return Err(Error::Shape(format!("context width {} != {}", ctx.cols(), self.context_dim)));
            }
            None => None,
        };
        let out = self.forward_graph(&mut g, x, t, &ids, injection);
        let v = g.value(out).clone();
        if !v.is_finite() {
            return Err(Error::Numerical("velocity prediction is not finite".into()));
        }
        Ok(v)
    }

    /// Euler integration of the velocity field from pure noise at `t = 1`
    /// down to `t = 0`. `context_at(t)` supplies the context tokens for each
    /// step (the adapter is timestep-aware). Returns one image per caption.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<F: Float, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<F>,
        text: &[Vec<u32>],
        resolution: usize,
        steps: usize,
        scale: F,
        rng: &mut R,
        mut context_at: impl FnMut(F) -> Result<Option<Tensor<F>>>,
    ) -> Result<Vec<ImageTensor>> {
        if steps == 0 {
            return Err(Error::InvalidInput("sampling needs at least one step".into()));
        }
        self.check_resolution(resolution)?;
        let batch = text.len();
        let tokens = self.tokens_for(resolution);
        let mut x: Tensor<F> = gaussian(&[batch * tokens, self.patch_dim()], rng);
        let dt = F::lit(1.0 / steps as f64);
        for i in 0..steps {
            let t = F::lit(1.0 - i as f64 / steps as f64);
            let ctx = if scale == F::zero() { None } else { context_at(t)? };
            let v = self.forward(store, &x, &vec![t; batch], text, ctx.as_ref(), scale)?;
            for (xv, vv) in x.data.iter_mut().zip(&v.data) {
                *xv -= dt * *vv;
            }
        }
        let per = tokens * self.patch_dim();
        (0..batch)
            .map(|b| {
                let px = unpatchify(&x.data[b * per..(b + 1) * per], resolution, resolution, self.patch);
                ImageTensor::from_clamped(resolution, resolution, px.iter().map(|v| v.to_f64().unwrap() as f32).collect())
            })
            .collect()
    }

    /// Patch tokens `[batch * tokens, patch_dim]` of a batch of images.
    pub fn patchify_batch<F: Float>(&self, images: &[&ImageTensor]) -> Tensor<F> {
        let mut data = Vec::new();
        let mut rows = 0;
        for img in images {
            let px: Vec<F> = img.data().iter().map(|v| F::lit(*v as f64)).collect();
            let t = patchify(&px, img.height(), img.width(), self.patch);
            rows += t.rows();
            data.extend(t.data);
        }
        Tensor::matrix(rows, self.patch_dim(), data)
    }
}

/// Names of the backbone's frozen and trainable parameters.
pub fn partition_parameters<F: Float>(store: &ParamStore<F>) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut frozen = BTreeSet::new();
    let mut trainable = BTreeSet::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with("dit/")) {
        match p.partition {
            Partition::BaseFrozen => frozen.insert(p.name.clone()),
            Partition::AdapterTrainable => trainable.insert(p.name.clone()),
        };
    }
    (frozen, trainable)
}
