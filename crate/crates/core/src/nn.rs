//! Parameterized layers built on the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore, Partition};
use crate::tensor::{Float, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(format!("{name}/weight"), &[in_dim, out_dim], init, partition, rng);
        let bias = bias.then(|| store.init(format!("{name}/bias"), &[out_dim], Init::Zeros, partition, rng));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        LayerNorm {
            gamma: store.init(format!("{name}/gamma"), &[dim], Init::Ones, partition, rng),
            beta: store.init(format!("{name}/beta"), &[dim], Init::Zeros, partition, rng),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, Some(gamma), Some(beta))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head attention with separate query/key/value/output projections.
/// Used both as self-attention (`context == x`) and cross-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        out_init: Init,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "{name}: width {dim} not divisible by {heads} heads");
        let init = Init::TruncNormal(INIT_STD);
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}/q"), dim, dim, true, init, partition, rng),
            k: Linear::new(store, &format!("{name}/k"), context_dim, dim, true, init, partition, rng),
            v: Linear::new(store, &format!("{name}/v"), context_dim, dim, true, init, partition, rng),
            o: Linear::new(store, &format!("{name}/o"), dim, dim, true, out_init, partition, rng),
            heads,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var, context: Var, batch: usize) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let a = g.attention(q, k, v, batch, self.heads);
        self.o.forward(g, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        let init = Init::TruncNormal(INIT_STD);
        Mlp {
            fc1: Linear::new(store, &format!("{name}/fc1"), dim, hidden, true, init, partition, rng),
            fc2: Linear::new(store, &format!("{name}/fc2"), hidden, dim, true, init, partition, rng),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Pre-norm transformer encoder block with bidirectional self-attention.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}/norm1"), dim, partition, rng),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}/attn"),
                dim,
                dim,
                heads,
                Init::TruncNormal(INIT_STD),
                partition,
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}/norm2"), dim, partition, rng),
            mlp: Mlp::new(store, &format!("{name}/mlp"), dim, 4 * dim, partition, rng),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var, batch: usize) -> Var {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h, batch);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.mlp.params());
        p
    }
}

/// Sinusoidal embedding of scalar timesteps `t` in `[0, 1]`, scaled by 1000
/// so the frequencies span the unit interval. Output `[t.len(), dim]`.
pub fn timestep_embedding<F: Float>(t: &[F], dim: usize) -> Tensor<F> {
    assert_eq!(dim % 2, 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let x = tv.to_f64().unwrap() * 1000.0;
        let mut row = vec![F::zero(); dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = F::lit((x * freq).cos());
            row[half + i] = F::lit((x * freq).sin());
        }
        out.extend(row);
    }
    Tensor::matrix(t.len(), dim, out)
}

/// Fixed 2-D sine/cosine position code for a `grid x grid` token layout,
/// evaluated at normalized patch centres so it is defined for any grid size.
pub fn grid_position_code<F: Float>(grid: usize, dim: usize) -> Tensor<F> {
    assert_eq!(dim % 4, 0, "position code width must be divisible by 4");
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            let cy = (gy as f64 + 0.5) / grid as f64;
            let cx = (gx as f64 + 0.5) / grid as f64;
            let mut row = Vec::with_capacity(dim);
            for c in [cy, cx] {
                for i in 0..quarter {
                    let freq = std::f64::consts::PI * 2f64.powf(i as f64 * 6.0 / quarter as f64);
                    row.push(F::lit((c * freq).sin()));
                    row.push(F::lit((c * freq).cos()));
                }
            }
            out.extend(row);
        }
    }
    Tensor::matrix(grid * grid, dim, out)
}
