//! Tape-based reverse-mode automatic differentiation.
//!
//! Activations are 2-D `[rows, cols]` tensors. Batched sequence data is laid
//! out as `[batch * tokens, width]`, and ops that need the batch structure
//! (attention, per-sample modulation, token concatenation) take it explicitly.
//! Parameters are bound by reference from a [`ParamStore`]; only parameters
//! marked trainable for this graph receive gradients, and backward skips every
//! branch that cannot reach one.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Float, MatView, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<F>, rstd: Vec<F> },
    Modulate { x: Var, shift: Var, scale: Var, tokens: usize },
    Gate { h: Var, y: Var, gate: Var, tokens: usize },
    RowGate { h: Var, y: Var, gains: Vec<F>, tokens: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<F> },
    ConcatTokens { a: Var, b: Var, batch: usize },
    ConcatChannels { a: Var, b: Var },
    AddPositional { x: Var, pos: Var, tokens: usize },
    AddPerSample { x: Var, v: Var, tokens: usize },
    RepeatBatch { x: Var, batch: usize },
    Gather { table: Var, ids: Vec<usize> },
    MeanTokens { x: Var, tokens: usize },
    Mse { pred: Var, target: Vec<F> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    WeightedSum { x: Var, weights: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'s, F> {
    store: &'s ParamStore<F>,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to the trainable parameters of a graph.
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    pub grads: Vec<(ParamId, Tensor<F>)>,
}

impl<F: Float> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    let c = F::lit(0.797_884_560_802_865_4);
    let a = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (F::one() + th);
    let dy = half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<'s, F: Float> Graph<'s, F> {
    /// A graph in which no parameter receives gradients (inference).
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self::with_trainable(store, &[])
    }

    pub fn with_trainable(store: &'s ParamStore<F>, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Graph { store, trainable: mask, bound: vec![None; store.len()], nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.tensor(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter from the store (memoized per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.trainable[id.0];
        let v = self.push(Tensor { shape: Vec::new(), data: Vec::new() }, Op::Param(id), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// `x W (+ b)` with `W` laid out `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, inp) = (xv.rows(), xv.cols());
        assert_eq!(wv.shape.len(), 2, "linear weight must be 2-D");
        assert_eq!(wv.shape[0], inp, "linear input width {inp} vs weight {:?}", wv.shape);
        let out = wv.shape[1];
        let mut y = vec![F::zero(); rows * out];
        gemm(
            F::one(),
            &xv.data,
            MatView::dense(0, rows, inp, inp),
            &wv.data,
            MatView::dense(0, inp, out, out),
            F::zero(),
            &mut y,
            MatView::dense(0, rows, out, out),
        );
        if let Some(b) = b {
            let bv = &self.value(b).data;
            assert_eq!(bv.len(), out);
            for row in y.chunks_exact_mut(out) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += *bb;
                }
            }
        }
        let mut rg = self.rg(&[x, w]);
        if let Some(b) = b {
            rg |= self.rg(&[b]);
        }
        self.push(Tensor::matrix(rows, out, y), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.data.len(), bv.data.len(), "add shape mismatch {:?} vs {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(av.shape.clone(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| *v * c).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| gelu_parts(*v).0).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| *v * sigmoid(*v)).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::Silu(x), rg)
    }

    /// Layer norm over the last axis with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let eps = F::lit(LN_EPS);
        let inv_d = F::one() / F::from_usize(d).unwrap();
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (*v - mean) * rs;
            }
        }
        let mut y = xhat.clone();
        if let Some(g) = gamma {
            let gv = &self.value(g).data;
            assert_eq!(gv.len(), d);
            for row in y.chunks_exact_mut(d) {
                for (o, gg) in row.iter_mut().zip(gv) {
                    *o *= *gg;
                }
            }
        }
        if let Some(b) = beta {
            let bv = &self.value(b).data;
            assert_eq!(bv.len(), d);
            for row in y.chunks_exact_mut(d) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += *bb;
                }
            }
        }
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        let shape = self.value(x).shape.clone();
        self.push(Tensor::new(shape, y), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// `x * (1 + scale[b]) + shift[b]` with `x` laid out `[batch * tokens, d]`
    /// and `shift`, `scale` laid out `[batch, d]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let d = xv.cols();
        let batch = sh.rows();
        assert_eq!(sc.rows(), batch);
        assert_eq!(sh.cols(), d);
        let tokens = xv.rows() / batch;
        assert_eq!(tokens * batch, xv.rows());
        let mut y = vec![F::zero(); xv.data.len()];
        for b in 0..batch {
            let shr = &sh.data[b * d..(b + 1) * d];
            let scr = &sc.data[b * d..(b + 1) * d];
            for t in 0..tokens {
                let off = (b * tokens + t) * d;
                for j in 0..d {
                    y[off + j] = xv.data[off + j] * (F::one() + scr[j]) + shr[j];
                }
            }
        }
        let rg = self.rg(&[x, shift, scale]);
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, y), Op::Modulate { x, shift, scale, tokens }, rg)
    }

    /// `h + gate[b] * y` (elementwise per channel).
    pub fn gated_add(&mut self, h: Var, y: Var, gate: Var) -> Var {
        let (hv, yv, gv) = (self.value(h), self.value(y), self.value(gate));
        assert_eq!(hv.data.len(), yv.data.len());
        let d = hv.cols();
        let batch = gv.rows();
        let tokens = hv.rows() / batch;
        let mut out = hv.data.clone();
        for b in 0..batch {
            let g = &gv.data[b * d..(b + 1) * d];
            for t in 0..tokens {
                let off = (b * tokens + t) * d;
                for j in 0..d {
                    out[off + j] += g[j] * yv.data[off + j];
                }
            }
        }
        let rg = self.rg(&[h, y, gate]);
        let shape = hv.shape.clone();
        self.push(Tensor::new(shape, out), Op::Gate { h, y, gate, tokens }, rg)
    }

    /// `h + gains[b] * y` with constant per-sample gains. Rows of samples
    /// whose gain is exactly zero are copied from `h` untouched.
    pub fn row_gated_add(&mut self, h: Var, y: Var, gains: Vec<F>) -> Var {
        let (hv, yv) = (self.value(h), self.value(y));
        assert_eq!(hv.data.len(), yv.data.len());
        let d = hv.cols();
        let batch = gains.len();
        let tokens = hv.rows() / batch;
        assert_eq!(tokens * batch, hv.rows());
        let mut out = hv.data.clone();
        for (b, g) in gains.iter().enumerate() {
            if *g == F::zero() {
                continue;
            }
            let range = b * tokens * d..(b + 1) * tokens * d;
            for (o, v) in out[range.clone()].iter_mut().zip(&yv.data[range]) {
                *o += *g * *v;
            }
        }
        let rg = self.rg(&[h, y]);
        let shape = hv.shape.clone();
        self.push(Tensor::new(shape, out), Op::RowGate { h, y, gains, tokens }, rg)
    }

    /// Multi-head scaled dot-product attention. `q` is `[batch * tq, d]`,
    /// `k` and `v` are `[batch * tk, d]`; no masking, no positional terms.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.cols(), d, "attention value width");
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let tq = qv.rows() / batch;
        let tk = kv.rows() / batch;
        assert_eq!(tq * batch, qv.rows());
        assert_eq!(tk * batch, kv.rows());
        assert_eq!(vv.rows(), kv.rows());
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![F::zero(); batch * heads * tq * tk];
        let mut out = vec![F::zero(); batch * tq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let qo = b * tq * d + h * dh;
                let ko = b * tk * d + h * dh;
                gemm(
                    scale,
                    &qv.data,
                    MatView::dense(qo, tq, dh, d),
                    &kv.data,
                    MatView::dense(ko, tk, dh, d).t(),
                    F::zero(),
                    &mut probs,
                    MatView::dense(p_off, tq, tk, tk),
                );
                for row in probs[p_off..p_off + tq * tk].chunks_exact_mut(tk) {
                    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut s = F::zero();
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        s += *x;
                    }
                    let inv = F::one() / s;
                    for x in row.iter_mut() {
                        *x *= inv;
                    }
                }
                gemm(
                    F::one(),
                    &probs,
                    MatView::dense(p_off, tq, tk, tk),
                    &vv.data,
                    MatView::dense(ko, tk, dh, d),
                    F::zero(),
                    &mut out,
                    MatView::dense(qo, tq, dh, d),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Tensor::matrix(batch * tq, d, out), Op::Attention { q, k, v, batch, heads, probs }, rg)
    }

    /// Per-sample concatenation along the token axis: `[a_b ; b_b]` for each batch element.
    pub fn concat_tokens(&mut self, a: Var, b: Var, batch: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols();
        assert_eq!(bv.cols(), d, "token concatenation needs equal widths");
        let ta = av.rows() / batch;
        let tb = bv.rows() / batch;
        let mut out = Vec::with_capacity((ta + tb) * batch * d);
        for i in 0..batch {
            out.extend_from_slice(&av.data[i * ta * d..(i + 1) * ta * d]);
            out.extend_from_slice(&bv.data[i * tb * d..(i + 1) * tb * d]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(batch * (ta + tb), d, out), Op::ConcatTokens { a, b, batch }, rg)
    }

    /// Row-wise concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.rows();
        assert_eq!(bv.rows(), rows, "channel concatenation needs equal token counts");
        let (da, db) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(rows, da + db, out), Op::ConcatChannels { a, b }, rg)
    }

    /// Adds the first `tokens` rows of `pos` to every batch element of `x`.
    pub fn add_positional(&mut self, x: Var, pos: Var, tokens: usize) -> Var {
        let (xv, pv) = (self.value(x), self.value(pos));
        let d = xv.cols();
        assert_eq!(pv.cols(), d);
        assert!(pv.rows() >= tokens, "positional table has {} rows, need {tokens}", pv.rows());
        assert_eq!(xv.rows() % tokens, 0);
        let mut out = xv.data.clone();
        for chunk in out.chunks_exact_mut(tokens * d) {
            for (o, p) in chunk.iter_mut().zip(&pv.data[..tokens * d]) {
                *o += *p;
            }
        }
        let rg = self.rg(&[x, pos]);
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, out), Op::AddPositional { x, pos, tokens }, rg)
    }

    /// Adds row `b` of `v` (`[batch, d]`) to every token of batch element `b`.
    pub fn add_per_sample(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let d = xv.cols();
        assert_eq!(vv.cols(), d);
        let batch = vv.rows();
        let tokens = xv.rows() / batch;
        assert_eq!(tokens * batch, xv.rows());
        let mut out = xv.data.clone();
        for b in 0..batch {
            let row = &vv.data[b * d..(b + 1) * d];
            for t in 0..tokens {
                let off = (b * tokens + t) * d;
                for j in 0..d {
                    out[off + j] += row[j];
                }
            }
        }
        let rg = self.rg(&[x, v]);
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, out), Op::AddPerSample { x, v, tokens }, rg)
    }

    /// Tiles a `[tokens, d]` block `batch` times.
    pub fn repeat_batch(&mut self, x: Var, batch: usize) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(batch * rows * d);
        for _ in 0..batch {
            out.extend_from_slice(&xv.data);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(batch * rows, d, out), Op::RepeatBatch { x, batch }, rg)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            assert!(i < tv.rows(), "embedding index {i} out of range");
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        let n = ids.len();
        self.push(Tensor::matrix(n, d, out), Op::Gather { table, ids }, rg)
    }

    /// Mean over the token axis: `[batch * tokens, d]` to `[batch, d]`.
    pub fn mean_tokens(&mut self, x: Var, batch: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let tokens = xv.rows() / batch;
        let inv = F::one() / F::from_usize(tokens).unwrap();
        let mut out = vec![F::zero(); batch * d];
        for b in 0..batch {
            for t in 0..tokens {
                let off = (b * tokens + t) * d;
                for j in 0..d {
                    out[b * d + j] += xv.data[off + j];
                }
            }
            for j in 0..d {
                out[b * d + j] *= inv;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(batch, d, out), Op::MeanTokens { x, tokens }, rg)
    }

    /// Mean squared error against a constant target (scalar output).
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.data.len(), target.data.len(), "mse shape mismatch");
        let n = F::from_usize(pv.data.len()).unwrap();
        let loss = pv.data.iter().zip(&target.data).map(|(p, t)| (*p - *t) * (*p - *t)).sum::<F>() / n;
        let rg = self.rg(&[pred]);
        self.push(Tensor::new(vec![1], vec![loss]), Op::Mse { pred, target: target.data.clone() }, rg)
    }

    /// Mean softmax cross-entropy over rows of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        assert_eq!(rows, labels.len());
        let mut probs = vec![F::zero(); rows * c];
        let mut loss = F::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|x| (*x - m).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - m).exp() / s;
            }
            loss += -(row[labels[r]] - m - s.ln());
        }
        loss = loss / F::from_usize(rows).unwrap();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::new(vec![1], vec![loss]),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        )
    }

    /// `sum(x * weights)` for a constant weight tensor (scalar output).
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<F>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.data.len(), weights.data.len());
        let s = xv.data.iter().zip(&weights.data).map(|(a, b)| *a * *b).sum::<F>();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1], vec![s]), Op::WeightedSum { x, weights: weights.data.clone() }, rg)
    }

    /// Reverse pass from a scalar root. Returns gradients for every trainable
    /// parameter that participated in the graph (zeros if reachable but
    /// unaffected).
    pub fn backward(&self, root: Var) -> ParamGrads<F> {
        let n = self.nodes.len();
        assert_eq!(self.value(root).data.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep = matches!(self.nodes[i].op, Op::Param(_));
            self.backprop_node(i, &g, &mut grads);
            if keep {
                grads[i] = Some(g);
            }
        }
        let mut out = Vec::new();
        for (pid, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if self.trainable[pid] {
                    let shape = self.store.tensor(ParamId(pid)).shape.clone();
                    let numel = shape.iter().product();
                    let data = grads[v.0].take().unwrap_or_else(|| vec![F::zero(); numel]);
                    out.push((ParamId(pid), Tensor::new(shape, data)));
                }
            }
        }
        ParamGrads { grads: out }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.value(v).data.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, inp) = (xv.rows(), xv.cols());
                let out = wv.shape[1];
                self.accumulate(grads, *x, |gx| {
                    gemm(
                        F::one(),
                        g,
                        MatView::dense(0, rows, out, out),
                        &wv.data,
                        MatView::dense(0, inp, out, out).t(),
                        F::one(),
                        gx,
                        MatView::dense(0, rows, inp, inp),
                    );
                });
                self.accumulate(grads, *w, |gw| {
                    gemm(
                        F::one(),
                        &xv.data,
                        MatView::dense(0, rows, inp, inp).t(),
                        g,
                        MatView::dense(0, rows, out, out),
                        F::one(),
                        gw,
                        MatView::dense(0, inp, out, out),
                    );
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for row in g.chunks_exact(out) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += *v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |ga| {
                        for (o, x) in ga.iter_mut().zip(g) {
                            *o += *x;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += *v * *c;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |gx| {
                    for ((o, v), xx) in gx.iter_mut().zip(g).zip(xv) {
                        *o += *v * gelu_parts(*xx).1;
                    }
                });
            }
            Op::Silu(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |gx| {
                    for ((o, v), xx) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(*xx);
                        *o += *v * s * (F::one() + *xx * (F::one() - s));
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*x).cols();
                let rows = rstd.len();
                if let Some(gm) = gamma {
                    self.accumulate(grads, *gm, |gg| {
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if let Some(bt) = beta {
                    self.accumulate(grads, *bt, |gb| {
                        for row in g.chunks_exact(d) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += *v;
                            }
                        }
                    });
                }
                let gamma_v = gamma.map(|gm| &self.value(gm).data);
                let inv_d = F::one() / F::from_usize(d).unwrap();
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rows {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..d {
                            let gv = g[r * d + j];
                            let v = match gamma_v {
                                Some(gm) => gv * gm[j],
                                None => gv,
                            };
                            dxhat[j] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * d + j];
                        }
                        mean_d *= inv_d;
                        mean_dx *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Modulate { x, shift, scale, tokens } => {
                let (xv, sc) = (self.value(*x), self.value(*scale));
                let d = xv.cols();
                let batch = sc.rows();
                let tokens = *tokens;
                self.accumulate(grads, *x, |gx| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let off = (b * tokens + t) * d;
                            for j in 0..d {
                                gx[off + j] += g[off + j] * (F::one() + sc.data[b * d + j]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *scale, |gs| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let off = (b * tokens + t) * d;
                            for j in 0..d {
                                gs[b * d + j] += g[off + j] * xv.data[off + j];
                            }
                        }
                    }
                });
                self.accumulate(grads, *shift, |gsh| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let off = (b * tokens + t) * d;
                            for j in 0..d {
                                gsh[b * d + j] += g[off + j];
                            }
                        }
                    }
                });
            }
            Op::Gate { h, y, gate, tokens } => {
                let (yv, gv) = (self.value(*y), self.value(*gate));
                let d = yv.cols();
                let batch = gv.rows();
                let tokens = *tokens;
                self.accumulate(grads, *h, |gh| {
                    for (o, v) in gh.iter_mut().zip(g) {
                        *o += *v;
                    }
                });
                self.accumulate(grads, *y, |gy| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let off = (b * tokens + t) * d;
                            for j in 0..d {
                                gy[off + j] += g[off + j] * gv.data[b * d + j];
                            }
                        }
                    }
                });
                self.accumulate(grads, *gate, |gg| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let off = (b * tokens + t) * d;
                            for j in 0..d {
                                gg[b * d + j] += g[off + j] * yv.data[off + j];
                            }
                        }
                    }
                });
            }
            Op::RowGate { h, y, gains, tokens } => {
                let d = self.value(*h).cols();
                let span = tokens * d;
                self.accumulate(grads, *h, |gh| {
                    for (o, v) in gh.iter_mut().zip(g) {
                        *o += *v;
                    }
                });
                self.accumulate(grads, *y, |gy| {
                    for (b, gain) in gains.iter().enumerate() {
                        if *gain == F::zero() {
                            continue;
                        }
                        for k in b * span..(b + 1) * span {
                            gy[k] += *gain * g[k];
                        }
                    }
                });
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let (batch, heads) = (*batch, *heads);
                let tq = qv.rows() / batch;
                let tk = kv.rows() / batch;
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                let need_q = self.nodes[q.0].requires_grad;
                let need_k = self.nodes[k.0].requires_grad;
                let need_v = self.nodes[v.0].requires_grad;
                let mut dq = if need_q { vec![F::zero(); qv.data.len()] } else { Vec::new() };
                let mut dk = if need_k { vec![F::zero(); kv.data.len()] } else { Vec::new() };
                let mut dv = if need_v { vec![F::zero(); vv.data.len()] } else { Vec::new() };
                let mut ds = vec![F::zero(); tq * tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_off = (b * heads + h) * tq * tk;
                        let qo = b * tq * d + h * dh;
                        let ko = b * tk * d + h * dh;
                        let pview = MatView::dense(p_off, tq, tk, tk);
                        if need_v {
                            gemm(
                                F::one(),
                                probs,
                                pview.t(),
                                g,
                                MatView::dense(qo, tq, dh, d),
                                F::one(),
                                &mut dv,
                                MatView::dense(ko, tk, dh, d),
                            );
                        }
                        if !(need_q || need_k) {
                            continue;
                        }
                        gemm(
                            F::one(),
                            g,
                            MatView::dense(qo, tq, dh, d),
                            &vv.data,
                            MatView::dense(ko, tk, dh, d).t(),
                            F::zero(),
                            &mut ds,
                            MatView::dense(0, tq, tk, tk),
                        );
                        for r in 0..tq {
                            let prow = &probs[p_off + r * tk..p_off + (r + 1) * tk];
                            let drow = &mut ds[r * tk..(r + 1) * tk];
                            let dot: F = prow.iter().zip(drow.iter()).map(|(p, x)| *p * *x).sum();
                            for (x, p) in drow.iter_mut().zip(prow) {
                                *x = *p * (*x - dot) * scale;
                            }
                        }
                        if need_q {
                            gemm(
                                F::one(),
                                &ds,
                                MatView::dense(0, tq, tk, tk),
                                &kv.data,
                                MatView::dense(ko, tk, dh, d),
                                F::one(),
                                &mut dq,
                                MatView::dense(qo, tq, dh, d),
                            );
                        }
                        if need_k {
                            gemm(
                                F::one(),
                                &ds,
                                MatView::dense(0, tq, tk, tk).t(),
                                &qv.data,
                                MatView::dense(qo, tq, dh, d),
                                F::one(),
                                &mut dk,
                                MatView::dense(ko, tk, dh, d),
                            );
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if !buf.is_empty() {
                        self.accumulate(grads, *var, |gx| {
                            for (o, x) in gx.iter_mut().zip(&buf) {
                                *o += *x;
                            }
                        });
                    }
                }
            }
            Op::ConcatTokens { a, b, batch } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                let ta = av.rows() / batch;
                let tb = bv.rows() / batch;
                let per = (ta + tb) * d;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..*batch {
                        for (o, x) in ga[i * ta * d..(i + 1) * ta * d].iter_mut().zip(&g[i * per..i * per + ta * d]) {
                            *o += *x;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..*batch {
                        for (o, x) in gb[i * tb * d..(i + 1) * tb * d]
                            .iter_mut()
                            .zip(&g[i * per + ta * d..(i + 1) * per])
                        {
                            *o += *x;
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let (da, db) = (self.value(*a).cols(), self.value(*b).cols());
                let w = da + db;
                self.accumulate(grads, *a, |ga| {
                    for (r, row) in g.chunks_exact(w).enumerate() {
                        for (o, x) in ga[r * da..(r + 1) * da].iter_mut().zip(&row[..da]) {
                            *o += *x;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (r, row) in g.chunks_exact(w).enumerate() {
                        for (o, x) in gb[r * db..(r + 1) * db].iter_mut().zip(&row[da..]) {
                            *o += *x;
                        }
                    }
                });
            }
            Op::AddPositional { x, pos, tokens } => {
                let d = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += *v;
                    }
                });
                self.accumulate(grads, *pos, |gp| {
                    for chunk in g.chunks_exact(tokens * d) {
                        for (o, v) in gp[..tokens * d].iter_mut().zip(chunk) {
                            *o += *v;
                        }
                    }
                });
            }
            Op::AddPerSample { x, v, tokens } => {
                let d = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (o, val) in gx.iter_mut().zip(g) {
                        *o += *val;
                    }
                });
                self.accumulate(grads, *v, |gv| {
                    for (r, row) in g.chunks_exact(d).enumerate() {
                        let b = r / tokens;
                        for (o, val) in gv[b * d..(b + 1) * d].iter_mut().zip(row) {
                            *o += *val;
                        }
                    }
                });
            }
            Op::RepeatBatch { x, batch } => {
                let n = self.value(*x).data.len();
                self.accumulate(grads, *x, |gx| {
                    for b in 0..*batch {
                        for (o, v) in gx.iter_mut().zip(&g[b * n..(b + 1) * n]) {
                            *o += *v;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += *v;
                        }
                    }
                });
            }
            Op::MeanTokens { x, tokens } => {
                let d = self.value(*x).cols();
                let inv = F::one() / F::from_usize(*tokens).unwrap();
                self.accumulate(grads, *x, |gx| {
                    for (r, row) in gx.chunks_exact_mut(d).enumerate() {
                        let b = r / tokens;
                        for (o, v) in row.iter_mut().zip(&g[b * d..(b + 1) * d]) {
                            *o += *v * inv;
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pv = &self.value(*pred).data;
                let c = F::lit(2.0) * g[0] / F::from_usize(pv.len()).unwrap();
                self.accumulate(grads, *pred, |gp| {
                    for ((o, p), t) in gp.iter_mut().zip(pv).zip(target) {
                        *o += c * (*p - *t);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let rows = labels.len();
                let scale = g[0] / F::from_usize(rows).unwrap();
                self.accumulate(grads, *logits, |gl| {
                    for r in 0..rows {
                        for j in 0..c {
                            let onehot = if j == labels[r] { F::one() } else { F::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, w) in gx.iter_mut().zip(weights) {
                        *o += g[0] * *w;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Partition};
    use rand::SeedableRng;

    /// Builds a graph for `f` and compares its analytic gradient with central
    /// differences on every parameter entry.
    fn check<Fw>(store: &mut ParamStore<f64>, f: Fw) -> f64
    where
        Fw: Fn(&mut Graph<f64>) -> Var,
    {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let grads = {
            let mut g = Graph::with_trainable(store, &ids);
            let root = f(&mut g);
            g.backward(root)
        };
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (id, grad) in &grads.grads {
            for k in 0..grad.data.len() {
                let orig = store.tensor(*id).data[k];
                store.tensor_mut(*id).data[k] = orig + eps;
                let plus = {
                    let mut g = Graph::new(store);
                    let r = f(&mut g);
                    g.value(r).data[0]
                };
                store.tensor_mut(*id).data[k] = orig - eps;
                let minus = {
                    let mut g = Graph::new(store);
                    let r = f(&mut g);
                    g.value(r).data[0]
                };
                store.tensor_mut(*id).data[k] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let an = grad.data[k];
                let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn store_with(shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.init(*name, shape, Init::Normal(0.7), Partition::AdapterTrainable, &mut rng);
        }
        s
    }

    fn weights(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n], Init::Normal(1.0).sample(n, &mut rng))
    }

    #[test]
    fn attention_layer_norm_and_linear_gradients() {
        let mut s = store_with(&[
            ("x", &[6, 8]),
            ("kv", &[4, 8]),
            ("w", &[8, 8]),
            ("b", &[8]),
            ("gamma", &[8]),
            ("beta", &[8]),
        ]);
        let ids: Vec<_> = (0..6).map(ParamId).collect();
        let wsum = weights(6 * 8, 9);
        let err = check(&mut s, |g| {
            let x = g.param(ids[0]);
            let kv = g.param(ids[1]);
            let w = g.param(ids[2]);
            let b = g.param(ids[3]);
            let gamma = g.param(ids[4]);
            let beta = g.param(ids[5]);
            let n = g.layer_norm(x, Some(gamma), Some(beta));
            let q = g.linear(n, w, Some(b));
            let k = g.linear(kv, w, None);
            let a = g.attention(q, k, kv, 2, 2);
            let y = g.gelu(a);
            let z = g.silu(y);
            g.weighted_sum(z, &wsum)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn structural_ops_gradients() {
        let mut s = store_with(&[
            ("x", &[6, 4]),
            ("shift", &[2, 4]),
            ("scale", &[2, 4]),
            ("gate", &[2, 4]),
            ("pos", &[5, 4]),
            ("table", &[7, 4]),
            ("q", &[2, 4]),
            ("y", &[6, 4]),
        ]);
        let ids: Vec<_> = (0..8).map(ParamId).collect();
        let target = weights(2 * 5 * 8, 4);
        let err = check(&mut s, |g| {
            let x = g.param(ids[0]);
            let shift = g.param(ids[1]);
            let scale = g.param(ids[2]);
            let m = g.modulate(x, shift, scale);
            let y = g.param(ids[7]);
            let gate = g.param(ids[3]);
            let gt = g.gated_add(m, y, gate);
            let rg = g.row_gated_add(gt, y, vec![0.5, 0.0]);
            let pos = g.param(ids[4]);
            let p = g.add_positional(rg, pos, 3);
            let table = g.param(ids[5]);
            let e = g.gather(table, vec![1, 3, 3, 0]);
            let cat = g.concat_tokens(p, e, 2);
            let queries = g.param(ids[6]);
            let qr = g.repeat_batch(queries, 2);
            let sm = g.mean_tokens(qr, 2);
            let cat2 = g.add_per_sample(cat, sm);
            let wide = g.concat_channels(cat2, cat2);
            let sc = g.scale(wide, 1.5);
            let t = Tensor::new(vec![10, 8], target.data.clone());
            g.mse(sc, &t)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut s = store_with(&[("logits", &[3, 5])]);
        let err = check(&mut s, |g| {
            let l = g.param(ParamId(0));
            g.cross_entropy(l, &[0, 4, 2])
        });
        assert!(err < 1e-6);
    }

    #[test]
    fn frozen_parameters_get_no_gradient_entry() {
        let s = store_with(&[("a", &[2, 2]), ("b", &[2, 2])]);
        let mut g = Graph::with_trainable(&s, &[ParamId(0)]);
        let a = g.param(ParamId(0));
        let b = g.param(ParamId(1));
        let y = g.linear(a, b, None);
        let r = g.weighted_sum(y, &Tensor::full(&[4], 1.0));
        let grads = g.backward(r);
        assert_eq!(grads.grads.len(), 1);
        assert_eq!(grads.grads[0].0, ParamId(0));
    }

    #[test]
    fn row_gate_with_zero_gain_copies_exactly() {
        let s = store_with(&[("h", &[4, 3]), ("y", &[4, 3])]);
        let mut g = Graph::new(&s);
        let h = g.param(ParamId(0));
        let y = g.param(ParamId(1));
        let out = g.row_gated_add(h, y, vec![0.0, 0.0]);
        assert!(g.value(out).bit_eq(s.tensor(ParamId(0))));
    }

    #[test]
    fn softmax_rows_sum_to_one_in_attention_output_of_constant_values() {
        // With all value rows equal, attention returns that row regardless of scores.
        let mut s = ParamStore::<f64>::new();
        let q = s.insert("q", Tensor::new(vec![3, 4], (0..12).map(|x| x as f64 * 0.3).collect()), Partition::BaseFrozen);
        let k = s.insert("k", Tensor::new(vec![5, 4], (0..20).map(|x| (x as f64).cos()).collect()), Partition::BaseFrozen);
        let v = s.insert("v", Tensor::new(vec![5, 4], [1.0, -2.0, 3.0, 0.5].repeat(5)), Partition::BaseFrozen);
        let mut g = Graph::new(&s);
        let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
        let o = g.attention(qv, kv, vv, 1, 2);
        for row in g.value(o).data.chunks(4) {
            for (a, b) in row.iter().zip([1.0, -2.0, 3.0, 0.5]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
