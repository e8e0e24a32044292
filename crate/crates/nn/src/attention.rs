//! Multi-head scaled dot-product attention (self or cross) with a key mask.

use rand::Rng;

use crate::float::Float;
use crate::linear::Linear;
use crate::mat::{gemm, MatMut, MatRef};
use crate::param::{join, Module, Param};

#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache<T> {
    x: Vec<T>,
    ctx: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    batch: usize,
    n: usize,
    m: usize,
}

impl<T: Float> Attention<T> {
    /// `query_dim` is the width of the attending sequence and of the output;
    /// `ctx_dim` the width of the attended sequence.
    pub fn new<R: Rng + ?Sized>(query_dim: usize, ctx_dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && query_dim % heads == 0, "width {query_dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(query_dim, query_dim, true, rng),
            k: Linear::new(ctx_dim, query_dim, true, rng),
            v: Linear::new(ctx_dim, query_dim, true, rng),
            o: Linear::new(query_dim, query_dim, true, rng),
            heads,
            dim: query_dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `x` is `batch × n × query_dim`, `ctx` is `batch × m × ctx_dim`, `mask`
    /// (if any) is `batch × m` with `true` for attendable keys.
    pub fn forward(
        &self,
        x: &[T],
        ctx: &[T],
        mask: Option<&[bool]>,
        batch: usize,
        n: usize,
        m: usize,
    ) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim;
        let hd = self.head_dim();
        let h = self.heads;
        let q = self.q.forward(x, batch * n);
        let k = self.k.forward(ctx, batch * m);
        let v = self.v.forward(ctx, batch * m);
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut probs = vec![T::zero(); batch * h * n * m];
        let mut attn = vec![T::zero(); batch * n * d];
        for b in 0..batch {
            let keep = mask.map(|mk| &mk[b * m..(b + 1) * m]);
            for hh in 0..h {
                let p = &mut probs[(b * h + hh) * n * m..(b * h + hh + 1) * n * m];
                gemm(
                    scale,
                    MatRef::strided(&q[b * n * d + hh * hd..], n, hd, d, 1),
                    MatRef::strided(&k[b * m * d + hh * hd..], m, hd, d, 1).t(),
                    T::zero(),
                    MatMut::rm(p, n, m),
                );
                for row in p.chunks_exact_mut(m) {
                    masked_softmax(row, keep);
                }
                gemm(
                    T::one(),
                    MatRef::rm(p, n, m),
                    MatRef::strided(&v[b * m * d + hh * hd..], m, hd, d, 1),
                    T::zero(),
                    MatMut::strided(&mut attn[b * n * d + hh * hd..], n, hd, d, 1),
                );
            }
        }
        let y = self.o.forward(&attn, batch * n);
        let cache =
            AttentionCache { x: x.to_vec(), ctx: ctx.to_vec(), q, k, v, probs, attn, batch, n, m };
        (y, cache)
    }

    /// Returns `(dx, dctx)`; for self-attention the caller sums the two.
    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: &[T], train: bool) -> (Vec<T>, Vec<T>) {
        let AttentionCache { batch, n, m, .. } = *cache;
        let d = self.dim;
        let hd = self.head_dim();
        let h = self.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let dattn = self.o.backward(&cache.attn, dy, batch * n, train, true).expect("dx requested");
        let mut dq = vec![T::zero(); batch * n * d];
        let mut dk = vec![T::zero(); batch * m * d];
        let mut dv = vec![T::zero(); batch * m * d];
        let mut dp = vec![T::zero(); n * m];
        for b in 0..batch {
            for hh in 0..h {
                let p = &cache.probs[(b * h + hh) * n * m..(b * h + hh + 1) * n * m];
                let doh = MatRef::strided(&dattn[b * n * d + hh * hd..], n, hd, d, 1);
                gemm(
                    T::one(),
                    doh,
                    MatRef::strided(&cache.v[b * m * d + hh * hd..], m, hd, d, 1).t(),
                    T::zero(),
                    MatMut::rm(&mut dp, n, m),
                );
                gemm(
                    T::one(),
                    MatRef::rm(p, n, m).t(),
                    doh,
                    T::one(),
                    MatMut::strided(&mut dv[b * m * d + hh * hd..], m, hd, d, 1),
                );
                for (dprow, prow) in dp.chunks_exact_mut(m).zip(p.chunks_exact(m)) {
                    let dot: T = dprow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                    for (g, pv) in dprow.iter_mut().zip(prow) {
                        *g = *pv * (*g - dot);
                    }
                }
                gemm(
                    scale,
                    MatRef::rm(&dp, n, m),
                    MatRef::strided(&cache.k[b * m * d + hh * hd..], m, hd, d, 1),
                    T::one(),
                    MatMut::strided(&mut dq[b * n * d + hh * hd..], n, hd, d, 1),
                );
                gemm(
                    scale,
                    MatRef::rm(&dp, n, m).t(),
                    MatRef::strided(&cache.q[b * n * d + hh * hd..], n, hd, d, 1),
                    T::one(),
                    MatMut::strided(&mut dk[b * m * d + hh * hd..], m, hd, d, 1),
                );
            }
        }
        let dx = self.q.backward(&cache.x, &dq, batch * n, train, true).expect("dx requested");
        let mut dctx = self.k.backward(&cache.ctx, &dk, batch * m, train, true).expect("dx requested");
        let dctx_v = self.v.backward(&cache.ctx, &dv, batch * m, train, true).expect("dx requested");
        for (a, b) in dctx.iter_mut().zip(&dctx_v) {
            *a += *b;
        }
        (dx, dctx)
    }
}

fn masked_softmax<T: Float>(row: &mut [T], keep: Option<&[bool]>) {
    let allowed = |j: usize| keep.is_none_or(|k| k[j]);
    let mut max = T::neg_infinity();
    for (j, v) in row.iter().enumerate() {
        if allowed(j) && *v > max {
            max = *v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

impl<T: Float> Module<T> for Attention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}
