//! Pre-norm transformer block with optional cross-attention and an optional
//! per-sample conditioning bias (used for diffusion timesteps).

use rand::Rng;

use crate::act::{add, add_assign, add_broadcast_rows, silu, silu_backward, sum_broadcast_rows};
use crate::attention::{Attention, AttentionCache};
use crate::float::Float;
use crate::linear::Linear;
use crate::norm::{LayerNorm, LayerNormCache};
use crate::param::{join, Module, Param};

#[derive(Clone, Debug)]
pub struct CrossAttention<T> {
    pub norm: LayerNorm<T>,
    pub attn: Attention<T>,
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub cross: Option<CrossAttention<T>>,
    pub norm3: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub cond: Option<Linear<T>>,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the attended context, if the block cross-attends.
    pub ctx_dim: Option<usize>,
    /// Width of the per-sample conditioning vector, if any.
    pub cond_dim: Option<usize>,
}

/// Context sequence for cross-attention: `batch × len × width` plus key mask.
#[derive(Clone, Copy)]
pub struct Context<'a, T> {
    pub values: &'a [T],
    pub mask: Option<&'a [bool]>,
    pub len: usize,
}

pub struct BlockCache<T> {
    cond: Option<Vec<T>>,
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    cross: Option<(LayerNormCache<T>, AttentionCache<T>)>,
    ln3: LayerNormCache<T>,
    h3: Vec<T>,
    u: Vec<T>,
    s: Vec<T>,
    batch: usize,
    n: usize,
}

pub struct BlockGrads<T> {
    pub dx: Vec<T>,
    pub dctx: Option<Vec<T>>,
    pub dcond: Option<Vec<T>>,
}

impl<T: Float> Block<T> {
    pub fn new<R: Rng + ?Sized>(spec: BlockSpec, rng: &mut R) -> Self {
        let d = spec.dim;
        let hidden = d * spec.mlp_ratio;
        let mut fc2 = Linear::new(hidden, d, true, rng);
        // Residual branches start small so deep stacks begin near identity.
        fc2.weight.value.iter_mut().for_each(|w| *w *= T::lit(0.5));
        Self {
            norm1: LayerNorm::new(d),
            attn: Attention::new(d, d, spec.heads, rng),
            cross: spec.ctx_dim.map(|c| CrossAttention {
                norm: LayerNorm::new(d),
                attn: Attention::new(d, c, spec.heads, rng),
            }),
            norm3: LayerNorm::new(d),
            fc1: Linear::new(d, hidden, true, rng),
            fc2,
            cond: spec.cond_dim.map(|c| Linear::new(c, d, true, rng)),
            dim: d,
        }
    }

    /// `x` is `batch × n × dim`; `key_mask` masks self-attention keys.
    pub fn forward(
        &self,
        x: &[T],
        batch: usize,
        n: usize,
        key_mask: Option<&[bool]>,
        ctx: Option<Context<'_, T>>,
        cond: Option<&[T]>,
    ) -> (Vec<T>, BlockCache<T>) {
        let d = self.dim;
        let rows = batch * n;
        let mut x0 = x.to_vec();
        let cond_cache = match (&self.cond, cond) {
            (Some(lin), Some(c)) => {
                let bias = lin.forward(c, batch);
                add_broadcast_rows(&mut x0, &bias, batch, n, d);
                Some(c.to_vec())
            }
            (None, None) => None,
            _ => panic!("conditioning input does not match block configuration"),
        };
        let (h1, ln1) = self.norm1.forward(&x0);
        let (a, attn) = self.attn.forward(&h1, &h1, key_mask, batch, n, n);
        let mut x1 = add(&x0, &a);
        let cross = match (&self.cross, ctx) {
            (Some(ca), Some(c)) => {
                let (h2, ln2) = ca.norm.forward(&x1);
                let (o, cache) = ca.attn.forward(&h2, c.values, c.mask, batch, n, c.len);
                add_assign(&mut x1, &o);
                Some((ln2, cache))
            }
            (None, None) => None,
            _ => panic!("context input does not match block configuration"),
        };
        let (h3, ln3) = self.norm3.forward(&x1);
        let u = self.fc1.forward(&h3, rows);
        let s = silu(&u);
        let f = self.fc2.forward(&s, rows);
        let y = add(&x1, &f);
        (y, BlockCache { cond: cond_cache, ln1, attn, cross, ln3, h3, u, s, batch, n })
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &[T], train: bool) -> BlockGrads<T> {
        let d = self.dim;
        let rows = cache.batch * cache.n;
        let ds = self.fc2.backward(&cache.s, dy, rows, train, true).expect("dx requested");
        let du = silu_backward(&cache.u, &ds);
        let dh3 = self.fc1.backward(&cache.h3, &du, rows, train, true).expect("dx requested");
        let mut dx1 = self.norm3.backward(&cache.ln3, &dh3, train);
        add_assign(&mut dx1, dy);
        let dctx = match (&mut self.cross, &cache.cross) {
            (Some(ca), Some((ln2, ac))) => {
                let (dh2, dctx) = ca.attn.backward(ac, &dx1, train);
                let dpre = ca.norm.backward(ln2, &dh2, train);
                add_assign(&mut dx1, &dpre);
                Some(dctx)
            }
            _ => None,
        };
        let (da_q, da_k) = self.attn.backward(&cache.attn, &dx1, train);
        let dh1 = add(&da_q, &da_k);
        let mut dx0 = self.norm1.backward(&cache.ln1, &dh1, train);
        add_assign(&mut dx0, &dx1);
        let dcond = match (&mut self.cond, &cache.cond) {
            (Some(lin), Some(c)) => {
                let dbias = sum_broadcast_rows(&dx0, cache.batch, cache.n, d);
                lin.backward(c, &dbias, cache.batch, train, true)
            }
            _ => None,
        };
        BlockGrads { dx: dx0, dctx, dcond }
    }
}

impl<T: Float> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        if let Some(ca) = &self.cross {
            ca.norm.visit(&join(prefix, "cross_norm"), f);
            ca.attn.visit(&join(prefix, "cross_attn"), f);
        }
        self.norm3.visit(&join(prefix, "norm3"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        if let Some(c) = &self.cond {
            c.visit(&join(prefix, "cond"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        if let Some(ca) = &mut self.cross {
            ca.norm.visit_mut(&join(prefix, "cross_norm"), f);
            ca.attn.visit_mut(&join(prefix, "cross_attn"), f);
        }
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        if let Some(c) = &mut self.cond {
            c.visit_mut(&join(prefix, "cond"), f);
        }
    }
}
