//! Text-conditioned noise predictor.
//!
//! Two space-to-depth stages take the 32×32 image to an 8×8 token grid
//! (widths `stage_width` then `width`). Transformer blocks at 8×8 attend to
//! each other, cross-attend to the text embedding and receive a timestep
//! bias. A mirrored depth-to-space decoder with a skip from the first
//! stage produces the prediction. The output projection starts at zero.

use apl_nn::act::{add_assign, add_broadcast_rows, silu, silu_backward, sum_broadcast_rows};
use apl_nn::block::BlockCache;
use apl_nn::layout::{chw_to_hwc, depth_to_space, hwc_to_chw, space_to_depth};
use apl_nn::norm::LayerNormCache;
use apl_nn::param::join;
use apl_nn::{Block, BlockSpec, Float, LayerNorm, Linear, Module, Param};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{CHANNELS, PIXELS, SIZE};
use crate::textenc::TextEmbedding;

const H1: usize = SIZE / 2;
const H2: usize = SIZE / 4;
const TOKENS1: usize = H1 * H1;
const TOKENS2: usize = H2 * H2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub stage_width: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Sinusoidal timestep embedding width.
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { stage_width: 32, width: 64, blocks: 3, heads: 4, mlp_ratio: 2, time_dim: 64, time_hidden: 128 }
    }
}

/// Sinusoidal embedding of integer timesteps, `len(t) × dim`.
pub fn timestep_embedding<T: Float>(t: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); t.len() * dim];
    for (row, &step) in out.chunks_exact_mut(dim).zip(t) {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = step as f64 * freq;
            row[k] = T::lit(a.sin());
            row[half + k] = T::lit(a.cos());
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub time1: Linear<T>,
    pub time2: Linear<T>,
    pub stem: Linear<T>,
    pub stem_time: Linear<T>,
    pub down: Linear<T>,
    pub pos: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_out: LayerNorm<T>,
    pub up: Linear<T>,
    pub head: Linear<T>,
    pub config: DenoiserConfig,
    pub text_dim: usize,
}

pub struct DenoiserCache<T> {
    batch: usize,
    temb_sin: Vec<T>,
    th: Vec<T>,
    ta: Vec<T>,
    temb: Vec<T>,
    cond: Vec<T>,
    s1: Vec<T>,
    u1: Vec<T>,
    s2: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm_out: LayerNormCache<T>,
    zn: Vec<T>,
    g: Vec<T>,
    a: Vec<T>,
}

impl<T: Float> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, text_dim: usize, rng: &mut R) -> Self {
        let c1 = config.stage_width;
        let w = config.width;
        let e = config.time_hidden;
        let spec = BlockSpec {
            dim: w,
            heads: config.heads,
            mlp_ratio: config.mlp_ratio,
            ctx_dim: Some(text_dim),
            cond_dim: Some(e),
        };
        Self {
            time1: Linear::new(config.time_dim, e, true, rng),
            time2: Linear::new(e, e, true, rng),
            stem: Linear::new(4 * CHANNELS, c1, true, rng),
            stem_time: Linear::new(e, c1, true, rng),
            down: Linear::new(4 * c1, w, true, rng),
            pos: Param::randn(&[TOKENS2, w], 0.1, rng),
            blocks: (0..config.blocks).map(|_| Block::new(spec, rng)).collect(),
            norm_out: LayerNorm::new(w),
            up: Linear::new(w, 4 * c1, true, rng),
            head: Linear::zeroed(c1, 4 * CHANNELS, true),
            config,
            text_dim,
        }
    }

    /// `x` is `batch × 3 × 32 × 32` (channel-major per sample), `t` holds one
    /// timestep per sample. Returns the noise prediction in the same layout.
    pub fn forward(&self, x: &[T], t: &[usize], text: &TextEmbedding<T>) -> (Vec<T>, DenoiserCache<T>) {
        let b = t.len();
        assert_eq!(x.len(), b * PIXELS, "image batch does not match timestep count");
        assert_eq!(text.batch, b, "text batch does not match image batch");
        assert_eq!(text.dim, self.text_dim, "text width does not match denoiser");
        let c1 = self.config.stage_width;
        let w = self.config.width;

        let temb_sin = timestep_embedding::<T>(t, self.config.time_dim);
        let th = self.time1.forward(&temb_sin, b);
        let ta = silu(&th);
        let temb = self.time2.forward(&ta, b);
        let cond = silu(&temb);

        let xh = chw_to_hwc(x, b, CHANNELS, SIZE, SIZE);
        let s1 = space_to_depth(&xh, b, SIZE, SIZE, CHANNELS);
        let mut u1 = self.stem.forward(&s1, b * TOKENS1);
        let tb = self.stem_time.forward(&cond, b);
        add_broadcast_rows(&mut u1, &tb, b, TOKENS1, c1);
        let h1 = silu(&u1);

        let s2 = space_to_depth(&h1, b, H1, H1, c1);
        let mut z = self.down.forward(&s2, b * TOKENS2);
        for row in z.chunks_exact_mut(TOKENS2 * w) {
            add_assign(row, &self.pos.value);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&z, b, TOKENS2, None, Some(text.context()), Some(&cond));
            z = y;
            caches.push(c);
        }
        let (zn, norm_out) = self.norm_out.forward(&z);
        let u = self.up.forward(&zn, b * TOKENS2);
        let mut g = depth_to_space(&u, b, H2, H2, c1);
        add_assign(&mut g, &h1);
        let a = silu(&g);
        let o = self.head.forward(&a, b * TOKENS1);
        let e = depth_to_space(&o, b, H1, H1, CHANNELS);
        let eps = hwc_to_chw(&e, b, CHANNELS, SIZE, SIZE);
        let cache = DenoiserCache {
            batch: b,
            temb_sin,
            th,
            ta,
            temb,
            cond,
            s1,
            u1,
            s2,
            blocks: caches,
            norm_out,
            zn,
            g,
            a,
        };
        (eps, cache)
    }

    pub fn predict(&self, x: &[T], t: &[usize], text: &TextEmbedding<T>) -> Vec<T> {
        self.forward(x, t, text).0
    }

    /// Backpropagates `d_eps`; returns the gradient with respect to the text
    /// embedding values. Parameter gradients accumulate only when `train`.
    pub fn backward(&mut self, cache: &DenoiserCache<T>, d_eps: &[T], train: bool) -> Vec<T> {
        let b = cache.batch;
        let c1 = self.config.stage_width;
        let w = self.config.width;

        let de = chw_to_hwc(d_eps, b, CHANNELS, SIZE, SIZE);
        let d_o = space_to_depth(&de, b, SIZE, SIZE, CHANNELS);
        let da = self.head.backward(&cache.a, &d_o, b * TOKENS1, train, true).expect("dx");
        let dg = silu_backward(&cache.g, &da);
        let mut dh1 = dg.clone();
        let du = space_to_depth(&dg, b, H1, H1, c1);
        let dzn = self.up.backward(&cache.zn, &du, b * TOKENS2, train, true).expect("dx");
        let mut dz = self.norm_out.backward(&cache.norm_out, &dzn, train);

        let mut dctx: Option<Vec<T>> = None;
        let mut dcond = vec![T::zero(); b * self.config.time_hidden];
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let g = blk.backward(c, &dz, train);
            dz = g.dx;
            if let Some(dc) = g.dctx {
                match &mut dctx {
                    Some(acc) => add_assign(acc, &dc),
                    None => dctx = Some(dc),
                }
            }
            if let Some(dc) = g.dcond {
                add_assign(&mut dcond, &dc);
            }
        }
        if train {
            for row in dz.chunks_exact(TOKENS2 * w) {
                add_assign(&mut self.pos.grad, row);
            }
        }
        let ds2 = self.down.backward(&cache.s2, &dz, b * TOKENS2, train, true).expect("dx");
        add_assign(&mut dh1, &depth_to_space(&ds2, b, H2, H2, c1));
        let du1 = silu_backward(&cache.u1, &dh1);
        self.stem.backward(&cache.s1, &du1, b * TOKENS1, train, false);
        let dtb = sum_broadcast_rows(&du1, b, TOKENS1, c1);
        let dc = self.stem_time.backward(&cache.cond, &dtb, b, train, true).expect("dx");
        add_assign(&mut dcond, &dc);
        if train {
            let dtemb = silu_backward(&cache.temb, &dcond);
            let dta = self.time2.backward(&cache.ta, &dtemb, b, true, true).expect("dx");
            let dth = silu_backward(&cache.th, &dta);
            self.time1.backward(&cache.temb_sin, &dth, b, true, false);
        }
        dctx.unwrap_or_default()
    }
}

impl<T: Float> Module<T> for Denoiser<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.time1.visit(&join(prefix, "time1"), f);
        self.time2.visit(&join(prefix, "time2"), f);
        self.stem.visit(&join(prefix, "stem"), f);
        self.stem_time.visit(&join(prefix, "stem_time"), f);
        self.down.visit(&join(prefix, "down"), f);
        f(&join(prefix, "pos"), &self.pos);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.norm_out.visit(&join(prefix, "norm_out"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.time1.visit_mut(&join(prefix, "time1"), f);
        self.time2.visit_mut(&join(prefix, "time2"), f);
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stem_time.visit_mut(&join(prefix, "stem_time"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.norm_out.visit_mut(&join(prefix, "norm_out"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn text(b: usize, len: usize, dim: usize, rng: &mut ChaCha8Rng) -> TextEmbedding<f64> {
        TextEmbedding {
            values: (0..b * len * dim).map(|_| StandardNormal.sample(rng)).collect(),
            mask: (0..b * len).map(|i| i % len < len - 1).collect(),
            batch: b,
            len,
            dim,
        }
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig { stage_width: 4, width: 8, blocks: 1, heads: 2, mlp_ratio: 2, time_dim: 8, time_hidden: 8 }
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Denoiser::<f64>::new(small(), 6, &mut rng);
        let x: Vec<f64> = (0..2 * PIXELS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let out = d.predict(&x, &[1, 200], &text(2, 5, 6, &mut rng));
        assert!(out.iter().all(|v| *v == 0.0));
    }

    fn loss(d: &Denoiser<f64>, x: &[f64], t: &[usize], txt: &TextEmbedding<f64>, w: &[f64]) -> f64 {
        d.predict(x, t, txt).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn nudge(d: &mut Denoiser<f64>, which: usize, k: usize, delta: f64) {
        let mut idx = 0;
        d.visit_mut("", &mut |_, p| {
            if idx == which {
                p.value[k] += delta;
            }
            idx += 1;
        });
    }

    /// Central differences against the analytic gradient for both the text
    /// input and a sample of parameters.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Denoiser::<f64>::new(small(), 6, &mut rng);
        d.head.weight.value.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let (b, len) = (2, 4);
        let x: Vec<f64> = (0..b * PIXELS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = [3, 150];
        let mut txt = text(b, len, 6, &mut rng);
        let w: Vec<f64> = (0..b * PIXELS).map(|_| StandardNormal.sample(&mut rng)).collect();

        let (_, cache) = d.forward(&x, &t, &txt);
        let dtext = d.backward(&cache, &w, true);
        let h = 1e-6;
        for i in (0..txt.values.len()).step_by(7) {
            let orig = txt.values[i];
            txt.values[i] = orig + h;
            let lp = loss(&d, &x, &t, &txt, &w);
            txt.values[i] = orig - h;
            let lm = loss(&d, &x, &t, &txt, &w);
            txt.values[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dtext[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "text[{i}]: fd {fd} vs {}", dtext[i]);
        }

        let mut analytic = Vec::new();
        d.visit("", &mut |name, p| analytic.push((name.to_string(), p.grad.clone())));
        for (pi, (name, grad)) in analytic.iter().enumerate() {
            for k in [0, grad.len() / 2, grad.len() - 1] {
                nudge(&mut d, pi, k, h);
                let lp = loss(&d, &x, &t, &txt, &w);
                nudge(&mut d, pi, k, -2.0 * h);
                let lm = loss(&d, &x, &t, &txt, &w);
                nudge(&mut d, pi, k, h);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "{name}[{k}]: fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn frozen_backward_accumulates_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Denoiser::<f64>::new(small(), 6, &mut rng);
        d.head.weight.value.iter_mut().for_each(|v| *v = 0.1);
        let x: Vec<f64> = (0..PIXELS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let txt = text(1, 4, 6, &mut rng);
        let (y, cache) = d.forward(&x, &[10], &txt);
        let dt = d.backward(&cache, &y, false);
        assert!(dt.iter().any(|g| *g != 0.0));
        assert_eq!(apl_nn::param::grad_norm_sq(&d), 0.0);
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding::<f64>(&[0, 5], 8);
        assert_eq!(&e[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((e[8] - 5f64.sin()).abs() < 1e-12);
        assert!((e[12] - 5f64.cos()).abs() < 1e-12);
    }
}
