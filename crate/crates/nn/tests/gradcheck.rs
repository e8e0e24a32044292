//! Central finite-difference checks of every backward pass in f64.

use apl_nn::block::{Block, BlockSpec, Context};
use apl_nn::param::{flatten_values, load_values, Module};
use apl_nn::{Attention, LayerNorm, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().map(|v| v.abs()).fold(1e-3, f64::max);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / scale;
        assert!(err < 1e-6, "{what}[{i}]: analytic {a} vs numeric {n}");
    }
}

/// Numeric gradient of `loss(x)` w.r.t. `x`.
fn numeric_grad(x: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + H;
            let up = loss(&xp);
            xp[i] = orig - H;
            let down = loss(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Numeric gradient of `loss(module)` w.r.t. every parameter.
fn numeric_param_grad<M: Module<f64> + Clone>(m: &M, mut loss: impl FnMut(&M) -> f64) -> Vec<f64> {
    let base = flatten_values(m);
    let mut probe = m.clone();
    numeric_grad(&base, |v| {
        load_values(&mut probe, v).unwrap();
        loss(&probe)
    })
}

fn analytic_param_grad<M: Module<f64>>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, p| out.extend_from_slice(&p.grad));
    out
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lin = Linear::<f64>::new(5, 3, true, &mut rng);
    lin.bias.as_mut().unwrap().value = randv(&mut rng, 3);
    let rows = 4;
    let x = randv(&mut rng, rows * 5);
    let r = randv(&mut rng, rows * 3);
    let dx = lin.backward(&x, &r, rows, true, true).unwrap();
    assert_close(&dx, &numeric_grad(&x, |xx| dot(&lin.forward(xx, rows), &r)), "dx");
    let analytic = analytic_param_grad(&lin);
    let numeric = numeric_param_grad(&lin, |l| dot(&l.forward(&x, rows), &r));
    assert_close(&analytic, &numeric, "dparams");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ln = LayerNorm::<f64>::new(6);
    ln.gain.value = randv(&mut rng, 6);
    ln.shift.value = randv(&mut rng, 6);
    let x = randv(&mut rng, 3 * 6);
    let r = randv(&mut rng, 3 * 6);
    let (_, cache) = ln.forward(&x);
    let dx = ln.backward(&cache, &r, true);
    assert_close(&dx, &numeric_grad(&x, |xx| dot(&ln.forward(xx).0, &r)), "dx");
    let analytic = analytic_param_grad(&ln);
    let numeric = numeric_param_grad(&ln, |l| dot(&l.forward(&x).0, &r));
    assert_close(&analytic, &numeric, "dparams");
}

#[test]
fn masked_cross_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, n, m, dq, dc) = (2, 3, 4, 8, 6);
    let mut attn = Attention::<f64>::new(dq, dc, 2, &mut rng);
    let x = randv(&mut rng, b * n * dq);
    let ctx = randv(&mut rng, b * m * dc);
    let mask = vec![true, true, false, true, true, false, false, true];
    let r = randv(&mut rng, b * n * dq);
    let (_, cache) = attn.forward(&x, &ctx, Some(&mask), b, n, m);
    let (dx, dctx) = attn.backward(&cache, &r, true);
    let f = |a: &Attention<f64>, x: &[f64], c: &[f64]| dot(&a.forward(x, c, Some(&mask), b, n, m).0, &r);
    assert_close(&dx, &numeric_grad(&x, |xx| f(&attn, xx, &ctx)), "dx");
    assert_close(&dctx, &numeric_grad(&ctx, |cc| f(&attn, &x, cc)), "dctx");
    // masked keys receive no gradient
    for bi in 0..b {
        for j in 0..m {
            if !mask[bi * m + j] {
                assert!(dctx[(bi * m + j) * dc..(bi * m + j + 1) * dc].iter().all(|v| v.abs() < 1e-14));
            }
        }
    }
    let analytic = analytic_param_grad(&attn);
    let numeric = numeric_param_grad(&attn, |a| f(a, &x, &ctx));
    assert_close(&analytic, &numeric, "dparams");
}

#[test]
fn block_gradients_with_context_and_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = BlockSpec { dim: 8, heads: 2, mlp_ratio: 2, ctx_dim: Some(5), cond_dim: Some(3) };
    let mut block = Block::<f64>::new(spec, &mut rng);
    let (b, n, m) = (2, 3, 4);
    let x = randv(&mut rng, b * n * 8);
    let ctx = randv(&mut rng, b * m * 5);
    let cond = randv(&mut rng, b * 3);
    let cmask = vec![true, true, true, false, true, false, true, true];
    let r = randv(&mut rng, b * n * 8);
    let run = |blk: &Block<f64>, x: &[f64], c: &[f64], t: &[f64]| {
        let ctx = Context { values: c, mask: Some(&cmask), len: m };
        dot(&blk.forward(x, b, n, None, Some(ctx), Some(t)).0, &r)
    };
    let (_, cache) =
        block.forward(&x, b, n, None, Some(Context { values: &ctx, mask: Some(&cmask), len: m }), Some(&cond));
    let g = block.backward(&cache, &r, true);
    assert_close(&g.dx, &numeric_grad(&x, |xx| run(&block, xx, &ctx, &cond)), "dx");
    assert_close(g.dctx.as_ref().unwrap(), &numeric_grad(&ctx, |cc| run(&block, &x, cc, &cond)), "dctx");
    assert_close(g.dcond.as_ref().unwrap(), &numeric_grad(&cond, |tt| run(&block, &x, &ctx, tt)), "dcond");
    let analytic = analytic_param_grad(&block);
    let numeric = numeric_param_grad(&block, |blk| run(blk, &x, &ctx, &cond));
    assert_close(&analytic, &numeric, "dparams");
}

#[test]
fn self_attention_block_with_key_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = BlockSpec { dim: 4, heads: 1, mlp_ratio: 4, ctx_dim: None, cond_dim: None };
    let mut block = Block::<f64>::new(spec, &mut rng);
    let (b, n) = (1, 5);
    let mask = vec![true, true, true, false, false];
    let x = randv(&mut rng, b * n * 4);
    let r = randv(&mut rng, b * n * 4);
    let (_, cache) = block.forward(&x, b, n, Some(&mask), None, None);
    let g = block.backward(&cache, &r, false);
    let num = numeric_grad(&x, |xx| dot(&block.forward(xx, b, n, Some(&mask), None, None).0, &r));
    assert_close(&g.dx, &num, "dx");
    // train=false leaves parameter gradients untouched
    assert!(analytic_param_grad(&block).iter().all(|v| *v == 0.0));
}
