//! Identity embedder and attribute probe.
//!
//! Both networks share a trunk layout: two space-to-depth stages, one
//! self-attention block over the 8×8 token grid and a flattening
//! projection to a 64-dimensional feature.
//!
//! The embedder is a cosine classifier over every world identity. During
//! training the coarse attributes of a render are re-drawn half of the time,
//! so the texture patch is the only reliable identity cue. Prototypes are
//! normalized means over reference renders.
//!
//! The probe reads attributes, flags, texture presence and scene content
//! from linear heads on its feature.

use std::collections::BTreeMap;

use apl_nn::act::{add_assign, silu, silu_backward};
use apl_nn::block::BlockCache;
use apl_nn::layout::{chw_to_hwc, space_to_depth};
use apl_nn::norm::LayerNormCache;
use apl_nn::param::join;
use apl_nn::{Adam, Block, BlockSpec, LayerNorm, Linear, Module, Param};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::gaussian;
use crate::error::{AplError, Result};
use crate::image::{Image, CHANNELS, PIXELS, SIZE};
use crate::seed;
use crate::synthworld::{self, AttributeSchema, IdentityRecord, SceneRecord, World};

pub const FEATURE_DIM: usize = 64;
const H1: usize = SIZE / 2;
const TOKENS2: usize = (SIZE / 4) * (SIZE / 4);
/// Logit scale of the cosine classifier.
const COSINE_SCALE: f32 = 16.0;
pub const REFERENCE_RENDERS: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrunkConfig {
    pub stage_width: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self { stage_width: 32, width: 64, heads: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Trunk {
    stem: Linear<f32>,
    down: Linear<f32>,
    pos: Param<f32>,
    block: Block<f32>,
    norm: LayerNorm<f32>,
    proj: Linear<f32>,
    config: TrunkConfig,
}

struct TrunkCache {
    batch: usize,
    s1: Vec<f32>,
    u1: Vec<f32>,
    s2: Vec<f32>,
    block: BlockCache<f32>,
    norm: LayerNormCache<f32>,
    zn: Vec<f32>,
}

impl Trunk {
    fn new(config: TrunkConfig, rng: &mut impl Rng) -> Self {
        let (c, w) = (config.stage_width, config.width);
        let spec = BlockSpec { dim: w, heads: config.heads, mlp_ratio: 2, ctx_dim: None, cond_dim: None };
        Self {
            stem: Linear::new(4 * CHANNELS, c, true, rng),
            down: Linear::new(4 * c, w, true, rng),
            pos: Param::randn(&[TOKENS2, w], 0.1, rng),
            block: Block::new(spec, rng),
            norm: LayerNorm::new(w),
            proj: Linear::new(TOKENS2 * w, FEATURE_DIM, true, rng),
            config,
        }
    }

    fn forward(&self, x: &[f32]) -> (Vec<f32>, TrunkCache) {
        let b = x.len() / PIXELS;
        let w = self.config.width;
        let xh = chw_to_hwc(x, b, CHANNELS, SIZE, SIZE);
        let s1 = space_to_depth(&xh, b, SIZE, SIZE, CHANNELS);
        let u1 = self.stem.forward(&s1, b * H1 * H1);
        let h1 = silu(&u1);
        let s2 = space_to_depth(&h1, b, H1, H1, self.config.stage_width);
        let mut z = self.down.forward(&s2, b * TOKENS2);
        for row in z.chunks_exact_mut(TOKENS2 * w) {
            add_assign(row, &self.pos.value);
        }
        let (z, block) = self.block.forward(&z, b, TOKENS2, None, None, None);
        let (zn, norm) = self.norm.forward(&z);
        let f = self.proj.forward(&zn, b);
        (f, TrunkCache { batch: b, s1, u1, s2, block, norm, zn })
    }

    fn backward(&mut self, cache: &TrunkCache, df: &[f32]) {
        let b = cache.batch;
        let w = self.config.width;
        let c = self.config.stage_width;
        let dzn = self.proj.backward(&cache.zn, df, b, true, true).expect("dx");
        let dz = self.norm.backward(&cache.norm, &dzn, true);
        let dz = self.block.backward(&cache.block, &dz, true).dx;
        for row in dz.chunks_exact(TOKENS2 * w) {
            add_assign(&mut self.pos.grad, row);
        }
        let ds2 = self.down.backward(&cache.s2, &dz, b * TOKENS2, true, true).expect("dx");
        let dh1 = apl_nn::layout::depth_to_space(&ds2, b, SIZE / 4, SIZE / 4, c);
        let du1 = silu_backward(&cache.u1, &dh1);
        self.stem.backward(&cache.s1, &du1, b * H1 * H1, true, false);
    }
}

impl Module<f32> for Trunk {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.down.visit(&join(prefix, "down"), f);
        f(&join(prefix, "pos"), &self.pos);
        self.block.visit(&join(prefix, "block"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        self.block.visit_mut(&join(prefix, "block"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

fn normalize(v: &mut [f32]) -> f32 {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    n
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Softmax cross-entropy over `logits`; writes `p - onehot` into `grad`.
fn softmax_xent(logits: &[f32], label: usize, grad: &mut [f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (g, l) in grad.iter_mut().zip(logits) {
        let e = ((l - max) as f64).exp();
        *g = e as f32;
        sum += e;
    }
    grad.iter_mut().for_each(|g| *g = (*g as f64 / sum) as f32);
    let loss = -((grad[label] as f64).max(1e-30)).ln();
    grad[label] -= 1.0;
    loss
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn augment(image: &mut Image, rng: &mut impl Rng, max_noise: f32) {
    let sigma = rng.random_range(0.0..max_noise);
    for (v, n) in image.data.iter_mut().zip(gaussian(PIXELS, rng)) {
        *v += sigma * n;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerConfig {
    pub trunk: TrunkConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Upper bound of the per-image Gaussian noise augmentation.
    pub max_noise: f32,
    /// Probability of re-drawing coarse attributes for an embedder render.
    pub attribute_shuffle: f64,
    /// Held-out renders per identity used for the accuracy report.
    pub eval_renders: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            steps: 1500,
            batch: 64,
            lr: 1e-3,
            seed: 17,
            max_noise: 0.3,
            attribute_shuffle: 0.5,
            eval_renders: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    trunk: Trunk,
    classes: Param<f32>,
    /// Identity ids in class order.
    pub ids: Vec<u32>,
    pub prototypes: BTreeMap<u32, Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub heldout_accuracy: f64,
    pub self_similarity: f64,
    pub same_identity_similarity: f64,
    pub cross_identity_similarity: f64,
    pub final_loss: f64,
}

impl IdentityEmbedder {
    pub fn new(config: TrunkConfig, ids: Vec<u32>, rng: &mut impl Rng) -> Self {
        let trunk = Trunk::new(config, rng);
        let classes = Param::randn(&[ids.len(), FEATURE_DIM], 1.0, rng);
        Self { trunk, classes, ids, prototypes: BTreeMap::new() }
    }

    pub fn trunk_config(&self) -> TrunkConfig {
        self.trunk.config
    }

    /// Unit-norm embeddings, one per image.
    pub fn embed(&self, images: &[Image]) -> Vec<Vec<f32>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let x: Vec<f32> = chunk.iter().flat_map(|im| im.data.iter().copied()).collect();
            let (f, _) = self.trunk.forward(&x);
            for row in f.chunks_exact(FEATURE_DIM) {
                let mut e = row.to_vec();
                normalize(&mut e);
                out.push(e);
            }
        }
        out
    }

    pub fn prototype(&self, id: u32) -> Result<&[f32]> {
        self.prototypes
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| AplError::Precondition(format!("no prototype for identity {id}")))
    }

    /// Cosine similarity between the image embedding and the identity's
    /// prototype.
    pub fn id_acc(&self, image: &Image, id: u32) -> Result<f64> {
        let proto = self.prototype(id)?;
        Ok(cosine(&self.embed(std::slice::from_ref(image))[0], proto))
    }

    pub fn id_acc_many(&self, images: &[Image], id: u32) -> Result<Vec<f64>> {
        let proto = self.prototype(id)?.to_vec();
        Ok(self.embed(images).iter().map(|e| cosine(e, &proto)).collect())
    }

    /// Identity whose prototype is closest to the embedding.
    pub fn nearest(&self, embedding: &[f32]) -> u32 {
        let mut best = (f64::NEG_INFINITY, 0);
        for (id, p) in &self.prototypes {
            let c = cosine(embedding, p);
            if c > best.0 {
                best = (c, *id);
            }
        }
        best.1
    }

    /// Prototypes from the reference renders (variations `0..8`).
    pub fn build_prototypes(&mut self, world: &World) -> Result<()> {
        self.prototypes.clear();
        for &id in &self.ids.clone() {
            let rec = world.record(id)?;
            let refs = reference_renders(rec);
            let embs = self.embed(&refs);
            let mut mean = vec![0.0f32; FEATURE_DIM];
            for e in &embs {
                add_assign(&mut mean, e);
            }
            normalize(&mut mean);
            self.prototypes.insert(id, mean);
        }
        Ok(())
    }

    fn train_step(&mut self, images: &[f32], labels: &[usize]) -> f64 {
        let b = labels.len();
        let (f, cache) = self.trunk.forward(images);
        let n_cls = self.ids.len();
        let mut w_hat = self.classes.value.clone();
        let w_norm: Vec<f32> = w_hat.chunks_exact_mut(FEATURE_DIM).map(normalize).collect();
        let mut df = vec![0.0f32; f.len()];
        let mut dw_hat = vec![0.0f32; w_hat.len()];
        let mut loss = 0.0;
        for i in 0..b {
            let mut fh = f[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].to_vec();
            let fnorm = normalize(&mut fh);
            let logits: Vec<f32> = w_hat
                .chunks_exact(FEATURE_DIM)
                .map(|w| COSINE_SCALE * w.iter().zip(&fh).map(|(a, b)| a * b).sum::<f32>())
                .collect();
            let mut g = vec![0.0f32; n_cls];
            loss += softmax_xent(&logits, labels[i], &mut g);
            let mut dfh = vec![0.0f32; FEATURE_DIM];
            for (c, gc) in g.iter().enumerate() {
                let k = COSINE_SCALE * gc / b as f32;
                for j in 0..FEATURE_DIM {
                    dfh[j] += k * w_hat[c * FEATURE_DIM + j];
                    dw_hat[c * FEATURE_DIM + j] += k * fh[j];
                }
            }
            let dot: f32 = dfh.iter().zip(&fh).map(|(a, b)| a * b).sum();
            for j in 0..FEATURE_DIM {
                df[i * FEATURE_DIM + j] = (dfh[j] - fh[j] * dot) / fnorm;
            }
        }
        for c in 0..n_cls {
            let r = c * FEATURE_DIM..(c + 1) * FEATURE_DIM;
            let wh = &w_hat[r.clone()];
            let dwh = &dw_hat[r.clone()];
            let dot: f32 = dwh.iter().zip(wh).map(|(a, b)| a * b).sum();
            for (j, g) in self.classes.grad[r].iter_mut().enumerate() {
                *g += (dwh[j] - wh[j] * dot) / w_norm[c];
            }
        }
        self.trunk.backward(&cache, &df);
        loss / b as f64
    }
}

impl Module<f32> for IdentityEmbedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        f(&join(prefix, "classes"), &self.classes);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        f(&join(prefix, "classes"), &mut self.classes);
    }
}

/// The renders that define an identity's prototype and attribute reference.
pub fn reference_renders(rec: &IdentityRecord) -> Vec<Image> {
    (0..REFERENCE_RENDERS).map(|v| synthworld::render_identity(rec, v)).collect()
}

fn heldout_variation(id: u32, k: usize) -> u64 {
    seed::derive(0x4845_4c44, "heldout-render", &[id as u64, k as u64])
}

/// Trains the embedder on every identity of the world and builds prototypes.
/// Fails when held-out render accuracy is below 95%.
pub fn train_embedder(world: &World, config: &RecognizerConfig) -> Result<(IdentityEmbedder, EmbedderReport)> {
    let ids: Vec<u32> = world.identities.iter().map(|r| r.id).collect();
    if ids.len() < 2 {
        return Err(AplError::EmptyDataset("recognizer needs at least 2 identities".into()));
    }
    let mut rng = seed::rng(config.seed, "embedder", &[]);
    let mut model = IdentityEmbedder::new(config.trunk, ids.clone(), &mut rng);
    let mut opt = Adam::new(config.lr);
    let mut final_loss = f64::NAN;
    for step in 1..=config.steps {
        let mut x = Vec::with_capacity(config.batch * PIXELS);
        let mut labels = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let cls = rng.random_range(0..ids.len());
            let mut rec = world.record(ids[cls])?.clone();
            if rng.random_bool(config.attribute_shuffle) {
                let other = synthworld::anonymous_record(&mut rng, world.schema());
                rec.values = other.values;
                rec.flags = other.flags;
            }
            let mut im = synthworld::render_identity(&rec, rng.random());
            augment(&mut im, &mut rng, config.max_noise);
            x.extend_from_slice(&im.data);
            labels.push(cls);
        }
        final_loss = model.train_step(&x, &labels);
        if !final_loss.is_finite() {
            return Err(AplError::NonFinite(format!("embedder loss at step {step}")));
        }
        opt.step(&mut model);
        if step % 250 == 0 {
            log::info!("embedder step {step}/{} loss {final_loss:.4}", config.steps);
        }
    }
    model.build_prototypes(world)?;

    let mut correct = 0;
    let mut total = 0;
    let mut self_sim = Vec::new();
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for &id in &ids {
        let rec = world.record(id)?;
        let held: Vec<Image> = (0..config.eval_renders).map(|k| synthworld::render_identity(rec, heldout_variation(id, k))).collect();
        let embs = model.embed(&held);
        for e in &embs {
            total += 1;
            correct += usize::from(model.nearest(e) == id);
        }
        let refs = model.embed(&reference_renders(rec));
        let proto = model.prototype(id)?;
        self_sim.extend(refs.iter().map(|e| cosine(e, proto)));
        if embs.len() >= 2 {
            same.push(cosine(&embs[0], &embs[1]));
        }
        let other = world.record(ids[(ids.iter().position(|i| *i == id).unwrap() + 1) % ids.len()])?;
        let o = model.embed(&[synthworld::render_identity(other, heldout_variation(other.id, 0))]);
        cross.push(cosine(&embs[0], &o[0]));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let report = EmbedderReport {
        heldout_accuracy: correct as f64 / total as f64,
        self_similarity: mean(&self_sim),
        same_identity_similarity: mean(&same),
        cross_identity_similarity: mean(&cross),
        final_loss,
    };
    log::info!("embedder report {report:?}");
    if report.heldout_accuracy < 0.95 {
        return Err(AplError::Accuracy(format!("identity accuracy {:.3} on held-out renders", report.heldout_accuracy)));
    }
    Ok((model, report))
}

/// Logit layout of the probe heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub categories: Vec<usize>,
    pub flags: usize,
    pub scene: [usize; 3],
}

impl HeadLayout {
    pub fn for_schema(schema: &AttributeSchema) -> Self {
        Self {
            categories: schema.value_counts(),
            flags: schema.flags.len(),
            scene: [synthworld::SCENE_SHAPES.len(), synthworld::SCENE_COLORS.len(), synthworld::SCENE_BACKGROUNDS.len()],
        }
    }

    fn total(&self) -> usize {
        self.categories.iter().sum::<usize>() + self.flags + 1 + self.scene.iter().sum::<usize>()
    }

    fn category_range(&self, k: usize) -> std::ops::Range<usize> {
        let lo: usize = self.categories[..k].iter().sum();
        lo..lo + self.categories[k]
    }

    fn flag_offset(&self) -> usize {
        self.categories.iter().sum()
    }

    fn presence_offset(&self) -> usize {
        self.flag_offset() + self.flags
    }

    fn scene_range(&self, k: usize) -> std::ops::Range<usize> {
        let lo = self.presence_offset() + 1 + self.scene[..k].iter().sum::<usize>();
        lo..lo + self.scene[k]
    }
}

/// Probe readout for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrOutput {
    pub feature: Vec<f32>,
    pub categories: Vec<Vec<f32>>,
    pub flags: Vec<f32>,
    pub presence: f32,
    pub scene: Vec<Vec<f32>>,
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f32 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn argmax(p: &[f32]) -> usize {
    p.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best }).0
}

impl AttrOutput {
    pub fn category(&self, k: usize) -> usize {
        argmax(&self.categories[k])
    }

    pub fn flag(&self, k: usize) -> bool {
        self.flags[k] > 0.5
    }

    pub fn scene_value(&self, k: usize) -> usize {
        argmax(&self.scene[k])
    }
}

#[derive(Clone, Debug)]
pub struct AttributeProbe {
    trunk: Trunk,
    heads: Linear<f32>,
    pub layout: HeadLayout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Fraction of held-out person renders with every head correct.
    pub all_heads_accuracy: f64,
    pub presence_on_people: f64,
    pub absence_on_scenes: f64,
    pub scene_accuracy: f64,
    pub final_loss: f64,
}

enum Label {
    Person(IdentityRecord),
    Scene(SceneRecord),
}

impl AttributeProbe {
    pub fn new(config: TrunkConfig, layout: HeadLayout, rng: &mut impl Rng) -> Self {
        let trunk = Trunk::new(config, rng);
        let heads = Linear::new(FEATURE_DIM, layout.total(), true, rng);
        Self { trunk, heads, layout }
    }

    pub fn trunk_config(&self) -> TrunkConfig {
        self.trunk.config
    }

    pub fn attr_features(&self, images: &[Image]) -> Vec<AttrOutput> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let x: Vec<f32> = chunk.iter().flat_map(|im| im.data.iter().copied()).collect();
            let (f, _) = self.trunk.forward(&x);
            let logits = self.heads.forward(&f, chunk.len());
            for (feat, lg) in f.chunks_exact(FEATURE_DIM).zip(logits.chunks_exact(self.layout.total())) {
                let l = &self.layout;
                out.push(AttrOutput {
                    feature: feat.to_vec(),
                    categories: (0..l.categories.len()).map(|k| softmax(&lg[l.category_range(k)])).collect(),
                    flags: (0..l.flags).map(|k| sigmoid(lg[l.flag_offset() + k])).collect(),
                    presence: sigmoid(lg[l.presence_offset()]),
                    scene: (0..3).map(|k| softmax(&lg[l.scene_range(k)])).collect(),
                });
            }
        }
        out
    }

    pub fn features(&self, images: &[Image]) -> Vec<Vec<f32>> {
        self.attr_features(images).into_iter().map(|o| o.feature).collect()
    }

    /// Whether an identity texture patch is detected.
    pub fn presence_detect(&self, image: &Image) -> bool {
        self.attr_features(std::slice::from_ref(image))[0].presence > 0.5
    }

    fn train_step(&mut self, x: &[f32], labels: &[Label]) -> f64 {
        let b = labels.len();
        let (f, cache) = self.trunk.forward(x);
        let total = self.layout.total();
        let logits = self.heads.forward(&f, b);
        let mut dl = vec![0.0f32; logits.len()];
        let mut loss = 0.0;
        let inv = 1.0 / b as f32;
        for (i, label) in labels.iter().enumerate() {
            let lg = &logits[i * total..(i + 1) * total];
            let g = &mut dl[i * total..(i + 1) * total];
            let l = &self.layout;
            let present = matches!(label, Label::Person(_));
            let p = sigmoid(lg[l.presence_offset()]);
            loss += -((if present { p } else { 1.0 - p }).max(1e-7) as f64).ln();
            g[l.presence_offset()] = p - f32::from(present);
            match label {
                Label::Person(rec) => {
                    for k in 0..l.categories.len() {
                        let r = l.category_range(k);
                        loss += softmax_xent(&lg[r.clone()], rec.values[k] as usize, &mut g[r]);
                    }
                    for k in 0..l.flags {
                        let p = sigmoid(lg[l.flag_offset() + k]);
                        let y = rec.flag(k);
                        loss += -((if y { p } else { 1.0 - p }).max(1e-7) as f64).ln();
                        g[l.flag_offset() + k] = p - f32::from(y);
                    }
                }
                Label::Scene(s) => {
                    for (k, v) in [s.shape, s.color, s.background].into_iter().enumerate() {
                        let r = l.scene_range(k);
                        loss += softmax_xent(&lg[r.clone()], v as usize, &mut g[r]);
                    }
                }
            }
            g.iter_mut().for_each(|v| *v *= inv);
        }
        let df = self.heads.backward(&f, &dl, b, true, true).expect("dx");
        self.trunk.backward(&cache, &df);
        loss / b as f64
    }
}

impl Module<f32> for AttributeProbe {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}

fn person_correct(o: &AttrOutput, rec: &IdentityRecord) -> bool {
    (0..rec.values.len()).all(|k| o.category(k) == rec.values[k] as usize)
        && (0..o.flags.len()).all(|k| o.flag(k) == rec.flag(k))
}

/// Trains the probe on named identities, anonymous people and scenes.
/// Fails when held-out accuracy or presence detection is below 95%.
pub fn train_probe(world: &World, config: &RecognizerConfig) -> Result<(AttributeProbe, ProbeReport)> {
    let mut rng = seed::rng(config.seed, "probe", &[]);
    let layout = HeadLayout::for_schema(world.schema());
    let mut probe = AttributeProbe::new(config.trunk, layout, &mut rng);
    let mut opt = Adam::new(config.lr);
    let mut final_loss = f64::NAN;
    for step in 1..=config.steps {
        let mut x = Vec::with_capacity(config.batch * PIXELS);
        let mut labels = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let u: f64 = rng.random();
            let variation = rng.random();
            let (mut im, label) = if u < 0.35 {
                let rec = &world.identities[rng.random_range(0..world.identities.len())];
                (synthworld::render_identity(rec, variation), Label::Person(rec.clone()))
            } else if u < 0.7 {
                let rec = synthworld::anonymous_record(&mut rng, world.schema());
                (synthworld::render_identity(&rec, variation), Label::Person(rec))
            } else {
                let s = synthworld::random_scene(&mut rng, 0);
                (synthworld::render_scene(&s, variation), Label::Scene(s))
            };
            augment(&mut im, &mut rng, config.max_noise);
            x.extend_from_slice(&im.data);
            labels.push(label);
        }
        final_loss = probe.train_step(&x, &labels);
        if !final_loss.is_finite() {
            return Err(AplError::NonFinite(format!("probe loss at step {step}")));
        }
        opt.step(&mut probe);
        if step % 250 == 0 {
            log::info!("probe step {step}/{} loss {final_loss:.4}", config.steps);
        }
    }

    let mut erng = seed::rng(config.seed, "probe-eval", &[]);
    let mut people = Vec::new();
    let mut recs = Vec::new();
    for rec in &world.identities {
        for k in 0..config.eval_renders {
            people.push(synthworld::render_identity(rec, heldout_variation(rec.id, k)));
            recs.push(rec.clone());
        }
    }
    for _ in 0..200 {
        let rec = synthworld::anonymous_record(&mut erng, world.schema());
        people.push(synthworld::render_identity(&rec, erng.random()));
        recs.push(rec);
    }
    let scenes: Vec<SceneRecord> = (0..200).map(|i| synthworld::random_scene(&mut erng, i)).collect();
    let scene_images: Vec<Image> = scenes.iter().map(|s| synthworld::render_scene(s, erng.random())).collect();
    let po = probe.attr_features(&people);
    let so = probe.attr_features(&scene_images);
    let frac = |n: usize, d: usize| n as f64 / d as f64;
    let report = ProbeReport {
        all_heads_accuracy: frac(po.iter().zip(&recs).filter(|(o, r)| person_correct(o, r)).count(), po.len()),
        presence_on_people: frac(po.iter().filter(|o| o.presence > 0.5).count(), po.len()),
        absence_on_scenes: frac(so.iter().filter(|o| o.presence <= 0.5).count(), so.len()),
        scene_accuracy: frac(
            so.iter()
                .zip(&scenes)
                .filter(|(o, s)| {
                    o.scene_value(0) == s.shape as usize && o.scene_value(1) == s.color as usize && o.scene_value(2) == s.background as usize
                })
                .count(),
            so.len(),
        ),
        final_loss,
    };
    log::info!("probe report {report:?}");
    for (name, v) in [
        ("attribute", report.all_heads_accuracy),
        ("presence", report.presence_on_people),
        ("absence", report.absence_on_scenes),
        ("scene", report.scene_accuracy),
    ] {
        if v < 0.95 {
            return Err(AplError::Accuracy(format!("probe {name} accuracy {v:.3} on held-out renders")));
        }
    }
    Ok((probe, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::WorldConfig;

    #[test]
    fn cosine_edges() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 3.0]), 0.0);
    }

    #[test]
    fn embeddings_are_unit_norm_and_prototype_lookup_fails_cleanly() {
        let world = World::generate(&WorldConfig { n_train: 2, n_test: 1, n_holdout: 0, ..WorldConfig::default() }).unwrap();
        let mut rng = seed::rng(1, "t", &[]);
        let mut emb = IdentityEmbedder::new(TrunkConfig::default(), vec![0, 1, 2], &mut rng);
        let ims: Vec<Image> = world.identities.iter().map(|r| synthworld::render_identity(r, 0)).collect();
        for e in emb.embed(&ims) {
            let n: f64 = e.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(emb.id_acc(&ims[0], 0).is_err());
        emb.build_prototypes(&world).unwrap();
        let v = emb.id_acc(&ims[0], 0).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        // prototype equal to the embedding gives exactly 1
        let e = emb.embed(std::slice::from_ref(&ims[1]))[0].clone();
        emb.prototypes.insert(1, e);
        assert!((emb.id_acc(&ims[1], 1).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_classifier_gradient_matches_finite_differences() {
        let mut rng = seed::rng(2, "t", &[]);
        let mut emb = IdentityEmbedder::new(TrunkConfig { stage_width: 4, width: 8, heads: 2 }, vec![0, 1, 2], &mut rng);
        let x = gaussian(2 * PIXELS, &mut rng);
        let labels = [2, 0];
        emb.train_step(&x, &labels);
        let analytic = emb.classes.grad.clone();
        let loss_at = |e: &mut IdentityEmbedder| {
            let l = e.train_step(&x, &labels);
            apl_nn::param::zero_grads(e);
            l
        };
        let h = 1e-2;
        for k in [0, 5, 70, 150, 191] {
            let orig = emb.classes.value[k];
            emb.classes.value[k] = orig + h;
            let lp = loss_at(&mut emb);
            emb.classes.value[k] = orig - h;
            let lm = loss_at(&mut emb);
            emb.classes.value[k] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!((fd - analytic[k] as f64).abs() < 2e-3 + 0.02 * fd.abs(), "class grad {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn head_layout_is_contiguous() {
        let l = HeadLayout::for_schema(&AttributeSchema::default());
        assert_eq!(l.total(), 2 + 3 + 4 + 4 + 1 + 4 + 4 + 3);
        assert_eq!(l.category_range(2), 5..9);
        assert_eq!(l.presence_offset(), 13);
        assert_eq!(l.scene_range(2), 22..25);
    }
}
