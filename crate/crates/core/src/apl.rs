//! Anonymization prompts: a learned prefix of soft tokens trained so that
//! identity-naming prompts produce an anonymous person with the described
//! attributes while every other prompt keeps its original output.
//!
//! The training target for a sample with name prompt `c1` and attribute
//! prompt `c2` is `eps(c2) + alpha * (eps(c2) - eps(c1))`, evaluated by the
//! frozen model without the prefix and held constant. The prefixed model
//! output for `c1` is regressed onto it. Regularization samples use
//! `c1 = c2`, so their target is the model's own unprefixed output.

use apl_nn::{Adam, Float, Module, Param};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussian, DiffusionModel};
use crate::error::{AplError, Result};
use crate::image::PIXELS;
use crate::seed;
use crate::synthworld::TripletSample;
use crate::textenc::{EncoderGrad, TokenBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct AnonymizationPrompt {
    /// `m × d`, row-major.
    pub vectors: Vec<f32>,
    pub m: usize,
    pub d: usize,
    pub iteration: u64,
    pub alpha: f64,
    /// Fingerprint of the encoder whose embedding space the vectors live in.
    pub fingerprint: [u8; 32],
}

impl AnonymizationPrompt {
    pub fn new(vectors: Vec<f32>, m: usize, d: usize, fingerprint: [u8; 32]) -> Result<Self> {
        if vectors.len() != m * d {
            return Err(AplError::Shape(format!("{} values for a {m}x{d} prompt", vectors.len())));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(AplError::NonFinite("prompt vectors".into()));
        }
        Ok(Self { vectors, m, d, iteration: 0, alpha: 1.0, fingerprint })
    }

    /// The zero-length prompt; encodes exactly like no prompt at all.
    pub fn empty(d: usize, fingerprint: [u8; 32]) -> Self {
        Self { vectors: Vec::new(), m: 0, d, iteration: 0, alpha: 0.0, fingerprint }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    /// Checks the prompt can be prepended for an encoder of width `d` with
    /// the given fingerprint.
    pub fn check_compatible(&self, d: usize, fingerprint: &[u8; 32]) -> Result<()> {
        if self.d != d {
            return Err(AplError::PromptWidth { prompt: self.d, encoder: d });
        }
        if &self.fingerprint != fingerprint {
            return Err(AplError::Fingerprint(format!(
                "prompt belongs to encoder {}, model encoder is {}",
                hex::encode(&self.fingerprint[..8]),
                hex::encode(&fingerprint[..8])
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Gaussian,
    VocabMean,
    Zeros,
}

pub const INIT_STD: f64 = 0.02;

/// Fresh prompt vectors. `vocab_mean` is required for [`InitMode::VocabMean`].
pub fn init_prompt(
    m: usize,
    d: usize,
    seed_value: u64,
    mode: InitMode,
    vocab_mean: Option<&[f32]>,
    fingerprint: [u8; 32],
) -> Result<AnonymizationPrompt> {
    if m == 0 {
        return Err(AplError::Config("prompt length m must be at least 1".into()));
    }
    let vectors = match mode {
        InitMode::Zeros => vec![0.0; m * d],
        InitMode::Gaussian => {
            let mut rng = seed::rng(seed_value, "prompt-init", &[]);
            gaussian(m * d, &mut rng).into_iter().map(|v| v * INIT_STD as f32).collect()
        }
        InitMode::VocabMean => {
            let mean = vocab_mean.ok_or_else(|| AplError::Config("vocab-mean init needs the token table".into()))?;
            if mean.len() != d {
                return Err(AplError::PromptWidth { prompt: d, encoder: mean.len() });
            }
            mean.repeat(m)
        }
    };
    AnonymizationPrompt::new(vectors, m, d, fingerprint)
}

/// `eps_c2 + alpha * (eps_c2 - eps_c1)`.
pub fn compose_target_score<T: Float>(eps_c1: &[T], eps_c2: &[T], alpha: f64) -> Result<Vec<T>> {
    if eps_c1.len() != eps_c2.len() {
        return Err(AplError::Shape(format!("predictions of length {} and {}", eps_c1.len(), eps_c2.len())));
    }
    let a = T::lit(alpha);
    Ok(eps_c1.iter().zip(eps_c2).map(|(&e1, &e2)| e2 + a * (e2 - e1)).collect())
}

/// Loss value and its gradient with respect to the prompt vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub grad: Vec<T>,
    /// The composed target the prefixed prediction was regressed onto.
    pub target: Vec<T>,
}

/// Batched loss over `(x0, c1, c2)` triplets at given timesteps and noise.
/// Mean squared error over all elements; gradient reaches only `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn prompt_loss<T: Float>(
    model: &mut DiffusionModel<T>,
    x0: &[T],
    c1: &TokenBatch,
    c2: &TokenBatch,
    prefix: &[T],
    alpha: f64,
    t: &[usize],
    eps: &[T],
) -> Result<LossGrad<T>> {
    let b = t.len();
    if x0.len() != b * PIXELS || eps.len() != x0.len() || c1.batch != b || c2.batch != b {
        return Err(AplError::Shape("prompt loss inputs disagree on batch size".into()));
    }
    let mut xt = vec![T::zero(); x0.len()];
    for (i, &s) in t.iter().enumerate() {
        model.schedule.check(s)?;
        let ab = model.schedule.alpha_bar(s);
        let (ka, kb) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        for j in i * PIXELS..(i + 1) * PIXELS {
            xt[j] = ka * x0[j] + kb * eps[j];
        }
    }
    let plain1 = model.encoder.encode(c1)?;
    let eps_c1 = model.denoiser.predict(&xt, t, &plain1);
    let eps_c2 = if c1.ids == c2.ids {
        eps_c1.clone()
    } else {
        let plain2 = model.encoder.encode(c2)?;
        model.denoiser.predict(&xt, t, &plain2)
    };
    let target = compose_target_score(&eps_c1, &eps_c2, alpha)?;

    let (text, enc_cache) = model.encoder.forward(c1, prefix)?;
    let (pred, den_cache) = model.denoiser.forward(&xt, t, &text);
    let n = pred.len() as f64;
    let loss = pred.iter().zip(&target).map(|(p, q)| (*p - *q).to_f64_lossy().powi(2)).sum::<f64>() / n;
    let k = T::lit(2.0 / n);
    let d_pred: Vec<T> = pred.iter().zip(&target).map(|(p, q)| k * (*p - *q)).collect();
    let d_text = model.denoiser.backward(&den_cache, &d_pred, false);
    let grad = model.encoder.backward(&enc_cache, &d_text, &EncoderGrad::Frozen);
    Ok(LossGrad { loss, grad, target })
}

fn single<T: Float>(model: &DiffusionModel<T>, sample: &TripletSample) -> Result<(Vec<T>, TokenBatch, TokenBatch)> {
    let x0 = sample.image.data.iter().map(|v| T::lit(*v as f64)).collect();
    Ok((x0, model.tokens(&[&sample.c1])?, model.tokens(&[&sample.c2])?))
}

/// Identity loss for one triplet (`c1` names the person, `c2` describes it).
pub fn loss_id<T: Float>(
    model: &mut DiffusionModel<T>,
    sample: &TripletSample,
    prefix: &[T],
    alpha: f64,
    t: usize,
    eps: &[T],
) -> Result<LossGrad<T>> {
    if sample.is_regularization() {
        return Err(AplError::Precondition("identity loss needs distinct c1 and c2".into()));
    }
    let (x0, c1, c2) = single(model, sample)?;
    prompt_loss(model, &x0, &c1, &c2, prefix, alpha, &[t], eps)
}

/// Regularization loss for one triplet with `c1 = c2`.
pub fn loss_reg<T: Float>(
    model: &mut DiffusionModel<T>,
    sample: &TripletSample,
    prefix: &[T],
    alpha: f64,
    t: usize,
    eps: &[T],
) -> Result<LossGrad<T>> {
    if !sample.is_regularization() {
        return Err(AplError::Precondition("regularization loss needs c1 == c2".into()));
    }
    let (x0, c1, c2) = single(model, sample)?;
    prompt_loss(model, &x0, &c1, &c2, prefix, alpha, &[t], eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AplConfig {
    pub alpha: f64,
    pub m: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub mix_id: f64,
    pub mix_reg: f64,
    /// Disables the regularization stream entirely (ablation).
    pub regularize: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub init: InitMode,
}

impl Default for AplConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            m: 10,
            lr: 1e-3,
            steps: 20_000,
            batch: 1,
            mix_id: 1.0,
            mix_reg: 1.0,
            regularize: true,
            seed: 5,
            checkpoint_every: 1000,
            init: InitMode::Gaussian,
        }
    }
}

impl AplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AplError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.steps == 0 || self.batch == 0 || self.checkpoint_every == 0 {
            return Err(AplError::Config("steps, batch and checkpoint_every must be >= 1".into()));
        }
        if !(self.mix_id > 0.0 && self.mix_reg > 0.0) {
            return Err(AplError::Config("mix ratio components must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(AplError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AplReport {
    pub steps: usize,
    /// Per-step mixed loss.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<u64>,
    pub frozen_hash: String,
}

impl AplReport {
    /// Mean loss over the first and last `window` steps.
    pub fn leading_trailing(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

struct PromptParam(Param<f32>);

impl Module<f32> for PromptParam {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        f(prefix, &self.0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        f(prefix, &mut self.0);
    }
}

/// Optimizes the prompt vectors only. `checkpoint` receives the prompt every
/// `checkpoint_every` steps; the frozen model hash is verified at the end.
pub fn train_apl(
    model: &mut DiffusionModel,
    s_id: &[TripletSample],
    s_reg: &[TripletSample],
    config: &AplConfig,
    init: AnonymizationPrompt,
    mut checkpoint: impl FnMut(&AnonymizationPrompt) -> Result<()>,
) -> Result<(AnonymizationPrompt, AplReport)> {
    config.validate()?;
    if s_id.is_empty() || (config.regularize && s_reg.is_empty()) {
        return Err(AplError::EmptyDataset("APL needs identity samples and, when regularizing, scenes".into()));
    }
    if let Some(bad) = s_id.iter().find(|s| s.is_regularization()) {
        return Err(AplError::Precondition(format!("identity sample with c1 == c2 ({})", bad.c1)));
    }
    if let Some(bad) = s_reg.iter().find(|s| !s.is_regularization()) {
        return Err(AplError::Precondition(format!("regularization sample with c1 != c2 ({})", bad.c1)));
    }
    init.check_compatible(model.text_dim(), &model.encoder_fingerprint())?;
    let before = model.frozen_hash();
    let shape = [init.m, init.d];
    let mut prompt = PromptParam(Param::from_values(&shape, init.vectors.clone()));
    let mut opt = Adam::new(config.lr);
    let mut rng = seed::rng(config.seed, "apl-train", &[]);
    let p_id = if config.regularize { config.mix_id / (config.mix_id + config.mix_reg) } else { 1.0 };
    let mut losses = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    let mut current = init.clone();
    current.alpha = config.alpha;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let s = if rng.random_bool(p_id) {
                &s_id[rng.random_range(0..s_id.len())]
            } else {
                &s_reg[rng.random_range(0..s_reg.len())]
            };
            batch.push(s);
        }
        let t: Vec<usize> = (0..config.batch).map(|_| rng.random_range(1..=model.schedule.steps())).collect();
        let eps = gaussian(config.batch * PIXELS, &mut rng);
        let x0: Vec<f32> = batch.iter().flat_map(|s| s.image.data.iter().copied()).collect();
        let c1 = model.tokens(&batch.iter().map(|s| &s.c1).collect::<Vec<_>>())?;
        let c2 = model.tokens(&batch.iter().map(|s| &s.c2).collect::<Vec<_>>())?;
        let out = prompt_loss(model, &x0, &c1, &c2, &prompt.0.value, config.alpha, &t, &eps)?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(AplError::NonFinite(format!(
                "APL loss at step {step}; last good checkpoint is iteration {}",
                checkpoints.last().copied().unwrap_or(0)
            )));
        }
        losses.push(out.loss);
        prompt.0.grad.copy_from_slice(&out.grad);
        opt.step(&mut prompt);
        if step % config.checkpoint_every == 0 || step == config.steps {
            current.vectors.clone_from(&prompt.0.value);
            current.iteration = step as u64;
            if step % config.checkpoint_every == 0 {
                checkpoint(&current)?;
                checkpoints.push(step as u64);
            }
            let w = config.checkpoint_every.min(losses.len());
            let recent = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
            log::info!("apl step {step}/{} loss {recent:.6}", config.steps);
        }
    }
    let after = model.frozen_hash();
    if after != before {
        return Err(AplError::FrozenHash(format!("model hash changed from {before} to {after}")));
    }
    Ok((current, AplReport { steps: config.steps, losses, checkpoints, frozen_hash: after }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ModelConfig;
    use crate::synthworld::{build_reg_dataset, World, WorldConfig};
    use crate::textenc::Vocabulary;

    fn world() -> World {
        World::generate(&WorldConfig::default()).unwrap()
    }

    fn model() -> DiffusionModel {
        let w = world();
        let vocab = Vocabulary::build(w.schema(), 90, 16).unwrap();
        let mut m = DiffusionModel::new(ModelConfig::default(), vocab, 3).unwrap();
        // give the zero-initialized head some weight so predictions depend on inputs
        let mut rng = seed::rng(4, "test-head", &[]);
        m.denoiser.head.weight.value = gaussian(m.denoiser.head.weight.len(), &mut rng).iter().map(|v| v * 0.2).collect();
        m
    }

    #[test]
    fn init_modes() {
        let fp = [0u8; 32];
        let z = init_prompt(10, 64, 1, InitMode::Zeros, None, fp).unwrap();
        assert!(z.vectors.iter().all(|v| *v == 0.0));
        let g = init_prompt(10, 64, 1, InitMode::Gaussian, None, fp).unwrap();
        let n = g.vectors.len() as f64;
        let mean = g.vectors.iter().map(|v| *v as f64).sum::<f64>() / n;
        let sd = (g.vectors.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.02).abs() / 0.02 < 0.2, "{sd}");
        assert_eq!(g, init_prompt(10, 64, 1, InitMode::Gaussian, None, fp).unwrap());
        let mean_row = vec![0.5f32; 64];
        let v = init_prompt(2, 64, 1, InitMode::VocabMean, Some(&mean_row), fp).unwrap();
        assert!(v.vectors.iter().all(|x| *x == 0.5));
        assert!(init_prompt(2, 64, 1, InitMode::VocabMean, None, fp).is_err());
        assert!(init_prompt(0, 64, 1, InitMode::Zeros, None, fp).is_err());
    }

    #[test]
    fn composition_algebra() {
        let v1 = [0.3f64, -1.25, 2.0];
        let v2 = [1.5f64, 0.75, -0.5];
        assert_eq!(compose_target_score(&v1, &v2, 0.0).unwrap(), v2.to_vec());
        for alpha in [0.0, 0.5, 1.0, 2.0, 5.0] {
            assert_eq!(compose_target_score(&v1, &v1, alpha).unwrap(), v1.to_vec());
        }
        let expect: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| 2.0 * b - a).collect();
        assert_eq!(compose_target_score(&v1, &v2, 1.0).unwrap(), expect);
        assert!(compose_target_score(&v1, &v2[..2], 1.0).is_err());
    }

    fn id_sample(w: &World) -> TripletSample {
        w.build_id_dataset(&w.records(&[3]).unwrap(), 1, 0).unwrap().remove(0)
    }

    #[test]
    fn constant_denoiser_gives_zero_loss() {
        let w = world();
        let mut m = model();
        m.denoiser.head.weight.value.iter_mut().for_each(|v| *v = 0.0);
        m.denoiser.head.bias.as_mut().unwrap().value.iter_mut().for_each(|v| *v = 0.7);
        let s = id_sample(&w);
        let prefix = gaussian(10 * 64, &mut seed::rng(1, "p", &[]));
        let eps = gaussian(PIXELS, &mut seed::rng(2, "e", &[]));
        let out = loss_id(&mut m, &s, &prefix, 1.0, 50, &eps).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn text_blind_denoiser_zero_loss_at_alpha_zero() {
        let w = world();
        let mut m = model();
        for blk in &mut m.denoiser.blocks {
            let ca = blk.cross.as_mut().unwrap();
            ca.attn.o.weight.value.iter_mut().for_each(|v| *v = 0.0);
            ca.attn.o.bias.as_mut().unwrap().value.iter_mut().for_each(|v| *v = 0.0);
        }
        let s = id_sample(&w);
        let prefix = gaussian(4 * 64, &mut seed::rng(1, "p", &[]));
        let eps = gaussian(PIXELS, &mut seed::rng(2, "e", &[]));
        let out = loss_id(&mut m, &s, &prefix, 0.0, 120, &eps).unwrap();
        assert!(out.loss < 1e-12, "{}", out.loss);
    }

    #[test]
    fn alpha_zero_is_distance_to_plain_c2() {
        let w = world();
        let mut m = model();
        let s = id_sample(&w);
        let prefix = gaussian(4 * 64, &mut seed::rng(1, "p", &[]));
        let eps = gaussian(PIXELS, &mut seed::rng(2, "e", &[]));
        let out = loss_id(&mut m, &s, &prefix, 0.0, 80, &eps).unwrap();
        let xt = m.schedule.noise_batch(&s.image.data, &[80], &eps).unwrap();
        let e2 = m.denoiser.predict(&xt, &[80], &m.embed(&[&s.c2], None).unwrap());
        let p = m.denoiser.predict(&xt, &[80], &m.embed(&[&s.c1], Some(&prefix)).unwrap());
        let direct = crate::diffusion::mse(&p, &e2);
        assert_eq!(out.target, e2);
        assert!((out.loss - direct).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn regularization_collapses_to_plain_prediction() {
        let mut m = model();
        let s = build_reg_dataset(1, 3).unwrap().remove(0);
        let eps = gaussian(PIXELS, &mut seed::rng(2, "e", &[]));
        let prefix = gaussian(3 * 64, &mut seed::rng(1, "p", &[]));
        let xt = m.schedule.noise_batch(&s.image.data, &[77], &eps).unwrap();
        let plain = m.denoiser.predict(&xt, &[77], &m.embed(&[&s.c1], None).unwrap());
        for alpha in [0.0, 1.0, 5.0] {
            let out = loss_reg(&mut m, &s, &prefix, alpha, 77, &eps).unwrap();
            assert_eq!(out.target, plain);
        }
        let empty = loss_reg(&mut m, &s, &[], 1.0, 77, &eps).unwrap();
        assert_eq!(empty.loss, 0.0);
        let w = world();
        assert!(matches!(loss_reg(&mut m, &id_sample(&w), &prefix, 1.0, 77, &eps), Err(AplError::Precondition(_))));
    }

    #[test]
    fn gradient_ignores_the_target_path() {
        // prediction equals the target when the prefix is empty; the only
        // gradient would come from differentiating the target, which must not
        // happen, so it is exactly zero
        let mut m = model();
        let s = build_reg_dataset(1, 9).unwrap().remove(0);
        let eps = gaussian(PIXELS, &mut seed::rng(2, "e", &[]));
        let out = loss_reg(&mut m, &s, &[], 1.0, 30, &eps).unwrap();
        assert!(out.grad.is_empty());
        assert_eq!(out.loss, 0.0);
        assert_eq!(apl_nn::param::grad_norm_sq(&m.encoder) + apl_nn::param::grad_norm_sq(&m.denoiser), 0.0);
    }

    #[test]
    fn short_training_run_checkpoints_and_keeps_model_frozen() {
        let w = world();
        let mut m = model();
        let s_id = w.build_id_dataset(&w.records(&[0, 1]).unwrap(), 2, 0).unwrap();
        let s_reg = build_reg_dataset(4, 0).unwrap();
        let cfg = AplConfig { steps: 6, checkpoint_every: 2, m: 2, ..AplConfig::default() };
        let init = init_prompt(2, 64, 0, InitMode::Gaussian, None, m.encoder_fingerprint()).unwrap();
        let before = m.frozen_hash();
        let mut seen = Vec::new();
        let (p, report) = train_apl(&mut m, &s_id, &s_reg, &cfg, init.clone(), |p| {
            seen.push(p.iteration);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4, 6]);
        assert_eq!(report.checkpoints.len(), cfg.steps / cfg.checkpoint_every);
        assert_eq!(m.frozen_hash(), before);
        assert_ne!(p.vectors, init.vectors);
        assert_eq!(p.iteration, 6);

        let wrong = AnonymizationPrompt { fingerprint: [7; 32], ..init };
        assert!(matches!(train_apl(&mut m, &s_id, &s_reg, &cfg, wrong, |_| Ok(())), Err(AplError::Fingerprint(_))));
    }
}
