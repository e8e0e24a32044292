//! Forward noising, the conditional model wrapper, base training and the
//! two samplers.

use apl_nn::{Adam, Float};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{AplError, Result};
use crate::image::{Image, Origin, PIXELS};
use crate::seed;
use crate::synthworld::{self, Prompt, World};
use crate::textenc::{EncoderConfig, EncoderGrad, TextEmbedding, TextEncoder, TokenBatch, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas for steps `1..=steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(AplError::Config("schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(AplError::Config(format!("betas must satisfy 0 < {beta_start} < {beta_end} < 1")));
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(AplError::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product at `t`, with `alpha_bar(0) = 1`.
    /// Denoising-loss weight at step `t`: `(1 - ᾱ) / ᾱ` clamped to
    /// `[1, cap]`. A cap of 1 gives the plain noise-prediction loss.
    pub fn loss_weight(&self, t: usize, cap: f64) -> f64 {
        let ab = self.alpha_bar(t);
        ((1.0 - ab) / ab).clamp(1.0, cap.max(1.0))
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `sqrt(ab) x0 + sqrt(1 - ab) eps` per sample.
    pub fn noise_batch(&self, x0: &[f32], t: &[usize], eps: &[f32]) -> Result<Vec<f32>> {
        if x0.len() != eps.len() || x0.len() != t.len() * PIXELS {
            return Err(AplError::Shape("noise and image batches disagree".into()));
        }
        for &s in t {
            self.check(s)?;
        }
        let mut out = vec![0.0; x0.len()];
        for (i, &s) in t.iter().enumerate() {
            let ab = self.alpha_bar(s);
            let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let r = i * PIXELS..(i + 1) * PIXELS;
            for ((o, x), e) in out[r.clone()].iter_mut().zip(&x0[r.clone()]).zip(&eps[r]) {
                *o = a * x + b * e;
            }
        }
        Ok(out)
    }
}

/// A noised image together with its step and the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Vec<f32>,
    pub t: usize,
    pub eps: Option<Vec<f32>>,
}

pub fn forward_noise(x0: &Image, t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<LatentState> {
    let x = schedule.noise_batch(&x0.data, &[t], eps)?;
    Ok(LatentState { x, t, eps: Some(eps.to_vec()) })
}

pub fn gaussian(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Anything that predicts noise from `(x_t, t, text)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &[f32], t: &[usize], text: &TextEmbedding<f32>) -> Vec<f32>;
}

impl NoisePredictor for Denoiser<f32> {
    fn predict_noise(&self, x: &[f32], t: &[usize], text: &TextEmbedding<f32>) -> Vec<f32> {
        self.predict(x, t, text)
    }
}

/// Mean squared error between drawn noise and the prediction, timesteps
/// uniform in `1..=T`.
pub fn loss_dm<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &[f32],
    text: &TextEmbedding<f32>,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let b = text.batch;
    if b == 0 || x0.len() != b * PIXELS {
        return Err(AplError::EmptyDataset("loss_dm needs a nonempty, consistent batch".into()));
    }
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(x0.len(), rng);
    let xt = schedule.noise_batch(x0, &t, &eps)?;
    let pred = model.predict_noise(&xt, &t, text);
    Ok(mse(&pred, &eps))
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

/// Text encoder, denoiser and schedule: one text-to-image model.
#[derive(Clone, Debug)]
pub struct DiffusionModel<T = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: TextEncoder<T>,
    pub denoiser: Denoiser<T>,
    pub schedule: NoiseSchedule,
}

impl<T: Float> DiffusionModel<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, init_seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        let mut rng = seed::rng(init_seed, "model-init", &[]);
        let encoder = TextEncoder::new(config.encoder, vocab.len(), vocab.max_len, &mut rng);
        let denoiser = Denoiser::new(config.denoiser, config.encoder.dim, &mut rng);
        Ok(Self { config, vocab, encoder, denoiser, schedule })
    }

    /// The same weights at another precision.
    pub fn cast<U: Float>(&self) -> DiffusionModel<U> {
        let mut out = DiffusionModel::<U>::new(self.config, self.vocab.clone(), 0).expect("config already validated");
        apl_nn::param::copy_params(&self.encoder, &mut out.encoder);
        apl_nn::param::copy_params(&self.denoiser, &mut out.denoiser);
        out
    }

    pub fn text_dim(&self) -> usize {
        self.config.encoder.dim
    }

    /// Hash of the encoder weights; identifies the embedding space a prompt
    /// was trained in.
    pub fn encoder_fingerprint(&self) -> [u8; 32] {
        apl_nn::param::content_hash(&self.encoder)
    }

    pub fn denoiser_hash(&self) -> [u8; 32] {
        apl_nn::param::content_hash(&self.denoiser)
    }

    /// Hash over both frozen parts.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder_fingerprint());
        h.update(self.denoiser_hash());
        hex::encode(h.finalize())
    }

    pub fn tokens(&self, prompts: &[&Prompt]) -> Result<TokenBatch> {
        let seqs = prompts.iter().map(|p| self.vocab.tokenize_prompt(p)).collect::<Result<Vec<_>>>()?;
        TokenBatch::new(&seqs.iter().collect::<Vec<_>>())
    }

    /// Encodes prompts, with the prefix inserted when given.
    pub fn embed(&self, prompts: &[&Prompt], prefix: Option<&[T]>) -> Result<TextEmbedding<T>> {
        let tokens = self.tokens(prompts)?;
        self.encoder.encode_with_prefix(&tokens, prefix.unwrap_or(&[]))
    }

    pub fn param_count(&self) -> usize {
        apl_nn::param::param_count(&self.encoder) + apl_nn::param::param_count(&self.denoiser)
    }
}

impl NoisePredictor for DiffusionModel {
    fn predict_noise(&self, x: &[f32], t: &[usize], text: &TextEmbedding<f32>) -> Vec<f32> {
        self.denoiser.predict(x, t, text)
    }
}

fn initial_noise(seed_value: u64) -> Vec<f32> {
    gaussian(PIXELS, &mut seed::rng(seed_value, "initial-noise", &[]))
}

fn finish(x: Vec<f32>, seeds: &[u64]) -> Vec<Image> {
    x.chunks_exact(PIXELS)
        .zip(seeds)
        .map(|(c, &s)| {
            let mut im = Image { data: c.to_vec(), origin: Origin::Generated { seed: s } };
            im.clamp();
            im
        })
        .collect()
}

fn predicted_x0(x: f32, eps: f32, ab: f64) -> f32 {
    (((x as f64) - (1.0 - ab).sqrt() * eps as f64) / ab.sqrt()).clamp(-1.0, 1.0) as f32
}

/// Ancestral sampling from `T` down to 1, one image per seed. Each sample's
/// noise comes from its own seed, so results do not depend on batching.
pub fn sample_ddpm<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    text: &TextEmbedding<f32>,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    if seeds.len() != text.batch {
        return Err(AplError::Shape("one seed per prompt required".into()));
    }
    let mut rngs: Vec<_> = seeds.iter().map(|&s| seed::rng(s, "ddpm-steps", &[])).collect();
    let mut x: Vec<f32> = seeds.iter().flat_map(|&s| initial_noise(s)).collect();
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict_noise(&x, &vec![t; seeds.len()], text);
        let (ab, ab_prev, beta) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1), schedule.beta(t));
        let c0 = beta * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for (i, rng) in rngs.iter_mut().enumerate() {
            for j in i * PIXELS..(i + 1) * PIXELS {
                let x0 = predicted_x0(x[j], eps[j], ab) as f64;
                let mean = c0 * x0 + ct * x[j] as f64;
                let z: f64 = if t > 1 { StandardNormal.sample(rng) } else { 0.0 };
                x[j] = (mean + sigma * z) as f32;
            }
        }
    }
    Ok(finish(x, seeds))
}

/// Strided timesteps `ceil((i + 1) T / steps)` for `i in 0..steps`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|i| ((i + 1) * total).div_ceil(steps)).collect()
}

/// Deterministic sampling over a strided subset of timesteps. The only
/// randomness is the initial noise drawn from each seed.
pub fn sample_ddim<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    text: &TextEmbedding<f32>,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    let x: Vec<f32> = seeds.iter().flat_map(|&s| initial_noise(s)).collect();
    ddim_from(model, schedule, text, steps, x, seeds)
}

/// DDIM trajectory from a caller-supplied starting noise.
pub fn ddim_from<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    text: &TextEmbedding<f32>,
    steps: usize,
    mut x: Vec<f32>,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    if steps == 0 || steps > schedule.steps() {
        return Err(AplError::Config(format!("ddim steps must lie in 1..={}", schedule.steps())));
    }
    if seeds.len() != text.batch || x.len() != seeds.len() * PIXELS {
        return Err(AplError::Shape("one seed and one noise image per prompt required".into()));
    }
    let ts = ddim_timesteps(schedule.steps(), steps);
    for (k, &t) in ts.iter().enumerate().rev() {
        let prev = if k == 0 { 0 } else { ts[k - 1] };
        let eps = model.predict_noise(&x, &vec![t; seeds.len()], text);
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        for (v, e) in x.iter_mut().zip(&eps) {
            let x0 = predicted_x0(*v, *e, ab) as f64;
            let e_hat = (*v as f64 - ab.sqrt() * x0) / (1.0 - ab).sqrt();
            *v = (ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e_hat) as f32;
        }
    }
    Ok(finish(x, seeds))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Relative weights of the three streams: identity renders with their
    /// name prompt, person renders with an attribute prompt, and scenes.
    pub mix_name: f64,
    pub mix_attr: f64,
    pub mix_scene: f64,
    /// Share of the attribute stream drawn as anonymous people with fresh
    /// textures instead of named identities.
    pub anonymous_share: f64,
    pub grad_clip: f64,
    /// Upper clamp of the inverse-SNR loss weight; 1 disables weighting.
    pub snr_cap: f64,
    pub log_every: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch: 32,
            lr: 2e-4,
            seed: 11,
            mix_name: 0.4,
            mix_attr: 0.3,
            mix_scene: 0.3,
            anonymous_share: 0.75,
            grad_clip: 1.0,
            snr_cap: 20.0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, mean loss since the previous entry)`.
    pub curve: Vec<(usize, f64)>,
    pub frozen_hash: String,
}

/// One training pair drawn from the mixed stream.
pub fn draw_pair(world: &World, identities: &[u32], config: &BaseTrainConfig, rng: &mut impl Rng) -> Result<(Image, Prompt)> {
    let total = config.mix_name + config.mix_attr + config.mix_scene;
    let u = rng.random::<f64>() * total;
    let variation = rng.random::<u64>();
    if u < config.mix_name + config.mix_attr {
        let named = u < config.mix_name;
        if !named && rng.random_bool(config.anonymous_share) {
            let rec = synthworld::anonymous_record(rng, world.schema());
            return Ok((synthworld::render_identity(&rec, variation), world.make_attr_prompt(&rec)));
        }
        let id = identities[rng.random_range(0..identities.len())];
        let rec = world.record(id)?;
        let prompt = if named { world.make_id_prompt(rec)? } else { world.make_attr_prompt(rec) };
        Ok((synthworld::render_identity(rec, variation), prompt))
    } else {
        let scene = synthworld::random_scene(rng, u32::MAX);
        Ok((synthworld::render_scene(&scene, variation), synthworld::scene_prompt(&scene)))
    }
}

/// One clipped Adam step of the denoising objective on a batch. Encoder
/// parameters receive gradient as selected by `grads`; the denoiser always
/// trains. Returns the weighted batch loss.
pub fn train_step(
    model: &mut DiffusionModel,
    (opt_enc, opt_den): (&mut Adam, &mut Adam),
    images: &[f32],
    prompts: &[Prompt],
    grads: &EncoderGrad,
    (grad_clip, snr_cap): (f64, f64),
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = prompts.len();
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=model.schedule.steps())).collect();
    let eps = gaussian(images.len(), rng);
    let xt = model.schedule.noise_batch(images, &t, &eps)?;
    let tokens = model.tokens(&prompts.iter().collect::<Vec<_>>())?;
    let (text, enc_cache) = model.encoder.forward(&tokens, &[])?;
    let (pred, den_cache) = model.denoiser.forward(&xt, &t, &text);
    let per = pred.len() / batch;
    let weights: Vec<f64> = t.iter().map(|&t| model.schedule.loss_weight(t, snr_cap)).collect();
    let loss = pred
        .chunks(per)
        .zip(eps.chunks(per))
        .zip(&weights)
        .map(|((p, e), w)| w * mse(p, e))
        .sum::<f64>()
        / batch as f64;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let scale = 2.0 / pred.len() as f64;
    let d_pred: Vec<f32> = pred
        .iter()
        .zip(&eps)
        .enumerate()
        .map(|(i, (p, e))| (scale * weights[i / per]) as f32 * (p - e))
        .collect();
    let d_text = model.denoiser.backward(&den_cache, &d_pred, true);
    if *grads != EncoderGrad::Frozen {
        model.encoder.backward(&enc_cache, &d_text, grads);
    }
    let norm = (apl_nn::param::grad_norm_sq(&model.encoder) + apl_nn::param::grad_norm_sq(&model.denoiser)).sqrt();
    if norm > grad_clip {
        let k = grad_clip / norm;
        apl_nn::param::scale_grads(&mut model.encoder, k);
        apl_nn::param::scale_grads(&mut model.denoiser, k);
    }
    opt_enc.step(&mut model.encoder);
    opt_den.step(&mut model.denoiser);
    Ok(loss)
}

/// Joint training of encoder and denoiser on the mixed stream.
pub fn train_base(
    model: &mut DiffusionModel,
    world: &World,
    identities: &[u32],
    config: &BaseTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<BaseTrainReport> {
    if identities.is_empty() {
        return Err(AplError::EmptyDataset("base training needs identities".into()));
    }
    if config.steps == 0 || config.batch == 0 {
        return Err(AplError::Config("base training needs steps >= 1 and batch >= 1".into()));
    }
    if config.mix_name < 0.0 || config.mix_attr < 0.0 || config.mix_scene < 0.0 || config.mix_name + config.mix_attr + config.mix_scene <= 0.0 {
        return Err(AplError::Config("stream weights must be non-negative with a positive sum".into()));
    }
    let mut rng = seed::rng(config.seed, "base-train", &[]);
    let mut opt_enc = Adam::new(config.lr);
    let mut opt_den = Adam::new(config.lr);
    let mut curve = Vec::new();
    let mut window = (0.0, 0usize);
    let mut initial: Option<f64> = None;
    let mut recent = std::collections::VecDeque::new();
    let mut last = f64::NAN;
    for step in 1..=config.steps {
        let mut images = Vec::with_capacity(config.batch * PIXELS);
        let mut prompts = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let (im, p) = draw_pair(world, identities, config, &mut rng)?;
            images.extend_from_slice(&im.data);
            prompts.push(p);
        }
        let loss = train_step(model, (&mut opt_enc, &mut opt_den), &images, &prompts, &EncoderGrad::All, (config.grad_clip, config.snr_cap), &mut rng)?;
        if !loss.is_finite() {
            return Err(AplError::NonFinite(format!("base training loss at step {step}")));
        }

        recent.push_back(loss);
        if recent.len() > 50 {
            recent.pop_front();
        }
        if step == 10 {
            initial = Some(recent.iter().sum::<f64>() / recent.len() as f64);
        }
        if let Some(init) = initial {
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            if recent.len() == 50 && mean > 10.0 * init {
                return Err(AplError::Diverged(format!(
                    "step {step}: 50-step mean loss {mean:.4} exceeds 10x the initial {init:.4}"
                )));
            }
        }
        window.0 += loss;
        window.1 += 1;
        last = loss;
        if step % config.log_every.max(1) == 0 || step == config.steps {
            let mean = window.0 / window.1 as f64;
            curve.push((step, mean));
            log::info!("base step {step}/{} loss {mean:.5}", config.steps);
            progress(step, mean);
            window = (0.0, 0);
        }
    }
    let initial_loss = initial.unwrap_or(curve.first().map(|c| c.1).unwrap_or(last));
    let final_loss = curve.last().map(|c| c.1).unwrap_or(last);
    Ok(BaseTrainReport { steps: config.steps, initial_loss, final_loss, curve, frozen_hash: model.frozen_hash() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::WorldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        let c = ModelConfig::default();
        NoiseSchedule::linear(c.timesteps, c.beta_start, c.beta_end).unwrap()
    }

    #[test]
    fn terminal_step_is_nearly_pure_noise() {
        let s = sched();
        assert!(s.alpha_bar(s.steps()) < 1e-3, "{}", s.alpha_bar(s.steps()));
        assert!(s.alpha_bar(1) > 0.99);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = sched();
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bar(1) > 0.99);
        assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
    }

    #[test]
    fn step_one_barely_moves_the_image() {
        let s = sched();
        // the largest deviation is sqrt(1 - ab_1)|eps| + (1 - sqrt(ab_1))|x0|
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * 6.0 + (1.0 - s.alpha_bar(1).sqrt());
        assert!(bound < 0.15);
        let world = World::generate(&WorldConfig::default()).unwrap();
        let img = synthworld::render_identity(world.record(0).unwrap(), 0);
        let eps = gaussian(PIXELS, &mut ChaCha8Rng::seed_from_u64(4));
        let st = forward_noise(&img, 1, &eps, &s).unwrap();
        let dev = st.x.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(dev < 0.15, "{dev}");
    }

    #[test]
    fn zero_noise_scales_exactly() {
        let s = sched();
        let img = Image::filled([0.5, -0.25, 1.0], Origin::Blank);
        let st = forward_noise(&img, 120, &[0.0; PIXELS], &s).unwrap();
        let a = s.alpha_bar(120).sqrt() as f32;
        assert!(st.x.iter().zip(&img.data).all(|(x, v)| *x == a * v));
        assert!(matches!(forward_noise(&img, 0, &[0.0; PIXELS], &s), Err(AplError::Timestep { .. })));
        assert!(matches!(forward_noise(&img, 201, &[0.0; PIXELS], &s), Err(AplError::Timestep { .. })));
    }

    #[test]
    fn forward_variance_matches_closed_form() {
        let s = sched();
        let t = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Image::filled([0.3, 0.3, 0.3], Origin::Blank);
        let a = s.alpha_bar(t).sqrt() as f32;
        // 10k draws of one pixel
        let mut sum = 0.0;
        let mut sq = 0.0;
        let n = 10_000;
        for _ in 0..n / 4 {
            let eps = gaussian(PIXELS, &mut rng);
            let st = forward_noise(&img, t, &eps, &s).unwrap();
            for k in [0, 100, 2000, 3000] {
                let r = (st.x[k] - a * img.data[k]) as f64;
                sum += r;
                sq += r * r;
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let expect = 1.0 - s.alpha_bar(t);
        assert!((var - expect).abs() / expect < 0.05, "{var} vs {expect}");
    }

    struct Oracle<'a> {
        x0: &'a [f32],
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict_noise(&self, x: &[f32], t: &[usize], _: &TextEmbedding<f32>) -> Vec<f32> {
            let mut out = vec![0.0; x.len()];
            for (i, &s) in t.iter().enumerate() {
                let ab = self.schedule.alpha_bar(s);
                for j in i * PIXELS..(i + 1) * PIXELS {
                    out[j] = ((x[j] as f64 - ab.sqrt() * self.x0[j] as f64) / (1.0 - ab).sqrt()) as f32;
                }
            }
            out
        }
    }

    fn tiny_model() -> DiffusionModel {
        let world = World::generate(&WorldConfig::default()).unwrap();
        let vocab = Vocabulary::build(world.schema(), 90, 16).unwrap();
        DiffusionModel::new(ModelConfig::default(), vocab, 1).unwrap()
    }

    #[test]
    fn loss_dm_edges() {
        let model = tiny_model();
        let world = World::generate(&WorldConfig::default()).unwrap();
        let ds = world.build_id_dataset(&world.records(&[0, 1, 2, 3]).unwrap(), 8, 0).unwrap();
        let x0: Vec<f32> = ds.iter().flat_map(|s| s.image.data.clone()).collect();
        let prompts: Vec<&Prompt> = ds.iter().map(|s| &s.c1).collect();
        let text = model.embed(&prompts, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // zero-initialized head: loss is the mean square of unit Gaussian noise
        let l = loss_dm(&model, &x0, &text, &model.schedule, &mut rng).unwrap();
        assert!((l - 1.0).abs() < 0.1, "{l}");
        let oracle = Oracle { x0: &x0, schedule: &model.schedule };
        let l0 = loss_dm(&oracle, &x0, &text, &model.schedule, &mut rng).unwrap();
        assert!((0.0..1e-9).contains(&l0), "{l0}");
    }

    #[test]
    fn ddim_timesteps_are_strided() {
        let ts = ddim_timesteps(200, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (4, 200));
        assert_eq!(ddim_timesteps(200, 200), (1..=200).collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(200, 3), vec![67, 134, 200]);
    }

    #[test]
    fn samplers_are_deterministic_and_clamped() {
        let model = tiny_model();
        let p = synthworld::portrait_prompt("name_003");
        let text = model.embed(&[&p, &p], None).unwrap();
        let a = sample_ddim(&model, &model.schedule, &text, 5, &[1, 2]).unwrap();
        let b = sample_ddim(&model, &model.schedule, &text, 5, &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].data, a[1].data);
        let one = model.embed(&[&p], None).unwrap();
        let c = sample_ddim(&model, &model.schedule, &one, 5, &[2]).unwrap();
        assert_eq!(c[0], a[1]);
        let d = sample_ddpm(&model, &model.schedule, &one, &[7]).unwrap();
        assert_eq!(d, sample_ddpm(&model, &model.schedule, &one, &[7]).unwrap());
        assert!(d[0].data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sample_ddim(&model, &model.schedule, &one, 201, &[2]).is_err());
    }

    #[test]
    fn oracle_recovers_the_clean_image() {
        // an exact predictor for a fixed target drives both samplers to it
        let s = sched();
        let target = Image::filled([0.4, -0.2, 0.7], Origin::Blank);
        struct Fixed<'a>(&'a [f32], &'a NoiseSchedule);
        impl NoisePredictor for Fixed<'_> {
            fn predict_noise(&self, x: &[f32], t: &[usize], _: &TextEmbedding<f32>) -> Vec<f32> {
                let ab = self.1.alpha_bar(t[0]);
                x.iter().zip(self.0).map(|(v, x0)| ((*v as f64 - ab.sqrt() * *x0 as f64) / (1.0 - ab).sqrt()) as f32).collect()
            }
        }
        let text = TextEmbedding { values: vec![0.0; 4], mask: vec![true; 1], batch: 1, len: 1, dim: 4 };
        let p = Fixed(&target.data, &s);
        for im in [sample_ddim(&p, &s, &text, 50, &[3]).unwrap(), sample_ddpm(&p, &s, &text, &[3]).unwrap()] {
            let dev = im[0].data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(dev < 1e-3, "{dev}");
        }
    }
}
