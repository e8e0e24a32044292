//! Personalization attack: bind a held-out identity to a fresh token by
//! fine-tuning, then measure identity accuracy with and without the prompt.

use std::fmt::Write as _;

use apl_nn::Adam;
use serde::{Deserialize, Serialize};

use crate::apl::AnonymizationPrompt;
use crate::diffusion::{sample_ddim, train_step, DiffusionModel};
use crate::error::{AplError, Result};
use crate::image::{Image, PIXELS};
use crate::recognizer::IdentityEmbedder;
use crate::seed;
use crate::synthworld::{self, IdentityRecord, Prompt};
use crate::textenc::EncoderGrad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub iterations: usize,
    pub eval_every: usize,
    pub lr: f64,
    pub batch: usize,
    /// Training renders of the new identity.
    pub renders: usize,
    /// Images generated per condition and checkpoint.
    pub samples: usize,
    pub ddim_steps: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Same loss weighting as base training.
    pub snr_cap: f64,
    /// Class-prior preservation term; not implemented.
    pub prior_preservation: bool,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            eval_every: 100,
            lr: 1e-3,
            batch: 8,
            renders: 8,
            samples: 8,
            ddim_steps: 50,
            seed: 23,
            grad_clip: 1.0,
            snr_cap: 20.0,
            prior_preservation: false,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.iterations % self.eval_every != 0 {
            return Err(AplError::Config(format!("eval_every {} must divide iterations {}", self.eval_every, self.iterations)));
        }
        if self.renders < 4 {
            return Err(AplError::Config(format!("personalization needs at least 4 renders, got {}", self.renders)));
        }
        if self.batch == 0 || self.samples == 0 || self.ddim_steps == 0 {
            return Err(AplError::Config("batch, samples and ddim_steps must be positive".into()));
        }
        if self.prior_preservation {
            return Err(AplError::Config("prior preservation is not implemented".into()));
        }
        Ok(())
    }
}

pub struct PersonalizationRun {
    pub identity: u32,
    pub token: String,
    pub token_id: u32,
    pub config: PersonalizeConfig,
    /// `(iteration, model)`; iteration 0 is the base model.
    pub checkpoints: Vec<(usize, DiffusionModel)>,
    pub seeds: Vec<u64>,
}

/// Training renders of a personalization identity; their variations are
/// disjoint from the reference renders behind prototypes.
pub fn personalization_renders(rec: &IdentityRecord, n: usize) -> Vec<Image> {
    (0..n)
        .map(|k| synthworld::render_identity(rec, seed::derive(rec.texture_key, "personal-render", &[k as u64])))
        .collect()
}

/// Fine-tunes the denoiser and the token's embedding row on
/// `(render, "portrait of <token>")` pairs.
pub fn finetune_new_identity(
    base: &DiffusionModel,
    identity: u32,
    renders: &[Image],
    token: &str,
    config: &PersonalizeConfig,
) -> Result<PersonalizationRun> {
    config.validate()?;
    if renders.len() < 4 {
        return Err(AplError::EmptyDataset(format!("{} renders; at least 4 needed", renders.len())));
    }
    let token_id = base.vocab.id(token)?;
    if !(base.vocab.personal.0..base.vocab.personal.1).contains(&token_id) {
        return Err(AplError::Vocabulary(format!("token {token} is already in use by the base vocabulary")));
    }
    let mut model = base.clone();
    let mut checkpoints = vec![(0, model.clone())];
    let mut rng = seed::rng(config.seed, "personalize", &[identity as u64]);
    let mut opt_enc = Adam::new(config.lr);
    let mut opt_den = Adam::new(config.lr);
    let prompt = synthworld::portrait_prompt(token);
    let grads = EncoderGrad::Rows(vec![token_id]);
    for it in 1..=config.iterations {
        let mut images = Vec::with_capacity(config.batch * PIXELS);
        for _ in 0..config.batch {
            images.extend_from_slice(&renders[rand::Rng::random_range(&mut rng, 0..renders.len())].data);
        }
        let prompts = vec![prompt.clone(); config.batch];
        let loss = train_step(&mut model, (&mut opt_enc, &mut opt_den), &images, &prompts, &grads, (config.grad_clip, config.snr_cap), &mut rng)?;
        if !loss.is_finite() {
            return Err(AplError::NonFinite(format!("personalization loss at iteration {it}")));
        }
        if it % config.eval_every == 0 {
            log::info!("personalize identity {identity} iteration {it} loss {loss:.4}");
            checkpoints.push((it, model.clone()));
        }
    }
    let seeds = (0..config.samples as u64).map(|k| seed::derive(config.seed, "personal-eval", &[identity as u64, k])).collect();
    Ok(PersonalizationRun { identity, token: token.into(), token_id, config: config.clone(), checkpoints, seeds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    WithoutPrompt,
    WithPrompt,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WithoutPrompt => "without-prompt",
            Self::WithPrompt => "with-prompt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub identity: u32,
    pub iteration: usize,
    pub condition: Condition,
    pub mean_id_acc: f64,
    pub n: usize,
}

/// Paired generations at every checkpoint. The prompt is applied to the
/// fine-tuned encoder as is; only its width is checked, since fine-tuning
/// changes the encoder fingerprint by design.
pub fn eval_personalization_curve(
    run: &PersonalizationRun,
    prompt: &AnonymizationPrompt,
    embedder: &IdentityEmbedder,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    let p: Prompt = synthworld::portrait_prompt(&run.token);
    let prompts = vec![&p; run.seeds.len()];
    for (iteration, model) in &run.checkpoints {
        if prompt.d != model.text_dim() {
            return Err(AplError::PromptWidth { prompt: prompt.d, encoder: model.text_dim() });
        }
        for cond in [Condition::WithoutPrompt, Condition::WithPrompt] {
            let prefix = (cond == Condition::WithPrompt).then_some(prompt.vectors.as_slice());
            let text = model.embed(&prompts, prefix)?;
            let images = sample_ddim(model, &model.schedule, &text, run.config.ddim_steps, &run.seeds)?;
            let accs = embedder.id_acc_many(&images, run.identity)?;
            out.push(CurvePoint {
                identity: run.identity,
                iteration: *iteration,
                condition: cond,
                mean_id_acc: accs.iter().sum::<f64>() / accs.len() as f64,
                n: accs.len(),
            });
        }
    }
    Ok(out)
}

/// Mean over identities per `(iteration, condition)`, sorted.
pub fn aggregate_curve(points: &[CurvePoint]) -> Vec<(usize, Condition, f64, usize)> {
    let mut acc: std::collections::BTreeMap<(usize, Condition), (f64, usize)> = Default::default();
    for p in points {
        let e = acc.entry((p.iteration, p.condition)).or_default();
        e.0 += p.mean_id_acc;
        e.1 += 1;
    }
    acc.into_iter().map(|((it, c), (s, n))| (it, c, s / n as f64, n)).collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("identity,iteration,condition,mean_id_acc,n\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{:.6},{}", p.identity, p.iteration, p.condition.as_str(), p.mean_id_acc, p.n);
    }
    s
}

/// Paired curve of the aggregated ID-ACC as a standalone SVG.
pub fn curve_svg(points: &[CurvePoint]) -> String {
    let agg = aggregate_curve(points);
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let max_it = agg.iter().map(|a| a.0).max().unwrap_or(1).max(1) as f64;
    let (lo, hi) = agg.iter().fold((0.0f64, 1.0f64), |(lo, hi), a| (lo.min(a.2), hi.max(a.2)));
    let x = |it: usize| pad + (w - 2.0 * pad) * it as f64 / max_it;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo).max(1e-9);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - pad, w - pad, h - pad);
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>", h - pad);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">iteration</text>", w / 2.0, h - 12.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">ID-ACC</text>", h / 2.0, h / 2.0);
    for (v, label) in [(lo, format!("{lo:.2}")), (hi, format!("{hi:.2}"))] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>", pad - 4.0, y(v) + 4.0);
    }
    for (cond, color) in [(Condition::WithoutPrompt, "#c0392b"), (Condition::WithPrompt, "#2471a3")] {
        let pts: Vec<String> = agg.iter().filter(|a| a.1 == cond).map(|a| format!("{:.1},{:.1}", x(a.0), y(a.2))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let ly = if cond == Condition::WithoutPrompt { pad - 20.0 } else { pad - 6.0 };
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{}</text>", w - pad - 100.0, cond.as_str());
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(it: usize, c: Condition, v: f64) -> CurvePoint {
        CurvePoint { identity: 1, iteration: it, condition: c, mean_id_acc: v, n: 4 }
    }

    #[test]
    fn eval_every_must_divide() {
        let c = PersonalizeConfig { iterations: 800, eval_every: 300, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(PersonalizeConfig::default().validate().is_ok());
    }

    #[test]
    fn curve_outputs() {
        let pts = vec![point(0, Condition::WithoutPrompt, 0.1), point(0, Condition::WithPrompt, 0.05), point(100, Condition::WithoutPrompt, 0.4)];
        assert_eq!(curve_csv(&pts).lines().count(), 4);
        let svg = curve_svg(&pts);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        assert_eq!(aggregate_curve(&pts)[0], (0, Condition::WithoutPrompt, 0.1, 1));
    }
}
