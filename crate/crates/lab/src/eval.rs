//! Generation-based evaluation of a model with or without a prompt.

use apl_core::apl::AnonymizationPrompt;
use apl_core::diffusion::{sample_ddim, DiffusionModel};
use apl_core::image::Image;
use apl_core::metrics::{self, Fidelity, Measured, MetricsReport};
use apl_core::recognizer::{AttributeProbe, IdentityEmbedder};
use apl_core::seed;
use apl_core::synthworld::{self, Prompt, World};
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::Result;

const CHUNK: usize = 64;

pub struct Evaluator<'a> {
    pub world: &'a World,
    pub model: &'a DiffusionModel,
    pub embedder: &'a IdentityEmbedder,
    pub probe: &'a AttributeProbe,
    pub cfg: EvalConfig,
}

/// Everything measured for one condition.
pub struct ConditionEval {
    pub report: MetricsReport,
    pub presence_rate: Measured,
    pub scene_features: Vec<Vec<f32>>,
    pub sheet: Vec<Vec<Image>>,
}

/// Paired with/without comparison in the shape of the paper's tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub train_without: (f64, f64),
    pub train_with: (f64, f64),
    pub test_without: (f64, f64),
    pub test_with: (f64, f64),
    /// `1 - with / without` on the mean-of-means.
    pub reduction_train: f64,
    pub reduction_test: f64,
    pub reduction_test_max: f64,
    pub fid_with_vs_without: f64,
    pub fid_seed_baseline: f64,
    pub fidelity_without: f64,
    pub fidelity_with: f64,
    pub attr_without: f64,
    pub attr_with: f64,
    pub presence_without: f64,
    pub presence_with: f64,
}

impl<'a> Evaluator<'a> {
    /// Sampling seed of the `k`-th image of a prompt group.
    pub fn seed(&self, group: &str, id: u64, k: usize) -> u64 {
        seed::derive(self.cfg.seed, group, &[id, k as u64])
    }

    /// Generates one image per `(prompt, seed)` pair.
    pub fn generate(&self, jobs: &[(Prompt, u64)], prompt: Option<&AnonymizationPrompt>) -> Result<Vec<Image>> {
        let prefix = match prompt {
            Some(p) => {
                p.check_compatible(self.model.text_dim(), &self.model.encoder_fingerprint())?;
                Some(p.vectors.as_slice())
            }
            None => None,
        };
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(CHUNK) {
            let prompts: Vec<&Prompt> = chunk.iter().map(|j| &j.0).collect();
            let seeds: Vec<u64> = chunk.iter().map(|j| j.1).collect();
            let text = self.model.embed(&prompts, prefix)?;
            out.extend(sample_ddim(self.model, &self.model.schedule, &text, self.cfg.ddim_steps, &seeds)?);
        }
        Ok(out)
    }

    /// Name-prompt generations, `n` per identity.
    pub fn name_images(&self, ids: &[u32], n: usize, prompt: Option<&AnonymizationPrompt>) -> Result<Vec<(u32, Vec<Image>)>> {
        let mut jobs = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            let p = self.world.make_id_prompt(self.world.record(id)?)?;
            for k in 0..n {
                jobs.push((p.clone(), self.seed("id-eval", id as u64, k)));
            }
        }
        let images = self.generate(&jobs, prompt)?;
        Ok(ids.iter().zip(images.chunks(n)).map(|(id, ims)| (*id, ims.to_vec())).collect())
    }

    pub fn id_groups(&self, gens: &[(u32, Vec<Image>)]) -> Result<Vec<(u32, Vec<f64>)>> {
        gens.iter().map(|(id, ims)| Ok((*id, self.embedder.id_acc_many(ims, *id)?))).collect()
    }

    /// Scene prompts with seeds; `set` selects an independent seed set.
    pub fn scene_jobs(&self, set: u64) -> Vec<(Prompt, u64)> {
        let scenes = self.world.scenes(self.cfg.scene_prompts, seed::derive(self.cfg.seed, "eval-scenes", &[]));
        scenes.iter().enumerate().map(|(i, s)| (synthworld::scene_prompt(s), self.seed("scene-eval", set, i))).collect()
    }

    pub fn attr_jobs(&self) -> Result<Vec<(Prompt, u64)>> {
        let mut jobs = Vec::new();
        for &id in &self.world.split.test {
            let p = self.world.make_attr_prompt(self.world.record(id)?);
            for k in 0..self.cfg.attr_prompts_per_identity {
                jobs.push((p.clone(), self.seed("attr-eval", id as u64, k)));
            }
        }
        Ok(jobs)
    }

    /// Identity accuracy on train and test identities plus attribute,
    /// fidelity and presence measurements, for one condition.
    pub fn condition(&self, prompt: Option<&AnonymizationPrompt>) -> Result<ConditionEval> {
        let n = self.cfg.images_per_identity;
        let mut report = MetricsReport::default();
        let mut sheet = Vec::new();
        let mut test_gens = Vec::new();
        for (split, ids) in [("train", &self.world.split.train), ("test", &self.world.split.test)] {
            let gens = self.name_images(ids, n, prompt)?;
            report.add_split(split, &self.id_groups(&gens)?)?;
            if split == "test" {
                sheet = gens.iter().take(self.cfg.sheet_identities).map(|g| g.1.clone()).collect();
                test_gens = gens;
            }
        }
        report.attr_acc = Some(metrics::attr_acc(self.probe, self.world, &test_gens)?);

        let scene_jobs = self.scene_jobs(0);
        let scene_images = self.generate(&scene_jobs, prompt)?;
        let attr_jobs = self.attr_jobs()?;
        let attr_images = self.generate(&attr_jobs, prompt)?;
        let images: Vec<Image> = scene_images.iter().chain(&attr_images).cloned().collect();
        let prompts: Vec<Prompt> = scene_jobs.iter().chain(&attr_jobs).map(|j| j.0.clone()).collect();
        let fidelity: Fidelity = metrics::prompt_fidelity(self.probe, &images, &prompts, self.world.schema())?;
        report.prompt_fidelity = Some(fidelity);

        let outputs = self.probe.attr_features(&scene_images);
        let present = outputs.iter().filter(|o| o.presence > 0.5).count();
        let presence_rate = Measured { value: present as f64 / outputs.len().max(1) as f64, n: outputs.len() };
        let scene_features = outputs.into_iter().map(|o| o.feature).collect();
        if let Some(p) = prompt {
            report.iteration = p.iteration;
        }
        Ok(ConditionEval { report, presence_rate, scene_features, sheet })
    }

    /// Test-split identity accuracy only, for sweep points.
    pub fn test_id_acc(&self, prompt: Option<&AnonymizationPrompt>, n: usize) -> Result<(f64, f64, Vec<f64>)> {
        let gens = self.name_images(&self.world.split.test, n, prompt)?;
        let groups = self.id_groups(&gens)?;
        let values: Vec<Vec<f64>> = groups.iter().map(|g| g.1.clone()).collect();
        let (mean, max) = metrics::aggregate_id_acc(&values)?;
        let means = values.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
        Ok((mean, max, means))
    }

    /// Scene features of the base model on the second seed set; the
    /// reference for the same-model different-seed distance.
    pub fn baseline_scene_features(&self) -> Result<Vec<Vec<f32>>> {
        let images = self.generate(&self.scene_jobs(1), None)?;
        Ok(self.probe.features(&images))
    }
}

fn pair(r: &MetricsReport, split: &str) -> Result<(f64, f64)> {
    let s = r.split(split)?;
    Ok((s.mean_of_means, s.mean_of_maxima))
}

pub fn paired_summary(without: &ConditionEval, with: &ConditionEval, baseline_features: &[Vec<f32>]) -> Result<PairedSummary> {
    let (tw, tp) = (pair(&without.report, "train")?, pair(&with.report, "train")?);
    let (sw, sp) = (pair(&without.report, "test")?, pair(&with.report, "test")?);
    let value = |m: Option<Measured>| m.map_or(f64::NAN, |m| m.value);
    let fid = |f: Option<Fidelity>| f.map_or(f64::NAN, |f| f.value);
    Ok(PairedSummary {
        train_without: tw,
        train_with: tp,
        test_without: sw,
        test_with: sp,
        reduction_train: 1.0 - tp.0 / tw.0,
        reduction_test: 1.0 - sp.0 / sw.0,
        reduction_test_max: 1.0 - sp.1 / sw.1,
        fid_with_vs_without: metrics::frechet_distance(&with.scene_features, &without.scene_features)?,
        fid_seed_baseline: metrics::frechet_distance(baseline_features, &without.scene_features)?,
        fidelity_without: fid(without.report.prompt_fidelity),
        fidelity_with: fid(with.report.prompt_fidelity),
        attr_without: value(without.report.attr_acc),
        attr_with: value(with.report.attr_acc),
        presence_without: without.presence_rate.value,
        presence_with: with.presence_rate.value,
    })
}

/// Table-1 style rows: split, condition, mean and max aggregates.
pub fn table1_csv(without: &MetricsReport, with: &MetricsReport) -> Result<String> {
    let mut s = String::from("split,condition,mean_id_acc,max_id_acc,identities\n");
    for split in ["train", "test"] {
        for (cond, r) in [("without-prompt", without), ("with-prompt", with)] {
            let x = r.split(split)?;
            s.push_str(&format!("{split},{cond},{:.6},{:.6},{}\n", x.mean_of_means, x.mean_of_maxima, x.identities));
        }
    }
    Ok(s)
}

/// Table-2 style rows: distance to the base model, prompt fidelity and
/// attribute accuracy per condition.
pub fn table2_csv(p: &PairedSummary) -> String {
    format!(
        "condition,fid_vs_base,prompt_fidelity,attr_acc\nwithout-prompt,{:.6},{:.6},{:.6}\nwith-prompt,{:.6},{:.6},{:.6}\n",
        p.fid_seed_baseline, p.fidelity_without, p.attr_without, p.fid_with_vs_without, p.fidelity_with, p.attr_with
    )
}
