//! Ablation sweeps. Grid points with identical settings share one cached
//! APL run, and the point matching the `apl` section reuses that stage.

use std::path::PathBuf;
use std::str::FromStr;

use apl_core::apl::{AnonymizationPrompt, AplConfig};
use apl_core::metrics::spearman;
use apl_core::synthworld::{name_word, TripletSample};
use serde::{Deserialize, Serialize};

use crate::pipeline::{Assets, Lab};
use crate::provenance::{config_hash, load_verified, StageRecord};
use crate::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Iterations,
    Alpha,
    PromptLength,
    DatasetSize,
    NoReg,
}

pub const AXES: [&str; 5] = ["iterations", "alpha", "prompt-length", "dataset-size", "no-reg"];

impl FromStr for Axis {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "iterations" => Axis::Iterations,
            "alpha" => Axis::Alpha,
            "prompt-length" => Axis::PromptLength,
            "dataset-size" => Axis::DatasetSize,
            "no-reg" => Axis::NoReg,
            _ => return Err(LabError::Config(format!("unknown sweep axis {s}; valid axes: {}", AXES.join(", ")))),
        })
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Iterations => "iterations",
            Axis::Alpha => "alpha",
            Axis::PromptLength => "prompt-length",
            Axis::DatasetSize => "dataset-size",
            Axis::NoReg => "no-reg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub value: f64,
    /// Test mean-of-means and mean-of-maxima.
    pub mean: f64,
    pub max: f64,
    /// Standard error of the identity-level means.
    pub se: f64,
    pub identities: usize,
    /// Scene-prompt presence rate, measured on the regularization axis only.
    pub presence: Option<f64>,
    pub prompt_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub baseline_mean: f64,
    pub points: Vec<SweepPoint>,
    /// Spearman correlation of the axis value with test mean ID-ACC.
    pub spearman: Option<f64>,
    pub inputs: std::collections::BTreeMap<String, String>,
}

impl SweepReport {
    pub fn point(&self, label: &str) -> Result<&SweepPoint> {
        self.points
            .iter()
            .find(|p| p.label == label)
            .ok_or_else(|| LabError::Config(format!("sweep {} has no point {label}", self.axis.name())))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,label,value,mean_id_acc,max_id_acc,se,identities,presence,prompt_sha256\n");
        for p in &self.points {
            let presence = p.presence.map_or(String::new(), |v| format!("{v:.6}"));
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{},{presence},{}\n",
                self.axis.name(),
                p.label,
                p.value,
                p.mean,
                p.max,
                p.se,
                p.identities,
                p.prompt_hash
            ));
        }
        s
    }
}

fn mean_se(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Identity samples restricted to the first `k` training identities.
fn subset(a: &Assets, k: usize) -> Vec<TripletSample> {
    let names: Vec<String> = a.stored.world.split.train.iter().take(k).map(|&id| name_word(id)).collect();
    a.stored.s_id.iter().filter(|s| s.c1.words().iter().any(|w| names.contains(w))).cloned().collect()
}

impl Lab {
    /// Trained prompt for one grid point, from cache when possible.
    fn point_prompt(&self, a: &Assets, apl: &AplConfig, identities: usize) -> Result<(AnonymizationPrompt, String)> {
        let full = identities >= a.stored.world.split.train.len();
        if full && *apl == self.cfg.apl {
            self.ensure("apl")?;
            return self.load_trained_prompt();
        }
        let key = config_hash(&(apl, identities, &a.inputs));
        let dir = self.dir("sweep").join("points").join(&key[..16]);
        if let Ok(rec) = load_verified(&dir) {
            if rec.config_hash == key {
                let (p, _) = Lab::load_prompt_file(&dir.join("prompt.aplp"))?;
                return Ok((p, rec.output("prompt.aplp")?.to_string()));
            }
        }
        let s_id = if full { a.stored.s_id.clone() } else { subset(a, identities) };
        let mut model = a.model.clone();
        let mut rec = StageRecord::new("sweep-point", key);
        rec.inputs.clone_from(&a.inputs);
        let (prompt, _) = self.run_apl(&mut model, &s_id, &a.stored.s_reg, apl, &dir, &mut rec)?;
        rec.save(&dir)?;
        let hash = rec.output("prompt.aplp")?.to_string();
        Ok((prompt, hash))
    }

    fn score(&self, a: &Assets, label: String, value: f64, prompt: &AnonymizationPrompt, hash: String, presence: bool) -> Result<SweepPoint> {
        let ev = self.evaluator(a, &a.model);
        let n = self.cfg.sweep.images_per_identity;
        let (mean, max, means) = ev.test_id_acc(Some(prompt), n)?;
        let presence = if presence {
            let images = ev.generate(&ev.scene_jobs(0), Some(prompt))?;
            let hits = images.iter().filter(|im| a.probe.presence_detect(im)).count();
            Some(hits as f64 / images.len() as f64)
        } else {
            None
        };
        Ok(SweepPoint { label, value, mean, max, se: mean_se(&means), identities: means.len(), presence, prompt_hash: hash })
    }

    pub fn sweep(&self, axis: Axis) -> Result<SweepReport> {
        for stage in ["world", "base", "recognizer"] {
            self.ensure(stage)?;
        }
        let a = self.assets()?;
        let base = self.cfg.apl;
        let sw = &self.cfg.sweep;
        let n_train = a.stored.world.split.train.len();
        let mut points = Vec::new();
        let mut inputs = a.inputs.clone();
        match axis {
            Axis::Iterations => {
                self.ensure("apl")?;
                let rec = load_verified(&self.dir("apl"))?;
                let mut ckpts: Vec<(u64, PathBuf, String)> = rec
                    .outputs
                    .iter()
                    .filter_map(|(name, hash)| {
                        let it = name.strip_prefix("checkpoints/prompt_")?.strip_suffix(".aplp")?.parse().ok()?;
                        Some((it, self.dir("apl").join(name), hash.clone()))
                    })
                    .collect();
                ckpts.sort_by_key(|c| c.0);
                let stride = sw.iteration_stride.max(1) as u64;
                for (it, path, hash) in ckpts.into_iter().filter(|c| c.0 % stride == 0) {
                    let (p, _) = Lab::load_prompt_file(&path)?;
                    points.push(self.score(&a, it.to_string(), it as f64, &p, hash, false)?);
                }
            }
            Axis::Alpha => {
                for &alpha in &sw.alphas {
                    let (p, h) = self.point_prompt(&a, &AplConfig { alpha, ..base }, n_train)?;
                    points.push(self.score(&a, format!("{alpha}"), alpha, &p, h, false)?);
                }
            }
            Axis::PromptLength => {
                for &m in &sw.lengths {
                    let (p, h) = self.point_prompt(&a, &AplConfig { m, ..base }, n_train)?;
                    points.push(self.score(&a, m.to_string(), m as f64, &p, h, false)?);
                }
            }
            Axis::DatasetSize => {
                for &k in &sw.dataset_sizes {
                    if k == 0 || k > n_train {
                        return Err(LabError::Config(format!("dataset size {k} outside 1..={n_train}")));
                    }
                    let (p, h) = self.point_prompt(&a, &base, k)?;
                    points.push(self.score(&a, k.to_string(), k as f64, &p, h, false)?);
                }
            }
            Axis::NoReg => {
                for (label, regularize) in [("with-reg", true), ("no-reg", false)] {
                    let (p, h) = self.point_prompt(&a, &AplConfig { regularize, ..base }, n_train)?;
                    points.push(self.score(&a, label.into(), regularize as u8 as f64, &p, h, true)?);
                }
            }
        }
        let (baseline_mean, _, _) = self.evaluator(&a, &a.model).test_id_acc(None, sw.images_per_identity)?;
        let spearman = if points.len() >= 2 && axis != Axis::NoReg {
            let x: Vec<f64> = points.iter().map(|p| p.value).collect();
            let y: Vec<f64> = points.iter().map(|p| p.mean).collect();
            spearman(&x, &y).ok()
        } else {
            None
        };
        for p in &points {
            inputs.insert(format!("prompt/{}", p.label), p.prompt_hash.clone());
        }
        let report = SweepReport { axis, baseline_mean, points, spearman, inputs };
        let dir = self.dir("sweep").join(axis.name());
        let mut rec = StageRecord::new("sweep", config_hash(&(&self.cfg.apl, &self.cfg.sweep, &self.cfg.eval)));
        rec.inputs.clone_from(&report.inputs);
        rec.write(&dir, "points.csv", report.to_csv().as_bytes())?;
        rec.write(&dir, "report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
        rec.save(&dir)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_roundtrip() {
        for name in AXES {
            assert_eq!(name.parse::<Axis>().unwrap().name(), name);
        }
        let err = "width".parse::<Axis>().unwrap_err().to_string();
        assert!(err.contains("no-reg") && err.contains("width"), "{err}");
    }

    #[test]
    fn standard_error_of_constant_is_zero() {
        assert_eq!(mean_se(&[0.3; 5]), 0.0);
        assert!((mean_se(&[0.0, 1.0]) - 0.5).abs() < 1e-12);
    }
}
