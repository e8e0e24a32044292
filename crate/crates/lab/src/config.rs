//! Run configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use apl_core::apl::AplConfig;
use apl_core::diffusion::{BaseTrainConfig, ModelConfig};
use apl_core::personalize::PersonalizeConfig;
use apl_core::recognizer::RecognizerConfig;
use apl_core::synthworld::WorldConfig;
use apl_core::textenc::EncoderConfig;
use apl_core::transfer::SharedVocab;
use serde::{Deserialize, Serialize};

use crate::LabError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated images per identity and condition.
    pub images_per_identity: usize,
    pub ddim_steps: usize,
    pub seed: u64,
    /// Scene prompts for the Fréchet distance and the presence rate.
    pub scene_prompts: usize,
    /// Attribute prompts per test identity for prompt fidelity.
    pub attr_prompts_per_identity: usize,
    /// Identities shown in contact sheets.
    pub sheet_identities: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { images_per_identity: 8, ddim_steps: 50, seed: 29, scene_prompts: 128, attr_prompts_per_identity: 2, sheet_identities: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Second model family; differs in width and seeds.
    pub model: ModelConfig,
    pub init_seed: u64,
    pub base: BaseTrainConfig,
    pub shared: SharedVocab,
}

impl Default for TransferConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.encoder = EncoderConfig { dim: 96, ..EncoderConfig::default() };
        Self { model, init_seed: 77, base: BaseTrainConfig { seed: 78, ..BaseTrainConfig::default() }, shared: SharedVocab::All }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeSection {
    /// Holdout identities attacked (taken from the start of the holdout split).
    pub identities: usize,
    pub run: PersonalizeConfig,
}

impl Default for PersonalizeSection {
    fn default() -> Self {
        Self { identities: 10, run: PersonalizeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub lengths: Vec<usize>,
    pub dataset_sizes: Vec<usize>,
    /// Images per identity when scoring sweep points.
    pub images_per_identity: usize,
    /// Stride between scored checkpoints of the iterations axis.
    pub iteration_stride: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            lengths: vec![1, 5, 10, 20],
            dataset_sizes: vec![5, 10, 20, 40],
            images_per_identity: 4,
            iteration_stride: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every stage's random streams.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stages run by `apl-lab all`, in order.
    pub stages: Vec<String>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub base: BaseTrainConfig,
    pub recognizer: RecognizerConfig,
    pub apl: AplConfig,
    pub eval: EvalConfig,
    pub transfer: TransferConfig,
    pub personalize: PersonalizeSection,
    pub sweep: SweepConfig,
}

pub const STAGES: [&str; 7] = ["gen-world", "train-base", "train-recognizer", "train-apl", "eval", "transfer", "personalize"];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            stages: STAGES.iter().map(|s| s.to_string()).collect(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            init_seed: 3,
            base: BaseTrainConfig::default(),
            recognizer: RecognizerConfig::default(),
            apl: AplConfig::default(),
            eval: EvalConfig::default(),
            transfer: TransferConfig::default(),
            personalize: PersonalizeSection::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, LabError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LabError::Config(format!("config file {} not found", path.display())),
            _ => LabError::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        for s in &self.stages {
            if !STAGES.contains(&s.as_str()) {
                return Err(LabError::Config(format!("unknown stage {s}; valid stages: {}", STAGES.join(", "))));
            }
        }
        self.apl.validate().map_err(|e| LabError::Config(e.to_string()))?;
        self.personalize.run.validate().map_err(|e| LabError::Config(e.to_string()))?;
        if self.transfer.model.timesteps != self.model.timesteps {
            return Err(LabError::Config("transfer.model must share the diffusion schedule length".into()));
        }
        if self.eval.images_per_identity == 0 || self.eval.ddim_steps == 0 {
            return Err(LabError::Config("eval.images_per_identity and eval.ddim_steps must be positive".into()));
        }
        if self.eval.scene_prompts < apl_core::metrics::FID_MIN_SAMPLES {
            return Err(LabError::Config(format!(
                "eval.scene_prompts {} is below the {} samples the Fréchet distance needs",
                self.eval.scene_prompts,
                apl_core::metrics::FID_MIN_SAMPLES
            )));
        }
        if self.personalize.identities > self.world.n_holdout {
            return Err(LabError::Config(format!(
                "personalize.identities {} exceeds world.n_holdout {}",
                self.personalize.identities, self.world.n_holdout
            )));
        }
        Ok(())
    }

    /// The fully expanded document, defaults included.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fingerprint of everything that affects results; the output
    /// location is excluded.
    pub fn hash(&self) -> String {
        let placed = RunConfig { out_dir: PathBuf::new(), ..self.clone() };
        apl_core::seed::sha256_hex(placed.resolved().as_bytes())
    }

    /// Seed of a stage's random stream, derived from the global seed.
    pub fn stage_seed(&self, stage: &str, local: u64) -> u64 {
        apl_core::seed::derive(self.seed, stage, &[local])
    }
}
