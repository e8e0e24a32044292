//! Stage implementations. Each stage writes under `<out>/<stage>/` and
//! leaves a [`StageRecord`] naming the hashes of its inputs and outputs.

use std::path::{Path, PathBuf};

use apl_core::apl::{init_prompt, train_apl, AnonymizationPrompt, AplConfig, AplReport};
use apl_core::checkpoint;
use apl_core::diffusion::{self, BaseTrainConfig, DiffusionModel, ModelConfig};
use apl_core::image::{contact_sheet, write_atomic};
use apl_core::personalize::{self, CurvePoint};
use apl_core::recognizer::{self, AttributeProbe, IdentityEmbedder};
use apl_core::synthworld::{self, StoredWorld, TripletSample, WorldConfig};
use apl_core::textenc::{personal_word, Vocabulary};
use apl_core::transfer;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::{self, Evaluator, PairedSummary};
use crate::provenance::{config_hash, load_verified, StageRecord};
use crate::{LabError, Result};

pub struct Lab {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

/// Loaded upstream artifacts shared by the evaluation stages.
pub struct Assets {
    pub stored: StoredWorld,
    pub model: DiffusionModel,
    pub embedder: IdentityEmbedder,
    pub probe: AttributeProbe,
    pub inputs: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub dir: PathBuf,
    pub paired: Option<PairedSummary>,
    pub baseline_test: (f64, f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub map_residual: f64,
    pub coverage: usize,
    pub baseline_test: (f64, f64),
    pub transferred_test: (f64, f64),
    pub reduction: f64,
    pub self_transfer_test: (f64, f64),
    pub inputs: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PersonalizeOutcome {
    /// `(iteration, without, with)` averaged over identities.
    pub curve: Vec<(usize, f64, f64)>,
    pub identities: Vec<u32>,
    pub prompt_unchanged: bool,
    pub inputs: std::collections::BTreeMap<String, String>,
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_string_pretty(v)?.into_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LabError::Missing(path.to_path_buf()),
        _ => LabError::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| LabError::Artifact { path: path.to_path_buf(), reason: e.to_string() })
}

impl Lab {
    pub fn new(cfg: RunConfig, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.unwrap_or_else(|| cfg.out_dir.clone());
        std::fs::create_dir_all(&out)?;
        write_atomic(&out.join("config.resolved.toml"), cfg.resolved().as_bytes())?;
        Ok(Self { cfg, out })
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig { seed: self.cfg.stage_seed("world", self.cfg.world.seed), ..self.cfg.world.clone() }
    }

    fn stage_hash(&self, stage: &str) -> String {
        let c = &self.cfg;
        match stage {
            "world" => config_hash(&(c.seed, &c.world)),
            "base" => config_hash(&(c.seed, &c.world, &c.model, c.init_seed, &c.base)),
            "recognizer" => config_hash(&(c.seed, &c.world, &c.recognizer)),
            "apl" => config_hash(&(c.seed, &c.world, &c.model, c.init_seed, &c.base, &c.apl)),
            "transfer" => config_hash(&(c.seed, &c.world, &c.model, c.init_seed, &c.base, &c.apl, &c.eval, &c.transfer)),
            "personalize" => config_hash(&(c.seed, &c.world, &c.model, c.init_seed, &c.base, &c.apl, &c.personalize)),
            _ => config_hash(&c.resolved()),
        }
    }

    /// Reuses a stage's outputs when its record verifies and was produced
    /// under the same config; otherwise runs it.
    pub fn ensure(&self, stage: &str) -> Result<StageRecord> {
        if let Ok(rec) = load_verified(&self.dir(stage)) {
            if rec.config_hash == self.stage_hash(stage) && self.inputs_current(&rec)? {
                return Ok(rec);
            }
        }
        match stage {
            "world" => self.gen_world(),
            "base" => self.train_base(),
            "recognizer" => self.train_recognizer(),
            "apl" => self.train_apl(),
            _ => Err(LabError::Config(format!("stage {stage} is not cacheable"))),
        }
    }

    fn inputs_current(&self, rec: &StageRecord) -> Result<bool> {
        for (role, hash) in &rec.inputs {
            let Some((stage, file)) = role.split_once('/') else { continue };
            let upstream = match load_verified(&self.dir(stage)) {
                Ok(r) => r,
                Err(_) => return Ok(false),
            };
            if upstream.outputs.get(file) != Some(hash) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn gen_world(&self) -> Result<StageRecord> {
        let dir = self.dir("world");
        let wc = self.world_config();
        let world = synthworld::World::generate(&wc)?;
        let s_id = world.build_id_dataset(&world.records(&world.split.train)?, wc.per_identity, self.cfg.stage_seed("s-id", 0))?;
        let s_reg = synthworld::build_reg_dataset(wc.n_reg, self.cfg.stage_seed("s-reg", 0))?;
        let manifest = synthworld::write_world(&world, &s_id, &s_reg, &dir)?;
        let mut rec = StageRecord::new("world", self.stage_hash("world"));
        rec.track(&dir, "manifest.json")?;
        rec.track(&dir, &manifest.packed_file)?;
        rec.save(&dir)?;
        log::info!("world written, content hash {}", manifest.content_hash);
        Ok(rec)
    }

    pub fn load_world(&self) -> Result<(StoredWorld, String)> {
        let dir = self.dir("world");
        let rec = load_verified(&dir)?;
        let stored = synthworld::read_world(&dir)?;
        Ok((stored, rec.output("manifest.json")?.to_string()))
    }

    /// Base model identities: everything except the personalization holdout.
    pub fn base_identities(stored: &StoredWorld) -> Vec<u32> {
        let split = &stored.world.split;
        split.train.iter().chain(&split.test).copied().collect()
    }

    fn new_model(&self, config: ModelConfig, init_seed: u64, world: &synthworld::World) -> Result<DiffusionModel> {
        let vocab = Vocabulary::build(world.schema(), world.identities.len(), 16)?;
        Ok(DiffusionModel::new(config, vocab, self.cfg.stage_seed("model-init", init_seed))?)
    }

    fn fit_base(&self, model: &mut DiffusionModel, stored: &StoredWorld, base: &BaseTrainConfig) -> Result<diffusion::BaseTrainReport> {
        let ids = Self::base_identities(stored);
        let cfg = BaseTrainConfig { seed: self.cfg.stage_seed("base", base.seed), ..*base };
        Ok(diffusion::train_base(model, &stored.world, &ids, &cfg, |_, _| {})?)
    }

    pub fn train_base(&self) -> Result<StageRecord> {
        let (stored, world_hash) = self.load_world()?;
        let dir = self.dir("base");
        let mut model = self.new_model(self.cfg.model, self.cfg.init_seed, &stored.world)?;
        let report = self.fit_base(&mut model, &stored, &self.cfg.base)?;
        let mut rec = StageRecord::new("base", self.stage_hash("base"));
        rec.inputs.insert("world/manifest.json".into(), world_hash);
        rec.write(&dir, "model.aplm", &checkpoint::encode_model(&model)?)?;
        rec.write(&dir, "report.json", &to_json(&report)?)?;
        rec.save(&dir)?;
        Ok(rec)
    }

    pub fn load_base(&self) -> Result<(DiffusionModel, String)> {
        let dir = self.dir("base");
        let rec = load_verified(&dir)?;
        let hash = rec.output("model.aplm")?.to_string();
        let bytes = checkpoint::read_verified(&dir.join("model.aplm"), &hash)?;
        Ok((checkpoint::decode_model(&bytes, &dir.join("model.aplm"))?, hash))
    }

    pub fn train_recognizer(&self) -> Result<StageRecord> {
        let (stored, world_hash) = self.load_world()?;
        let dir = self.dir("recognizer");
        let rc = apl_core::recognizer::RecognizerConfig { seed: self.cfg.stage_seed("recognizer", self.cfg.recognizer.seed), ..self.cfg.recognizer };
        let (embedder, er) = recognizer::train_embedder(&stored.world, &rc)?;
        let (probe, pr) = recognizer::train_probe(&stored.world, &rc)?;
        let mut rec = StageRecord::new("recognizer", self.stage_hash("recognizer"));
        rec.inputs.insert("world/manifest.json".into(), world_hash);
        rec.write(&dir, "embedder.aplr", &checkpoint::encode_embedder(&embedder)?)?;
        rec.write(&dir, "probe.aplr", &checkpoint::encode_probe(&probe)?)?;
        rec.write(&dir, "report.json", &to_json(&serde_json::json!({ "embedder": er, "probe": pr }))?)?;
        rec.save(&dir)?;
        Ok(rec)
    }

    pub fn load_recognizer(&self) -> Result<(IdentityEmbedder, AttributeProbe, String, String)> {
        let dir = self.dir("recognizer");
        let rec = load_verified(&dir)?;
        let (eh, ph) = (rec.output("embedder.aplr")?.to_string(), rec.output("probe.aplr")?.to_string());
        let e = checkpoint::decode_embedder(&checkpoint::read_verified(&dir.join("embedder.aplr"), &eh)?, &dir.join("embedder.aplr"))?;
        let p = checkpoint::decode_probe(&checkpoint::read_verified(&dir.join("probe.aplr"), &ph)?, &dir.join("probe.aplr"))?;
        Ok((e, p, eh, ph))
    }

    pub fn apl_config(&self, base: &AplConfig) -> AplConfig {
        AplConfig { seed: self.cfg.stage_seed("apl", base.seed), ..*base }
    }

    /// One APL run; checkpoints are written under `dir/checkpoints/`.
    pub fn run_apl(
        &self,
        model: &mut DiffusionModel,
        s_id: &[TripletSample],
        s_reg: &[TripletSample],
        config: &AplConfig,
        dir: &Path,
        rec: &mut StageRecord,
    ) -> Result<(AnonymizationPrompt, AplReport)> {
        let cfg = self.apl_config(config);
        let vocab_mean = model.encoder.vocab_mean();
        let init = init_prompt(cfg.m, model.text_dim(), cfg.seed, cfg.init, Some(&vocab_mean), model.encoder_fingerprint())?;
        let mut written = Vec::new();
        let (prompt, report) = train_apl(model, s_id, s_reg, &cfg, init, |p| {
            let name = format!("checkpoints/prompt_{:06}.aplp", p.iteration);
            let bytes = checkpoint::encode_prompt(p);
            write_atomic(&dir.join(&name), &bytes)?;
            written.push((name, apl_core::seed::sha256_hex(&bytes)));
            Ok(())
        })?;
        for (name, hash) in written {
            rec.outputs.insert(name, hash);
        }
        rec.write(dir, "prompt.aplp", &checkpoint::encode_prompt(&prompt))?;
        let curve: String = std::iter::once("step,loss\n".to_string())
            .chain(report.losses.iter().enumerate().map(|(i, l)| format!("{},{l:.8}\n", i + 1)))
            .collect();
        rec.write(dir, "loss.csv", curve.as_bytes())?;
        let summary = serde_json::json!({
            "steps": report.steps,
            "checkpoints": report.checkpoints,
            "frozen_hash": report.frozen_hash,
            "leading_trailing_loss": report.leading_trailing(500),
        });
        rec.write(dir, "report.json", &to_json(&summary)?)?;
        Ok((prompt, report))
    }

    pub fn train_apl(&self) -> Result<StageRecord> {
        let (stored, world_hash) = self.load_world()?;
        let (mut model, model_hash) = self.load_base()?;
        let dir = self.dir("apl");
        let mut rec = StageRecord::new("apl", self.stage_hash("apl"));
        rec.inputs.insert("world/manifest.json".into(), world_hash);
        rec.inputs.insert("base/model.aplm".into(), model_hash);
        self.run_apl(&mut model, &stored.s_id, &stored.s_reg, &self.cfg.apl, &dir, &mut rec)?;
        rec.save(&dir)?;
        Ok(rec)
    }

    pub fn load_prompt_file(path: &Path) -> Result<(AnonymizationPrompt, String)> {
        let bytes = checkpoint::read_bytes(path)?;
        let p = checkpoint::decode_prompt(&bytes, path)?;
        Ok((p, apl_core::seed::sha256_hex(&bytes)))
    }

    /// The trained prompt of the `apl` stage, hash-verified.
    pub fn load_trained_prompt(&self) -> Result<(AnonymizationPrompt, String)> {
        let dir = self.dir("apl");
        let rec = load_verified(&dir)?;
        let hash = rec.output("prompt.aplp")?.to_string();
        Self::load_prompt_file(&dir.join("prompt.aplp")).map(|(p, _)| (p, hash))
    }

    pub fn assets(&self) -> Result<Assets> {
        let (stored, world_hash) = self.load_world()?;
        let (model, model_hash) = self.load_base()?;
        let (embedder, probe, eh, ph) = self.load_recognizer()?;
        let inputs = [
            ("world/manifest.json", world_hash),
            ("base/model.aplm", model_hash),
            ("recognizer/embedder.aplr", eh),
            ("recognizer/probe.aplr", ph),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Ok(Assets { stored, model, embedder, probe, inputs })
    }

    pub fn evaluator<'a>(&self, a: &'a Assets, model: &'a DiffusionModel) -> Evaluator<'a> {
        let mut cfg = self.cfg.eval.clone();
        cfg.seed = self.cfg.stage_seed("eval", cfg.seed);
        Evaluator { world: &a.stored.world, model, embedder: &a.embedder, probe: &a.probe, cfg }
    }

    /// Baseline evaluation, or a paired one when a prompt file is given.
    pub fn eval(&self, prompt_path: Option<&Path>) -> Result<EvalOutcome> {
        let a = self.assets()?;
        let ev = self.evaluator(&a, &a.model);
        let config_fingerprint = self.cfg.hash();
        let mut base = ev.condition(None)?;
        base.report.config_fingerprint.clone_from(&config_fingerprint);
        base.report.inputs.clone_from(&a.inputs);
        let baseline_test = {
            let s = base.report.split("test")?;
            (s.mean_of_means, s.mean_of_maxima)
        };
        let Some(path) = prompt_path else {
            let dir = self.dir("eval").join("baseline");
            let mut rec = StageRecord::new("eval", config_fingerprint);
            rec.inputs = a.inputs.clone();
            rec.write(&dir, "metrics.csv", base.report.to_csv().as_bytes())?;
            rec.write(&dir, "summary.json", base.report.to_json()?.as_bytes())?;
            contact_sheet(&dir.join("sheet.png"), &base.sheet, &[("inputs", &serde_json::to_string(&a.inputs)?)])?;
            rec.track(&dir, "sheet.png")?;
            rec.save(&dir)?;
            return Ok(EvalOutcome { dir, paired: None, baseline_test });
        };
        let (prompt, prompt_hash) = Self::load_prompt_file(path)?;
        let mut inputs = a.inputs.clone();
        inputs.insert("prompt".into(), prompt_hash.clone());
        let mut with = ev.condition(Some(&prompt))?;
        with.report.config_fingerprint = config_fingerprint.clone();
        with.report.inputs.clone_from(&inputs);
        let baseline_features = ev.baseline_scene_features()?;
        let paired = eval::paired_summary(&base, &with, &baseline_features)?;

        let dir = self.dir("eval").join(format!("prompt-{}", &prompt_hash[..12]));
        let mut rec = StageRecord::new("eval", config_fingerprint);
        rec.inputs.clone_from(&inputs);
        rec.write(&dir, "metrics_without.csv", base.report.to_csv().as_bytes())?;
        rec.write(&dir, "metrics_with.csv", with.report.to_csv().as_bytes())?;
        rec.write(&dir, "summary_without.json", base.report.to_json()?.as_bytes())?;
        rec.write(&dir, "summary_with.json", with.report.to_json()?.as_bytes())?;
        rec.write(&dir, "table1.csv", eval::table1_csv(&base.report, &with.report)?.as_bytes())?;
        rec.write(&dir, "table2.csv", eval::table2_csv(&paired).as_bytes())?;
        rec.write(&dir, "paired.json", &to_json(&serde_json::json!({ "summary": paired, "inputs": inputs }))?)?;
        let inputs_text = serde_json::to_string(&inputs)?;
        contact_sheet(&dir.join("sheet_without.png"), &base.sheet, &[("inputs", &inputs_text)])?;
        contact_sheet(&dir.join("sheet_with.png"), &with.sheet, &[("inputs", &inputs_text)])?;
        rec.track(&dir, "sheet_without.png")?;
        rec.track(&dir, "sheet_with.png")?;
        rec.save(&dir)?;
        Ok(EvalOutcome { dir, paired: Some(paired), baseline_test })
    }

    /// Trains (or reuses) model B, maps the trained prompt into it and
    /// measures test identity accuracy with and without it.
    pub fn transfer(&self) -> Result<TransferOutcome> {
        let a = self.assets()?;
        let (prompt, prompt_hash) = self.load_trained_prompt()?;
        let dir = self.dir("transfer");
        let stage_hash = self.stage_hash("transfer");
        let model_b_path = dir.join("model_b.aplm");
        let cached = load_verified(&dir).ok().filter(|r| r.config_hash == stage_hash && r.outputs.contains_key("model_b.aplm"));
        let model_b = match cached {
            Some(_) => checkpoint::load_model(&model_b_path)?,
            None => {
                let mut m = self.new_model(self.cfg.transfer.model, self.cfg.transfer.init_seed, &a.stored.world)?;
                self.fit_base(&mut m, &a.stored, &self.cfg.transfer.base)?;
                write_atomic(&model_b_path, &checkpoint::encode_model(&m)?)?;
                m
            }
        };
        let map = transfer::fit_embedding_map(&a.model, &model_b, self.cfg.transfer.shared)?;
        let moved = transfer::transfer_prompt(&prompt, &map)?;
        let n = self.cfg.eval.images_per_identity;
        let ev_b = self.evaluator(&a, &model_b);
        let (b0, b0max, _) = ev_b.test_id_acc(None, n)?;
        let (b1, b1max, _) = ev_b.test_id_acc(Some(&moved), n)?;
        let self_map = transfer::fit_embedding_map(&a.model, &a.model, self.cfg.transfer.shared)?;
        let self_moved = transfer::transfer_prompt(&prompt, &self_map)?;
        let ev_a = self.evaluator(&a, &a.model);
        let (s1, s1max, _) = ev_a.test_id_acc(Some(&self_moved), n)?;

        let mut inputs = a.inputs.clone();
        inputs.insert("apl/prompt.aplp".into(), prompt_hash);
        let outcome = TransferOutcome {
            map_residual: map.mean_residual,
            coverage: map.coverage,
            baseline_test: (b0, b0max),
            transferred_test: (b1, b1max),
            reduction: 1.0 - b1 / b0,
            self_transfer_test: (s1, s1max),
            inputs: inputs.clone(),
        };
        let mut rec = StageRecord::new("transfer", stage_hash);
        rec.inputs = inputs;
        rec.track(&dir, "model_b.aplm")?;
        rec.write(&dir, "map.aplt", &checkpoint::encode_map(&map)?)?;
        rec.write(&dir, "prompt_b.aplp", &checkpoint::encode_prompt(&moved))?;
        rec.write(&dir, "summary.json", &to_json(&outcome)?)?;
        let csv = format!(
            "model,condition,mean_id_acc,max_id_acc\nB,without-prompt,{b0:.6},{b0max:.6}\nB,with-transferred-prompt,{b1:.6},{b1max:.6}\nA,with-self-transferred-prompt,{s1:.6},{s1max:.6}\n"
        );
        rec.write(&dir, "table.csv", csv.as_bytes())?;
        rec.save(&dir)?;
        Ok(outcome)
    }

    pub fn personalize(&self) -> Result<PersonalizeOutcome> {
        let a = self.assets()?;
        let dir = self.dir("personalize");
        let prompt_path = self.dir("apl").join("prompt.aplp");
        let (prompt, prompt_hash) = self.load_trained_prompt()?;
        let sec = &self.cfg.personalize;
        let run_cfg = personalize::PersonalizeConfig { seed: self.cfg.stage_seed("personalize", sec.run.seed), ..sec.run.clone() };
        let ids: Vec<u32> = a.stored.world.split.holdout.iter().take(sec.identities).copied().collect();
        if ids.is_empty() {
            return Err(LabError::Config("personalization needs at least one holdout identity".into()));
        }
        let mut points: Vec<CurvePoint> = Vec::new();
        for (k, &id) in ids.iter().enumerate() {
            let rec = a.stored.world.record(id)?;
            let renders = personalize::personalization_renders(rec, run_cfg.renders);
            let run = personalize::finetune_new_identity(&a.model, id, &renders, &personal_word(k), &run_cfg)?;
            points.extend(personalize::eval_personalization_curve(&run, &prompt, &a.embedder)?);
        }
        let agg = personalize::aggregate_curve(&points);
        let mut curve = Vec::new();
        for (it, cond, v, _) in &agg {
            if *cond == personalize::Condition::WithoutPrompt {
                let with = agg.iter().find(|x| x.0 == *it && x.1 == personalize::Condition::WithPrompt).map_or(f64::NAN, |x| x.2);
                curve.push((*it, *v, with));
            }
        }
        let after = crate::provenance::file_hash(&prompt_path)?;
        let mut inputs = a.inputs.clone();
        inputs.insert("apl/prompt.aplp".into(), prompt_hash.clone());
        let outcome = PersonalizeOutcome { curve, identities: ids, prompt_unchanged: after == prompt_hash, inputs: inputs.clone() };
        let mut rec = StageRecord::new("personalize", self.stage_hash("personalize"));
        rec.inputs = inputs;
        rec.write(&dir, "curve.csv", personalize::curve_csv(&points).as_bytes())?;
        rec.write(&dir, "curve.svg", personalize::curve_svg(&points).as_bytes())?;
        rec.write(&dir, "summary.json", &to_json(&outcome)?)?;
        rec.save(&dir)?;
        Ok(outcome)
    }

    /// Reads a stage's JSON summary back.
    pub fn read_summary<T: for<'de> Deserialize<'de>>(&self, stage: &str, file: &str) -> Result<T> {
        read_json(&self.dir(stage).join(file))
    }
}
