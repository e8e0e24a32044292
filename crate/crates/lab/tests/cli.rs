use std::path::Path;
use std::process::{Command, Output};

use apl_core::apl::AnonymizationPrompt;
use apl_core::diffusion::{DiffusionModel, ModelConfig};
use apl_core::recognizer::{AttributeProbe, HeadLayout, IdentityEmbedder, TrunkConfig};
use apl_core::synthworld::{World, WorldConfig};
use apl_core::textenc::Vocabulary;
use apl_lab::config::{EvalConfig, RunConfig};
use apl_lab::eval::Evaluator;

fn lab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apl-lab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_config_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 4\n[world]\nn_trian = 3\n").unwrap();
    let o = lab(&["gen-world", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("n_trian"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifact_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["train-base"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let expected = dir.path().join("world").join("stage.json");
    assert!(stderr(&o).contains(&expected.display().to_string()), "{}", stderr(&o));
}

#[test]
fn unknown_sweep_axis_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["sweep", "--axis", "width"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    for axis in apl_lab::sweep::AXES {
        assert!(stderr(&o).contains(axis), "{}", stderr(&o));
    }
}

#[test]
fn world_generation_is_reproducible_and_tampering_is_refused() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = lab(&["gen-world"], d.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = |d: &Path| std::fs::read(d.join("world/manifest.json")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
    let resolved = std::fs::read_to_string(a.path().join("config.resolved.toml")).unwrap();
    assert_eq!(RunConfig::parse(&resolved).unwrap().world, WorldConfig::default());

    let packed = a.path().join("world/images.bin");
    let mut bytes = std::fs::read(&packed).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&packed, bytes).unwrap();
    let o = lab(&["train-base"], a.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("images.bin"), "{}", stderr(&o));
}

#[test]
fn empty_prompt_reproduces_the_baseline() {
    let world = World::generate(&WorldConfig { n_train: 3, n_test: 3, n_holdout: 1, ..WorldConfig::default() }).unwrap();
    let vocab = Vocabulary::build(world.schema(), world.identities.len(), 16).unwrap();
    let model = DiffusionModel::new(ModelConfig::default(), vocab, 9).unwrap();
    let mut rng = apl_core::seed::rng(1, "cli-test", &[]);
    let ids: Vec<u32> = world.identities.iter().map(|r| r.id).collect();
    let mut embedder = IdentityEmbedder::new(TrunkConfig::default(), ids, &mut rng);
    embedder.build_prototypes(&world).unwrap();
    let probe = AttributeProbe::new(TrunkConfig::default(), HeadLayout::for_schema(world.schema()), &mut rng);
    let cfg = EvalConfig { images_per_identity: 2, ddim_steps: 4, scene_prompts: 4, ..EvalConfig::default() };
    let ev = Evaluator { world: &world, model: &model, embedder: &embedder, probe: &probe, cfg };
    let empty = AnonymizationPrompt::empty(model.text_dim(), model.encoder_fingerprint());
    let (a, b) = (ev.condition(None).unwrap(), ev.condition(Some(&empty)).unwrap());
    assert_eq!(a.report.to_csv(), b.report.to_csv());
    for (x, y) in a.scene_features.iter().flatten().zip(b.scene_features.iter().flatten()) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn stage_seeds_differ_by_stage_and_follow_the_global_seed() {
    let a = RunConfig::default();
    let b = RunConfig { seed: 2, ..RunConfig::default() };
    assert_ne!(a.stage_seed("base", 11), a.stage_seed("apl", 11));
    assert_ne!(a.stage_seed("base", 11), b.stage_seed("base", 11));
    assert_eq!(a.stage_seed("base", 11), RunConfig::default().stage_seed("base", 11));
    assert_eq!(a.hash(), RunConfig { out_dir: "elsewhere".into(), ..RunConfig::default() }.hash());
}
