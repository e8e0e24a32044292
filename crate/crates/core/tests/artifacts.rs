use apl_core::apl::AnonymizationPrompt;
use apl_core::checkpoint::*;
use apl_core::diffusion::{DiffusionModel, ModelConfig};
use apl_core::error::AplError;
use apl_core::recognizer::{AttributeProbe, HeadLayout, IdentityEmbedder, TrunkConfig};
use apl_core::seed;
use apl_core::synthworld::{self, AttributeSchema, World, WorldConfig};
use apl_core::textenc::Vocabulary;
use apl_core::transfer::EmbeddingMap;
use std::path::Path;

#[test]
fn model_roundtrip_is_bit_exact() {
    let vocab = Vocabulary::build(&AttributeSchema::default(), 12, 16).unwrap();
    let m = DiffusionModel::new(ModelConfig::default(), vocab, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.aplm");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.frozen_hash(), m.frozen_hash());
    assert_eq!(back.vocab, m.vocab);
    assert_eq!(encode_model(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn tampering_is_detected() {
    let p = AnonymizationPrompt::new(vec![0.5; 6], 2, 3, [3; 32]).unwrap();
    let mut bytes = encode_prompt(&p);
    let here = Path::new("p.aplp");
    assert_eq!(decode_prompt(&bytes, here).unwrap(), p);
    bytes[30] ^= 1;
    assert!(matches!(decode_prompt(&bytes, here), Err(AplError::Artifact { .. })));
    let bytes = encode_prompt(&p);
    assert!(matches!(decode_embedder(&bytes, here), Err(AplError::Artifact { .. })));
}

#[test]
fn prompt_fields_survive() {
    let mut p = AnonymizationPrompt::new((0..40).map(|i| i as f32 * 0.1).collect(), 4, 10, [9; 32]).unwrap();
    p.iteration = 1234;
    p.alpha = 0.5;
    let back = decode_prompt(&encode_prompt(&p), Path::new("x")).unwrap();
    assert_eq!(back, p);
    let empty = AnonymizationPrompt::empty(64, [1; 32]);
    assert_eq!(decode_prompt(&encode_prompt(&empty), Path::new("x")).unwrap().m, 0);
}

#[test]
fn recognizer_and_map_roundtrip() {
    let world = World::generate(&WorldConfig { n_train: 3, n_test: 2, n_holdout: 1, ..WorldConfig::default() }).unwrap();
    let mut rng = seed::rng(1, "t", &[]);
    let mut e = IdentityEmbedder::new(TrunkConfig::default(), (0..6).collect(), &mut rng);
    e.build_prototypes(&world).unwrap();
    let back = decode_embedder(&encode_embedder(&e).unwrap(), Path::new("e")).unwrap();
    let im = synthworld::render_identity(world.record(2).unwrap(), 5);
    assert_eq!(back.id_acc(&im, 2).unwrap(), e.id_acc(&im, 2).unwrap());

    let p = AttributeProbe::new(TrunkConfig::default(), HeadLayout::for_schema(world.schema()), &mut rng);
    let back = decode_probe(&encode_probe(&p).unwrap(), Path::new("p")).unwrap();
    assert_eq!(back.features(std::slice::from_ref(&im)), p.features(std::slice::from_ref(&im)));
    assert!(decode_embedder(&encode_probe(&p).unwrap(), Path::new("p")).is_err());

    let map = EmbeddingMap::identity(5, [4; 32]);
    assert_eq!(decode_map(&encode_map(&map).unwrap(), Path::new("m")).unwrap(), map);
}

#[test]
fn missing_file_names_the_path() {
    let path = Path::new("/nonexistent/dir/model.aplm");
    match load_model(path) {
        Err(AplError::Missing(p)) => assert_eq!(p, path),
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn world_files_roundtrip_and_carry_the_hash() {
    let world = World::generate(&WorldConfig { n_train: 3, n_test: 2, n_holdout: 1, per_identity: 2, n_reg: 4, ..WorldConfig::default() }).unwrap();
    let s_id = world.build_id_dataset(&world.records(&world.split.train).unwrap(), 2, 5).unwrap();
    let s_reg = synthworld::build_reg_dataset(4, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = synthworld::write_world(&world, &s_id, &s_reg, dir.path()).unwrap();
    let again = tempfile::tempdir().unwrap();
    let m2 = synthworld::write_world(&world, &s_id, &s_reg, again.path()).unwrap();
    assert_eq!(m.content_hash, m2.content_hash);
    let stored = synthworld::read_world(dir.path()).unwrap();
    assert_eq!(stored.s_id, s_id);
    assert_eq!(stored.s_reg, s_reg);
    assert_eq!(stored.manifest.format, "synthworld/1");
    let png = std::fs::read(dir.path().join("png/s_id_00000.png")).unwrap();
    assert!(png.windows(64).any(|w| w == m.content_hash.as_bytes()));

    let packed = dir.path().join("images.bin");
    let mut bytes = std::fs::read(&packed).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&packed, bytes).unwrap();
    assert!(synthworld::read_world(dir.path()).is_err());
}
