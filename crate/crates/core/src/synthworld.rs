//! Procedural identity world.
//!
//! An identity is a set of coarse attributes (drawn as background colour,
//! a glyph around the centre and corner markers) plus a unique fine-grained
//! texture patch in the centre of the image. Attributes are shared across
//! many identities; the texture is what a recognizer keys on. Scenes are
//! object renders with no texture patch and provide the non-identity data.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};
use crate::image::{Image, Origin, SIZE};
use crate::seed;

/// Centre texture patch occupies `[TEX_LO, TEX_HI)` in both axes.
pub const TEX_LO: usize = 8;
pub const TEX_HI: usize = 24;
/// Side of the identity tile repeated across the patch.
pub const TEX_TILE: usize = 4;
const TEX_AMPLITUDE: f32 = 0.8;
const MAX_FLAGS: usize = 4;

pub const TEMPLATE_WORDS: &[&str] = &["a", "portrait", "of", "on"];
pub const SCENE_SHAPES: &[&str] = &["ball", "box", "ring", "bar"];
pub const SCENE_COLORS: &[&str] = &["red", "green", "blue", "yellow"];
pub const SCENE_BACKGROUNDS: &[&str] = &["sky", "sand", "grass"];

pub fn name_word(id: u32) -> String {
    format!("name_{id:03}")
}

pub fn is_name_word(w: &str) -> bool {
    w.strip_prefix("name_").is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    /// One vocabulary word per value; the value count is `words.len()`.
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    /// Rendering roles by position: glyph shape, glyph colour, background.
    pub categories: Vec<Category>,
    pub flags: Vec<String>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let cat = |name: &str, words: &[&str]| Category {
            name: name.into(),
            words: words.iter().map(|w| w.to_string()).collect(),
        };
        Self {
            categories: vec![
                cat("gender", &["female", "male"]),
                cat("group", &["northern", "southern", "coastal"]),
                cat("occupation", &["doctor", "artist", "farmer", "pilot"]),
            ],
            flags: ["glasses", "beard", "freckles", "scar"].iter().map(|w| w.to_string()).collect(),
        }
    }
}

const GLYPH_SHAPES: usize = 4;
const GLYPH_COLORS: &[[f32; 3]] = &[
    [0.9, 0.7, 0.5],
    [0.55, 0.3, 0.1],
    [0.15, -0.05, -0.3],
    [0.9, 0.9, 0.2],
    [-0.2, 0.6, 0.9],
    [0.8, 0.2, 0.8],
];
const BACKGROUNDS: &[[f32; 3]] = &[
    [-0.55, -0.55, -0.15],
    [0.3, -0.45, 0.35],
    [-0.35, 0.3, 0.25],
    [0.35, 0.15, -0.45],
    [-0.7, -0.2, -0.6],
    [0.1, 0.1, 0.1],
    [-0.1, -0.7, 0.6],
    [0.6, -0.1, -0.1],
];
const SCENE_BG: &[[f32; 3]] = &[[-0.2, 0.1, 0.7], [0.6, 0.45, -0.1], [-0.3, 0.5, -0.45]];
const SCENE_RGB: &[[f32; 3]] = &[[0.9, -0.6, -0.6], [-0.6, 0.85, -0.6], [-0.6, -0.5, 0.9], [0.9, 0.8, -0.7]];
const MARKER: [f32; 3] = [0.95, 0.95, 0.95];

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.categories.len() != 3 {
            return Err(AplError::Config("schema needs exactly three categories (shape, colour, background roles)".into()));
        }
        let caps = [GLYPH_SHAPES, GLYPH_COLORS.len(), BACKGROUNDS.len()];
        let mut seen = std::collections::BTreeSet::new();
        for (cat, cap) in self.categories.iter().zip(caps) {
            if cat.words.len() < 2 {
                return Err(AplError::Config(format!("category {} needs at least 2 values", cat.name)));
            }
            if cat.words.len() > cap {
                return Err(AplError::Config(format!("category {} supports at most {cap} values", cat.name)));
            }
            if !seen.insert(cat.name.clone()) {
                return Err(AplError::Config(format!("duplicate category {}", cat.name)));
            }
        }
        if self.flags.len() > MAX_FLAGS {
            return Err(AplError::Config(format!("at most {MAX_FLAGS} flags")));
        }
        let mut words = std::collections::BTreeSet::new();
        for w in self.attribute_words() {
            if is_name_word(&w) {
                return Err(AplError::Config(format!("attribute word {w} collides with name tokens")));
            }
            if !words.insert(w.clone()) {
                return Err(AplError::Config(format!("attribute word {w} used twice")));
            }
        }
        Ok(())
    }

    pub fn value_counts(&self) -> Vec<usize> {
        self.categories.iter().map(|c| c.words.len()).collect()
    }

    pub fn attribute_words(&self) -> Vec<String> {
        self.categories.iter().flat_map(|c| c.words.iter().cloned()).chain(self.flags.iter().cloned()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: u32,
    pub values: Vec<u8>,
    pub flags: u8,
    pub texture_key: u64,
}

impl IdentityRecord {
    pub fn flag(&self, i: usize) -> bool {
        self.flags >> i & 1 == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u32,
    pub shape: u8,
    pub color: u8,
    pub background: u8,
}

/// Content words of a prompt; BOS/EOS/PAD are added by the tokenizer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt(pub Vec<String>);

impl Prompt {
    pub fn words(&self) -> &[String] {
        &self.0
    }

    pub fn name_count(&self) -> usize {
        self.0.iter().filter(|w| is_name_word(w)).count()
    }
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub image: Image,
    pub c1: Prompt,
    pub c2: Prompt,
}

impl TripletSample {
    pub fn is_regularization(&self) -> bool {
        self.c1 == self.c2
    }
}

pub fn texture_key(world_seed: u64, id: u32) -> u64 {
    seed::derive(world_seed, "texture-key", &[id as u64])
}

/// Identity records `0..n` with every category value represented whenever
/// `n` is at least the category size.
pub fn sample_identities(n: usize, world_seed: u64, schema: &AttributeSchema) -> Result<Vec<IdentityRecord>> {
    if n == 0 {
        return Err(AplError::EmptyDataset("sample_identities with n = 0".into()));
    }
    schema.validate()?;
    let columns: Vec<Vec<u8>> = schema
        .value_counts()
        .iter()
        .enumerate()
        .map(|(k, &count)| {
            let mut col: Vec<u8> = (0..n).map(|i| (i % count) as u8).collect();
            col.shuffle(&mut seed::rng(world_seed, "identity-attribute", &[k as u64]));
            col
        })
        .collect();
    let mut flag_rng = seed::rng(world_seed, "identity-flags", &[]);
    let flag_mask = ((1u16 << schema.flags.len()) - 1) as u8;
    let records: Vec<IdentityRecord> = (0..n)
        .map(|i| IdentityRecord {
            id: i as u32,
            values: columns.iter().map(|c| c[i]).collect(),
            flags: flag_rng.random::<u8>() & flag_mask,
            texture_key: texture_key(world_seed, i as u32),
        })
        .collect();
    let mut keys: Vec<u64> = records.iter().map(|r| r.texture_key).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.len() != n {
        return Err(AplError::Precondition("texture-key collision".into()));
    }
    Ok(records)
}

/// An unnamed person with random attributes and a fresh texture.
pub fn anonymous_record<R: Rng + ?Sized>(rng: &mut R, schema: &AttributeSchema) -> IdentityRecord {
    let flag_mask = ((1u16 << schema.flags.len()) - 1) as u8;
    IdentityRecord {
        id: u32::MAX,
        values: schema.value_counts().iter().map(|&c| rng.random_range(0..c) as u8).collect(),
        flags: rng.random::<u8>() & flag_mask,
        texture_key: rng.random(),
    }
}

pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, id: u32) -> SceneRecord {
    SceneRecord {
        id,
        shape: rng.random_range(0..SCENE_SHAPES.len()) as u8,
        color: rng.random_range(0..SCENE_COLORS.len()) as u8,
        background: rng.random_range(0..SCENE_BACKGROUNDS.len()) as u8,
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `4 × 4` pixel tile (3 signs per pixel) behind a texture key.
pub fn texture_cells(key: u64) -> [[f32; 3]; TEX_TILE * TEX_TILE] {
    let bits = splitmix(key);
    let mut out = [[0.0; 3]; TEX_TILE * TEX_TILE];
    for (i, cell) in out.iter_mut().enumerate() {
        for (c, v) in cell.iter_mut().enumerate() {
            *v = if bits >> (i * 3 + c) & 1 == 1 { TEX_AMPLITUDE } else { -TEX_AMPLITUDE };
        }
    }
    out
}

struct Jitter {
    dx: i32,
    dy: i32,
    marker_dx: i32,
    marker_dy: i32,
    brightness: f32,
}

fn jitter(variation_seed: u64, key: u64) -> Jitter {
    let mut rng = seed::rng(variation_seed, "jitter", &[key]);
    Jitter {
        dx: rng.random_range(-2..=2),
        dy: rng.random_range(-2..=2),
        marker_dx: rng.random_range(-1..=1),
        marker_dy: rng.random_range(-1..=1),
        brightness: rng.random_range(-0.1..=0.1),
    }
}

fn shifted(rgb: [f32; 3], b: f32) -> [f32; 3] {
    [rgb[0] + b, rgb[1] + b, rgb[2] + b]
}

fn glyph_hit(shape: u8, dx: f32, dy: f32) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => (11.0..=14.0).contains(&r),
        1 => (11.0..=14.0).contains(&dx.abs().max(dy.abs())),
        2 => (14.0..=17.5).contains(&(dx.abs() + dy.abs())),
        _ => (dx.abs() <= 2.5 && (10.0..=15.0).contains(&dy.abs())) || (dy.abs() <= 2.5 && (10.0..=15.0).contains(&dx.abs())),
    }
}

/// Coarse attribute content only (no texture patch).
fn render_coarse(rec: &IdentityRecord, j: &Jitter, origin: Origin) -> Image {
    let bg = BACKGROUNDS[rec.values[2] as usize];
    let mut im = Image::filled(shifted(bg, j.brightness), origin);
    let glyph = shifted(GLYPH_COLORS[rec.values[1] as usize], j.brightness);
    let (cx, cy) = (15.5 + j.dx as f32, 15.5 + j.dy as f32);
    for y in 0..SIZE {
        for x in 0..SIZE {
            if glyph_hit(rec.values[0], x as f32 - cx, y as f32 - cy) {
                im.set_rgb(y, x, glyph);
            }
        }
    }
    let corners = [(2i32, 2i32), (2, 26), (26, 2), (26, 26)];
    for (i, (y0, x0)) in corners.iter().enumerate() {
        if !rec.flag(i) {
            continue;
        }
        let (y0, x0) = (y0 + j.marker_dy, x0 + j.marker_dx);
        for y in y0..y0 + 4 {
            for x in x0..x0 + 4 {
                im.set_rgb(y as usize, x as usize, shifted(MARKER, j.brightness));
            }
        }
    }
    im
}

fn paint_texture(im: &mut Image, key: u64) {
    let tile = texture_cells(key);
    for y in TEX_LO..TEX_HI {
        for x in TEX_LO..TEX_HI {
            im.set_rgb(y, x, tile[((y - TEX_LO) % TEX_TILE) * TEX_TILE + (x - TEX_LO) % TEX_TILE]);
        }
    }
}

/// Deterministic render of an identity. Jitter moves the glyph and markers
/// and shifts their brightness; the texture patch is never altered.
pub fn render_identity(rec: &IdentityRecord, variation_seed: u64) -> Image {
    let origin = if rec.id == u32::MAX {
        Origin::Anonymous { key: rec.texture_key, variation: variation_seed }
    } else {
        Origin::Identity { id: rec.id, variation: variation_seed }
    };
    let j = jitter(variation_seed, rec.texture_key);
    let mut im = render_coarse(rec, &j, origin);
    paint_texture(&mut im, rec.texture_key);
    im.clamp();
    im
}

/// The identity render without its texture patch; used by tests and
/// diagnostics to separate coarse content from identity content.
pub fn render_identity_coarse(rec: &IdentityRecord, variation_seed: u64) -> Image {
    let j = jitter(variation_seed, rec.texture_key);
    let mut im = render_coarse(rec, &j, Origin::Identity { id: rec.id, variation: variation_seed });
    im.clamp();
    im
}

pub fn render_scene(scene: &SceneRecord, variation_seed: u64) -> Image {
    let j = jitter(variation_seed, 0x5CE0_0000 ^ scene.id as u64);
    let mut im = Image::filled(
        shifted(SCENE_BG[scene.background as usize], j.brightness),
        Origin::Scene { id: scene.id, variation: variation_seed },
    );
    let color = shifted(SCENE_RGB[scene.color as usize], j.brightness);
    let (cx, cy) = (15.5 + j.dx as f32, 15.5 + j.dy as f32);
    for y in 0..SIZE {
        for x in 0..SIZE {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let hit = match scene.shape {
                0 => r <= 8.0,
                1 => dx.abs().max(dy.abs()) <= 7.0,
                2 => (5.0..=9.0).contains(&r),
                _ => dx.abs() <= 11.0 && dy.abs() <= 3.0,
            };
            if hit {
                im.set_rgb(y, x, color);
            }
        }
    }
    im.clamp();
    im
}

pub fn attr_prompt(rec: &IdentityRecord, schema: &AttributeSchema) -> Prompt {
    let mut words = vec!["a".to_string()];
    for (cat, v) in schema.categories.iter().zip(&rec.values) {
        words.push(cat.words[*v as usize].clone());
    }
    for (i, f) in schema.flags.iter().enumerate() {
        if rec.flag(i) {
            words.push(f.clone());
        }
    }
    Prompt(words)
}

pub fn scene_prompt(scene: &SceneRecord) -> Prompt {
    Prompt(vec![
        "a".into(),
        SCENE_COLORS[scene.color as usize].into(),
        SCENE_SHAPES[scene.shape as usize].into(),
        "on".into(),
        SCENE_BACKGROUNDS[scene.background as usize].into(),
    ])
}

/// Prompt naming an arbitrary token (used for personalization tokens).
pub fn portrait_prompt(token: &str) -> Prompt {
    Prompt(vec!["portrait".into(), "of".into(), token.into()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_holdout: usize,
    pub per_identity: usize,
    pub n_reg: usize,
    /// Probability of replacing one attribute word of c2 with a wrong value.
    pub c2_corruption: f64,
    pub schema: AttributeSchema,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 40,
            n_test: 40,
            n_holdout: 10,
            per_identity: 8,
            n_reg: 400,
            c2_corruption: 0.0,
            schema: AttributeSchema::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    pub holdout: Vec<u32>,
}

impl Split {
    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<u32> = self.train.iter().chain(&self.test).chain(&self.holdout).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub identities: Vec<IdentityRecord>,
    pub split: Split,
}

impl World {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        if config.n_train == 0 || config.n_test == 0 {
            return Err(AplError::EmptyDataset("train and test identity sets must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&config.c2_corruption) {
            return Err(AplError::Config("c2_corruption must lie in [0, 1]".into()));
        }
        let n = config.n_train + config.n_test + config.n_holdout;
        let identities = sample_identities(n, config.seed, &config.schema)?;
        let ids: Vec<u32> = (0..n as u32).collect();
        let split = Split {
            train: ids[..config.n_train].to_vec(),
            test: ids[config.n_train..config.n_train + config.n_test].to_vec(),
            holdout: ids[config.n_train + config.n_test..].to_vec(),
        };
        Ok(Self { config: config.clone(), identities, split })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.config.schema
    }

    pub fn record(&self, id: u32) -> Result<&IdentityRecord> {
        self.identities
            .get(id as usize)
            .filter(|r| r.id == id)
            .ok_or_else(|| AplError::Vocabulary(format!("identity {id} is not registered")))
    }

    pub fn records(&self, ids: &[u32]) -> Result<Vec<IdentityRecord>> {
        ids.iter().map(|&id| self.record(id).cloned()).collect()
    }

    /// `portrait of name_k`.
    pub fn make_id_prompt(&self, rec: &IdentityRecord) -> Result<Prompt> {
        let known = self.record(rec.id)?;
        if known.texture_key != rec.texture_key {
            return Err(AplError::Vocabulary(format!("identity {} does not match the registered record", rec.id)));
        }
        Ok(portrait_prompt(&name_word(rec.id)))
    }

    pub fn make_attr_prompt(&self, rec: &IdentityRecord) -> Prompt {
        attr_prompt(rec, self.schema())
    }

    /// `per_identity` triplets per record, variation seeds derived from `seed`.
    pub fn build_id_dataset(&self, records: &[IdentityRecord], per_identity: usize, seed: u64) -> Result<Vec<TripletSample>> {
        if records.is_empty() {
            return Err(AplError::EmptyDataset("build_id_dataset without records".into()));
        }
        if per_identity == 0 {
            return Err(AplError::Config("per_identity must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(records.len() * per_identity);
        for rec in records {
            let c1 = self.make_id_prompt(rec)?;
            for j in 0..per_identity {
                let variation = seed::derive(seed, "id-variation", &[rec.id as u64, j as u64]);
                let mut c2 = self.make_attr_prompt(rec);
                if self.config.c2_corruption > 0.0 {
                    let mut rng = seed::rng(seed, "c2-corruption", &[rec.id as u64, j as u64]);
                    if rng.random_bool(self.config.c2_corruption) {
                        corrupt_attribute(&mut c2, rec, self.schema(), &mut rng);
                    }
                }
                out.push(TripletSample { image: render_identity(rec, variation), c1: c1.clone(), c2 });
            }
        }
        Ok(out)
    }

    pub fn scenes(&self, n: usize, seed: u64) -> Vec<SceneRecord> {
        let mut rng = seed::rng(seed, "scenes", &[]);
        (0..n as u32).map(|i| random_scene(&mut rng, i)).collect()
    }
}

fn corrupt_attribute<R: Rng + ?Sized>(c2: &mut Prompt, rec: &IdentityRecord, schema: &AttributeSchema, rng: &mut R) {
    let k = rng.random_range(0..schema.categories.len());
    let count = schema.categories[k].words.len();
    let wrong = (rec.values[k] as usize + rng.random_range(1..count)) % count;
    // word slots: "a", then one word per category
    c2.0[1 + k] = schema.categories[k].words[wrong].clone();
}

/// Non-identity scenes with `c1 = c2`.
pub fn build_reg_dataset(n: usize, seed: u64) -> Result<Vec<TripletSample>> {
    if n == 0 {
        return Err(AplError::EmptyDataset("build_reg_dataset with n = 0".into()));
    }
    let mut rng = seed::rng(seed, "reg-scenes", &[]);
    Ok((0..n as u32)
        .map(|i| {
            let scene = random_scene(&mut rng, i);
            let p = scene_prompt(&scene);
            let variation = seed::derive(seed, "reg-variation", &[i as u64]);
            TripletSample { image: render_scene(&scene, variation), c1: p.clone(), c2: p }
        })
        .collect())
}


pub const MANIFEST_FORMAT: &str = "synthworld/1";
const PACK_MAGIC: &[u8; 4] = b"SWPK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub origin: Origin,
    pub c1: Prompt,
    pub c2: Prompt,
}

/// On-disk description of a generated world and its APL datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: WorldConfig,
    pub identities: Vec<IdentityRecord>,
    pub split: Split,
    pub s_id: Vec<SampleEntry>,
    pub s_reg: Vec<SampleEntry>,
    pub packed_file: String,
    /// SHA-256 of the raw pixel values in the packed file.
    pub pixels_sha256: String,
    /// SHA-256 of this manifest serialized with an empty `content_hash`.
    pub content_hash: String,
}

impl Manifest {
    fn compute_hash(&self) -> Result<String> {
        let mut blank = self.clone();
        blank.content_hash.clear();
        Ok(seed::sha256_hex(serde_json::to_string(&blank)?.as_bytes()))
    }
}

fn pixel_bytes(samples: &[&TripletSample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * crate::image::PIXELS * 4);
    for s in samples {
        for v in &s.image.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn entries(samples: &[TripletSample]) -> Vec<SampleEntry> {
    samples.iter().map(|s| SampleEntry { origin: s.image.origin, c1: s.c1.clone(), c2: s.c2.clone() }).collect()
}

/// Writes `manifest.json`, `images.bin` and one PNG per sample under `dir`.
/// The packed file and every PNG carry the manifest's content hash.
pub fn write_world(world: &World, s_id: &[TripletSample], s_reg: &[TripletSample], dir: &std::path::Path) -> Result<Manifest> {
    let all: Vec<&TripletSample> = s_id.iter().chain(s_reg).collect();
    let pixels = pixel_bytes(&all);
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: world.config.clone(),
        identities: world.identities.clone(),
        split: world.split.clone(),
        s_id: entries(s_id),
        s_reg: entries(s_reg),
        packed_file: "images.bin".into(),
        pixels_sha256: seed::sha256_hex(&pixels),
        content_hash: String::new(),
    };
    manifest.content_hash = manifest.compute_hash()?;

    let mut packed = Vec::with_capacity(pixels.len() + 80);
    packed.extend_from_slice(PACK_MAGIC);
    packed.extend_from_slice(manifest.content_hash.as_bytes());
    packed.extend_from_slice(&(all.len() as u64).to_le_bytes());
    packed.extend_from_slice(&pixels);
    crate::image::write_atomic(&dir.join(&manifest.packed_file), &packed)?;

    let png_dir = dir.join("png");
    std::fs::create_dir_all(&png_dir)?;
    for (name, set) in [("s_id", s_id), ("s_reg", s_reg)] {
        for (i, s) in set.iter().enumerate() {
            let path = png_dir.join(format!("{name}_{i:05}.png"));
            crate::image::write_png(&path, SIZE, SIZE, &s.image.to_rgb8(), &[("content-hash", &manifest.content_hash)])?;
        }
    }
    crate::image::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Loaded world with its datasets, after hash verification.
pub struct StoredWorld {
    pub world: World,
    pub s_id: Vec<TripletSample>,
    pub s_reg: Vec<TripletSample>,
    pub manifest: Manifest,
}

pub fn read_world(dir: &std::path::Path) -> Result<StoredWorld> {
    let bad = |path: std::path::PathBuf, reason: &str| AplError::Artifact { path, reason: reason.into() };
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => AplError::Missing(mpath.clone()),
        _ => e.into(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(bad(mpath, "unknown manifest format"));
    }
    if manifest.compute_hash()? != manifest.content_hash {
        return Err(bad(mpath, "manifest content hash mismatch"));
    }
    let ppath = dir.join(&manifest.packed_file);
    let packed = std::fs::read(&ppath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => AplError::Missing(ppath.clone()),
        _ => e.into(),
    })?;
    let count = manifest.s_id.len() + manifest.s_reg.len();
    let head = 4 + 64 + 8;
    if packed.len() != head + count * crate::image::PIXELS * 4 || &packed[..4] != PACK_MAGIC {
        return Err(bad(ppath, "packed file has the wrong layout"));
    }
    if &packed[4..68] != manifest.content_hash.as_bytes() {
        return Err(bad(ppath, "packed file belongs to another manifest"));
    }
    let pixels = &packed[head..];
    if seed::sha256_hex(pixels) != manifest.pixels_sha256 {
        return Err(bad(ppath, "pixel data hash mismatch"));
    }
    let world = World::generate(&manifest.config)?;
    if world.identities != manifest.identities || world.split != manifest.split {
        return Err(bad(mpath, "identity records disagree with the generator"));
    }
    let mut values = pixels.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut load = |list: &[SampleEntry]| -> Vec<TripletSample> {
        list.iter()
            .map(|e| {
                let data: Vec<f32> = values.by_ref().take(crate::image::PIXELS).collect();
                TripletSample { image: Image { data, origin: e.origin }, c1: e.c1.clone(), c2: e.c2.clone() }
            })
            .collect()
    };
    let s_id = load(&manifest.s_id);
    let s_reg = load(&manifest.s_reg);
    Ok(StoredWorld { world, s_id, s_reg, manifest })
}
