//! Word-level vocabulary and the transformer text encoder, including the
//! prefix-augmented encoding used by anonymization prompts.

use std::collections::HashMap;

use apl_nn::{Block, BlockSpec, Float, LayerNorm, Module, Param};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};
use crate::synthworld::{self, AttributeSchema, Prompt};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const VOCAB_FORMAT: &str = "vocab/1";
/// Reserved tokens for personalization, `sks_00`, `sks_01`, ...
pub const PERSONAL_TOKENS: usize = 16;

pub fn personal_word(i: usize) -> String {
    format!("sks_{i:02}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub format: String,
    pub tokens: Vec<String>,
    pub max_len: usize,
    /// Half-open id range of `name_###` tokens.
    pub names: (u32, u32),
    /// Half-open id range of personalization tokens.
    pub personal: (u32, u32),
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build(schema: &AttributeSchema, identities: usize, max_len: usize) -> Result<Self> {
        schema.validate()?;
        if max_len < 3 {
            return Err(AplError::Config("max_len must leave room for BOS, EOS and one word".into()));
        }
        let mut tokens: Vec<String> = ["<bos>", "<eos>", "<pad>"].iter().map(|s| s.to_string()).collect();
        tokens.extend(synthworld::TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(schema.attribute_words());
        for group in [synthworld::SCENE_COLORS, synthworld::SCENE_SHAPES, synthworld::SCENE_BACKGROUNDS] {
            tokens.extend(group.iter().map(|s| s.to_string()));
        }
        let lo = tokens.len() as u32;
        tokens.extend((0..identities as u32).map(synthworld::name_word));
        let names = (lo, tokens.len() as u32);
        tokens.extend((0..PERSONAL_TOKENS).map(personal_word));
        let personal = (names.1, tokens.len() as u32);
        Self::from_parts(tokens, max_len, names, personal)
    }

    fn from_parts(tokens: Vec<String>, max_len: usize, names: (u32, u32), personal: (u32, u32)) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(AplError::Vocabulary(format!("duplicate token {t}")));
            }
        }
        Ok(Self { format: VOCAB_FORMAT.into(), tokens, max_len, names, personal, index })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_str(text)?;
        if raw.format != VOCAB_FORMAT {
            return Err(AplError::Vocabulary(format!("unsupported vocabulary format {}", raw.format)));
        }
        if raw.tokens.get(..3).is_none_or(|s| s != ["<bos>", "<eos>", "<pad>"]) {
            return Err(AplError::Vocabulary("special tokens must occupy ids 0..3".into()));
        }
        Self::from_parts(raw.tokens, raw.max_len, raw.names, raw.personal)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index.get(word).copied().ok_or_else(|| AplError::Vocabulary(format!("unknown word {word:?}")))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_name(&self, id: u32) -> bool {
        (self.names.0..self.names.1).contains(&id)
    }

    /// `BOS words EOS PAD...`, padded to `max_len`.
    pub fn tokenize(&self, words: &[String]) -> Result<TokenSeq> {
        if words.len() + 2 > self.max_len {
            return Err(AplError::Vocabulary(format!(
                "{} words exceed the {}-token limit",
                words.len(),
                self.max_len
            )));
        }
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BOS);
        for w in words {
            ids.push(self.id(w)?);
        }
        ids.push(EOS);
        let real = ids.len();
        ids.resize(self.max_len, PAD);
        let mask = (0..self.max_len).map(|i| i < real).collect();
        Ok(TokenSeq { ids, mask })
    }

    pub fn tokenize_prompt(&self, prompt: &Prompt) -> Result<TokenSeq> {
        self.tokenize(prompt.words())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// `batch` token sequences of a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[&TokenSeq]) -> Result<Self> {
        let len = seqs.first().map(|s| s.ids.len()).ok_or_else(|| AplError::EmptyDataset("empty token batch".into()))?;
        if seqs.iter().any(|s| s.ids.len() != len) {
            return Err(AplError::Shape("token sequences differ in length".into()));
        }
        Ok(Self {
            ids: seqs.iter().flat_map(|s| s.ids.iter().copied()).collect(),
            mask: seqs.iter().flat_map(|s| s.mask.iter().copied()).collect(),
            batch: seqs.len(),
            len,
        })
    }
}

/// Contextual embeddings, `batch × len × dim`, with the key mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub values: Vec<T>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
}

impl<T: Float> TextEmbedding<T> {
    pub fn context(&self) -> apl_nn::Context<'_, T> {
        apl_nn::Context { values: &self.values, mask: Some(&self.mask), len: self.len }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rows of sample `b`.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.len * self.dim;
        &self.values[b * n..(b + 1) * n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 4, blocks: 2, mlp_ratio: 2 }
    }
}

/// Which encoder parameters receive gradients in a backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderGrad {
    Frozen,
    All,
    /// Only the listed token-embedding rows.
    Rows(Vec<u32>),
}

#[derive(Clone, Debug)]
pub struct TextEncoder<T> {
    pub token_emb: Param<T>,
    pub pos_emb: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub max_len: usize,
}

pub struct EncoderCache<T> {
    ids: Vec<u32>,
    batch: usize,
    len: usize,
    prefix_len: usize,
    blocks: Vec<apl_nn::block::BlockCache<T>>,
    norm: apl_nn::norm::LayerNormCache<T>,
}

impl<T: Float> TextEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, vocab_size: usize, max_len: usize, rng: &mut R) -> Self {
        let d = config.dim;
        let spec = BlockSpec { dim: d, heads: config.heads, mlp_ratio: config.mlp_ratio, ctx_dim: None, cond_dim: None };
        Self {
            token_emb: Param::randn(&[vocab_size, d], 0.5, rng),
            pos_emb: Param::randn(&[max_len, d], 0.1, rng),
            blocks: (0..config.blocks).map(|_| Block::new(spec, rng)).collect(),
            norm: LayerNorm::new(d),
            config,
            vocab_size,
            max_len,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn encode(&self, tokens: &TokenBatch) -> Result<TextEmbedding<T>> {
        Ok(self.forward(tokens, &[])?.0)
    }

    /// Prefix vectors (`m × dim`, shared by the batch) are inserted after
    /// BOS and contextualized jointly with the prompt.
    pub fn encode_with_prefix(&self, tokens: &TokenBatch, prefix: &[T]) -> Result<TextEmbedding<T>> {
        Ok(self.forward(tokens, prefix)?.0)
    }

    pub fn forward(&self, tokens: &TokenBatch, prefix: &[T]) -> Result<(TextEmbedding<T>, EncoderCache<T>)> {
        let d = self.dim();
        if prefix.len() % d != 0 {
            return Err(AplError::PromptWidth { prompt: prefix.len(), encoder: d });
        }
        if tokens.len > self.max_len || tokens.len == 0 {
            return Err(AplError::Shape(format!("token length {} outside 1..={}", tokens.len, self.max_len)));
        }
        if let Some(bad) = tokens.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(AplError::Vocabulary(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let m = prefix.len() / d;
        let (b, l) = (tokens.batch, tokens.len);
        let n = l + m;
        let mut x = vec![T::zero(); b * n * d];
        let mut mask = vec![true; b * n];
        for s in 0..b {
            for j in 0..n {
                let row = &mut x[(s * n + j) * d..(s * n + j + 1) * d];
                if j >= 1 && j <= m {
                    row.copy_from_slice(&prefix[(j - 1) * d..j * d]);
                    continue;
                }
                let p = if j == 0 { 0 } else { j - m };
                let id = tokens.ids[s * l + p] as usize;
                let e = &self.token_emb.value[id * d..(id + 1) * d];
                let pe = &self.pos_emb.value[p * d..(p + 1) * d];
                for ((r, a), c) in row.iter_mut().zip(e).zip(pe) {
                    *r = *a + *c;
                }
                mask[s * n + j] = tokens.mask[s * l + p];
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&x, b, n, Some(&mask), None, None);
            x = y;
            caches.push(c);
        }
        let (values, norm) = self.norm.forward(&x);
        let emb = TextEmbedding { values, mask, batch: b, len: n, dim: d };
        let cache = EncoderCache { ids: tokens.ids.clone(), batch: b, len: l, prefix_len: m, blocks: caches, norm };
        Ok((emb, cache))
    }

    /// Backpropagates `d_out` (same shape as the embedding). Returns the
    /// gradient of the prefix summed over the batch (`m × dim`).
    pub fn backward(&mut self, cache: &EncoderCache<T>, d_out: &[T], grads: &EncoderGrad) -> Vec<T> {
        let d = self.dim();
        let train_blocks = *grads == EncoderGrad::All;
        let mut dx = self.norm.backward(&cache.norm, d_out, train_blocks);
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = blk.backward(c, &dx, train_blocks).dx;
        }
        let (b, l, m) = (cache.batch, cache.len, cache.prefix_len);
        let n = l + m;
        let mut d_prefix = vec![T::zero(); m * d];
        for s in 0..b {
            for j in 0..n {
                let row = &dx[(s * n + j) * d..(s * n + j + 1) * d];
                if j >= 1 && j <= m {
                    apl_nn::act::add_assign(&mut d_prefix[(j - 1) * d..j * d], row);
                    continue;
                }
                let p = if j == 0 { 0 } else { j - m };
                let id = cache.ids[s * l + p];
                let take_row = match grads {
                    EncoderGrad::Frozen => false,
                    EncoderGrad::All => true,
                    EncoderGrad::Rows(rows) => rows.contains(&id),
                };
                if take_row {
                    let id = id as usize;
                    apl_nn::act::add_assign(&mut self.token_emb.grad[id * d..(id + 1) * d], row);
                }
                if train_blocks {
                    apl_nn::act::add_assign(&mut self.pos_emb.grad[p * d..(p + 1) * d], row);
                }
            }
        }
        d_prefix
    }

    /// Mean of all token-embedding rows.
    pub fn vocab_mean(&self) -> Vec<T> {
        let d = self.dim();
        let mut out = vec![T::zero(); d];
        for row in self.token_emb.value.chunks_exact(d) {
            apl_nn::act::add_assign(&mut out, row);
        }
        let k = T::lit(1.0 / self.vocab_size as f64);
        out.iter_mut().for_each(|v| *v *= k);
        out
    }

    pub fn token_row(&self, id: u32) -> &[T] {
        let d = self.dim();
        &self.token_emb.value[id as usize * d..(id as usize + 1) * d]
    }
}

impl<T: Float> Module<T> for TextEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&apl_nn::param::join(prefix, "token_emb"), &self.token_emb);
        f(&apl_nn::param::join(prefix, "pos_emb"), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&apl_nn::param::join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit(&apl_nn::param::join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&apl_nn::param::join(prefix, "token_emb"), &mut self.token_emb);
        f(&apl_nn::param::join(prefix, "pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&apl_nn::param::join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit_mut(&apl_nn::param::join(prefix, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&AttributeSchema::default(), 90, 16).unwrap()
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    fn encoder() -> TextEncoder<f32> {
        let v = vocab();
        TextEncoder::new(EncoderConfig::default(), v.len(), v.max_len, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn special_ids_are_fixed_and_dense() {
        let v = vocab();
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        for (i, t) in v.tokens.iter().enumerate() {
            assert_eq!(v.id(t).unwrap(), i as u32);
        }
        assert!(v.is_name(v.id("name_005").unwrap()));
        assert!(!v.is_name(v.id("doctor").unwrap()));
        assert_eq!(v.personal.1 - v.personal.0, PERSONAL_TOKENS as u32);
    }

    #[test]
    fn tokenize_edges() {
        let v = vocab();
        let empty = v.tokenize(&[]).unwrap();
        assert_eq!(&empty.ids[..3], &[BOS, EOS, PAD]);
        assert_eq!(empty.ids.len(), 16);
        assert_eq!(empty.real_len(), 2);
        let p = v.tokenize(&words(&["portrait", "of", "name_005"])).unwrap();
        assert_eq!(p.real_len(), 5);
        assert_eq!(p.ids[..5], [BOS, v.id("portrait").unwrap(), v.id("of").unwrap(), v.id("name_005").unwrap(), EOS]);
        assert!(matches!(v.tokenize(&words(&["zzz"])), Err(AplError::Vocabulary(_))));
        assert!(v.tokenize(&vec!["a".to_string(); 15]).is_err());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = vocab();
        let text = v.to_json();
        assert!(text.contains("\"vocab/1\""));
        let back = Vocabulary::from_json(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("sks_03").unwrap(), v.id("sks_03").unwrap());
        let bad = text.replace("vocab/1", "vocab/9");
        assert!(Vocabulary::from_json(&bad).is_err());
    }

    fn batch(v: &Vocabulary, ws: &[&str]) -> TokenBatch {
        TokenBatch::new(&[&v.tokenize(&words(ws)).unwrap()]).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let (v, enc) = (vocab(), encoder());
        let t = batch(&v, &["portrait", "of", "name_005"]);
        let a = enc.encode(&t).unwrap();
        assert_eq!(a, enc.encode(&t).unwrap());
        assert_eq!((a.len, a.dim, a.values.len()), (16, 64, 16 * 64));
        assert!(a.is_finite());
        assert_eq!(a.mask.iter().filter(|m| **m).count(), 5);
    }

    #[test]
    fn one_token_changes_output() {
        let (v, enc) = (vocab(), encoder());
        let a = enc.encode(&batch(&v, &["portrait", "of", "name_005"])).unwrap();
        let b = enc.encode(&batch(&v, &["portrait", "of", "name_006"])).unwrap();
        let diff: f32 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn empty_prefix_is_bit_identical() {
        let (v, enc) = (vocab(), encoder());
        let t = batch(&v, &["a", "male", "coastal", "pilot", "scar"]);
        assert_eq!(enc.encode(&t).unwrap(), enc.encode_with_prefix(&t, &[]).unwrap());
    }

    #[test]
    fn prefix_grows_length_and_context_shifts_content() {
        let (v, enc) = (vocab(), encoder());
        let t = batch(&v, &["portrait", "of", "name_005"]);
        let plain = enc.encode(&t).unwrap();
        let zeros = vec![0.0f32; 10 * 64];
        let pre = enc.encode_with_prefix(&t, &zeros).unwrap();
        assert_eq!(pre.len, plain.len + 10);
        assert!(pre.mask[..11].iter().all(|m| *m));
        // content token "portrait" sits at index 1 without prefix, 11 with it
        let a = &plain.values[64..128];
        let b = &pre.values[11 * 64..12 * 64];
        let diff: f32 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-4, "joint contextualization should move content embeddings");
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (v, enc) = (vocab(), encoder());
        let t = batch(&v, &["portrait"]);
        assert!(matches!(enc.encode_with_prefix(&t, &[0.0; 96]), Err(AplError::PromptWidth { .. })));
    }

    #[test]
    fn frozen_backward_leaves_weights_without_grads() {
        let v = vocab();
        let mut enc = encoder();
        let t = batch(&v, &["portrait", "of", "name_001"]);
        let prefix = vec![0.01f32; 3 * 64];
        let (out, cache) = enc.forward(&t, &prefix).unwrap();
        let ones = vec![1.0f32; out.values.len()];
        let dp = enc.backward(&cache, &ones, &EncoderGrad::Frozen);
        assert_eq!(dp.len(), 3 * 64);
        assert!(dp.iter().any(|g| *g != 0.0));
        assert_eq!(apl_nn::param::grad_norm_sq(&enc), 0.0);
    }

    #[test]
    fn row_mode_touches_only_listed_rows() {
        let v = vocab();
        let mut enc = encoder();
        let sks = v.id("sks_00").unwrap();
        let t = batch(&v, &["portrait", "of", "sks_00"]);
        let (out, cache) = enc.forward(&t, &[]).unwrap();
        let ones = vec![1.0f32; out.values.len()];
        enc.backward(&cache, &ones, &EncoderGrad::Rows(vec![sks]));
        let d = enc.dim();
        for (i, row) in enc.token_emb.grad.chunks_exact(d).enumerate() {
            let nonzero = row.iter().any(|g| *g != 0.0);
            assert_eq!(nonzero, i as u32 == sks, "row {i}");
        }
        assert!(enc.pos_emb.grad.iter().all(|g| *g == 0.0));
    }
}
