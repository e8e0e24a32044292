//! Zero-shot prompt transfer between text encoders through a linear map
//! fitted on shared token embeddings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::apl::AnonymizationPrompt;
use crate::diffusion::DiffusionModel;
use crate::error::{AplError, Result};

pub const TRANSFER_RIDGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharedVocab {
    /// Every word present in both vocabularies.
    #[default]
    All,
    /// As `All`, minus the personalization tokens that base training never
    /// updates.
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMap {
    pub d_src: usize,
    pub d_tgt: usize,
    /// `d_tgt × d_src`, row-major.
    pub weights: Vec<f32>,
    pub mean_residual: f64,
    /// Number of shared words the map was fitted on.
    pub coverage: usize,
    pub src_fingerprint: [u8; 32],
    pub tgt_fingerprint: [u8; 32],
}

impl EmbeddingMap {
    pub fn identity(d: usize, fingerprint: [u8; 32]) -> Self {
        let mut weights = vec![0.0; d * d];
        for i in 0..d {
            weights[i * d + i] = 1.0;
        }
        Self { d_src: d, d_tgt: d, weights, mean_residual: 0.0, coverage: 0, src_fingerprint: fingerprint, tgt_fingerprint: fingerprint }
    }

    pub fn apply(&self, v: &[f32]) -> Vec<f32> {
        self.weights.chunks_exact(self.d_src).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Least-squares fit of `W` minimizing `Σ ||W x_v − y_v||² + λ||W||²` over
/// paired rows.
pub fn fit_linear(src: &[Vec<f64>], tgt: &[Vec<f64>], ridge: f64) -> Result<(DMatrix<f64>, f64)> {
    if src.is_empty() || src.len() != tgt.len() {
        return Err(AplError::EmptyDataset("no shared vocabulary to fit a transfer map".into()));
    }
    let (n, ds, dt) = (src.len(), src[0].len(), tgt[0].len());
    let x = DMatrix::from_fn(n, ds, |i, j| src[i][j]);
    let y = DMatrix::from_fn(n, dt, |i, j| tgt[i][j]);
    let gram = x.transpose() * &x + DMatrix::identity(ds, ds) * ridge;
    let chol = gram.cholesky().ok_or_else(|| AplError::Numeric("normal equations are rank deficient".into()))?;
    let wt = chol.solve(&(x.transpose() * &y));
    let pred = &x * &wt;
    let residual = (0..n).map(|i| (pred.row(i) - y.row(i)).norm()).sum::<f64>() / n as f64;
    Ok((wt.transpose(), residual))
}

/// Fits the map from the source model's token embeddings to the target's.
pub fn fit_embedding_map<S: apl_nn::Float, U: apl_nn::Float>(
    src: &DiffusionModel<S>,
    tgt: &DiffusionModel<U>,
    shared: SharedVocab,
) -> Result<EmbeddingMap> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let personal = src.vocab.personal;
    for (id, word) in src.vocab.tokens.iter().enumerate() {
        let id = id as u32;
        if shared == SharedVocab::Trained && (personal.0..personal.1).contains(&id) {
            continue;
        }
        let Ok(tid) = tgt.vocab.id(word) else { continue };
        xs.push(src.encoder.token_row(id).iter().map(|v| v.to_f64().unwrap()).collect::<Vec<f64>>());
        ys.push(tgt.encoder.token_row(tid).iter().map(|v| v.to_f64().unwrap()).collect::<Vec<f64>>());
    }
    let (w, mean_residual) = fit_linear(&xs, &ys, TRANSFER_RIDGE)?;
    Ok(EmbeddingMap {
        d_src: src.text_dim(),
        d_tgt: tgt.text_dim(),
        weights: (0..w.nrows()).flat_map(|i| (0..w.ncols()).map(move |j| (i, j))).map(|ij| w[ij] as f32).collect(),
        mean_residual,
        coverage: xs.len(),
        src_fingerprint: src.encoder_fingerprint(),
        tgt_fingerprint: tgt.encoder_fingerprint(),
    })
}

/// Maps every prompt vector through the map and stamps the target
/// fingerprint.
pub fn transfer_prompt(prompt: &AnonymizationPrompt, map: &EmbeddingMap) -> Result<AnonymizationPrompt> {
    prompt.check_compatible(map.d_src, &map.src_fingerprint)?;
    let vectors: Vec<f32> = (0..prompt.m).flat_map(|i| map.apply(prompt.row(i))).collect();
    let mut out = AnonymizationPrompt::new(vectors, prompt.m, map.d_tgt, map.tgt_fingerprint)?;
    out.iteration = prompt.iteration;
    out.alpha = prompt.alpha;
    Ok(out)
}

/// Reuses the prompt as is in an encoder of the same width that shares the
/// embedding table.
pub fn copy_prompt(prompt: &AnonymizationPrompt, target_d: usize, target_fingerprint: [u8; 32]) -> Result<AnonymizationPrompt> {
    if prompt.d != target_d {
        return Err(AplError::PromptWidth { prompt: prompt.d, encoder: target_d });
    }
    let mut out = prompt.clone();
    out.fingerprint = target_fingerprint;
    Ok(out)
}
