//! Evaluation metrics and report assembly.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};
use crate::image::Image;
use crate::recognizer::{cosine, reference_renders, AttributeProbe, FEATURE_DIM};
use crate::synthworld::{self, AttributeSchema, Prompt, World};

/// Covariance regularization added to both sides of the Fréchet distance.
pub const FID_RIDGE: f64 = 1e-6;
pub const FID_MIN_SAMPLES: usize = FEATURE_DIM + 1;

/// A metric value with the number of samples behind it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub n: usize,
}

/// Mean over identities of group means and of group maxima.
pub fn aggregate_id_acc(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(AplError::EmptyDataset("no identity groups".into()));
    }
    let mut mean_sum = 0.0;
    let mut max_sum = 0.0;
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(AplError::EmptyDataset(format!("identity group {i} is empty")));
        }
        mean_sum += g.iter().sum::<f64>() / g.len() as f64;
        max_sum += g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let n = groups.len() as f64;
    Ok((mean_sum / n, max_sum / n))
}

/// Mean probe feature over the reference renders of an identity.
pub fn reference_feature(probe: &AttributeProbe, world: &World, id: u32) -> Result<Vec<f32>> {
    let feats = probe.features(&reference_renders(world.record(id)?));
    let mut mean = vec![0.0f32; FEATURE_DIM];
    for f in &feats {
        apl_nn::act::add_assign(&mut mean, f);
    }
    let k = 1.0 / feats.len() as f32;
    mean.iter_mut().for_each(|v| *v *= k);
    Ok(mean)
}

/// Mean cosine between probe features of each generated image and the mean
/// reference feature of its identity.
pub fn attr_acc(probe: &AttributeProbe, world: &World, generated: &[(u32, Vec<Image>)]) -> Result<Measured> {
    let mut sum = 0.0;
    let mut n = 0;
    for (id, images) in generated {
        let reference = reference_feature(probe, world, *id)?;
        for f in probe.features(images) {
            sum += cosine(&f, &reference);
            n += 1;
        }
    }
    if n == 0 {
        return Err(AplError::EmptyDataset("no generated images for attribute accuracy".into()));
    }
    Ok(Measured { value: sum / n as f64, n })
}

fn mean_cov(features: &[Vec<f32>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = features[0].len();
    let n = features.len();
    let mut mu = DVector::zeros(d);
    for f in features {
        for (j, v) in f.iter().enumerate() {
            mu[j] += *v as f64;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_iterator(d, f.iter().map(|v| *v as f64)) - &mu;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.nrows() != mu_a.len() || cov_b.nrows() != mu_b.len() {
        return Err(AplError::Shape("Fréchet statistics disagree in dimension".into()));
    }
    let d = mu_a.len();
    let ridge = DMatrix::<f64>::identity(d, d) * FID_RIDGE;
    let a = cov_a + &ridge;
    let b = cov_b + &ridge;
    // tr sqrt(A B) = tr sqrt(A^½ B A^½), the inner product being symmetric.
    let ra = sym_sqrt(&a);
    let inner = &ra * &b * &ra;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + a.trace() + b.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(AplError::Numeric("non-finite Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Fréchet distance between Gaussians fit to two feature sets.
pub fn frechet_distance(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let min = a.first().map_or(FID_MIN_SAMPLES, |f| f.len() + 1);
    for set in [a, b] {
        if set.len() < min {
            return Err(AplError::TooFewSamples { got: set.len(), min });
        }
    }
    if a.iter().chain(b).any(|f| f.len() != a[0].len()) {
        return Err(AplError::Shape("feature widths differ".into()));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    frechet_from_stats(&ma, &ca, &mb, &cb)
}

/// One prompt-stated value: which probe head and which class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stated {
    Category { k: usize, value: usize },
    Flag(usize),
    Scene { k: usize, value: usize },
}

/// Attribute values stated by a prompt's words. Absent flags are not stated.
pub fn stated_values(prompt: &Prompt, schema: &AttributeSchema) -> Vec<Stated> {
    let mut out = Vec::new();
    for w in prompt.words() {
        for (k, cat) in schema.categories.iter().enumerate() {
            if let Some(v) = cat.words.iter().position(|x| x == w) {
                out.push(Stated::Category { k, value: v });
            }
        }
        if let Some(i) = schema.flags.iter().position(|x| x == w) {
            out.push(Stated::Flag(i));
        }
        let scene_lists: [&[&str]; 3] = [&synthworld::SCENE_SHAPES, &synthworld::SCENE_COLORS, &synthworld::SCENE_BACKGROUNDS];
        for (k, list) in scene_lists.iter().enumerate() {
            if let Some(v) = list.iter().position(|x| x == w) {
                out.push(Stated::Scene { k, value: v });
            }
        }
    }
    out
}

/// Chance agreement of a stated value under a uniform guess.
pub fn chance_level(stated: Stated, schema: &AttributeSchema) -> f64 {
    let scene_counts = [synthworld::SCENE_SHAPES.len(), synthworld::SCENE_COLORS.len(), synthworld::SCENE_BACKGROUNDS.len()];
    match stated {
        Stated::Category { k, .. } => 1.0 / schema.categories[k].words.len() as f64,
        Stated::Flag(_) => 0.5,
        Stated::Scene { k, .. } => 1.0 / scene_counts[k] as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub value: f64,
    pub n: usize,
    /// Prompts without any extractable attribute.
    pub excluded: usize,
}

/// Mean fraction of prompt-stated values matched by probe argmax outputs.
pub fn prompt_fidelity(probe: &AttributeProbe, images: &[Image], prompts: &[Prompt], schema: &AttributeSchema) -> Result<Fidelity> {
    if images.is_empty() {
        return Err(AplError::EmptyDataset("no images for prompt fidelity".into()));
    }
    if images.len() != prompts.len() {
        return Err(AplError::Shape(format!("{} images for {} prompts", images.len(), prompts.len())));
    }
    let outputs = probe.attr_features(images);
    let mut sum = 0.0;
    let mut n = 0;
    let mut excluded = 0;
    for (o, p) in outputs.iter().zip(prompts) {
        let stated = stated_values(p, schema);
        if stated.is_empty() {
            excluded += 1;
            continue;
        }
        let hits = stated
            .iter()
            .filter(|s| match **s {
                Stated::Category { k, value } => o.category(k) == value,
                Stated::Flag(i) => o.flag(i),
                Stated::Scene { k, value } => o.scene_value(k) == value,
            })
            .count();
        sum += hits as f64 / stated.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(AplError::EmptyDataset(format!("all {excluded} prompts lack attribute words")));
    }
    Ok(Fidelity { value: sum / n as f64, n, excluded })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(AplError::TooFewSamples { got: x.len().min(y.len()), min: 2 });
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub identity: u32,
    pub split: String,
    pub mean_id_acc: f64,
    pub max_id_acc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mean_of_means: f64,
    pub mean_of_maxima: f64,
    pub identities: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidEntry {
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub reference: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<IdentityRow>,
    pub splits: BTreeMap<String, SplitSummary>,
    pub attr_acc: Option<Measured>,
    pub fid: Vec<FidEntry>,
    pub prompt_fidelity: Option<Fidelity>,
    pub config_fingerprint: String,
    pub iteration: u64,
    /// Content hashes of every input artifact, by role.
    pub inputs: BTreeMap<String, String>,
}

impl MetricsReport {
    /// Adds per-identity rows and recomputes the split summaries.
    pub fn add_split(&mut self, split: &str, groups: &[(u32, Vec<f64>)]) -> Result<()> {
        for (id, g) in groups {
            let (mean, max) = aggregate_id_acc(std::slice::from_ref(g))?;
            self.rows.push(IdentityRow { identity: *id, split: split.into(), mean_id_acc: mean, max_id_acc: max, n: g.len() });
        }
        let values: Vec<Vec<f64>> = groups.iter().map(|(_, g)| g.clone()).collect();
        let (m, x) = aggregate_id_acc(&values)?;
        self.splits.insert(split.into(), SplitSummary { mean_of_means: m, mean_of_maxima: x, identities: groups.len() });
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&SplitSummary> {
        self.splits.get(name).ok_or_else(|| AplError::Precondition(format!("report has no split {name}")))
    }

    /// One row per identity.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("identity,split,mean_id_acc,max_id_acc,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.identity, r.split, r.mean_id_acc, r.max_id_acc, r.n));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        let (m, x) = aggregate_id_acc(&[vec![0.2, 0.4], vec![0.6, 0.8]]).unwrap();
        assert!((m - 0.5).abs() < 1e-12 && (x - 0.6).abs() < 1e-12);
        assert_eq!(aggregate_id_acc(&[vec![0.3]]).unwrap(), (0.3, 0.3));
        assert!(aggregate_id_acc(&[vec![0.3], vec![]]).is_err());
        assert!(aggregate_id_acc(&[]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let v = frechet_from_stats(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::identity(2, 2) * 4.0;
        let z = DVector::zeros(2);
        let v = frechet_from_stats(&z, &a, &z, &b).unwrap();
        assert!((v - 2.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn frechet_requires_enough_samples() {
        let few: Vec<Vec<f32>> = (0..64).map(|i| vec![i as f32; 64]).collect();
        match frechet_distance(&few, &few) {
            Err(AplError::TooFewSamples { got: 64, min: 65 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn stated_values_from_prompts() {
        let schema = AttributeSchema::default();
        let p = Prompt(vec!["a".into(), schema.categories[0].words[1].clone(), schema.flags[2].clone()]);
        assert_eq!(stated_values(&p, &schema), vec![Stated::Category { k: 0, value: 1 }, Stated::Flag(2)]);
        let s = synthworld::scene_prompt(&synthworld::SceneRecord { id: 0, shape: 2, color: 1, background: 0 });
        assert_eq!(stated_values(&s, &schema).len(), 3);
        assert!(stated_values(&synthworld::portrait_prompt("name_000"), &schema).is_empty());
    }

    #[test]
    fn csv_has_one_row_per_identity() {
        let mut r = MetricsReport::default();
        r.add_split("test", &[(3, vec![0.1, 0.3]), (4, vec![0.5])]).unwrap();
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!((r.split("test").unwrap().mean_of_means - 0.35).abs() < 1e-12);
    }
}
