//! Frozen-feature evaluation with a temperature-weighted k-nearest-neighbour
//! vote over a small labelled bank.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Reader};
use crate::tfm::TimeFrequencyMap;
use crate::vit::Encoder;

pub const BANK_MAGIC: &[u8; 8] = b"FEATBNK1";
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// `M × d` feature matrix with one class id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<u16>,
}

impl FeatureBank {
    pub fn new(dim: usize, vectors: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("feature bank has no rows".into()));
        }
        if dim == 0 || vectors.len() != dim * labels.len() {
            return Err(Error::shape("FeatureBank::new", &[labels.len(), dim], &[vectors.len()]));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature bank vector".into()));
        }
        Ok(Self { dim, vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.vectors.len() + 2 * self.labels.len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        r.magic(BANK_MAGIC)?;
        let (m, d) = (r.u32()? as usize, r.u32()? as usize);
        let vectors = r.f32s(m * d)?;
        let labels = r
            .take(2 * m)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        r.finish()?;
        Self::new(d, vectors, labels).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub n_neighbors: usize,
    /// `None` gives a plain majority vote.
    pub temperature: Option<f64>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 1,
            temperature: Some(DEFAULT_TEMPERATURE),
        }
    }
}

impl KnnConfig {
    pub fn validate(&self, bank_size: usize) -> Result<()> {
        if self.n_neighbors == 0 || self.n_neighbors > bank_size {
            return Err(Error::Config(format!(
                "n_neighbors = {} must be in 1..={bank_size} (bank size)",
                self.n_neighbors
            )));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("knn temperature must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Encoder features of `maps` in batches; row `i` belongs to `labels[i]`.
pub fn extract_features(
    encoder: &Encoder,
    params: &ParamStore<f32>,
    maps: &[&TimeFrequencyMap],
    labels: &[u16],
    batch_size: usize,
) -> Result<FeatureBank> {
    if maps.len() != labels.len() {
        return Err(Error::shape("extract_features", &[maps.len()], &[labels.len()]));
    }
    let mut vectors = Vec::with_capacity(maps.len() * encoder.config().embed_dim);
    for chunk in maps.chunks(batch_size.max(1)) {
        vectors.extend_from_slice(encoder.encode(params, chunk)?.data());
    }
    FeatureBank::new(encoder.config().embed_dim, vectors, labels.to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: u16,
    /// `(class, score)` for every class among the neighbours, by class id.
    pub scores: Vec<(u16, f64)>,
}

fn unit(v: &[f32]) -> Vec<f64> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| x as f64 / norm).collect()
}

/// Cosine similarities of `query` to every bank row.
pub fn similarities(query: &[f32], bank: &FeatureBank) -> Result<Vec<f64>> {
    if query.len() != bank.dim {
        return Err(Error::shape("knn", &[bank.dim], &[query.len()]));
    }
    let q = unit(query);
    Ok((0..bank.len())
        .map(|i| unit(bank.vector(i)).iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn classify(query: &[f32], bank: &FeatureBank, cfg: &KnnConfig) -> Result<Prediction> {
    if bank.is_empty() {
        return Err(Error::Contract("classify against an empty bank".into()));
    }
    cfg.validate(bank.len())?;
    Ok(vote(&similarities(query, bank)?, bank.labels(), cfg))
}

fn vote(sims: &[f64], labels: &[u16], cfg: &KnnConfig) -> Prediction {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let top = &order[..cfg.n_neighbors];
    let weight = |s: f64, shift: f64| match cfg.temperature {
        Some(t) => ((s - shift) / t).exp(),
        None => 1.0,
    };
    let tally = |shift: f64| {
        let mut scores: Vec<(u16, f64)> = Vec::new();
        for &i in top {
            let w = weight(sims[i], shift);
            match scores.iter_mut().find(|(c, _)| *c == labels[i]) {
                Some((_, s)) => *s += w,
                None => scores.push((labels[i], w)),
            }
        }
        scores.sort_by_key(|&(c, _)| c);
        scores
    };
    let mut scores = tally(0.0);
    if scores.iter().any(|(_, s)| !s.is_finite()) {
        // exp overflowed; a common factor leaves the vote unchanged
        scores = tally(sims[top[0]]);
    }
    let class = scores
        .iter()
        .fold(None::<(u16, f64)>, |best, &(c, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((c, s)),
        })
        .map(|(c, _)| c)
        .expect("n_neighbors ≥ 1");
    Prediction { class, scores }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Actual classes, one per confusion-matrix row.
    pub classes: Vec<u16>,
    /// Predicted classes, one per column before the trailing `unknown` column.
    pub predicted_classes: Vec<u16>,
    pub per_class_accuracy: Vec<f64>,
    /// Row-normalised percentages; rows are actual classes.
    pub confusion: Vec<Vec<f64>>,
    pub n_test: usize,
    pub n_bank: usize,
    pub knn: KnnConfig,
}

/// Accuracy and confusion matrix of `test` rows classified against `bank`.
///
/// Test rows whose class never occurs in the bank are counted as errors in
/// the final `unknown` column.
pub fn evaluate(test: &FeatureBank, bank: &FeatureBank, cfg: &KnnConfig) -> Result<EvalReport> {
    cfg.validate(bank.len())?;
    if test.dim() != bank.dim() {
        return Err(Error::shape("evaluate", &[bank.dim()], &[test.dim()]));
    }
    let classes: Vec<u16> = test.labels().iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let predicted_classes: Vec<u16> = bank.labels().iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let unknown = predicted_classes.len();
    let mut counts = vec![vec![0usize; unknown + 1]; classes.len()];
    let mut correct = 0usize;
    for i in 0..test.len() {
        let actual = test.labels()[i];
        let row = classes.binary_search(&actual).expect("collected above");
        let col = if predicted_classes.binary_search(&actual).is_err() {
            unknown
        } else {
            let pred = vote(&similarities(test.vector(i), bank)?, bank.labels(), cfg).class;
            if pred == actual {
                correct += 1;
            }
            predicted_classes.binary_search(&pred).expect("bank class")
        };
        counts[row][col] += 1;
    }
    let confusion: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| 100.0 * c as f64 / total.max(1) as f64).collect()
        })
        .collect();
    let per_class_accuracy = classes
        .iter()
        .zip(&counts)
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            let hit = predicted_classes.binary_search(c).map(|j| row[j]).unwrap_or(0);
            hit as f64 / total.max(1) as f64
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        classes,
        predicted_classes,
        per_class_accuracy,
        confusion,
        n_test: test.len(),
        n_bank: bank.len(),
        knn: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank() -> FeatureBank {
        FeatureBank::new(2, vec![1.0, 0.0, 0.0, 1.0, 0.7, 0.7], vec![0, 1, 1]).unwrap()
    }

    #[test]
    fn nearest_self() {
        let b = bank();
        let cfg = KnnConfig {
            n_neighbors: 1,
            temperature: None,
        };
        for i in 0..b.len() {
            assert_eq!(classify(b.vector(i), &b, &cfg).unwrap().class, b.labels()[i]);
        }
    }

    #[test]
    fn too_many_neighbours_is_an_error() {
        let cfg = KnnConfig {
            n_neighbors: 4,
            temperature: None,
        };
        assert!(matches!(classify(&[1.0, 0.0], &bank(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn memorised_bank_is_perfect() {
        let b = bank();
        let r = evaluate(&b, &b, &KnnConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for row in &r.confusion {
            assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.1);
        }
    }

    #[test]
    fn unseen_test_class_lands_in_unknown_column() {
        let test = FeatureBank::new(2, vec![1.0, 0.0, 0.5, 0.5], vec![0, 7]).unwrap();
        let r = evaluate(&test, &bank(), &KnnConfig::default()).unwrap();
        assert_eq!(r.classes, vec![0, 7]);
        assert_eq!(r.confusion[1], vec![0.0, 0.0, 100.0]);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn bank_file_round_trip() {
        let b = bank();
        let bytes = b.encode();
        assert_eq!(FeatureBank::decode(&bytes, Path::new("b")).unwrap(), b);
        assert!(FeatureBank::decode(&bytes[..bytes.len() - 1], Path::new("b")).is_err());
    }

    proptest! {
        #[test]
        fn query_scale_does_not_matter(
            q in proptest::collection::vec(-1.0f32..1.0, 2),
            scale in 0.01f32..100.0,
            k in 1usize..=3,
        ) {
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            let b = bank();
            let cfg = KnnConfig { n_neighbors: k, temperature: Some(0.07) };
            let scaled: Vec<f32> = q.iter().map(|v| v * scale).collect();
            prop_assert_eq!(
                classify(&q, &b, &cfg).unwrap().class,
                classify(&scaled, &b, &cfg).unwrap().class
            );
        }

        #[test]
        fn full_bank_count_vote_is_majority(labels in proptest::collection::vec(0u16..3, 1..12)) {
            let m = labels.len();
            let vectors: Vec<f32> = (0..m).flat_map(|i| [(i as f32).cos(), (i as f32).sin()]).collect();
            let b = FeatureBank::new(2, vectors, labels.clone()).unwrap();
            let cfg = KnnConfig { n_neighbors: m, temperature: None };
            let pred = classify(&[1.0, 0.3], &b, &cfg).unwrap().class;
            let count = |c: u16| labels.iter().filter(|&&l| l == c).count();
            let best = (0..3u16).max_by(|&a, &b| count(a).cmp(&count(b)).then(b.cmp(&a))).unwrap();
            prop_assert_eq!(pred, best);
        }
    }
}
