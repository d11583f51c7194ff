//! Token matrices, datasets, frozen embeddings and train/test splits.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// An `n x d` matrix of token embeddings; row `k` is token `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Array2<f64>);

impl TokenMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::domain(format!("token matrix must be non-empty, got {n}x{d}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("token matrix has non-finite entries"));
        }
        Ok(TokenMatrix(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("ragged token rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::shape(e.to_string()))?;
        Self::new(values)
    }

    /// Wrap an internally produced matrix without validation.
    pub(crate) fn from_array_unchecked(values: Array2<f64>) -> Self {
        TokenMatrix(values)
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        TokenMatrix(Array2::zeros((n, d)))
    }

    /// Number of tokens.
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    /// Embedding dimension.
    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Regression or classification target of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Scalar(f64),
    Vector(Vec<f64>),
    /// Class label for cross-entropy over `c` logits.
    Class(usize),
}

impl Target {
    /// Output arity implied by the target, `None` for class labels (their
    /// arity is the dataset's class count).
    pub fn arity(&self) -> Option<usize> {
        match self {
            Target::Scalar(_) => Some(1),
            Target::Vector(v) => Some(v.len()),
            Target::Class(_) => None,
        }
    }

    /// Dense real view of a regression target.
    pub fn values(&self) -> Option<Vec<f64>> {
        match self {
            Target::Scalar(y) => Some(vec![*y]),
            Target::Vector(v) => Some(v.clone()),
            Target::Class(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: TokenMatrix,
    /// Token ids the matrix was embedded from, when known.
    pub tokens: Option<Vec<usize>>,
    pub target: Target,
}

impl Sample {
    pub fn new(x: TokenMatrix, target: Target) -> Self {
        Sample { x, tokens: None, target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    OneHot,
    FixedRandom,
}

/// Frozen token embedding. Embeddings are never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub vocab_size: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EmbeddingSpec {
    pub fn one_hot(vocab_size: usize) -> Self {
        EmbeddingSpec { kind: EmbeddingKind::OneHot, vocab_size, d: vocab_size, seed: 0 }
    }

    pub fn fixed_random(vocab_size: usize, d: usize, seed: u64) -> Self {
        EmbeddingSpec { kind: EmbeddingKind::FixedRandom, vocab_size, d, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d == 0 {
            return Err(Error::domain("embedding needs vocab_size >= 1 and d >= 1"));
        }
        if self.kind == EmbeddingKind::OneHot && self.d != self.vocab_size {
            return Err(Error::domain(format!(
                "one-hot embedding requires d = vocab_size, got d={} vocab={}",
                self.d, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Embedding row of a single token.
    pub fn row(&self, id: usize) -> Vec<f64> {
        match self.kind {
            EmbeddingKind::OneHot => {
                let mut r = vec![0.0; self.d];
                r[id] = 1.0;
                r
            }
            EmbeddingKind::FixedRandom => {
                let mut g = rng::keyed(self.seed, rng::stream::EMBEDDING, id as u64);
                let mut r = rng::normal_vec(&mut g, self.d);
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                // a zero draw has probability zero; keep the row finite regardless
                let norm = if norm > 0.0 { norm } else { 1.0 };
                r.iter_mut().for_each(|v| *v /= norm);
                r
            }
        }
    }
}

/// Embed a token sequence with a frozen embedding.
pub fn one_hot_embed(token_ids: &[usize], spec: &EmbeddingSpec) -> Result<TokenMatrix> {
    spec.validate()?;
    if token_ids.is_empty() {
        return Err(Error::domain("empty token list"));
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= spec.vocab_size) {
        return Err(Error::domain(format!("token id {bad} out of range for vocab {}", spec.vocab_size)));
    }
    let mut m = Array2::zeros((token_ids.len(), spec.d));
    for (k, &id) in token_ids.iter().enumerate() {
        for (dst, v) in m.row_mut(k).iter_mut().zip(spec.row(id)) {
            *dst = v;
        }
    }
    TokenMatrix::new(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Tokens per sample.
    pub n: usize,
    /// Embedding dimension.
    pub d: usize,
    /// Output arity (number of classes for class targets).
    pub c: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingSpec>,
    /// Free-form provenance notes (generator, defaults that were assumed).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl DatasetMeta {
    pub fn new(n: usize, d: usize, c: usize) -> Self {
        DatasetMeta { n, d, c, vocab_size: None, seed: None, embedding: None, notes: Vec::new() }
    }
}

/// Ordered samples sharing `(n, d)` and target arity `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("dataset needs at least one sample"));
        }
        Self::checked(meta, samples)
    }

    /// Like [`Dataset::new`] but lets the sample list be empty; only used for
    /// the held-out side of a degenerate split.
    fn checked(meta: DatasetMeta, samples: Vec<Sample>) -> Result<Self> {
        if meta.n == 0 || meta.d == 0 || meta.c == 0 {
            return Err(Error::domain("dataset meta needs n, d, c >= 1"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.rows() != meta.n || s.x.cols() != meta.d {
                return Err(Error::shape(format!(
                    "sample {i} is {}x{}, dataset is {}x{}",
                    s.x.rows(),
                    s.x.cols(),
                    meta.n,
                    meta.d
                )));
            }
            match &s.target {
                Target::Class(label) if *label >= meta.c => {
                    return Err(Error::domain(format!("sample {i} label {label} >= c = {}", meta.c)));
                }
                Target::Scalar(y) if !y.is_finite() => {
                    return Err(Error::domain(format!("sample {i} target is not finite")));
                }
                Target::Vector(v) if v.iter().any(|y| !y.is_finite()) => {
                    return Err(Error::domain(format!("sample {i} target is not finite")));
                }
                t => {
                    if let Some(a) = t.arity() {
                        if a != meta.c {
                            return Err(Error::shape(format!("sample {i} target arity {a} != c = {}", meta.c)));
                        }
                    }
                }
            }
        }
        if let Some(first) = samples.first() {
            let class = matches!(first.target, Target::Class(_));
            if samples.iter().any(|s| matches!(s.target, Target::Class(_)) != class) {
                return Err(Error::domain("mixed class and regression targets"));
            }
        }
        Ok(Dataset { meta, samples })
    }

    /// Build from samples, inferring `(n, d, c)` from the first sample.
    /// Class-labelled samples need an explicit class count.
    pub fn from_samples(samples: Vec<Sample>, classes: Option<usize>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::domain("dataset needs at least one sample"))?;
        let c = match (first.target.arity(), classes) {
            (Some(a), _) => a,
            (None, Some(c)) => c,
            (None, None) => return Err(Error::domain("class targets need an explicit class count")),
        };
        let meta = DatasetMeta::new(first.x.rows(), first.x.cols(), c);
        Self::new(meta, samples)
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut DatasetMeta {
        &mut self.meta
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn d(&self) -> usize {
        self.meta.d
    }

    pub fn c(&self) -> usize {
        self.meta.c
    }

    pub fn is_classification(&self) -> bool {
        self.samples.first().is_some_and(|s| matches!(s.target, Target::Class(_)))
    }

    /// A copy with the given sample order (indices may repeat).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DatasetFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(s)?;
        file.into_dataset()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    meta: MetaFile,
    samples: Vec<SampleFile>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    #[serde(flatten)]
    meta: DatasetMeta,
    #[serde(rename = "N", default)]
    num_samples: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<Vec<f64>>>,
    target: Target,
}

impl From<&Dataset> for DatasetFile {
    fn from(ds: &Dataset) -> Self {
        let embedded = ds.meta.embedding.is_some();
        let samples = ds
            .samples
            .iter()
            .map(|s| match (&s.tokens, embedded) {
                (Some(t), true) => SampleFile { tokens: Some(t.clone()), x: None, target: s.target.clone() },
                _ => SampleFile { tokens: None, x: Some(s.x.to_rows()), target: s.target.clone() },
            })
            .collect();
        DatasetFile { meta: MetaFile { meta: ds.meta.clone(), num_samples: ds.len() }, samples }
    }
}

impl DatasetFile {
    fn into_dataset(self) -> Result<Dataset> {
        let meta = self.meta.meta;
        let mut samples = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.into_iter().enumerate() {
            let x = match (s.x, &s.tokens, &meta.embedding) {
                (Some(rows), _, _) => TokenMatrix::from_rows(&rows)?,
                (None, Some(t), Some(spec)) => one_hot_embed(t, spec)?,
                (None, Some(_), None) => {
                    return Err(Error::domain(format!("sample {i} has tokens but meta has no embedding")))
                }
                (None, None, _) => return Err(Error::domain(format!("sample {i} has neither tokens nor x"))),
            };
            samples.push(Sample { x, tokens: s.tokens, target: s.target });
        }
        Dataset::new(meta, samples)
    }
}

/// Shuffle with a seeded stream and cut into a train and a held-out part.
///
/// The train part takes the first `floor(N * train_fraction)` shuffled samples.
pub fn split_dataset(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::domain(format!("train_fraction must lie in (0, 1], got {train_fraction}")));
    }
    let total = data.len();
    let n_train = ((total as f64) * train_fraction + 1e-9).floor() as usize;
    if n_train < 1 {
        return Err(Error::domain(format!("split of {total} samples at {train_fraction} leaves no training data")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::keyed(seed, rng::stream::SPLIT, 0));
    let (tr, te) = order.split_at(n_train);
    let train = data.select(tr);
    let test = Dataset::checked(data.meta.clone(), te.iter().map(|&i| data.samples[i].clone()).collect())?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_samples: usize) -> Dataset {
        let samples = (0..n_samples)
            .map(|i| Sample::new(TokenMatrix::from_rows(&[vec![i as f64, 1.0]]).unwrap(), Target::Scalar(i as f64)))
            .collect();
        Dataset::from_samples(samples, None).unwrap()
    }

    #[test]
    fn one_hot_rows() {
        let m = one_hot_embed(&[0, 2], &EmbeddingSpec::one_hot(3)).unwrap();
        assert_eq!(m.to_rows(), vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
    }

    #[test]
    fn repeated_ids_share_rows() {
        for spec in [EmbeddingSpec::one_hot(3), EmbeddingSpec::fixed_random(3, 5, 11)] {
            let m = one_hot_embed(&[1, 1], &spec).unwrap();
            assert_eq!(m.as_array().row(0), m.as_array().row(1));
        }
    }

    #[test]
    fn fixed_random_is_deterministic_and_unit_norm() {
        let spec = EmbeddingSpec::fixed_random(4, 6, 7);
        let a = one_hot_embed(&[0], &spec).unwrap();
        let b = one_hot_embed(&[0], &spec).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.as_array().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_errors() {
        assert!(one_hot_embed(&[3], &EmbeddingSpec::one_hot(3)).is_err());
        assert!(one_hot_embed(&[], &EmbeddingSpec::one_hot(3)).is_err());
        let bad = EmbeddingSpec { kind: EmbeddingKind::OneHot, vocab_size: 3, d: 4, seed: 0 };
        assert!(one_hot_embed(&[0], &bad).is_err());
    }

    #[test]
    fn full_split_leaves_empty_test() {
        let (tr, te) = split_dataset(&toy(10), 1.0, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (10, 0));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let ds = toy(10);
        let (a1, b1) = split_dataset(&ds, 0.5, 3).unwrap();
        let (a2, b2) = split_dataset(&ds, 0.5, 3).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let mut ys: Vec<i64> = a1
            .samples()
            .iter()
            .chain(b1.samples())
            .map(|s| match s.target {
                Target::Scalar(y) => y as i64,
                _ => unreachable!(),
            })
            .collect();
        ys.sort();
        assert_eq!(ys, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = toy(4);
        assert!(split_dataset(&ds, 0.0, 0).is_err());
        assert!(split_dataset(&ds, 1.5, 0).is_err());
        assert!(split_dataset(&ds, 0.1, 0).is_err());
    }

    #[test]
    fn json_round_trip_with_tokens() {
        let spec = EmbeddingSpec::one_hot(4);
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample { x: one_hot_embed(&[i, 3], &spec).unwrap(), tokens: Some(vec![i, 3]), target: Target::Class(i) })
            .collect();
        let mut meta = DatasetMeta::new(2, 4, 3);
        meta.embedding = Some(spec);
        let ds = Dataset::new(meta, samples).unwrap();
        let json = ds.to_json().unwrap();
        assert!(json.contains("\"tokens\""));
        assert_eq!(Dataset::from_json(&json).unwrap(), ds);
    }

    #[test]
    fn rejects_inconsistent_samples() {
        let a = Sample::new(TokenMatrix::zeros(2, 2), Target::Scalar(0.0));
        let b = Sample::new(TokenMatrix::zeros(3, 2), Target::Scalar(0.0));
        assert!(Dataset::from_samples(vec![a.clone(), b], None).is_err());
        let c = Sample::new(TokenMatrix::zeros(2, 2), Target::Vector(vec![0.0, 1.0]));
        assert!(Dataset::from_samples(vec![a, c], None).is_err());
        assert!(TokenMatrix::new(Array2::from_elem((1, 1), f64::NAN)).is_err());
    }
}
