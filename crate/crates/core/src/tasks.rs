//! Dataset generators for the experiments and grokking metrics.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::convex::AttentionImportance;
use crate::data::{one_hot_embed, Dataset, DatasetMeta, EmbeddingSpec, Sample, Target, TokenMatrix};
use crate::error::{Error, Result};
use crate::nonconvex::{alt_forward, AltAttnParams, AltHead, AltVariant};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModularOp {
    #[default]
    Division,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModularTaskSpec {
    pub p: u64,
    #[serde(default)]
    pub op: ModularOp,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Accept a composite modulus; divisors then range over the units mod `p`.
    #[serde(default)]
    pub allow_composite: bool,
}

fn default_train_fraction() -> f64 {
    0.5
}

impl ModularTaskSpec {
    pub fn new(p: u64) -> Self {
        ModularTaskSpec { p, op: ModularOp::Division, train_fraction: 0.5, seed: 0, allow_composite: false }
    }
}

pub fn is_prime(p: u64) -> bool {
    p >= 2 && (2..).take_while(|k| k * k <= p).all(|k| p % k != 0)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Inverse of `b` modulo `p`, if it exists.
pub fn mod_inverse(b: u64, p: u64) -> Option<u64> {
    (1..p).find(|x| (b * x) % p == 1)
}

/// All equations `a / b = c (mod p)` as tokens `<a> <op> <b> <eq>` with
/// one-hot embeddings over `p + 2` symbols and class target `c`.
///
/// Samples are ordered by divisor, then quotient.
pub fn gen_modular_division(spec: &ModularTaskSpec) -> Result<Dataset> {
    let p = spec.p;
    if p < 2 {
        return Err(Error::domain(format!("modulus must be >= 2, got {p}")));
    }
    let prime = is_prime(p);
    if !prime && !spec.allow_composite {
        return Err(Error::domain(format!("modulus {p} is not prime; division is undefined for some divisors")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return Err(Error::domain("train_fraction must lie in (0, 1]"));
    }
    let vocab = (p + 2) as usize;
    let (op, eq) = (p as usize, p as usize + 1);
    let embedding = EmbeddingSpec::one_hot(vocab);
    let mut samples = Vec::new();
    for b in 1..p {
        if gcd(b, p) != 1 {
            continue;
        }
        for c in 0..p {
            let a = (b * c) % p;
            let tokens = vec![a as usize, op, b as usize, eq];
            let x = one_hot_embed(&tokens, &embedding)?;
            samples.push(Sample { x, tokens: Some(tokens), target: Target::Class(c as usize) });
        }
    }
    let mut meta = DatasetMeta::new(4, vocab, p as usize);
    meta.vocab_size = Some(vocab);
    meta.seed = Some(spec.seed);
    meta.embedding = Some(embedding);
    meta.notes = vec![
        format!("modular division mod {p}"),
        "layout <a> <op> <b> <eq>, one-hot embeddings, vocab p + 2 (assumed)".into(),
        format!("train_fraction {} (assumed default 0.5 unless configured)", spec.train_fraction),
    ];
    if !prime {
        meta.notes.push(format!("composite modulus: divisors restricted to units mod {p}"));
    }
    Dataset::new(meta, samples)
}

/// Teacher with `h_teacher` heads on distinct tokens, drawn from `seed`.
pub fn teacher_params(n: usize, d: usize, c: usize, h_teacher: usize, seed: u64) -> Result<AltAttnParams> {
    if h_teacher > n {
        return Err(Error::domain(format!("teacher has {h_teacher} heads but only {n} tokens")));
    }
    if n == 0 || d == 0 || c == 0 || h_teacher == 0 {
        return Err(Error::domain("teacher dimensions must be positive"));
    }
    let mut g = rng::keyed(seed, rng::stream::TEACHER, 0);
    let mut tokens: Vec<usize> = sample_indices(&mut g, n, h_teacher).into_vec();
    tokens.sort_unstable();
    let heads = tokens
        .into_iter()
        .map(|k| {
            let mut w1 = vec![0.0; n];
            w1[k] = 1.0;
            AltHead { w1, w2: rng::normal_vec(&mut g, d), w3: rng::normal_vec(&mut g, c) }
        })
        .collect();
    let variant = if c == 1 { AltVariant::Scalar } else { AltVariant::Vector };
    Ok(AltAttnParams { variant, c, heads })
}

/// Normalised `||w2_j|| * ||w3_j||_1` mass of every head, spread over `w1_j`.
pub fn teacher_importance(teacher: &AltAttnParams, n: usize) -> AttentionImportance {
    let mut raw = vec![0.0; n];
    for h in &teacher.heads {
        let mass = h.w2.iter().map(|v| v * v).sum::<f64>().sqrt() * h.w3.iter().map(|v| v.abs()).sum::<f64>();
        for (r, a) in raw.iter_mut().zip(&h.w1) {
            *r += a * mass;
        }
    }
    AttentionImportance::from_raw(raw)
}

/// Standard normal inputs labelled by a fixed simplex-attention teacher.
pub fn teacher_dataset(teacher: &AltAttnParams, n: usize, d: usize, n_samples: usize, seed: u64) -> Result<Dataset> {
    let mut g = rng::keyed(seed, rng::stream::INSTANCE, 0);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = TokenMatrix::new(ndarray::Array2::from_shape_vec((n, d), rng::normal_vec(&mut g, n * d)).unwrap())?;
        let y = alt_forward(&x, teacher, None)?;
        let target = if teacher.c == 1 { Target::Scalar(y[0]) } else { Target::Vector(y) };
        samples.push(Sample::new(x, target));
    }
    let mut meta = DatasetMeta::new(n, d, teacher.c);
    meta.seed = Some(seed);
    meta.notes.push(format!("synthetic simplex-attention teacher with {} heads", teacher.heads.len()));
    Dataset::new(meta, samples)
}

/// Noise-free teacher data and its ground-truth token importance.
pub fn gen_synthetic_teacher(
    n: usize,
    d: usize,
    c: usize,
    h_teacher: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(Dataset, AttentionImportance)> {
    let teacher = teacher_params(n, d, c, h_teacher, seed)?;
    let data = teacher_dataset(&teacher, n, d, n_samples, seed)?;
    Ok((data, teacher_importance(&teacher, n)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrokkingMetrics {
    pub iters_to_train_thresh: Option<usize>,
    pub iters_to_test_thresh: Option<usize>,
    /// Test crossing minus train crossing; may be negative.
    pub grokking_gap: Option<i64>,
}

/// First iteration at which each accuracy trace reaches `threshold`.
pub fn grokking_metrics(train: &[(usize, f64)], test: &[(usize, f64)], threshold: f64) -> Result<GrokkingMetrics> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::domain("accuracy traces are empty"));
    }
    if train.len() != test.len() || train.iter().zip(test).any(|(a, b)| a.0 != b.0) {
        return Err(Error::domain("train and test traces are not on the same iteration grid"));
    }
    let first = |t: &[(usize, f64)]| t.iter().find(|(_, a)| *a >= threshold).map(|(i, _)| *i);
    let tr = first(train);
    let te = first(test);
    let gap = match (tr, te) {
        (Some(a), Some(b)) => Some(b as i64 - a as i64),
        _ => None,
    };
    Ok(GrokkingMetrics { iters_to_train_thresh: tr, iters_to_test_thresh: te, grokking_gap: gap })
}
