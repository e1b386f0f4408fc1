//! Candidate permutations, label-token remapping of output distributions and
//! the KL permutation-consistency loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{softmax_backward, Tensor};

/// Clamp applied to both KL operands.
pub const KL_EPS: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error("permutation size must be >= 1")]
    EmptyPermutation,
    #[error("not a bijection on 0..{0}")]
    NotBijection(usize),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("label token {0} missing from vocabulary of size {1}")]
    MissingLabel(usize, usize),
    #[error("eps must be > 0")]
    BadEps,
}

/// Row-stochastic matrix: one probability distribution over the vocabulary
/// per output position.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMatrix {
    probs: Tensor,
}

impl DistributionMatrix {
    pub fn new(probs: Tensor) -> Result<Self, ConsistencyError> {
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if let Some(c) = row.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(ConsistencyError::OutOfRange {
                    row: r,
                    col: c,
                    value: row[c],
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ConsistencyError::NotNormalized { row: r, sum });
            }
        }
        Ok(DistributionMatrix { probs })
    }

    pub fn from_logits(logits: &Tensor) -> Self {
        DistributionMatrix {
            probs: logits.row_softmax(),
        }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn shape(&self) -> (usize, usize) {
        self.probs.shape()
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }
}

/// Bijection on `0..m`; `map()[new_position] = old_position`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self, ConsistencyError> {
        let m = map.len();
        if m == 0 {
            return Err(ConsistencyError::EmptyPermutation);
        }
        let mut seen = vec![false; m];
        for &i in &map {
            if i >= m || seen[i] {
                return Err(ConsistencyError::NotBijection(m));
            }
            seen[i] = true;
        }
        Ok(Permutation(map))
    }

    pub fn identity(m: usize) -> Self {
        Permutation((0..m).collect())
    }

    pub fn swap(m: usize, a: usize, b: usize) -> Self {
        let mut map: Vec<usize> = (0..m).collect();
        map.swap(a, b);
        Permutation(map)
    }

    pub fn map(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn invert(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (new, &old) in self.0.iter().enumerate() {
            inv[old] = new;
        }
        Permutation(inv)
    }

    /// Permutation equivalent to applying `self` and then `then`.
    pub fn compose(&self, then: &Permutation) -> Permutation {
        Permutation(then.0.iter().map(|&t| self.0[t]).collect())
    }

    /// `out[t] = items[map[t]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>, ConsistencyError> {
        if items.len() != self.0.len() {
            return Err(ConsistencyError::LengthMismatch {
                what: "items",
                got: items.len(),
                expected: self.0.len(),
            });
        }
        Ok(self.0.iter().map(|&i| items[i].clone()).collect())
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = ConsistencyError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Vec<usize> {
        p.0
    }
}

/// Uniform draw from the symmetric group, deterministic per seed.
pub fn random_permutation(m: usize, seed: u64) -> Result<Permutation, ConsistencyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_permutation_with(m, &mut rng)
}

pub fn random_permutation_with<R: rand::Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Permutation, ConsistencyError> {
    if m == 0 {
        return Err(ConsistencyError::EmptyPermutation);
    }
    let mut map: Vec<usize> = (0..m).collect();
    map.shuffle(rng);
    Ok(Permutation(map))
}

/// Token layout of the label-emitting vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// `label_tokens[slot]` is the token id emitted for candidate slot `slot`.
    pub label_tokens: Vec<usize>,
    pub pad: usize,
    pub begin: usize,
    pub end: usize,
    pub size: usize,
}

impl Vocabulary {
    pub fn num_labels(&self) -> usize {
        self.label_tokens.len()
    }

    pub fn special_tokens(&self) -> [usize; 3] {
        [self.pad, self.begin, self.end]
    }

    /// Candidate slot for a token, if it is a label token.
    pub fn slot_of(&self, token: usize) -> Option<usize> {
        self.label_tokens.iter().position(|&t| t == token)
    }

    /// Column permutation realized by remapping through `p`:
    /// destination column `c` reads source column `source[c]`.
    fn remap_sources(&self, p: &Permutation) -> Result<Vec<usize>, ConsistencyError> {
        let m = self.label_tokens.len();
        if p.len() != m {
            return Err(ConsistencyError::LengthMismatch {
                what: "permutation",
                got: p.len(),
                expected: m,
            });
        }
        if let Some(&t) = self.label_tokens.iter().find(|&&t| t >= self.size) {
            return Err(ConsistencyError::MissingLabel(t, self.size));
        }
        let inv = p.invert();
        let mut source: Vec<usize> = (0..self.size).collect();
        for (slot, &tok) in self.label_tokens.iter().enumerate() {
            source[tok] = self.label_tokens[inv.map()[slot]];
        }
        Ok(source)
    }
}

/// Move label-token mass so that slot `a` reads the source's slot `p^-1(a)`.
/// Non-label columns are untouched.
pub fn remap_distribution(
    dist: &DistributionMatrix,
    p: &Permutation,
    vocab: &Vocabulary,
) -> Result<DistributionMatrix, ConsistencyError> {
    let (rows, cols) = dist.shape();
    if cols != vocab.size {
        return Err(ConsistencyError::LengthMismatch {
            what: "distribution columns",
            got: cols,
            expected: vocab.size,
        });
    }
    let source = vocab.remap_sources(p)?;
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let src = dist.probs().row(r);
        for (dst, &s) in out.row_mut(r).iter_mut().zip(&source) {
            *dst = src[s];
        }
    }
    Ok(DistributionMatrix { probs: out })
}

pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64, ConsistencyError> {
    if p.len() != q.len() {
        return Err(ConsistencyError::LengthMismatch {
            what: "q",
            got: q.len(),
            expected: p.len(),
        });
    }
    if !(eps > 0.0) {
        return Err(ConsistencyError::BadEps);
    }
    Ok(p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(eps), b.max(eps));
            a * (a / b).ln()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(original || permuted)`.
    #[default]
    Forward,
    /// Mean of both directions.
    Symmetric,
}

impl std::str::FromStr for KlDirection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(KlDirection::Forward),
            "symmetric" => Ok(KlDirection::Symmetric),
            other => Err(format!("unknown KL direction '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub loss: f64,
    pub grad_orig_probs: Tensor,
    pub grad_perm_probs: Tensor,
    pub grad_orig_logits: Tensor,
    pub grad_perm_logits: Tensor,
}

/// Sum over rows of the KL divergence between the original distribution and
/// the permuted-prompt distribution mapped back to original label slots.
///
/// Row `t` of both matrices must describe the same ranked item (teacher
/// forcing with the permuted target).
pub fn perm_consistency_loss(
    dist_orig: &DistributionMatrix,
    dist_perm: &DistributionMatrix,
    p: &Permutation,
    vocab: &Vocabulary,
    direction: KlDirection,
) -> Result<ConsistencyLoss, ConsistencyError> {
    let (rows, cols) = dist_orig.shape();
    if dist_perm.shape() != (rows, cols) {
        return Err(ConsistencyError::LengthMismatch {
            what: "permuted distribution rows",
            got: dist_perm.rows(),
            expected: rows,
        });
    }
    let remapped = remap_distribution(dist_perm, p, vocab)?;
    let source = vocab.remap_sources(p)?;
    let mut loss = 0.0;
    let mut grad_orig = Tensor::zeros(rows, cols);
    let mut grad_remapped = Tensor::zeros(rows, cols);
    for t in 0..rows {
        let prow = dist_orig.probs().row(t);
        let qrow = remapped.probs().row(t);
        for k in 0..cols {
            let (praw, qraw) = (prow[k], qrow[k]);
            let (pc, qc) = (praw.max(KL_EPS), qraw.max(KL_EPS));
            let p_live = if praw >= KL_EPS { 1.0 } else { 0.0 };
            let q_live = if qraw >= KL_EPS { 1.0 } else { 0.0 };
            let log_ratio = (pc / qc).ln();
            let (term, gp, gq) = match direction {
                KlDirection::Forward => (pc * log_ratio, log_ratio + 1.0, -pc / qc),
                KlDirection::Symmetric => (
                    0.5 * (pc * log_ratio - qc * log_ratio),
                    0.5 * (log_ratio + 1.0 - qc / pc),
                    0.5 * (-log_ratio + 1.0 - pc / qc),
                ),
            };
            loss += term;
            grad_orig.set(t, k, gp * p_live);
            grad_remapped.set(t, k, gq * q_live);
        }
    }
    // remapped[c] = perm[source[c]], so the gradient flows back along the same map.
    let mut grad_perm = Tensor::zeros(rows, cols);
    for t in 0..rows {
        for (c, &s) in source.iter().enumerate() {
            let v = grad_remapped.get(t, c);
            grad_perm.set(t, s, grad_perm.get(t, s) + v);
        }
    }
    let grad_orig_logits = softmax_backward(dist_orig.probs(), &grad_orig);
    let grad_perm_logits = softmax_backward(dist_perm.probs(), &grad_perm);
    Ok(ConsistencyLoss {
        loss,
        grad_orig_probs: grad_orig,
        grad_perm_probs: grad_perm,
        grad_orig_logits,
        grad_perm_logits,
    })
}
