//! NDCG, LambdaLoss pair weights, soft-argmax ranking scores and the soft
//! lambda loss, with analytical gradients.
//!
//! Conventions: gain `2^r - 1`, discount `log2(pos + 1)` for 1-based `pos`.
//! Lambda-loss gains are normalized by the ideal DCG of the whole slate.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::DistributionMatrix;
use crate::tape::{softmax_backward, Tensor};

/// Probability floor applied before the soft-argmax exponential.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankingError {
    #[error("rating {0} outside 1..=5")]
    InvalidRating(i64),
    #[error("discount is undefined at position 0")]
    ZeroPosition,
    #[error("pair delta is singular for equal positions ({0})")]
    SingularPair(usize),
    #[error("empty slate")]
    EmptySlate,
    #[error("need at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("cutoff k must be >= 1")]
    BadCutoff,
    #[error("sigma must be > 0, got {0}")]
    BadSigma(f64),
    #[error("gamma must be > 0, got {0}")]
    BadGamma(f64),
    #[error("not a permutation of 0..{0}")]
    InvalidRanking(usize),
    #[error("label tokens must be distinct and inside the vocabulary")]
    BadLabelTokens,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

/// Explicit-feedback rating in `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Rating(u8);

impl Rating {
    pub fn new(value: i64) -> Result<Self, RankingError> {
        if (1..=5).contains(&value) {
            Ok(Rating(value as u8))
        } else {
            Err(RankingError::InvalidRating(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Rating {
    type Error = RankingError;
    fn try_from(v: i64) -> Result<Self, Self::Error> {
        Rating::new(v)
    }
}

impl From<Rating> for i64 {
    fn from(r: Rating) -> i64 {
        r.0 as i64
    }
}

/// A ranking of `m` candidates: `order()[p]` is the candidate index placed at
/// position `p` (0 = most preferred).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TargetRanking(Vec<usize>);

impl TargetRanking {
    pub fn new(order: Vec<usize>) -> Result<Self, RankingError> {
        let m = order.len();
        let mut seen = vec![false; m];
        for &i in &order {
            if i >= m || seen[i] {
                return Err(RankingError::InvalidRanking(m));
            }
            seen[i] = true;
        }
        Ok(TargetRanking(order))
    }

    pub fn identity(m: usize) -> Self {
        TargetRanking((0..m).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse map: `positions()[item]` is the 0-based position of `item`.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.0.len()];
        for (p, &i) in self.0.iter().enumerate() {
            pos[i] = p;
        }
        pos
    }
}

impl TryFrom<Vec<usize>> for TargetRanking {
    type Error = RankingError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        TargetRanking::new(v)
    }
}

impl From<TargetRanking> for Vec<usize> {
    fn from(t: TargetRanking) -> Vec<usize> {
        t.0
    }
}

pub fn gain(r: Rating) -> f64 {
    (1u32 << r.value()) as f64 - 1.0
}

pub fn discount(pos: usize) -> Result<f64, RankingError> {
    if pos == 0 {
        return Err(RankingError::ZeroPosition);
    }
    Ok(((pos + 1) as f64).log2())
}

fn discount_unchecked(pos: usize) -> f64 {
    ((pos + 1) as f64).log2()
}

/// Per-slate gain and discount tables shared by the metric and the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GainDiscountTables {
    /// Raw gains `2^r - 1`, in candidate order.
    pub gains: Vec<f64>,
    /// `discounts[p]` is the discount of 1-based position `p + 1`.
    pub discounts: Vec<f64>,
    pub ideal_dcg: f64,
}

impl GainDiscountTables {
    pub fn new(ratings: &[Rating]) -> Result<Self, RankingError> {
        if ratings.is_empty() {
            return Err(RankingError::EmptySlate);
        }
        let gains: Vec<f64> = ratings.iter().map(|&r| gain(r)).collect();
        let discounts: Vec<f64> = (1..=ratings.len()).map(discount_unchecked).collect();
        let ideal_dcg = ideal_dcg(&gains, &discounts, ratings.len());
        Ok(GainDiscountTables {
            gains,
            discounts,
            ideal_dcg,
        })
    }

    /// Gains divided by the full-slate ideal DCG.
    pub fn normalized_gains(&self) -> Vec<f64> {
        self.gains.iter().map(|g| g / self.ideal_dcg).collect()
    }
}

fn ideal_dcg(gains: &[f64], discounts: &[f64], cutoff: usize) -> f64 {
    let mut sorted = gains.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().zip(discounts).take(cutoff).map(|(g, d)| g / d).sum()
}

pub fn ndcg_at_k(predicted: &TargetRanking, ratings: &[Rating], k: usize) -> Result<f64, RankingError> {
    if ratings.is_empty() {
        return Err(RankingError::EmptySlate);
    }
    if k == 0 {
        return Err(RankingError::BadCutoff);
    }
    if predicted.len() != ratings.len() {
        return Err(RankingError::LengthMismatch {
            what: "predicted ranking",
            got: predicted.len(),
            expected: ratings.len(),
        });
    }
    let tables = GainDiscountTables::new(ratings)?;
    let cutoff = k.min(ratings.len());
    let dcg: f64 = predicted
        .order()
        .iter()
        .zip(&tables.discounts)
        .take(cutoff)
        .map(|(&i, d)| tables.gains[i] / d)
        .sum();
    let idcg = ideal_dcg(&tables.gains, &tables.discounts, cutoff);
    Ok(dcg / idcg)
}

/// `|1/D(|i-j|) - 1/D(|i-j|+1)|` for 1-based positions.
pub fn pair_delta(pos_i: usize, pos_j: usize) -> Result<f64, RankingError> {
    if pos_i == pos_j {
        return Err(RankingError::SingularPair(pos_i));
    }
    let gap = pos_i.abs_diff(pos_j);
    Ok((1.0 / discount_unchecked(gap) - 1.0 / discount_unchecked(gap + 1)).abs())
}

/// Loss value with gradient with respect to the ranking scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 1-based positions of each candidate under the ranking induced by `scores`
/// (higher score first, ties by index).
pub fn score_positions(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pos = vec![0; scores.len()];
    for (p, &i) in idx.iter().enumerate() {
        pos[i] = p + 1;
    }
    pos
}

/// Pairwise LambdaLoss over strict-preference pairs.
///
/// Pair weights `delta * |G_i - G_j|` use positions from the current score
/// order and are held constant in the gradient.
pub fn lambda_loss(scores: &[f64], ratings: &[Rating], sigma: f64) -> Result<ScoreLoss, RankingError> {
    let m = scores.len();
    if m < 2 {
        return Err(RankingError::TooFewItems(m));
    }
    if ratings.len() != m {
        return Err(RankingError::LengthMismatch {
            what: "ratings",
            got: ratings.len(),
            expected: m,
        });
    }
    if !(sigma > 0.0) {
        return Err(RankingError::BadSigma(sigma));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(RankingError::NonFinite(i));
    }
    let tables = GainDiscountTables::new(ratings)?;
    let g = tables.normalized_gains();
    let pos = score_positions(scores);
    let mut loss = 0.0;
    let mut grad = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            if ratings[i] <= ratings[j] {
                continue;
            }
            let weight = pair_delta(pos[i], pos[j])? * (g[i] - g[j]).abs();
            let margin = sigma * (scores[i] - scores[j]);
            loss += weight * softplus(-margin) / LN_2;
            let slope = weight * sigma * sigmoid(-margin) / LN_2;
            grad[i] -= slope;
            grad[j] += slope;
        }
    }
    Ok(ScoreLoss { loss, grad })
}

/// How the per-token position score is extracted from the distribution rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftArgmax {
    /// Token-normalized softmax per row, log-sum-exp maximum over rows with
    /// temperature `1/gamma`. Differentiable everywhere.
    #[default]
    Smooth,
    /// Token-normalized softmax per row, exact maximum over rows.
    Hard,
    /// Softmax over rows for each token, then the expected 1-based position.
    ExpectedPosition,
}

impl std::str::FromStr for SoftArgmax {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smooth" => Ok(SoftArgmax::Smooth),
            "hard" => Ok(SoftArgmax::Hard),
            "expected_position" => Ok(SoftArgmax::ExpectedPosition),
            other => Err(format!("unknown soft-argmax mode '{other}'")),
        }
    }
}

/// Soft positions with the partial derivatives needed for backpropagation.
struct SoftPositionTrace {
    /// `s_i`, one per label token.
    positions: Vec<f64>,
    /// `d s_i / d P[j][k]` flattened as `[i][j][k]` (m x m x V).
    jacobian: Vec<f64>,
}

fn check_soft_inputs(dist: &DistributionMatrix, label_tokens: &[usize], gamma: f64) -> Result<(), RankingError> {
    if !(gamma > 0.0) {
        return Err(RankingError::BadGamma(gamma));
    }
    let (rows, vocab) = dist.shape();
    if label_tokens.len() != rows {
        return Err(RankingError::LengthMismatch {
            what: "label tokens",
            got: label_tokens.len(),
            expected: rows,
        });
    }
    let mut seen = vec![false; vocab];
    for &t in label_tokens {
        if t >= vocab || seen[t] {
            return Err(RankingError::BadLabelTokens);
        }
        seen[t] = true;
    }
    Ok(())
}

fn soft_position_trace(dist: &DistributionMatrix, label_tokens: &[usize], gamma: f64, mode: SoftArgmax) -> SoftPositionTrace {
    let probs = dist.probs();
    let (m, vocab) = probs.shape();
    let clamped: Vec<f64> = probs.data().iter().map(|p| p.clamp(PROB_FLOOR, 1.0)).collect();
    let passes: Vec<f64> = probs
        .data()
        .iter()
        .map(|&p| if (PROB_FLOOR..=1.0).contains(&p) { 1.0 } else { 0.0 })
        .collect();
    let mut positions = vec![0.0; label_tokens.len()];
    let mut jacobian = vec![0.0; label_tokens.len() * m * vocab];
    match mode {
        SoftArgmax::Smooth | SoftArgmax::Hard => {
            // q[j][k] = softmax_k(gamma * P[j][k])
            let mut q = vec![0.0; m * vocab];
            for j in 0..m {
                let row = &mut q[j * vocab..(j + 1) * vocab];
                for k in 0..vocab {
                    row[k] = gamma * clamped[j * vocab + k];
                }
                crate::tape::softmax_in_place(row);
            }
            for (i, &tok) in label_tokens.iter().enumerate() {
                // a[j] = q[j][tok] * (j + 1)
                let a: Vec<f64> = (0..m).map(|j| q[j * vocab + tok] * (j + 1) as f64).collect();
                let weights: Vec<f64> = if mode == SoftArgmax::Smooth {
                    let scaled: Vec<f64> = a.iter().map(|v| gamma * v).collect();
                    positions[i] = crate::tape::log_sum_exp(&scaled) / gamma;
                    let mut w = scaled;
                    crate::tape::softmax_in_place(&mut w);
                    w
                } else {
                    let mut best = 0;
                    for j in 1..m {
                        if a[j] > a[best] {
                            best = j;
                        }
                    }
                    positions[i] = a[best];
                    let mut w = vec![0.0; m];
                    w[best] = 1.0;
                    w
                };
                let block = &mut jacobian[i * m * vocab..(i + 1) * m * vocab];
                for j in 0..m {
                    if weights[j] == 0.0 {
                        continue;
                    }
                    let qt = q[j * vocab + tok];
                    let coef = weights[j] * (j + 1) as f64 * gamma * qt;
                    for k in 0..vocab {
                        let indicator = if k == tok { 1.0 } else { 0.0 };
                        block[j * vocab + k] = coef * (indicator - q[j * vocab + k]) * passes[j * vocab + k];
                    }
                }
            }
        }
        SoftArgmax::ExpectedPosition => {
            for (i, &tok) in label_tokens.iter().enumerate() {
                let mut pi: Vec<f64> = (0..m).map(|j| gamma * clamped[j * vocab + tok]).collect();
                crate::tape::softmax_in_place(&mut pi);
                let s: f64 = pi.iter().enumerate().map(|(j, w)| w * (j + 1) as f64).sum();
                positions[i] = s;
                let block = &mut jacobian[i * m * vocab..(i + 1) * m * vocab];
                for j in 0..m {
                    block[j * vocab + tok] = gamma * pi[j] * ((j + 1) as f64 - s) * passes[j * vocab + tok];
                }
            }
        }
    }
    SoftPositionTrace { positions, jacobian }
}

/// Soft 1-based position `s_i` of each label token (smaller = earlier).
/// Ranking scores are `u_i = -s_i`.
pub fn soft_positions(
    dist: &DistributionMatrix,
    label_tokens: &[usize],
    gamma: f64,
    mode: SoftArgmax,
) -> Result<Vec<f64>, RankingError> {
    check_soft_inputs(dist, label_tokens, gamma)?;
    Ok(soft_position_trace(dist, label_tokens, gamma, mode).positions)
}

/// Loss with gradients with respect to the probabilities and to the logits
/// that produced them through a row softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionLoss {
    pub loss: f64,
    pub grad_probs: Tensor,
    pub grad_logits: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLambdaParams {
    pub gamma: f64,
    pub sigma: f64,
    pub mode: SoftArgmax,
}

impl Default for SoftLambdaParams {
    fn default() -> Self {
        SoftLambdaParams {
            gamma: 2.0,
            sigma: 1.0,
            mode: SoftArgmax::Smooth,
        }
    }
}

/// Lambda loss on soft-argmax scores extracted from the distribution rows.
///
/// `ratings[i]` belongs to the candidate emitted as `label_tokens[i]`.
/// `target` only fixes the slate size; pairs come from strict rating order.
pub fn soft_lambda_loss(
    dist: &DistributionMatrix,
    target: &TargetRanking,
    ratings: &[Rating],
    label_tokens: &[usize],
    params: SoftLambdaParams,
) -> Result<DistributionLoss, RankingError> {
    check_soft_inputs(dist, label_tokens, params.gamma)?;
    let (m, vocab) = dist.shape();
    if target.len() != m {
        return Err(RankingError::LengthMismatch {
            what: "target ranking",
            got: target.len(),
            expected: m,
        });
    }
    let trace = soft_position_trace(dist, label_tokens, params.gamma, params.mode);
    let scores: Vec<f64> = trace.positions.iter().map(|s| -s).collect();
    let inner = lambda_loss(&scores, ratings, params.sigma)?;
    let mut grad_probs = Tensor::zeros(m, vocab);
    for (i, du) in inner.grad.iter().enumerate() {
        if *du == 0.0 {
            continue;
        }
        // u = -s
        let ds = -du;
        let block = &trace.jacobian[i * m * vocab..(i + 1) * m * vocab];
        for (g, b) in grad_probs.data_mut().iter_mut().zip(block) {
            *g += ds * b;
        }
    }
    let grad_logits = softmax_backward(dist.probs(), &grad_probs);
    Ok(DistributionLoss {
        loss: inner.loss,
        grad_probs,
        grad_logits,
    })
}
