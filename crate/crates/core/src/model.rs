//! Autoregressive pointer-attention ranker.
//!
//! Candidates are encoded from hashed item features plus a per-candidate
//! summary of the rated history (attention with candidate queries over
//! rating-gated history items). Decoder step `t` combines a step embedding,
//! the previous label (begin at `t = 0`) and the encoding of the previously
//! chosen candidate, attends over the candidates and scores every label by
//! pointing at its candidate encoding. A learned coverage weight is added to
//! labels already emitted, and three special-token logits come from a
//! separate projection.
//!
//! Candidate-position embeddings and label-letter embeddings are the only
//! channels through which input order reaches the output; with
//! `position_embeddings = false` the model is exactly permutation-equivariant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{DistributionMatrix, Vocabulary};
use crate::ranking::{Rating, TargetRanking};
use crate::tape::{Axis, NodeId, Tape, TapeError, Tensor};
use crate::template::{label_vocab, target_ranking, CandidateSlate, HistorySequence, Item, TieBreak, MAX_LABELS};

pub const FEATURE_BINS: usize = 64;

/// Logit gap below which greedy decoding treats two labels as tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid dims: {0}")]
    Dims(String),
    #[error("{what} has size {got}, model expects {expected}")]
    Size {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("slate has no ratings")]
    MissingRatings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Slate size.
    pub m: usize,
    pub history_len: usize,
    pub emb: usize,
    pub features: usize,
    pub position_embeddings: bool,
}

impl ModelDims {
    pub fn new(m: usize, history_len: usize, emb: usize, position_embeddings: bool) -> Self {
        ModelDims {
            m,
            history_len,
            emb,
            features: FEATURE_BINS,
            position_embeddings,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.m + 3
    }

    pub fn vocab(&self) -> Vocabulary {
        label_vocab(self.m).expect("validated dims")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.m == 0 || self.m > MAX_LABELS {
            return Err(ModelError::Dims(format!("m = {} outside 1..=26", self.m)));
        }
        if self.emb == 0 || self.features == 0 {
            return Err(ModelError::Dims("emb and features must be positive".into()));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, usize, usize)> {
        let (e, f, m, v) = (self.emb, self.features, self.m, self.vocab_size());
        let mut out = vec![
            ("item_w", f, e),
            ("item_b", 1, e),
            ("rating_emb", 5, e),
            ("attn_query", e, e),
            ("attn_key", e, e),
            ("attn_value", e, e),
            ("cand_w", e, e),
            ("cand_ctx", e, e),
            ("cand_b", 1, e),
            ("dec_pos", m, e),
            ("label_emb", v, e),
            ("prev_w", e, e),
            ("dec_hidden", 2 * e, e),
            ("dec_b", 1, e),
            ("out_query", e, e),
            ("out_special", e, 3),
            ("out_special_b", 1, 3),
            ("coverage", 1, 1),
        ];
        if self.position_embeddings {
            out.push(("cand_pos", m, e));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum P {
    ItemW,
    ItemB,
    RatingEmb,
    AttnQuery,
    AttnKey,
    AttnValue,
    CandW,
    CandCtx,
    CandB,
    DecPos,
    LabelEmb,
    PrevW,
    DecHidden,
    DecB,
    OutQuery,
    OutSpecial,
    OutSpecialB,
    Coverage,
    CandPos,
}

/// Flat parameter store following [`ModelDims::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tensors: Vec<Tensor>,
}

/// Gradient buffers with the same layout as [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

impl ModelParams {
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = dims
            .layout()
            .into_iter()
            .map(|(name, rows, cols)| {
                let mut t = Tensor::zeros(rows, cols);
                if !name.ends_with("_b") && name != "coverage" {
                    // embedding tables are scaled by their width, matrices by fan-in
                    let fan_in = if matches!(name, "rating_emb" | "dec_pos" | "label_emb" | "cand_pos") {
                        cols
                    } else {
                        rows
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                t
            })
            .collect();
        Ok(ModelParams { dims, tensors })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self, ModelError> {
        dims.validate()?;
        let tensors = dims.layout().into_iter().map(|(_, r, c)| Tensor::zeros(r, c)).collect();
        Ok(ModelParams { dims, tensors })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.dims.layout().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (_, r, c) in dims.layout() {
            if offset + r * c > flat.len() {
                return Err(ModelError::Size {
                    what: "flat parameters",
                    got: flat.len(),
                    expected: offset + r * c,
                });
            }
            tensors.push(Tensor::from_vec(r, c, flat[offset..offset + r * c].to_vec())?);
            offset += r * c;
        }
        if offset != flat.len() {
            return Err(ModelError::Size {
                what: "flat parameters",
                got: flat.len(),
                expected: offset,
            });
        }
        Ok(ModelParams { dims, tensors })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    fn index(&self, p: P) -> usize {
        // CandPos is appended last when enabled
        match p {
            P::CandPos => 18,
            other => other as usize,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag of lowercase title words and genre tags, L2-normalized.
pub fn item_features(item: &Item, bins: usize) -> Vec<f64> {
    let mut v = vec![0.0; bins];
    let title = item.title.to_lowercase();
    for word in title.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        v[(fnv1a(word.as_bytes()) % bins as u64) as usize] = 1.0;
    }
    for attr in &item.attributes {
        let tag = format!("genre:{}", attr.trim().to_lowercase());
        v[(fnv1a(tag.as_bytes()) % bins as u64) as usize] = 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn feature_matrix<'a>(items: impl Iterator<Item = &'a Item>, bins: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = items.map(|i| item_features(i, bins)).collect();
    let n = rows.len();
    Tensor::from_vec(n, bins, rows.concat()).expect("feature rows have equal width")
}

/// Parameters loaded onto a tape for one forward pass.
struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    fn get(&self, params: &ModelParams, p: P) -> NodeId {
        self.nodes[params.index(p)]
    }
}

/// Teacher-forced output with the tape that produced it.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub tape: Tape,
    pub logits: NodeId,
    pub dist: DistributionMatrix,
    param_nodes: Vec<NodeId>,
}

impl ForwardResult {
    pub fn logits_value(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Parameter gradients accumulated on the tape so far.
    pub fn param_grads(&self) -> Gradients {
        Gradients(self.param_nodes.iter().map(|&n| self.tape.grad(n).clone()).collect())
    }
}

struct Encoded {
    bound: Bound,
    /// Candidate encodings, `m x E`.
    cands: NodeId,
    /// Candidate encodings with a trailing zero row used as "no previous item".
    cands_ext: NodeId,
    /// Transposed candidate encodings, `E x m`.
    cands_t: NodeId,
}

impl ModelParams {
    fn check_inputs(&self, history: &HistorySequence, slate: &CandidateSlate) -> Result<(), ModelError> {
        if slate.len() != self.dims.m {
            return Err(ModelError::Size {
                what: "slate",
                got: slate.len(),
                expected: self.dims.m,
            });
        }
        if history.len() != self.dims.history_len {
            return Err(ModelError::Size {
                what: "history",
                got: history.len(),
                expected: self.dims.history_len,
            });
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, history: &HistorySequence, slate: &CandidateSlate) -> Result<Encoded, ModelError> {
        let d = self.dims;
        let nodes = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let bound = Bound { nodes };
        let g = |p| bound.get(self, p);
        let inv_sqrt = 1.0 / (d.emb as f64).sqrt();

        let feat_c = tape.leaf(feature_matrix(slate.items.iter(), d.features));
        let lin_c = tape.matmul(feat_c, g(P::ItemW))?;
        let lin_c = tape.add(lin_c, g(P::ItemB))?;
        let item_c = tape.tanh(lin_c);

        let mut pre = tape.matmul(item_c, g(P::CandW))?;
        if !history.is_empty() {
            let feat_h = tape.leaf(feature_matrix(history.entries.iter().map(|(i, _)| i), d.features));
            let lin_h = tape.matmul(feat_h, g(P::ItemW))?;
            let lin_h = tape.add(lin_h, g(P::ItemB))?;
            let item_h = tape.tanh(lin_h);
            let rating_rows: Vec<usize> = history.entries.iter().map(|(_, r)| r.value() as usize - 1).collect();
            let rating_e = tape.embedding_gather(g(P::RatingEmb), &rating_rows)?;
            let hist = tape.mul(item_h, rating_e)?;
            let keys = tape.matmul(item_h, g(P::AttnKey))?;
            let values = tape.matmul(hist, g(P::AttnValue))?;
            let queries = tape.matmul(item_c, g(P::AttnQuery))?;
            let keys_t = tape.transpose(keys);
            let scores = tape.matmul(queries, keys_t)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.row_softmax(scores);
            let ctx = tape.matmul(attn, values)?;
            let ctx = tape.mul(item_c, ctx)?;
            let ctx = tape.matmul(ctx, g(P::CandCtx))?;
            pre = tape.add(pre, ctx)?;
        }
        pre = tape.add(pre, g(P::CandB))?;
        if d.position_embeddings {
            pre = tape.add(pre, g(P::CandPos))?;
        }
        let cands = tape.tanh(pre);
        let zero = tape.leaf(Tensor::zeros(1, d.emb));
        let cands_ext = tape.concat(&[cands, zero], Axis::Rows)?;
        let cands_t = tape.transpose(cands);
        Ok(Encoded {
            bound,
            cands,
            cands_ext,
            cands_t,
        })
    }

    /// Logits for decoder steps `steps`, where `prev[k]` is the candidate
    /// chosen before step `steps[k]` (`None` at the first step) and row `k`
    /// of `used` flags every candidate chosen before it.
    fn decode_rows(&self, tape: &mut Tape, enc: &Encoded, steps: &[usize], prev: &[Option<usize>], used: Tensor) -> Result<NodeId, ModelError> {
        let d = self.dims;
        let vocab = d.vocab();
        let g = |p| enc.bound.get(self, p);
        let inv_sqrt = 1.0 / (d.emb as f64).sqrt();

        let step_e = tape.embedding_gather(g(P::DecPos), steps)?;
        let tokens: Vec<usize> = prev
            .iter()
            .map(|p| match p {
                None => vocab.begin,
                Some(slot) if d.position_embeddings => vocab.label_tokens[*slot],
                Some(_) => vocab.pad,
            })
            .collect();
        let token_e = tape.embedding_gather(g(P::LabelEmb), &tokens)?;
        let prev_rows: Vec<usize> = prev.iter().map(|p| p.unwrap_or(d.m)).collect();
        let prev_c = tape.embedding_gather(enc.cands_ext, &prev_rows)?;
        let prev_c = tape.matmul(prev_c, g(P::PrevW))?;
        let h0 = tape.add(step_e, token_e)?;
        let h0 = tape.add(h0, prev_c)?;
        let h0 = tape.tanh(h0);

        let att = tape.matmul(h0, enc.cands_t)?;
        let att = tape.scale(att, inv_sqrt);
        let att = tape.row_softmax(att);
        let ctx = tape.matmul(att, enc.cands)?;
        let joined = tape.concat(&[h0, ctx], Axis::Cols)?;
        let hidden = tape.matmul(joined, g(P::DecHidden))?;
        let hidden = tape.add(hidden, g(P::DecB))?;
        let hidden = tape.tanh(hidden);

        let query = tape.matmul(hidden, g(P::OutQuery))?;
        let label_logits = tape.matmul(query, enc.cands_t)?;
        let ones_r = tape.leaf(Tensor::filled(steps.len(), 1, 1.0));
        let ones_m = tape.leaf(Tensor::filled(1, d.m, 1.0));
        let cov = tape.matmul(ones_r, g(P::Coverage))?;
        let cov = tape.matmul(cov, ones_m)?;
        let used = tape.leaf(used);
        let cov = tape.mul(cov, used)?;
        let label_logits = tape.add(label_logits, cov)?;
        let special = tape.matmul(hidden, g(P::OutSpecial))?;
        let special = tape.add(special, g(P::OutSpecialB))?;
        Ok(tape.concat(&[label_logits, special], Axis::Cols)?)
    }

    /// Teacher-forced distributions for every output position.
    pub fn forward(&self, history: &HistorySequence, slate: &CandidateSlate, teacher: &TargetRanking) -> Result<ForwardResult, ModelError> {
        self.check_inputs(history, slate)?;
        if teacher.len() != self.dims.m {
            return Err(ModelError::Size {
                what: "teacher ranking",
                got: teacher.len(),
                expected: self.dims.m,
            });
        }
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, history, slate)?;
        let steps: Vec<usize> = (0..self.dims.m).collect();
        let prev: Vec<Option<usize>> = steps.iter().map(|&t| if t == 0 { None } else { Some(teacher.order()[t - 1]) }).collect();
        let mut used = Tensor::zeros(self.dims.m, self.dims.m);
        for t in 1..self.dims.m {
            for &slot in &teacher.order()[..t] {
                used.set(t, slot, 1.0);
            }
        }
        let logits = self.decode_rows(&mut tape, &enc, &steps, &prev, used)?;
        let dist = DistributionMatrix::from_logits(tape.value(logits));
        Ok(ForwardResult {
            tape,
            logits,
            dist,
            param_nodes: enc.bound.nodes,
        })
    }

    /// Autoregressive decode; emitted labels are masked out of later steps so
    /// the result is always a permutation.
    pub fn greedy_decode(&self, history: &HistorySequence, slate: &CandidateSlate) -> Result<TargetRanking, ModelError> {
        self.check_inputs(history, slate)?;
        let m = self.dims.m;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, history, slate)?;
        // scanning in item-id order makes (near-)ties independent of input order
        let mut by_id: Vec<usize> = (0..m).collect();
        by_id.sort_by_key(|&s| slate.items[s].item_id);
        let mut used = vec![false; m];
        let mut order = Vec::with_capacity(m);
        let mut prev = None;
        for t in 0..m {
            let flags = Tensor::row_vector(used.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect());
            let logits = self.decode_rows(&mut tape, &enc, &[t], &[prev], flags)?;
            let row = tape.value(logits).row(0);
            let mut best: Option<usize> = None;
            for &slot in &by_id {
                if !used[slot] && best.is_none_or(|b| row[slot] > row[b] + TIE_TOL) {
                    best = Some(slot);
                }
            }
            let slot = best.expect("an unused label remains");
            used[slot] = true;
            order.push(slot);
            prev = Some(slot);
        }
        Ok(TargetRanking::new(order).expect("masked decode yields a permutation"))
    }
}

/// Result of the supervised next-token loss, with its tape root.
#[derive(Debug, Clone, Copy)]
pub struct SftLoss {
    pub loss: f64,
    pub root: NodeId,
}

/// `-sum_t ln p_t(target_t)` over the label positions, recorded on the tape.
pub fn sft_loss(result: &mut ForwardResult, target: &TargetRanking, vocab: &Vocabulary) -> Result<SftLoss, ModelError> {
    let rows = result.tape.shape(result.logits).0;
    if target.len() != rows {
        return Err(ModelError::Size {
            what: "target",
            got: target.len(),
            expected: rows,
        });
    }
    let tokens: Vec<usize> = target.order().iter().map(|&s| vocab.label_tokens[s]).collect();
    let tape = &mut result.tape;
    let picked = tape.pick(result.logits, &tokens)?;
    let lse = tape.log_sum_exp(result.logits);
    let neg = tape.scale(picked, -1.0);
    let nll = tape.add(lse, neg)?;
    let root = tape.sum(nll);
    Ok(SftLoss {
        loss: tape.value(root).item(),
        root,
    })
}

/// Anything that maps a prompt to a ranking.
pub trait Ranker: Sync {
    fn rank(&self, history: &HistorySequence, slate: &CandidateSlate) -> Result<TargetRanking, ModelError>;
}

impl Ranker for ModelParams {
    fn rank(&self, history: &HistorySequence, slate: &CandidateSlate) -> Result<TargetRanking, ModelError> {
        self.greedy_decode(history, slate)
    }
}

/// Reads the ground-truth ratings; an upper bound for evaluation fixtures.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleRanker {
    pub tie_break: TieBreak,
}

impl Ranker for OracleRanker {
    fn rank(&self, _history: &HistorySequence, slate: &CandidateSlate) -> Result<TargetRanking, ModelError> {
        target_ranking(slate, self.tie_break).map_err(|_| ModelError::MissingRatings)
    }
}

/// Returns candidates in input order regardless of content.
#[derive(Debug, Clone, Copy, Default)]
pub struct InputOrderRanker;

impl Ranker for InputOrderRanker {
    fn rank(&self, _history: &HistorySequence, slate: &CandidateSlate) -> Result<TargetRanking, ModelError> {
        Ok(TargetRanking::identity(slate.len()))
    }
}

/// Ratings of the slate, or an error when absent.
pub fn slate_ratings(slate: &CandidateSlate) -> Result<&[Rating], ModelError> {
    slate.ratings.as_deref().ok_or(ModelError::MissingRatings)
}
