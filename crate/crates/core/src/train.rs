//! Combined objective, AdamW, the training loop and ranking evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{perm_consistency_loss, random_permutation_with, ConsistencyError, KlDirection, Permutation};
use crate::data::Example;
use crate::model::{sft_loss, slate_ratings, Gradients, ModelDims, ModelError, ModelParams, Ranker};
use crate::parallel::Executor;
use crate::ranking::{ndcg_at_k, soft_lambda_loss, RankingError, SoftArgmax, SoftLambdaParams, TargetRanking};
use crate::tape::{TapeError, Tensor};
use crate::template::{apply_permutation, CandidateSlate, HistorySequence, TemplateError, TieBreak};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("non-finite gradient in parameter group {0}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

impl TrainError {
    /// Errors caused by non-finite numbers rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient(_)
                | TrainError::Ranking(RankingError::NonFinite(_))
                | TrainError::Tape(TapeError::NonFinite(_))
                | TrainError::Consistency(ConsistencyError::NotNormalized { .. } | ConsistencyError::OutOfRange { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Soft-argmax sharpness.
    pub gamma: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_accum_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_sll: bool,
    pub use_psl: bool,
    pub ndcg_cutoffs: Vec<usize>,
    pub m: usize,
    pub history_len: usize,
    pub emb: usize,
    pub position_embeddings: bool,
    pub soft_argmax: SoftArgmax,
    pub kl_direction: KlDirection,
    pub tie_break: TieBreak,
    pub workers: usize,
    /// Shuffles per example when measuring position bias; 0 disables it.
    pub bias_trials: usize,
    /// Validation examples used for the position-bias estimate.
    pub bias_examples: usize,
    /// Record wall-clock decode time in the metrics log (breaks byte-identity).
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 2.0,
            gamma: 2.0,
            sigma: 1.0,
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 10,
            grad_accum_steps: 2,
            weight_decay: 0.01,
            seed: 0,
            use_sll: true,
            use_psl: true,
            ndcg_cutoffs: vec![3, 5, 10, 25],
            m: 25,
            history_len: 20,
            emb: 32,
            position_embeddings: true,
            soft_argmax: SoftArgmax::Smooth,
            kl_direction: KlDirection::Forward,
            tie_break: TieBreak::Title,
            workers: 1,
            bias_trials: 4,
            bias_examples: 100,
            log_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be finite and >= 0");
        }
        if !(self.gamma > 0.0 && self.sigma > 0.0 && self.gamma.is_finite() && self.sigma.is_finite()) {
            return bad("gamma and sigma must be finite and > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch_size and grad_accum_steps must be >= 1");
        }
        if self.ndcg_cutoffs.is_empty() || self.ndcg_cutoffs[0] == 0 || self.ndcg_cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ndcg_cutoffs must be positive and strictly ascending");
        }
        if self.bias_trials == 1 {
            return bad("bias_trials must be 0 or >= 2");
        }
        self.dims().validate()?;
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.m, self.history_len, self.emb, self.position_embeddings)
    }

    pub fn soft_lambda(&self) -> SoftLambdaParams {
        SoftLambdaParams {
            gamma: self.gamma,
            sigma: self.sigma,
            mode: self.soft_argmax,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            cutoffs: self.ndcg_cutoffs.clone(),
            bias_trials: self.bias_trials,
            bias_examples: self.bias_examples,
            seed: self.seed,
        }
    }
}

/// Stable 64-bit seed derived from a tuple of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x5eed_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub rank: f64,
    pub perm: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    fn new(sft: f64, rank: f64, perm: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            sft,
            rank,
            perm,
            total: sft + alpha * rank + beta * perm,
            alpha,
            beta,
        }
    }
}

/// Permutation used for the consistency branch of example `index` in `epoch`.
pub fn example_permutation(seed: u64, epoch: u64, index: u64, m: usize) -> Permutation {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, index]));
    random_permutation_with(m, &mut rng).expect("m >= 1")
}

/// Teacher ranking of the shuffled slate that names the same items in the
/// same order as `target` does for the original slate.
pub fn permuted_target(target: &TargetRanking, p: &Permutation) -> TargetRanking {
    let inv = p.invert();
    TargetRanking::new(target.order().iter().map(|&i| inv.map()[i]).collect()).expect("relabelled permutation")
}

/// Loss terms and parameter gradients for one example with the consistency
/// branch evaluated under `p`.
pub fn combined_loss(params: &ModelParams, ex: &Example, cfg: &TrainConfig, p: &Permutation) -> Result<(LossBreakdown, Gradients), TrainError> {
    let vocab = params.dims.vocab();
    let mut orig = params.forward(&ex.history, &ex.slate, &ex.target)?;
    let sft = sft_loss(&mut orig, &ex.target, &vocab)?;
    let (m, v) = orig.dist.shape();
    let mut logit_seed = Tensor::zeros(m, v);
    let mut rank = 0.0;
    if cfg.use_sll {
        let ratings = slate_ratings(&ex.slate)?;
        let sl = soft_lambda_loss(&orig.dist, &ex.target, ratings, &vocab.label_tokens, cfg.soft_lambda())?;
        rank = sl.loss;
        axpy(&mut logit_seed, cfg.alpha, &sl.grad_logits);
    }
    let mut perm = 0.0;
    let mut perm_grads = None;
    if cfg.use_psl {
        let slate = apply_permutation(p, &ex.slate)?;
        let teacher = permuted_target(&ex.target, p);
        let mut shuffled = params.forward(&ex.history, &slate, &teacher)?;
        let pc = perm_consistency_loss(&orig.dist, &shuffled.dist, p, &vocab, cfg.kl_direction)?;
        perm = pc.loss;
        axpy(&mut logit_seed, cfg.beta, &pc.grad_orig_logits);
        let mut seed = Tensor::zeros(m, v);
        axpy(&mut seed, cfg.beta, &pc.grad_perm_logits);
        shuffled.tape.backward_seeded(&[(shuffled.logits, seed)])?;
        perm_grads = Some(shuffled.param_grads());
    }
    orig.tape.backward_seeded(&[(sft.root, Tensor::scalar(1.0)), (orig.logits, logit_seed)])?;
    let mut grads = orig.param_grads();
    if let Some(g) = perm_grads {
        grads.add_assign(&g);
    }
    Ok((LossBreakdown::new(sft.loss, rank, perm, cfg.alpha, cfg.beta), grads))
}

fn axpy(acc: &mut Tensor, a: f64, x: &Tensor) {
    for (y, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *y += a * v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    /// One update of a flat parameter block; `step` counts from 1.
    pub fn update(&self, step: u64, params: &mut [f64], grads: &[f64], first: &mut [f64], second: &mut [f64]) {
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            first[i] = self.beta1 * first[i] + (1.0 - self.beta1) * g;
            second[i] = self.beta2 * second[i] + (1.0 - self.beta2) * g * g;
            let mh = first[i] / c1;
            let vh = second[i] / c2;
            params[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            first: Gradients::zeros_like(params),
            second: Gradients::zeros_like(params),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Applies one AdamW step. Non-finite gradients leave everything untouched.
pub fn optimizer_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState, opt: &AdamW) -> Result<(), TrainError> {
    let names = params.names();
    if grads.0.len() != params.tensors.len() || state.first.0.len() != params.tensors.len() {
        return Err(TrainError::Config("optimizer state does not match parameters".into()));
    }
    if let Some(i) = grads.0.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFiniteGradient(names[i].to_string()));
    }
    state.step += 1;
    for (i, p) in params.tensors.iter_mut().enumerate() {
        opt.update(
            state.step,
            p.data_mut(),
            grads.0[i].data(),
            state.first.0[i].data_mut(),
            state.second.0[i].data_mut(),
        );
    }
    Ok(())
}

/// Kendall-tau distance between two rankings of the same items, in [0, 1].
pub fn kendall_distance(a: &TargetRanking, b: &TargetRanking) -> f64 {
    let m = a.len();
    if m < 2 {
        return 0.0;
    }
    let (pa, pb) = (a.positions(), b.positions());
    let mut discordant = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            if (pa[i] < pa[j]) != (pb[i] < pb[j]) {
                discordant += 1;
            }
        }
    }
    discordant as f64 / (m * (m - 1) / 2) as f64
}

/// Decodes the slate shuffled by `p` and expresses the result over the
/// original candidate indices.
pub fn rank_under<R: Ranker + ?Sized>(ranker: &R, history: &HistorySequence, slate: &CandidateSlate, p: &Permutation) -> Result<TargetRanking, TrainError> {
    let shuffled = apply_permutation(p, slate)?;
    let decoded = ranker.rank(history, &shuffled)?;
    Ok(TargetRanking::new(decoded.order().iter().map(|&slot| p.map()[slot]).collect())?)
}

fn shuffles(m: usize, count: usize, seed: u64, identity_first: bool) -> Vec<Permutation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            if k == 0 && identity_first {
                Permutation::identity(m)
            } else {
                random_permutation_with(m, &mut rng).expect("m >= 1")
            }
        })
        .collect()
}

/// Averages each item's predicted position over `p` decodes (the first on
/// the original order) and sorts by that average, ties by input order.
pub fn bootstrap_rank<R: Ranker + ?Sized>(ranker: &R, history: &HistorySequence, slate: &CandidateSlate, p: usize, seed: u64) -> Result<TargetRanking, TrainError> {
    if p == 0 {
        return Err(TrainError::Config("bootstrap p must be >= 1".into()));
    }
    let m = slate.len();
    let mut total = vec![0.0; m];
    for perm in shuffles(m, p, seed, true) {
        let ranking = rank_under(ranker, history, slate, &perm)?;
        for (item, pos) in ranking.positions().into_iter().enumerate() {
            total[item] += pos as f64;
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| total[a].total_cmp(&total[b]).then(a.cmp(&b)));
    Ok(TargetRanking::new(order)?)
}

/// Mean pairwise Kendall distance between the item rankings produced under
/// the given input permutations.
pub fn position_bias_under<R: Ranker + ?Sized>(ranker: &R, history: &HistorySequence, slate: &CandidateSlate, perms: &[Permutation]) -> Result<f64, TrainError> {
    if perms.len() < 2 {
        return Err(TrainError::Config("position bias needs at least two permutations".into()));
    }
    let rankings = perms.iter().map(|p| rank_under(ranker, history, slate, p)).collect::<Result<Vec<_>, _>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rankings.len() {
        for j in i + 1..rankings.len() {
            sum += kendall_distance(&rankings[i], &rankings[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

pub fn position_bias<R: Ranker + ?Sized>(ranker: &R, history: &HistorySequence, slate: &CandidateSlate, trials: usize, seed: u64) -> Result<f64, TrainError> {
    position_bias_under(ranker, history, slate, &shuffles(slate.len(), trials, seed, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    pub bias_trials: usize,
    pub bias_examples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        TrainConfig::default().eval_options()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ndcg_at: BTreeMap<usize, f64>,
    pub position_bias: f64,
    pub mean_inference_seconds: f64,
    pub n_examples: usize,
}

/// Mean NDCG of `p`-fold bootstrap decoding (`p = 1` is a single greedy pass).
pub fn evaluate_bootstrap<R: Ranker + ?Sized>(ranker: &R, examples: &[Example], opts: &EvalOptions, p: usize, exec: &Executor) -> Result<EvalReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData("evaluation"));
    }
    let per_example = exec.map(examples, |i, ex| -> Result<(Vec<f64>, f64), TrainError> {
        let start = Instant::now();
        let ranking = if p == 1 {
            ranker.rank(&ex.history, &ex.slate)?
        } else {
            bootstrap_rank(ranker, &ex.history, &ex.slate, p, derive_seed(&[opts.seed, i as u64, 0xb007]))?
        };
        let secs = start.elapsed().as_secs_f64();
        let ratings = slate_ratings(&ex.slate)?;
        let scores = opts.cutoffs.iter().map(|&k| ndcg_at_k(&ranking, ratings, k)).collect::<Result<Vec<_>, _>>()?;
        Ok((scores, secs))
    });
    let mut sums = vec![0.0; opts.cutoffs.len()];
    let mut seconds = 0.0;
    for r in per_example {
        let (scores, secs) = r?;
        sums.iter_mut().zip(&scores).for_each(|(s, v)| *s += v);
        seconds += secs;
    }
    let n = examples.len() as f64;
    let bias_set = &examples[..opts.bias_examples.min(examples.len())];
    let position_bias = if opts.bias_trials >= 2 && !bias_set.is_empty() {
        let biases = exec.map(bias_set, |i, ex| position_bias(ranker, &ex.history, &ex.slate, opts.bias_trials, derive_seed(&[opts.seed, i as u64, 0xb1a5])));
        let mut s = 0.0;
        for b in biases {
            s += b?;
        }
        s / bias_set.len() as f64
    } else {
        0.0
    };
    Ok(EvalReport {
        ndcg_at: opts.cutoffs.iter().copied().zip(sums.into_iter().map(|s| s / n)).collect(),
        position_bias,
        mean_inference_seconds: seconds / n,
        n_examples: examples.len(),
    })
}

pub fn evaluate<R: Ranker + ?Sized>(ranker: &R, examples: &[Example], opts: &EvalOptions, exec: &Executor) -> Result<EvalReport, TrainError> {
    evaluate_bootstrap(ranker, examples, opts, 1, exec)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub ndcg: BTreeMap<String, f64>,
    pub sft: Option<f64>,
    pub rank: Option<f64>,
    pub perm: Option<f64>,
    pub total: Option<f64>,
    pub position_bias: Option<f64>,
    pub tpd_seconds: Option<f64>,
}

impl MetricsRecord {
    fn from_eval(run_id: &str, epoch: usize, split: &str, report: &EvalReport, timing: bool) -> Self {
        MetricsRecord {
            run_id: run_id.to_string(),
            epoch,
            split: split.to_string(),
            ndcg: report.ndcg_at.iter().map(|(k, v)| (format!("ndcg@{k}"), *v)).collect(),
            sft: None,
            rank: None,
            perm: None,
            total: None,
            position_bias: Some(report.position_bias),
            tpd_seconds: timing.then_some(report.mean_inference_seconds),
        }
    }

    fn from_losses(run_id: &str, epoch: usize, loss: &LossBreakdown) -> Self {
        MetricsRecord {
            run_id: run_id.to_string(),
            epoch,
            split: "train".into(),
            ndcg: BTreeMap::new(),
            sft: Some(loss.sft),
            rank: Some(loss.rank),
            perm: Some(loss.perm),
            total: Some(loss.total),
            position_bias: None,
            tpd_seconds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (epoch 0 is the initialization).
    pub best: ModelParams,
    pub last: ModelParams,
    pub best_epoch: usize,
    pub best_score: f64,
    pub records: Vec<MetricsRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub divergence: Option<Divergence>,
}

/// Gradient sum of one micro-batch, averaged over its examples.
fn batch_gradient(params: &ModelParams, batch: &[(usize, &Example)], cfg: &TrainConfig, epoch: usize, exec: &Executor) -> Result<(Gradients, Vec<LossBreakdown>), TrainError> {
    let results = exec.map(batch, |_, (idx, ex)| {
        let p = example_permutation(cfg.seed, epoch as u64, *idx as u64, cfg.m);
        combined_loss(params, ex, cfg, &p)
    });
    let mut grads = Gradients::zeros_like(params);
    let mut losses = Vec::with_capacity(batch.len());
    for r in results {
        let (loss, g) = r?;
        grads.add_assign(&g);
        losses.push(loss);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((grads, losses))
}

pub fn train(
    cfg: &TrainConfig,
    run_id: &str,
    init: ModelParams,
    train_set: &[Example],
    valid_set: &[Example],
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    if init.dims != cfg.dims() {
        return Err(TrainError::Config("initial parameters do not match configured dims".into()));
    }
    let exec = Executor::new(cfg.workers);
    let opt = cfg.optimizer();
    let eval_opts = cfg.eval_options();
    let select_k = *cfg.ndcg_cutoffs.last().expect("validated");
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| {
        sink(&r);
        records.push(r);
    };

    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let report = evaluate(&params, valid_set, &eval_opts, &exec)?;
    let mut best_score = report.ndcg_at[&select_k];
    let mut best = params.clone();
    let mut best_epoch = 0;
    emit(MetricsRecord::from_eval(run_id, 0, "valid", &report, cfg.log_timing), &mut records);

    let mut divergence = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, 0x5a1e])));
        let mut sum = LossBreakdown::new(0.0, 0.0, 0.0, cfg.alpha, cfg.beta);
        let mut seen = 0usize;
        let mut accum = Gradients::zeros_like(&params);
        let mut pending = 0usize;
        let batches: Vec<Vec<(usize, &Example)>> = order.chunks(cfg.batch_size).map(|c| c.iter().map(|&i| (i, &train_set[i])).collect()).collect();
        for (b, batch) in batches.iter().enumerate() {
            let (grads, losses) = match batch_gradient(&params, batch, cfg, epoch, &exec) {
                Ok(r) => r,
                Err(e) if e.is_numeric() => {
                    divergence = Some(Divergence {
                        epoch,
                        step: state.steps(),
                        reason: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            for l in &losses {
                sum.sft += l.sft;
                sum.rank += l.rank;
                sum.perm += l.perm;
                sum.total += l.total;
            }
            seen += losses.len();
            if losses.iter().any(|l| !l.total.is_finite()) {
                divergence = Some(Divergence {
                    epoch,
                    step: state.steps(),
                    reason: "non-finite loss".into(),
                });
                break 'epochs;
            }
            accum.add_assign(&grads);
            pending += 1;
            if pending == cfg.grad_accum_steps || b + 1 == batches.len() {
                accum.scale(1.0 / pending as f64);
                if let Err(e) = optimizer_step(&mut params, &accum, &mut state, &opt) {
                    divergence = Some(Divergence {
                        epoch,
                        step: state.steps(),
                        reason: e.to_string(),
                    });
                    break 'epochs;
                }
                if !params.all_finite() {
                    divergence = Some(Divergence {
                        epoch,
                        step: state.steps(),
                        reason: "non-finite parameters".into(),
                    });
                    break 'epochs;
                }
                accum = Gradients::zeros_like(&params);
                pending = 0;
            }
        }
        let n = seen as f64;
        let mean = LossBreakdown {
            sft: sum.sft / n,
            rank: sum.rank / n,
            perm: sum.perm / n,
            total: sum.total / n,
            ..sum
        };
        emit(MetricsRecord::from_losses(run_id, epoch, &mean), &mut records);
        let report = evaluate(&params, valid_set, &eval_opts, &exec)?;
        let score = report.ndcg_at[&select_k];
        emit(MetricsRecord::from_eval(run_id, epoch, "valid", &report, cfg.log_timing), &mut records);
        if score > best_score {
            best_score = score;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch,
        best_score,
        records,
        divergence,
    })
}
