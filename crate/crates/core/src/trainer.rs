//! Dual-encoder training: losses, analytic gradients, Adam, and the
//! training loop.
//!
//! A batch of B questions is scored against B positives plus H shared hard
//! negatives, giving a `B x (B+H)` similarity matrix whose diagonal holds
//! each question's positive. The negative log-likelihood objective for row
//! `i` is
//!
//! ```text
//! L_i = -ln( exp(s_ii) / sum_j exp(s_ij) )
//! ```
//!
//! computed with max-subtraction and averaged over rows. The triplet
//! alternative applies `max(0, margin - (s_pos - s_neg))` to every
//! (positive, negative) pair and averages. Gradients are exact and flow
//! through the similarity, the projection, and the embedding mean; they are
//! validated against central finite differences in the tests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{passage_text_for_encoding, PassageCollection, TrainingInstance};
use crate::encoder::{DualEncoder, EncoderParams, SimilarityKind, Vocabulary};
use crate::error::{Error, Result};
use crate::mat::{dot, norm, Matrix};
use crate::miner::{find_duplicate_positives, NegativeSupply};
use crate::sparse::tokenize;
use crate::Scalar;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy over the positive against all negatives.
    Nll,
    /// Hinge on the positive/negative score gap.
    Triplet,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Nll => "nll",
            LossKind::Triplet => "triplet",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(LossKind::Nll),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss kind {other:?} (expected nll or triplet)"
            ))),
        }
    }
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: T,
    pub warmup_steps: usize,
    pub similarity: SimilarityKind,
    pub loss: LossKind,
    pub triplet_margin: T,
    pub hard_negatives_per_question: usize,
    pub seed: u64,
    pub adam_beta1: T,
    pub adam_beta2: T,
    pub adam_eps: T,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 40,
            learning_rate: T::from_f64_lossy(1e-5),
            warmup_steps: 0,
            similarity: SimilarityKind::Dot,
            loss: LossKind::Nll,
            triplet_margin: T::one(),
            hard_negatives_per_question: 1,
            seed: 42,
            adam_beta1: T::from_f64_lossy(0.9),
            adam_beta2: T::from_f64_lossy(0.999),
            adam_eps: T::from_f64_lossy(1e-8),
        }
    }
}

/// Token sequences for one batch: B questions, then B positives followed by
/// H shared hard-negative passage sequences.
#[derive(Debug, Clone)]
pub struct BatchTokens {
    pub questions: Vec<Vec<String>>,
    pub positives: Vec<Vec<String>>,
    pub hard_negatives: Vec<Vec<String>>,
}

impl BatchTokens {
    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn num_passages(&self) -> usize {
        self.positives.len() + self.hard_negatives.len()
    }
}

/// NLL of the positive under a softmax over `scores`, computed with
/// max-subtraction for stability.
pub fn nll_loss<T: Scalar>(scores: &[T], positive: usize) -> T {
    assert!(positive < scores.len(), "positive index out of range");
    let max = scores
        .iter()
        .fold(T::neg_infinity(), |m, &s| if s > m { s } else { m });
    let sum_exp = scores
        .iter()
        .fold(T::zero(), |acc, &s| acc + (s - max).exp());
    sum_exp.ln() + max - scores[positive]
}

/// Hinge loss on one (positive, negative) score pair.
pub fn triplet_loss<T: Scalar>(s_pos: T, s_neg: T, margin: T) -> T {
    let gap = margin - (s_pos - s_neg);
    if gap > T::zero() {
        gap
    } else {
        T::zero()
    }
}

/// Mean NLL over batch rows; the positive for row `i` sits on the diagonal.
pub fn batch_loss<T: Scalar>(scores: &Matrix<T>) -> Result<T> {
    let b = scores.rows();
    if b == 0 {
        return Err(Error::Empty("similarity batch"));
    }
    if scores.cols() < b {
        return Err(Error::InvalidArgument(format!(
            "similarity matrix is {b}x{} but needs at least {b} columns for the diagonal positives",
            scores.cols()
        )));
    }
    let mut total = T::zero();
    for i in 0..b {
        total += nll_loss(scores.row(i), i);
    }
    Ok(total / T::from_f64_lossy(b as f64))
}

/// Mean triplet loss over every (positive, negative) pair in the batch. A
/// 1x1 matrix has no negatives and scores 0.
pub fn batch_triplet_loss<T: Scalar>(scores: &Matrix<T>, margin: T) -> Result<T> {
    let b = scores.rows();
    if b == 0 {
        return Err(Error::Empty("similarity batch"));
    }
    if scores.cols() < b {
        return Err(Error::InvalidArgument(
            "similarity matrix needs the diagonal positives".into(),
        ));
    }
    let pairs = b * (scores.cols() - 1);
    if pairs == 0 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for i in 0..b {
        let s_pos = scores.get(i, i);
        for j in 0..scores.cols() {
            if j != i {
                total += triplet_loss(s_pos, scores.get(i, j), margin);
            }
        }
    }
    Ok(total / T::from_f64_lossy(pairs as f64))
}

/// Batch loss under the configured objective.
pub fn objective_loss<T: Scalar>(scores: &Matrix<T>, config: &TrainConfig<T>) -> Result<T> {
    match config.loss {
        LossKind::Nll => batch_loss(scores),
        LossKind::Triplet => batch_triplet_loss(scores, config.triplet_margin),
    }
}

/// Per-sequence forward state kept for the backward pass.
struct TowerCache<T> {
    /// Sorted token ids per sequence.
    ids: Vec<Vec<u32>>,
    /// Mean embedding per sequence.
    means: Vec<Vec<T>>,
    /// Encoder output per sequence.
    outputs: Vec<Vec<T>>,
}

fn forward_tower<T: Scalar>(
    params: &EncoderParams<T>,
    vocab: &Vocabulary,
    seqs: &[Vec<String>],
) -> TowerCache<T> {
    let dim = params.dim();
    let mut cache = TowerCache {
        ids: Vec::with_capacity(seqs.len()),
        means: Vec::with_capacity(seqs.len()),
        outputs: Vec::with_capacity(seqs.len()),
    };
    for tokens in seqs {
        let mut ids = vocab.token_ids(tokens);
        ids.sort_unstable();
        let mut mean = vec![T::zero(); dim];
        for &id in &ids {
            for (m, &e) in mean.iter_mut().zip(params.embedding.row(id as usize)) {
                *m += e;
            }
        }
        let inv = T::one() / T::from_f64_lossy(ids.len() as f64);
        for m in &mut mean {
            *m *= inv;
        }
        let mut out = params.projection.matvec(&mean);
        for (o, &b) in out.iter_mut().zip(&params.bias) {
            *o += b;
        }
        cache.ids.push(ids);
        cache.means.push(mean);
        cache.outputs.push(out);
    }
    cache
}

/// Scores every question against every passage column.
///
/// Row `i`, column `j < B` is question `i` against positive `j`; columns
/// `>= B` are the shared hard negatives.
pub fn similarity_batch<T: Scalar>(
    enc: &DualEncoder<T>,
    batch: &BatchTokens,
    kind: SimilarityKind,
) -> Result<Matrix<T>> {
    if batch.questions.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if batch.positives.len() != batch.questions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} questions but {} positives",
            batch.questions.len(),
            batch.positives.len()
        )));
    }
    let qs = forward_tower(&enc.question, &enc.vocab, &batch.questions);
    let mut passages = batch.positives.clone();
    passages.extend(batch.hard_negatives.iter().cloned());
    let ps = forward_tower(&enc.passage, &enc.vocab, &passages);

    let mut scores = Matrix::zeros(qs.outputs.len(), ps.outputs.len());
    for i in 0..qs.outputs.len() {
        for j in 0..ps.outputs.len() {
            scores.set(
                i,
                j,
                crate::encoder::similarity(&qs.outputs[i], &ps.outputs[j], kind)?,
            );
        }
    }
    Ok(scores)
}

/// Gradient accumulator shaped like one tower's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients<T> {
    pub embedding: Matrix<T>,
    pub projection: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> EncoderGradients<T> {
    fn zeros_like(params: &EncoderParams<T>) -> Self {
        EncoderGradients {
            embedding: Matrix::zeros(params.embedding.rows(), params.embedding.cols()),
            projection: Matrix::zeros(params.projection.rows(), params.projection.cols()),
            bias: vec![T::zero(); params.bias.len()],
        }
    }

    fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.projection.is_finite()
            && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Gradients for both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGradients<T> {
    pub question: EncoderGradients<T>,
    pub passage: EncoderGradients<T>,
}

impl<T: Scalar> DualGradients<T> {
    pub fn zeros_like(enc: &DualEncoder<T>) -> Self {
        DualGradients {
            question: EncoderGradients::zeros_like(&enc.question),
            passage: EncoderGradients::zeros_like(&enc.passage),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.question.is_finite() && self.passage.is_finite()
    }
}

/// d(similarity)/d(query vector) and d(similarity)/d(passage vector) for one
/// scored pair. Degenerate cosine/L2 points (zero norms, equal vectors) use
/// the zero subgradient, matching the constant value the similarity takes
/// there.
fn similarity_partials<T: Scalar>(
    vq: &[T],
    vp: &[T],
    kind: SimilarityKind,
) -> (Vec<T>, Vec<T>) {
    match kind {
        SimilarityKind::Dot => (vp.to_vec(), vq.to_vec()),
        SimilarityKind::Cosine => {
            let nq = norm(vq);
            let np = norm(vp);
            if nq == T::zero() || np == T::zero() {
                return (vec![T::zero(); vq.len()], vec![T::zero(); vp.len()]);
            }
            let d = dot(vq, vp);
            let s = d / (nq * np);
            let dq: Vec<T> = vq
                .iter()
                .zip(vp)
                .map(|(&q, &p)| p / (nq * np) - s * q / (nq * nq))
                .collect();
            let dp: Vec<T> = vq
                .iter()
                .zip(vp)
                .map(|(&q, &p)| q / (nq * np) - s * p / (np * np))
                .collect();
            (dq, dp)
        }
        SimilarityKind::NegL2 => {
            let mut sq = T::zero();
            for (&q, &p) in vq.iter().zip(vp) {
                let d = q - p;
                sq += d * d;
            }
            let dist = sq.sqrt();
            if dist == T::zero() {
                return (vec![T::zero(); vq.len()], vec![T::zero(); vp.len()]);
            }
            let dq: Vec<T> = vq.iter().zip(vp).map(|(&q, &p)| -(q - p) / dist).collect();
            let dp: Vec<T> = vq.iter().zip(vp).map(|(&q, &p)| (q - p) / dist).collect();
            (dq, dp)
        }
    }
}

/// Pushes a gradient on one tower output back onto that tower's parameters.
fn tower_backward<T: Scalar>(
    params: &EncoderParams<T>,
    grads: &mut EncoderGradients<T>,
    ids: &[u32],
    mean: &[T],
    g_out: &[T],
) {
    grads.projection.add_outer(g_out, mean);
    for (b, &g) in grads.bias.iter_mut().zip(g_out) {
        *b += g;
    }
    let g_mean = params.projection.matvec_t(g_out);
    let inv = T::one() / T::from_f64_lossy(ids.len() as f64);
    for &id in ids {
        for (e, &g) in grads
            .embedding
            .row_mut(id as usize)
            .iter_mut()
            .zip(&g_mean)
        {
            *e += g * inv;
        }
    }
}

/// Backpropagates an upstream `dL/dS` matrix through the similarity and both
/// towers.
fn backprop<T: Scalar>(
    enc: &DualEncoder<T>,
    qs: &TowerCache<T>,
    ps: &TowerCache<T>,
    kind: SimilarityKind,
    upstream: &Matrix<T>,
) -> DualGradients<T> {
    let dim = enc.dim();
    let mut grads = DualGradients::zeros_like(enc);

    let mut g_q = vec![vec![T::zero(); dim]; qs.outputs.len()];
    let mut g_p = vec![vec![T::zero(); dim]; ps.outputs.len()];
    for i in 0..qs.outputs.len() {
        for j in 0..ps.outputs.len() {
            let u = upstream.get(i, j);
            if u == T::zero() {
                continue;
            }
            let (dq, dp) = similarity_partials(&qs.outputs[i], &ps.outputs[j], kind);
            for (acc, d) in g_q[i].iter_mut().zip(dq) {
                *acc += u * d;
            }
            for (acc, d) in g_p[j].iter_mut().zip(dp) {
                *acc += u * d;
            }
        }
    }

    for i in 0..qs.outputs.len() {
        tower_backward(
            &enc.question,
            &mut grads.question,
            &qs.ids[i],
            &qs.means[i],
            &g_q[i],
        );
    }
    for j in 0..ps.outputs.len() {
        tower_backward(
            &enc.passage,
            &mut grads.passage,
            &ps.ids[j],
            &ps.means[j],
            &g_p[j],
        );
    }
    grads
}

/// `dL/dS` for the configured objective.
fn upstream_matrix<T: Scalar>(scores: &Matrix<T>, config: &TrainConfig<T>) -> Matrix<T> {
    let b = scores.rows();
    let cols = scores.cols();
    let mut up = Matrix::zeros(b, cols);
    match config.loss {
        LossKind::Nll => {
            let inv_b = T::one() / T::from_f64_lossy(b as f64);
            for i in 0..b {
                let row = scores.row(i);
                let max = row
                    .iter()
                    .fold(T::neg_infinity(), |m, &s| if s > m { s } else { m });
                let sum_exp = row
                    .iter()
                    .fold(T::zero(), |acc, &s| acc + (s - max).exp());
                for j in 0..cols {
                    let softmax = (row[j] - max).exp() / sum_exp;
                    let indicator = if i == j { T::one() } else { T::zero() };
                    up.set(i, j, (softmax - indicator) * inv_b);
                }
            }
        }
        LossKind::Triplet => {
            let pairs = b * (cols - 1);
            if pairs == 0 {
                return up;
            }
            let w = T::one() / T::from_f64_lossy(pairs as f64);
            for i in 0..b {
                let s_pos = scores.get(i, i);
                for j in 0..cols {
                    if j == i {
                        continue;
                    }
                    if config.triplet_margin - (s_pos - scores.get(i, j)) > T::zero() {
                        up.set(i, j, up.get(i, j) + w);
                        up.set(i, i, up.get(i, i) - w);
                    }
                }
            }
        }
    }
    up
}

/// Loss and exact parameter gradients for one batch.
pub fn loss_gradients<T: Scalar>(
    enc: &DualEncoder<T>,
    batch: &BatchTokens,
    config: &TrainConfig<T>,
) -> Result<(T, DualGradients<T>)> {
    if batch.questions.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if batch.positives.len() != batch.questions.len() {
        return Err(Error::InvalidArgument(
            "each question needs exactly one positive".into(),
        ));
    }
    let qs = forward_tower(&enc.question, &enc.vocab, &batch.questions);
    let mut passages = batch.positives.clone();
    passages.extend(batch.hard_negatives.iter().cloned());
    let ps = forward_tower(&enc.passage, &enc.vocab, &passages);

    let mut scores = Matrix::zeros(qs.outputs.len(), ps.outputs.len());
    for i in 0..qs.outputs.len() {
        for j in 0..ps.outputs.len() {
            scores.set(
                i,
                j,
                crate::encoder::similarity(&qs.outputs[i], &ps.outputs[j], config.similarity)?,
            );
        }
    }
    let loss = objective_loss(&scores, config)?;
    let upstream = upstream_matrix(&scores, config);
    let grads = backprop(enc, &qs, &ps, config.similarity, &upstream);
    Ok((loss, grads))
}

/// Adam first/second moments for both towers.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: DualGradients<T>,
    v: DualGradients<T>,
    step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(enc: &DualEncoder<T>) -> Self {
        AdamState {
            m: DualGradients::zeros_like(enc),
            v: DualGradients::zeros_like(enc),
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

fn adam_update_slice<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: T,
    bc1: T,
    bc2: T,
    config: &TrainConfig<T>,
) {
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = config.adam_beta1 * m[i] + (one - config.adam_beta1) * g;
        v[i] = config.adam_beta2 * v[i] + (one - config.adam_beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
}

/// One Adam step at the given learning rate. Rejects non-finite gradients
/// before touching any parameter; with `lr == 0` the parameters are
/// bit-for-bit unchanged (moments still advance).
pub fn optimizer_step<T: Scalar>(
    enc: &mut DualEncoder<T>,
    grads: &DualGradients<T>,
    state: &mut AdamState<T>,
    lr: T,
    config: &TrainConfig<T>,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient {
            step: state.step + 1,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - config.adam_beta1.powi(t);
    let bc2 = T::one() - config.adam_beta2.powi(t);

    for (params, grad, m, v) in [
        (
            &mut enc.question.embedding,
            &grads.question.embedding,
            &mut state.m.question.embedding,
            &mut state.v.question.embedding,
        ),
        (
            &mut enc.question.projection,
            &grads.question.projection,
            &mut state.m.question.projection,
            &mut state.v.question.projection,
        ),
        (
            &mut enc.passage.embedding,
            &grads.passage.embedding,
            &mut state.m.passage.embedding,
            &mut state.v.passage.embedding,
        ),
        (
            &mut enc.passage.projection,
            &grads.passage.projection,
            &mut state.m.passage.projection,
            &mut state.v.passage.projection,
        ),
    ] {
        adam_update_slice(
            params.as_mut_slice(),
            grad.as_slice(),
            m.as_mut_slice(),
            v.as_mut_slice(),
            lr,
            bc1,
            bc2,
            config,
        );
    }
    adam_update_slice(
        &mut enc.question.bias,
        &grads.question.bias,
        &mut state.m.question.bias,
        &mut state.v.question.bias,
        lr,
        bc1,
        bc2,
        config,
    );
    adam_update_slice(
        &mut enc.passage.bias,
        &grads.passage.bias,
        &mut state.m.passage.bias,
        &mut state.v.passage.bias,
        lr,
        bc1,
        bc2,
        config,
    );
    Ok(())
}

/// Learning rate at 1-based `step` of `total` steps: linear ramp over the
/// first `warmup` steps (hitting the base rate exactly at `step == warmup`),
/// then linear decay to zero at `step == total`.
pub fn lr_at<T: Scalar>(step: usize, total: usize, base: T, warmup: usize) -> T {
    if total == 0 || step == 0 {
        return T::zero();
    }
    if warmup > 0 && step <= warmup {
        return base * T::from_f64_lossy(step as f64) / T::from_f64_lossy(warmup as f64);
    }
    if total <= warmup {
        return base;
    }
    let remaining = (total - step) as f64;
    let span = (total - warmup) as f64;
    base * T::from_f64_lossy(remaining.max(0.0) / span)
}

/// Positive- and negative-side gradient norms of a single-pair loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeNorms<T> {
    pub positive: T,
    pub negative: T,
}

/// Gradient norms of the one-positive/one-negative NLL restricted to each
/// score's contribution.
///
/// For the pair loss `l = -ln(exp(s+) / (exp(s+) + exp(s-)))` both scores
/// share the factor `p- = sigma(s- - s+)`; the reported norms are
/// `p- * ||grad_theta s+||` and `p- * ||grad_theta s-||` over all parameters
/// the respective score touches. A negative identical to the positive yields
/// equal norms; a negative scored far below the positive drives both toward
/// zero.
pub fn probe_norms<T: Scalar>(
    enc: &DualEncoder<T>,
    question: &[String],
    positive: &[String],
    negative: &[String],
    kind: SimilarityKind,
) -> Result<ProbeNorms<T>> {
    let qs = forward_tower(&enc.question, &enc.vocab, std::slice::from_ref(&question.to_vec()));
    let ps = forward_tower(
        &enc.passage,
        &enc.vocab,
        &[positive.to_vec(), negative.to_vec()],
    );
    let vq = &qs.outputs[0];
    let s_pos = crate::encoder::similarity(vq, &ps.outputs[0], kind)?;
    let s_neg = crate::encoder::similarity(vq, &ps.outputs[1], kind)?;
    // sigma(s- - s+), the shared magnitude of dl/ds+ and dl/ds-
    let p_neg = T::one() / (T::one() + (s_pos - s_neg).exp());

    let norm_for = |col: usize| -> T {
        let (dq, dp) = similarity_partials(vq, &ps.outputs[col], kind);
        let mut total = score_grad_sq_norm(&enc.question, &qs.ids[0], &qs.means[0], &dq);
        total += score_grad_sq_norm(&enc.passage, &ps.ids[col], &ps.means[col], &dp);
        total.sqrt()
    };
    Ok(ProbeNorms {
        positive: p_neg * norm_for(0),
        negative: p_neg * norm_for(1),
    })
}

/// Negative-side probe norm; see [`probe_norms`].
pub fn gradient_norm_probe<T: Scalar>(
    enc: &DualEncoder<T>,
    question: &[String],
    positive: &[String],
    negative: &[String],
    kind: SimilarityKind,
) -> Result<T> {
    Ok(probe_norms(enc, question, positive, negative, kind)?.negative)
}

/// Squared norm of one score's gradient w.r.t. one tower's parameters,
/// computed without materializing the embedding-table gradient.
fn score_grad_sq_norm<T: Scalar>(
    params: &EncoderParams<T>,
    ids: &[u32],
    mean: &[T],
    g_out: &[T],
) -> T {
    let g_sq = dot(g_out, g_out);
    let mean_sq = dot(mean, mean);
    // projection: outer(g_out, mean); bias: g_out
    let mut total = g_sq * mean_sq + g_sq;
    // embedding: each token row gets (count / n) * P^T g_out
    let g_mean = params.projection.matvec_t(g_out);
    let gm_sq = dot(&g_mean, &g_mean);
    let n = T::from_f64_lossy(ids.len() as f64);
    let mut i = 0;
    while i < ids.len() {
        let mut count = 1usize;
        while i + count < ids.len() && ids[i + count] == ids[i] {
            count += 1;
        }
        let c = T::from_f64_lossy(count as f64);
        total += gm_sq * (c / n) * (c / n);
        i += count;
    }
    total
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm_pos: f64,
    pub grad_norm_neg_mean: f64,
    pub neg_source: String,
}

/// Appends metrics as JSON lines.
pub fn write_metrics_jsonl(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let loc = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&loc, e))?;
    let mut w = BufWriter::new(file);
    for m in metrics {
        let line = serde_json::to_string(m)?;
        writeln!(w, "{line}").map_err(|e| Error::io(&loc, e))?;
    }
    w.flush().map_err(|e| Error::io(&loc, e))
}

/// Reads a metrics log written by [`write_metrics_jsonl`].
pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<StepMetrics>> {
    let loc = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&loc, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::format("metrics jsonl", format!("{loc}:{}", lineno + 1), e.to_string())
        })?);
    }
    Ok(out)
}

/// Trains the dual encoder in place.
///
/// Instances are shuffled every epoch with a seeded RNG; batches are
/// consecutive chunks (the final one may be short). Hard negatives come from
/// `supply`, up to `hard_negatives_per_question` per question, and are
/// shared across the batch. The observer runs after every optimizer step
/// with the 1-based step index, for checkpointing or snapshots.
///
/// With a fixed seed, config, and supplier the run is bitwise reproducible.
pub fn train<T: Scalar, S: NegativeSupply<T>>(
    enc: &mut DualEncoder<T>,
    collection: &PassageCollection,
    instances: &[TrainingInstance],
    config: &TrainConfig<T>,
    supply: &mut S,
    mut observer: impl FnMut(usize, &DualEncoder<T>),
) -> Result<Vec<StepMetrics>> {
    if instances.is_empty() {
        return Err(Error::Empty("training instances"));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    for inst in instances {
        if collection.get(&inst.positive).is_none() {
            return Err(Error::UnknownPassageId(inst.positive.clone()));
        }
    }

    let batches_per_epoch = instances.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut metrics = Vec::with_capacity(total_steps);
    let mut state = AdamState::new(enc);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch_instances: Vec<&TrainingInstance> =
                chunk.iter().map(|&i| &instances[i]).collect();

            let positive_ids: Vec<&str> =
                batch_instances.iter().map(|inst| inst.positive.as_str()).collect();
            for dup in find_duplicate_positives(&positive_ids) {
                log::warn!(
                    "step {step}: positive passage {dup:?} appears more than once in the batch; \
                     in-batch labels are ambiguous"
                );
            }

            // Mine hard negatives per question; all become shared columns.
            let mut mined_per_question: Vec<Vec<String>> = Vec::with_capacity(chunk.len());
            for inst in &batch_instances {
                let ids = supply.mine(step, inst, config.hard_negatives_per_question, enc)?;
                for id in &ids {
                    if collection.get(id).is_none() {
                        return Err(Error::UnknownPassageId(id.clone()));
                    }
                    if *id == inst.positive {
                        return Err(Error::InvalidArgument(format!(
                            "miner returned the positive passage {id:?} as a negative"
                        )));
                    }
                }
                mined_per_question.push(ids);
            }

            let batch = BatchTokens {
                questions: batch_instances
                    .iter()
                    .map(|inst| tokenize(&inst.question.text))
                    .collect(),
                positives: batch_instances
                    .iter()
                    .map(|inst| {
                        passage_text_for_encoding(collection.get(&inst.positive).unwrap())
                    })
                    .collect(),
                hard_negatives: mined_per_question
                    .iter()
                    .flatten()
                    .map(|id| passage_text_for_encoding(collection.get(id).unwrap()))
                    .collect(),
            };

            let (loss, grads) = loss_gradients(enc, &batch, config)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient { step });
            }

            // Probe gradient norms on each question's own mined negatives;
            // questions with none (gold-in-batch) probe their hardest
            // in-batch negative instead.
            let scores = similarity_batch(enc, &batch, config.similarity)?;
            let mut pos_norms = Vec::new();
            let mut neg_norms = Vec::new();
            for (qi, inst) in batch_instances.iter().enumerate() {
                let mut probe_passages: Vec<&Vec<String>> = Vec::new();
                if !mined_per_question[qi].is_empty() {
                    let mut offset = 0usize;
                    for (other, mined) in mined_per_question.iter().enumerate() {
                        if other == qi {
                            for h in 0..mined.len() {
                                probe_passages.push(&batch.hard_negatives[offset + h]);
                            }
                        }
                        offset += mined.len();
                    }
                } else if batch.positives.len() > 1 {
                    let row = scores.row(qi);
                    let hardest = (0..batch.positives.len())
                        .filter(|&j| j != qi)
                        .max_by(|&a, &b| {
                            row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal)
                        })
                        .unwrap();
                    probe_passages.push(&batch.positives[hardest]);
                }
                let question_tokens = tokenize(&inst.question.text);
                for neg in probe_passages {
                    let probe = probe_norms(
                        enc,
                        &question_tokens,
                        &batch.positives[qi],
                        neg,
                        config.similarity,
                    )?;
                    pos_norms.push(probe.positive.to_f64_lossy());
                    neg_norms.push(probe.negative.to_f64_lossy());
                }
            }
            let mean = |xs: &[f64]| {
                if xs.is_empty() {
                    0.0
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };

            let lr = lr_at(step, total_steps, config.learning_rate, config.warmup_steps);
            optimizer_step(enc, &grads, &mut state, lr, config)?;
            supply.step_completed(step, enc)?;

            metrics.push(StepMetrics {
                step,
                loss: loss.to_f64_lossy(),
                lr: lr.to_f64_lossy(),
                grad_norm_pos: mean(&pos_norms),
                grad_norm_neg_mean: mean(&neg_norms),
                neg_source: supply.source().name().to_string(),
            });
            observer(step, enc);
        }
    }
    Ok(metrics)
}
