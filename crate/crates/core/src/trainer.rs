//! Batch construction, training loops and evaluation.
//!
//! A batch pairs `n` distinct writers with two distinct marks each, so row
//! `i` of the similarity matrix has its positive on the diagonal and `n - 1`
//! true negatives. An epoch is `ceil(total_marks / (2 n))` steps, i.e. about
//! one pass over the marks. Parameters are updated with Adam.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use crate::encoder::{dot, EncoderConfig, EncoderParams, ParamGradients};
use crate::error::{Error, Result};
use crate::objective::{
    chain_to_embeddings, dual_loss, dual_loss_grad, pairwise_bce_grad, pairwise_bce_loss, sigmoid,
    similarity_matrix, LossConfig,
};
use crate::raster::MarkImage;
use crate::retrieval::Pool;
use crate::rng::{derive_seed, Rng};
use crate::synth::WriterGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    /// Overrides the one-pass-per-epoch step count.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.encoder.validate()?;
        if self.batch_size < 2 {
            return Err(Error::arg("batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Dense-batch dual cross-entropy plus diagonal BCE.
    Contrastive,
    /// One positive and one negative scored pair per batch row, BCE each.
    PairwiseBaseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub objective: Objective,
    pub epoch_losses: Vec<f64>,
    pub params: EncoderParams,
    pub temperature: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch<'a> {
    pub a_side: Vec<&'a MarkImage>,
    pub b_side: Vec<&'a MarkImage>,
    pub writer_ids: Vec<u64>,
}

/// Samples `n` distinct writers and two distinct marks from each.
pub fn make_batch<'a>(dataset: &'a [WriterGroup], n: usize, rng: &mut Rng) -> Result<TrainingBatch<'a>> {
    let eligible: Vec<&WriterGroup> = dataset.iter().filter(|g| g.marks.len() >= 2).collect();
    if n == 0 || eligible.len() < n {
        return Err(Error::arg(format!(
            "batch of {n} needs {n} writers with 2+ marks, dataset has {}",
            eligible.len()
        )));
    }
    let mut batch = TrainingBatch {
        a_side: Vec::with_capacity(n),
        b_side: Vec::with_capacity(n),
        writer_ids: Vec::with_capacity(n),
    };
    for w in rng.sample_indices(eligible.len(), n) {
        let g = eligible[w];
        let picks = rng.sample_indices(g.marks.len(), 2);
        batch.a_side.push(&g.marks[picks[0]]);
        batch.b_side.push(&g.marks[picks[1]]);
        batch.writer_ids.push(g.writer_id);
    }
    Ok(batch)
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(cfg: &TrainConfig, params: &EncoderParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &ParamGradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.tensors_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.tensors[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn train_contrastive(dataset: &[WriterGroup], cfg: &TrainConfig) -> Result<TrainReport> {
    train(dataset, cfg, Objective::Contrastive, &mut |_, _| {})
}

pub fn train_pairwise_baseline(dataset: &[WriterGroup], cfg: &TrainConfig) -> Result<TrainReport> {
    train(dataset, cfg, Objective::PairwiseBaseline, &mut |_, _| {})
}

/// Runs the training loop, calling `progress(epoch, mean_loss)` after each
/// epoch (1-based).
pub fn train(
    dataset: &[WriterGroup],
    cfg: &TrainConfig,
    objective: Objective,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = EncoderParams::init(cfg.encoder.clone(), cfg.seed)?;
    let mut rng = Rng::new(derive_seed(cfg.seed, 0x5452_4149));
    // fail on a bad dataset before any work
    make_batch(dataset, cfg.batch_size, &mut Rng::new(0))?;

    let total_marks: usize = dataset.iter().map(|g| g.marks.len()).sum();
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| total_marks.div_ceil(2 * cfg.batch_size))
        .max(1);
    let mut adam = Adam::new(cfg, &params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = make_batch(dataset, cfg.batch_size, &mut rng)?;
            let (loss, grads) = match objective {
                Objective::Contrastive => contrastive_step(&params, &batch, &cfg.loss)?,
                Objective::PairwiseBaseline => pairwise_step(&params, &batch, &cfg.loss, &mut rng)?,
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("non-finite loss {loss}"),
                });
            }
            adam.step(&mut params, &grads);
            sum += loss;
            step += 1;
        }
        let mean = sum / steps_per_epoch as f64;
        epoch_losses.push(mean);
        progress(epoch, mean);
    }
    let tag = match objective {
        Objective::Contrastive => "contrastive",
        Objective::PairwiseBaseline => "pairwise",
    };
    params.set_version(format!("{tag}-seed{}-epochs{}", cfg.seed, cfg.epochs));
    Ok(TrainReport {
        objective,
        epoch_losses,
        params,
        temperature: cfg.loss.temperature,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loss and parameter gradient for one contrastive batch.
pub fn contrastive_step(
    params: &EncoderParams,
    batch: &TrainingBatch<'_>,
    loss_cfg: &LossConfig,
) -> Result<(f64, ParamGradients)> {
    let ta = batch.a_side.iter().map(|m| params.forward(m)).collect::<Result<Vec<_>>>()?;
    let tb = batch.b_side.iter().map(|m| params.forward(m)).collect::<Result<Vec<_>>>()?;
    let ea: Vec<&[f64]> = ta.iter().map(|t| t.embedding()).collect();
    let eb: Vec<&[f64]> = tb.iter().map(|t| t.embedding()).collect();
    let s = similarity_matrix(&ea, &eb, loss_cfg)?;
    let loss = dual_loss(&s, loss_cfg)?;
    let gs = dual_loss_grad(&s, loss_cfg)?;
    let (ga, gb) = chain_to_embeddings(&gs, &ea, &eb, loss_cfg)?;
    let mut grads = ParamGradients::zeros_like(params);
    for (t, g) in ta.iter().zip(&ga).chain(tb.iter().zip(&gb)) {
        params.backward_trace(t, g, &mut grads);
    }
    Ok((loss.total, grads))
}

fn pairwise_step(
    params: &EncoderParams,
    batch: &TrainingBatch<'_>,
    loss_cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<(f64, ParamGradients)> {
    let n = batch.a_side.len();
    let ta = batch.a_side.iter().map(|m| params.forward(m)).collect::<Result<Vec<_>>>()?;
    let tb = batch.b_side.iter().map(|m| params.forward(m)).collect::<Result<Vec<_>>>()?;
    let d = params.embedding_dim();
    let mut ga = vec![vec![0.0; d]; n];
    let mut gb = vec![vec![0.0; d]; n];
    let inv_t = 1.0 / loss_cfg.temperature;
    let scale = 1.0 / (2 * n) as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let j = (i + 1 + rng.below(n - 1)) % n;
        for (other, label) in [(i, true), (j, false)] {
            let (a, b) = (ta[i].embedding(), tb[other].embedding());
            let s = dot(a, b) * inv_t;
            loss += pairwise_bce_loss(s, label) * scale;
            let g = pairwise_bce_grad(s, label) * scale * inv_t;
            for k in 0..d {
                ga[i][k] += g * b[k];
                gb[other][k] += g * a[k];
            }
        }
    }
    let mut grads = ParamGradients::zeros_like(params);
    for (t, g) in ta.iter().zip(&ga).chain(tb.iter().zip(&gb)) {
        params.backward_trace(t, g, &mut grads);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairF1 {
    pub f1: f64,
    /// Pairs scoring strictly above this are predicted same-hand.
    pub threshold: f64,
}

/// Best F1 over thresholds at the midpoints between consecutive distinct
/// scores, plus one threshold below every score (all predicted positive).
pub fn best_f1(scores: &[f64], labels: &[bool]) -> Result<PairF1> {
    if scores.len() != labels.len() {
        return Err(Error::arg("scores and labels differ in length"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::arg("evaluation set needs both positive and negative pairs"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::arg("non-finite score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let f1 = |tp: usize, fp: usize, fn_: usize| {
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    // everything predicted positive
    let (mut tp, mut fp) = (positives, labels.len() - positives);
    let mut best = PairF1 {
        f1: f1(tp, fp, 0),
        threshold: scores[order[0]] - 1.0,
    };
    let mut i = 0;
    while i < order.len() {
        // move the whole group of equal scores to the negative side
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        if i == order.len() {
            break;
        }
        let cand = f1(tp, fp, positives - tp);
        if cand > best.f1 {
            best = PairF1 {
                f1: cand,
                threshold: 0.5 * (v + scores[order[i]]),
            };
        }
    }
    Ok(best)
}

/// Pair score `sigmoid(<f(x), f(y)> / tau)`.
pub fn pair_score(params: &EncoderParams, x: &MarkImage, y: &MarkImage, loss_cfg: &LossConfig) -> Result<f64> {
    let ex = params.embed(x)?;
    let ey = params.embed(y)?;
    Ok(sigmoid(ex.dot(&ey) / loss_cfg.temperature))
}

pub fn evaluate_pair_f1(
    params: &EncoderParams,
    eval_pairs: &[(&MarkImage, &MarkImage, bool)],
    loss_cfg: &LossConfig,
) -> Result<PairF1> {
    loss_cfg.validate()?;
    let labels: Vec<bool> = eval_pairs.iter().map(|p| p.2).collect();
    if !labels.contains(&true) || !labels.contains(&false) {
        return Err(Error::arg("evaluation set needs both positive and negative pairs"));
    }
    let scores = eval_pairs
        .iter()
        .map(|(x, y, _)| pair_score(params, x, y, loss_cfg))
        .collect::<Result<Vec<_>>>()?;
    best_f1(&scores, &labels)
}

/// Fraction of queries whose top `k` pool matches (by [`Pool::query`])
/// include a mark by the same writer.
pub fn evaluate_topk(
    params: &EncoderParams,
    queries: &[(&MarkImage, u64)],
    pool: &[(&MarkImage, u64)],
    k: usize,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    if queries.is_empty() || pool.is_empty() || k == 0 {
        return Err(Error::arg("need queries, a pool and k >= 1"));
    }
    let pool_writers: HashSet<u64> = pool.iter().map(|p| p.1).collect();
    let pool_ids: HashSet<&str> = pool.iter().map(|p| p.0.mark_id.as_str()).collect();
    for (q, w) in queries {
        if !pool_writers.contains(w) {
            return Err(Error::arg(format!("query writer {w} has no pool marks")));
        }
        if pool_ids.contains(q.mark_id.as_str()) {
            return Err(Error::arg(format!("query mark {} is also in the pool", q.mark_id)));
        }
    }
    let mut index = Pool::new(params.embedding_dim());
    let mut writer_of = HashMap::new();
    for (i, (m, w)) in pool.iter().enumerate() {
        let alias = index.enroll_at(params.embed(m)?, &format!("eval{i}"), 0, 0)?;
        writer_of.insert(alias, *w);
    }
    let mut hits = 0;
    for (q, w) in queries {
        let matches = index.query(&params.embed(q)?, k, loss_cfg)?;
        if matches.iter().any(|m| writer_of[&m.alias] == *w) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// `n_pairs` evaluation pairs, half same-writer and half cross-writer.
pub fn sample_eval_pairs(groups: &[WriterGroup], n_pairs: usize, seed: u64) -> Result<Vec<(&MarkImage, &MarkImage, bool)>> {
    let eligible: Vec<&WriterGroup> = groups.iter().filter(|g| g.marks.len() >= 2).collect();
    if eligible.len() < 2 || n_pairs < 2 {
        return Err(Error::arg("need 2+ writers with 2+ marks and at least 2 pairs"));
    }
    let mut rng = Rng::new(derive_seed(seed, 0x4556_414c));
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        if i % 2 == 0 {
            let g = eligible[rng.below(eligible.len())];
            let p = rng.sample_indices(g.marks.len(), 2);
            pairs.push((&g.marks[p[0]], &g.marks[p[1]], true));
        } else {
            let w = rng.sample_indices(eligible.len(), 2);
            let (g, h) = (eligible[w[0]], eligible[w[1]]);
            pairs.push((&g.marks[rng.below(g.marks.len())], &h.marks[rng.below(h.marks.len())], false));
        }
    }
    Ok(pairs)
}

/// Query/pool split for retrieval evaluation: the first half of each
/// writer's marks (at least one) query, the rest form the pool.
pub fn split_queries_pool(groups: &[WriterGroup]) -> (Vec<(&MarkImage, u64)>, Vec<(&MarkImage, u64)>) {
    let mut queries = Vec::new();
    let mut pool = Vec::new();
    for g in groups.iter().filter(|g| g.marks.len() >= 2) {
        let half = (g.marks.len() / 2).max(1);
        for (i, m) in g.marks.iter().enumerate() {
            if i < half {
                queries.push((m, g.writer_id));
            } else {
                pool.push((m, g.writer_id));
            }
        }
    }
    (queries, pool)
}

/// Retrieval and pair-verification metrics on a set of (held-out) writers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub top1: f64,
    pub top5: f64,
    pub pair_f1: PairF1,
    pub queries: usize,
    pub pairs: usize,
}

/// Number of evaluation pairs drawn by [`evaluate_writers`].
pub const EVAL_PAIRS: usize = 200;

/// Top-1/top-5 over [`split_queries_pool`] and pair-F1 over
/// [`EVAL_PAIRS`] balanced pairs drawn with `seed`.
pub fn evaluate_writers(
    params: &EncoderParams,
    groups: &[WriterGroup],
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<EvalSummary> {
    let (queries, pool) = split_queries_pool(groups);
    let top1 = evaluate_topk(params, &queries, &pool, 1, loss_cfg)?;
    let top5 = evaluate_topk(params, &queries, &pool, 5.min(pool.len()), loss_cfg)?;
    let pairs = sample_eval_pairs(groups, EVAL_PAIRS, seed)?;
    let pair_f1 = evaluate_pair_f1(params, &pairs, loss_cfg)?;
    Ok(EvalSummary {
        top1,
        top5,
        pair_f1,
        queries: queries.len(),
        pairs: pairs.len(),
    })
}

/// Splits off the last `holdout` writers for evaluation.
pub fn holdout_split(groups: &[WriterGroup], holdout: usize) -> Result<(&[WriterGroup], &[WriterGroup])> {
    if holdout < 2 || holdout >= groups.len() {
        return Err(Error::arg(format!(
            "cannot hold out {holdout} of {} writers",
            groups.len()
        )));
    }
    Ok(groups.split_at(groups.len() - holdout))
}
