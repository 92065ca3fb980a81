//! Two-stage per-step optimization.
//!
//! Stage 1 learns per-identity prototypes (the text-token stand-ins) against
//! frozen, pre-extracted features. Stage 2 trains the newest adapter plus a
//! step-local classifier head with three losses: cross-entropy over cosine
//! similarities to the frozen prototypes, batch-hard triplet, and ID
//! cross-entropy.

use crate::encoder::{Encoder, EncoderBlock, TapeMode};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Scalar, Tape};
use crate::rng::rng_for;
use crate::selector::MixWeights;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Initial learnable logit temperature for the contrastive losses.
const LOGIT_TEMP_INIT: f64 = 0.07;
/// Ridge inside the pairwise-distance square root.
const DIST_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub i2tce: f64,
    pub triplet: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            i2tce: 1.0,
            triplet: 1.0,
            id: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage1_lr: f64,
    pub stage2_iters: usize,
    pub stage2_lr: f64,
    /// Identities per batch.
    pub p_ids: usize,
    /// Instances per identity per batch.
    pub k_instances: usize,
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 300,
            stage1_lr: 3.5e-4,
            stage2_iters: 600,
            stage2_lr: 1e-3,
            p_ids: 8,
            k_instances: 4,
            margin: 0.3,
            loss_weights: LossWeights::default(),
            pretrain_iters: 500,
            pretrain_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_ids < 2 || self.k_instances < 2 {
            return Err(Error::Config(
                "batch composition needs at least 2 identities and 2 instances".into(),
            ));
        }
        if self.margin < 0.0 {
            return Err(Error::Config(format!("margin {} < 0", self.margin)));
        }
        if self.stage1_lr <= 0.0 || self.stage2_lr <= 0.0 || self.pretrain_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k_instances
    }
}

/// One logged optimization step; unused loss columns stay zero.
#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub stage: &'static str,
    pub iteration: usize,
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub loss_i2tce: f64,
    pub loss_triplet: f64,
    pub loss_id: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from(
        "step,stage,iteration,loss_i2t,loss_t2i,loss_i2tce,loss_triplet,loss_id,total\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.stage,
            r.iteration,
            r.loss_i2t,
            r.loss_t2i,
            r.loss_i2tce,
            r.loss_triplet,
            r.loss_id,
            r.total
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Learned prototypes for one lifelong step: one row per identity, plus the
/// learned log of the inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPrototypes<T> {
    pub ids: Vec<u32>,
    pub weights: Matrix<T>,
    pub log_scale: T,
}

impl<T: Scalar> StepPrototypes<T> {
    pub fn proto_index(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

/// Prototype bank across all lifelong steps; identity label spaces are
/// disjoint between steps by protocol.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeBank<T> {
    pub steps: Vec<StepPrototypes<T>>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn all_ids(&self) -> Vec<u32> {
        self.steps.iter().flat_map(|s| s.ids.iter().copied()).collect()
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with the usual (0.9, 0.999) moments; state is kept in parameter
/// order, so callers must pass the same parameter list every step.
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dim(format!(
                "{} parameters with {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::State("optimizer state out of sync".into()));
        }
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Dim("parameter/gradient shape mismatch".into()));
            }
            for i in 0..g.data().len() {
                let gv = g.data()[i];
                let mv = b1 * m.data()[i] + (T::one() - b1) * gv;
                let vv = b2 * v.data()[i] + (T::one() - b2) * gv * gv;
                m.data_mut()[i] = mv;
                v.data_mut()[i] = vv;
                let update = self.lr * (mv / bc1) / ((vv / bc2).sqrt() + self.eps);
                p.data_mut()[i] = p.data()[i] - update;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------------

/// Draw `p_ids` distinct identities with `k_instances` samples each.
pub fn pk_sample(
    labels: &[u32],
    p_ids: usize,
    k_instances: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= k_instances).collect();
    if eligible.len() < p_ids {
        return Err(Error::Sampler(format!(
            "need {p_ids} identities with >= {k_instances} instances, found {}",
            eligible.len()
        )));
    }
    let chosen: Vec<&&Vec<usize>> = eligible.choose_multiple(rng, p_ids).collect();
    let mut batch = Vec::with_capacity(p_ids * k_instances);
    for group in chosen {
        let picks: Vec<&usize> = group.choose_multiple(rng, k_instances).collect();
        batch.extend(picks.into_iter().copied());
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Loss builders (generic so the 64-bit gradcheck can reuse them)
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    let (n, c) = tape.value(logits).shape();
    if targets.len() != n {
        return Err(Error::Dim(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Label(format!("target {bad} outside {c} classes")));
    }
    let lp = tape.log_softmax_rows(logits);
    let mut mask = Matrix::zeros(n, c);
    let w = T::from_f64(-1.0 / n as f64);
    for (r, &t) in targets.iter().enumerate() {
        mask[(r, t)] = w;
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(lp, mask)?;
    Ok(tape.sum_all(picked))
}

/// Batch-hard triplet loss on Euclidean distances.
///
/// Mining runs on the forward distance values (hardest positive excludes
/// the anchor itself; ties go to the lowest index), then the loss is wired
/// through constant selection masks so gradients flow through exactly the
/// mined pairs.
pub fn triplet_loss_batch_hard<T: Scalar>(
    tape: &mut Tape<T>,
    feats: NodeId,
    labels: &[u32],
    margin: f64,
) -> Result<NodeId> {
    let n = tape.value(feats).rows();
    if labels.len() != n {
        return Err(Error::Dim(format!("{} labels for {n} rows", labels.len())));
    }

    let ft = tape.transpose(feats);
    let gram = tape.matmul(feats, ft)?;
    let sq = tape.mul(feats, feats)?;
    let sq = tape.row_sums(sq); // n×1
    let sq_row = tape.transpose(sq); // 1×n
    let neg2 = tape.scale_const(gram, T::from_f64(-2.0));
    let d2 = tape.add_row_vec(neg2, sq_row)?;
    let d2 = tape.add_col_vec(d2, sq)?;
    let d2 = tape.add_const(d2, T::from_f64(DIST_EPS));
    let dist = tape.sqrt(d2);

    // mine on forward values
    let dv = tape.value(dist).clone();
    let mut pos_mask = Matrix::zeros(n, n);
    let mut neg_mask = Matrix::zeros(n, n);
    for a in 0..n {
        let mut hardest_pos: Option<(usize, T)> = None;
        let mut hardest_neg: Option<(usize, T)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dv[(a, j)];
            if labels[j] == labels[a] {
                if hardest_pos.map_or(true, |(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (pj, _) = hardest_pos.ok_or_else(|| {
            Error::Sampler(format!("anchor {a} has no positive in the batch"))
        })?;
        let (nj, _) = hardest_neg.ok_or_else(|| {
            Error::Sampler(format!("anchor {a} has no negative in the batch"))
        })?;
        pos_mask[(a, pj)] = T::one();
        neg_mask[(a, nj)] = T::one();
    }

    let pos_mask = tape.constant(pos_mask);
    let neg_mask = tape.constant(neg_mask);
    let hp = tape.mul(dist, pos_mask)?;
    let hp = tape.row_sums(hp);
    let hn = tape.mul(dist, neg_mask)?;
    let hn = tape.row_sums(hn);
    let diff = tape.sub(hp, hn)?;
    let shifted = tape.add_const(diff, T::from_f64(margin));
    let hinge = tape.relu(shifted);
    Ok(tape.mean_all(hinge))
}

/// Cosine-similarity logits of features against prototypes, scaled by a
/// fixed inverse temperature.
pub fn prototype_logits<T: Scalar>(
    tape: &mut Tape<T>,
    feats: NodeId,
    protos: NodeId,
    inv_temp: T,
) -> Result<NodeId> {
    let nf = tape.l2_normalize_rows(feats);
    let np = tape.l2_normalize_rows(protos);
    let npt = tape.transpose(np);
    let sim = tape.matmul(nf, npt)?;
    Ok(tape.scale_const(sim, inv_temp))
}

/// Symmetric contrastive pair for stage 1. `log_scale` is a learnable 1×1
/// node; the effective inverse temperature is `exp(log_scale)`.
///
/// The text→image direction averages the log-probability over every positive
/// feature of each prototype present in the batch.
pub fn info_nce_losses<T: Scalar>(
    tape: &mut Tape<T>,
    feats: NodeId,
    protos: NodeId,
    log_scale: NodeId,
    targets: &[usize],
) -> Result<(NodeId, NodeId)> {
    let n = tape.value(feats).rows();
    let c = tape.value(protos).rows();
    if targets.len() != n {
        return Err(Error::Dim(format!("{} targets for {n} features", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Label(format!("target {bad} outside {c} prototypes")));
    }

    let nf = tape.l2_normalize_rows(feats);
    let np = tape.l2_normalize_rows(protos);
    let npt = tape.transpose(np);
    let sim = tape.matmul(nf, npt)?;
    let scale = tape.exp(log_scale);
    let logits = tape.mul_scalar_node(sim, scale)?;

    let i2t = cross_entropy(tape, logits, targets)?;

    // t2i: average over each present prototype's positives. A prototype
    // whose positives span the whole batch has no negatives to contrast
    // against, so it contributes nothing (this makes a singleton-class
    // batch a strict no-op, matching i2t).
    let mut counts = vec![0usize; c];
    for &t in targets {
        counts[t] += 1;
    }
    let contrastable = counts.iter().filter(|&&k| k > 0 && k < n).count();
    if contrastable == 0 {
        let zero = tape.constant(Matrix::zeros(1, 1));
        return Ok((i2t, zero));
    }
    let logits_t = tape.transpose(logits);
    let lp = tape.log_softmax_rows(logits_t); // c×n
    let mut mask = Matrix::zeros(c, n);
    for (j, &t) in targets.iter().enumerate() {
        if counts[t] < n {
            mask[(t, j)] = T::from_f64(-1.0 / (counts[t] as f64 * contrastable as f64));
        }
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(lp, mask)?;
    let t2i = tape.sum_all(picked);
    Ok((i2t, t2i))
}

// ---------------------------------------------------------------------------
// Stage 1: prototype learning on frozen features
// ---------------------------------------------------------------------------

pub struct Stage1Report {
    pub rows: Vec<LossRow>,
    /// Fraction of training features whose nearest prototype (by cosine)
    /// carries their identity.
    pub accuracy: f64,
}

pub fn stage1_train_prototypes(
    step: usize,
    features: &Matrix<f32>,
    labels: &[u32],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(StepPrototypes<f32>, Stage1Report)> {
    cfg.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::Dim(format!(
            "{} feature rows with {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let d = features.cols();

    let index_of: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let targets_all: Vec<usize> = labels.iter().map(|l| index_of[l]).collect();

    let mut rng = rng_for(seed, &[step as u64, 1]);
    // prototypes start at their class feature means: a singleton class,
    // whose contrastive losses are identically zero, then already sits on
    // the mean direction
    let mut protos = Matrix::zeros(ids.len(), d);
    let mut class_counts = vec![0f32; ids.len()];
    for (r, &label) in labels.iter().enumerate() {
        let c = index_of[&label];
        class_counts[c] += 1.0;
        for (acc, &x) in protos.row_mut(c).iter_mut().zip(features.row(r)) {
            *acc += x;
        }
    }
    for c in 0..ids.len() {
        for v in protos.row_mut(c) {
            *v /= class_counts[c];
        }
    }
    let mut log_scale = Matrix::filled(1, 1, (1.0 / LOGIT_TEMP_INIT).ln() as f32);

    let mut adam = Adam::new(cfg.stage1_lr);
    let mut rows = Vec::with_capacity(cfg.stage1_iters);
    for iteration in 0..cfg.stage1_iters {
        let p = cfg.p_ids.min(ids.len());
        let batch_idx = pk_sample(labels, p, cfg.k_instances, &mut rng)?;
        let batch = gather_matrix(features, &batch_idx);
        let targets: Vec<usize> = batch_idx.iter().map(|&i| targets_all[i]).collect();

        let mut tape = Tape::new();
        let f = tape.constant(batch);
        let p = tape.param(protos.clone());
        let s = tape.param(log_scale.clone());
        let (i2t, t2i) = info_nce_losses(&mut tape, f, p, s, &targets)?;
        let total = tape.add(i2t, t2i)?;
        let grads = tape.backward(total)?;
        let gp = grads.get(p, &tape);
        let gs = grads.get(s, &tape);
        adam.step(&mut [&mut protos, &mut log_scale], &[gp, gs])?;

        rows.push(LossRow {
            step,
            stage: "stage1",
            iteration,
            loss_i2t: tape.scalar_value(i2t)?.into(),
            loss_t2i: tape.scalar_value(t2i)?.into(),
            loss_i2tce: 0.0,
            loss_triplet: 0.0,
            loss_id: 0.0,
            total: tape.scalar_value(total)?.into(),
        });
    }

    let prototypes = StepPrototypes {
        ids,
        weights: protos,
        log_scale: log_scale[(0, 0)],
    };
    let accuracy = prototype_accuracy(&prototypes, features, labels);
    Ok((prototypes, Stage1Report { rows, accuracy }))
}

/// Nearest-prototype (cosine) classification accuracy.
pub fn prototype_accuracy(
    protos: &StepPrototypes<f32>,
    features: &Matrix<f32>,
    labels: &[u32],
) -> f64 {
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let f = features.row(r);
        let fn2 = norm(f);
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..protos.weights.rows() {
            let p = protos.weights.row(c);
            let cosine = dot(f, p) / (fn2 * norm(p));
            if cosine > best.1 {
                best = (c, cosine);
            }
        }
        if protos.ids[best.0] == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    (a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt().max(1e-12)
}

pub fn gather_matrix<T: Scalar>(m: &Matrix<T>, indices: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(indices.len(), m.cols());
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

// ---------------------------------------------------------------------------
// Stage 2: adapter learning
// ---------------------------------------------------------------------------

pub struct Stage2Report {
    pub rows: Vec<LossRow>,
}

/// Train the newest adapter (and a throwaway step classifier) against the
/// frozen prototypes. Only the newest adapter's tensors inside `encoder`
/// change.
pub fn stage2_train_adapter(
    encoder: &mut Encoder<f32>,
    prototypes: &StepPrototypes<f32>,
    samples: &Matrix<f32>,
    labels: &[u32],
    per_block_mix: &[MixWeights],
    step: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Stage2Report> {
    cfg.validate()?;
    if samples.rows() != labels.len() {
        return Err(Error::Dim(format!(
            "{} samples with {} labels",
            samples.rows(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| prototypes.proto_index(**l).is_none()) {
        return Err(Error::Label(format!(
            "label {bad} has no prototype for step {step}"
        )));
    }
    let d = encoder.cfg.d_model;
    let n_classes = prototypes.ids.len();
    let inv_temp = prototypes.log_scale.exp();

    let mut rng = rng_for(seed, &[step as u64, 2]);
    let mut head_w = Matrix::zeros(n_classes, d);
    for v in head_w.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (z * 0.02) as f32;
    }
    let mut head_b = Matrix::zeros(1, n_classes);

    let protos_const = prototypes.weights.clone();
    let mut adam = Adam::new(cfg.stage2_lr);
    let mut rows = Vec::with_capacity(cfg.stage2_iters);
    let w = cfg.loss_weights;

    for iteration in 0..cfg.stage2_iters {
        let p = cfg.p_ids.min(n_classes);
        let batch_idx = pk_sample(labels, p, cfg.k_instances, &mut rng)?;
        let batch = gather_matrix(samples, &batch_idx);
        let batch_labels: Vec<u32> = batch_idx.iter().map(|&i| labels[i]).collect();
        let targets: Vec<usize> = batch_labels
            .iter()
            .map(|l| prototypes.proto_index(*l).expect("validated above"))
            .collect();

        let mut tape = Tape::new();
        let enc = encoder.encode_on_tape(
            &mut tape,
            &batch,
            &TapeMode::TrainNewestAdapter { per_block_mix },
        )?;

        let protos_node = tape.constant(protos_const.clone());
        let logits_proto = prototype_logits(&mut tape, enc.features, protos_node, inv_temp)?;
        let l_i2tce = cross_entropy(&mut tape, logits_proto, &targets)?;

        let l_tri = triplet_loss_batch_hard(&mut tape, enc.features, &batch_labels, cfg.margin)?;

        let hw = tape.param(head_w.clone());
        let hb = tape.param(head_b.clone());
        let hwt = tape.transpose(hw);
        let id_logits = tape.matmul(enc.features, hwt)?;
        let id_logits = tape.add_row_vec(id_logits, hb)?;
        let l_id = cross_entropy(&mut tape, id_logits, &targets)?;

        let a = tape.scale_const(l_i2tce, w.i2tce as f32);
        let b = tape.scale_const(l_tri, w.triplet as f32);
        let c = tape.scale_const(l_id, w.id as f32);
        let ab = tape.add(a, b)?;
        let total = tape.add(ab, c)?;

        let grads = tape.backward(total)?;

        // encoder adapter tensors first (in handle order), then the head
        let mut grad_list: Vec<Matrix<f32>> =
            enc.params.iter().map(|(_, id)| grads.get(*id, &tape)).collect();
        grad_list.push(grads.get(hw, &tape));
        grad_list.push(grads.get(hb, &tape));

        let mut param_refs = newest_adapter_tensors_mut(encoder);
        debug_assert_eq!(param_refs.len(), enc.params.len());
        param_refs.push(&mut head_w);
        param_refs.push(&mut head_b);
        adam.step(&mut param_refs, &grad_list)?;

        rows.push(LossRow {
            step,
            stage: "stage2",
            iteration,
            loss_i2t: 0.0,
            loss_t2i: 0.0,
            loss_i2tce: tape.scalar_value(l_i2tce)?.into(),
            loss_triplet: tape.scalar_value(l_tri)?.into(),
            loss_id: tape.scalar_value(l_id)?.into(),
            total: tape.scalar_value(total)?.into(),
        });
    }
    Ok(Stage2Report { rows })
}

/// Mutable references to the newest adapter's tensors, in the exact order
/// `encode_on_tape` registers them: per block, per enabled slot, down then
/// up.
pub(crate) fn newest_adapter_tensors_mut<T: Scalar>(encoder: &mut Encoder<T>) -> Vec<&mut Matrix<T>> {
    let mut out = Vec::new();
    for block in encoder.blocks.iter_mut() {
        let EncoderBlock {
            query,
            key,
            value,
            proj,
            ffn1,
            ffn2,
            ..
        } = block;
        for lin in [query, key, value, proj, ffn1, ffn2] {
            if lin.adapter_count() > 0 {
                let adapter = lin.last_adapter_mut().expect("nonempty bank");
                out.push(&mut adapter.down);
                out.push(&mut adapter.up);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Base training (pretraining and the full fine-tuning baseline)
// ---------------------------------------------------------------------------

pub struct BaseTrainReport {
    pub rows: Vec<LossRow>,
    /// ID classification accuracy over the training samples, final head.
    pub accuracy: f64,
}

/// Train every base parameter of the encoder (which must carry no adapters)
/// plus a throwaway classifier. Used for domain-0 pretraining (`triplet =
/// false`, ID cross-entropy only) and the sequential full fine-tuning
/// baseline (`triplet = true`).
pub fn train_base(
    encoder: &mut Encoder<f32>,
    samples: &Matrix<f32>,
    labels: &[u32],
    iters: usize,
    lr: f64,
    with_triplet: bool,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BaseTrainReport> {
    if samples.rows() == 0 {
        return Err(Error::Data("base training set is empty".into()));
    }
    if samples.rows() != labels.len() {
        return Err(Error::Dim(format!(
            "{} samples with {} labels",
            samples.rows(),
            labels.len()
        )));
    }
    if encoder.adapter_steps() != 0 {
        return Err(Error::State(
            "base training requires an adapter-free encoder".into(),
        ));
    }
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let index_of: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();

    let d = encoder.cfg.d_model;
    let mut rng = rng_for(seed, &[3]);
    let mut head_w = Matrix::zeros(ids.len(), d);
    for v in head_w.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (z * 0.02) as f32;
    }
    let mut head_b = Matrix::zeros(1, ids.len());

    let mut adam = Adam::new(lr);
    let mut rows = Vec::with_capacity(iters);
    for iteration in 0..iters {
        let p = cfg.p_ids.min(ids.len());
        let batch_idx = pk_sample(labels, p, cfg.k_instances, &mut rng)?;
        let batch = gather_matrix(samples, &batch_idx);
        let batch_labels: Vec<u32> = batch_idx.iter().map(|&i| labels[i]).collect();
        let targets: Vec<usize> = batch_labels.iter().map(|l| index_of[l]).collect();

        let mut tape = Tape::new();
        let enc = encoder.encode_on_tape(&mut tape, &batch, &TapeMode::TrainBase)?;

        let hw = tape.param(head_w.clone());
        let hb = tape.param(head_b.clone());
        let hwt = tape.transpose(hw);
        let logits = tape.matmul(enc.features, hwt)?;
        let logits = tape.add_row_vec(logits, hb)?;
        let l_id = cross_entropy(&mut tape, logits, &targets)?;

        let total = if with_triplet {
            let l_tri = triplet_loss_batch_hard(&mut tape, enc.features, &batch_labels, cfg.margin)?;
            let t = tape.add(l_id, l_tri)?;
            rows.push(LossRow {
                step: 0,
                stage: "base",
                iteration,
                loss_i2t: 0.0,
                loss_t2i: 0.0,
                loss_i2tce: 0.0,
                loss_triplet: tape.scalar_value(l_tri)?.into(),
                loss_id: tape.scalar_value(l_id)?.into(),
                total: tape.scalar_value(t)?.into(),
            });
            t
        } else {
            rows.push(LossRow {
                step: 0,
                stage: "base",
                iteration,
                loss_i2t: 0.0,
                loss_t2i: 0.0,
                loss_i2tce: 0.0,
                loss_triplet: 0.0,
                loss_id: tape.scalar_value(l_id)?.into(),
                total: tape.scalar_value(l_id)?.into(),
            });
            l_id
        };

        let grads = tape.backward(total)?;
        let mut grad_list: Vec<Matrix<f32>> =
            enc.params.iter().map(|(_, id)| grads.get(*id, &tape)).collect();
        grad_list.push(grads.get(hw, &tape));
        grad_list.push(grads.get(hb, &tape));

        let mut param_refs = base_tensors_mut(encoder);
        debug_assert_eq!(param_refs.len(), enc.params.len());
        param_refs.push(&mut head_w);
        param_refs.push(&mut head_b);
        adam.step(&mut param_refs, &grad_list)?;
    }

    // final train accuracy through the trained head
    let feats = encoder.encode_base(samples)?;
    let mut correct = 0usize;
    for r in 0..feats.rows() {
        let mut best = (0usize, f32::NEG_INFINITY);
        for c in 0..head_w.rows() {
            let mut acc = head_b[(0, c)];
            for (x, w) in feats.row(r).iter().zip(head_w.row(c)) {
                acc += x * w;
            }
            if acc > best.1 {
                best = (c, acc);
            }
        }
        if ids[best.0] == labels[r] {
            correct += 1;
        }
    }
    Ok(BaseTrainReport {
        rows,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

/// Mutable references to every base tensor, in the exact order
/// `encode_on_tape` registers them under `TapeMode::TrainBase`.
fn base_tensors_mut(encoder: &mut Encoder<f32>) -> Vec<&mut Matrix<f32>> {
    let Encoder {
        patch_embed,
        class_token,
        pos_embed,
        blocks,
        final_norm,
        ..
    } = encoder;
    let mut out: Vec<&mut Matrix<f32>> = Vec::new();
    let (w, b) = patch_embed.weight_and_bias_mut();
    out.push(w);
    out.push(b);
    out.push(class_token);
    out.push(pos_embed);
    for block in blocks.iter_mut() {
        let EncoderBlock {
            ln1,
            query,
            key,
            value,
            proj,
            ln2,
            ffn1,
            ffn2,
        } = block;
        out.push(&mut ln1.gamma);
        out.push(&mut ln1.beta);
        for lin in [query, key, value] {
            let (w, b) = lin.weight_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        {
            let (w, b) = proj.weight_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        out.push(&mut ln2.gamma);
        out.push(&mut ln2.beta);
        for lin in [ffn1, ffn2] {
            let (w, b) = lin.weight_and_bias_mut();
            out.push(w);
            out.push(b);
        }
    }
    out.push(&mut final_norm.gamma);
    out.push(&mut final_norm.beta);
    out
}
