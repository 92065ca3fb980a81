//! Central finite-difference verification of the tape's adjoints.
//!
//! The numeric side only ever calls graph *forward* evaluation, so it stays
//! independent of the backward pass it certifies. Everything here runs in
//! 64-bit; step size 1e-4.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Tape};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_err: f64,
    pub passed: bool,
}

impl CheckReport {
    fn from_err(name: &str, max_err: f64) -> Self {
        Self {
            name: name.to_string(),
            max_err,
            passed: max_err < FD_TOLERANCE,
        }
    }
}

/// Central finite differences of `f` w.r.t. every entry of every parameter.
pub fn finite_diff_grads(
    f: &mut dyn FnMut(&[Matrix<f64>]) -> Result<f64>,
    params: &[Matrix<f64>],
    step: f64,
) -> Result<Vec<Matrix<f64>>> {
    let mut work: Vec<Matrix<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (rows, cols) = params[p].shape();
        let mut g = Matrix::zeros(rows, cols);
        for idx in 0..rows * cols {
            let orig = work[p].data()[idx];
            work[p].data_mut()[idx] = orig + step;
            let plus = f(&work)?;
            work[p].data_mut()[idx] = orig - step;
            let minus = f(&work)?;
            work[p].data_mut()[idx] = orig;
            g.data_mut()[idx] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Guarded relative error: `|a-n| / max(|a|, |n|, 1e-4)`, maximized over
/// entries. The floor keeps near-zero gradients from inflating the ratio
/// while staying far below any meaningful gradient magnitude.
pub fn grad_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Compare a tape-built scalar function against finite differences.
///
/// `build` must be a pure function of the parameter values: it is re-run for
/// every perturbed evaluation.
pub fn check_graph(
    name: &str,
    params: &[Matrix<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix<f64>> = ids.iter().map(|&id| grads.get(id, &tape)).collect();

    let mut eval = |vals: &[Matrix<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|p| t.param(p.clone())).collect();
        let loss = build(&mut t, &ids)?;
        t.scalar_value(loss)
    };
    let numeric = finite_diff_grads(&mut eval, params, FD_STEP)?;

    let max_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| grad_error(a, n))
        .fold(0.0, f64::max);
    Ok(CheckReport::from_err(name, max_err))
}

/// Deterministic pseudo-random probe matrix used to give reductions
/// non-uniform weights without depending on an RNG inside `build`.
fn probe(rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let k = (r * 31 + c * 17 + 5) % 11;
            m[(r, c)] = 0.25 * (k as f64 - 5.0) / 5.0 + 0.3;
        }
    }
    m
}

fn random_params(shapes: &[(usize, usize)], seed: u64, positive: bool, kink_safe: bool) -> Vec<Matrix<f64>> {
    use rand::Rng;
    let mut rng = crate::rng::rng_from_seed(seed);
    shapes
        .iter()
        .map(|&(r, c)| {
            let data = (0..r * c)
                .map(|_| {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    if positive {
                        x.abs() + 0.3
                    } else if kink_safe {
                        // keep values away from 0 so FD does not straddle a kink
                        x.signum() * (x.abs() * 0.8 + 0.1)
                    } else {
                        x
                    }
                })
                .collect();
            Matrix::from_vec(r, c, data).unwrap()
        })
        .collect()
}

/// Reduce any op output to a probe-weighted scalar.
fn scalarize(tape: &mut Tape<f64>, out: NodeId) -> Result<NodeId> {
    let (r, c) = tape.value(out).shape();
    let w = tape.constant(probe(r, c));
    let weighted = tape.mul(out, w)?;
    Ok(tape.sum_all(weighted))
}

/// Names of all ops covered by [`check_op`].
pub fn op_names() -> Vec<&'static str> {
    vec![
        "matmul",
        "transpose",
        "add",
        "sub",
        "mul",
        "add_row_vec",
        "add_col_vec",
        "scale_const",
        "add_const",
        "mul_scalar_node",
        "relu",
        "gelu",
        "exp",
        "sqrt",
        "layer_norm",
        "softmax_rows",
        "log_softmax_rows",
        "l2_normalize_rows",
        "row_sums",
        "sum_all",
        "mean_all",
        "stack_rows",
        "stack_cols",
        "slice_rows",
        "slice_cols",
        "gather_rows",
    ]
}

/// Finite-difference check for one tape op by name.
pub fn check_op(name: &str, seed: u64) -> Result<CheckReport> {
    type Build = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;
    let (shapes, positive, kink_safe, build): (Vec<(usize, usize)>, bool, bool, Build) = match name
    {
        "matmul" => (
            vec![(3, 4), (4, 2)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.matmul(p[0], p[1])?;
                scalarize(t, y)
            }),
        ),
        "transpose" => (
            vec![(3, 5)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.transpose(p[0]);
                scalarize(t, y)
            }),
        ),
        "add" => (
            vec![(3, 4), (3, 4)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.add(p[0], p[1])?;
                scalarize(t, y)
            }),
        ),
        "sub" => (
            vec![(3, 4), (3, 4)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.sub(p[0], p[1])?;
                scalarize(t, y)
            }),
        ),
        "mul" => (
            vec![(3, 4), (3, 4)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.mul(p[0], p[1])?;
                scalarize(t, y)
            }),
        ),
        "add_row_vec" => (
            vec![(4, 3), (1, 3)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.add_row_vec(p[0], p[1])?;
                scalarize(t, y)
            }),
        ),
        "add_col_vec" => (
            vec![(4, 3), (4, 1)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.add_col_vec(p[0], p[1])?;
                scalarize(t, y)
            }),
        ),
        "scale_const" => (
            vec![(3, 3)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.scale_const(p[0], -1.7);
                scalarize(t, y)
            }),
        ),
        "add_const" => (
            vec![(3, 3)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.add_const(p[0], 0.9);
                scalarize(t, y)
            }),
        ),
        "mul_scalar_node" => (
            vec![(3, 3), (1, 1)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.mul_scalar_node(p[0], p[1])?;
                scalarize(t, y)
            }),
        ),
        "relu" => (
            vec![(4, 4)],
            false,
            true,
            Box::new(|t, p| {
                let y = t.relu(p[0]);
                scalarize(t, y)
            }),
        ),
        "gelu" => (
            vec![(4, 4)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.gelu(p[0]);
                scalarize(t, y)
            }),
        ),
        "exp" => (
            vec![(3, 3)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.exp(p[0]);
                scalarize(t, y)
            }),
        ),
        "sqrt" => (
            vec![(3, 3)],
            true,
            false,
            Box::new(|t, p| {
                let y = t.sqrt(p[0]);
                scalarize(t, y)
            }),
        ),
        "layer_norm" => (
            vec![(4, 6), (1, 6), (1, 6)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.layer_norm(p[0], p[1], p[2])?;
                scalarize(t, y)
            }),
        ),
        "softmax_rows" => (
            vec![(4, 5)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.softmax_rows(p[0]);
                scalarize(t, y)
            }),
        ),
        "log_softmax_rows" => (
            vec![(4, 5)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.log_softmax_rows(p[0]);
                scalarize(t, y)
            }),
        ),
        "l2_normalize_rows" => (
            vec![(4, 5)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.l2_normalize_rows(p[0]);
                scalarize(t, y)
            }),
        ),
        "row_sums" => (
            vec![(4, 5)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.row_sums(p[0]);
                scalarize(t, y)
            }),
        ),
        "sum_all" => (
            vec![(4, 5)],
            false,
            false,
            Box::new(|t, p| Ok(t.sum_all(p[0]))),
        ),
        "mean_all" => (
            vec![(4, 5)],
            false,
            false,
            Box::new(|t, p| Ok(t.mean_all(p[0]))),
        ),
        "stack_rows" => (
            vec![(2, 4), (3, 4)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.stack_rows(&[p[0], p[1]])?;
                scalarize(t, y)
            }),
        ),
        "stack_cols" => (
            vec![(3, 2), (3, 4)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.stack_cols(&[p[0], p[1]])?;
                scalarize(t, y)
            }),
        ),
        "slice_rows" => (
            vec![(5, 4)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.slice_rows(p[0], 1, 3)?;
                scalarize(t, y)
            }),
        ),
        "slice_cols" => (
            vec![(4, 6)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.slice_cols(p[0], 2, 3)?;
                scalarize(t, y)
            }),
        ),
        "gather_rows" => (
            vec![(4, 3)],
            false,
            false,
            Box::new(|t, p| {
                let y = t.gather_rows(p[0], &[2, 0, 2, 3])?;
                scalarize(t, y)
            }),
        ),
        other => {
            return Err(Error::UnsupportedOp(format!(
                "no gradient check registered for '{other}'"
            )))
        }
    };
    let params = random_params(&shapes, seed, positive, kink_safe);
    check_graph(name, &params, &*build)
}

/// Run the op-level suite for every supported op.
pub fn run_op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    op_names()
        .into_iter()
        .map(|name| check_op(name, crate::rng::derive_seed(seed, &[name.len() as u64])))
        .collect()
}

// ---------------------------------------------------------------------------
// Loss-level and composed-network checks
// ---------------------------------------------------------------------------

/// Finite-difference checks for every stage-2 loss and the stage-1
/// contrastive pair, on small 64-bit problems.
pub fn check_losses(seed: u64) -> Result<Vec<CheckReport>> {
    use crate::training::{
        cross_entropy, info_nce_losses, prototype_logits, triplet_loss_batch_hard,
    };
    let mut reports = Vec::new();
    let targets = [0usize, 0, 1, 1, 2, 2];
    let labels = [4u32, 4, 9, 9, 2, 2];

    let params = random_params(&[(6, 4)], seed, false, false);
    reports.push(check_graph("loss.id_cross_entropy", &params, &|t, p| {
        cross_entropy(t, p[0], &targets)
    })?);

    let params = random_params(&[(6, 5)], seed + 1, false, false);
    reports.push(check_graph("loss.triplet_batch_hard", &params, &|t, p| {
        triplet_loss_batch_hard(t, p[0], &labels, 0.4)
    })?);

    let params = random_params(&[(6, 4), (3, 4)], seed + 2, false, false);
    reports.push(check_graph("loss.prototype_ce", &params, &|t, p| {
        let logits = prototype_logits(t, p[0], p[1], 1.0 / 0.07)?;
        cross_entropy(t, logits, &targets)
    })?);

    let params = random_params(&[(6, 4), (3, 4), (1, 1)], seed + 3, false, false);
    reports.push(check_graph("loss.info_nce_i2t", &params, &|t, p| {
        let (i2t, _) = info_nce_losses(t, p[0], p[1], p[2], &targets)?;
        Ok(i2t)
    })?);
    reports.push(check_graph("loss.info_nce_t2i", &params, &|t, p| {
        let (_, t2i) = info_nce_losses(t, p[0], p[1], p[2], &targets)?;
        Ok(t2i)
    })?);
    Ok(reports)
}

/// Finite-difference check of a two-block encoder trained through all three
/// stage-2 losses at once: gradients w.r.t. the newest adapter tensors and
/// the classifier head.
pub fn check_encoder_composite(seed: u64) -> Result<CheckReport> {
    use crate::adapters::AdapterSite;
    use crate::encoder::{Encoder, EncoderConfig, TapeMode};
    use crate::selector::MixWeights;
    use crate::training::{cross_entropy, prototype_logits, triplet_loss_batch_hard};
    use rand::Rng;

    let cfg = EncoderConfig {
        blocks: 2,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        tokens: 2,
        patch_dim: 3,
        sites: vec![
            AdapterSite::Q,
            AdapterSite::K,
            AdapterSite::V,
            AdapterSite::Proj,
        ],
    };
    let mut encoder = Encoder::<f64>::seeded(cfg.clone(), seed)?;
    encoder.add_step_adapters(2, 8.0, seed + 1)?;
    let mut rng = crate::rng::rng_for(seed, &[91]);
    for refv in crate::training::newest_adapter_tensors_mut(&mut encoder) {
        for v in refv.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }

    let n = 8;
    let labels: Vec<u32> = (0..n as u32).map(|i| i / 2).collect();
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let batch = {
        let dim = cfg.sample_dim();
        Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?
    };
    let protos = Matrix::from_vec(4, cfg.d_model, (0..4 * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let mix: Vec<MixWeights> = (0..cfg.blocks)
        .map(|_| MixWeights::from_weights(vec![1.0]).unwrap())
        .collect();

    let build = |enc: &Encoder<f64>,
                 head_w: &Matrix<f64>,
                 head_b: &Matrix<f64>|
     -> Result<(Tape<f64>, NodeId, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let out = enc.encode_on_tape(&mut tape, &batch, &TapeMode::TrainNewestAdapter {
            per_block_mix: &mix,
        })?;
        let protos_node = tape.constant(protos.clone());
        let logits = prototype_logits(&mut tape, out.features, protos_node, 1.0 / 0.07)?;
        let l_proto = cross_entropy(&mut tape, logits, &targets)?;
        let l_tri = triplet_loss_batch_hard(&mut tape, out.features, &labels, 0.3)?;
        let hw = tape.param(head_w.clone());
        let hb = tape.param(head_b.clone());
        let hwt = tape.transpose(hw);
        let id_logits = tape.matmul(out.features, hwt)?;
        let id_logits = tape.add_row_vec(id_logits, hb)?;
        let l_id = cross_entropy(&mut tape, id_logits, &targets)?;
        let s1 = tape.add(l_proto, l_tri)?;
        let loss = tape.add(s1, l_id)?;
        let mut param_ids: Vec<NodeId> = out.params.iter().map(|(_, id)| *id).collect();
        param_ids.push(hw);
        param_ids.push(hb);
        Ok((tape, loss, param_ids))
    };

    let head_w = Matrix::from_vec(4, cfg.d_model, (0..4 * cfg.d_model).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
    let head_b = Matrix::zeros(1, 4);

    // analytic gradients
    let (tape, loss, param_ids) = build(&encoder, &head_w, &head_b)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix<f64>> = param_ids.iter().map(|&id| grads.get(id, &tape)).collect();

    // numeric: re-run the forward with perturbed parameter values
    let mut current: Vec<Matrix<f64>> = {
        let mut enc = encoder.clone();
        let mut vals: Vec<Matrix<f64>> = crate::training::newest_adapter_tensors_mut(&mut enc)
            .into_iter()
            .map(|m| m.clone())
            .collect();
        vals.push(head_w.clone());
        vals.push(head_b.clone());
        vals
    };
    let n_enc_params = current.len() - 2;
    let mut eval = |vals: &[Matrix<f64>]| -> Result<f64> {
        let mut enc = encoder.clone();
        for (slot, v) in crate::training::newest_adapter_tensors_mut(&mut enc)
            .into_iter()
            .zip(&vals[..n_enc_params])
        {
            *slot = v.clone();
        }
        let (tape, loss, _) = build(&enc, &vals[n_enc_params], &vals[n_enc_params + 1])?;
        tape.scalar_value(loss)
    };
    let numeric = finite_diff_grads(&mut eval, &mut current, FD_STEP)?;

    let max_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| grad_error(a, n))
        .fold(0.0, f64::max);
    Ok(CheckReport::from_err("encoder.two_block_all_losses", max_err))
}

/// The complete verification suite: every op, every loss, and the composed
/// two-block encoder.
pub fn run_full_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = run_op_suite(seed)?;
    reports.extend(check_losses(seed + 1000)?);
    reports.push(check_encoder_composite(seed + 2000)?);
    Ok(reports)
}
