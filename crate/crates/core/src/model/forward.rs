use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Coupling, ModelConfig};
use super::params::l2_penalty;
use crate::diffusion::{beta_on, diffuse_attention_on, diffuse_graph_on, diffused_neighborhoods, gamma_on, pseudo_graph_on};
use crate::error::{Error, Result};
use crate::fusion::{aggregate_on, predict_head_on};
use crate::gnn::{gnn_layer_on, Neighborhoods};
use crate::numerics::{Matrix, ParamKind, ParamStore, Tape, Var};
use crate::par;
use crate::protein_io::{
    build_contact_graph, edge_features_on, node_features_on, pair_raw_features, AminoAcid, Dataset, MutationRecord, Structure,
};
use crate::transformer::{apply_attention_on, attention_step_on, embed_tokens_on};

/// Per-structure constants: normalised contact affinity and raw pair features.
#[derive(Clone, Debug)]
pub struct PreparedStructure {
    pub structure: Structure,
    pub sequence: Vec<AminoAcid>,
    pub s_norm: Matrix,
    pub raw_pairs: Matrix,
}

impl PreparedStructure {
    pub fn new(structure: &Structure, cfg: &ModelConfig) -> Result<Self> {
        let graph = build_contact_graph(structure, &cfg.graph)?;
        Ok(Self {
            sequence: structure.sequence(),
            s_norm: graph.normalized,
            raw_pairs: pair_raw_features(structure, &cfg.features)?,
            structure: structure.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Prepares every structure of `data` (in parallel when enabled).
pub fn prepare_dataset(data: &Dataset, cfg: &ModelConfig) -> Result<BTreeMap<String, PreparedStructure>> {
    let items: Vec<(&String, &Structure)> = data.structures.iter().collect();
    let prepared = par::map_range(items.len(), |i| PreparedStructure::new(items[i].1, cfg));
    items.iter().zip(prepared).map(|((id, _), p)| Ok(((*id).clone(), p?))).collect()
}

/// One training or evaluation input.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub prep: &'a PreparedStructure,
    pub record: &'a MutationRecord,
    pub target: f64,
}

/// Resolves every record of `data` against prepared structures. Records without `ddg` get target 0.
pub fn examples<'a>(data: &'a Dataset, prepared: &'a BTreeMap<String, PreparedStructure>) -> Result<Vec<Example<'a>>> {
    data.records
        .iter()
        .map(|r| {
            let prep = prepared
                .get(&r.structure_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no structure {:?}", r.structure_id)))?;
            Ok(Example { prep, record: r, target: r.ddg.unwrap_or(0.0) })
        })
        .collect()
}

/// Tape handles of one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attention: Vec<Var>,
    pub diffused: Vec<Var>,
    pub beta: Option<Var>,
    pub gamma: Option<Var>,
    pub s_diff: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub prediction: Var,
    pub layers: Vec<LayerVars>,
}

/// Values of one transformer layer after a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    /// Native per-head attention.
    pub attention: Vec<Matrix>,
    /// Structure-guided attention actually applied, per head.
    pub diffused: Vec<Matrix>,
    /// 0 when diffusion is bypassed.
    pub beta: f64,
    pub gamma: Option<f64>,
    pub s_diff: Option<Matrix>,
    /// `||A(t) - A(t-1)||_F` (all heads) for `t = 1..=T`; empty when bypassed.
    pub residual_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub layers: Vec<LayerState>,
}

impl AttentionState {
    pub fn betas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.beta).collect()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.layers.iter().filter_map(|l| l.gamma).collect()
    }
}

fn rate_var(tape: &mut Tape, v: f64) -> Var {
    tape.constant(Matrix::scalar(v))
}

/// Full forward pass on a tape. Dropout is active iff `rng` is given.
pub fn forward_on(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    prep: &PreparedStructure,
    record: &MutationRecord,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardVars> {
    record.validate_against(&prep.structure)?;
    let dc = &cfg.diffusion;
    let s_norm = tape.constant(prep.s_norm.clone());

    // Sequence stack, producing the diffused artifacts consumed by the GNN.
    let mut x = embed_tokens_on(tape, params, &prep.sequence)?;
    let mut layers = Vec::with_capacity(cfg.tr_layers);
    for l in 0..cfg.tr_layers {
        let step = attention_step_on(tape, params, l, x, cfg.heads)?;
        let beta = match cfg.coupling {
            Coupling::Bypass => None,
            Coupling::Learned => Some(beta_on(tape, params, l, cfg.tr_layers, &step.attn, dc)?),
            Coupling::Fixed { beta, .. } => Some(rate_var(tape, beta)),
        };
        let diffused: Vec<Var> = step
            .attn
            .iter()
            .map(|&a| match beta {
                None => tape.row_normalize(a),
                Some(b) => {
                    let ad = diffuse_attention_on(tape, a, s_norm, b, dc.steps);
                    tape.row_normalize(ad)
                }
            })
            .collect();
        let (gamma, s_diff) = if l >= cfg.couplings() {
            (None, None)
        } else if cfg.coupling == Coupling::Bypass {
            (None, Some(s_norm))
        } else {
            let g = pseudo_graph_on(tape, &diffused, dc.tau, dc.self_loops)?;
            let gamma = match cfg.coupling {
                Coupling::Fixed { gamma, .. } => rate_var(tape, gamma),
                _ => gamma_on(tape, params, l)?,
            };
            (Some(gamma), Some(diffuse_graph_on(tape, s_norm, g, gamma, dc.steps)))
        };
        x = apply_attention_on(tape, params, l, x, &step, &diffused, cfg.dropout, rng.as_deref_mut())?;
        layers.push(LayerVars { attention: step.attn, diffused, beta, gamma, s_diff });
    }
    let ht = x;

    // Structure stack: layer g reads the diffused graph of interaction min(g, last).
    let s_diffs: Vec<Var> = layers.iter().filter_map(|l| l.s_diff).collect();
    let h0 = node_features_on(tape, params, &prep.structure)?;
    let e = edge_features_on(tape, params, &prep.raw_pairs, prep.len())?;
    let w = tape.param(params, "gnn.in.w")?;
    let b = tape.param(params, "gnn.in.b")?;
    let h = tape.matmul(h0, w);
    let mut h = tape.add_row(h, b);
    let mut cached: Option<(Var, Neighborhoods, Var)> = None;
    for g in 0..cfg.gnn_layers {
        let sd = s_diffs.get(g.min(s_diffs.len().saturating_sub(1))).copied().unwrap_or(s_norm);
        if cached.as_ref().is_none_or(|c| c.0 != sd) {
            let nbrs = diffused_neighborhoods(tape.value(sd), dc.eps_nbr, dc.k_max);
            let bias = tape.log_masked(sd, &nbrs.neighbor_mask());
            cached = Some((sd, nbrs, bias));
        }
        let (_, nbrs, bias) = cached.as_ref().expect("set above");
        h = gnn_layer_on(tape, params, g, h, e, nbrs, Some(*bias), cfg.heads)?.0;
        if let Some(r) = rng.as_deref_mut() {
            h = tape.dropout(h, cfg.dropout, r);
        }
    }

    let fused = aggregate_on(tape, params, h, ht, record, cfg.window)?;
    let prediction = predict_head_on(tape, params, fused, cfg.dropout, rng)?;
    Ok(ForwardVars { prediction, layers })
}

fn step_norms(a0: &Matrix, s: &Matrix, beta: f64, steps: usize) -> Vec<f64> {
    let base = a0.scale(1.0 - beta);
    let mut x = a0.clone();
    (0..steps)
        .map(|_| {
            let sx = s.matmul(&x).expect("square operands");
            let next = Matrix::from_fn(x.rows(), x.cols(), |i, j| base[(i, j)] + beta * sx[(i, j)]);
            let d = next.sub(&x).expect("same shape").frobenius_norm();
            x = next;
            d
        })
        .collect()
}

/// Inference forward pass: the prediction and the attention/diffusion state.
pub fn forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    prep: &PreparedStructure,
    record: &MutationRecord,
) -> Result<(f64, AttentionState)> {
    let mut tape = Tape::new();
    let fv = forward_on(&mut tape, params, cfg, prep, record, None)?;
    let pred = tape.value(fv.prediction).item();
    if !pred.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    let vals = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
    let layers = fv
        .layers
        .iter()
        .map(|l| {
            let attention = vals(&l.attention);
            let beta = l.beta.map_or(0.0, |b| tape.value(b).item());
            let residual_norms = match l.beta {
                None => Vec::new(),
                Some(_) => {
                    let per_head: Vec<Vec<f64>> =
                        attention.iter().map(|a| step_norms(a, &prep.s_norm, beta, cfg.diffusion.steps)).collect();
                    (0..cfg.diffusion.steps).map(|t| per_head.iter().map(|r| r[t] * r[t]).sum::<f64>().sqrt()).collect()
                }
            };
            LayerState {
                diffused: vals(&l.diffused),
                beta,
                gamma: l.gamma.map(|g| tape.value(g).item()),
                s_diff: l.s_diff.map(|s| tape.value(s).clone()),
                residual_norms,
                attention,
            }
        })
        .collect();
    Ok((pred, AttentionState { layers }))
}

pub fn predict(params: &ParamStore, cfg: &ModelConfig, prep: &PreparedStructure, record: &MutationRecord) -> Result<f64> {
    let mut tape = Tape::new();
    let fv = forward_on(&mut tape, params, cfg, prep, record, None)?;
    Ok(tape.value(fv.prediction).item())
}

/// Mean squared error plus `lambda * sum ||W||^2` over weight matrices.
pub fn loss(preds: &[f64], targets: &[f64], params: &ParamStore, lambda: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != targets.len() {
        return Err(Error::shape("loss", format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64;
    Ok(mse + lambda * l2_penalty(params))
}

/// Dropout stream of sample `index` under batch seed `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// The whole regularised batch loss on a single tape (used for derivative checks).
pub fn loss_on(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[Example<'_>],
    dropout_seed: Option<u64>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    for (i, ex) in batch.iter().enumerate() {
        let mut rng = dropout_seed.map(|s| sample_rng(s, i));
        let fv = forward_on(tape, params, cfg, ex.prep, ex.record, rng.as_mut())?;
        let t = tape.constant(Matrix::scalar(ex.target));
        let r = tape.sub(fv.prediction, t);
        let sq = tape.mul(r, r);
        let term = tape.scale(sq, inv);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let mut total = total.expect("non-empty batch");
    if cfg.lambda > 0.0 {
        let names: Vec<String> =
            params.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(n, _)| n.to_string()).collect();
        for n in names {
            let w = tape.param(params, &n)?;
            let sq = tape.mul(w, w);
            let s = tape.sum(sq);
            let s = tape.scale(s, cfg.lambda);
            total = tape.add(total, s);
        }
    }
    Ok(total)
}

/// Batch loss and its gradient for every parameter.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    /// Regularised loss.
    pub loss: f64,
    pub mse: f64,
    pub predictions: Vec<f64>,
    pub grads: BTreeMap<String, Matrix>,
}

/// Per-sample tapes (parallel when enabled), reduced in sample order; the L2
/// term's gradient `2 lambda W` is added analytically.
pub fn gradients(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[Example<'_>],
    dropout_seed: Option<u64>,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_sample = par::map_range(batch.len(), |i| -> Result<(f64, BTreeMap<String, Matrix>)> {
        let ex = &batch[i];
        let mut tape = Tape::new();
        let mut rng = dropout_seed.map(|s| sample_rng(s, i));
        let fv = forward_on(&mut tape, params, cfg, ex.prep, ex.record, rng.as_mut())?;
        let pred = tape.value(fv.prediction).item();
        if !pred.is_finite() {
            return Err(Error::NonFinite(format!("prediction for {} position {}", ex.record.structure_id, ex.record.position)));
        }
        let seed = Matrix::scalar(2.0 * (pred - ex.target) / batch.len() as f64);
        let g = tape.backward_with(fv.prediction, seed);
        Ok((pred, tape.param_grads(&g)))
    });

    let mut grads: BTreeMap<String, Matrix> =
        params.iter().map(|(n, p)| (n.to_string(), Matrix::zeros(p.value.rows(), p.value.cols()))).collect();
    let mut predictions = Vec::with_capacity(batch.len());
    for r in per_sample {
        let (pred, g) = r?;
        predictions.push(pred);
        for (name, gm) in g {
            let acc = grads.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            acc.add_assign(&gm);
        }
    }
    if cfg.lambda > 0.0 {
        for (name, p) in params.iter().filter(|(_, p)| p.kind == ParamKind::Weight) {
            let acc = grads.get_mut(name).expect("registered above");
            for (a, w) in acc.as_mut_slice().iter_mut().zip(p.value.as_slice()) {
                *a += 2.0 * cfg.lambda * w;
            }
        }
    }
    let targets: Vec<f64> = batch.iter().map(|e| e.target).collect();
    let mse = loss(&predictions, &targets, params, 0.0)?;
    Ok(BatchGradients { loss: mse + cfg.lambda * l2_penalty(params), mse, predictions, grads })
}
