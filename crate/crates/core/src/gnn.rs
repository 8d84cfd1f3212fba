//! Geometric graph encoder: multi-head attention message passing where keys
//! and messages see both the neighbour state and the pair (edge) features.
//!
//! Edge features are held densely as an `L*L x d_e` matrix (row `i*L + j` is
//! `e_ij`, the diagonal rows are zero). Per head the score is
//! `q_i . (W_kh h_j + W_ke e_ij) / sqrt(d_head)`, evaluated as
//! `Q Kᵀ + pair_score(Q W_keᵀ, E)` so the pair term costs `L² d_e`.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::protein_io::StructureGraph;

/// Per-node neighbour lists, sorted ascending, never containing the node itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn new(mut lists: Vec<Vec<usize>>) -> Result<Self> {
        let l = lists.len();
        for (i, list) in lists.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if let Some(&j) = list.iter().find(|&&j| j >= l || j == i) {
                return Err(Error::InvalidArgument(format!("neighbour {j} of node {i} invalid for {l} nodes")));
            }
        }
        Ok(Self { lists })
    }

    /// Contact-graph neighbourhoods.
    pub fn from_graph(g: &StructureGraph) -> Self {
        Self { lists: g.neighbor_lists() }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    /// Attention mask: 1 on neighbours; an isolated node gets only itself.
    pub fn attention_mask(&self) -> Matrix {
        let l = self.len();
        let mut m = Matrix::zeros(l, l);
        for (i, list) in self.lists.iter().enumerate() {
            if list.is_empty() {
                m.row_mut(i)[i] = 1.0;
            }
            for &j in list {
                m.row_mut(i)[j] = 1.0;
            }
        }
        m
    }

    /// 1 on true neighbours only (self-fallback entries excluded).
    pub fn neighbor_mask(&self) -> Matrix {
        let l = self.len();
        let mut m = Matrix::zeros(l, l);
        for (i, list) in self.lists.iter().enumerate() {
            for &j in list {
                m.row_mut(i)[j] = 1.0;
            }
        }
        m
    }

    /// Relabels nodes: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let lists = perm
            .iter()
            .map(|&p| {
                let mut v: Vec<usize> = self.lists[p].iter().map(|&j| inv[j]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        Self { lists }
    }
}

/// Names of the tensors of GNN layer `layer`, with their `(rows, cols)` for width `d` and edge width `d_e`.
pub fn gnn_layer_shapes(layer: usize, d: usize, d_e: usize) -> Vec<(String, usize, usize)> {
    let p = format!("gnn.{layer}");
    vec![
        (format!("{p}.wq"), d, d),
        (format!("{p}.wkh"), d, d),
        (format!("{p}.wke"), d_e, d),
        (format!("{p}.wmh"), d, d),
        (format!("{p}.wme"), d_e, d),
        (format!("{p}.ws"), d, d),
        (format!("{p}.b"), 1, d),
    ]
}

struct LayerVars {
    wq: Var,
    wkh: Var,
    wke: Var,
    wmh: Var,
    wme: Var,
    ws: Var,
    b: Var,
}

fn bind_layer(tape: &mut Tape, params: &ParamStore, layer: usize) -> Result<LayerVars> {
    let p = format!("gnn.{layer}");
    let mut get = |s: &str| tape.param(params, &format!("{p}.{s}"));
    Ok(LayerVars { wq: get("wq")?, wkh: get("wkh")?, wke: get("wke")?, wmh: get("wmh")?, wme: get("wme")?, ws: get("ws")?, b: get("b")? })
}

fn check_inputs(tape: &Tape, h: Var, e: Var, nbrs: &Neighborhoods, heads: usize) -> Result<(usize, usize)> {
    let (l, d) = tape.shape(h);
    if nbrs.len() != l {
        return Err(Error::shape("gnn_layer", format!("{} neighbourhoods for {l} nodes", nbrs.len())));
    }
    if tape.shape(e).0 != l * l {
        return Err(Error::shape("gnn_layer", format!("edge tensor has {} rows, want {}", tape.shape(e).0, l * l)));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("gnn_layer", format!("{heads} heads do not divide width {d}")));
    }
    Ok((l, d / heads))
}

/// Per-head attention weights of layer `layer`; `bias` (if any) is added to the logits.
fn scores_on(
    tape: &mut Tape,
    v: &LayerVars,
    h: Var,
    e: Var,
    nbrs: &Neighborhoods,
    bias: Option<Var>,
    heads: usize,
    dh: usize,
) -> Vec<Var> {
    let q = tape.matmul(h, v.wq);
    let k = tape.matmul(h, v.wkh);
    let mask = nbrs.attention_mask();
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|hd| {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let wke = tape.slice_cols(v.wke, hd * dh, dh);
            let node = tape.matmul_transb(qh, kh);
            let qe = tape.matmul_transb(qh, wke);
            let pair = tape.pair_score(qe, e);
            let logits = tape.add(node, pair);
            let mut logits = tape.scale(logits, scale);
            if let Some(b) = bias {
                logits = tape.add(logits, b);
            }
            tape.softmax_rows(logits, Some(&mask))
        })
        .collect()
}

/// One message-passing layer on a tape. Returns the new states and per-head weights.
pub fn gnn_layer_on(
    tape: &mut Tape,
    params: &ParamStore,
    layer: usize,
    h: Var,
    e: Var,
    nbrs: &Neighborhoods,
    bias: Option<Var>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (_, dh) = check_inputs(tape, h, e, nbrs, heads)?;
    let v = bind_layer(tape, params, layer)?;
    if tape.shape(v.wq).0 != tape.shape(h).1 || tape.shape(v.wke).0 != tape.shape(e).1 {
        return Err(Error::shape("gnn_layer", "parameter widths do not match inputs"));
    }
    let alphas = scores_on(tape, &v, h, e, nbrs, bias, heads, dh);
    let m = tape.matmul(h, v.wmh);
    let parts: Vec<Var> = alphas
        .iter()
        .enumerate()
        .map(|(hd, &a)| {
            let mh = tape.slice_cols(m, hd * dh, dh);
            let node = tape.matmul(a, mh);
            let agg = tape.pair_aggregate(a, e);
            let wme = tape.slice_cols(v.wme, hd * dh, dh);
            let edge = tape.matmul(agg, wme);
            tape.add(node, edge)
        })
        .collect();
    let msg = tape.concat_cols(&parts);
    let selfp = tape.matmul(h, v.ws);
    let pre = tape.add(selfp, msg);
    let pre = tape.add_row(pre, v.b);
    Ok((tape.gelu(pre), alphas))
}

/// Input projection followed by one layer per entry of `nbrs`.
/// `biases[l]`, when present, is added to the layer-`l` attention logits.
pub fn gnn_encode_on(
    tape: &mut Tape,
    params: &ParamStore,
    h0: Var,
    e: Var,
    nbrs: &[Neighborhoods],
    biases: &[Option<Var>],
    heads: usize,
) -> Result<Var> {
    let w = tape.param(params, "gnn.in.w")?;
    let b = tape.param(params, "gnn.in.b")?;
    if tape.shape(w).0 != tape.shape(h0).1 {
        return Err(Error::shape("gnn_encode", "input projection width"));
    }
    let h = tape.matmul(h0, w);
    let mut h = tape.add_row(h, b);
    for (layer, nb) in nbrs.iter().enumerate() {
        let bias = biases.get(layer).copied().flatten();
        h = gnn_layer_on(tape, params, layer, h, e, nb, bias, heads)?.0;
    }
    Ok(h)
}

/// Attention weights of layer `layer` for node states `h`, one `L x L` matrix per head.
pub fn geometric_scores(
    h: &Matrix,
    e: &Matrix,
    nbrs: &Neighborhoods,
    params: &ParamStore,
    layer: usize,
    heads: usize,
) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let ev = tape.constant(e.clone());
    let (_, dh) = check_inputs(&tape, hv, ev, nbrs, heads)?;
    let v = bind_layer(&mut tape, params, layer)?;
    let alphas = scores_on(&mut tape, &v, hv, ev, nbrs, None, heads, dh);
    Ok(alphas.into_iter().map(|a| tape.value(a).clone()).collect())
}

/// Value-only layer; `bias`, when given, is added to every head's logits.
pub fn gnn_layer(
    h: &Matrix,
    e: &Matrix,
    nbrs: &Neighborhoods,
    bias: Option<&Matrix>,
    params: &ParamStore,
    layer: usize,
    heads: usize,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let ev = tape.constant(e.clone());
    let bv = bias.map(|b| tape.constant(b.clone()));
    let (out, _) = gnn_layer_on(&mut tape, params, layer, hv, ev, nbrs, bv, heads)?;
    Ok(tape.value(out).clone())
}

/// `H^G` from node features `h0` (`L x d_node`) over per-layer neighbourhoods.
pub fn gnn_encode(h0: &Matrix, e: &Matrix, nbrs: &[Neighborhoods], params: &ParamStore, heads: usize) -> Result<Matrix> {
    let mut tape = Tape::new();
    let hv = tape.constant(h0.clone());
    let ev = tape.constant(e.clone());
    let out = gnn_encode_on(&mut tape, params, hv, ev, nbrs, &[], heads)?;
    Ok(tape.value(out).clone())
}
