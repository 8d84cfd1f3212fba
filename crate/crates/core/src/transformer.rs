//! Sequence encoder: amino-acid embedding plus sinusoidal positions, then
//! pre-norm multi-head self-attention blocks whose attention matrices can be
//! replaced by externally supplied (diffused) ones.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::protein_io::{parse_sequence, AminoAcid};

pub const LN_EPS: f64 = 1e-5;
/// Tolerance on override row sums.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// `PE(p, 2i) = sin(p / 10000^(2i/d))`, `PE(p, 2i+1) = cos(...)`, positions `p = 1..=len`.
pub fn positional_encoding(len: usize, d: usize) -> Matrix {
    Matrix::from_fn(len, d, |r, c| {
        let p = (r + 1) as f64;
        let angle = p / 10000f64.powf((c - c % 2) as f64 / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn transformer_layer_shapes(layer: usize, d: usize, d_ffn: usize) -> Vec<(String, usize, usize)> {
    let p = format!("tr.{layer}");
    vec![
        (format!("{p}.ln1.g"), 1, d),
        (format!("{p}.ln1.b"), 1, d),
        (format!("{p}.wq"), d, d),
        (format!("{p}.wk"), d, d),
        (format!("{p}.wv"), d, d),
        (format!("{p}.wo"), d, d),
        (format!("{p}.bo"), 1, d),
        (format!("{p}.ln2.g"), 1, d),
        (format!("{p}.ln2.b"), 1, d),
        (format!("{p}.ffn.w1"), d, d_ffn),
        (format!("{p}.ffn.b1"), 1, d_ffn),
        (format!("{p}.ffn.w2"), d_ffn, d),
        (format!("{p}.ffn.b2"), 1, d),
    ]
}

pub fn embed_tokens_on(tape: &mut Tape, params: &ParamStore, seq: &[AminoAcid]) -> Result<Var> {
    let table = tape.param(params, "tr.embed")?;
    let idx: Vec<usize> = seq.iter().map(|a| a.index()).collect();
    let emb = tape.gather_rows(table, &idx);
    let pe = tape.constant(positional_encoding(seq.len(), tape.shape(table).1));
    Ok(tape.add(emb, pe))
}

/// `X⁰ = E_aa(s) + PE` for a one-letter sequence.
pub fn embed_tokens(seq: &str, params: &ParamStore) -> Result<Matrix> {
    let seq = parse_sequence(seq)?;
    let mut tape = Tape::new();
    let x = embed_tokens_on(&mut tape, params, &seq)?;
    Ok(tape.value(x).clone())
}

fn layer_norm_affine(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(params, &format!("{prefix}.g"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let n = tape.layer_norm_rows(x, LN_EPS);
    let n = tape.mul_row(n, g);
    Ok(tape.add_row(n, b))
}

fn head_width(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("transformer", format!("{heads} heads do not divide width {d}")));
    }
    Ok(d / heads)
}

/// Per-head `softmax(Q_h K_hᵀ / sqrt(d_k))` of `y` (already normalised input) for layer `layer`.
pub fn mhsa_scores_on(tape: &mut Tape, params: &ParamStore, layer: usize, y: Var, heads: usize) -> Result<Vec<Var>> {
    let wq = tape.param(params, &format!("tr.{layer}.wq"))?;
    let wk = tape.param(params, &format!("tr.{layer}.wk"))?;
    let d = tape.shape(y).1;
    if tape.shape(wq).0 != d {
        return Err(Error::shape("mhsa_scores", format!("input width {d} vs W_Q rows {}", tape.shape(wq).0)));
    }
    let dk = head_width(tape.shape(wq).1, heads)?;
    let q = tape.matmul(y, wq);
    let k = tape.matmul(y, wk);
    let scale = 1.0 / (dk as f64).sqrt();
    Ok((0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dk, dk);
            let kh = tape.slice_cols(k, h * dk, dk);
            let logits = tape.matmul_transb(qh, kh);
            let logits = tape.scale(logits, scale);
            tape.softmax_rows(logits, None)
        })
        .collect())
}

pub fn mhsa_scores(x: &Matrix, params: &ParamStore, layer: usize, heads: usize) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let y = tape.constant(x.clone());
    let a = mhsa_scores_on(&mut tape, params, layer, y, heads)?;
    Ok(a.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// First half of a block: pre-norm input and the native attention matrices.
pub struct AttentionStep {
    pub normed: Var,
    pub attn: Vec<Var>,
}

pub fn attention_step_on(tape: &mut Tape, params: &ParamStore, layer: usize, x: Var, heads: usize) -> Result<AttentionStep> {
    let normed = layer_norm_affine(tape, params, &format!("tr.{layer}.ln1"), x)?;
    let attn = mhsa_scores_on(tape, params, layer, normed, heads)?;
    Ok(AttentionStep { normed, attn })
}

/// Second half of a block: `attn`-weighted values, output projection, residual,
/// pre-norm FFN with residual. Dropout applies when `rng` is given.
pub fn apply_attention_on<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamStore,
    layer: usize,
    x: Var,
    step: &AttentionStep,
    attn: &[Var],
    dropout: f64,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let p = format!("tr.{layer}");
    let wv = tape.param(params, &format!("{p}.wv"))?;
    let wo = tape.param(params, &format!("{p}.wo"))?;
    let bo = tape.param(params, &format!("{p}.bo"))?;
    let dk = head_width(tape.shape(wv).1, attn.len())?;
    let v = tape.matmul(step.normed, wv);
    let ctx: Vec<Var> = attn
        .iter()
        .enumerate()
        .map(|(h, &a)| {
            let vh = tape.slice_cols(v, h * dk, dk);
            tape.matmul(a, vh)
        })
        .collect();
    let ctx = tape.concat_cols(&ctx);
    let o = tape.matmul(ctx, wo);
    let mut o = tape.add_row(o, bo);
    if let Some(r) = rng.as_deref_mut() {
        o = tape.dropout(o, dropout, r);
    }
    let x1 = tape.add(x, o);

    let y2 = layer_norm_affine(tape, params, &format!("{p}.ln2"), x1)?;
    let w1 = tape.param(params, &format!("{p}.ffn.w1"))?;
    let b1 = tape.param(params, &format!("{p}.ffn.b1"))?;
    let w2 = tape.param(params, &format!("{p}.ffn.w2"))?;
    let b2 = tape.param(params, &format!("{p}.ffn.b2"))?;
    let f = tape.matmul(y2, w1);
    let f = tape.add_row(f, b1);
    let f = tape.gelu(f);
    let f = tape.matmul(f, w2);
    let mut f = tape.add_row(f, b2);
    if let Some(r) = rng.as_deref_mut() {
        f = tape.dropout(f, dropout, r);
    }
    Ok(tape.add(x1, f))
}

/// Rejects override matrices that are not `L x L` row-stochastic.
pub fn check_override(a: &[Matrix], heads: usize, len: usize) -> Result<()> {
    if a.len() != heads {
        return Err(Error::shape("transformer_layer", format!("{} override heads, want {heads}", a.len())));
    }
    for m in a {
        if m.shape() != (len, len) {
            return Err(Error::shape("transformer_layer", format!("override is {:?}, want {len}x{len}", m.shape())));
        }
        for (row, s) in m.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > STOCHASTIC_TOL || m.row(row).iter().any(|&v| v < 0.0) {
                return Err(Error::NonStochasticOverride { row, sum: s });
            }
        }
    }
    Ok(())
}

/// One inference-mode block. Returns the new states and the attention actually used.
pub fn transformer_layer(
    x: &Matrix,
    a_override: Option<&[Matrix]>,
    params: &ParamStore,
    layer: usize,
    heads: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    if let Some(a) = a_override {
        check_override(a, heads, x.rows())?;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let step = attention_step_on(&mut tape, params, layer, xv, heads)?;
    let used: Vec<Var> = match a_override {
        Some(a) => a.iter().map(|m| tape.constant(m.clone())).collect(),
        None => step.attn.clone(),
    };
    let out = apply_attention_on::<rand_chacha::ChaCha8Rng>(&mut tape, params, layer, xv, &step, &used, 0.0, None)?;
    Ok((tape.value(out).clone(), used.iter().map(|&a| tape.value(a).clone()).collect()))
}

/// Embedding plus `layers` plain blocks (no diffusion).
pub fn transformer_encode(seq: &[AminoAcid], params: &ParamStore, layers: usize, heads: usize) -> Result<Matrix> {
    let mut tape = Tape::new();
    let mut x = embed_tokens_on(&mut tape, params, seq)?;
    for l in 0..layers {
        let step = attention_step_on(&mut tape, params, l, x, heads)?;
        let attn = step.attn.clone();
        x = apply_attention_on::<rand_chacha::ChaCha8Rng>(&mut tape, params, l, x, &step, &attn, 0.0, None)?;
    }
    Ok(tape.value(x).clone())
}
