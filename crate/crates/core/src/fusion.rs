//! Mutation-site aggregation of both encoders and the three-layer regression head.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Tape, Var, Vector};
use crate::protein_io::MutationRecord;

/// Width of the relative-position encoding in the mutation block.
pub const POS_DIM: usize = 16;
pub const DEFAULT_WINDOW: usize = 3;

/// Sinusoids of `x = p / L` at frequencies `2^k * pi`, `k = 0..8`, interleaved sin/cos.
pub fn position_encoding(x: f64) -> Vec<f64> {
    (0..POS_DIM / 2)
        .flat_map(|k| {
            let a = (1u32 << k) as f64 * PI * x;
            [a.sin(), a.cos()]
        })
        .collect()
}

/// 0-based rows of the window `max(1, p-w) ..= min(L, p+w)` around 1-based `p`.
pub fn window_rows(position: usize, len: usize, w: usize) -> Result<Vec<usize>> {
    if position == 0 || position > len {
        return Err(Error::PositionOutOfRange { position, len });
    }
    let lo = position.saturating_sub(w).max(1);
    let hi = (position + w).min(len);
    Ok((lo - 1..hi).collect())
}

/// `(name, rows, cols)` for fusion projections and head at width `d`, embedding width `d_a`.
pub fn fusion_shapes(d: usize, d_a: usize) -> Vec<(String, usize, usize)> {
    let (h1, h2) = head_widths(d);
    [
        ("fusion.local.w", 2 * d, d),
        ("fusion.local.b", 1, d),
        ("fusion.global.w", 2 * d, d),
        ("fusion.global.b", 1, d),
        ("fusion.mut.w", 2 * d_a + POS_DIM, d),
        ("fusion.mut.b", 1, d),
        ("head.w1", 3 * d, h1),
        ("head.b1", 1, h1),
        ("head.w2", h1, h2),
        ("head.b2", 1, h2),
        ("head.w3", h2, 1),
        ("head.b3", 1, 1),
    ]
    .into_iter()
    .map(|(n, r, c)| (n.to_string(), r, c))
    .collect()
}

/// Hidden widths `3d -> 3d/2 -> 3d/4 -> 1` (768 -> 384 -> 192 at d = 256).
pub fn head_widths(d: usize) -> (usize, usize) {
    ((3 * d).div_ceil(2), (3 * d).div_ceil(4))
}

fn affine(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    if tape.shape(w).0 != tape.shape(x).1 {
        return Err(Error::shape("fusion", format!("{prefix}: input width {} vs {}", tape.shape(x).1, tape.shape(w).0)));
    }
    let y = tape.matmul(x, w);
    Ok(tape.add_row(y, b))
}

/// `[P_local h_local; P_global h_global; P_mut h_mut]` as a `1 x 3d` row.
pub fn aggregate_on(tape: &mut Tape, params: &ParamStore, hg: Var, ht: Var, m: &MutationRecord, window: usize) -> Result<Var> {
    let (l, d) = tape.shape(hg);
    if tape.shape(ht) != (l, d) {
        return Err(Error::shape("aggregate", format!("H^G {:?} vs H^T {:?}", (l, d), tape.shape(ht))));
    }
    let rows = window_rows(m.position, l, window)?;
    let both = tape.concat_cols(&[hg, ht]);
    let local = tape.mean_rows(both, &rows);
    let local = affine(tape, params, "fusion.local", local)?;

    let gmax = tape.col_max(hg);
    let tmean = tape.col_mean(ht);
    let global = tape.concat_cols(&[gmax, tmean]);
    let global = affine(tape, params, "fusion.global", global)?;

    let table = tape.param(params, "embed.aa")?;
    let wt = tape.gather_rows(table, &[m.wt.index()]);
    let mt = tape.gather_rows(table, &[m.mutant.index()]);
    let pos = tape.constant(Matrix::row_vector(&position_encoding(m.position as f64 / l as f64)));
    let mu = tape.concat_cols(&[wt, mt, pos]);
    let mu = affine(tape, params, "fusion.mut", mu)?;
    Ok(tape.concat_cols(&[local, global, mu]))
}

/// `w3ᵀ Dropout(GELU(W2 GELU(W1 h + b1) + b2)) + b3`; dropout only when `rng` is given.
pub fn predict_head_on<R: Rng + ?Sized>(tape: &mut Tape, params: &ParamStore, h: Var, dropout: f64, rng: Option<&mut R>) -> Result<Var> {
    let g = |tape: &mut Tape, n: &str| tape.param(params, n);
    let (w1, b1, w2, b2, w3, b3) = (g(tape, "head.w1")?, g(tape, "head.b1")?, g(tape, "head.w2")?, g(tape, "head.b2")?, g(tape, "head.w3")?, g(tape, "head.b3")?);
    if tape.shape(w1).0 != tape.shape(h).1 {
        return Err(Error::shape("predict_head", format!("input width {} vs {}", tape.shape(h).1, tape.shape(w1).0)));
    }
    let z = tape.matmul(h, w1);
    let z = tape.add_row(z, b1);
    let z = tape.gelu(z);
    let z = tape.matmul(z, w2);
    let z = tape.add_row(z, b2);
    let mut z = tape.gelu(z);
    if let Some(r) = rng {
        z = tape.dropout(z, dropout, r);
    }
    let y = tape.matmul(z, w3);
    Ok(tape.add(y, b3))
}

pub fn aggregate(hg: &Matrix, ht: &Matrix, m: &MutationRecord, params: &ParamStore, window: usize) -> Result<Vector> {
    let mut tape = Tape::new();
    let g = tape.constant(hg.clone());
    let t = tape.constant(ht.clone());
    let out = aggregate_on(&mut tape, params, g, t, m, window)?;
    Ok(Vector(tape.value(out).row(0).to_vec()))
}

/// Scalar ddG from a fused `3d` vector. `rng` is only consumed when `training`.
pub fn predict_head<R: Rng + ?Sized>(h: &Vector, params: &ParamStore, training: bool, dropout: f64, rng: &mut R) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.to_row());
    let out = predict_head_on(&mut tape, params, hv, dropout, if training { Some(rng) } else { None })?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_param_gradients, gelu_scalar, xavier_uniform, ParamKind};
    use crate::protein_io::AminoAcid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(p: usize, wt: char, mt: char) -> MutationRecord {
        MutationRecord {
            structure_id: "t".into(),
            position: p,
            wt: AminoAcid::from_char(wt).unwrap(),
            mutant: AminoAcid::from_char(mt).unwrap(),
            ddg: None,
        }
    }

    fn store(d: usize, d_a: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("embed.aa", ParamKind::Embedding, xavier_uniform(20, d_a, &mut rng));
        for (n, r, c) in fusion_shapes(d, d_a) {
            let v = if r == 1 { Matrix::from_fn(1, c, |_, _| rng.random_range(-0.1..0.1)) } else { xavier_uniform(r, c, &mut rng) };
            s.insert(n, if r == 1 { ParamKind::Bias } else { ParamKind::Weight }, v);
        }
        s
    }

    #[test]
    fn window_edges() {
        assert_eq!(window_rows(1, 1, 3).unwrap(), vec![0]);
        assert_eq!(window_rows(1, 10, 3).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(window_rows(10, 10, 3).unwrap(), vec![6, 7, 8, 9]);
        assert_eq!(window_rows(5, 10, 1).unwrap(), vec![3, 4, 5]);
        assert!(matches!(window_rows(11, 10, 3), Err(Error::PositionOutOfRange { position: 11, len: 10 })));
        assert!(window_rows(0, 10, 3).is_err());
    }

    #[test]
    fn head_widths_match_reference_profile() {
        assert_eq!(head_widths(256), (384, 192));
        assert_eq!(head_widths(32), (48, 24));
    }

    #[test]
    fn single_residue_window() {
        let p = store(2, 2, 1);
        let hg = Matrix::from_rows(&[[0.4, -0.3]]);
        let ht = Matrix::from_rows(&[[1.0, 2.0]]);
        let out = aggregate(&hg, &ht, &record(1, 'A', 'V'), &p, 3).unwrap();
        let w = p.get("fusion.local.w").unwrap();
        let b = p.get("fusion.local.b").unwrap();
        let x = [0.4, -0.3, 1.0, 2.0];
        for c in 0..2 {
            let want: f64 = (0..4).map(|k| x[k] * w[(k, c)]).sum::<f64>() + b[(0, c)];
            assert!((out.0[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_encoders_leave_biases_and_mutation_block() {
        let p = store(3, 2, 2);
        let z = Matrix::zeros(4, 3);
        let m = record(2, 'G', 'W');
        let out = aggregate(&z, &z, &m, &p, 3).unwrap();
        let lb = p.get("fusion.local.b").unwrap();
        let gb = p.get("fusion.global.b").unwrap();
        for c in 0..3 {
            assert_eq!(out.0[c], lb[(0, c)]);
            assert_eq!(out.0[3 + c], gb[(0, c)]);
        }
        let emb = p.get("embed.aa").unwrap();
        let mut hm = emb.row(m.wt.index()).to_vec();
        hm.extend_from_slice(emb.row(m.mutant.index()));
        hm.extend(position_encoding(0.5));
        let want = Matrix::row_vector(&hm).matmul(p.get("fusion.mut.w").unwrap()).unwrap();
        for c in 0..3 {
            assert!((out.0[6 + c] - want[(0, c)] - p.get("fusion.mut.b").unwrap()[(0, c)]).abs() < 1e-14);
        }
    }

    #[test]
    fn three_residue_hand_pooling() {
        // d = 2, w = 1, p = 2: window is all three rows. Identity projections expose the pooled vectors.
        let mut p = store(2, 2, 3);
        let mut local = Matrix::zeros(4, 2);
        local[(0, 0)] = 1.0; // first HG column
        local[(3, 1)] = 1.0; // second HT column
        *p.get_mut("fusion.local.w").unwrap() = local.clone();
        *p.get_mut("fusion.global.w").unwrap() = local;
        *p.get_mut("fusion.local.b").unwrap() = Matrix::zeros(1, 2);
        *p.get_mut("fusion.global.b").unwrap() = Matrix::zeros(1, 2);
        let hg = Matrix::from_rows(&[[1.0, 0.0], [4.0, 0.0], [-2.0, 0.0]]);
        let ht = Matrix::from_rows(&[[0.0, 3.0], [0.0, 6.0], [0.0, 0.0]]);
        let out = aggregate(&hg, &ht, &record(2, 'A', 'C'), &p, 1).unwrap();
        assert_eq!(&out.0[..4], &[1.0, 3.0, 4.0, 3.0]); // mean HG0 = 1, mean HT1 = 3, max HG0 = 4, mean HT1 = 3
    }

    #[test]
    fn rows_outside_window_do_not_touch_local_block() {
        let p = store(3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hg = Matrix::from_fn(9, 3, |_, _| rng.random_range(-1.0..1.0));
        let ht = Matrix::from_fn(9, 3, |_, _| rng.random_range(-1.0..1.0));
        let m = record(5, 'A', 'V');
        let base = aggregate(&hg, &ht, &m, &p, 1).unwrap();
        let inside = window_rows(5, 9, 1).unwrap();
        let zero = |h: &Matrix| Matrix::from_fn(9, 3, |i, j| if inside.contains(&i) { h[(i, j)] } else { 0.0 });
        let cut = aggregate(&zero(&hg), &zero(&ht), &m, &p, 1).unwrap();
        assert_eq!(&base.0[..3], &cut.0[..3]);
    }

    #[test]
    fn constant_head() {
        let mut p = store(2, 2, 5);
        for (n, _) in p.clone().iter() {
            if n.starts_with("head.") {
                let m = p.get_mut(n).unwrap();
                *m = Matrix::zeros(m.rows(), m.cols());
            }
        }
        *p.get_mut("head.b3").unwrap() = Matrix::scalar(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = predict_head(&Vector(vec![3.0, -1.0, 0.5, 2.0, 9.0, 1.0]), &p, false, 0.1, &mut rng).unwrap();
        assert_eq!(y, 1.5);
    }

    #[test]
    fn inference_head_is_deterministic() {
        let p = store(4, 2, 6);
        let h = Vector((0..12).map(|k| (k as f64).sin()).collect());
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(predict_head(&h, &p, false, 0.5, &mut r1).unwrap(), predict_head(&h, &p, false, 0.5, &mut r2).unwrap());
    }

    #[test]
    fn two_unit_hand_head() {
        // Hand-set head on a 6-wide input with hidden widths 3 and 2 (d = 2) built directly.
        let mut p = ParamStore::new();
        let put = |p: &mut ParamStore, n: &str, m: Matrix| p.insert(n, ParamKind::Weight, m);
        let mut w1 = Matrix::zeros(6, 3);
        w1[(0, 0)] = 1.0;
        w1[(1, 1)] = -1.0;
        put(&mut p, "head.w1", w1);
        put(&mut p, "head.b1", Matrix::row_vector(&[0.0, 0.0, 0.5]));
        put(&mut p, "head.w2", Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]));
        put(&mut p, "head.b2", Matrix::zeros(1, 2));
        put(&mut p, "head.w3", Matrix::from_rows(&[[2.0], [-1.0]]));
        put(&mut p, "head.b3", Matrix::scalar(0.25));
        let h = Vector(vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let z1 = [gelu_scalar(1.0), gelu_scalar(-2.0), gelu_scalar(0.5)];
        let z2 = [gelu_scalar(z1[0] + z1[2]), gelu_scalar(z1[1] + z1[2])];
        let want = 2.0 * z2[0] - z2[1] + 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((predict_head(&h, &p, false, 0.1, &mut rng).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn aggregate_and_head_gradients() {
        let p = store(4, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hg = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let ht = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let m = record(2, 'K', 'E');
        let report = check_param_gradients(&p, None, 1e-6, 1e-8, |t, ps| {
            let g = t.constant(hg.clone());
            let h = t.constant(ht.clone());
            let f = aggregate_on(t, ps, g, h, &m, 3)?;
            let y = predict_head_on::<ChaCha8Rng>(t, ps, f, 0.0, None)?;
            Ok(t.mul(y, y))
        })
        .unwrap();
        for g in report {
            assert!(g.rel_err < 1e-5, "{}: {:e}", g.name, g.rel_err);
        }
    }
}
