//! Node and edge featurization. Learnable parts run on a [`Tape`] so their
//! parameters receive gradients; the geometric raw pair features are
//! constants computed once per structure.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::graph::StructureGraph;
use super::structure::{distance, Structure};
use crate::error::{Error, Result};
use crate::numerics::{rbf_expand, Matrix, ParamStore, Tape, Var, Vector};

/// Width of the optional per-residue scalar block.
pub const EXTRA_DIM: usize = 3;

/// Coordinate unit change (Angstrom to nanometre) applied before the coordinate encoder.
pub const COORD_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    /// Amino-acid embedding width.
    pub aa_dim: usize,
    /// Coordinate-encoder output width.
    pub coord_dim: usize,
    pub edge_dim: usize,
    pub rbf_count: usize,
    /// Distance RBF centers span `[0, rbf_max]` Angstrom.
    pub rbf_max: f64,
    pub rbf_gamma: f64,
    /// Angle RBF centers span `[0, pi]`.
    pub angle_count: usize,
    pub angle_gamma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            aa_dim: 32,
            coord_dim: 16,
            edge_dim: 16,
            rbf_count: 16,
            rbf_max: 20.0,
            rbf_gamma: 0.5,
            angle_count: 8,
            angle_gamma: 4.0,
        }
    }
}

impl FeatureConfig {
    pub fn node_dim(&self) -> usize {
        self.aa_dim + self.coord_dim + EXTRA_DIM
    }

    pub fn raw_edge_dim(&self) -> usize {
        self.rbf_count + 3 + self.angle_count
    }

    pub fn rbf_centers(&self) -> Vector {
        linspace(0.0, self.rbf_max, self.rbf_count)
    }

    pub fn angle_centers(&self) -> Vector {
        linspace(0.0, PI, self.angle_count)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vector {
    if n == 1 {
        return Vector(vec![lo]);
    }
    Vector((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect())
}

/// Centroid-centred coordinates in nanometres, `L x 3`.
pub fn centered_coords(s: &Structure) -> Matrix {
    let l = s.len() as f64;
    let mut c = [0.0; 3];
    for r in s.residues() {
        for k in 0..3 {
            c[k] += r.coord[k] / l;
        }
    }
    Matrix::from_fn(s.len(), 3, |i, k| (s.residues()[i].coord[k] - c[k]) * COORD_SCALE)
}

/// Optional scalars per residue, zeros where absent, `L x 3`.
pub fn extra_matrix(s: &Structure) -> Matrix {
    Matrix::from_fn(s.len(), EXTRA_DIM, |i, k| s.residues()[i].extra.map_or(0.0, |e| e.as_array()[k]))
}

/// Node features `[e_aa(s_i); MLP(r_i); f_i]` on the tape, `L x node_dim`.
pub fn node_features_on(tape: &mut Tape, params: &ParamStore, s: &Structure) -> Result<Var> {
    let table = tape.param(params, "embed.aa")?;
    let idx: Vec<usize> = s.residues().iter().map(|r| r.aa.index()).collect();
    let emb = tape.gather_rows(table, &idx);
    let coords = tape.constant(centered_coords(s));
    let coord = mlp2(tape, params, "coord", coords)?;
    let extra = tape.constant(extra_matrix(s));
    Ok(tape.concat_cols(&[emb, coord, extra]))
}

/// Value-only variant of [`node_features_on`].
pub fn node_features(s: &Structure, params: &ParamStore) -> Result<Matrix> {
    let mut tape = Tape::new();
    let v = node_features_on(&mut tape, params, s)?;
    Ok(tape.value(v).clone())
}

/// `GELU(x W1 + b1) W2 + b2` with parameters `{prefix}.w1` etc.
pub(crate) fn mlp2(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(params, &format!("{prefix}.w1"))?;
    let b1 = tape.param(params, &format!("{prefix}.b1"))?;
    let w2 = tape.param(params, &format!("{prefix}.w2"))?;
    let b2 = tape.param(params, &format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2);
    Ok(tape.add_row(o, b2))
}

/// Bond angle for a sequence-adjacent pair, in radians.
fn backbone_angle(s: &Structure, i: usize, j: usize) -> Option<f64> {
    let l = s.len() as isize;
    let (ii, jj) = (i as isize, j as isize);
    if (ii - jj).abs() != 1 {
        return None;
    }
    let step = jj - ii;
    let (vertex, a, b) = if (0..l).contains(&(jj + step)) {
        (j, i, (jj + step) as usize)
    } else if (0..l).contains(&(ii - step)) {
        (i, j, (ii - step) as usize)
    } else {
        return None;
    };
    let r = |k: usize| s.residues()[k].coord;
    let (p, q, v) = (r(a), r(b), r(vertex));
    let u = [p[0] - v[0], p[1] - v[1], p[2] - v[2]];
    let w = [q[0] - v[0], q[1] - v[1], q[2] - v[2]];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let nw = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if nu < 1e-9 || nw < 1e-9 {
        return None;
    }
    let cos = ((u[0] * w[0] + u[1] * w[1] + u[2] * w[2]) / (nu * nw)).clamp(-1.0, 1.0);
    Some(cos.acos())
}

/// Pre-MLP edge vector `[RBF(d_ij); v_ij; RBF(theta)]` for the ordered pair `(i, j)`.
pub fn pair_raw_vector(s: &Structure, i: usize, j: usize, cfg: &FeatureConfig) -> Result<Vector> {
    let (ri, rj) = (s.residues()[i].coord, s.residues()[j].coord);
    let d = distance(&ri, &rj);
    if d < 1e-9 {
        return Err(Error::DegenerateEdge(i, j));
    }
    let mut out = rbf_expand(d, &cfg.rbf_centers(), cfg.rbf_gamma).0;
    out.extend((0..3).map(|k| (rj[k] - ri[k]) / d));
    match backbone_angle(s, i, j) {
        Some(theta) => out.extend(rbf_expand(theta, &cfg.angle_centers(), cfg.angle_gamma).0),
        None => out.extend(std::iter::repeat_n(0.0, cfg.angle_count)),
    }
    Ok(Vector(out))
}

/// Raw features for every ordered pair as an `L*L x raw_edge_dim` matrix (row `i*L + j`);
/// diagonal rows are zero.
pub fn pair_raw_features(s: &Structure, cfg: &FeatureConfig) -> Result<Matrix> {
    let l = s.len();
    let mut out = Matrix::zeros(l * l, cfg.raw_edge_dim());
    for i in 0..l {
        for j in 0..l {
            if i != j {
                let v = pair_raw_vector(s, i, j, cfg)?;
                out.row_mut(i * l + j).copy_from_slice(v.as_slice());
            }
        }
    }
    Ok(out)
}

/// Learned edge features for every ordered pair (`L*L x edge_dim`); `e_ii = 0`.
pub fn edge_features_on(tape: &mut Tape, params: &ParamStore, raw: &Matrix, len: usize) -> Result<Var> {
    let x = tape.constant(raw.clone());
    let e = mlp2(tape, params, "edge", x)?;
    let width = tape.shape(e).1;
    let mask = Matrix::from_fn(len * len, width, |r, _| if r / len == r % len { 0.0 } else { 1.0 });
    let mask = tape.constant(mask);
    Ok(tape.mul(e, mask))
}

/// Learned edge features for both orientations of every contact in `g`.
pub fn edge_features(
    g: &StructureGraph,
    s: &Structure,
    cfg: &FeatureConfig,
    params: &ParamStore,
) -> Result<BTreeMap<(usize, usize), Vector>> {
    let raw = pair_raw_features(s, cfg)?;
    let mut tape = Tape::new();
    let e = edge_features_on(&mut tape, params, &raw, s.len())?;
    let ev = tape.value(e);
    let l = s.len();
    let mut out = BTreeMap::new();
    for &(i, j) in &g.edges {
        out.insert((i, j), Vector(ev.row(i * l + j).to_vec()));
        out.insert((j, i), Vector(ev.row(j * l + i).to_vec()));
    }
    Ok(out)
}
