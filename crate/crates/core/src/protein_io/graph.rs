use super::structure::Structure;
use crate::error::Result;
use crate::numerics::{sym_normalize, Matrix};

/// Contact-graph construction settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    /// Distance cutoff r_c in Angstrom.
    pub cutoff: f64,
    /// Affinity bandwidth sigma in Angstrom.
    pub sigma: f64,
    /// Put S_ii = 1 on the diagonal before normalizing.
    pub self_loops: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { cutoff: 10.0, sigma: 5.0, self_loops: true }
    }
}

/// Residue contact graph with its affinity matrices. Indices are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureGraph {
    pub len: usize,
    /// Unordered contacts as `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub dist: Matrix,
    /// Gaussian affinity `S`.
    pub affinity: Matrix,
    /// `D^{-1/2} S D^{-1/2}`.
    pub normalized: Matrix,
}

impl StructureGraph {
    /// Sorted contact lists per residue.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len];
        for &(i, j) in &self.edges {
            out[i].push(j);
            out[j].push(i);
        }
        for n in &mut out {
            n.sort_unstable();
        }
        out
    }

    pub fn contact_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.len];
        for &(i, j) in &self.edges {
            out[i] += 1;
            out[j] += 1;
        }
        out
    }
}

pub fn distance_matrix(s: &Structure) -> Matrix {
    let l = s.len();
    let mut d = Matrix::zeros(l, l);
    for i in 0..l {
        for j in i + 1..l {
            let v = s.distance(i, j);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Builds edges `d_ij < r_c`, affinities `exp(-d^2 / sigma^2)` and their normalization.
pub fn build_contact_graph(s: &Structure, cfg: &GraphConfig) -> Result<StructureGraph> {
    if !(cfg.cutoff > 0.0 && cfg.sigma > 0.0) {
        return Err(crate::Error::InvalidArgument(format!(
            "cutoff {} and sigma {} must be positive",
            cfg.cutoff, cfg.sigma
        )));
    }
    let l = s.len();
    let dist = distance_matrix(s);
    let mut edges = Vec::new();
    let mut affinity = Matrix::zeros(l, l);
    let inv_s2 = 1.0 / (cfg.sigma * cfg.sigma);
    for i in 0..l {
        if cfg.self_loops {
            affinity[(i, i)] = 1.0;
        }
        for j in i + 1..l {
            let d = dist[(i, j)];
            if d < cfg.cutoff {
                edges.push((i, j));
                let a = (-d * d * inv_s2).exp();
                affinity[(i, j)] = a;
                affinity[(j, i)] = a;
            }
        }
    }
    let normalized = sym_normalize(&affinity)?;
    Ok(StructureGraph { len: l, edges, dist, affinity, normalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protein_io::{parse_structure, synthesize_dataset, SyntheticSpec};
    use crate::numerics::spectral_radius;
    use crate::Error;

    fn two(d: f64) -> Structure {
        parse_structure(&format!("#dgs v1\n1\tA\t0\t0\t0\n2\tG\t{d}\t0\t0\n")).unwrap()
    }

    #[test]
    fn near_pair_has_one_edge() {
        let g = build_contact_graph(&two(3.8), &GraphConfig { cutoff: 10.0, sigma: 5.0, self_loops: true }).unwrap();
        assert_eq!(g.edges, vec![(0, 1)]);
        // exp(-3.8^2 / 25) = exp(-0.5776)
        assert!((g.affinity[(0, 1)] - (-0.5776f64).exp()).abs() < 1e-15);
        assert_eq!(g.affinity[(0, 0)], 1.0);
    }

    #[test]
    fn far_pair_has_no_edge() {
        let g = build_contact_graph(&two(12.0), &GraphConfig::default()).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.affinity[(0, 1)], 0.0);
        assert_eq!(g.normalized, Matrix::identity(2));
    }

    #[test]
    fn coincident_pair_has_unit_affinity() {
        let g = build_contact_graph(&two(0.0), &GraphConfig::default()).unwrap();
        assert_eq!(g.affinity[(0, 1)], 1.0);
    }

    #[test]
    fn isolated_residue_without_self_loops_fails() {
        let cfg = GraphConfig { self_loops: false, ..GraphConfig::default() };
        assert!(matches!(build_contact_graph(&two(12.0), &cfg), Err(Error::ZeroDegree(0))));
    }

    #[test]
    fn synthetic_graphs_are_symmetric_and_contractive() {
        let spec = SyntheticSpec { seed: 11, n_samples: 100, len_min: 8, len_max: 40, coupling: 1.0, noise_sd: 0.0 };
        let data = synthesize_dataset(&spec).unwrap();
        for s in data.structures.values() {
            let g = build_contact_graph(s, &GraphConfig::default()).unwrap();
            assert!(g.dist.is_symmetric(0.0));
            assert!((0..g.len).all(|i| g.dist[(i, i)] == 0.0));
            assert!(g.affinity.is_symmetric(0.0));
            assert!(g.normalized.is_symmetric(1e-15));
            for &(i, j) in &g.edges {
                assert!(i < j && g.dist[(i, j)] < 10.0 && g.affinity[(i, j)] > 0.0);
            }
            let rho = spectral_radius(&g.normalized, 10_000, 1e-12, 7).unwrap();
            assert!(rho <= 1.0 + 1e-8, "spectral radius {rho}");
        }
    }
}
