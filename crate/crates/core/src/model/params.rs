use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Coupling, ModelConfig};
use crate::diffusion::{beta_logit_name, gamma_logit_name, initial_logit, B_BETA, W_BETA};
use crate::error::Result;
use crate::fusion::fusion_shapes;
use crate::gnn::gnn_layer_shapes;
use crate::numerics::{xavier_uniform, Matrix, ParamKind, ParamStore};
use crate::protein_io::ALPHABET;
use crate::transformer::transformer_layer_shapes;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
    pub init: Init,
}

/// Role of a tensor, inferred from its name.
fn classify(name: &str) -> (ParamKind, Init) {
    let last = name.rsplit('.').next().unwrap_or(name);
    if name == "embed.aa" || name == "tr.embed" {
        (ParamKind::Embedding, Init::Xavier)
    } else if name.contains(".ln") && last == "g" {
        (ParamKind::Bias, Init::Ones)
    } else if last.starts_with('b') {
        (ParamKind::Bias, Init::Zeros)
    } else {
        (ParamKind::Weight, Init::Xavier)
    }
}

/// Every tensor of the model, in initialisation order. Shapes depend on `cfg` alone.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let f = &cfg.features;
    let d = cfg.d;
    let mut shapes: Vec<(String, usize, usize)> = vec![
        ("embed.aa".into(), ALPHABET.len(), f.aa_dim),
        ("coord.w1".into(), 3, f.coord_dim),
        ("coord.b1".into(), 1, f.coord_dim),
        ("coord.w2".into(), f.coord_dim, f.coord_dim),
        ("coord.b2".into(), 1, f.coord_dim),
        ("edge.w1".into(), f.raw_edge_dim(), f.edge_dim),
        ("edge.b1".into(), 1, f.edge_dim),
        ("edge.w2".into(), f.edge_dim, f.edge_dim),
        ("edge.b2".into(), 1, f.edge_dim),
        ("gnn.in.w".into(), f.node_dim(), d),
        ("gnn.in.b".into(), 1, d),
    ];
    for l in 0..cfg.gnn_layers {
        shapes.extend(gnn_layer_shapes(l, d, f.edge_dim));
    }
    shapes.push(("tr.embed".into(), ALPHABET.len(), d));
    for l in 0..cfg.tr_layers {
        shapes.extend(transformer_layer_shapes(l, d, cfg.d_ffn));
    }
    shapes.extend(fusion_shapes(d, f.aa_dim));

    let mut specs: Vec<ParamSpec> = shapes
        .into_iter()
        .map(|(name, rows, cols)| {
            let (kind, init) = classify(&name);
            ParamSpec { name, rows, cols, kind, init }
        })
        .collect();

    if cfg.coupling == Coupling::Learned && cfg.tr_layers > 0 {
        let (beta0, gamma0) = cfg.diffusion.clamped_inits();
        let diff = |name: String, rows, cols, init| ParamSpec { name, rows, cols, kind: ParamKind::Diffusion, init };
        if cfg.diffusion.kernel_enabled {
            specs.push(diff(W_BETA.into(), 1, 2, Init::Zeros));
            specs.push(diff(B_BETA.into(), 1, 1, Init::Constant(initial_logit(beta0))));
        } else {
            for l in 0..cfg.tr_layers {
                specs.push(diff(beta_logit_name(l), 1, 1, Init::Constant(initial_logit(beta0))));
            }
        }
        for l in 0..cfg.couplings() {
            specs.push(diff(gamma_logit_name(l), 1, 1, Init::Constant(initial_logit(gamma0))));
        }
    }
    specs
}

/// Xavier-uniform weights and embeddings, zero biases, unit layer-norm gains,
/// diffusion logits at the initial rates. Deterministic in `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for s in param_specs(cfg) {
        let value = match s.init {
            Init::Xavier => xavier_uniform(s.rows, s.cols, &mut rng),
            Init::Zeros => Matrix::zeros(s.rows, s.cols),
            Init::Ones => Matrix::filled(s.rows, s.cols, 1.0),
            Init::Constant(v) => Matrix::filled(s.rows, s.cols, v),
        };
        store.insert(s.name, s.kind, value);
    }
    Ok(store)
}

/// `sum ||W||_F^2` over weight matrices; biases, embeddings and diffusion logits excluded.
pub fn l2_penalty(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(_, p)| p.value.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum()
}
