use std::collections::BTreeMap;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamKind, ParamStore};

/// AdamW moments and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn global_norm(grads: &BTreeMap<String, Matrix>) -> f64 {
    grads.values().flat_map(|g| g.as_slice()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Clips to `clip_norm` (global norm), updates bias-corrected moments, then applies
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`; the decay term only
/// touches weight matrices. Returns the pre-clip gradient norm.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Matrix>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::shape("optimizer_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::shape("optimizer_step", format!("no gradient for {name}")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::shape("optimizer_step", format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.value.shape())));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let (rows, cols) = g.shape();
        let m = state.m.entry(name.to_string()).or_insert_with(|| Matrix::zeros(rows, cols));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Matrix::zeros(rows, cols));
        let wd = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        let it = p.value.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
        for ((theta, &gi), (mi, vi)) in it {
            let gi = gi * scale;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            *theta -= cfg.lr * (update + wd * *theta);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(kind: ParamKind, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", kind, Matrix::scalar(v));
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Matrix> {
        BTreeMap::from([("x".to_string(), Matrix::scalar(v))])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = one(ParamKind::Weight, 0.7);
        let mut st = AdamState::new();
        for _ in 0..3 {
            optimizer_step(&mut p, &grad(0.0), &mut st, &cfg).unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_is_a_unit_step() {
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.0, clip_norm: 10.0, ..TrainConfig::default() };
        let mut p = one(ParamKind::Weight, 0.0);
        optimizer_step(&mut p, &grad(1.0), &mut AdamState::new(), &cfg).unwrap();
        // m_hat = 1, v_hat = 1
        assert!((p.get("x").unwrap().item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_the_threshold() {
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.0, clip_norm: 1.0, ..TrainConfig::default() };
        let mut p = ParamStore::new();
        p.insert("a", ParamKind::Weight, Matrix::scalar(0.0));
        p.insert("b", ParamKind::Weight, Matrix::scalar(0.0));
        let g = BTreeMap::from([("a".to_string(), Matrix::scalar(6.0)), ("b".to_string(), Matrix::scalar(8.0))]);
        let mut st = AdamState::new();
        let pre = optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(pre, 10.0);
        // the stored first moment is (1 - beta1) times the clipped gradient
        let clipped: f64 = ["a", "b"].iter().map(|n| (st.m[*n].item() / (1.0 - cfg.beta1)).powi(2)).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled_and_scaled_by_lr() {
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.5, ..TrainConfig::default() };
        let mut p = one(ParamKind::Weight, 2.0);
        optimizer_step(&mut p, &grad(0.3), &mut AdamState::new(), &cfg).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 2.0);

        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.5, ..TrainConfig::default() };
        let mut w = one(ParamKind::Weight, 2.0);
        let mut b = one(ParamKind::Bias, 2.0);
        optimizer_step(&mut w, &grad(0.0), &mut AdamState::new(), &cfg).unwrap();
        optimizer_step(&mut b, &grad(0.0), &mut AdamState::new(), &cfg).unwrap();
        assert!((w.get("x").unwrap().item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(b.get("x").unwrap().item(), 2.0);
    }

    #[test]
    fn mismatched_registries_are_rejected() {
        let cfg = TrainConfig::default();
        let mut p = one(ParamKind::Weight, 0.0);
        let bad = BTreeMap::from([("y".to_string(), Matrix::scalar(1.0))]);
        assert!(matches!(optimizer_step(&mut p, &bad, &mut AdamState::new(), &cfg), Err(Error::ShapeMismatch { .. })));
        let bad = BTreeMap::from([("x".to_string(), Matrix::zeros(1, 2))]);
        assert!(matches!(optimizer_step(&mut p, &bad, &mut AdamState::new(), &cfg), Err(Error::ShapeMismatch { .. })));
    }
}
