//! The full network: configuration, parameter layout, forward pass, loss,
//! gradients and checkpoints.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::{Coupling, ModelConfig};
pub use forward::{
    examples, forward, forward_on, gradients, loss, loss_on, predict, prepare_dataset, sample_rng, AttentionState,
    BatchGradients, Example, ForwardVars, LayerState, LayerVars, PreparedStructure,
};
pub use params::{init_params, l2_penalty, param_specs, Init, ParamSpec};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffusion::{
        attention_pseudo_graph, diffuse_attention, diffuse_graph, diffused_neighborhoods, diffusion_rate,
        gamma_logit_name, DiffusionKernelParams, W_BETA,
    };
    use crate::error::Error;
    use crate::fusion::{aggregate, predict_head};
    use crate::gnn::gnn_layer;
    use crate::numerics::{check_param_gradients, gelu_scalar, row_entropy_value, sigmoid, Matrix, ParamStore};
    use crate::protein_io::{
        node_features, synthesize_dataset, AminoAcid, Dataset, FeatureConfig, MutationRecord, Structure, SyntheticSpec,
    };
    use crate::transformer::{embed_tokens, mhsa_scores, transformer_layer, LN_EPS};

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig {
            d: 8,
            heads: 2,
            d_ffn: 16,
            seed: 11,
            features: FeatureConfig {
                aa_dim: 4,
                coord_dim: 4,
                edge_dim: 4,
                rbf_count: 4,
                rbf_max: 20.0,
                rbf_gamma: 0.05,
                angle_count: 2,
                angle_gamma: 1.0,
            },
            ..ModelConfig::default()
        };
        cfg.diffusion.steps = 3;
        cfg
    }

    fn data(n: usize, len: usize, seed: u64) -> Dataset {
        synthesize_dataset(&SyntheticSpec { seed, n_samples: n, len_min: len, len_max: len, coupling: 1.0, noise_sd: 0.05 })
            .unwrap()
    }

    /// Randomises the diffusion tensors so both kernel inputs matter.
    fn perturb_kernel(p: &mut ParamStore) {
        if let Some(w) = p.get_mut(W_BETA) {
            *w = Matrix::row_vector(&[0.4, -0.7]);
        }
    }

    fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> Matrix {
        let d = x.cols() as f64;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            for k in 0..x.cols() {
                out[(i, k)] = (r[k] - mean) / (var + LN_EPS).sqrt() * g[(0, k)] + b[(0, k)];
            }
        }
        out
    }

    fn row_normalized(a: &Matrix) -> Matrix {
        let s = a.row_sums();
        Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] / s[i])
    }

    fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
        let y = x.matmul(w).unwrap();
        Matrix::from_fn(y.rows(), y.cols(), |i, j| y[(i, j)] + b[(0, j)])
    }

    /// Straight-line trace through the value-level module functions.
    fn straight_line(p: &ParamStore, cfg: &ModelConfig, prep: &PreparedStructure, rec: &MutationRecord) -> f64 {
        let g = |n: &str| p.get(n).unwrap().clone();
        let l = prep.len();
        let dc = &cfg.diffusion;
        let kernel = DiffusionKernelParams::from_store(p, cfg.tr_layers);

        let mut x = embed_tokens(&prep.structure.sequence_string(), p).unwrap();
        let mut s_diffs = Vec::new();
        for layer in 0..cfg.tr_layers {
            let y = layer_norm(&x, &g(&format!("tr.{layer}.ln1.g")), &g(&format!("tr.{layer}.ln1.b")));
            let attn = mhsa_scores(&y, p, layer, cfg.heads).unwrap();
            let ent = attn.iter().map(row_entropy_value).sum::<f64>() / attn.len() as f64;
            let beta = diffusion_rate(layer + 1, cfg.tr_layers, ent, &kernel, dc);
            let a_struct: Vec<Matrix> =
                attn.iter().map(|a| row_normalized(&diffuse_attention(a, &prep.s_norm, beta, dc.steps).unwrap())).collect();
            if layer < cfg.couplings() {
                let pg = attention_pseudo_graph(&a_struct, dc.tau, dc.self_loops).unwrap();
                let gamma = sigmoid(kernel.gamma_logits[layer]);
                s_diffs.push(diffuse_graph(&prep.s_norm, &pg, gamma, dc.steps).unwrap());
            }
            x = transformer_layer(&x, Some(&a_struct), p, layer, cfg.heads).unwrap().0;
        }

        let raw = &prep.raw_pairs;
        let hid = affine(raw, &g("edge.w1"), &g("edge.b1")).map(gelu_scalar);
        let mut e = affine(&hid, &g("edge.w2"), &g("edge.b2"));
        for i in 0..l {
            e.row_mut(i * l + i).iter_mut().for_each(|v| *v = 0.0);
        }
        let h0 = node_features(&prep.structure, p).unwrap();
        let mut h = affine(&h0, &g("gnn.in.w"), &g("gnn.in.b"));
        for layer in 0..cfg.gnn_layers {
            let sd = &s_diffs[layer.min(s_diffs.len() - 1)];
            let nb = diffused_neighborhoods(sd, dc.eps_nbr, dc.k_max);
            let mask = nb.neighbor_mask();
            let bias = Matrix::from_fn(l, l, |i, j| if mask[(i, j)] != 0.0 { sd[(i, j)].ln() } else { 0.0 });
            h = gnn_layer(&h, &e, &nb, Some(&bias), p, layer, cfg.heads).unwrap();
        }
        let fused = aggregate(&h, &x, rec, p, cfg.window).unwrap();
        predict_head(&fused, p, false, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn forward_matches_straight_line_trace_on_a_two_residue_protein() {
        let cfg = tiny_config();
        let mut p = init_params(&cfg).unwrap();
        perturb_kernel(&mut p);
        let s = Structure::from_parts(
            &[AminoAcid::from_char('A').unwrap(), AminoAcid::from_char('W').unwrap()],
            &[[0.0, 0.0, 0.0], [3.8, 0.0, 0.0]],
        )
        .unwrap();
        let prep = PreparedStructure::new(&s, &cfg).unwrap();
        let rec = MutationRecord {
            structure_id: "x".into(),
            position: 2,
            wt: AminoAcid::from_char('W').unwrap(),
            mutant: AminoAcid::from_char('G').unwrap(),
            ddg: None,
        };
        let golden = straight_line(&p, &cfg, &prep, &rec);
        let (pred, state) = forward(&p, &cfg, &prep, &rec).unwrap();
        assert!((pred - golden).abs() <= 1e-12 * golden.abs().max(1.0), "{pred} vs {golden}");
        assert_eq!(state.layers.len(), 2);
        assert_eq!(state.gammas().len(), 2);
    }

    #[test]
    fn forward_matches_straight_line_trace_on_synthetic_proteins() {
        let cfg = ModelConfig { gnn_layers: 3, ..tiny_config() };
        let mut p = init_params(&cfg).unwrap();
        perturb_kernel(&mut p);
        let d = data(4, 12, 5);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        for ex in examples(&d, &prepared).unwrap() {
            let golden = straight_line(&p, &cfg, ex.prep, ex.record);
            let pred = predict(&p, &cfg, ex.prep, ex.record).unwrap();
            assert!((pred - golden).abs() <= 1e-12 * golden.abs().max(1.0), "{pred} vs {golden}");
        }
    }

    #[test]
    fn zero_rates_reproduce_the_bypassed_model_bit_exactly() {
        let base = tiny_config();
        let fixed = ModelConfig { coupling: Coupling::Fixed { beta: 0.0, gamma: 0.0 }, ..base.clone() };
        let bypass = ModelConfig { coupling: Coupling::Bypass, ..base };
        let p = init_params(&fixed).unwrap();
        assert_eq!(p, init_params(&bypass).unwrap());
        let d = data(6, 10, 2);
        let prepared = prepare_dataset(&d, &fixed).unwrap();
        for ex in examples(&d, &prepared).unwrap() {
            let a = predict(&p, &fixed, ex.prep, ex.record).unwrap();
            let b = predict(&p, &bypass, ex.prep, ex.record).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn inference_is_pure_and_reports_state() {
        let cfg = tiny_config();
        let p = init_params(&cfg).unwrap();
        let d = data(1, 16, 9);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let ex = examples(&d, &prepared).unwrap()[0];
        let a = forward(&p, &cfg, ex.prep, ex.record).unwrap();
        let b = forward(&p, &cfg, ex.prep, ex.record).unwrap();
        assert_eq!(a, b);
        let st = &a.1;
        for layer in &st.layers {
            assert!((layer.beta - 0.25).abs() < 1e-15);
            assert_eq!(layer.residual_norms.len(), cfg.diffusion.steps);
            // contraction: each step shrinks by at least beta * rho(S~) = beta
            for w in layer.residual_norms.windows(2) {
                assert!(w[1] <= layer.beta * w[0] * (1.0 + 1e-9) + 1e-15);
            }
            for a in &layer.diffused {
                assert!(a.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn mismatched_wild_type_is_rejected() {
        let cfg = tiny_config();
        let p = init_params(&cfg).unwrap();
        let d = data(1, 10, 1);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let mut rec = d.records[0].clone();
        rec.wt = AminoAcid::from_index((rec.wt.index() + 1) % 20);
        let prep = &prepared[&rec.structure_id];
        assert!(matches!(forward(&p, &cfg, prep, &rec), Err(Error::WtMismatch { .. })));
    }

    #[test]
    fn loss_examples() {
        let mut p = ParamStore::new();
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0], &p, 0.0).unwrap(), 0.0);
        assert_eq!(loss(&[1.0, -1.0], &[0.0, 0.0], &p, 0.0).unwrap(), 1.0);
        p.insert("w", crate::numerics::ParamKind::Weight, Matrix::from_rows(&[[3.0], [4.0]]));
        assert!((loss(&[0.5], &[0.5], &p, 0.1).unwrap() - 2.5).abs() < 1e-15);
        assert!(matches!(loss(&[], &[], &p, 0.0), Err(Error::EmptyBatch)));
    }

    fn close_maps(a: &BTreeMap<String, Matrix>, b: &BTreeMap<String, Matrix>, tol: f64) {
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (n, m) in a {
            let scale = m.frobenius_norm().max(1.0);
            assert!(m.max_abs_diff(&b[n]) <= tol * scale, "{n}: {}", m.max_abs_diff(&b[n]));
        }
    }

    #[test]
    fn per_sample_gradients_match_the_single_tape_loss() {
        let cfg = ModelConfig { lambda: 0.01, ..tiny_config() };
        let mut p = init_params(&cfg).unwrap();
        perturb_kernel(&mut p);
        let d = data(3, 9, 4);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let batch = examples(&d, &prepared).unwrap();
        for seed in [None, Some(17)] {
            let bg = gradients(&p, &cfg, &batch, seed).unwrap();
            let mut tape = crate::numerics::Tape::new();
            let out = loss_on(&mut tape, &p, &cfg, &batch, seed).unwrap();
            assert!((tape.value(out).item() - bg.loss).abs() < 1e-12);
            let mut g = tape.param_grads(&tape.backward(out));
            for (n, q) in p.iter() {
                g.entry(n.to_string()).or_insert_with(|| Matrix::zeros(q.value.rows(), q.value.cols()));
            }
            close_maps(&bg.grads, &g, 1e-12);
        }
    }

    #[test]
    fn finite_differences_agree_per_tensor() {
        let cfg = ModelConfig { lambda: 1e-3, dropout: 0.0, ..tiny_config() };
        let mut p = init_params(&cfg).unwrap();
        perturb_kernel(&mut p);
        let d = data(2, 8, 21);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let batch = examples(&d, &prepared).unwrap();
        let checks = check_param_gradients(&p, None, 1e-6, 1e-8, |t, q| loss_on(t, q, &cfg, &batch, None)).unwrap();
        for c in &checks {
            assert!(c.rel_err < 1e-5, "{}: {:e}", c.name, c.rel_err);
        }
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let cfg = tiny_config();
        let mut p = init_params(&cfg).unwrap();
        perturb_kernel(&mut p);
        let d = data(4, 12, 8);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let batch = examples(&d, &prepared).unwrap();
        let bg = gradients(&p, &cfg, &batch, None).unwrap();
        for (n, g) in &bg.grads {
            assert!(g.frobenius_norm() > 0.0, "{n} has no gradient");
        }
        assert!(bg.grads[&gamma_logit_name(1)].frobenius_norm() > 0.0);
    }

    #[test]
    fn duplicating_a_sample_leaves_mean_gradients_unchanged() {
        let cfg = tiny_config();
        let p = init_params(&cfg).unwrap();
        let d = data(1, 10, 3);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let one = examples(&d, &prepared).unwrap();
        let two = vec![one[0], one[0]];
        let a = gradients(&p, &cfg, &one, None).unwrap();
        let b = gradients(&p, &cfg, &two, None).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-14);
        close_maps(&a.grads, &b.grads, 1e-13);
    }

    #[test]
    fn all_zero_model_with_zero_targets_has_zero_gradients() {
        let cfg = tiny_config();
        let mut p = init_params(&cfg).unwrap();
        for (_, q) in p.iter_mut() {
            q.value = Matrix::zeros(q.value.rows(), q.value.cols());
        }
        let d = data(2, 8, 6);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let mut batch = examples(&d, &prepared).unwrap();
        batch.iter_mut().for_each(|e| e.target = 0.0);
        let bg = gradients(&p, &cfg, &batch, None).unwrap();
        assert_eq!(bg.loss, 0.0);
        assert!(bg.grads.values().all(|g| g.frobenius_norm() == 0.0));
    }

    #[test]
    fn dropout_is_reproducible_per_seed() {
        let cfg = ModelConfig { dropout: 0.3, ..tiny_config() };
        let p = init_params(&cfg).unwrap();
        let d = data(3, 10, 12);
        let prepared = prepare_dataset(&d, &cfg).unwrap();
        let batch = examples(&d, &prepared).unwrap();
        let a = gradients(&p, &cfg, &batch, Some(5)).unwrap();
        let b = gradients(&p, &cfg, &batch, Some(5)).unwrap();
        let c = gradients(&p, &cfg, &batch, Some(6)).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_ne!(a.predictions, c.predictions);
        let clean = gradients(&p, &cfg, &batch, None).unwrap();
        assert_ne!(a.predictions, clean.predictions);
    }

    #[test]
    fn unequal_stacks_reuse_the_last_interaction() {
        for (lg, lt) in [(3, 1), (1, 3), (0, 2), (2, 0)] {
            let cfg = ModelConfig { gnn_layers: lg, tr_layers: lt, ..tiny_config() };
            let p = init_params(&cfg).unwrap();
            let d = data(1, 9, 2);
            let prepared = prepare_dataset(&d, &cfg).unwrap();
            let ex = examples(&d, &prepared).unwrap()[0];
            let (pred, st) = forward(&p, &cfg, ex.prep, ex.record).unwrap();
            assert!(pred.is_finite());
            assert_eq!(st.layers.len(), lt);
            assert_eq!(st.gammas().len(), lg.min(lt));
        }
    }
}
