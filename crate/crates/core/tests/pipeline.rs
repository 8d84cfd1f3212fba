use dgtn::model::{checkpoint, prepare_dataset, predict, ModelConfig};
use dgtn::protein_io::{synthesize_dataset, Dataset, SyntheticSpec};
use dgtn::train::{evaluate, train, TrainConfig};

fn small_model() -> ModelConfig {
    let mut cfg = ModelConfig { d: 8, d_ffn: 16, ..ModelConfig::default() };
    cfg.diffusion.steps = 2;
    cfg
}

#[test]
fn files_round_trip_into_an_identical_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthesize_dataset(&SyntheticSpec { seed: 2, n_samples: 6, len_min: 8, len_max: 20, coupling: 1.0, noise_sd: 0.1 }).unwrap();
    let written = data.write(dir.path(), "set.dgm").unwrap();
    assert_eq!(written.len(), 7);
    assert_eq!(Dataset::load(&dir.path().join("set.dgm")).unwrap(), data);
}

#[test]
fn train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthesize_dataset(&SyntheticSpec { seed: 3, n_samples: 20, len_min: 8, len_max: 12, coupling: 1.0, noise_sd: 0.05 }).unwrap();
    let cfg = TrainConfig { lr: 1e-3, batch: 8, max_epochs: 3, patience: 3, ..TrainConfig::default() };
    let out = train(&data, &small_model(), &cfg).unwrap();
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|e| e.train_mse.is_finite() && e.val_rmse.is_finite()));
    assert_eq!(out.log[0].betas.len(), 2);
    assert!(out.log[0].betas.iter().chain(&out.log[0].gammas).all(|r| (0.0..1.0).contains(r)));

    let path = dir.path().join("m.dgt");
    checkpoint::save(&path, &out.params, &out.model).unwrap();
    let (params, model) = checkpoint::load(&path).unwrap();
    let a = evaluate(&data, &out.params, &out.model).unwrap();
    let b = evaluate(&data, &params, &model).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n, 20);

    let prepared = prepare_dataset(&data, &model).unwrap();
    let r = &data.records[0];
    let y = predict(&params, &model, &prepared[&r.structure_id], r).unwrap();
    assert!(y.is_finite());
}
