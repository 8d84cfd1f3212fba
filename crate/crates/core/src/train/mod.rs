//! Deterministic training, evaluation metrics and the diffusion ablation.

mod config;
mod metrics;
mod optimizer;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use metrics::{average_ranks, metrics, pearson, Metrics};
pub use optimizer::{global_norm, optimizer_step, AdamState};

use crate::error::{Error, Result};
use crate::model::{examples, forward, gradients, init_params, predict, prepare_dataset, Coupling, Example, ModelConfig};
use crate::numerics::ParamStore;
use crate::par;
use crate::protein_io::{synthesize_dataset, Dataset, SyntheticSpec};

pub const EPOCH_LOG_HEADER: &str = "epoch\ttrain_mse\tval_rmse\tval_pearson\tbeta_per_layer\tgamma_per_layer";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_rmse: f64,
    pub val_pearson: f64,
    /// Validation-mean diffusion rates per transformer layer.
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

fn join(v: &[f64]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

impl EpochLog {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.epoch,
            self.train_mse,
            self.val_rmse,
            self.val_pearson,
            join(&self.betas),
            join(&self.gammas)
        )
    }
}

pub fn epoch_log_tsv(log: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{}", e.tsv_line());
    }
    s
}

/// Seeded `(train, held_out)` index split; `fraction` of the samples (at least one) are held out.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < 2 {
        return (idx.clone(), idx);
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let held = idx.split_off(n - k);
    (idx, held)
}

/// Optimizer state bound to a parameter set.
pub struct Trainer {
    pub params: ParamStore,
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub state: AdamState,
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Regularised loss of the batch (dropout active).
    pub loss: f64,
    pub mse: f64,
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: init_params(model)?,
            model: model.clone(),
            cfg: cfg.clone(),
            state: AdamState::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// One AdamW step on `batch`, with a fresh dropout stream per step.
    pub fn step(&mut self, batch: &[Example<'_>]) -> Result<StepReport> {
        let seed = self.rng.next_u64();
        let bg = gradients(&self.params, &self.model, batch, Some(seed))?;
        let grad_norm = optimizer_step(&mut self.params, &bg.grads, &mut self.state, &self.cfg)?;
        Ok(StepReport { loss: bg.loss, mse: bg.mse, grad_norm })
    }

    fn shuffle(&mut self, idx: &mut [usize]) {
        idx.shuffle(&mut self.rng);
    }
}

/// Inference predictions for `batch`, in order.
pub fn predict_all(params: &ParamStore, model: &ModelConfig, batch: &[Example<'_>]) -> Result<Vec<f64>> {
    par::map_range(batch.len(), |i| predict(params, model, batch[i].prep, batch[i].record)).into_iter().collect()
}

fn validation_pass(params: &ParamStore, model: &ModelConfig, val: &[Example<'_>]) -> Result<(Metrics, Vec<f64>, Vec<f64>)> {
    let out: Vec<_> = par::map_range(val.len(), |i| forward(params, model, val[i].prep, val[i].record))
        .into_iter()
        .collect::<Result<_>>()?;
    let preds: Vec<f64> = out.iter().map(|(p, _)| *p).collect();
    let targets: Vec<f64> = val.iter().map(|e| e.target).collect();
    let m = metrics(&preds, &targets)?;
    let mean = |f: &dyn Fn(&crate::model::AttentionState) -> Vec<f64>| -> Vec<f64> {
        let rows: Vec<Vec<f64>> = out.iter().map(|(_, s)| f(s)).collect();
        let width = rows.first().map_or(0, Vec::len);
        (0..width).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect()
    };
    Ok((m, mean(&|s| s.betas()), mean(&|s| s.gammas())))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation RMSE.
    pub params: ParamStore,
    pub model: ModelConfig,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: u64,
}

pub fn train(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, model, cfg, |_| {})
}

/// Trains on an 85/15 split of `data` (by `cfg.seed`), calling `on_epoch` after every epoch.
pub fn train_with(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if data.is_empty() || data.records.iter().any(|r| r.ddg.is_none()) {
        return Err(Error::EmptyDataset);
    }
    data.validate()?;
    let mut trainer = Trainer::new(model, cfg)?;
    let prepared = prepare_dataset(data, model)?;
    let all = examples(data, &prepared)?;
    let (train_idx, val_idx) = split_indices(all.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<Example<'_>> = val_idx.iter().map(|&i| all[i]).collect();

    let mut best = (f64::INFINITY, trainer.params.clone(), 0);
    let mut since = 0;
    let mut log = Vec::new();
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.max_epochs {
        trainer.shuffle(&mut order);
        let mut sq_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| all[i]).collect();
            let r = trainer.step(&batch)?;
            sq_sum += r.mse * batch.len() as f64;
        }
        let (m, betas, gammas) = validation_pass(&trainer.params, model, &val)?;
        let entry = EpochLog {
            epoch,
            train_mse: sq_sum / order.len() as f64,
            val_rmse: m.rmse,
            val_pearson: m.pearson,
            betas,
            gammas,
        };
        on_epoch(&entry);
        log.push(entry);
        if m.rmse < best.0 - cfg.min_delta {
            best = (m.rmse, trainer.params.clone(), epoch);
            since = 0;
        } else {
            since += 1;
        }
        if since >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome { params: best.1, model: model.clone(), log, best_epoch: best.2, steps: trainer.state.step })
}

/// Metrics of `params` on every record of `data` that carries a target.
pub fn evaluate(data: &Dataset, params: &ParamStore, model: &ModelConfig) -> Result<Metrics> {
    let labelled = Dataset {
        structures: data.structures.clone(),
        records: data.records.iter().filter(|r| r.ddg.is_some()).cloned().collect(),
    };
    if labelled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepared = prepare_dataset(&labelled, model)?;
    let ex = examples(&labelled, &prepared)?;
    let preds = predict_all(params, model, &ex)?;
    let targets: Vec<f64> = ex.iter().map(|e| e.target).collect();
    metrics(&preds, &targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub mse_on: f64,
    pub mse_off: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<SeedComparison>,
    /// Seeds where the diffusion-on arm has strictly lower test MSE.
    pub wins: usize,
    pub mean_on: f64,
    pub mean_off: f64,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("seed\tmse_diffusion_on\tmse_diffusion_off\n");
        for c in &self.seeds {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", c.seed, c.mse_on, c.mse_off);
        }
        let _ = writeln!(s, "# wins {}/{} mean_on {:.6} mean_off {:.6}", self.wins, self.seeds.len(), self.mean_on, self.mean_off);
        s
    }
}

/// Test MSE of a model trained on `train` and scored on `test`.
fn arm_mse(train_set: &Dataset, test_set: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<f64> {
    let out = train(train_set, model, cfg)?;
    Ok(evaluate(test_set, &out.params, model)?.rmse.powi(2))
}

/// For each seed `k`, synthesises a dataset (seed `spec.seed + k`), holds out 20% for
/// testing, and trains matched models with learned diffusion and with `beta = gamma = 0`.
pub fn ablation_experiment(spec: &SyntheticSpec, model: &ModelConfig, cfg: &TrainConfig, n_seeds: usize) -> Result<AblationReport> {
    let mut seeds = Vec::with_capacity(n_seeds);
    for k in 0..n_seeds as u64 {
        let data = synthesize_dataset(&SyntheticSpec { seed: spec.seed + k, ..spec.clone() })?;
        let (tr, te) = split_indices(data.len(), 0.2, spec.seed + k);
        let (train_set, test_set) = (data.subset(&tr), data.subset(&te));
        let on = ModelConfig { coupling: Coupling::Learned, seed: model.seed + k, ..model.clone() };
        let off = ModelConfig { coupling: Coupling::Fixed { beta: 0.0, gamma: 0.0 }, ..on.clone() };
        let tcfg = TrainConfig { seed: cfg.seed + k, ..cfg.clone() };
        seeds.push(SeedComparison {
            seed: spec.seed + k,
            mse_on: arm_mse(&train_set, &test_set, &on, &tcfg)?,
            mse_off: arm_mse(&train_set, &test_set, &off, &tcfg)?,
        });
    }
    let n = seeds.len().max(1) as f64;
    Ok(AblationReport {
        wins: seeds.iter().filter(|s| s.mse_on < s.mse_off).count(),
        mean_on: seeds.iter().map(|s| s.mse_on).sum::<f64>() / n,
        mean_off: seeds.iter().map(|s| s.mse_off).sum::<f64>() / n,
        seeds,
    })
}

/// Names and values of the learned diffusion logits, for reporting.
pub fn diffusion_logits(params: &ParamStore) -> BTreeMap<String, f64> {
    params
        .iter()
        .filter(|(_, p)| p.kind == crate::numerics::ParamKind::Diffusion)
        .map(|(n, p)| (n.to_string(), p.value.as_slice()[0]))
        .collect()
}
