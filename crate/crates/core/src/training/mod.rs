//! Full-batch training with early stopping and the repeated-run protocol.

mod adam;
mod metrics;

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::model::{
    forward, init_params, Aggregator, DropoutRates, Mode, ModelKind, ModelParams, ModelSpec, PreparedGraph,
};
use crate::scalar::{Precision, Scalar};
use crate::tensor::{Tape, Tensor};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use metrics::{f1_scores, trimmed_stats, TrimmedStats};

/// Epochs excluded from the ms/epoch mean.
pub const WARMUP_EPOCHS: usize = 5;

/// Environment variable bounding the worker pool used by [`multi_run`].
pub const THREADS_ENV: &str = "HETGT_THREADS";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    #[default]
    ValLoss,
    ValMacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated; 0 stops at the first.
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
    pub stop_on: StopCriterion,
    /// Fraction trimmed from each end by [`multi_run`].
    pub trim: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            weight_decay: 5e-5,
            max_epochs: 500,
            patience: 100,
            seed: 0,
            precision: Precision::F32,
            stop_on: StopCriterion::ValLoss,
            trim: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} is invalid", self.weight_decay)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::Config(format!("trim fraction {} outside [0, 0.5)", self.trim)));
        }
        Ok(())
    }
}

/// Hyperparameters used for ACM-scale experiments, per model kind.
pub fn paper_preset(kind: ModelKind) -> (ModelSpec, TrainConfig) {
    let (depth, projection, layer, weight_decay) = match kind {
        ModelKind::HetGtcn => (5, 0.8, 0.6, 1e-5),
        ModelKind::HetGtan | ModelKind::HetGtanNs => (5, 0.8, 0.2, 5e-5),
        ModelKind::HetGcn => (2, 0.5, 0.5, 1e-5),
        ModelKind::HetGat => (2, 0.8, 0.2, 5e-5),
    };
    let mut spec = ModelSpec::new(kind, depth, 64);
    spec.dropout = DropoutRates {
        projection,
        layer,
        attention: 0.0,
    };
    let config = TrainConfig {
        weight_decay,
        ..TrainConfig::default()
    };
    (spec, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// Epoch (1-based) whose parameters were restored; 0 if none finished.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
    pub test_macro_f1: f64,
    pub test_micro_f1: f64,
    pub ms_per_epoch: f64,
    /// Diagnostic of a non-finite loss or activation, if the run diverged.
    pub diverged: Option<String>,
}

/// A finished run with the restored best parameters (widened to f64).
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub result: RunResult,
    pub params: ModelParams<f64>,
}

/// Mean negative log-likelihood over `rows` of `logits`.
pub fn cross_entropy_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Tensor,
    labels: &[usize],
    rows: &[usize],
) -> Result<Tensor> {
    let picked: Vec<usize> = rows
        .iter()
        .map(|&r| {
            labels
                .get(r)
                .copied()
                .ok_or_else(|| Error::Contract(format!("mask row {r} has no label")))
        })
        .collect::<Result<_>>()?;
    tape.cross_entropy(logits, rows, &picked)
}

fn argmax_rows<T: Scalar>(logits: &Array2<T>, rows: &[usize]) -> Vec<usize> {
    rows.iter()
        .map(|&r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

struct Evaluation {
    loss: f64,
    macro_f1: f64,
    micro_f1: f64,
}

fn evaluate<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    prepared: &PreparedGraph<T>,
    graph: &HeteroGraph,
    rows: &[usize],
) -> Result<Evaluation> {
    let mut pass = forward(spec, params, prepared, Mode::Eval)?;
    let loss = if rows.is_empty() {
        0.0
    } else {
        let l = cross_entropy_loss(&mut pass.tape, pass.logits, graph.labels(), rows)?;
        pass.tape.scalar(l).as_f64()
    };
    let pred = argmax_rows(pass.tape.value(pass.logits), rows);
    let truth: Vec<usize> = rows.iter().map(|&r| graph.labels()[r]).collect();
    let (macro_f1, micro_f1) = f1_scores(&pred, &truth, graph.schema().num_classes())?;
    Ok(Evaluation {
        loss,
        macro_f1,
        micro_f1,
    })
}

/// Seed of the dropout masks of one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Trains one model in the configured precision. Divergence stops the run
/// and is recorded in the result rather than returned as an error.
pub fn train(spec: &ModelSpec, graph: &HeteroGraph, config: &TrainConfig) -> Result<TrainedRun> {
    match config.precision {
        Precision::F32 => train_prepared::<f32>(spec, graph, &PreparedGraph::new(graph)?, config),
        Precision::F64 => train_prepared::<f64>(spec, graph, &PreparedGraph::new(graph)?, config),
    }
}

/// [`train`] over structures prepared once by the caller.
pub fn train_prepared<T: Scalar>(
    spec: &ModelSpec,
    graph: &HeteroGraph,
    prepared: &PreparedGraph<T>,
    config: &TrainConfig,
) -> Result<TrainedRun> {
    config.validate()?;
    spec.validate()?;
    let splits = graph.splits();
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Contract(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let mut params = init_params::<T>(spec, graph.schema(), config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut result = RunResult {
        seed: config.seed,
        best_epoch: 0,
        epochs_run: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_macro_f1: Vec::new(),
        test_macro_f1: 0.0,
        test_micro_f1: 0.0,
        ms_per_epoch: 0.0,
        diverged: None,
    };
    let mut best_params = params.clone();
    let mut best_score = f64::INFINITY;
    let mut bad = 0;
    let mut times = Vec::with_capacity(config.max_epochs);

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let step = (|| -> Result<(f64, Evaluation)> {
            let mut pass = forward(
                spec,
                &params,
                prepared,
                Mode::Train {
                    seed: epoch_seed(config.seed, epoch),
                },
            )?;
            let loss = cross_entropy_loss(&mut pass.tape, pass.logits, graph.labels(), &splits.train)?;
            let loss_value = pass.tape.scalar(loss).as_f64();
            let grads = pass.tape.backward(loss)?;
            let grads: Vec<Array2<T>> = pass.params.values().map(|&t| grads.wrt(&pass.tape, t)).collect();
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                config.learning_rate,
                config.weight_decay,
            )?;
            if let Some((name, _)) = params.iter().find(|(_, p)| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    op: "adam_step",
                    scope: Some(format!("parameter {name}")),
                });
            }
            let val = evaluate(spec, &params, prepared, graph, &splits.val)?;
            if !val.loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "cross_entropy",
                    scope: Some("validation loss".into()),
                });
            }
            Ok((loss_value, val))
        })();
        let (train_loss, val) = match step {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                result.diverged = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        times.push(start.elapsed().as_secs_f64() * 1e3);
        result.epochs_run = epoch;
        result.train_loss.push(train_loss);
        result.val_loss.push(val.loss);
        result.val_macro_f1.push(val.macro_f1);

        let score = match config.stop_on {
            StopCriterion::ValLoss => val.loss,
            StopCriterion::ValMacroF1 => -val.macro_f1,
        };
        if score < best_score {
            best_score = score;
            best_params = params.clone();
            result.best_epoch = epoch;
            bad = 0;
        } else {
            bad += 1;
            if bad >= config.patience {
                break;
            }
        }
    }

    let timed = if times.len() > WARMUP_EPOCHS {
        &times[WARMUP_EPOCHS..]
    } else {
        &times[..]
    };
    if !timed.is_empty() {
        result.ms_per_epoch = timed.iter().sum::<f64>() / timed.len() as f64;
    }
    match evaluate(spec, &best_params, prepared, graph, &splits.test) {
        Ok(test) => {
            result.test_macro_f1 = test.macro_f1;
            result.test_micro_f1 = test.micro_f1;
        }
        Err(e) if e.is_numerical() => {
            result.diverged.get_or_insert_with(|| format!("test evaluation: {e}"));
        }
        Err(e) => return Err(e),
    }
    Ok(TrainedRun {
        result,
        params: best_params.cast(),
    })
}

/// Trimmed statistics over repeated runs, shaped like one results-table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: ModelKind,
    pub depth: usize,
    pub aggregator: Aggregator,
    pub runs: usize,
    pub trim: f64,
    pub macro_f1: TrimmedStats,
    pub micro_f1: TrimmedStats,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone)]
pub struct MultiRun {
    /// Per-run results in seed order.
    pub runs: Vec<RunResult>,
    pub summary: Summary,
    /// Mean ms/epoch over runs.
    pub ms_per_epoch: f64,
    /// Index of the run with the best final validation score.
    pub best_run: usize,
    pub best_params: ModelParams<f64>,
}

/// Number of worker threads requested through [`THREADS_ENV`].
pub fn requested_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `n_runs` trainings with seeds `config.seed + i`, in parallel, and
/// trims each metric independently.
pub fn multi_run(spec: &ModelSpec, graph: &HeteroGraph, config: &TrainConfig, n_runs: usize) -> Result<MultiRun> {
    if n_runs < 5 {
        return Err(Error::Contract(format!(
            "multi_run needs at least 5 runs, got {n_runs}"
        )));
    }
    config.validate()?;
    spec.validate()?;
    let job = || -> Result<Vec<TrainedRun>> {
        match config.precision {
            Precision::F32 => runs_in::<f32>(spec, graph, config, n_runs),
            Precision::F64 => runs_in::<f64>(spec, graph, config, n_runs),
        }
    };
    let trained = match requested_threads()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(job)?,
        None => job()?,
    };
    let macro_f1: Vec<f64> = trained.iter().map(|r| r.result.test_macro_f1).collect();
    let micro_f1: Vec<f64> = trained.iter().map(|r| r.result.test_micro_f1).collect();
    let summary = Summary {
        model: spec.kind,
        depth: spec.depth,
        aggregator: spec.effective_aggregator(),
        runs: n_runs,
        trim: config.trim,
        macro_f1: trimmed_stats(&macro_f1, config.trim)?,
        micro_f1: trimmed_stats(&micro_f1, config.trim)?,
        diverged_runs: trained.iter().filter(|r| r.result.diverged.is_some()).count(),
    };
    let best_run = (0..trained.len())
        .min_by(|&a, &b| final_score(&trained[a].result, config).total_cmp(&final_score(&trained[b].result, config)))
        .expect("at least one run");
    let ms_per_epoch = trained.iter().map(|r| r.result.ms_per_epoch).sum::<f64>() / n_runs as f64;
    let best_params = trained[best_run].params.clone();
    Ok(MultiRun {
        runs: trained.into_iter().map(|r| r.result).collect(),
        summary,
        ms_per_epoch,
        best_run,
        best_params,
    })
}

/// Validation score at the restored epoch; lower is better.
fn final_score(r: &RunResult, config: &TrainConfig) -> f64 {
    if r.diverged.is_some() || r.best_epoch == 0 {
        return f64::INFINITY;
    }
    match config.stop_on {
        StopCriterion::ValLoss => r.val_loss[r.best_epoch - 1],
        StopCriterion::ValMacroF1 => -r.val_macro_f1[r.best_epoch - 1],
    }
}

fn runs_in<T: Scalar>(
    spec: &ModelSpec,
    graph: &HeteroGraph,
    config: &TrainConfig,
    n_runs: usize,
) -> Result<Vec<TrainedRun>> {
    let prepared = PreparedGraph::<T>::new(graph)?;
    (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let cfg = TrainConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            train_prepared(spec, graph, &prepared, &cfg)
        })
        .collect()
}
