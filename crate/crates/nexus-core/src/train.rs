//! Optimization loop: Adam with bias correction, stepwise-exponential
//! learning-rate decay, MSE plus coupled L2 weight decay, early stopping with
//! best-parameter restoration, and the ablation harness.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::WindowSample;
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{
    self, bind_params, is_decayed, ModelError, NexusConfig, NexusParams, OutputMode,
};
use crate::rng;
use crate::tensor::{Array, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub eta0: f64,
    pub decay_factor: f64,
    /// Epochs per decay step.
    pub decay_interval: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs before stopping.
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 0.001,
            decay_factor: 0.95,
            decay_interval: 5,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positives = [
            ("eta0", self.eta0),
            ("decay_factor", self.decay_factor),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        for (name, v) in [
            ("decay_interval", self.decay_interval),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config(
                "patience must not exceed max_epochs".into(),
            ));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::Config("betas must be below 1".into()));
        }
        Ok(())
    }
}

/// Stepwise-exponential schedule: eta0 * factor^floor(t / interval).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.eta0 * cfg.decay_factor.powi((epoch / cfg.decay_interval) as i32)
}

/// Mean squared error over all entries of equally shaped arrays.
pub fn mse_scalar(y: &Array, yhat: &Array) -> f64 {
    debug_assert_eq!(y.shape(), yhat.shape());
    y.iter()
        .zip(yhat.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y.numel() as f64
}

/// L2 penalty over decayed parameters (weights; biases and the positional
/// term are excluded).
pub fn l2_penalty(params: &NexusParams, weight_decay: f64) -> f64 {
    weight_decay
        * params
            .iter()
            .filter(|(path, _)| is_decayed(path))
            .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
}

/// Total loss: data term plus lambda * sum of squared weights.
pub fn regularized_loss(mse: f64, params: &NexusParams, weight_decay: f64) -> f64 {
    mse + l2_penalty(params, weight_decay)
}

/// Analytic gradient of the L2 term: adds 2*lambda*theta to each decayed
/// parameter's gradient.
pub fn apply_weight_decay(
    grads: &mut BTreeMap<String, Array>,
    params: &NexusParams,
    weight_decay: f64,
) {
    if weight_decay == 0.0 {
        return;
    }
    for (path, grad) in grads.iter_mut() {
        if !is_decayed(path) {
            continue;
        }
        let theta = params.get(path);
        for (g, t) in grad.data_mut().iter_mut().zip(theta.iter()) {
            *g += 2.0 * weight_decay * t;
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

pub fn adam_step(
    params: &mut NexusParams,
    grads: &BTreeMap<String, Array>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (path, theta) in params.iter_mut() {
        let g = grads
            .get(path)
            .unwrap_or_else(|| panic!("missing gradient for {path}"));
        let m = state
            .m
            .entry(path.clone())
            .or_insert_with(|| vec![0.0; theta.numel()]);
        let v = state
            .v
            .entry(path.clone())
            .or_insert_with(|| vec![0.0; theta.numel()]);
        for ((t, g), (m, v)) in theta
            .data_mut()
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *t -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Number of epochs actually run (1-based count).
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time_secs: f64,
    pub param_count: usize,
}

/// Per-site targets reduced to the model's output shape.
fn target_for(cfg: &NexusConfig, w: &WindowSample) -> Array {
    match cfg.output_mode {
        OutputMode::PerSite => w.y.clone(),
        OutputMode::Pooled => {
            let (l, k) = (cfg.sites, cfg.output_species);
            let mut pooled = vec![0.0; k];
            for s in 0..l {
                for j in 0..k {
                    pooled[j] += w.y.data()[s * k + j] / l as f64;
                }
            }
            Array::from_vec(vec![k], pooled).unwrap()
        }
    }
}

/// Mean validation MSE in eval mode (no dropout).
pub fn validation_loss(
    cfg: &NexusConfig,
    params: &NexusParams,
    windows: &[WindowSample],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for w in windows {
        let (pred, _) = model::predict(cfg, params, &w.x)?;
        total += mse_scalar(&target_for(cfg, w), &pred);
    }
    Ok(total / windows.len() as f64)
}

/// Full training loop. Shuffles mini-batches each epoch from a seeded
/// stream, averages per-sample gradients, adds the analytic weight-decay
/// term, validates after every epoch, and restores the best-validation
/// parameters before returning.
pub fn train(
    model_cfg: &NexusConfig,
    params: &mut NexusParams,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(TrainError::Config(
            "training and validation windows must be nonempty".into(),
        ));
    }
    let started = Instant::now();
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut bad_epochs = 0usize;
    let mut epochs = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut shuffle_rng = rng::stream(cfg.seed, &format!("train.shuffle.{epoch}"));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = rng::stream(cfg.seed, &format!("train.dropout.{epoch}"));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_sum: BTreeMap<String, Array> = params
                .iter()
                .map(|(p, a)| (p.clone(), Array::zeros(a.shape().to_vec())))
                .collect();
            for &i in batch {
                let w = &train_windows[i];
                let tape = Tape::new();
                let bound = bind_params(&tape, params);
                let x = tape.constant(w.x.clone());
                let (pred, _) = model::forward(model_cfg, &bound, &x, true, &mut dropout_rng)?;
                let y = tape.constant(target_for(model_cfg, w));
                let diff = pred.sub(&y)?;
                let loss = diff.mul(&diff)?.mean_all();
                epoch_loss += loss.item();
                loss.backward()?;
                for (path, g) in bound.grads() {
                    let acc = grad_sum.get_mut(&path).unwrap();
                    for (a, b) in acc.data_mut().iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_sum.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            apply_weight_decay(&mut grad_sum, params, cfg.weight_decay);
            adam_step(params, &grad_sum, &mut state, lr, cfg);
        }
        let train_loss = epoch_loss / train_windows.len() as f64;
        let val_loss = validation_loss(model_cfg, params, val_windows)?;
        if !train_loss.is_finite() || !val_loss.is_finite() || !params.all_finite() {
            return Err(TrainError::Diverged(format!(
                "non-finite loss at epoch {epoch}: train {train_loss}, val {val_loss}"
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }
    *params = best_params;
    Ok(TrainReport {
        stopped_epoch: epochs.len(),
        best_val_loss: best_val,
        wall_time_secs: started.elapsed().as_secs_f64(),
        param_count: params.count(),
        epochs,
    })
}

/// Pooled per-species observation/prediction pairs over a window set, in
/// normalized units.
pub fn collect_predictions(
    cfg: &NexusConfig,
    params: &NexusParams,
    windows: &[WindowSample],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    let k = cfg.output_species;
    let mut obs = vec![Vec::new(); k];
    let mut pred = vec![Vec::new(); k];
    for w in windows {
        let (out, _) = model::predict(cfg, params, &w.x)?;
        let y = target_for(cfg, w);
        for (idx, (&o, &p)) in y.iter().zip(out.iter()).enumerate() {
            obs[idx % k].push(o);
            pred[idx % k].push(p);
        }
    }
    Ok((obs, pred))
}

/// Validation metrics (per species and averaged) for a trained model.
pub fn evaluate(
    cfg: &NexusConfig,
    params: &NexusParams,
    windows: &[WindowSample],
    species_names: &[&str],
) -> Result<MetricsReport, TrainError> {
    let (obs, pred) = collect_predictions(cfg, params, windows)?;
    let triples: Vec<(&str, &[f64], &[f64])> = species_names
        .iter()
        .zip(obs.iter().zip(pred.iter()))
        .map(|(&n, (o, p))| (n, o.as_slice(), p.as_slice()))
        .collect();
    Ok(MetricsReport::compute(&triples)?)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoPatchEmbedding,
    NoLowRank,
    NoPathways,
    NoWeightedPooling,
    SingleNanoblock,
}

impl AblationVariant {
    pub fn all() -> [AblationVariant; 6] {
        [
            AblationVariant::Full,
            AblationVariant::NoPatchEmbedding,
            AblationVariant::NoLowRank,
            AblationVariant::NoPathways,
            AblationVariant::NoWeightedPooling,
            AblationVariant::SingleNanoblock,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoPatchEmbedding => "no_patch_embedding",
            AblationVariant::NoLowRank => "no_lowrank",
            AblationVariant::NoPathways => "no_pathways",
            AblationVariant::NoWeightedPooling => "no_weighted_pooling",
            AblationVariant::SingleNanoblock => "single_nanoblock",
        }
    }

    /// Variant wiring applied to a base config.
    pub fn apply(&self, base: &NexusConfig) -> NexusConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoPatchEmbedding => {
                // Raw timesteps; the projection rank cannot exceed the raw
                // per-step feature width.
                cfg.patch_len = 1;
                cfg.stride = 1;
                cfg.rank = cfg.rank.min(cfg.features);
            }
            AblationVariant::NoLowRank => cfg.use_lowrank = false,
            AblationVariant::NoPathways => cfg.use_pathways = false,
            AblationVariant::NoWeightedPooling => cfg.use_weighted_pooling = false,
            AblationVariant::SingleNanoblock => cfg.n_blocks = 1,
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub val_r2: f64,
    pub delta_vs_full: f64,
    pub param_count: usize,
    pub wall_time_secs: f64,
    pub stopped_epoch: usize,
}

/// Train and evaluate every variant with identical data and seed.
pub fn run_ablation(
    base_cfg: &NexusConfig,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    train_cfg: &TrainConfig,
    species_names: &[&str],
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    let mut full_r2 = 0.0;
    for variant in AblationVariant::all() {
        let cfg = variant.apply(base_cfg);
        cfg.validate()?;
        let mut params = model::init_params(&cfg, train_cfg.seed)?;
        let report = train(&cfg, &mut params, train_windows, val_windows, train_cfg)?;
        let metrics = evaluate(&cfg, &params, val_windows, species_names)?;
        let val_r2 = metrics.average.r2;
        if variant == AblationVariant::Full {
            full_r2 = val_r2;
        }
        rows.push(AblationRow {
            name: variant.name(),
            val_r2,
            delta_vs_full: val_r2 - full_r2,
            param_count: params.count(),
            wall_time_secs: report.wall_time_secs,
            stopped_epoch: report.stopped_epoch,
        });
    }
    // Fill deltas now that the full score is known (full runs first).
    for row in rows.iter_mut() {
        row.delta_vs_full = row.val_r2 - full_r2;
    }
    Ok(rows)
}
