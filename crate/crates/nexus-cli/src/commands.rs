//! Subcommand implementations. Each command reads its inputs from explicit
//! paths (defaulting to the standard artifact names inside the output
//! directory), writes its artifacts there, and prints a short summary.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::Duration;

use nexus_core::data::{
    self, build_windows, read_aligned_csv, read_norm_stats, temporal_split, AlignedDataset,
    NormStats, WindowSample, FEATURE_NAMES, N_POLLUTANTS, STEP_SECONDS,
};
use nexus_core::metrics::{
    composite_pollution, diurnal_profile, monthly_means, pearson_correlation,
    regime_stratify, residual_diagnostics, MetricsReport,
};
use nexus_core::model::{self, load_checkpoint, save_checkpoint};
use nexus_core::synth;
use nexus_core::train::{self, run_ablation, TrainReport};
use nexus_core::{Array, NexusConfig, NexusParams};

use crate::config::RunConfig;
use crate::CliError;

const RAW_CSV: &str = "raw.csv";
const ALIGNED_CSV: &str = "aligned.csv";
const NORM_STATS_JSON: &str = "norm_stats.json";
const CHECKPOINT: &str = "model.ckpt";

/// The model forecasts the next 3-hour step.
const HORIZON: usize = 1;

fn species_names(k: usize) -> Vec<&'static str> {
    FEATURE_NAMES[..k].to_vec()
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn generate(
    cfg: &RunConfig,
    out_dir: &Path,
    days: Option<usize>,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut synth_cfg = cfg.synth.clone();
    if let Some(days) = days {
        synth_cfg.n_days = days;
    }
    synth_cfg.validate().map_err(CliError::from)?;
    let records = synth::generate(&synth_cfg)?;
    let path = output.unwrap_or_else(|| out_dir.join(RAW_CSV));
    data::write_raw_csv(&path, &records)?;
    println!(
        "generate: {} rows ({} sites x {} days x 24 h) -> {}",
        records.len(),
        synth_cfg.sites.len(),
        synth_cfg.n_days,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

pub fn prepare(cfg: &RunConfig, out_dir: &Path, input: Option<PathBuf>) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| out_dir.join(RAW_CSV));
    let records = data::read_raw_csv(&input)?;
    let (dataset, report) = data::quality_control(&records, cfg.idw_power)?;
    let splits = temporal_split(&dataset, &cfg.split)?;
    if splits.train.is_empty() {
        return Err(CliError::Validation(
            "training split is empty; check the split configuration".into(),
        ));
    }
    let stats = data::compute_norm_stats(&dataset, splits.train.clone());
    data::write_aligned_csv(&out_dir.join(ALIGNED_CSV), &dataset)?;
    data::write_norm_stats(&out_dir.join(NORM_STATS_JSON), &stats)?;
    println!(
        "prepare: kept {} of {} grid timestamps ({} dropped); splits train/val/test = {}/{}/{}",
        report.kept_timestamps,
        report.total_timestamps,
        report.dropped_timestamps,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared loading for the model-facing commands
// ---------------------------------------------------------------------------

/// Aligned table plus sidecar, with features normalized for the model.
fn load_prepared(
    out_dir: &Path,
    data_path: Option<&Path>,
) -> Result<(AlignedDataset, NormStats), CliError> {
    let aligned = data_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join(ALIGNED_CSV));
    let stats_path = match data_path {
        Some(p) => p
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(NORM_STATS_JSON),
        None => out_dir.join(NORM_STATS_JSON),
    };
    let mut dataset = read_aligned_csv(&aligned)?;
    let stats = read_norm_stats(&stats_path)?;
    data::normalize_dataset(&mut dataset, &stats);
    Ok((dataset, stats))
}

fn check_model_matches_data(cfg: &NexusConfig, dataset: &AlignedDataset) -> Result<(), CliError> {
    if cfg.sites != dataset.n_sites() {
        return Err(CliError::Validation(format!(
            "model expects {} sites but the prepared dataset has {}",
            cfg.sites,
            dataset.n_sites()
        )));
    }
    if cfg.features != data::N_FEATURES {
        return Err(CliError::Validation(format!(
            "model expects {} features but the pipeline produces {}",
            cfg.features,
            data::N_FEATURES
        )));
    }
    Ok(())
}

fn split_windows(
    cfg: &RunConfig,
    dataset: &AlignedDataset,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>, Vec<WindowSample>), CliError> {
    let splits = temporal_split(dataset, &cfg.split)?;
    let t = cfg.model.lookback;
    let train_w = build_windows(dataset, splits.train, t, HORIZON);
    let val_w = build_windows(dataset, splits.val, t, HORIZON);
    let test_w = build_windows(dataset, splits.test, t, HORIZON);
    Ok((train_w, val_w, test_w))
}

fn require_windows(windows: &[WindowSample], split: &str) -> Result<(), CliError> {
    if windows.is_empty() {
        return Err(CliError::Validation(format!(
            "the {split} split yields no supervised windows; lower lookback or extend the data"
        )));
    }
    Ok(())
}

fn write_train_report(path: &Path, report: &TrainReport) -> Result<(), CliError> {
    let mut text = String::from("epoch,lr,train_loss,val_loss\n");
    for e in &report.epochs {
        writeln!(
            text,
            "{},{:?},{:?},{:?}",
            e.epoch, e.lr, e.train_loss, e.val_loss
        )
        .unwrap();
    }
    write_file(path, &text)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train_cmd(cfg: &RunConfig, out_dir: &Path, data_path: Option<PathBuf>) -> Result<(), CliError> {
    let (dataset, _) = load_prepared(out_dir, data_path.as_deref())?;
    check_model_matches_data(&cfg.model, &dataset)?;
    let (train_w, val_w, _) = split_windows(cfg, &dataset)?;
    require_windows(&train_w, "train")?;
    require_windows(&val_w, "validation")?;
    let mut params = model::init_params(&cfg.model, cfg.train.seed)?;
    let report = train::train(&cfg.model, &mut params, &train_w, &val_w, &cfg.train)?;
    save_checkpoint(&out_dir.join(CHECKPOINT), &cfg.model, &params)?;
    write_train_report(&out_dir.join("train_report.csv"), &report)?;
    println!(
        "train: {} parameters, stopped after {} epochs, best val loss {:.6}, {:.1}s",
        report.param_count, report.stopped_epoch, report.best_val_loss, report.wall_time_secs
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Per-species observation/prediction series on the physical scale.
fn denormalized_predictions(
    cfg: &NexusConfig,
    params: &NexusParams,
    windows: &[WindowSample],
    stats: &NormStats,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), CliError> {
    let (mut obs, mut pred) = train::collect_predictions(cfg, params, windows)?;
    for j in 0..cfg.output_species.min(N_POLLUTANTS) {
        for v in obs[j].iter_mut().chain(pred[j].iter_mut()) {
            *v = data::denormalize(*v, stats.median[j], stats.scale[j]);
        }
    }
    Ok((obs, pred))
}

fn metrics_csv(report: &MetricsReport) -> String {
    let mut text = String::from("species,r2,rmse,mae,smape_pct,ioa,nse\n");
    let rows = report
        .per_species
        .iter()
        .map(|(n, m)| (n.as_str(), m))
        .chain(std::iter::once(("average", &report.average)));
    for (name, m) in rows {
        writeln!(
            text,
            "{name},{:?},{:?},{:?},{:?},{:?},{:?}",
            m.r2, m.rmse, m.mae, m.smape_pct, m.ioa, m.nse
        )
        .unwrap();
    }
    text
}

pub fn evaluate(
    cfg: &RunConfig,
    config_given: bool,
    out_dir: &Path,
    checkpoint: Option<PathBuf>,
    data_path: Option<PathBuf>,
    split: &str,
) -> Result<(), CliError> {
    let ckpt = checkpoint.unwrap_or_else(|| out_dir.join(CHECKPOINT));
    let (ckpt_cfg, params) = load_checkpoint(&ckpt)?;
    if config_given && ckpt_cfg != cfg.model {
        return Err(CliError::Mismatch(format!(
            "checkpoint {} was trained with a different model configuration",
            ckpt.display()
        )));
    }
    let (dataset, stats) = load_prepared(out_dir, data_path.as_deref())?;
    check_model_matches_data(&ckpt_cfg, &dataset)
        .map_err(|e| CliError::Mismatch(e.message().to_string()))?;
    let (train_w, val_w, test_w) = split_windows(cfg, &dataset)?;
    let windows = match split {
        "train" => train_w,
        "val" => val_w,
        "test" => test_w,
        other => {
            return Err(CliError::Validation(format!(
                "unknown split {other:?}; expected train, val, or test"
            )))
        }
    };
    require_windows(&windows, split)?;
    let (obs, pred) = denormalized_predictions(&ckpt_cfg, &params, &windows, &stats)?;
    let names = species_names(ckpt_cfg.output_species);
    let triples: Vec<(&str, &[f64], &[f64])> = names
        .iter()
        .zip(obs.iter().zip(pred.iter()))
        .map(|(&n, (o, p))| (n, o.as_slice(), p.as_slice()))
        .collect();
    let report = MetricsReport::compute(&triples)?;
    if !report.average.r2.is_finite() {
        return Err(CliError::Numerical(
            "metrics are not finite; the model likely diverged".into(),
        ));
    }
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&report))?;

    let mut residuals =
        String::from("species,fitted,residual,sqrt_abs_residual,theoretical_quantile\n");
    for (j, name) in names.iter().enumerate() {
        for row in residual_diagnostics(&obs[j], &pred[j])? {
            writeln!(
                residuals,
                "{name},{:?},{:?},{:?},{:?}",
                row.fitted, row.residual, row.sqrt_abs_residual, row.theoretical_quantile
            )
            .unwrap();
        }
    }
    write_file(&out_dir.join("residuals.csv"), &residuals)?;
    println!(
        "evaluate: {} split, {} samples, average R2 {:.4}, RMSE {:.4}",
        split, report.n_samples, report.average.r2, report.average.rmse
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn ablate(cfg: &RunConfig, out_dir: &Path, data_path: Option<PathBuf>) -> Result<(), CliError> {
    let (dataset, _) = load_prepared(out_dir, data_path.as_deref())?;
    check_model_matches_data(&cfg.model, &dataset)?;
    let (train_w, val_w, _) = split_windows(cfg, &dataset)?;
    require_windows(&train_w, "train")?;
    require_windows(&val_w, "validation")?;
    let names = species_names(cfg.model.output_species);
    let rows = run_ablation(&cfg.model, &train_w, &val_w, &cfg.train, &names)?;
    let mut text =
        String::from("variant,val_r2,delta_vs_full,param_count,wall_time_secs,stopped_epoch\n");
    for r in &rows {
        writeln!(
            text,
            "{},{:?},{:?},{},{:?},{}",
            r.name, r.val_r2, r.delta_vs_full, r.param_count, r.wall_time_secs, r.stopped_epoch
        )
        .unwrap();
    }
    write_file(&out_dir.join("ablation.csv"), &text)?;
    println!("ablate: {} variants written to ablation.csv", rows.len());
    for r in &rows {
        println!(
            "  {:<22} val R2 {:>8.4}  delta {:>8.4}  params {:>6}",
            r.name, r.val_r2, r.delta_vs_full, r.param_count
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// Site-mean series of one feature on the physical scale.
fn site_mean_series(dataset: &AlignedDataset, feature: usize) -> Vec<f64> {
    let l = dataset.n_sites() as f64;
    (0..dataset.n_times())
        .map(|t| {
            (0..dataset.n_sites())
                .map(|s| dataset.value(s, t, feature))
                .sum::<f64>()
                / l
        })
        .collect()
}

pub fn analyze(cfg: &RunConfig, out_dir: &Path, data_path: Option<PathBuf>) -> Result<(), CliError> {
    let aligned = data_path.unwrap_or_else(|| out_dir.join(ALIGNED_CSV));
    // Descriptive statistics are computed on physical values, so the aligned
    // table is used as written, without normalization.
    let dataset = read_aligned_csv(&aligned)?;
    let splits = temporal_split(&dataset, &cfg.split)?;
    if splits.train.is_empty() {
        return Err(CliError::Validation("training split is empty".into()));
    }
    let series: Vec<Vec<f64>> = (0..data::N_FEATURES)
        .map(|f| site_mean_series(&dataset, f))
        .collect();
    let maxima: [f64; 3] = std::array::from_fn(|j| {
        series[j][splits.train.clone()]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let composite: Vec<f64> = (0..dataset.n_times())
        .map(|t| composite_pollution(series[0][t], series[1][t], series[2][t], maxima))
        .collect::<Result<_, _>>()?;

    let diurnal = diurnal_profile(&composite, &dataset.timestamps)?;
    let mut text = String::from("bin,start_hour,mean_composite\n");
    for (b, v) in diurnal.iter().enumerate() {
        let cell = v.map(|x| format!("{x:?}")).unwrap_or_default();
        writeln!(text, "{b},{},{cell}", b * 3).unwrap();
    }
    write_file(&out_dir.join("diurnal.csv"), &text)?;

    let monthly = monthly_means(&composite, &dataset.timestamps)?;
    let mut text = String::from("month,mean_composite\n");
    for (m, v) in monthly.iter().enumerate() {
        let cell = v.map(|x| format!("{x:?}")).unwrap_or_default();
        writeln!(text, "{},{cell}", m + 1).unwrap();
    }
    write_file(&out_dir.join("monthly.csv"), &text)?;

    let skt_idx = FEATURE_NAMES.iter().position(|&n| n == "skt").unwrap();
    let wind_idx = FEATURE_NAMES
        .iter()
        .position(|&n| n == "wind_speed")
        .unwrap();
    let regime = regime_stratify(&composite, &series[skt_idx], &series[wind_idx])?;
    let mut text = String::from("temp_quartile,wind_quartile,mean_composite,count\n");
    for ti in 0..4 {
        for wi in 0..4 {
            let cell = regime.mean[ti][wi]
                .map(|x| format!("{x:?}"))
                .unwrap_or_default();
            writeln!(text, "{ti},{wi},{cell},{}", regime.count[ti][wi]).unwrap();
        }
    }
    write_file(&out_dir.join("regime.csv"), &text)?;

    let mut text = String::from("feature,pearson_r\n");
    for (f, name) in FEATURE_NAMES.iter().enumerate().skip(N_POLLUTANTS) {
        let r = pearson_correlation(&series[f], &composite)?;
        writeln!(text, "{name},{r:?}").unwrap();
    }
    write_file(&out_dir.join("correlations.csv"), &text)?;

    let peak_bin = diurnal
        .iter()
        .enumerate()
        .filter_map(|(b, v)| v.map(|x| (b, x)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(b, _)| b);
    let peak_month = monthly
        .iter()
        .enumerate()
        .filter_map(|(m, v)| v.map(|x| (m + 1, x)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(m, _)| m);
    println!(
        "analyze: temp/wind quartile bounds {:?} / {:?}; peak diurnal bin {:?}, peak month {:?}",
        regime.temp_bounds, regime.wind_bounds, peak_bin, peak_month
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub fn predict(
    out_dir: &Path,
    checkpoint: Option<PathBuf>,
    data_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let ckpt = checkpoint.unwrap_or_else(|| out_dir.join(CHECKPOINT));
    let (cfg, params) = load_checkpoint(&ckpt)?;
    let (dataset, stats) = load_prepared(out_dir, data_path.as_deref())?;
    check_model_matches_data(&cfg, &dataset)
        .map_err(|e| CliError::Mismatch(e.message().to_string()))?;
    let (l, t, d) = (cfg.sites, cfg.lookback, cfg.features);
    let n = dataset.n_times();
    if n < t {
        return Err(CliError::Validation(format!(
            "need at least {t} timestamps for the lookback window, have {n}"
        )));
    }
    let start = n - t;
    for i in start..n - 1 {
        let gap = (dataset.timestamps[i + 1] - dataset.timestamps[i]).num_seconds();
        if gap != STEP_SECONDS {
            return Err(CliError::Validation(format!(
                "lookback window has a gap at {}; cannot forecast",
                dataset.timestamps[i + 1]
            )));
        }
    }
    let mut x = Vec::with_capacity(l * t * d);
    for s in 0..l {
        for i in start..n {
            for f in 0..d {
                x.push(dataset.value(s, i, f));
            }
        }
    }
    let x = Array::from_vec(vec![l, t, d], x).map_err(|e| CliError::Numerical(e.to_string()))?;
    let (pred, _) = model::predict(&cfg, &params, &x)?;
    if !pred.iter().all(|v| v.is_finite()) {
        return Err(CliError::Numerical("forecast is not finite".into()));
    }
    let when = dataset.timestamps[n - 1] + Duration::seconds(STEP_SECONDS);
    let names = species_names(cfg.output_species);
    let mut text = format!("timestamp,site_id,{}\n", names.join(","));
    let k = cfg.output_species;
    let rows: Vec<(String, &[f64])> = match cfg.output_mode {
        nexus_core::OutputMode::PerSite => dataset
            .sites
            .iter()
            .enumerate()
            .map(|(s, m)| (m.id.clone(), &pred.data()[s * k..(s + 1) * k]))
            .collect(),
        nexus_core::OutputMode::Pooled => vec![("pooled".to_string(), pred.data())],
    };
    for (site, values) in rows {
        let cells: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let v = if j < N_POLLUTANTS {
                    data::denormalize(v, stats.median[j], stats.scale[j])
                } else {
                    v
                };
                format!("{v:?}")
            })
            .collect();
        writeln!(
            text,
            "{},{site},{}",
            when.format("%Y-%m-%dT%H:%M:%SZ"),
            cells.join(",")
        )
        .unwrap();
    }
    write_file(&out_dir.join("forecast.csv"), &text)?;
    println!(
        "predict: forecast for {} written to forecast.csv",
        when.format("%Y-%m-%dT%H:%M:%SZ")
    );
    Ok(())
}
