//! Ingestion, quality control, and supervised window construction.
//!
//! Raw site records (hourly meteorology, 3-hourly pollutants) are aggregated
//! to a common 3-hour grid, spatially aligned by inverse-distance weighting,
//! stripped of incomplete timestamps, robust-normalized with training-span
//! statistics, and sliced into leakage-safe sliding windows.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Array;

/// Feature order of every aligned table: pollutants first, then meteorology.
pub const FEATURE_NAMES: [&str; 9] = [
    "co",
    "no",
    "so2",
    "tp",
    "ssr",
    "u10",
    "v10",
    "wind_speed",
    "skt",
];
pub const N_FEATURES: usize = 9;
pub const N_POLLUTANTS: usize = 3;

/// 3-hour grid spacing in seconds.
pub const STEP_SECONDS: i64 = 10_800;

const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Below this separation a target is treated as collocated with a source.
const COLLOCATION_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv format: {0}")]
    Format(String),
    #[error("record {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty result: {0}")]
    Empty(String),
}

/// One row of the ingestion CSV. Pollutants are reported every 3 hours,
/// meteorology hourly; absent cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub timestamp: DateTime<Utc>,
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub co: Option<f64>,
    pub no: Option<f64>,
    pub so2: Option<f64>,
    pub tp: Option<f64>,
    pub ssr: Option<f64>,
    pub u10: Option<f64>,
    pub v10: Option<f64>,
    pub skt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

/// Per-feature robust statistics from the training span.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub median: Vec<f64>,
    /// Interquartile range clamped to 1.0 for constant features.
    pub scale: Vec<f64>,
    pub constant: Vec<bool>,
}

/// Gap-free feature table on the 3-hour grid, `[site][time][feature]`.
#[derive(Debug, Clone)]
pub struct AlignedDataset {
    pub sites: Vec<SiteMeta>,
    /// Strictly increasing, on the 3-hour grid; quality control may leave
    /// gaps, which window construction skips over.
    pub timestamps: Vec<DateTime<Utc>>,
    features: Vec<f64>,
    pub normalization: Option<NormStats>,
}

impl AlignedDataset {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_times(&self) -> usize {
        self.timestamps.len()
    }

    pub fn value(&self, site: usize, t: usize, feature: usize) -> f64 {
        self.features[(site * self.timestamps.len() + t) * N_FEATURES + feature]
    }

    pub fn set(&mut self, site: usize, t: usize, feature: usize, v: f64) {
        let n = self.timestamps.len();
        self.features[(site * n + t) * N_FEATURES + feature] = v;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropReport {
    /// 3-hour grid stamps between the first and last observation.
    pub total_timestamps: usize,
    pub kept_timestamps: usize,
    pub dropped_timestamps: usize,
    /// Stamps on which each feature was missing at one or more sites.
    pub missing_by_feature: BTreeMap<String, usize>,
}

/// One supervised sample: a normalized input window and the normalized
/// pollutant vector one step (3 hours) after it.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// `[L, T, D]`.
    pub x: Array,
    /// `[L, K]` pollutants at `t_target`.
    pub y: Array,
    pub t_target: DateTime<Utc>,
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "timestamp,site_id,lat,lon,co,no,so2,tp,ssr,u10,v10,skt";

fn parse_cell(field: &str, line: usize, name: &str) -> Result<Option<f64>, DataError> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| DataError::Record {
            line,
            msg: format!("unparseable {name} value {field:?}"),
        })
}

pub fn parse_raw_csv<R: Read>(reader: R) -> Result<Vec<RawRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| DataError::Format(e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(DataError::Format(format!(
            "header must be exactly {CSV_HEADER:?}, got {header:?}"
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let row = row.map_err(|e| DataError::Record {
            line,
            msg: e.to_string(),
        })?;
        let timestamp = DateTime::parse_from_rfc3339(&row[0])
            .map_err(|e| DataError::Record {
                line,
                msg: format!("bad timestamp {:?}: {e}", &row[0]),
            })?
            .with_timezone(&Utc);
        let lat: f64 = row[2].parse().map_err(|_| DataError::Record {
            line,
            msg: format!("bad lat {:?}", &row[2]),
        })?;
        let lon: f64 = row[3].parse().map_err(|_| DataError::Record {
            line,
            msg: format!("bad lon {:?}", &row[3]),
        })?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(DataError::Record {
                line,
                msg: format!("coordinates out of range: ({lat}, {lon})"),
            });
        }
        records.push(RawRecord {
            timestamp,
            site_id: row[1].to_string(),
            lat,
            lon,
            co: parse_cell(&row[4], line, "co")?,
            no: parse_cell(&row[5], line, "no")?,
            so2: parse_cell(&row[6], line, "so2")?,
            tp: parse_cell(&row[7], line, "tp")?,
            ssr: parse_cell(&row[8], line, "ssr")?,
            u10: parse_cell(&row[9], line, "u10")?,
            v10: parse_cell(&row[10], line, "v10")?,
            skt: parse_cell(&row[11], line, "skt")?,
        });
    }
    Ok(records)
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<RawRecord>, DataError> {
    parse_raw_csv(std::fs::File::open(path)?)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_raw_csv(path: &Path, records: &[RawRecord]) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{:?},{:?},{},{},{},{},{},{},{},{}",
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ"),
            r.site_id,
            r.lat,
            r.lon,
            fmt_cell(r.co),
            fmt_cell(r.no),
            fmt_cell(r.so2),
            fmt_cell(r.tp),
            fmt_cell(r.ssr),
            fmt_cell(r.u10),
            fmt_cell(r.v10),
            fmt_cell(r.skt),
        )?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Spatial and temporal alignment
// ---------------------------------------------------------------------------

/// Scalar wind speed from the 10 m wind components.
pub fn compute_wind_speed(u: f64, v: f64) -> f64 {
    u.hypot(v)
}

/// Great-circle distance in meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

/// Inverse-distance-weighted interpolation of source values at a target
/// location. A source within 1 m of the target is taken exactly.
pub fn idw_align(
    target: (f64, f64),
    sources: &[((f64, f64), f64)],
    power: f64,
) -> Result<f64, DataError> {
    if sources.is_empty() {
        return Err(DataError::Empty(
            "no source values for interpolation".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &((lat, lon), value) in sources {
        let d = haversine_m(target.0, target.1, lat, lon);
        if d < COLLOCATION_M {
            return Ok(value);
        }
        let w = d.powf(-power);
        num += w * value;
        den += w;
    }
    Ok(num / den)
}

/// Mean of the present values, or `None` if the window is empty.
fn window_mean(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() == values.len() {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    } else {
        None
    }
}

fn window_sum(values: &[Option<f64>]) -> Option<f64> {
    if values.iter().all(Option::is_some) {
        Some(values.iter().flatten().sum())
    } else {
        None
    }
}

/// Hourly meteorology for one site, keyed by timestamp.
type HourlySeries = BTreeMap<DateTime<Utc>, RawRecord>;

/// Aggregated 3-hourly values for one site at one grid stamp; feature order
/// follows [`FEATURE_NAMES`].
fn aggregate_stamp(hourly: &HourlySeries, label: DateTime<Utc>) -> [Option<f64>; N_FEATURES] {
    let hours: Vec<Option<&RawRecord>> = (0..3)
        .rev()
        .map(|back| hourly.get(&(label - Duration::hours(back))))
        .collect();
    let met = |get: fn(&RawRecord) -> Option<f64>| -> Vec<Option<f64>> {
        hours.iter().map(|r| r.and_then(get)).collect()
    };

    // Pollutants are instantaneous readings at the grid stamp itself.
    let at_label = hourly.get(&label);
    let mut out = [None; N_FEATURES];
    out[0] = at_label.and_then(|r| r.co);
    out[1] = at_label.and_then(|r| r.no);
    out[2] = at_label.and_then(|r| r.so2);
    // Precipitation accumulates; everything else is a state variable.
    out[3] = window_sum(&met(|r| r.tp));
    out[4] = window_mean(&met(|r| r.ssr));
    out[5] = window_mean(&met(|r| r.u10));
    out[6] = window_mean(&met(|r| r.v10));
    let speeds: Vec<Option<f64>> = hours
        .iter()
        .map(|r| {
            r.and_then(|r| match (r.u10, r.v10) {
                (Some(u), Some(v)) => Some(compute_wind_speed(u, v)),
                _ => None,
            })
        })
        .collect();
    out[7] = window_mean(&speeds);
    out[8] = window_mean(&met(|r| r.skt));
    out
}

/// 3-hourly aggregation of one site's hourly series. Windows are labeled by
/// their last hour; grid stamps sit at hours 2, 5, ..., 23 UTC so each day
/// splits into eight whole windows. A window missing any contributing hour
/// yields a gap for that feature.
pub fn aggregate_3hourly(
    hourly: &HourlySeries,
    grid: &[DateTime<Utc>],
) -> BTreeMap<DateTime<Utc>, [Option<f64>; N_FEATURES]> {
    grid.iter()
        .map(|&label| (label, aggregate_stamp(hourly, label)))
        .collect()
}

fn is_grid_stamp(t: DateTime<Utc>) -> bool {
    use chrono::Timelike;
    t.hour() % 3 == 2 && t.minute() == 0 && t.second() == 0 && t.nanosecond() == 0
}

/// All 3-hour grid stamps between the first and last observation.
fn grid_stamps(records: &[RawRecord]) -> Vec<DateTime<Utc>> {
    let first = records.iter().map(|r| r.timestamp).min();
    let last = records.iter().map(|r| r.timestamp).max();
    let (Some(first), Some(last)) = (first, last) else {
        return Vec::new();
    };
    let mut t = first;
    while !is_grid_stamp(t) {
        t += Duration::hours(1);
    }
    let mut out = Vec::new();
    while t <= last {
        out.push(t);
        t += Duration::seconds(STEP_SECONDS);
    }
    out
}

/// Aggregate, spatially align, and drop every timestamp that is incomplete
/// at any site. Fails if nothing survives.
pub fn quality_control(
    records: &[RawRecord],
    idw_power: f64,
) -> Result<(AlignedDataset, DropReport), DataError> {
    if records.is_empty() {
        return Err(DataError::Empty("no input records".into()));
    }
    // Group by site; site metadata must be self-consistent.
    let mut by_site: BTreeMap<String, (SiteMeta, HourlySeries)> = BTreeMap::new();
    for r in records {
        let entry = by_site.entry(r.site_id.clone()).or_insert_with(|| {
            (
                SiteMeta {
                    id: r.site_id.clone(),
                    lat: r.lat,
                    lon: r.lon,
                },
                BTreeMap::new(),
            )
        });
        if (entry.0.lat - r.lat).abs() > 1e-9 || (entry.0.lon - r.lon).abs() > 1e-9 {
            return Err(DataError::Config(format!(
                "site {} has inconsistent coordinates",
                r.site_id
            )));
        }
        entry.1.insert(r.timestamp, r.clone());
    }
    let sites: Vec<SiteMeta> = by_site.values().map(|(m, _)| m.clone()).collect();
    let grid = grid_stamps(records);

    // Per-site aggregation onto the grid.
    let aggregated: Vec<BTreeMap<DateTime<Utc>, [Option<f64>; N_FEATURES]>> = by_site
        .values()
        .map(|(_, hourly)| aggregate_3hourly(hourly, &grid))
        .collect();

    // Fill missing meteorology (features 3..9) from other sites by IDW.
    let mut table: Vec<Vec<[Option<f64>; N_FEATURES]>> = aggregated
        .iter()
        .map(|m| grid.iter().map(|t| m[t]).collect())
        .collect();
    for (ti, _) in grid.iter().enumerate() {
        for f in N_POLLUTANTS..N_FEATURES {
            let sources: Vec<((f64, f64), f64)> = sites
                .iter()
                .zip(&table)
                .filter_map(|(meta, rows)| rows[ti][f].map(|v| ((meta.lat, meta.lon), v)))
                .collect();
            if sources.is_empty() {
                continue;
            }
            for (si, meta) in sites.iter().enumerate() {
                if table[si][ti][f].is_none() {
                    table[si][ti][f] =
                        Some(idw_align((meta.lat, meta.lon), &sources, idw_power)?);
                }
            }
        }
    }

    // Drop any stamp that is incomplete anywhere.
    let mut report = DropReport {
        total_timestamps: grid.len(),
        ..DropReport::default()
    };
    let mut kept: Vec<usize> = Vec::new();
    for (ti, _) in grid.iter().enumerate() {
        let mut complete = true;
        for (f, name) in FEATURE_NAMES.iter().enumerate() {
            if table.iter().any(|rows| rows[ti][f].is_none()) {
                *report.missing_by_feature.entry(name.to_string()).or_insert(0) += 1;
                complete = false;
            }
        }
        if complete {
            kept.push(ti);
        }
    }
    report.kept_timestamps = kept.len();
    report.dropped_timestamps = report.total_timestamps - kept.len();
    if kept.is_empty() {
        return Err(DataError::Empty(
            "quality control removed every timestamp".into(),
        ));
    }

    let timestamps: Vec<DateTime<Utc>> = kept.iter().map(|&ti| grid[ti]).collect();
    let n = timestamps.len();
    let mut features = vec![0.0; sites.len() * n * N_FEATURES];
    for (si, rows) in table.iter().enumerate() {
        for (out_t, &ti) in kept.iter().enumerate() {
            for f in 0..N_FEATURES {
                features[(si * n + out_t) * N_FEATURES + f] = rows[ti][f].unwrap();
            }
        }
    }
    Ok((
        AlignedDataset {
            sites,
            timestamps,
            features,
            normalization: None,
        },
        report,
    ))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Linear-interpolation quantile of a sorted slice (the convention used by
/// most statistics packages by default): index = (n-1)p with interpolation
/// between neighboring order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&p));
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Median and IQR per feature, pooled over all sites and the training
/// timesteps only.
pub fn compute_norm_stats(dataset: &AlignedDataset, train: Range<usize>) -> NormStats {
    let mut median = Vec::with_capacity(N_FEATURES);
    let mut scale = Vec::with_capacity(N_FEATURES);
    let mut constant = Vec::with_capacity(N_FEATURES);
    for f in 0..N_FEATURES {
        let mut values: Vec<f64> = (0..dataset.n_sites())
            .flat_map(|s| train.clone().map(move |t| (s, t)))
            .map(|(s, t)| dataset.value(s, t, f))
            .collect();
        values.sort_by(f64::total_cmp);
        let med = quantile_sorted(&values, 0.5);
        let iqr = quantile_sorted(&values, 0.75) - quantile_sorted(&values, 0.25);
        let is_constant = iqr < 1e-12;
        median.push(med);
        scale.push(if is_constant { 1.0 } else { iqr });
        constant.push(is_constant);
    }
    NormStats {
        median,
        scale,
        constant,
    }
}

pub fn robust_normalize(x: f64, median: f64, scale: f64) -> f64 {
    (x - median) / scale
}

pub fn denormalize(z: f64, median: f64, scale: f64) -> f64 {
    z * scale + median
}

/// Apply the statistics in place and record them on the dataset.
pub fn normalize_dataset(dataset: &mut AlignedDataset, stats: &NormStats) {
    for s in 0..dataset.n_sites() {
        for t in 0..dataset.n_times() {
            for f in 0..N_FEATURES {
                let z = robust_normalize(dataset.value(s, t, f), stats.median[f], stats.scale[f]);
                dataset.set(s, t, f, z);
            }
        }
    }
    dataset.normalization = Some(stats.clone());
}

// ---------------------------------------------------------------------------
// Splits and windows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Validation and test spans start at the given instants; training is
    /// everything before `val_start`.
    Dates {
        val_start: DateTime<Utc>,
        test_start: DateTime<Utc>,
    },
    /// Contiguous fractions of the timeline.
    Fractions { train: f64, val: f64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Dates {
            val_start: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
            test_start: Utc.with_ymd_and_hms(2021, 7, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Index ranges of the three disjoint contiguous spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn temporal_split(dataset: &AlignedDataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    let n = dataset.n_times();
    let (val_at, test_at) = match spec {
        SplitSpec::Dates {
            val_start,
            test_start,
        } => {
            if test_start <= val_start {
                return Err(DataError::Config(
                    "test_start must come after val_start".into(),
                ));
            }
            let val_at = dataset.timestamps.partition_point(|t| t < val_start);
            let test_at = dataset.timestamps.partition_point(|t| t < test_start);
            (val_at, test_at)
        }
        SplitSpec::Fractions { train, val } => {
            if !(*train > 0.0 && *val > 0.0 && train + val < 1.0) {
                return Err(DataError::Config(format!(
                    "fractions must be positive with train+val < 1, got {train} and {val}"
                )));
            }
            let val_at = (n as f64 * train).round() as usize;
            let test_at = (n as f64 * (train + val)).round() as usize;
            (val_at, test_at)
        }
    };
    Ok(Splits {
        train: 0..val_at,
        val: val_at..test_at,
        test: test_at..n,
    })
}

/// Stride-1 sliding windows wholly inside one split, requiring an unbroken
/// 3-hour cadence across the window and its target so that quality-control
/// gaps never leak into a sample.
pub fn build_windows(
    dataset: &AlignedDataset,
    split: Range<usize>,
    lookback: usize,
    horizon: usize,
) -> Vec<WindowSample> {
    let l = dataset.n_sites();
    let span = split.len();
    if span < lookback + horizon {
        return Vec::new();
    }
    let mut out = Vec::new();
    for start in split.start..=(split.end - lookback - horizon) {
        let target = start + lookback + horizon - 1;
        let contiguous = (start..target).all(|i| {
            (dataset.timestamps[i + 1] - dataset.timestamps[i]).num_seconds() == STEP_SECONDS
        });
        if !contiguous {
            continue;
        }
        let mut x = Vec::with_capacity(l * lookback * N_FEATURES);
        for s in 0..l {
            for t in start..start + lookback {
                for f in 0..N_FEATURES {
                    x.push(dataset.value(s, t, f));
                }
            }
        }
        let mut y = Vec::with_capacity(l * N_POLLUTANTS);
        for s in 0..l {
            for f in 0..N_POLLUTANTS {
                y.push(dataset.value(s, target, f));
            }
        }
        out.push(WindowSample {
            x: Array::from_vec(vec![l, lookback, N_FEATURES], x).unwrap(),
            y: Array::from_vec(vec![l, N_POLLUTANTS], y).unwrap(),
            t_target: dataset.timestamps[target],
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub fn write_aligned_csv(path: &Path, dataset: &AlignedDataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "timestamp,site_id,lat,lon,{}", FEATURE_NAMES.join(","))?;
    for (t, stamp) in dataset.timestamps.iter().enumerate() {
        for (s, site) in dataset.sites.iter().enumerate() {
            let values: Vec<String> = (0..N_FEATURES)
                .map(|f| format!("{:.16e}", dataset.value(s, t, f)))
                .collect();
            writeln!(
                w,
                "{},{},{:?},{:?},{}",
                stamp.format("%Y-%m-%dT%H:%M:%SZ"),
                site.id,
                site.lat,
                site.lon,
                values.join(",")
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_aligned_csv`]. Normalization state is not stored in
/// the table itself; reattach it from the stats sidecar if needed.
pub fn read_aligned_csv(path: &Path) -> Result<AlignedDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let expected = format!("timestamp,site_id,lat,lon,{}", FEATURE_NAMES.join(","));
    match lines.next() {
        Some((_, h)) if h == expected => {}
        Some((_, h)) => {
            return Err(DataError::Format(format!(
                "aligned table header mismatch: got {h:?}"
            )))
        }
        None => return Err(DataError::Empty("empty aligned table".into())),
    }
    let mut sites: Vec<SiteMeta> = Vec::new();
    let mut timestamps: Vec<DateTime<Utc>> = Vec::new();
    // (timestamp index, site index) -> feature row, reassembled at the end.
    let mut rows: Vec<(usize, usize, [f64; N_FEATURES])> = Vec::new();
    for (i, line) in lines {
        let bad = |msg: String| DataError::Record { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + N_FEATURES {
            return Err(bad(format!("expected {} fields", 4 + N_FEATURES)));
        }
        let stamp = DateTime::parse_from_rfc3339(fields[0])
            .map_err(|e| bad(format!("bad timestamp: {e}")))?
            .with_timezone(&Utc);
        let t = match timestamps.last() {
            Some(last) if *last == stamp => timestamps.len() - 1,
            Some(last) if *last > stamp => {
                return Err(bad("timestamps out of order".into()))
            }
            _ => {
                timestamps.push(stamp);
                timestamps.len() - 1
            }
        };
        let id = fields[1];
        let s = match sites.iter().position(|m| m.id == id) {
            Some(s) => s,
            None => {
                let lat = fields[2]
                    .parse()
                    .map_err(|_| bad(format!("bad lat {:?}", fields[2])))?;
                let lon = fields[3]
                    .parse()
                    .map_err(|_| bad(format!("bad lon {:?}", fields[3])))?;
                sites.push(SiteMeta {
                    id: id.to_string(),
                    lat,
                    lon,
                });
                sites.len() - 1
            }
        };
        let mut values = [0.0; N_FEATURES];
        for (f, cell) in fields[4..].iter().enumerate() {
            values[f] = cell.parse().map_err(|_| {
                bad(format!("bad {} value {cell:?}", FEATURE_NAMES[f]))
            })?;
        }
        rows.push((t, s, values));
    }
    if sites.is_empty() {
        return Err(DataError::Empty("aligned table has no rows".into()));
    }
    if rows.len() != sites.len() * timestamps.len() {
        return Err(DataError::Format(format!(
            "aligned table is ragged: {} rows for {} sites x {} stamps",
            rows.len(),
            sites.len(),
            timestamps.len()
        )));
    }
    let mut dataset = AlignedDataset {
        sites,
        timestamps,
        features: vec![f64::NAN; rows.len() * N_FEATURES],
        normalization: None,
    };
    for (t, s, values) in rows {
        for (f, v) in values.into_iter().enumerate() {
            dataset.set(s, t, f, v);
        }
    }
    Ok(dataset)
}

/// Sidecar of normalization statistics: canonical key order, floats at 17
/// significant digits so the values round-trip exactly.
pub fn write_norm_stats(path: &Path, stats: &NormStats) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{{")?;
    for (f, name) in FEATURE_NAMES.iter().enumerate() {
        let comma = if f + 1 < N_FEATURES { "," } else { "" };
        writeln!(
            w,
            "  \"{name}\": {{\"median\": {:.16e}, \"scale\": {:.16e}, \"constant\": {}}}{comma}",
            stats.median[f], stats.scale[f], stats.constant[f]
        )?;
    }
    writeln!(w, "}}")?;
    w.flush()?;
    Ok(())
}

pub fn read_norm_stats(path: &Path) -> Result<NormStats, DataError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |msg: &str| DataError::Format(format!("norm stats sidecar: {msg}"));
    let mut stats = NormStats {
        median: Vec::new(),
        scale: Vec::new(),
        constant: Vec::new(),
    };
    for name in FEATURE_NAMES {
        let key = format!("\"{name}\": {{");
        let at = text
            .find(&key)
            .ok_or_else(|| bad(&format!("missing feature {name}")))?;
        let rest = &text[at + key.len()..];
        let end = rest.find('}').ok_or_else(|| bad("unterminated entry"))?;
        let mut median = None;
        let mut scale = None;
        let mut constant = None;
        for part in rest[..end].split(',') {
            let (k, v) = part
                .split_once(':')
                .ok_or_else(|| bad("malformed entry"))?;
            let v = v.trim();
            match k.trim().trim_matches('"') {
                "median" => median = Some(v.parse().map_err(|_| bad("bad median"))?),
                "scale" => scale = Some(v.parse().map_err(|_| bad("bad scale"))?),
                "constant" => constant = Some(v.parse().map_err(|_| bad("bad flag"))?),
                other => return Err(bad(&format!("unknown key {other}"))),
            }
        }
        stats.median.push(median.ok_or_else(|| bad("no median"))?);
        stats.scale.push(scale.ok_or_else(|| bad("no scale"))?);
        stats
            .constant
            .push(constant.ok_or_else(|| bad("no constant flag"))?);
    }
    Ok(stats)
}

/// Distinct site ids in first-appearance-independent (sorted) order.
pub fn site_ids(records: &[RawRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.site_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
