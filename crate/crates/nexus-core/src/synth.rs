//! Synthetic spatiotemporal air-quality data with known structure: a morning
//! diurnal peak, a winter seasonal peak, Poisson-arriving winter pollution
//! episodes, a northwest-elevated spatial gradient, multiplicative wind
//! damping, and negative temperature coupling. Because additive observation
//! noise is the last step, the R² of the best possible one-step predictor is
//! known exactly and can calibrate evaluation thresholds.

use chrono::{DateTime, Datelike, Duration, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, RawRecord, SiteMeta};
use crate::rng;
use crate::tensor::standard_normal;

/// Relative magnitudes of the three pollutant species.
pub const SPECIES_SCALE: [f64; 3] = [1.0, 0.6, 0.3];

const DAYS_PER_YEAR: f64 = 365.25;
const SKT_REFERENCE_K: f64 = 288.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_days: usize,
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub sites: Vec<SiteMeta>,
    /// Mean pollution level before modulation.
    pub baseline: f64,
    /// Amplitude of the 24 h harmonic, peaking at `morning_peak_hour`.
    pub diurnal_amp: f64,
    pub morning_peak_hour: f64,
    /// Amplitude of the 365 d harmonic, peaking at `winter_peak_day`.
    pub seasonal_amp: f64,
    pub winter_peak_day: f64,
    /// Pollution is multiplied by 1/(1 + wind_damping * wind_speed).
    pub wind_damping: f64,
    /// Pollution decreases by this factor per kelvin of temperature anomaly.
    pub temp_coupling: f64,
    /// Standard deviation of the additive observation noise.
    pub noise_scale: f64,
    /// Poisson arrival rate of winter episodes, per day.
    pub episode_rate_per_day: f64,
    /// Mean multiplier applied to exponentially distributed episode spikes.
    pub episode_amp: f64,
    /// Exponential decay time constant of an episode.
    pub episode_decay_hours: f64,
    /// Spread of the site offsets along the southeast-to-northwest axis.
    pub nw_gradient: f64,
}

/// Four sites on the corners of a small grid; the northwest corner carries
/// the highest pollution offset.
pub fn default_sites() -> Vec<SiteMeta> {
    vec![
        SiteMeta {
            id: "site_nw".into(),
            lat: 40.5,
            lon: -3.8,
        },
        SiteMeta {
            id: "site_ne".into(),
            lat: 40.5,
            lon: -3.5,
        },
        SiteMeta {
            id: "site_sw".into(),
            lat: 40.2,
            lon: -3.8,
        },
        SiteMeta {
            id: "site_se".into(),
            lat: 40.2,
            lon: -3.5,
        },
    ]
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_days: 730,
            seed: 0,
            start: Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap(),
            sites: default_sites(),
            baseline: 10.0,
            diurnal_amp: 3.0,
            morning_peak_hour: 5.0,
            seasonal_amp: 4.0,
            winter_peak_day: 349.0,
            wind_damping: 0.15,
            temp_coupling: 0.3,
            noise_scale: 1.40,
            episode_rate_per_day: 0.2,
            episode_amp: 6.0,
            episode_decay_hours: 24.0,
            nw_gradient: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_days < 30 {
            return Err(DataError::Config(format!(
                "n_days must be at least 30, got {}",
                self.n_days
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(DataError::Config("noise scale must be >= 0".into()));
        }
        if self.sites.is_empty() {
            return Err(DataError::Config("at least one site required".into()));
        }
        if self.episode_rate_per_day < 0.0 || self.episode_decay_hours <= 0.0 {
            return Err(DataError::Config("bad episode process parameters".into()));
        }
        Ok(())
    }
}

/// Position of each site along the southeast (-1) to northwest (+1) axis.
fn nw_scores(sites: &[SiteMeta]) -> Vec<f64> {
    let lat_min = sites.iter().map(|s| s.lat).fold(f64::INFINITY, f64::min);
    let lat_max = sites.iter().map(|s| s.lat).fold(f64::NEG_INFINITY, f64::max);
    let lon_min = sites.iter().map(|s| s.lon).fold(f64::INFINITY, f64::min);
    let lon_max = sites.iter().map(|s| s.lon).fold(f64::NEG_INFINITY, f64::max);
    sites
        .iter()
        .map(|s| {
            let north = if lat_max > lat_min {
                (s.lat - lat_min) / (lat_max - lat_min)
            } else {
                0.5
            };
            let west = if lon_max > lon_min {
                (lon_max - s.lon) / (lon_max - lon_min)
            } else {
                0.5
            };
            north + west - 1.0
        })
        .collect()
}

fn fractional_day_of_year(t: DateTime<Utc>) -> f64 {
    (t.ordinal() - 1) as f64 + t.hour() as f64 / 24.0
}

fn is_winter(t: DateTime<Utc>) -> bool {
    matches!(t.month(), 12 | 1 | 2)
}

/// Hourly meteorology for one site: (skt, u10, v10, ssr, tp).
struct MetPaths {
    skt: Vec<f64>,
    u10: Vec<f64>,
    v10: Vec<f64>,
    ssr: Vec<f64>,
    tp: Vec<f64>,
}

fn met_paths(cfg: &SynthConfig, site: &SiteMeta, n_hours: usize) -> MetPaths {
    use std::f64::consts::TAU;
    let mut skt_rng = rng::stream(cfg.seed, &format!("synth.skt.{}", site.id));
    let mut wind_rng = rng::stream(cfg.seed, &format!("synth.wind.{}", site.id));
    let mut rain_rng = rng::stream(cfg.seed, &format!("synth.rain.{}", site.id));
    // Small per-site phase so sites are correlated but not identical.
    let phase = nw_scores(&cfg.sites)
        .iter()
        .zip(&cfg.sites)
        .find(|(_, s)| s.id == site.id)
        .map(|(sc, _)| sc * 0.3)
        .unwrap_or(0.0);

    let mut skt = Vec::with_capacity(n_hours);
    let mut u10 = Vec::with_capacity(n_hours);
    let mut v10 = Vec::with_capacity(n_hours);
    let mut ssr = Vec::with_capacity(n_hours);
    let mut tp = Vec::with_capacity(n_hours);
    let (mut ar_t, mut ar_u, mut ar_v, mut ar_p) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for h in 0..n_hours {
        let t = cfg.start + Duration::hours(h as i64);
        let doy = fractional_day_of_year(t);
        let hod = t.hour() as f64;
        ar_t = 0.95 * ar_t + 0.3 * standard_normal(&mut skt_rng);
        ar_u = 0.9 * ar_u + 0.4 * standard_normal(&mut wind_rng);
        ar_v = 0.9 * ar_v + 0.4 * standard_normal(&mut wind_rng);
        ar_p = 0.8 * ar_p + standard_normal(&mut rain_rng);

        // Summer- and afternoon-peaking temperature.
        skt.push(
            SKT_REFERENCE_K
                + 12.0 * (TAU * (doy - 166.0) / DAYS_PER_YEAR).cos()
                + 4.0 * (TAU * (hod - 17.0) / 24.0).cos()
                + ar_t,
        );
        u10.push(1.5 + 1.2 * (TAU * (hod - 20.0) / 24.0 + phase).cos() + ar_u);
        v10.push(0.8 * (TAU * doy / DAYS_PER_YEAR).sin() + ar_v);
        // Daylight-shaped net solar radiation in J/m² per hour.
        let elevation = (TAU * (hod - 12.0) / 24.0).cos().max(0.0);
        let strength = 600.0 + 300.0 * (TAU * (doy - 172.0) / DAYS_PER_YEAR).cos();
        ssr.push(elevation * strength * 3600.0);
        // Sparse precipitation in meters per hour.
        tp.push((ar_p - 1.8).max(0.0) * 0.0005);
    }
    MetPaths {
        skt,
        u10,
        v10,
        ssr,
        tp,
    }
}

/// Hourly winter-episode intensity shared by all sites: Poisson arrivals of
/// exponentially distributed spikes that decay with the configured time
/// constant.
fn episode_path(cfg: &SynthConfig, n_hours: usize) -> Vec<f64> {
    use rand::Rng;
    let mut rng = rng::stream(cfg.seed, "synth.episodes");
    let decay = (-1.0 / cfg.episode_decay_hours).exp();
    let hourly_rate = cfg.episode_rate_per_day / 24.0;
    let mut level = 0.0;
    let mut out = Vec::with_capacity(n_hours);
    for h in 0..n_hours {
        let t = cfg.start + Duration::hours(h as i64);
        level *= decay;
        // Draw both variates unconditionally so the stream position does not
        // depend on the calendar.
        let arrives = rng.gen::<f64>() < hourly_rate;
        let size = -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln();
        if arrives && is_winter(t) {
            level += cfg.episode_amp * size;
        }
        out.push(level);
    }
    out
}

/// Noise-free pollution signal for one site at one grid stamp, given the
/// 3-hour window means of wind speed, temperature, and episode intensity.
fn signal_at(
    cfg: &SynthConfig,
    site_offset: f64,
    t: DateTime<Utc>,
    wind_mean: f64,
    skt_mean: f64,
    episode_mean: f64,
) -> f64 {
    use std::f64::consts::TAU;
    let doy = fractional_day_of_year(t);
    let hod = t.hour() as f64;
    let core = cfg.baseline
        + site_offset
        + cfg.diurnal_amp * (TAU * (hod - cfg.morning_peak_hour) / 24.0).cos()
        + cfg.seasonal_amp * (TAU * (doy - cfg.winter_peak_day) / DAYS_PER_YEAR).cos()
        + episode_mean;
    core / (1.0 + cfg.wind_damping * wind_mean) - cfg.temp_coupling * (skt_mean - SKT_REFERENCE_K)
}

/// The noise-free signal for every (grid stamp, site), in generation order.
pub struct SignalPoint {
    pub t: DateTime<Utc>,
    pub site: usize,
    pub signal: f64,
}

fn simulate(cfg: &SynthConfig) -> Result<(Vec<RawRecord>, Vec<SignalPoint>), DataError> {
    cfg.validate()?;
    let n_hours = cfg.n_days * 24;
    let met: Vec<MetPaths> = cfg
        .sites
        .iter()
        .map(|s| met_paths(cfg, s, n_hours))
        .collect();
    let episodes = episode_path(cfg, n_hours);
    let offsets: Vec<f64> = nw_scores(&cfg.sites)
        .iter()
        .map(|sc| cfg.nw_gradient * sc)
        .collect();
    let mut noise_rngs: Vec<Vec<_>> = cfg
        .sites
        .iter()
        .map(|s| {
            ["co", "no", "so2"]
                .iter()
                .map(|sp| rng::stream(cfg.seed, &format!("synth.noise.{}.{sp}", s.id)))
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(n_hours * cfg.sites.len());
    let mut signals = Vec::new();
    for h in 0..n_hours {
        let t = cfg.start + Duration::hours(h as i64);
        let on_grid = t.hour() % 3 == 2;
        for (i, site) in cfg.sites.iter().enumerate() {
            let m = &met[i];
            let mut rec = RawRecord {
                timestamp: t,
                site_id: site.id.clone(),
                lat: site.lat,
                lon: site.lon,
                co: None,
                no: None,
                so2: None,
                tp: Some(m.tp[h]),
                ssr: Some(m.ssr[h]),
                u10: Some(m.u10[h]),
                v10: Some(m.v10[h]),
                skt: Some(m.skt[h]),
            };
            if on_grid && h >= 2 {
                let window = h - 2..=h;
                let mean = |xs: &[f64]| xs[window.clone()].iter().sum::<f64>() / 3.0;
                let wind_mean = window
                    .clone()
                    .map(|k| m.u10[k].hypot(m.v10[k]))
                    .sum::<f64>()
                    / 3.0;
                let s = signal_at(
                    cfg,
                    offsets[i],
                    t,
                    wind_mean,
                    mean(&m.skt),
                    mean(&episodes),
                );
                signals.push(SignalPoint {
                    t,
                    site: i,
                    signal: s,
                });
                let mut species = [0.0; 3];
                for (k, out) in species.iter_mut().enumerate() {
                    let eps = standard_normal(&mut noise_rngs[i][k]);
                    *out = SPECIES_SCALE[k] * (s + cfg.noise_scale * eps);
                }
                rec.co = Some(species[0]);
                rec.no = Some(species[1]);
                rec.so2 = Some(species[2]);
            }
            records.push(rec);
        }
    }
    Ok((records, signals))
}

/// Deterministic synthetic record stream: one hourly row per site, with
/// pollutants populated at the 3-hour grid stamps.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<RawRecord>, DataError> {
    simulate(cfg).map(|(records, _)| records)
}

/// Records plus the noise-free signal underlying each pollutant observation.
pub fn generate_with_signal(
    cfg: &SynthConfig,
) -> Result<(Vec<RawRecord>, Vec<SignalPoint>), DataError> {
    simulate(cfg)
}

/// R² of a predictor that knows the signal exactly and is blind only to the
/// additive observation noise.
pub fn r2_bound_from_variances(signal_var: f64, noise_var: f64) -> f64 {
    if signal_var + noise_var == 0.0 {
        return 1.0;
    }
    signal_var / (signal_var + noise_var)
}

/// R² of the Bayes-optimal one-step predictor under this config: the
/// realized (noise-free) signal variance against the configured noise
/// variance. Identical for all three species because their scale factors
/// multiply signal and noise alike.
pub fn ground_truth_r2_bound(cfg: &SynthConfig) -> Result<f64, DataError> {
    let (_, signals) = simulate(cfg)?;
    let n = signals.len() as f64;
    let mean = signals.iter().map(|p| p.signal).sum::<f64>() / n;
    let var = signals
        .iter()
        .map(|p| (p.signal - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(r2_bound_from_variances(var, cfg.noise_scale.powi(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{quality_control, write_raw_csv, FEATURE_NAMES};

    fn short_config() -> SynthConfig {
        SynthConfig {
            n_days: 60,
            ..SynthConfig::default()
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (
            a.iter().sum::<f64>() / n,
            b.iter().sum::<f64>() / n,
        );
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let (va, vb): (f64, f64) = (
            a.iter().map(|x| (x - ma).powi(2)).sum(),
            b.iter().map(|y| (y - mb).powi(2)).sum(),
        );
        cov / (va * vb).sqrt()
    }

    #[test]
    fn rejects_invalid_configs() {
        for cfg in [
            SynthConfig {
                n_days: 10,
                ..SynthConfig::default()
            },
            SynthConfig {
                noise_scale: -1.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                sites: vec![],
                ..SynthConfig::default()
            },
            SynthConfig {
                episode_decay_hours: 0.0,
                ..SynthConfig::default()
            },
        ] {
            assert!(generate(&cfg).is_err());
        }
    }

    #[test]
    fn emits_one_hourly_row_per_site() {
        let cfg = short_config();
        let records = generate(&cfg).unwrap();
        assert_eq!(records.len(), 4 * 60 * 24);
        // Pollutants only at grid stamps (hours 2, 5, ..., 23).
        for r in &records {
            use chrono::Timelike;
            let expected = r.timestamp.hour() % 3 == 2;
            assert_eq!(r.co.is_some(), expected, "{}", r.timestamp);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_csv_bytes() {
        let cfg = short_config();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_raw_csv(&p1, &generate(&cfg).unwrap()).unwrap();
        write_raw_csv(&p2, &generate(&cfg).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // A different seed changes the bytes.
        let other = SynthConfig {
            seed: 1,
            ..short_config()
        };
        let p3 = dir.path().join("c.csv");
        write_raw_csv(&p3, &generate(&other).unwrap()).unwrap();
        assert_ne!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn noiseless_uncoupled_series_is_two_cosines_plus_constant() {
        use std::f64::consts::TAU;
        let cfg = SynthConfig {
            noise_scale: 0.0,
            wind_damping: 0.0,
            temp_coupling: 0.0,
            episode_rate_per_day: 0.0,
            ..short_config()
        };
        let records = generate(&cfg).unwrap();
        let offsets: Vec<f64> = nw_scores(&cfg.sites)
            .iter()
            .map(|s| cfg.nw_gradient * s)
            .collect();
        for r in records.iter().filter(|r| r.co.is_some()) {
            let i = cfg.sites.iter().position(|s| s.id == r.site_id).unwrap();
            let doy = fractional_day_of_year(r.timestamp);
            let hod = r.timestamp.hour() as f64;
            let expected = cfg.baseline
                + offsets[i]
                + cfg.diurnal_amp * (TAU * (hod - cfg.morning_peak_hour) / 24.0).cos()
                + cfg.seasonal_amp * (TAU * (doy - cfg.winter_peak_day) / DAYS_PER_YEAR).cos();
            assert!((r.co.unwrap() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn temperature_is_anticorrelated_with_pollution() {
        let cfg = SynthConfig::default(); // two years
        let records = generate(&cfg).unwrap();
        let (ds, report) = quality_control(&records, 2.0).unwrap();
        assert_eq!(report.dropped_timestamps, 0);
        let skt = FEATURE_NAMES.iter().position(|&f| f == "skt").unwrap();
        let mut temps = Vec::new();
        let mut co = Vec::new();
        for s in 0..ds.n_sites() {
            for t in 0..ds.n_times() {
                temps.push(ds.value(s, t, skt));
                co.push(ds.value(s, t, 0));
            }
        }
        let r = pearson(&temps, &co);
        assert!(r <= -0.3, "corr(skt, co) = {r}");
    }

    #[test]
    fn northwest_site_is_most_polluted() {
        let cfg = SynthConfig::default();
        let records = generate(&cfg).unwrap();
        let (ds, _) = quality_control(&records, 2.0).unwrap();
        let mean_co: Vec<f64> = (0..ds.n_sites())
            .map(|s| {
                (0..ds.n_times()).map(|t| ds.value(s, t, 0)).sum::<f64>() / ds.n_times() as f64
            })
            .collect();
        let nw = ds.sites.iter().position(|s| s.id == "site_nw").unwrap();
        let se = ds.sites.iter().position(|s| s.id == "site_se").unwrap();
        for (i, m) in mean_co.iter().enumerate() {
            if i != nw {
                assert!(mean_co[nw] > *m, "nw should dominate site {i}");
            }
        }
        assert!(mean_co[nw] - mean_co[se] > 1.0);
    }

    #[test]
    fn diurnal_peak_lands_in_the_morning_bin() {
        let cfg = SynthConfig::default();
        let records = generate(&cfg).unwrap();
        let (ds, _) = quality_control(&records, 2.0).unwrap();
        // Mean co per grid hour (2, 5, ..., 23).
        let mut sums = std::collections::BTreeMap::<u32, (f64, usize)>::new();
        for t in 0..ds.n_times() {
            let hour = ds.timestamps[t].hour();
            let e = sums.entry(hour).or_insert((0.0, 0));
            for s in 0..ds.n_sites() {
                e.0 += ds.value(s, t, 0);
                e.1 += 1;
            }
        }
        let peak_hour = *sums
            .iter()
            .max_by(|a, b| (a.1 .0 / a.1 .1 as f64).total_cmp(&(b.1 .0 / b.1 .1 as f64)))
            .unwrap()
            .0;
        assert_eq!(peak_hour, 5, "morning peak should fall at the 05:00 stamp");
    }

    #[test]
    fn monthly_means_peak_in_winter() {
        let cfg = SynthConfig::default();
        let records = generate(&cfg).unwrap();
        let (ds, _) = quality_control(&records, 2.0).unwrap();
        let mut by_month = std::collections::BTreeMap::<u32, (f64, usize)>::new();
        for t in 0..ds.n_times() {
            let m = ds.timestamps[t].month();
            let e = by_month.entry(m).or_insert((0.0, 0));
            for s in 0..ds.n_sites() {
                e.0 += ds.value(s, t, 0);
                e.1 += 1;
            }
        }
        let peak_month = *by_month
            .iter()
            .max_by(|a, b| (a.1 .0 / a.1 .1 as f64).total_cmp(&(b.1 .0 / b.1 .1 as f64)))
            .unwrap()
            .0;
        assert!(
            matches!(peak_month, 11 | 12),
            "peak month {peak_month} should be early winter"
        );
    }

    #[test]
    fn r2_bound_definition() {
        assert_eq!(r2_bound_from_variances(9.0, 1.0), 0.9);
        let noiseless = SynthConfig {
            noise_scale: 0.0,
            ..short_config()
        };
        assert_eq!(ground_truth_r2_bound(&noiseless).unwrap(), 1.0);
    }

    #[test]
    fn default_bound_is_near_the_calibration_target() {
        let bound = ground_truth_r2_bound(&SynthConfig::default()).unwrap();
        assert!(
            (bound - 0.95).abs() < 0.02,
            "default Bayes bound {bound} should sit near 0.95"
        );
    }

    #[test]
    fn bound_matches_brute_force_simulation() {
        let cfg = SynthConfig::default();
        let bound = ground_truth_r2_bound(&cfg).unwrap();
        let (records, signals) = generate_with_signal(&cfg).unwrap();
        // Predict each co observation with its noise-free signal.
        let mut obs = Vec::new();
        let mut pred = Vec::new();
        let mut k = 0;
        for r in records.iter().filter(|r| r.co.is_some()) {
            let p = &signals[k];
            assert_eq!(p.t, r.timestamp);
            obs.push(r.co.unwrap());
            pred.push(SPECIES_SCALE[0] * p.signal);
            k += 1;
        }
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let ss_res: f64 = obs.iter().zip(&pred).map(|(o, p)| (o - p).powi(2)).sum();
        let ss_tot: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
        let r2 = 1.0 - ss_res / ss_tot;
        assert!((r2 - bound).abs() < 0.02, "empirical {r2} vs bound {bound}");
    }
}
