//! Window featurization: robust statistics, motion/energy measures and
//! frequency-domain features per appearance channel.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ChannelSchema, SessionTimeline};
use crate::windowing::{Window, WindowRef};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature spec: {0}")]
    Spec(String),
    #[error("invalid series: {0}")]
    Series(String),
    #[error("dft needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("frame at {t_ms} ms has {found} channel values, schema declares {expected}")]
    Arity { t_ms: u64, expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One channel of a window: samples plus a face-detected mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    pub values: Vec<f64>,
    pub valid_mask: Vec<bool>,
    pub dt_s: f64,
}

impl ChannelSeries {
    pub fn new(values: Vec<f64>, valid_mask: Vec<bool>, dt_s: f64) -> Result<Self, FeatureError> {
        if values.is_empty() || values.len() != valid_mask.len() {
            return Err(FeatureError::Series(format!(
                "{} values with {} mask entries",
                values.len(),
                valid_mask.len()
            )));
        }
        if !(dt_s.is_finite() && dt_s > 0.0) {
            return Err(FeatureError::Series(format!("dt_s must be positive, got {dt_s}")));
        }
        Ok(ChannelSeries {
            values,
            valid_mask,
            dt_s,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputed {
    pub values: Vec<f64>,
    /// No valid sample existed; `values` are all zero.
    pub all_invalid: bool,
}

/// Fills invalid samples by linear interpolation between the nearest valid
/// neighbours, and edge runs with the nearest valid value.
pub fn impute(series: &ChannelSeries) -> Imputed {
    let valid: Vec<usize> = (0..series.values.len()).filter(|&i| series.valid_mask[i]).collect();
    let (Some(&first), Some(&last)) = (valid.first(), valid.last()) else {
        return Imputed {
            values: vec![0.0; series.values.len()],
            all_invalid: true,
        };
    };
    let x = &series.values;
    let mut out = x.clone();
    out[..first].fill(x[first]);
    out[last + 1..].fill(x[last]);
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let span = (b - a) as f64;
        for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / span;
            *slot = x[a] + (x[b] - x[a]) * w;
        }
    }
    Imputed {
        values: out,
        all_invalid: false,
    }
}

/// Percentile of sorted data by linear interpolation between closest ranks,
/// at position `p * (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean computed around a pivot so a constant slice returns its value exactly.
fn pivot_mean(values: &[f64]) -> f64 {
    let pivot = values[0];
    pivot + values.iter().map(|v| v - pivot).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RobustStats {
    pub median: f64,
    pub mad: f64,
    pub iqr: f64,
    pub p10: f64,
    pub p90: f64,
    pub trimmed_mean: f64,
    pub min: f64,
    pub max: f64,
    pub range: f64,
}

impl RobustStats {
    pub const NAMES: [&'static str; 9] = [
        "median",
        "mad",
        "iqr",
        "p10",
        "p90",
        "trimmed_mean",
        "min",
        "max",
        "range",
    ];

    pub fn to_array(self) -> [f64; 9] {
        [
            self.median,
            self.mad,
            self.iqr,
            self.p10,
            self.p90,
            self.trimmed_mean,
            self.min,
            self.max,
            self.range,
        ]
    }
}

pub fn robust_stats(values: &[f64], trim_fraction: f64) -> RobustStats {
    assert!(!values.is_empty(), "robust_stats of empty series");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = percentile_sorted(&sorted, 0.5);
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let k = ((trim_fraction * n as f64).floor() as usize).min((n - 1) / 2);
    let (min, max) = (sorted[0], sorted[n - 1]);
    RobustStats {
        median,
        mad: percentile_sorted(&dev, 0.5),
        iqr: percentile_sorted(&sorted, 0.75) - percentile_sorted(&sorted, 0.25),
        p10: percentile_sorted(&sorted, 0.1),
        p90: percentile_sorted(&sorted, 0.9),
        trimmed_mean: pivot_mean(&sorted[k..n - k]),
        min,
        max,
        range: max - min,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionEnergy {
    pub mean_abs_vel: f64,
    pub max_abs_vel: f64,
    pub mean_abs_acc: f64,
    /// Sum of squares of the mean-removed series.
    pub signal_energy: f64,
    /// Sign changes of the mean-removed series per second.
    pub zero_crossing_rate: f64,
}

impl MotionEnergy {
    pub const NAMES: [&'static str; 5] = [
        "mean_abs_vel",
        "max_abs_vel",
        "mean_abs_acc",
        "signal_energy",
        "zero_crossing_rate",
    ];

    pub fn to_array(self) -> [f64; 5] {
        [
            self.mean_abs_vel,
            self.max_abs_vel,
            self.mean_abs_acc,
            self.signal_energy,
            self.zero_crossing_rate,
        ]
    }
}

fn centered(values: &[f64]) -> Vec<f64> {
    let mean = pivot_mean(values);
    values.iter().map(|v| v - mean).collect()
}

pub fn motion_energy(values: &[f64], dt_s: f64) -> MotionEnergy {
    let n = values.len();
    let mut out = MotionEnergy::default();
    if n == 0 {
        return out;
    }
    if n >= 2 {
        let vel = values.windows(2).map(|w| ((w[1] - w[0]) / dt_s).abs());
        let (sum, max) = vel.fold((0.0, 0.0f64), |(s, m), v| (s + v, m.max(v)));
        out.mean_abs_vel = sum / (n - 1) as f64;
        out.max_abs_vel = max;
    }
    if n >= 3 {
        let acc: f64 = values
            .windows(3)
            .map(|w| ((w[2] - 2.0 * w[1] + w[0]) / (dt_s * dt_s)).abs())
            .sum();
        out.mean_abs_acc = acc / (n - 2) as f64;
    }
    let c = centered(values);
    out.signal_energy = c.iter().map(|v| v * v).sum();
    if n >= 2 {
        let mut crossings = 0usize;
        let mut prev_sign = 0i8;
        for &v in &c {
            let s = if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            };
            if s != 0 {
                if prev_sign != 0 && s != prev_sign {
                    crossings += 1;
                }
                prev_sign = s;
            }
        }
        out.zero_crossing_rate = crossings as f64 / ((n - 1) as f64 * dt_s);
    }
    out
}

/// Twiddle table for a length-`n` transform, indexed by `(k * j) mod n`.
#[derive(Debug, Clone)]
pub struct DftPlan {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl DftPlan {
    pub fn new(n: usize) -> Result<Self, FeatureError> {
        if n < 2 {
            return Err(FeatureError::TooShort(n));
        }
        let twiddles = (0..n)
            .map(|j| Complex64::from_polar(1.0, -2.0 * PI * j as f64 / n as f64))
            .collect();
        Ok(DftPlan { n, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// One-sided spectrum `X_0 ..= X_{n/2}` of a real signal.
    pub fn one_sided(&self, values: &[f64]) -> Vec<Complex64> {
        assert_eq!(values.len(), self.n, "plan length mismatch");
        let n = self.n;
        (0..=n / 2)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                let mut idx = 0usize;
                for &x in values {
                    acc += self.twiddles[idx] * x;
                    idx += k;
                    if idx >= n {
                        idx -= n;
                    }
                }
                acc
            })
            .collect()
    }
}

/// Naive O(N²) one-sided DFT, `X_k = Σ x_n e^{-2πikn/N}` for `k = 0..=N/2`.
pub fn dft(values: &[f64]) -> Result<Vec<Complex64>, FeatureError> {
    Ok(DftPlan::new(values.len())?.one_sided(values))
}

/// One-sided power per bin, scaled so that `Σ_k P_k = Σ_n x_n²`.
pub fn one_sided_power(spectrum: &[Complex64], n: usize) -> Vec<f64> {
    spectrum
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
            let fold = if edge { 1.0 } else { 2.0 };
            fold * x.norm_sqr() / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpectralFeatures {
    pub dominant_freq_hz: f64,
    /// Shannon entropy (nats) of the normalized non-DC power distribution.
    pub spectral_entropy: f64,
    pub total_band_power: f64,
    pub band_powers: Vec<f64>,
}

pub fn spectral_features(values: &[f64], dt_s: f64, bands_hz: &[[f64; 2]]) -> SpectralFeatures {
    match DftPlan::new(values.len()) {
        Ok(plan) => spectral_with_plan(&plan, values, dt_s, bands_hz),
        Err(_) => SpectralFeatures {
            band_powers: vec![0.0; bands_hz.len()],
            ..Default::default()
        },
    }
}

fn spectral_with_plan(plan: &DftPlan, values: &[f64], dt_s: f64, bands_hz: &[[f64; 2]]) -> SpectralFeatures {
    let n = values.len();
    let power = one_sided_power(&plan.one_sided(&centered(values)), n);
    let bin_hz = 1.0 / (n as f64 * dt_s);
    let ac = &power[1..];
    let total: f64 = ac.iter().sum();
    let mut out = SpectralFeatures {
        band_powers: vec![0.0; bands_hz.len()],
        ..Default::default()
    };
    if total <= 0.0 {
        return out;
    }
    let mut best = 0usize;
    for (i, &p) in ac.iter().enumerate() {
        if p > ac[best] {
            best = i;
        }
    }
    out.dominant_freq_hz = (best + 1) as f64 * bin_hz;
    out.spectral_entropy = -ac
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            q * q.ln()
        })
        .sum::<f64>();
    for (slot, &[lo, hi]) in out.band_powers.iter_mut().zip(bands_hz) {
        *slot = ac
            .iter()
            .enumerate()
            .filter(|&(i, _)| {
                let f = (i + 1) as f64 * bin_hz;
                f >= lo && f < hi
            })
            .map(|(_, p)| p)
            .sum();
    }
    out.total_band_power = out.band_powers.iter().sum();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Families {
    pub robust_stats: bool,
    pub motion_energy: bool,
    pub spectral: bool,
}

impl Default for Families {
    fn default() -> Self {
        Families {
            robust_stats: true,
            motion_energy: true,
            spectral: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub families: Families,
    pub bands_hz: Vec<[f64; 2]>,
    pub trim_fraction: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            families: Families::default(),
            bands_hz: vec![[0.1, 0.5], [0.5, 1.0], [1.0, 2.0], [2.0, 4.0]],
            trim_fraction: 0.1,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<(), FeatureError> {
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(FeatureError::Spec(format!(
                "trim_fraction must lie in [0, 0.5), got {}",
                self.trim_fraction
            )));
        }
        let nyquist = sample_rate_hz / 2.0;
        for &[lo, hi] in &self.bands_hz {
            if !(lo > 0.0 && lo < hi && hi <= nyquist) {
                return Err(FeatureError::Spec(format!(
                    "band [{lo}, {hi}) must satisfy 0 < low < high <= {nyquist}"
                )));
            }
        }
        Ok(())
    }

    fn per_channel_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        if self.families.robust_stats {
            names.extend(RobustStats::NAMES.iter().map(|s| s.to_string()));
        }
        if self.families.motion_energy {
            names.extend(MotionEnergy::NAMES.iter().map(|s| s.to_string()));
        }
        if self.families.spectral {
            names.extend(
                ["dominant_freq_hz", "spectral_entropy", "total_band_power"]
                    .iter()
                    .map(|s| s.to_string()),
            );
            names.extend(self.bands_hz.iter().map(|[lo, hi]| format!("band_power_{lo}_{hi}")));
        }
        names
    }
}

pub const GLOBAL_FEATURES: [&str; 2] = ["valid_frame_ratio", "frame_count"];

/// Feature names in output order: per channel (schema order) then globals.
pub fn feature_names(schema: &ChannelSchema, spec: &FeatureSpec) -> Vec<String> {
    let stats = spec.per_channel_names();
    schema
        .names()
        .flat_map(|ch| stats.iter().map(move |s| format!("{ch}.{s}")))
        .chain(GLOBAL_FEATURES.iter().map(|s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub window_ref: WindowRef,
    pub values: Vec<f64>,
}

/// Reusable per-length state for featurizing many windows.
pub struct Featurizer<'a> {
    schema: &'a ChannelSchema,
    spec: &'a FeatureSpec,
    plan: Option<DftPlan>,
}

impl<'a> Featurizer<'a> {
    pub fn new(schema: &'a ChannelSchema, spec: &'a FeatureSpec) -> Result<Self, FeatureError> {
        spec.validate(schema.sample_rate_hz())?;
        Ok(Featurizer {
            schema,
            spec,
            plan: None,
        })
    }

    pub fn names(&self) -> Vec<String> {
        feature_names(self.schema, self.spec)
    }

    pub fn featurize(&mut self, window: &Window, timeline: &SessionTimeline) -> Result<FeatureVector, FeatureError> {
        let frames = &timeline.frames()[window.frame_range.clone()];
        let arity = self.schema.arity();
        if let Some(f) = frames.iter().find(|f| f.channels.len() != arity) {
            return Err(FeatureError::Arity {
                t_ms: f.t_ms,
                expected: arity,
                found: f.channels.len(),
            });
        }
        let n = frames.len();
        let dt_s = self.schema.frame_period_s();
        let per_channel = self.spec.per_channel_names().len();
        let mut values = Vec::with_capacity(arity * per_channel + GLOBAL_FEATURES.len());
        if n >= 2 && self.plan.as_ref().is_none_or(|p| p.len() != n) {
            self.plan = Some(DftPlan::new(n)?);
        }
        let mask: Vec<bool> = frames.iter().map(|f| f.face_detected).collect();
        for ch in 0..arity {
            let imputed = if n == 0 {
                Imputed {
                    values: vec![0.0],
                    all_invalid: true,
                }
            } else {
                impute(&ChannelSeries::new(
                    frames.iter().map(|f| f.channels[ch]).collect(),
                    mask.clone(),
                    dt_s,
                )?)
            };
            let x = &imputed.values;
            if self.spec.families.robust_stats {
                values.extend(robust_stats(x, self.spec.trim_fraction).to_array());
            }
            if self.spec.families.motion_energy {
                values.extend(motion_energy(x, dt_s).to_array());
            }
            if self.spec.families.spectral {
                let s = match &self.plan {
                    Some(plan) if n >= 2 => spectral_with_plan(plan, x, dt_s, &self.spec.bands_hz),
                    _ => spectral_features(x, dt_s, &self.spec.bands_hz),
                };
                values.extend([s.dominant_freq_hz, s.spectral_entropy, s.total_band_power]);
                values.extend(s.band_powers);
            }
        }
        values.push(window.valid_frame_ratio);
        values.push(n as f64);
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Ok(FeatureVector {
            window_ref: window.window_ref(),
            values,
        })
    }
}

/// Feature vector of one window, in [`feature_names`] order.
pub fn featurize_window(
    window: &Window,
    timeline: &SessionTimeline,
    schema: &ChannelSchema,
    spec: &FeatureSpec,
) -> Result<FeatureVector, FeatureError> {
    Featurizer::new(schema, spec)?.featurize(window, timeline)
}

/// Feature vectors keyed by window, with shared column names.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub rows: Vec<FeatureVector>,
}

pub fn write_feature_matrix<W: Write>(sink: W, matrix: &FeatureMatrix) -> Result<(), FeatureError> {
    let mut wtr = csv::Writer::from_writer(sink);
    let header: Vec<&str> = ["session_id", "index"]
        .into_iter()
        .chain(matrix.names.iter().map(String::as_str))
        .collect();
    wtr.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for fv in &matrix.rows {
        row.clear();
        row.push(fv.window_ref.session_id.clone());
        row.push(fv.window_ref.index.to_string());
        row.extend(fv.values.iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_feature_matrix<R: Read>(source: R) -> Result<FeatureMatrix, FeatureError> {
    let mut rdr = csv::Reader::from_reader(source);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "session_id" || &header[1] != "index" {
        return Err(FeatureError::Malformed {
            line: 1,
            message: "header must start with session_id,index".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| FeatureError::Malformed { line, message };
        let index = record[1]
            .parse()
            .map_err(|_| bad(format!("invalid index `{}`", &record[1])))?;
        let values = record
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(format!("invalid feature value `{v}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(FeatureVector {
            window_ref: WindowRef {
                session_id: record[0].to_string(),
                index,
            },
            values,
        });
    }
    Ok(FeatureMatrix { names, rows })
}
