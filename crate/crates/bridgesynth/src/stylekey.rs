//! Style key conditioning: normalized intensity histograms describing a
//! target volume's appearance.
//!
//! A key holds K windowed histograms over non-zero voxels (masked datasets
//! are mostly zero background, which would otherwise swamp the descriptor):
//! full range, a soft-tissue window and a vessel window, each B bins.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{IntensityDomain, Volume};

/// Default number of bins per histogram.
pub const DEFAULT_BINS: usize = 256;

/// Histogram windows in normalized units: full range, soft tissue
/// (HU [-160, 240]) and vessel (HU [0, 500]).
pub const WINDOWS: [(f64, f64); 3] = [(0.0, 1.0), (0.42, 0.62), (0.5, 0.75)];

/// Number of histograms per key.
pub const NUM_WINDOWS: usize = WINDOWS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StyleSource {
    #[serde(rename = "per-volume-ground-truth")]
    PerVolumeGroundTruth,
    #[serde(rename = "training-average")]
    TrainingAverage,
}

/// The set of normalized histograms conditioning the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleKey {
    pub histograms: Vec<Vec<f64>>,
    pub source: StyleSource,
}

impl StyleKey {
    pub fn windows(&self) -> usize {
        self.histograms.len()
    }

    pub fn bins(&self) -> usize {
        self.histograms.first().map_or(0, Vec::len)
    }

    /// Concatenated K*B vector fed to the denoiser's style projection.
    pub fn flatten(&self) -> Vec<f64> {
        self.histograms.iter().flatten().copied().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let key: StyleKey = serde_json::from_str(&text)?;
        if key.histograms.is_empty() {
            return Err(Error::InvalidArgument("style key has no histograms".into()));
        }
        let bins = key.histograms[0].len();
        if key.histograms.iter().any(|h| h.len() != bins) {
            return Err(Error::InvalidArgument(
                "style key histograms have inconsistent bin counts".into(),
            ));
        }
        Ok(key)
    }
}

fn uniform(bins: usize) -> Vec<f64> {
    vec![1.0 / bins as f64; bins]
}

fn windowed_histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    let scale = bins as f64 / (hi - lo);
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let bin = (((v - lo) * scale) as usize).min(bins - 1);
        counts[bin] += 1;
        total += 1;
    }
    if total == 0 {
        return uniform(bins);
    }
    counts
        .into_iter()
        .map(|c| c as f64 / total as f64)
        .collect()
}

/// Histogram descriptor of a normalized volume, over non-zero voxels only.
/// Windows with empty support fall back to a uniform histogram.
pub fn compute_style_key(v: &Volume, bins: usize) -> Result<StyleKey> {
    if v.domain() != IntensityDomain::Normalized {
        return Err(Error::InvalidArgument(
            "style keys are computed on normalized-unit volumes".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    let non_zero: Vec<f64> = v.data().iter().copied().filter(|&x| x != 0.0).collect();
    let histograms = WINDOWS
        .iter()
        .map(|&(lo, hi)| windowed_histogram(&non_zero, lo, hi, bins))
        .collect();
    Ok(StyleKey {
        histograms,
        source: StyleSource::PerVolumeGroundTruth,
    })
}

/// Per-bin arithmetic mean of a non-empty set of keys with identical shape.
pub fn average_style_keys(keys: &[StyleKey]) -> Result<StyleKey> {
    let first = keys
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average an empty key list".into()))?;
    let (k, b) = (first.windows(), first.bins());
    for key in keys {
        if key.windows() != k || key.bins() != b {
            return Err(Error::ShapeMismatch(format!(
                "style key shape ({}, {}) != ({k}, {b})",
                key.windows(),
                key.bins()
            )));
        }
    }
    let mut histograms = vec![vec![0.0; b]; k];
    for key in keys {
        for (acc, h) in histograms.iter_mut().zip(&key.histograms) {
            for (a, &x) in acc.iter_mut().zip(h) {
                *a += x;
            }
        }
    }
    let n = keys.len() as f64;
    for h in &mut histograms {
        for a in h.iter_mut() {
            *a /= n;
        }
    }
    Ok(StyleKey {
        histograms,
        source: StyleSource::TrainingAverage,
    })
}
