//! Full-volume NRMSE, PSNR, SSIM and their non-zero-voxel variants.
//!
//! PSNR reports an infinity sentinel on identical inputs; NRMSE normalizes
//! by the ground-truth intensity range; SSIM is computed per axial slice
//! with an 11x11 Gaussian window (sigma 1.5) over valid centres and averaged
//! over slices. NZ variants restrict scoring to the union (default) or
//! intersection of the non-zero supports of ground truth and prediction.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// SSIM window size (11x11) and Gaussian sigma.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_shapes(gt: &Volume, pred: &Volume) -> Result<()> {
    if gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gt {:?} vs pred {:?}",
            gt.shape(),
            pred.shape()
        )));
    }
    Ok(())
}

fn mse(gt: &[f64], pred: &[f64]) -> f64 {
    let n = gt.len() as f64;
    gt.iter()
        .zip(pred)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when MSE is zero.
pub fn psnr(gt: &Volume, pred: &Volume, range: f64) -> Result<f64> {
    check_shapes(gt, pred)?;
    if range <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "psnr range must be > 0, got {range}"
        )));
    }
    let err = mse(gt.data(), pred.data());
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / err).log10())
}

/// RMSE divided by the ground-truth intensity range.
pub fn nrmse(gt: &Volume, pred: &Volume) -> Result<f64> {
    check_shapes(gt, pred)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in gt.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range == 0.0 {
        return Err(Error::Metric(
            "nrmse undefined: ground truth is constant".into(),
        ));
    }
    Ok((mse(gt.data(), pred.data())).sqrt() / range)
}

fn gaussian_kernel_1d() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable convolution with a symmetric 1-D kernel applied
/// along x then y. Output is (h - win + 1) x (w - win + 1).
fn separable_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let win = k.len();
    let wv = w - win + 1;
    let hv = h - win + 1;
    let mut rows = vec![0.0; h * wv];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            rows[y * wv + x] = acc;
        }
    }
    let mut out = vec![0.0; hv * wv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}

/// Per-pixel SSIM map of one slice over valid window centres.
/// Returns a (h-10) x (w-10) map for the 11x11 window.
pub fn ssim_map_2d(gt: &[f64], pred: &[f64], h: usize, w: usize, range: f64) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim needs in-plane size >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if gt.len() != h * w || pred.len() != h * w {
        return Err(Error::ShapeMismatch("ssim slice length".into()));
    }
    let k = gaussian_kernel_1d();
    let sq_gt: Vec<f64> = gt.iter().map(|&v| v * v).collect();
    let sq_pred: Vec<f64> = pred.iter().map(|&v| v * v).collect();
    let cross: Vec<f64> = gt.iter().zip(pred).map(|(&a, &b)| a * b).collect();
    let mu_x = separable_valid(gt, h, w, &k);
    let mu_y = separable_valid(pred, h, w, &k);
    let exx = separable_valid(&sq_gt, h, w, &k);
    let eyy = separable_valid(&sq_pred, h, w, &k);
    let exy = separable_valid(&cross, h, w, &k);
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let mut map = vec![0.0; mu_x.len()];
    for i in 0..map.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = exx[i] - mx * mx;
        let vy = eyy[i] - my * my;
        let cxy = exy[i] - mx * my;
        map[i] = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(map)
}

/// Volume SSIM: per-slice 2-D SSIM averaged over valid centres, then over
/// slices. Inputs are expected in normalized units (data range 1).
pub fn ssim(gt: &Volume, pred: &Volume) -> Result<f64> {
    ssim_with_range(gt, pred, 1.0)
}

pub fn ssim_with_range(gt: &Volume, pred: &Volume, range: f64) -> Result<f64> {
    check_shapes(gt, pred)?;
    let (z, h, w) = gt.shape();
    let mut total = 0.0;
    for zi in 0..z {
        let map = ssim_map_2d(gt.slice(zi), pred.slice(zi), h, w, range)?;
        total += map.iter().sum::<f64>() / map.len() as f64;
    }
    Ok(total / z as f64)
}

/// Support rule for the non-zero metric variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NzMode {
    /// Voxels non-zero in ground truth OR prediction (default).
    Union,
    /// Voxels non-zero in both.
    Intersection,
}

#[derive(Debug, Clone, Copy)]
pub struct NzMetrics {
    pub nrmse_nz: f64,
    pub psnr_nz: f64,
    pub ssim_nz: f64,
}

/// NRMSE/PSNR over the NZ support; SSIM as the full per-slice map averaged
/// over NZ centre positions. PSNR keeps the supplied data-range peak while
/// NRMSE normalizes by the ground-truth range over the support.
pub fn nz_metrics(gt: &Volume, pred: &Volume, range: f64, mode: NzMode) -> Result<NzMetrics> {
    check_shapes(gt, pred)?;
    let (z, h, w) = gt.shape();
    let in_support = |a: f64, b: f64| match mode {
        NzMode::Union => a != 0.0 || b != 0.0,
        NzMode::Intersection => a != 0.0 && b != 0.0,
    };

    let mut n = 0usize;
    let mut sq_err = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&a, &b) in gt.data().iter().zip(pred.data()) {
        if in_support(a, b) {
            n += 1;
            sq_err += (a - b) * (a - b);
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    if n == 0 {
        return Err(Error::Metric("empty NZ support".into()));
    }
    let err = sq_err / n as f64;
    let psnr_nz = if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / err).log10()
    };
    let gt_range = hi - lo;
    if gt_range == 0.0 {
        return Err(Error::Metric(
            "nrmse_nz undefined: ground truth constant over NZ support".into(),
        ));
    }
    let nrmse_nz = err.sqrt() / gt_range;

    let margin = SSIM_WINDOW / 2;
    let wv = w - SSIM_WINDOW + 1;
    let mut ssim_sum = 0.0;
    let mut ssim_n = 0usize;
    for zi in 0..z {
        let map = ssim_map_2d(gt.slice(zi), pred.slice(zi), h, w, range)?;
        let gs = gt.slice(zi);
        let ps = pred.slice(zi);
        for cy in margin..h - margin {
            for cx in margin..w - margin {
                let idx = cy * w + cx;
                if in_support(gs[idx], ps[idx]) {
                    ssim_sum += map[(cy - margin) * wv + (cx - margin)];
                    ssim_n += 1;
                }
            }
        }
    }
    if ssim_n == 0 {
        return Err(Error::Metric(
            "NZ support contains no valid SSIM window centres".into(),
        ));
    }
    Ok(NzMetrics {
        nrmse_nz,
        psnr_nz,
        ssim_nz: ssim_sum / ssim_n as f64,
    })
}

mod inf_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Text(_) => f64::INFINITY,
        })
    }
}

/// Per-case metric values. PSNR entries serialize the infinity sentinel as
/// the string `"inf"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub nrmse: f64,
    #[serde(with = "inf_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse_nz: f64,
    #[serde(with = "inf_serde")]
    pub psnr_nz: f64,
    pub ssim_nz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "inf_serde")]
    pub mean: f64,
    pub stdev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedCase {
    pub case_id: String,
    pub error: String,
}

/// Per-volume metrics plus aggregate statistics, one row per case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<CaseMetrics>,
    pub aggregates: std::collections::BTreeMap<String, Aggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<FailedCase>,
}

fn aggregate(values: impl Iterator<Item = f64> + Clone) -> Aggregate {
    let n = values.clone().count();
    if n == 0 {
        return Aggregate {
            mean: f64::NAN,
            stdev: 0.0,
        };
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let stdev = if n > 1 && mean.is_finite() {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, stdev }
}

impl MetricsReport {
    pub fn from_entries(entries: Vec<CaseMetrics>, failed: Vec<FailedCase>) -> Self {
        let mut aggregates = std::collections::BTreeMap::new();
        let fields: [(&str, fn(&CaseMetrics) -> f64); 6] = [
            ("nrmse", |e| e.nrmse),
            ("psnr", |e| e.psnr),
            ("ssim", |e| e.ssim),
            ("nrmse_nz", |e| e.nrmse_nz),
            ("psnr_nz", |e| e.psnr_nz),
            ("ssim_nz", |e| e.ssim_nz),
        ];
        for (name, get) in fields {
            aggregates.insert(name.to_string(), aggregate(entries.iter().map(get)));
        }
        MetricsReport {
            entries,
            aggregates,
            failed,
        }
    }

    /// Flat table: one row per case plus an aggregate row.
    pub fn to_table(&self) -> String {
        let mut out =
            String::from("case_id\tnrmse\tpsnr\tssim\tnrmse_nz\tpsnr_nz\tssim_nz\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.3}\t{:.6}\t{:.6}\t{:.3}\t{:.6}\n",
                e.case_id, e.nrmse, e.psnr, e.ssim, e.nrmse_nz, e.psnr_nz, e.ssim_nz
            ));
        }
        let get = |name: &str| self.aggregates.get(name).map_or(f64::NAN, |a| a.mean);
        out.push_str(&format!(
            "mean\t{:.6}\t{:.3}\t{:.6}\t{:.6}\t{:.3}\t{:.6}\n",
            get("nrmse"),
            get("psnr"),
            get("ssim"),
            get("nrmse_nz"),
            get("psnr_nz"),
            get("ssim_nz")
        ));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Score one prediction against its ground truth.
pub fn evaluate_pair(gt: &Volume, pred: &Volume, range: f64, mode: NzMode) -> Result<CaseMetrics> {
    let nz = nz_metrics(gt, pred, range, mode)?;
    Ok(CaseMetrics {
        case_id: gt.case_id().to_string(),
        nrmse: nrmse(gt, pred)?,
        psnr: psnr(gt, pred, range)?,
        ssim: ssim_with_range(gt, pred, range)?,
        nrmse_nz: nz.nrmse_nz,
        psnr_nz: nz.psnr_nz,
        ssim_nz: nz.ssim_nz,
    })
}
