//! Preprocessing pipeline: resampling, HU clipping and normalization, mask
//! dilation, dataset assembly with mask union, and deterministic splitting.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_volume, save_volume, IntensityDomain, Volume};

/// HU clipping bounds used before normalization.
pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 1000.0;

// ---------------------------------------------------------------------------
// masks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskLabel {
    Aorta,
    Cardiac,
    Union,
}

/// Binary Z×H×W grid with the same geometry contract as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Vec<u8>,
    shape: (usize, usize, usize),
    spacing: (f64, f64, f64),
    label: MaskLabel,
}

impl Mask {
    pub fn new(
        data: Vec<u8>,
        shape: (usize, usize, usize),
        spacing: (f64, f64, f64),
        label: MaskLabel,
    ) -> Result<Self> {
        let (z, h, w) = shape;
        if z == 0 || h == 0 || w == 0 || data.len() != z * h * w {
            return Err(Error::InvalidVolume(format!(
                "mask data length {} does not match shape {z}x{h}x{w}",
                data.len()
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidVolume("mask spacing must be > 0".into()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidVolume("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            label,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn label(&self) -> MaskLabel {
        self.label
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[(z * self.shape.1 + y) * self.shape.2 + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Store as a volume bundle with a binary f32 payload.
    pub fn save(&self, path: &Path, case_id: &str) -> Result<()> {
        let data: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let v = Volume::new(
            data,
            self.shape,
            self.spacing,
            IntensityDomain::Normalized,
            case_id,
        )?;
        save_volume(&v, path)
    }

    pub fn load(path: &Path, label: MaskLabel) -> Result<Self> {
        let v = load_volume(path)?;
        let data: Vec<u8> = v
            .data()
            .iter()
            .map(|&x| {
                if x == 0.0 {
                    Ok(0u8)
                } else if x == 1.0 {
                    Ok(1u8)
                } else {
                    Err(Error::InvalidVolume(format!(
                        "mask payload value {x} is not binary in {}",
                        path.display()
                    )))
                }
            })
            .collect::<Result<_>>()?;
        Mask::new(data, v.shape(), v.spacing(), label)
    }
}

/// Element-wise union of masks sharing one geometry.
pub fn union_masks(masks: &[Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("union of zero masks".into()))?;
    let mut data = first.data.clone();
    for m in &masks[1..] {
        if m.shape != first.shape {
            return Err(Error::ShapeMismatch(format!(
                "mask shapes {:?} vs {:?}",
                m.shape, first.shape
            )));
        }
        for (d, &v) in data.iter_mut().zip(&m.data) {
            *d |= v;
        }
    }
    Mask::new(data, first.shape, first.spacing, MaskLabel::Union)
}

const EDT_INF: f64 = 1e20;

/// 1-D squared distance transform (Felzenszwalb-Huttenlocher lower envelope).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    // intersection of the parabolas rooted at q and p
    let intersect = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut v = vec![0usize; n];
    let mut zb = vec![0.0f64; n + 1];
    let mut k = 0usize;
    zb[0] = -EDT_INF;
    zb[1] = EDT_INF;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // finite parabola heights keep s above zb[0], so k never underflows
        while s <= zb[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        zb[k] = s;
        zb[k + 1] = EDT_INF;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while zb[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in voxel units) from every voxel to the
/// nearest 1-voxel of `m`. Voxels of empty masks get `EDT_INF`.
fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let (z, h, w) = m.shape;
    let mut dist: Vec<f64> = m
        .data
        .iter()
        .map(|&v| if v == 1 { 0.0 } else { EDT_INF })
        .collect();
    let mut line = Vec::new();
    let mut out_line = Vec::new();
    // x axis
    for zi in 0..z {
        for y in 0..h {
            let base = (zi * h + y) * w;
            line.clear();
            line.extend_from_slice(&dist[base..base + w]);
            out_line.resize(w, 0.0);
            edt_1d(&line, &mut out_line);
            dist[base..base + w].copy_from_slice(&out_line);
        }
    }
    // y axis
    for zi in 0..z {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| dist[(zi * h + y) * w + x]));
            out_line.resize(h, 0.0);
            edt_1d(&line, &mut out_line);
            for y in 0..h {
                dist[(zi * h + y) * w + x] = out_line[y];
            }
        }
    }
    // z axis
    for y in 0..h {
        for x in 0..w {
            line.clear();
            line.extend((0..z).map(|zi| dist[(zi * h + y) * w + x]));
            out_line.resize(z, 0.0);
            edt_1d(&line, &mut out_line);
            for zi in 0..z {
                dist[(zi * h + y) * w + x] = out_line[zi];
            }
        }
    }
    dist
}

/// Euclidean dilation in index space: output voxel is 1 iff its distance to
/// some seed voxel is <= `radius`. Anisotropic spacing is deliberately
/// ignored ("voxel" dilation).
pub fn dilate_mask(m: &Mask, radius: usize) -> Result<Mask> {
    if radius == 0 {
        return Ok(m.clone());
    }
    let r2 = (radius * radius) as f64;
    let dist = squared_distance_transform(m);
    let data: Vec<u8> = dist.iter().map(|&d| u8::from(d <= r2)).collect();
    Mask::new(data, m.shape, m.spacing, m.label)
}

/// Zero out voxels outside the mask.
pub fn apply_mask(v: &Volume, m: &Mask) -> Result<Volume> {
    if v.shape() != m.shape {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs mask {:?}",
            v.shape(),
            m.shape
        )));
    }
    let data = v
        .data()
        .iter()
        .zip(&m.data)
        .map(|(&x, &keep)| if keep == 1 { x } else { 0.0 })
        .collect();
    v.with_data(data, v.domain())
}

// ---------------------------------------------------------------------------
// resampling and normalization

/// Target geometry for resampling: fixed in-plane shape, uniform spacing;
/// the Z extent follows from preserving the physical length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampleTarget {
    pub in_plane: (usize, usize),
    pub spacing: (f64, f64, f64),
}

fn resampled_z(z_in: usize, sz_in: f64, sz_out: f64) -> usize {
    ((z_in as f64 * sz_in / sz_out).round() as usize).max(1)
}

/// Trilinear resampling for intensity volumes. Voxel centres sit at
/// `index * spacing`; output index i maps to input position
/// `i * (spacing_out / spacing_in)`, clamped at the edges.
pub fn resample(v: &Volume, target: &ResampleTarget) -> Result<Volume> {
    let (h_out, w_out) = target.in_plane;
    if h_out == 0 || w_out == 0 || target.spacing.0 <= 0.0 || target.spacing.1 <= 0.0 || target.spacing.2 <= 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate resample target (zero extent)".into(),
        ));
    }
    let (z_in, h_in, w_in) = v.shape();
    let z_out = resampled_z(z_in, v.spacing().0, target.spacing.0);
    let rz = target.spacing.0 / v.spacing().0;
    let ry = target.spacing.1 / v.spacing().1;
    let rx = target.spacing.2 / v.spacing().2;
    let mut data = Vec::with_capacity(z_out * h_out * w_out);
    let clampf = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64);
    for zo in 0..z_out {
        let pz = clampf(zo as f64 * rz, z_in);
        let z0 = pz.floor() as usize;
        let z1 = (z0 + 1).min(z_in - 1);
        let wz = pz - z0 as f64;
        for yo in 0..h_out {
            let py = clampf(yo as f64 * ry, h_in);
            let y0 = py.floor() as usize;
            let y1 = (y0 + 1).min(h_in - 1);
            let wy = py - y0 as f64;
            for xo in 0..w_out {
                let px = clampf(xo as f64 * rx, w_in);
                let x0 = px.floor() as usize;
                let x1 = (x0 + 1).min(w_in - 1);
                let wx = px - x0 as f64;
                let c00 = v.get(z0, y0, x0) * (1.0 - wx) + v.get(z0, y0, x1) * wx;
                let c01 = v.get(z0, y1, x0) * (1.0 - wx) + v.get(z0, y1, x1) * wx;
                let c10 = v.get(z1, y0, x0) * (1.0 - wx) + v.get(z1, y0, x1) * wx;
                let c11 = v.get(z1, y1, x0) * (1.0 - wx) + v.get(z1, y1, x1) * wx;
                let c0 = c00 * (1.0 - wy) + c01 * wy;
                let c1 = c10 * (1.0 - wy) + c11 * wy;
                data.push(c0 * (1.0 - wz) + c1 * wz);
            }
        }
    }
    Volume::new(
        data,
        (z_out, h_out, w_out),
        target.spacing,
        v.domain(),
        v.case_id().to_string(),
    )
}

/// Nearest-neighbour resampling for masks.
pub fn resample_mask(m: &Mask, target: &ResampleTarget) -> Result<Mask> {
    let (h_out, w_out) = target.in_plane;
    if h_out == 0 || w_out == 0 || target.spacing.0 <= 0.0 || target.spacing.1 <= 0.0 || target.spacing.2 <= 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate resample target (zero extent)".into(),
        ));
    }
    let (z_in, h_in, w_in) = m.shape();
    let z_out = resampled_z(z_in, m.spacing().0, target.spacing.0);
    let rz = target.spacing.0 / m.spacing().0;
    let ry = target.spacing.1 / m.spacing().1;
    let rx = target.spacing.2 / m.spacing().2;
    let nearest = |p: f64, n: usize| (p.round().max(0.0) as usize).min(n - 1);
    let mut data = Vec::with_capacity(z_out * h_out * w_out);
    for zo in 0..z_out {
        let zi = nearest(zo as f64 * rz, z_in);
        for yo in 0..h_out {
            let yi = nearest(yo as f64 * ry, h_in);
            for xo in 0..w_out {
                let xi = nearest(xo as f64 * rx, w_in);
                data.push(m.get(zi, yi, xi));
            }
        }
    }
    Mask::new(data, (z_out, h_out, w_out), target.spacing, m.label())
}

/// Clip HU intensities to [-1000, 1000] and map affinely to [0, 1].
pub fn clip_normalize(v: &Volume) -> Result<Volume> {
    if v.domain() != IntensityDomain::Hu {
        return Err(Error::InvalidArgument(
            "clip_normalize expects a HU-domain volume".into(),
        ));
    }
    let data = v
        .data()
        .iter()
        .map(|&hu| (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN))
        .collect();
    v.with_data(data, IntensityDomain::Normalized)
}

// ---------------------------------------------------------------------------
// dataset assembly

/// Registration hook. The pipeline ingests already-registered volumes by
/// default; a deformable method can be plugged in here.
pub trait Registration {
    fn register(&self, moving: Volume, fixed: &Volume) -> Result<Volume>;
}

/// Default registration stage: pass-through.
pub struct NoOpRegistration;

impl Registration for NoOpRegistration {
    fn register(&self, moving: Volume, _fixed: &Volume) -> Result<Volume> {
        Ok(moving)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "AV")]
    Av,
    #[serde(rename = "CAV")]
    Cav,
}

impl Variant {
    /// Dilation radius used by the clinical datasets.
    pub fn default_dilation(self) -> usize {
        match self {
            Variant::Av => 10,
            Variant::Cav => 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Input files of one case: both phases plus the per-organ masks of both
/// phases (already spatially aligned with the volumes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFiles {
    pub case_id: String,
    pub native: PathBuf,
    pub arterial: PathBuf,
    pub masks: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildOptions {
    pub variant: Variant,
    pub dilation_radius: usize,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    #[serde(default)]
    pub exclusions: Vec<String>,
    #[serde(default)]
    pub resample: Option<ResampleTarget>,
}

impl BuildOptions {
    pub fn new(variant: Variant, seed: u64) -> Self {
        BuildOptions {
            variant,
            dilation_radius: variant.default_dilation(),
            ratios: (0.8, 0.1, 0.1),
            seed,
            exclusions: Vec::new(),
            resample: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub split: Split,
    pub native: PathBuf,
    pub arterial: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub variant: Variant,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub dilation_radius: usize,
    pub excluded: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn cases(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (
            self.cases(Split::Train).count(),
            self.cases(Split::Val).count(),
            self.cases(Split::Test).count(),
        )
    }

    /// Entry paths are stored relative to the manifest file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut rel = self.clone();
        for e in &mut rel.entries {
            for p in [&mut e.native, &mut e.arterial, &mut e.mask] {
                if let Ok(stripped) = p.strip_prefix(base) {
                    *p = stripped.to_path_buf();
                }
            }
        }
        let text = serde_json::to_string_pretty(&rel)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut manifest.entries {
            for p in [&mut e.native, &mut e.arterial, &mut e.mask] {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            }
        }
        Ok(manifest)
    }
}

/// Deterministic shuffled split: floor(n * r_train) train, floor(n * r_val)
/// val, remainder test.
pub fn split_cases(case_ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let n = case_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (n as f64 * rt).floor() as usize;
    let n_val = (n as f64 * rv).floor() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Read an exclusion list: one case id per line, blank lines ignored.
pub fn read_exclusions(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Assemble a dataset: per case, normalize both phases, union all masks,
/// dilate, apply to both volumes, then split deterministically.
pub fn build_dataset(
    cases: &[CaseFiles],
    opts: &BuildOptions,
    registration: &dyn Registration,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let excluded: BTreeSet<&str> = opts.exclusions.iter().map(String::as_str).collect();
    let included: Vec<&CaseFiles> = cases
        .iter()
        .filter(|c| !excluded.contains(c.case_id.as_str()))
        .collect();
    if included.is_empty() {
        return Err(Error::Dataset("no cases left after exclusions".into()));
    }
    let data_dir = out_dir.join("processed");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;

    let ids: Vec<String> = included.iter().map(|c| c.case_id.clone()).collect();
    let splits = split_cases(&ids, opts.ratios, opts.seed)?;

    let mut entries = Vec::with_capacity(included.len());
    for (case, split) in included.iter().zip(splits) {
        if case.masks.is_empty() {
            return Err(Error::Dataset(format!(
                "case {} has no mask files",
                case.case_id
            )));
        }
        let mut native = load_volume(&case.native)?;
        let mut arterial = load_volume(&case.arterial)?;
        if let Some(target) = &opts.resample {
            native = resample(&native, target)?;
            arterial = resample(&arterial, target)?;
        }
        if native.domain() == IntensityDomain::Hu {
            native = clip_normalize(&native)?;
        }
        if arterial.domain() == IntensityDomain::Hu {
            arterial = clip_normalize(&arterial)?;
        }
        let native = registration.register(native, &arterial)?;

        let mut masks = Vec::with_capacity(case.masks.len());
        for mp in &case.masks {
            if !mp.exists() {
                return Err(Error::Dataset(format!(
                    "case {}: missing mask file {}",
                    case.case_id,
                    mp.display()
                )));
            }
            let mut m = Mask::load(mp, MaskLabel::Union)?;
            if let Some(target) = &opts.resample {
                m = resample_mask(&m, target)?;
            }
            masks.push(m);
        }
        let combined = union_masks(&masks)?;
        if combined.shape() != native.shape() {
            return Err(Error::ShapeMismatch(format!(
                "case {}: mask {:?} vs volume {:?}",
                case.case_id,
                combined.shape(),
                native.shape()
            )));
        }
        let dilated = dilate_mask(&combined, opts.dilation_radius)?;
        let native = apply_mask(&native, &dilated)?;
        let arterial = apply_mask(&arterial, &dilated)?;

        let native_path = data_dir.join(format!("{}_native.vol", case.case_id));
        let arterial_path = data_dir.join(format!("{}_arterial.vol", case.case_id));
        let mask_path = data_dir.join(format!("{}_mask.vol", case.case_id));
        save_volume(&native, &native_path)?;
        save_volume(&arterial, &arterial_path)?;
        dilated.save(&mask_path, &case.case_id)?;

        entries.push(ManifestEntry {
            case_id: case.case_id.clone(),
            split,
            native: native_path,
            arterial: arterial_path,
            mask: mask_path,
        });
    }

    let manifest = DatasetManifest {
        variant: opts.variant,
        seed: opts.seed,
        ratios: opts.ratios,
        dilation_radius: opts.dilation_radius,
        excluded: opts.exclusions.clone(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn mask_from_ones(ones: &[(usize, usize, usize)], shape: (usize, usize, usize)) -> Mask {
        let mut data = vec![0u8; shape.0 * shape.1 * shape.2];
        for &(z, y, x) in ones {
            data[(z * shape.1 + y) * shape.2 + x] = 1;
        }
        Mask::new(data, shape, (1.0, 1.0, 1.0), MaskLabel::Aorta).unwrap()
    }

    /// Brute-force dilation oracle: exhaustive distance scan.
    fn dilate_oracle(m: &Mask, radius: usize) -> Vec<u8> {
        let (z, h, w) = m.shape();
        let r2 = (radius * radius) as i64;
        let mut seeds: Vec<(i64, i64, i64)> = Vec::new();
        for zi in 0..z {
            for y in 0..h {
                for x in 0..w {
                    if m.get(zi, y, x) == 1 {
                        seeds.push((zi as i64, y as i64, x as i64));
                    }
                }
            }
        }
        let mut out = vec![0u8; z * h * w];
        for zi in 0..z as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let hit = seeds.iter().any(|&(sz, sy, sx)| {
                        let (dz, dy, dx) = (zi - sz, y - sy, x - sx);
                        dz * dz + dy * dy + dx * dx <= r2
                    });
                    if hit {
                        out[((zi as usize) * h + y as usize) * w + x as usize] = 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dilate_zero_radius_and_empty_mask() {
        let m = mask_from_ones(&[(1, 2, 3)], (4, 5, 6));
        assert_eq!(dilate_mask(&m, 0).unwrap(), m);
        let empty = mask_from_ones(&[], (4, 5, 6));
        for r in [0, 1, 3] {
            assert_eq!(dilate_mask(&empty, r).unwrap().count_ones(), 0);
        }
    }

    #[test]
    fn dilate_single_voxel_euclidean_ball() {
        let m = mask_from_ones(&[(3, 3, 3)], (7, 7, 7));
        let d = dilate_mask(&m, 2).unwrap();
        // voxels with i^2+j^2+k^2 <= 4 around the centre: 33 of them
        assert_eq!(d.count_ones(), 33);
        assert_eq!(d.data(), dilate_oracle(&m, 2).as_slice());
    }

    #[test]
    fn dilate_matches_oracle_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for radius in [0usize, 1, 2, 3] {
            let shape = (9, 9, 9);
            let data: Vec<u8> = (0..9 * 9 * 9)
                .map(|_| u8::from(rng.random::<f64>() < 0.04))
                .collect();
            let m = Mask::new(data, shape, (1.0, 1.0, 1.0), MaskLabel::Aorta).unwrap();
            let d = dilate_mask(&m, radius).unwrap();
            assert_eq!(d.data(), dilate_oracle(&m, radius).as_slice(), "r={radius}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn dilation_is_monotone(seed in 0u64..500, r1 in 0usize..3, extra in 0usize..3) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..6*6*6).map(|_| u8::from(rng.random::<f64>() < 0.1)).collect();
            let small = Mask::new(data.clone(), (6,6,6), (1.0,1.0,1.0), MaskLabel::Aorta).unwrap();
            // grow the mask by setting extra voxels
            let mut big_data = data;
            for _ in 0..4 {
                let i = (rng.random::<f64>() * 215.0) as usize;
                big_data[i] = 1;
            }
            let big = Mask::new(big_data, (6,6,6), (1.0,1.0,1.0), MaskLabel::Aorta).unwrap();
            let r2 = r1 + extra;
            let d_small_r1 = dilate_mask(&small, r1).unwrap();
            let d_small_r2 = dilate_mask(&small, r2).unwrap();
            let d_big_r1 = dilate_mask(&big, r1).unwrap();
            for i in 0..216 {
                // mask-monotone and radius-monotone
                prop_assert!(d_small_r1.data()[i] <= d_big_r1.data()[i]);
                prop_assert!(d_small_r1.data()[i] <= d_small_r2.data()[i]);
            }
        }
    }

    #[test]
    fn clip_normalize_endpoints_and_clipping() {
        let v = Volume::new(
            vec![-1000.0, 1000.0, 0.0, 2000.0, -3000.0, 500.0],
            (1, 2, 3),
            (1.0, 1.0, 1.0),
            IntensityDomain::Hu,
            "hu",
        )
        .unwrap();
        let n = clip_normalize(&v).unwrap();
        assert_eq!(n.domain(), IntensityDomain::Normalized);
        let d = n.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert_eq!(d[2], 0.5);
        assert_eq!(d[3], 1.0);
        assert_eq!(d[4], 0.0);
        assert!((d[5] - 0.75).abs() < 1e-15);
        // normalized -> HU inverse is the identity on [-1000, 1000]
        for (&u, &hu) in d.iter().zip(v.data()) {
            let back = crate::volume::normalized_to_hu(u);
            assert!((back - hu.clamp(HU_MIN, HU_MAX)).abs() < 1e-9);
        }
        assert!(clip_normalize(&n).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..4 * 6 * 6).map(|_| rng.random::<f64>()).collect();
        let v = Volume::new(data, (4, 6, 6), (2.5, 0.7, 0.7), IntensityDomain::Hu, "r").unwrap();
        let same = resample(
            &v,
            &ResampleTarget {
                in_plane: (6, 6),
                spacing: (2.5, 0.7, 0.7),
            },
        )
        .unwrap();
        assert_eq!(same, v);

        let flat = Volume::new(
            vec![3.5; 4 * 6 * 6],
            (4, 6, 6),
            (1.0, 1.0, 1.0),
            IntensityDomain::Hu,
            "c",
        )
        .unwrap();
        let out = resample(
            &flat,
            &ResampleTarget {
                in_plane: (9, 5),
                spacing: (0.8, 1.3, 0.6),
            },
        )
        .unwrap();
        assert!(out.data().iter().all(|&x| (x - 3.5).abs() < 1e-12));
    }

    /// Brute-force 1-D linear interpolation oracle on a ramp line.
    fn interp_line_oracle(line: &[f64], ratio: f64, n_out: usize) -> Vec<f64> {
        (0..n_out)
            .map(|i| {
                let p = (i as f64 * ratio).clamp(0.0, (line.len() - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(line.len() - 1);
                let w = p - i0 as f64;
                line[i0] * (1.0 - w) + line[i1] * w
            })
            .collect()
    }

    #[test]
    fn resample_ramp_matches_interpolation_oracle() {
        // 4-voxel line along x: [0, 1, 2, 3]
        let v = Volume::new(
            vec![0.0, 1.0, 2.0, 3.0],
            (1, 1, 4),
            (1.0, 1.0, 1.0),
            IntensityDomain::Hu,
            "ramp",
        )
        .unwrap();
        // downsample x2 with aligned centres
        let out = resample(
            &v,
            &ResampleTarget {
                in_plane: (1, 2),
                spacing: (1.0, 1.0, 2.0),
            },
        )
        .unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
        // fractional ratio checks the actual trilinear weights
        let out = resample(
            &v,
            &ResampleTarget {
                in_plane: (1, 3),
                spacing: (1.0, 1.0, 1.5),
            },
        )
        .unwrap();
        let want = interp_line_oracle(&[0.0, 1.0, 2.0, 3.0], 1.5, 3);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_rejects_degenerate_target() {
        let v = Volume::new(
            vec![0.0; 8],
            (2, 2, 2),
            (1.0, 1.0, 1.0),
            IntensityDomain::Hu,
            "d",
        )
        .unwrap();
        assert!(resample(
            &v,
            &ResampleTarget {
                in_plane: (0, 2),
                spacing: (1.0, 1.0, 1.0)
            }
        )
        .is_err());
        assert!(resample(
            &v,
            &ResampleTarget {
                in_plane: (2, 2),
                spacing: (0.0, 1.0, 1.0)
            }
        )
        .is_err());
    }

    #[test]
    fn split_is_deterministic_and_ratio_correct() {
        let ids: Vec<String> = (0..10).map(|i| format!("case{i:02}")).collect();
        let a = split_cases(&ids, (0.8, 0.1, 0.1), 7).unwrap();
        let b = split_cases(&ids, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, b);
        let count = |s: Split| a.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (8, 1, 1)
        );
        assert!(split_cases(&ids, (0.8, 0.3, 0.1), 7).is_err());
    }

    fn write_case(
        dir: &Path,
        case_id: &str,
        shape: (usize, usize, usize),
        tube: &[(usize, usize, usize)],
    ) -> CaseFiles {
        let n = shape.0 * shape.1 * shape.2;
        let mut native = vec![0.25; n];
        let mut arterial = vec![0.25; n];
        for &(z, y, x) in tube {
            let idx = (z * shape.1 + y) * shape.2 + x;
            native[idx] = 0.30;
            arterial[idx] = 0.75;
        }
        let nv = Volume::new(
            native,
            shape,
            (1.0, 1.0, 1.0),
            IntensityDomain::Normalized,
            case_id,
        )
        .unwrap();
        let av = nv
            .with_data(arterial, IntensityDomain::Normalized)
            .unwrap();
        let native_path = dir.join(format!("{case_id}_native.vol"));
        let arterial_path = dir.join(format!("{case_id}_arterial.vol"));
        let mask_path = dir.join(format!("{case_id}_aorta.vol"));
        save_volume(&nv, &native_path).unwrap();
        save_volume(&av, &arterial_path).unwrap();
        mask_from_ones(tube, shape).save(&mask_path, case_id).unwrap();
        CaseFiles {
            case_id: case_id.to_string(),
            native: native_path,
            arterial: arterial_path,
            masks: vec![mask_path],
        }
    }

    #[test]
    fn build_dataset_split_masking_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        std::fs::create_dir_all(&raw).unwrap();
        let shape = (4, 9, 9);
        let tube: Vec<(usize, usize, usize)> = (0..4).map(|z| (z, 4, 4)).collect();
        let cases: Vec<CaseFiles> = (0..10)
            .map(|i| write_case(&raw, &format!("case{i:02}"), shape, &tube))
            .collect();
        let mut opts = BuildOptions::new(Variant::Av, 7);
        opts.dilation_radius = 2;
        opts.exclusions = vec!["case03".to_string()];

        let out_a = dir.path().join("a");
        let manifest = build_dataset(&cases, &opts, &NoOpRegistration, &out_a).unwrap();
        // 9 cases after exclusion: floor(7.2)=7 train, floor(0.9)=0 val, 2 test
        assert_eq!(manifest.entries.len(), 9);
        assert!(manifest.entries.iter().all(|e| e.case_id != "case03"));

        // masked volumes are zero exactly outside the dilated mask
        let entry = &manifest.entries[0];
        let native = load_volume(&entry.native).unwrap();
        let mask = Mask::load(&entry.mask, MaskLabel::Union).unwrap();
        let oracle = dilate_oracle(&mask_from_ones(&tube, shape), 2);
        for i in 0..native.data().len() {
            assert_eq!(mask.data()[i], oracle[i]);
            if oracle[i] == 0 {
                assert_eq!(native.data()[i], 0.0);
            }
            if native.data()[i] != 0.0 {
                assert_eq!(mask.data()[i], 1);
            }
        }

        // byte-identical manifests across runs with the same seed
        let out_b = dir.path().join("b");
        build_dataset(&cases, &opts, &NoOpRegistration, &out_b).unwrap();
        let bytes_a = std::fs::read(out_a.join("manifest.json")).unwrap();
        let bytes_b = std::fs::read(out_b.join("manifest.json")).unwrap();
        assert_eq!(bytes_a, bytes_b);

        // missing mask file is a hard error
        let mut broken = cases.clone();
        broken[0].masks = vec![raw.join("nonexistent.vol")];
        assert!(build_dataset(&broken, &opts, &NoOpRegistration, &dir.path().join("c")).is_err());
    }

    #[test]
    fn ten_cases_with_exact_ratio_split() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        std::fs::create_dir_all(&raw).unwrap();
        let tube: Vec<(usize, usize, usize)> = (0..2).map(|z| (z, 5, 5)).collect();
        let cases: Vec<CaseFiles> = (0..10)
            .map(|i| write_case(&raw, &format!("p{i:02}"), (2, 11, 11), &tube))
            .collect();
        let opts = BuildOptions {
            dilation_radius: 1,
            ..BuildOptions::new(Variant::Av, 99)
        };
        let manifest = build_dataset(&cases, &opts, &NoOpRegistration, dir.path()).unwrap();
        assert_eq!(manifest.split_sizes(), (8, 1, 1));
        // reload resolves relative paths
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert!(loaded.entries[0].native.exists());
    }
}
