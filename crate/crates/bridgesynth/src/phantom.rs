//! Synthetic paired native/arterial phantom generator for desk-scale
//! end-to-end runs.
//!
//! Each case is a curved tube ("aorta") whose centreline drifts
//! sinusoidally across slices, embedded in an ellipsoidal "body". The only
//! native/arterial difference is the tube intensity (0.30 vs 0.75), plus
//! independent noise draws, so the translation target is exactly the
//! contrast uptake. A straight tube would make slice consistency trivial;
//! the drift forces the sampler's inter-slice alignment to do real work.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    build_dataset, BuildOptions, CaseFiles, DatasetManifest, Mask, MaskLabel, NoOpRegistration,
    Variant,
};
use crate::volume::{save_volume, IntensityDomain, Volume};

/// Dilation radius used when preprocessing phantom datasets (scaled down
/// from the clinical 10-voxel AV dilation to the phantom's size).
pub const PHANTOM_DILATION: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: (usize, usize, usize),
    pub vessel_radius: (f64, f64),
    pub body_intensity: f64,
    pub vessel_native_intensity: f64,
    pub vessel_arterial_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub cases: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: (16, 64, 64),
            vessel_radius: (3.0, 5.0),
            body_intensity: 0.25,
            vessel_native_intensity: 0.30,
            vessel_arterial_intensity: 0.75,
            noise_sigma: 0.01,
            seed: 7,
            cases: 20,
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        let vals = [
            self.body_intensity,
            self.vessel_native_intensity,
            self.vessel_arterial_intensity,
        ];
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "phantom intensities must be in [0, 1]".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        if self.vessel_radius.0 <= 0.0 || self.vessel_radius.1 < self.vessel_radius.0 {
            return Err(Error::InvalidArgument(
                "vessel radius range must satisfy 0 < lo <= hi".into(),
            ));
        }
        Ok(())
    }
}

/// Per-case tube geometry: an in-plane centreline point per slice.
struct TubeGeometry {
    centers: Vec<(f64, f64)>,
    radius: f64,
}

fn mix_seed(seed: u64, case_index: u64, stream: u64) -> u64 {
    // splitmix64 over the combined identifiers
    let mut x = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(case_index.wrapping_mul(0xD1B54A32D192ED03))
        .wrapping_add(stream.wrapping_mul(0x8CB92BA72F3D8DD7));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn tube_geometry(cfg: &PhantomConfig, case_index: usize) -> Result<TubeGeometry> {
    let (z, h, w) = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, case_index as u64, 0));
    let radius = cfg.vessel_radius.0 + rng.random::<f64>() * (cfg.vessel_radius.1 - cfg.vessel_radius.0);
    let amp_limit = h.min(w) as f64 / 7.0;
    let amp_y = amp_limit * (0.5 + 0.5 * rng.random::<f64>());
    let amp_x = amp_limit * (0.5 + 0.5 * rng.random::<f64>());
    let freq_y = 1.0 + rng.random::<f64>();
    let freq_x = 1.0 + rng.random::<f64>();
    let phase_y = rng.random::<f64>() * TAU;
    let phase_x = rng.random::<f64>() * TAU;
    let reach = amp_y.max(amp_x) + radius + 1.0;
    if reach >= h.min(w) as f64 / 2.0 {
        return Err(Error::InvalidArgument(format!(
            "vessel radius {radius:.1} too large for in-plane shape {h}x{w}"
        )));
    }
    let centers = (0..z)
        .map(|zi| {
            let s = zi as f64 / z as f64;
            (
                h as f64 / 2.0 + amp_y * (TAU * freq_y * s + phase_y).sin(),
                w as f64 / 2.0 + amp_x * (TAU * freq_x * s + phase_x).cos(),
            )
        })
        .collect();
    Ok(TubeGeometry { centers, radius })
}

/// Deterministic paired phantom: native volume, arterial volume and the
/// exact (undilated) tube mask.
pub fn generate_phantom_pair(
    cfg: &PhantomConfig,
    case_index: usize,
) -> Result<(Volume, Volume, Mask)> {
    cfg.validate()?;
    let (z, h, w) = cfg.shape;
    let geo = tube_geometry(cfg, case_index)?;
    let n = z * h * w;
    let r2 = geo.radius * geo.radius;
    let (bz, by, bx) = (z as f64 * 0.7, h as f64 * 0.42, w as f64 * 0.42);
    let (cz, cy0, cx0) = (z as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0);

    let mut tube = vec![false; n];
    let mut base = vec![0.0f64; n];
    for zi in 0..z {
        let (cy, cx) = geo.centers[zi];
        for y in 0..h {
            for x in 0..w {
                let idx = (zi * h + y) * w + x;
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let in_tube = dy * dy + dx * dx <= r2;
                let (ez, ey, ex) = (
                    (zi as f64 - cz) / bz,
                    (y as f64 - cy0) / by,
                    (x as f64 - cx0) / bx,
                );
                let in_body = ez * ez + ey * ey + ex * ex <= 1.0;
                tube[idx] = in_tube;
                base[idx] = if in_body { cfg.body_intensity } else { 0.0 };
            }
        }
    }

    let make_phase = |tube_value: f64, stream: u64| -> Result<Volume> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, case_index as u64, stream));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let v = if tube[i] { tube_value } else { base[i] };
                let noisy = if cfg.noise_sigma > 0.0 {
                    v + cfg.noise_sigma * normal.sample(&mut rng)
                } else {
                    v
                };
                noisy.clamp(0.0, 1.0)
            })
            .collect();
        Volume::new(
            data,
            cfg.shape,
            (1.0, 1.0, 1.0),
            IntensityDomain::Normalized,
            format!("phantom{case_index:02}"),
        )
    };

    let native = make_phase(cfg.vessel_native_intensity, 1)?;
    let arterial = make_phase(cfg.vessel_arterial_intensity, 2)?;
    let mask = Mask::new(
        tube.iter().map(|&t| u8::from(t)).collect(),
        cfg.shape,
        (1.0, 1.0, 1.0),
        MaskLabel::Aorta,
    )?;
    Ok((native, arterial, mask))
}

/// Write raw phantom bundles plus a `cases.json` index under `out/raw`.
pub fn generate_raw_cases(cfg: &PhantomConfig, out_dir: &Path) -> Result<Vec<CaseFiles>> {
    cfg.validate()?;
    let raw = out_dir.join("raw");
    fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    let mut cases = Vec::with_capacity(cfg.cases);
    for i in 0..cfg.cases {
        let (native, arterial, mask) = generate_phantom_pair(cfg, i)?;
        let case_id = native.case_id().to_string();
        let native_path = raw.join(format!("{case_id}_native.vol"));
        let arterial_path = raw.join(format!("{case_id}_arterial.vol"));
        let mask_path = raw.join(format!("{case_id}_aorta.vol"));
        save_volume(&native, &native_path)?;
        save_volume(&arterial, &arterial_path)?;
        mask.save(&mask_path, &case_id)?;
        cases.push(CaseFiles {
            case_id,
            native: native_path,
            arterial: arterial_path,
            masks: vec![mask_path],
        });
    }
    let index_path = raw.join("cases.json");
    let mut rel = cases.clone();
    for c in &mut rel {
        for p in std::iter::once(&mut c.native)
            .chain(std::iter::once(&mut c.arterial))
            .chain(c.masks.iter_mut())
        {
            if let Ok(stripped) = p.strip_prefix(&raw) {
                *p = stripped.to_path_buf();
            }
        }
    }
    let text = serde_json::to_string_pretty(&rel)?;
    fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
    Ok(cases)
}

/// Load a `cases.json` index, resolving paths relative to its directory.
pub fn load_case_index(path: &Path) -> Result<Vec<CaseFiles>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cases: Vec<CaseFiles> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for c in &mut cases {
        for p in std::iter::once(&mut c.native)
            .chain(std::iter::once(&mut c.arterial))
            .chain(c.masks.iter_mut())
        {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
    }
    Ok(cases)
}

/// Generate the raw cases and run the AV preprocessing pipeline (3-voxel
/// dilation) over them, returning the split manifest.
pub fn generate_dataset(cfg: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.cases < 10 {
        return Err(Error::InvalidArgument(format!(
            "phantom dataset needs at least 10 cases, got {}",
            cfg.cases
        )));
    }
    let cases = generate_raw_cases(cfg, out_dir)?;
    let opts = BuildOptions {
        dilation_radius: PHANTOM_DILATION,
        ..BuildOptions::new(Variant::Av, cfg.seed)
    };
    build_dataset(&cases, &opts, &NoOpRegistration, out_dir)
}
