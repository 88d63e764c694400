//! Volume data model, bit-exact file format, sub-volume extraction and
//! clinical windowing for visual export.
//!
//! A [`Volume`] is a Z×H×W scalar grid (axis 0 is axial) with voxel spacing
//! in millimetres and an intensity-domain tag. On disk a volume is a
//! [`VolumeBundle`]: a raw little-endian f32 payload (`<case>.vol`) next to a
//! JSON sidecar header (`<case>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity provenance of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensityDomain {
    /// Hounsfield units, nominally in [-1000, 1000] after clipping.
    #[serde(rename = "HU")]
    Hu,
    /// Normalized units in [0, 1].
    #[serde(rename = "normalized-unit")]
    Normalized,
}

/// A Z×H×W scalar grid with spacing metadata. Immutable after construction;
/// all pipeline operations build new volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f64>,
    shape: (usize, usize, usize),
    spacing: (f64, f64, f64),
    domain: IntensityDomain,
    case_id: String,
}

impl Volume {
    pub fn new(
        data: Vec<f64>,
        shape: (usize, usize, usize),
        spacing: (f64, f64, f64),
        domain: IntensityDomain,
        case_id: impl Into<String>,
    ) -> Result<Self> {
        let (z, h, w) = shape;
        if z == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidVolume(format!(
                "shape components must be >= 1, got {z}x{h}x{w}"
            )));
        }
        if data.len() != z * h * w {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match shape {z}x{h}x{w}",
                data.len()
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidVolume(format!(
                "spacing components must be > 0, got {spacing:?}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite intensity {v}")));
        }
        if domain == IntensityDomain::Normalized {
            if let Some(v) = data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidVolume(format!(
                    "normalized-unit intensity {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            data,
            shape,
            spacing,
            domain,
            case_id: case_id.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn domain(&self) -> IntensityDomain {
        self.domain
    }

    pub fn case_id(&self) -> &str {
        self.case_id.as_str()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape.1 + y) * self.shape.2 + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// Axial slice `z` as a contiguous H×W block.
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.shape.1 * self.shape.2;
        &self.data[z * n..(z + 1) * n]
    }

    /// A copy with the same geometry and new voxel data.
    pub fn with_data(&self, data: Vec<f64>, domain: IntensityDomain) -> Result<Self> {
        Volume::new(data, self.shape, self.spacing, domain, self.case_id.clone())
    }
}

/// Sidecar header of an on-disk volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub domain: IntensityDomain,
    pub case_id: String,
}

/// Path of the sidecar header for a `.vol` payload path.
pub fn sidecar_path(vol_path: &Path) -> PathBuf {
    vol_path.with_extension("json")
}

/// Save a volume as `<path>.vol` payload plus `<path>.json` sidecar.
///
/// The payload is raw little-endian IEEE-754 f32; in-memory f64 intensities
/// are narrowed once on write, so a saved-then-loaded volume round-trips
/// bit-exactly thereafter.
pub fn save_volume(v: &Volume, vol_path: &Path) -> Result<()> {
    let header = BundleHeader {
        shape: [v.shape.0, v.shape.1, v.shape.2],
        spacing_mm: [v.spacing.0, v.spacing.1, v.spacing.2],
        dtype: "f32le".to_string(),
        domain: v.domain,
        case_id: v.case_id.clone(),
    };
    if let Some(parent) = vol_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(vol_path, payload).map_err(|e| Error::io(vol_path, e))?;
    let sidecar = sidecar_path(vol_path);
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

/// Load a volume from a `.vol` payload path (sidecar resolved automatically).
pub fn load_volume(vol_path: &Path) -> Result<Volume> {
    let sidecar = sidecar_path(vol_path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header: BundleHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    let [z, h, w] = header.shape;
    let expected = z
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Header {
            path: sidecar.clone(),
            reason: format!("shape {z}x{h}x{w} overflows"),
        })?;
    let big_endian = match header.dtype.as_str() {
        "f32le" => false,
        "f32be" => true,
        other => {
            return Err(Error::Header {
                path: sidecar,
                reason: format!("unsupported dtype {other:?}"),
            })
        }
    };
    let payload = fs::read(vol_path).map_err(|e| Error::io(vol_path, e))?;
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            path: vol_path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| {
            let bytes = [c[0], c[1], c[2], c[3]];
            let v = if big_endian {
                f32::from_be_bytes(bytes)
            } else {
                f32::from_le_bytes(bytes)
            };
            v as f64
        })
        .collect();
    Volume::new(
        data,
        (z, h, w),
        (
            header.spacing_mm[0],
            header.spacing_mm[1],
            header.spacing_mm[2],
        ),
        header.domain,
        header.case_id,
    )
}

/// A (2N+1)×H×W stack of slices centred on one axial index of a parent
/// volume. Out-of-range neighbours are filled by edge replication.
#[derive(Debug, Clone, PartialEq)]
pub struct SubVolume {
    data: Vec<f64>,
    half_width: usize,
    center_index: usize,
    in_plane: (usize, usize),
}

impl SubVolume {
    pub fn slices(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn center_index(&self) -> usize {
        self.center_index
    }

    pub fn in_plane(&self) -> (usize, usize) {
        self.in_plane
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Slice `j` of the stack (0-based within the window).
    pub fn slice(&self, j: usize) -> &[f64] {
        let n = self.in_plane.0 * self.in_plane.1;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn from_raw(
        data: Vec<f64>,
        half_width: usize,
        center_index: usize,
        in_plane: (usize, usize),
    ) -> Result<Self> {
        let want = (2 * half_width + 1) * in_plane.0 * in_plane.1;
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "sub-volume data length {} != {want}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            half_width,
            center_index,
            in_plane,
        })
    }
}

/// Extract the (2N+1)-slice window centred at `center`, clamping neighbour
/// indices to [0, Z-1].
pub fn extract_subvolume(v: &Volume, center: usize, half_width: usize) -> Result<SubVolume> {
    let (z, h, w) = v.shape();
    if center >= z {
        return Err(Error::InvalidArgument(format!(
            "slice index {center} out of range for Z={z}"
        )));
    }
    let n = h * w;
    let mut data = Vec::with_capacity((2 * half_width + 1) * n);
    let lo = center as isize - half_width as isize;
    for offset in 0..(2 * half_width + 1) as isize {
        let idx = (lo + offset).clamp(0, z as isize - 1) as usize;
        data.extend_from_slice(v.slice(idx));
    }
    Ok(SubVolume {
        data,
        half_width,
        center_index: center,
        in_plane: (h, w),
    })
}

/// Map a normalized-unit intensity back to HU (inverse of clip-normalize).
pub fn normalized_to_hu(u: f64) -> f64 {
    2000.0 * u - 1000.0
}

/// Clinical windowing: map HU interval [level - width/2, level + width/2]
/// linearly to [0, 255] with saturation and half-up rounding.
pub fn apply_window(v: &Volume, width: f64, level: f64) -> Result<Vec<Vec<u8>>> {
    if width <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "window width must be > 0, got {width}"
        )));
    }
    let lo = level - width / 2.0;
    let (z, ..) = v.shape();
    let mut out = Vec::with_capacity(z);
    for zi in 0..z {
        let slice = v.slice(zi);
        let gray = slice
            .iter()
            .map(|&raw| {
                let hu = match v.domain() {
                    IntensityDomain::Hu => raw,
                    IntensityDomain::Normalized => normalized_to_hu(raw),
                };
                let g = 255.0 * (hu - lo) / width;
                // half-up rounding keeps golden-image tests deterministic
                (g + 0.5).floor().clamp(0.0, 255.0) as u8
            })
            .collect();
        out.push(gray);
    }
    Ok(out)
}

/// Export each windowed axial slice as `<prefix>_zNNN.png`.
pub fn export_windowed_png(v: &Volume, width: f64, level: f64, dir: &Path) -> Result<Vec<PathBuf>> {
    let stack = apply_window(v, width, level)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (_, h, w) = v.shape();
    let mut paths = Vec::with_capacity(stack.len());
    for (zi, gray) in stack.into_iter().enumerate() {
        let img = image::GrayImage::from_raw(w as u32, h as u32, gray)
            .expect("windowed slice length matches in-plane shape");
        let path = dir.join(format!("{}_z{zi:03}.png", v.case_id()));
        img.save(&path)
            .map_err(|e| Error::InvalidArgument(format!("png write {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}
