//! Volumetric grid types and the raw + JSON sidecar file format.
//!
//! All grids are `(depth, height, width)` in C order, width fastest. A volume
//! on disk is a headerless little-endian array next to a JSON sidecar with the
//! same stem:
//!
//! ```json
//! { "shape": [D, H, W], "spacing_mm": [sd, sh, sw], "dtype": "f32", "order": "C" }
//! ```
//!
//! Masks are written as `u8`, everything else as `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A scalar 3D grid with per-axis physical spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    shape: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid!("grid shape {shape:?} has a zero dimension"));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(invalid!("spacing {spacing:?} must be finite and positive"));
        }
        let n = shape.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::Geometry(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite value at flat index {i}"));
        }
        Ok(Self {
            shape,
            spacing,
            values,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, [d, h, w]: [usize; 3]) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        unravel(i, self.shape)
    }

    pub fn get(&self, at: [usize; 3]) -> f32 {
        self.values[self.index(at)]
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }

    pub(crate) fn check_geometry(&self, other: &VoxelGrid, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )))
        }
    }

    /// Same geometry, new values (validated).
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(self.shape, self.spacing, values)
    }
}

#[inline]
pub(crate) fn unravel(i: usize, shape: [usize; 3]) -> [usize; 3] {
    let w = i % shape[2];
    let h = (i / shape[2]) % shape[1];
    let d = i / (shape[1] * shape[2]);
    [d, h, w]
}

/// A grid whose every voxel is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask(VoxelGrid);

impl BinaryMask {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if let Some(i) = grid.values.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid!(
                "mask value {} at flat index {i} is not 0 or 1",
                grid.values[i]
            ));
        }
        Ok(Self(grid))
    }

    pub fn from_bools(shape: [usize; 3], spacing: [f64; 3], fg: &[bool]) -> Result<Self> {
        let values = fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self(VoxelGrid::new(shape, spacing, values)?))
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Ok(Self(VoxelGrid::filled(shape, spacing, 0.0)?))
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.0.spacing
    }

    #[inline]
    pub fn is_fg(&self, i: usize) -> bool {
        self.0.values[i] != 0.0
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.0.values.iter().map(|&v| v != 0.0).collect()
    }

    pub fn count(&self) -> usize {
        self.0.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn as_soft(&self) -> SoftMask {
        SoftMask(self.0.clone())
    }
}

/// A probability volume with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(VoxelGrid);

impl SoftMask {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if let Some(i) = grid.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!(
                "soft mask value {} at flat index {i} outside [0, 1]",
                grid.values[i]
            ));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.0.values
    }
}

/// Euclidean distance (mm) from each foreground voxel to the background.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap(VoxelGrid);

impl DistanceMap {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if let Some(i) = grid.values.iter().position(|&v| v < 0.0) {
            return Err(invalid!("negative distance at flat index {i}"));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }

    pub fn values(&self) -> &[f32] {
        &self.0.values
    }

    pub fn max(&self) -> f32 {
        self.0.values.iter().copied().fold(0.0, f32::max)
    }
}

/// Thresholds a soft mask: voxel is foreground iff `value >= threshold`.
pub fn binarize(soft: &SoftMask, threshold: f32) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid!("threshold {threshold} outside (0, 1]"));
    }
    if let Some(i) = soft.values().iter().position(|v| !v.is_finite()) {
        return Err(invalid!("non-finite soft value at flat index {i}"));
    }
    let values = soft
        .values()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Ok(BinaryMask(soft.grid().with_values(values)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
}

/// The JSON sidecar that accompanies a raw volume file.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn write_raw(path: &Path, sidecar: &Sidecar, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        return Err(invalid!(
            "raw volume path {} must not end in .json",
            path.display()
        ));
    }
    let side = sidecar_path(path);
    fs::write(path, bytes).map_err(Error::io(path))?;
    fs::write(&side, serde_json::to_string_pretty(sidecar)?).map_err(Error::io(&side))?;
    Ok(())
}

/// Writes an `f32` volume.
pub fn save_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    for v in &grid.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let sidecar = Sidecar {
        shape: grid.shape,
        spacing_mm: grid.spacing,
        dtype: Dtype::F32,
        order: "C".into(),
    };
    write_raw(path, &sidecar, &bytes)
}

/// Writes a mask as `u8`.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.0.values.iter().map(|&v| v as u8).collect();
    let sidecar = Sidecar {
        shape: mask.shape(),
        spacing_mm: mask.spacing(),
        dtype: Dtype::U8,
        order: "C".into(),
    };
    write_raw(path, &sidecar, &bytes)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(Error::io(&side))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    if sc.order != "C" {
        return Err(Error::Format {
            path: side,
            reason: format!("unsupported order {:?}", sc.order),
        });
    }
    Ok(sc)
}

/// Reads a volume of either dtype; `u8` values are widened to `f32`.
pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    let sc = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let n: usize = sc.shape.iter().product();
    let width = match sc.dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    if bytes.len() != n * width {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "sidecar shape {:?} ({:?}) needs {} bytes, file has {}",
                sc.shape,
                sc.dtype,
                n * width,
                bytes.len()
            ),
        });
    }
    let values = match sc.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    VoxelGrid::new(sc.shape, sc.spacing_mm, values).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    BinaryMask::new(load_grid(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn soft(values: Vec<f32>) -> SoftMask {
        let n = values.len();
        SoftMask::new(VoxelGrid::new([1, 1, n], [1.0; 3], values).unwrap()).unwrap()
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let m = binarize(&soft(vec![0.4, 0.5, 0.6]), 0.5).unwrap();
        assert_eq!(m.grid().values(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize(&soft(vec![0.0; 4]), 0.5).unwrap().count(), 0);
        assert_eq!(binarize(&soft(vec![1.0; 4]), 0.5).unwrap().count(), 4);
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        assert!(binarize(&soft(vec![0.2]), 0.0).is_err());
        assert!(binarize(&soft(vec![0.2]), 1.5).is_err());
    }

    #[test]
    fn grid_rejects_non_finite_and_bad_spacing() {
        assert!(VoxelGrid::new([1, 1, 2], [1.0; 3], vec![0.0, f32::NAN]).is_err());
        assert!(VoxelGrid::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(VoxelGrid::new([0, 1, 1], [1.0; 3], vec![]).is_err());
    }

    #[test]
    fn random_grid_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f32> = (0..120).map(|_| rng.random_range(-1e3..1e3)).collect();
        let g = VoxelGrid::new([4, 5, 6], [1.0, 0.8, 0.8], values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.raw");
        save_grid(&g, &p).unwrap();
        let back = load_grid(&p).unwrap();
        assert_eq!(back.spacing(), [1.0, 0.8, 0.8]);
        let bits = |g: &VoxelGrid| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&g));
        assert_eq!(back, g);
    }

    #[test]
    fn mask_round_trips_as_u8() {
        let m = BinaryMask::from_bools(
            [2, 2, 2],
            [0.7, 0.7, 2.5],
            &[true, false, true, true, false, false, true, false],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raw");
        save_mask(&m, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 8);
        assert_eq!(read_sidecar(&p).unwrap().dtype, Dtype::U8);
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn byte_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.raw");
        let sc = Sidecar {
            shape: [4, 5, 6],
            spacing_mm: [1.0; 3],
            dtype: Dtype::F32,
            order: "C".into(),
        };
        write_raw(&p, &sc, &[0u8; 400]).unwrap();
        let err = load_grid(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn unknown_dtype_and_malformed_sidecar_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        std::fs::write(&p, [0u8; 8]).unwrap();
        std::fs::write(
            sidecar_path(&p),
            r#"{"shape":[1,1,2],"spacing_mm":[1,1,1],"dtype":"f16","order":"C"}"#,
        )
        .unwrap();
        assert!(load_grid(&p).is_err());
        std::fs::write(sidecar_path(&p), "{not json").unwrap();
        assert!(load_grid(&p).is_err());
    }

    proptest::proptest! {
        #[test]
        fn save_load_is_identity(
            d in 1usize..5, h in 1usize..5, w in 1usize..5,
            sp in proptest::array::uniform3(0.1f64..5.0),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..d * h * w).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect();
            let g = VoxelGrid::new([d, h, w], sp, values).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.raw");
            save_grid(&g, &p).unwrap();
            proptest::prop_assert_eq!(load_grid(&p).unwrap(), g);
        }

        #[test]
        fn binarize_is_idempotent_on_masks(seed in 0u64..1000, t in 0.01f32..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fg: Vec<bool> = (0..27).map(|_| rng.random()).collect();
            let m = BinaryMask::from_bools([3, 3, 3], [1.0; 3], &fg).unwrap();
            proptest::prop_assert_eq!(binarize(&m.as_soft(), t).unwrap(), m);
        }
    }
}
