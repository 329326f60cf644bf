//! CT preprocessing: crop to the liver region, resample, clip and normalise.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::{BinaryMask, VoxelGrid};

/// Target voxel spacing for resampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpacing {
    Fixed([f64; 3]),
    /// `"median-of-train-fold"`: per-axis median over the training volumes.
    Named(String),
}

impl TargetSpacing {
    pub const MEDIAN: &'static str = "median-of-train-fold";

    /// Resolves to a concrete spacing; the median variant needs the
    /// training-fold spacings.
    pub fn resolve(&self, train_spacings: &[[f64; 3]]) -> Result<[f64; 3]> {
        match self {
            TargetSpacing::Fixed(s) => {
                if s.iter().any(|&v| !(v > 0.0)) {
                    return Err(invalid!("target spacing {s:?} must be positive"));
                }
                Ok(*s)
            }
            TargetSpacing::Named(n) if n == Self::MEDIAN => median_spacing(train_spacings),
            TargetSpacing::Named(n) => Err(Error::Config(format!("unknown target spacing {n:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub target_spacing: TargetSpacing,
    /// Intensity window in HU.
    pub clip_window: [f32; 2],
    pub crop_margin_vox: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_spacing: TargetSpacing::Named(TargetSpacing::MEDIAN.into()),
            clip_window: [-150.0, 250.0],
            crop_margin_vox: 4,
        }
    }
}

/// Per-axis median of a set of spacings.
pub fn median_spacing(spacings: &[[f64; 3]]) -> Result<[f64; 3]> {
    if spacings.is_empty() {
        return Err(invalid!("median spacing of an empty set"));
    }
    let mut out = [0.0; 3];
    for (a, o) in out.iter_mut().enumerate() {
        let mut v: Vec<f64> = spacings.iter().map(|s| s[a]).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        *o = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
    }
    Ok(out)
}

fn resampled_shape(grid: &VoxelGrid, target: [f64; 3]) -> Result<[usize; 3]> {
    if target.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(invalid!("target spacing {target:?} must be positive"));
    }
    let shape = grid.shape();
    let sp = grid.spacing();
    let out: [usize; 3] =
        std::array::from_fn(|a| (shape[a] as f64 * sp[a] / target[a]).round() as usize);
    if out.contains(&0) {
        return Err(invalid!(
            "resampling {shape:?} from {sp:?} to {target:?} gives a degenerate shape {out:?}"
        ));
    }
    Ok(out)
}

/// Source coordinate of output index `o` (voxel centres aligned), clamped.
#[inline]
fn source_coord(o: usize, ratio: f64, n: usize) -> f64 {
    ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // exact for a == b
    a + t * (b - a)
}

/// Trilinear resampling of an image to `target` spacing.
pub fn resample(grid: &VoxelGrid, target: [f64; 3]) -> Result<VoxelGrid> {
    let out_shape = resampled_shape(grid, target)?;
    let shape = grid.shape();
    let ratio: [f64; 3] = std::array::from_fn(|a| target[a] / grid.spacing()[a]);
    let v = grid.values();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for d in 0..out_shape[0] {
        let z = source_coord(d, ratio[0], shape[0]);
        let (z0, tz) = (z.floor() as usize, (z - z.floor()) as f32);
        let z1 = (z0 + 1).min(shape[0] - 1);
        for h in 0..out_shape[1] {
            let y = source_coord(h, ratio[1], shape[1]);
            let (y0, ty) = (y.floor() as usize, (y - y.floor()) as f32);
            let y1 = (y0 + 1).min(shape[1] - 1);
            for w in 0..out_shape[2] {
                let x = source_coord(w, ratio[2], shape[2]);
                let (x0, tx) = (x.floor() as usize, (x - x.floor()) as f32);
                let x1 = (x0 + 1).min(shape[2] - 1);
                let at = |a: usize, b: usize, c: usize| v[(a * shape[1] + b) * shape[2] + c];
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
                out.push(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
            }
        }
    }
    VoxelGrid::new(out_shape, target, out)
}

/// Nearest-neighbour resampling of a mask to `target` spacing.
pub fn resample_mask(mask: &BinaryMask, target: [f64; 3]) -> Result<BinaryMask> {
    let grid = mask.grid();
    let out_shape = resampled_shape(grid, target)?;
    let shape = grid.shape();
    let ratio: [f64; 3] = std::array::from_fn(|a| target[a] / grid.spacing()[a]);
    let near: [Vec<usize>; 3] = std::array::from_fn(|a| {
        (0..out_shape[a])
            .map(|o| source_coord(o, ratio[a], shape[a]).round() as usize)
            .collect()
    });
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for &d in &near[0] {
        for &h in &near[1] {
            for &w in &near[2] {
                out.push(grid.get([d, h, w]));
            }
        }
    }
    BinaryMask::new(VoxelGrid::new(out_shape, target, out)?)
}

/// Inclusive index box `[lo, hi]` per axis.
pub type Bounds = [[usize; 2]; 3];

/// Tight bounding box of the foreground grown by `margin`, clamped to the grid.
pub fn roi_bounds(roi: &BinaryMask, margin: usize) -> Result<Bounds> {
    let shape = roi.shape();
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..roi.grid().len() {
        if roi.is_fg(i) {
            any = true;
            let p = roi.grid().coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if !any {
        return Err(invalid!("region-of-interest mask is empty"));
    }
    Ok(std::array::from_fn(|a| {
        [
            lo[a].saturating_sub(margin),
            (hi[a] + margin).min(shape[a] - 1),
        ]
    }))
}

pub fn crop(grid: &VoxelGrid, b: &Bounds) -> Result<VoxelGrid> {
    let shape: [usize; 3] = std::array::from_fn(|a| b[a][1] - b[a][0] + 1);
    let mut out = Vec::with_capacity(shape.iter().product());
    for d in b[0][0]..=b[0][1] {
        for h in b[1][0]..=b[1][1] {
            for w in b[2][0]..=b[2][1] {
                out.push(grid.get([d, h, w]));
            }
        }
    }
    VoxelGrid::new(shape, grid.spacing(), out)
}

/// Crops `grid` to the ROI bounding box dilated by `margin` voxels.
pub fn crop_to_roi(grid: &VoxelGrid, roi: &BinaryMask, margin: usize) -> Result<VoxelGrid> {
    grid.check_geometry(roi.grid(), "crop_to_roi")?;
    crop(grid, &roi_bounds(roi, margin)?)
}

/// Clamps to `[lo, hi]` then maps linearly onto `[0, 1]`.
pub fn clip_intensities(grid: &VoxelGrid, lo: f32, hi: f32) -> Result<VoxelGrid> {
    if !(lo < hi) {
        return Err(invalid!("clip window ({lo}, {hi}) must satisfy lo < hi"));
    }
    let span = hi - lo;
    let out = grid
        .values()
        .iter()
        .map(|&v| (v.clamp(lo, hi) - lo) / span)
        .collect();
    grid.with_values(out)
}

/// A preprocessed case: image in `[0, 1]` plus masks on the same grid.
#[derive(Clone, Debug)]
pub struct PreprocessedCase {
    pub image: VoxelGrid,
    pub liver: BinaryMask,
    pub vessels: BinaryMask,
}

/// Crop to the liver, resample to `target`, clip and normalise.
pub fn preprocess_case(
    image: &VoxelGrid,
    liver: &BinaryMask,
    vessels: &BinaryMask,
    spec: &PreprocessSpec,
    target: [f64; 3],
) -> Result<PreprocessedCase> {
    image.check_geometry(liver.grid(), "image vs liver mask")?;
    image.check_geometry(vessels.grid(), "image vs vessel mask")?;
    let b = roi_bounds(liver, spec.crop_margin_vox)?;
    let image = crop(image, &b)?;
    let liver = BinaryMask::new(crop(liver.grid(), &b)?)?;
    let vessels = BinaryMask::new(crop(vessels.grid(), &b)?)?;
    let image = resample(&image, target)?;
    let liver = resample_mask(&liver, target)?;
    let vessels = resample_mask(&vessels, target)?;
    let [lo, hi] = spec.clip_window;
    let image = clip_intensities(&image, lo, hi)?;
    Ok(PreprocessedCase {
        image,
        liver,
        vessels,
    })
}
