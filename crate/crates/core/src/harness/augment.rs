//! Paired image/mask augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::{unravel, BinaryMask, VoxelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Probability of flipping, drawn independently per axis.
    pub flip_prob: f64,
    /// Probability of a quarter-turn rotation in one square plane.
    pub rot90_prob: f64,
    pub translate_prob: f64,
    /// Largest integer shift per axis, in voxels.
    pub max_shift: usize,
    pub gamma_prob: f64,
    pub gamma_range: [f64; 2],
    /// Arbitrary-angle rotation; the mask is resampled and re-binarised at 0.5.
    pub free_rotation: bool,
    pub max_angle_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rot90_prob: 0.5,
            translate_prob: 0.5,
            max_shift: 2,
            gamma_prob: 0.5,
            gamma_range: [0.7, 1.5],
            free_rotation: false,
            max_angle_deg: 15.0,
        }
    }
}

impl AugmentSpec {
    /// No transform is ever drawn.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rot90_prob: 0.0,
            translate_prob: 0.0,
            gamma_prob: 0.0,
            free_rotation: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("rot90_prob", self.rot90_prob),
            ("translate_prob", self.translate_prob),
            ("gamma_prob", self.gamma_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} must be a probability, got {p}"));
            }
        }
        let [lo, hi] = self.gamma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid!(
                "gamma_range must satisfy 0 < lo <= hi, got {lo}..{hi}"
            ));
        }
        Ok(())
    }
}

/// Geometric transforms drawn for one call, in application order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Draw {
    pub flips: [bool; 3],
    /// (axis a, axis b, quarter turns)
    pub rot90: Option<(usize, usize, u8)>,
    pub shift: Option<[isize; 3]>,
    /// (axis a, axis b, radians)
    pub rotation: Option<(usize, usize, f64)>,
    pub gamma: Option<f64>,
}

impl Draw {
    pub fn sample(spec: &AugmentSpec, shape: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Draw::default();
        for f in &mut d.flips {
            *f = rng.random_bool(spec.flip_prob);
        }
        if rng.random_bool(spec.rot90_prob) {
            let planes: Vec<(usize, usize)> = [(0, 1), (0, 2), (1, 2)]
                .into_iter()
                .filter(|&(a, b)| shape[a] == shape[b])
                .collect();
            if !planes.is_empty() {
                let (a, b) = planes[rng.random_range(0..planes.len())];
                d.rot90 = Some((a, b, rng.random_range(1..4)));
            }
        }
        if rng.random_bool(spec.translate_prob) && spec.max_shift > 0 {
            let m = spec.max_shift as i64;
            d.shift = Some([0; 3].map(|_: isize| rng.random_range(-m..=m) as isize));
        }
        if spec.free_rotation {
            let a = rng.random_range(0..3);
            let b = (a + 1 + rng.random_range(0..2)) % 3;
            let max = spec.max_angle_deg.to_radians();
            d.rotation = Some((a.min(b), a.max(b), rng.random_range(-max..=max)));
        }
        if rng.random_bool(spec.gamma_prob) {
            let [lo, hi] = spec.gamma_range;
            d.gamma = Some(if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            });
        }
        d
    }
}

fn index(shape: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * shape[1] + p[1]) * shape[2] + p[2]
}

/// Mirrors the volume along `axis`.
pub fn flip(grid: &VoxelGrid, axis: usize) -> VoxelGrid {
    let shape = grid.shape();
    let src = grid.values();
    let out = (0..src.len())
        .map(|i| {
            let mut p = unravel(i, shape);
            p[axis] = shape[axis] - 1 - p[axis];
            src[index(shape, p)]
        })
        .collect();
    grid.with_values(out).expect("same geometry")
}

/// Quarter turns in the (a, b) plane; both axes must have equal size.
pub fn rot90(grid: &VoxelGrid, a: usize, b: usize, turns: u8) -> Result<VoxelGrid> {
    let shape = grid.shape();
    if shape[a] != shape[b] {
        return Err(invalid!(
            "rot90 needs a square plane, got {} x {}",
            shape[a],
            shape[b]
        ));
    }
    let mut spacing = grid.spacing();
    let mut cur = grid.values().to_vec();
    let n = shape[a];
    for _ in 0..turns % 4 {
        let next = (0..cur.len())
            .map(|i| {
                let p = unravel(i, shape);
                let mut q = p;
                q[a] = n - 1 - p[b];
                q[b] = p[a];
                cur[index(shape, q)]
            })
            .collect();
        cur = next;
        spacing.swap(a, b);
    }
    VoxelGrid::new(shape, spacing, cur)
}

/// Integer translation with zero fill.
pub fn translate(grid: &VoxelGrid, shift: [isize; 3]) -> VoxelGrid {
    let shape = grid.shape();
    let src = grid.values();
    let out = (0..src.len())
        .map(|i| {
            let p = unravel(i, shape);
            let mut q = [0usize; 3];
            for k in 0..3 {
                let s = p[k] as isize - shift[k];
                if s < 0 || s >= shape[k] as isize {
                    return 0.0;
                }
                q[k] = s as usize;
            }
            src[index(shape, q)]
        })
        .collect();
    grid.with_values(out).expect("same geometry")
}

/// Rotation by `angle` about the volume centre in the (a, b) plane,
/// trilinear interpolation, zero outside.
pub fn rotate(grid: &VoxelGrid, a: usize, b: usize, angle: f64) -> VoxelGrid {
    let shape = grid.shape();
    let sp = grid.spacing();
    let src = grid.values();
    let centre = shape.map(|n| (n as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let sample = |p: [f64; 3]| -> f32 {
        let mut acc = 0.0f64;
        let base = p.map(|v| v.floor());
        for corner in 0..8 {
            let mut q = [0usize; 3];
            let mut w = 1.0;
            for k in 0..3 {
                let off = (corner >> (2 - k)) & 1;
                let idx = base[k] + off as f64;
                if idx < 0.0 || idx >= shape[k] as f64 {
                    w = 0.0;
                    break;
                }
                let t = p[k] - base[k];
                w *= if off == 1 { t } else { 1.0 - t };
                q[k] = idx as usize;
            }
            if w != 0.0 {
                acc += w * src[index(shape, q)] as f64;
            }
        }
        acc as f32
    };
    let out = (0..src.len())
        .map(|i| {
            let p = unravel(i, shape);
            // inverse-rotate the output position, in physical units
            let xa = (p[a] as f64 - centre[a]) * sp[a];
            let xb = (p[b] as f64 - centre[b]) * sp[b];
            let (ra, rb) = (c * xa + s * xb, -s * xa + c * xb);
            let mut q = p.map(|v| v as f64);
            q[a] = ra / sp[a] + centre[a];
            q[b] = rb / sp[b] + centre[b];
            sample(q)
        })
        .collect();
    grid.with_values(out).expect("same geometry")
}

/// Power-law intensity change on min–max normalised values.
pub fn gamma(grid: &VoxelGrid, g: f64) -> VoxelGrid {
    let v = grid.values();
    let (lo, hi) = v
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| {
            (l.min(x), h.max(x))
        });
    if hi <= lo {
        return grid.clone();
    }
    let range = (hi - lo) as f64;
    let out = v
        .iter()
        .map(|&x| (lo as f64 + range * ((x - lo) as f64 / range).powf(g)) as f32)
        .collect();
    grid.with_values(out).expect("same geometry")
}

fn apply_geometric(grid: &VoxelGrid, d: &Draw, is_mask: bool) -> Result<VoxelGrid> {
    let mut g = grid.clone();
    for (axis, &f) in d.flips.iter().enumerate() {
        if f {
            g = flip(&g, axis);
        }
    }
    if let Some((a, b, k)) = d.rot90 {
        g = rot90(&g, a, b, k)?;
    }
    if let Some(s) = d.shift {
        g = translate(&g, s);
    }
    if let Some((a, b, angle)) = d.rotation {
        g = rotate(&g, a, b, angle);
        if is_mask {
            let bin = g
                .values()
                .iter()
                .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
                .collect();
            g = g.with_values(bin)?;
        }
    }
    Ok(g)
}

/// Applies one random draw to an image/mask pair: geometric transforms to
/// both, gamma to the image only.
pub fn augment(
    image: &VoxelGrid,
    mask: &BinaryMask,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<(VoxelGrid, BinaryMask)> {
    image.check_geometry(mask.grid(), "augment")?;
    let d = Draw::sample(spec, image.shape(), seed);
    let mut img = apply_geometric(image, &d, false)?;
    if let Some(gm) = d.gamma {
        img = gamma(&img, gm);
    }
    let m = BinaryMask::new(apply_geometric(mask.grid(), &d, true)?)?;
    Ok((img, m))
}

/// Geometric part of [`augment`] for a mask alone.
pub fn augment_mask(mask: &BinaryMask, spec: &AugmentSpec, seed: u64) -> Result<BinaryMask> {
    let d = Draw::sample(spec, mask.shape(), seed);
    BinaryMask::new(apply_geometric(mask.grid(), &d, true)?)
}
