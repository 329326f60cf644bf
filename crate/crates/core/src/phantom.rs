//! Procedural vascular-tree phantoms.
//!
//! A phantom is a recursive bifurcating tree of capsules (tubes with
//! spherical caps). Each generation's radius is the previous one times
//! `radius_decay`. A voxel is foreground iff its centre lies within a
//! segment's radius of that segment. The synthetic image is the mask plateau
//! blurred, plus a smooth background field and Gaussian noise, clipped to
//! `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::volume::{load_grid, load_mask, save_grid, save_mask, BinaryMask, VoxelGrid};

/// Intensity of background and vessel plateau before blur and noise.
pub const BACKGROUND_LEVEL: f32 = 0.3;
pub const VESSEL_LEVEL: f32 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeSpec {
    pub seed: u64,
    /// Number of generations (1 = a single straight tube).
    pub depth: usize,
    pub root_radius_vox: f64,
    pub radius_decay: f64,
    /// Angle between a child and its parent direction, radians.
    pub branch_angle_range: [f64; 2],
    /// Segment length in voxels; later generations are scaled by `radius_decay`.
    pub segment_length_range: [f64; 2],
    pub grid_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub blur_sigma_vox: f64,
    /// Noise standard deviation as a fraction of vessel/background contrast.
    pub noise_fraction: f64,
    /// Amplitude of the smooth background field, same units.
    pub background_amplitude: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            depth: 4,
            root_radius_vox: 2.5,
            radius_decay: 0.8,
            branch_angle_range: [0.45, 0.9],
            segment_length_range: [7.0, 11.0],
            grid_shape: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            blur_sigma_vox: 0.8,
            noise_fraction: 0.1,
            background_amplitude: 0.1,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(invalid!("depth must be >= 1"));
        }
        if !(self.root_radius_vox >= 1.0) {
            return Err(invalid!("root_radius_vox must be >= 1"));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return Err(invalid!("radius_decay must lie in (0, 1)"));
        }
        let thinnest = self.radius_at(self.depth - 1);
        if thinnest < 1.0 {
            return Err(invalid!(
                "generation {} radius {thinnest:.3} < 1 voxel; thinner tubes may disconnect",
                self.depth - 1
            ));
        }
        let [a0, a1] = self.branch_angle_range;
        let [l0, l1] = self.segment_length_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 < std::f64::consts::FRAC_PI_2 * 1.5) {
            return Err(invalid!(
                "bad branch_angle_range {:?}",
                self.branch_angle_range
            ));
        }
        if !(0.0 < l0 && l0 <= l1) {
            return Err(invalid!(
                "bad segment_length_range {:?}",
                self.segment_length_range
            ));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid!("spacing must be positive"));
        }
        let need = 2.0 * (self.root_radius_vox + 1.0);
        if self.grid_shape.iter().any(|&n| (n as f64) < need) {
            return Err(invalid!(
                "grid {:?} cannot hold a root tube of radius {}",
                self.grid_shape,
                self.root_radius_vox
            ));
        }
        if self.blur_sigma_vox < 0.0 || self.noise_fraction < 0.0 || self.background_amplitude < 0.0
        {
            return Err(invalid!("image noise parameters must be non-negative"));
        }
        Ok(())
    }

    pub fn radius_at(&self, generation: usize) -> f64 {
        self.root_radius_vox * self.radius_decay.powi(generation as i32)
    }
}

/// One tube segment, in voxel coordinates `(d, h, w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub generation: usize,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
}

impl Branch {
    /// Distance from `p` to the segment and the clamped projection parameter.
    pub fn distance(&self, p: [f64; 3]) -> (f64, f64) {
        let d = sub(self.end, self.start);
        let len2 = dot(d, d);
        let t = if len2 > 0.0 {
            (dot(sub(p, self.start), d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [
            self.start[0] + t * d[0],
            self.start[1] + t * d[1],
            self.start[2] + t * d[2],
        ];
        (norm(sub(p, q)), t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: VoxelGrid,
    pub mask: BinaryMask,
    pub branches: Vec<Branch>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Two unit vectors orthogonal to `dir` and to each other.
fn basis(dir: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if dir[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = normalize(cross(dir, helper));
    let v = cross(dir, u);
    (u, v)
}

fn build_tree(spec: &TreeSpec, rng: &mut ChaCha8Rng) -> Vec<Branch> {
    let shape = spec.grid_shape.map(|n| n as f64);
    let clamp_inside = |p: [f64; 3], r: f64| -> [f64; 3] {
        let mut q = p;
        for a in 0..3 {
            let lo = r + 1.0;
            let hi = shape[a] - 2.0 - r;
            q[a] = if lo <= hi {
                q[a].clamp(lo, hi)
            } else {
                (shape[a] - 1.0) / 2.0
            };
        }
        q
    };
    let r0 = spec.root_radius_vox;
    let start = clamp_inside(
        [r0 + 1.0, (shape[1] - 1.0) / 2.0, (shape[2] - 1.0) / 2.0],
        r0,
    );
    let tilt = rng.random_range(0.0..0.25);
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = normalize([1.0, tilt * az.cos(), tilt * az.sin()]);
    let mut branches = Vec::new();
    let mut stack = vec![(start, dir, 0usize)];
    while let Some((from, dir, g)) = stack.pop() {
        let radius = spec.radius_at(g);
        let [l0, l1] = spec.segment_length_range;
        let len = rng.random_range(l0..=l1) * spec.radius_decay.powi(g as i32);
        let end = clamp_inside(
            [
                from[0] + dir[0] * len,
                from[1] + dir[1] * len,
                from[2] + dir[2] * len,
            ],
            radius,
        );
        branches.push(Branch {
            generation: g,
            start: from,
            end,
            radius,
        });
        if g + 1 < spec.depth {
            let mut heading = sub(end, from);
            if norm(heading) < 1e-9 {
                heading = dir;
            }
            let heading = normalize(heading);
            let (u, v) = basis(heading);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            for k in 0..2 {
                let [a0, a1] = spec.branch_angle_range;
                let theta = rng.random_range(a0..=a1);
                let p = phi + k as f64 * std::f64::consts::PI;
                let side = [
                    u[0] * p.cos() + v[0] * p.sin(),
                    u[1] * p.cos() + v[1] * p.sin(),
                    u[2] * p.cos() + v[2] * p.sin(),
                ];
                let child = normalize([
                    heading[0] * theta.cos() + side[0] * theta.sin(),
                    heading[1] * theta.cos() + side[1] * theta.sin(),
                    heading[2] * theta.cos() + side[2] * theta.sin(),
                ]);
                stack.push((end, child, g + 1));
            }
        }
    }
    branches
}

fn voxelize(shape: [usize; 3], branches: &[Branch]) -> Vec<bool> {
    let mut fg = vec![false; shape.iter().product()];
    for b in branches {
        let lo: Vec<usize> = (0..3)
            .map(|a| (b.start[a].min(b.end[a]) - b.radius).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((b.start[a].max(b.end[a]) + b.radius).ceil() as usize).min(shape[a] - 1))
            .collect();
        for d in lo[0]..=hi[0] {
            for h in lo[1]..=hi[1] {
                for w in lo[2]..=hi[2] {
                    let (dist, _) = b.distance([d as f64, h as f64, w as f64]);
                    if dist <= b.radius {
                        fg[(d * shape[1] + h) * shape[2] + w] = true;
                    }
                }
            }
        }
    }
    fg
}

fn gaussian_blur(values: &mut [f32], shape: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let src = values.to_vec();
        let n = shape[axis] as isize;
        for i in 0..values.len() {
            let c = ((i / strides[axis]) % shape[axis]) as isize;
            let base = i as isize - c * strides[axis] as isize;
            let mut acc = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                // replicate the edge voxel outside the grid
                let j = (c + k as isize - radius).clamp(0, n - 1);
                acc += wt * src[(base + j * strides[axis] as isize) as usize] as f64;
            }
            values[i] = (acc / ksum) as f32;
        }
    }
}

/// Generates one phantom; deterministic in `spec.seed`.
pub fn generate_tree(spec: &TreeSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let branches = build_tree(spec, &mut rng);
    let shape = spec.grid_shape;
    let fg = voxelize(shape, &branches);
    let mask = BinaryMask::from_bools(shape, spec.spacing, &fg)?;

    let contrast = (VESSEL_LEVEL - BACKGROUND_LEVEL) as f64;
    let mut img: Vec<f32> = fg
        .iter()
        .map(|&f| if f { VESSEL_LEVEL } else { BACKGROUND_LEVEL })
        .collect();
    gaussian_blur(&mut img, shape, spec.blur_sigma_vox);
    // smooth background: a few low-frequency plane waves
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let k = scale(
                normalize(k),
                std::f64::consts::TAU / (2.0 * shape[0] as f64),
            );
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_fraction * contrast).expect("valid noise sigma");
    let amp = spec.background_amplitude * contrast / waves.len() as f64;
    for (i, v) in img.iter_mut().enumerate() {
        let [d, h, w] = crate::volume::unravel(i, shape);
        let p = [d as f64, h as f64, w as f64];
        let field: f64 = waves.iter().map(|(k, ph)| (dot(*k, p) + ph).sin()).sum();
        let n = noise.sample(&mut rng);
        *v = (*v as f64 + amp * field + n).clamp(0.0, 1.0) as f32;
    }
    let image = VoxelGrid::new(shape, spec.spacing, img)?;
    Ok(PhantomSample {
        image,
        mask,
        branches,
    })
}

/// One dataset entry; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// An image with its vessel mask, held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: VoxelGrid,
    pub mask: BinaryMask,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.entries)?).map_err(Error::io(path))
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image)
    }

    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].mask)
    }

    /// Loads every image/mask pair into memory.
    pub fn load_cases(&self) -> Result<Vec<Case>> {
        (0..self.len())
            .map(|i| {
                let wrap = |e: Error| Error::Sample {
                    index: i,
                    source: Box::new(e),
                };
                let image = load_grid(&self.image_path(i)).map_err(wrap)?;
                let mask = load_mask(&self.mask_path(i)).map_err(wrap)?;
                image
                    .check_geometry(mask.grid(), "image/mask pair")
                    .map_err(wrap)?;
                Ok(Case {
                    id: self.entries[i].id.clone(),
                    image,
                    mask,
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Writes `n` phantoms with seeds `seed..seed + n` and a JSON manifest.
pub fn make_dataset(template: &TreeSpec, n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(invalid!("dataset size must be >= 1"));
    }
    template.validate()?;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let results = par::map_indexed(n, |i| -> Result<ManifestEntry> {
        let s = seed + i as u64;
        let spec = TreeSpec {
            seed: s,
            ..template.clone()
        };
        let wrap = |e: Error| Error::Sample {
            index: i,
            source: Box::new(e),
        };
        let sample = generate_tree(&spec).map_err(wrap)?;
        let id = format!("phantom_{i:04}");
        let image = format!("{id}_image.raw");
        let mask = format!("{id}_mask.raw");
        save_grid(&sample.image, &out_dir.join(&image)).map_err(wrap)?;
        save_mask(&sample.mask, &out_dir.join(&mask)).map_err(wrap)?;
        let tree = out_dir.join(format!("{id}_tree.json"));
        fs::write(
            &tree,
            serde_json::to_string_pretty(&sample.branches)
                .map_err(Error::from)
                .map_err(wrap)?,
        )
        .map_err(|e| wrap(Error::io(&tree)(e)))?;
        Ok(ManifestEntry {
            id,
            seed: s,
            image,
            mask,
        })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topo::components;

    #[test]
    fn single_generation_is_one_tube() {
        let spec = TreeSpec {
            depth: 1,
            seed: 11,
            ..TreeSpec::default()
        };
        let s = generate_tree(&spec).unwrap();
        assert_eq!(s.branches.len(), 1);
        assert_eq!(components(&s.mask.to_bools(), s.mask.shape(), false), 1);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = TreeSpec {
            seed: 42,
            ..TreeSpec::default()
        };
        assert_eq!(generate_tree(&spec).unwrap(), generate_tree(&spec).unwrap());
    }

    #[test]
    fn rejects_invalid_specs() {
        for bad in [
            TreeSpec {
                depth: 0,
                ..TreeSpec::default()
            },
            TreeSpec {
                root_radius_vox: 0.5,
                ..TreeSpec::default()
            },
            TreeSpec {
                radius_decay: 1.0,
                ..TreeSpec::default()
            },
            TreeSpec {
                grid_shape: [4, 32, 32],
                ..TreeSpec::default()
            },
            TreeSpec {
                depth: 8,
                ..TreeSpec::default()
            },
        ] {
            assert!(generate_tree(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn foreground_is_connected_sparse_and_sound() {
        for seed in 0..40 {
            let spec = TreeSpec {
                seed,
                ..TreeSpec::default()
            };
            let s = generate_tree(&spec).unwrap();
            let fg = s.mask.to_bools();
            assert_eq!(components(&fg, s.mask.shape(), false), 1, "seed {seed}");
            let frac = s.mask.count() as f64 / fg.len() as f64;
            assert!(frac > 0.0 && frac < 0.5, "seed {seed}: fraction {frac}");
            for (i, &f) in fg.iter().enumerate() {
                if !f {
                    continue;
                }
                let [d, h, w] = crate::volume::unravel(i, s.mask.shape());
                let p = [d as f64, h as f64, w as f64];
                let ok = s
                    .branches
                    .iter()
                    .any(|b| b.distance(p).0 <= b.radius + 0.75);
                assert!(ok, "seed {seed}: voxel {i} outside every tube");
            }
        }
    }

    #[test]
    fn generation_radii_follow_geometric_decay() {
        // Measured radius of a branch: the largest distance to its axis among
        // voxels that are closest to it and away from its end caps.
        let spec = TreeSpec {
            seed: 3,
            depth: 4,
            radius_decay: 0.8,
            ..TreeSpec::default()
        };
        let s = generate_tree(&spec).unwrap();
        let fg = s.mask.to_bools();
        for g in 0..4 {
            let want = spec.root_radius_vox * 0.8f64.powi(g as i32);
            let mut measured: f64 = 0.0;
            for (bi, b) in s.branches.iter().enumerate() {
                if b.generation != g {
                    continue;
                }
                assert!((b.radius - want).abs() < 1e-12);
                for (i, &f) in fg.iter().enumerate() {
                    if !f {
                        continue;
                    }
                    let [d, h, w] = crate::volume::unravel(i, s.mask.shape());
                    let p = [d as f64, h as f64, w as f64];
                    let (dist, t) = b.distance(p);
                    let nearest = s
                        .branches
                        .iter()
                        .enumerate()
                        .all(|(j, o)| j == bi || o.distance(p).0 - o.radius > dist - b.radius);
                    if (0.2..=0.8).contains(&t) && nearest {
                        measured = measured.max(dist);
                    }
                }
            }
            assert!(
                (measured - want).abs() <= 0.5,
                "generation {g}: measured {measured:.3} vs {want:.3}"
            );
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = TreeSpec::default();
        let ma = make_dataset(&spec, 3, 100, a.path()).unwrap();
        let mb = make_dataset(&spec, 3, 100, b.path()).unwrap();
        assert_eq!(ma.entries, mb.entries);
        assert_eq!(ma.entries.len(), 3);
        assert_eq!(ma.entries[2].seed, 102);
        for i in 0..3 {
            let fa = std::fs::read(ma.image_path(i)).unwrap();
            let fb = std::fs::read(mb.image_path(i)).unwrap();
            assert_eq!(fa, fb);
        }
        let reloaded = Manifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded.entries, ma.entries);
    }
}
