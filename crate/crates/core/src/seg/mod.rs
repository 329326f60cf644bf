//! Residual UNet segmenter, segmentation loss and prior regularizers.

mod loss;
mod train;

pub use loss::{
    dice_loss, reg_term, reg_term_grad, seg_loss, seg_loss_grad, total_loss, total_loss_grad,
    total_loss_grad_logits, wbce, LossBreakdown, Regularizer, Role, VariantKind, VariantSpec,
};
pub use train::{evaluate_segmenter, train_segmenter, write_run, SegEpoch, SegLog, SegTrainConfig};

use std::path::Path;

use jmpe_nn::{Graph, ParamSet, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{activate, Act, Conv};
use crate::volume::{SoftMask, VoxelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegModelSpec {
    pub levels: usize,
    pub base_features: usize,
    pub max_features: usize,
    pub residual_blocks_per_level: usize,
}

impl Default for SegModelSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            base_features: 16,
            max_features: 128,
            residual_blocks_per_level: 2,
        }
    }
}

impl SegModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(invalid!(
                "segmenter levels must be >= 2, got {}",
                self.levels
            ));
        }
        if self.base_features == 0 || self.max_features < self.base_features {
            return Err(invalid!(
                "need 1 <= base_features <= max_features, got {} and {}",
                self.base_features,
                self.max_features
            ));
        }
        Ok(())
    }

    fn features(&self, level: usize) -> usize {
        (self.base_features << level).min(self.max_features)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1 << (self.levels - 1);
        for (axis, &n) in ["d", "h", "w"].iter().zip(&dims) {
            if n == 0 || n % f != 0 {
                return Err(Error::Geometry(format!(
                    "axis {axis} has size {n}, not divisible by {f}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn apply<S: Real>(&self, g: &mut Graph<'_, S>, x: Var) -> Var {
        let h = self.a.apply(g, x);
        let h = activate(g, h, Act::Leaky);
        let h = self.b.apply(g, h);
        let s = g.add(x, h);
        activate(g, s, Act::Leaky)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    fuse: Conv,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct Arch {
    stem: Conv,
    /// Downsampling conv (absent on level 0) and residual blocks per level.
    encoder: Vec<(Option<Conv>, Vec<ResBlock>)>,
    /// Decoder levels from deepest-but-one to full resolution.
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

/// The segmentation network: image in, per-voxel vessel probability out.
#[derive(Clone, Debug)]
pub struct SegNet<S = f32> {
    spec: SegModelSpec,
    params: ParamSet<S>,
    arch: Arch,
}

/// Graph handles of one segmenter forward pass.
pub struct SegVars {
    pub input: Var,
    pub logits: Var,
    pub prob: Var,
}

const SPEC_FILE: &str = "spec.json";
const PARAMS_STEM: &str = "model";

/// Per-volume standardisation applied to every segmenter input.
pub fn standardize(values: &[f32]) -> Vec<f32> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(1e-6);
    values
        .iter()
        .map(|&v| ((v as f64 - mean) / sd) as f32)
        .collect()
}

impl<S: Real> SegNet<S> {
    pub fn new(spec: SegModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let r = spec.residual_blocks_per_level;
        let blocks = |p: &mut ParamSet<S>, name: &str, c: usize, rng: &mut ChaCha8Rng| {
            (0..r)
                .map(|j| ResBlock {
                    a: Conv::new(p, &format!("{name}.res{j}.a"), c, c, 3, 1, rng),
                    b: Conv::new(p, &format!("{name}.res{j}.b"), c, c, 3, 1, rng),
                })
                .collect::<Vec<_>>()
        };
        let c0 = spec.features(0);
        let stem = Conv::new(&mut p, "stem", 1, c0, 3, 1, &mut rng);
        let mut encoder = Vec::new();
        for i in 0..spec.levels {
            let c = spec.features(i);
            let down = (i > 0).then(|| {
                Conv::new(
                    &mut p,
                    &format!("enc{i}.down"),
                    spec.features(i - 1),
                    c,
                    2,
                    2,
                    &mut rng,
                )
            });
            let b = blocks(&mut p, &format!("enc{i}"), c, &mut rng);
            encoder.push((down, b));
        }
        let mut decoder = Vec::new();
        for i in (0..spec.levels - 1).rev() {
            let c = spec.features(i);
            let up = Conv::new(
                &mut p,
                &format!("dec{i}.up"),
                spec.features(i + 1),
                c,
                3,
                1,
                &mut rng,
            );
            let fuse = Conv::new(&mut p, &format!("dec{i}.fuse"), 2 * c, c, 3, 1, &mut rng);
            let b = blocks(&mut p, &format!("dec{i}"), c, &mut rng);
            decoder.push(DecoderLevel {
                up,
                fuse,
                blocks: b,
            });
        }
        let head = Conv::new(&mut p, "head", c0, 1, 1, 1, &mut rng);
        Ok(Self {
            spec,
            params: p,
            arch: Arch {
                stem,
                encoder,
                decoder,
                head,
            },
        })
    }

    pub fn spec(&self) -> &SegModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn cast<T: Real>(&self) -> SegNet<T> {
        SegNet {
            spec: self.spec.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    /// Records a forward pass on an already standardised single-channel input.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, x: Tensor<S>) -> SegVars {
        let input = g.input(x);
        let mut h = self.arch.stem.apply(g, input);
        h = activate(g, h, Act::Leaky);
        let mut skips = Vec::new();
        for (down, blocks) in &self.arch.encoder {
            if let Some(d) = down {
                h = d.apply(g, h);
                h = activate(g, h, Act::Leaky);
            }
            for b in blocks {
                h = b.apply(g, h);
            }
            skips.push(h);
        }
        skips.pop();
        for level in &self.arch.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            h = g.upsample2(h);
            h = level.up.apply(g, h);
            h = activate(g, h, Act::Leaky);
            h = g.concat(skip, h);
            h = level.fuse.apply(g, h);
            h = activate(g, h, Act::Leaky);
            for b in &level.blocks {
                h = b.apply(g, h);
            }
        }
        let logits = self.arch.head.apply(g, h);
        let prob = g.sigmoid(logits);
        SegVars {
            input,
            logits,
            prob,
        }
    }

    /// Vessel probability for `image`.
    pub fn segment(&self, image: &VoxelGrid) -> Result<SoftMask> {
        self.spec.check_dims(image.shape())?;
        let x = Tensor::from_f32(image.shape(), &standardize(image.values()));
        let mut g = Graph::new(&self.params);
        let v = self.forward(&mut g, x);
        let out = g.value(v.prob).to_f32_vec();
        SoftMask::new(image.with_values(out)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(SPEC_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.spec)?)
            .map_err(Error::io(&path))?;
        self.params.cast::<f32>().save(dir, PARAMS_STEM)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SPEC_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let mut net = Self::new(serde_json::from_str(&text)?, 0)?;
        let stored = ParamSet::<f32>::load(dir, PARAMS_STEM)?;
        net.params.assign_from(&stored.cast())?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> SegModelSpec {
        SegModelSpec {
            levels: 3,
            base_features: 2,
            max_features: 8,
            residual_blocks_per_level: 1,
        }
    }

    #[test]
    fn segment_shape_and_range() {
        let net = SegNet::<f32>::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals: Vec<f32> = (0..16 * 16 * 16)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let img = VoxelGrid::new([16; 3], [0.7, 0.8, 0.9], vals).unwrap();
        let out = net.segment(&img).unwrap();
        assert_eq!(out.shape(), [16; 3]);
        assert_eq!(out.grid().spacing(), [0.7, 0.8, 0.9]);
        assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(net.segment(&img).unwrap(), out);
        let bad = VoxelGrid::filled([16, 16, 10], [1.0; 3], 0.0).unwrap();
        assert!(net.segment(&bad).is_err());
    }

    #[test]
    fn default_segments_32_cube() {
        let net = SegNet::<f32>::new(
            SegModelSpec {
                base_features: 4,
                residual_blocks_per_level: 1,
                ..SegModelSpec::default()
            },
            2,
        )
        .unwrap();
        let img = VoxelGrid::filled([32; 3], [1.0; 3], 0.5).unwrap();
        assert_eq!(net.segment(&img).unwrap().shape(), [32; 3]);
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let net = SegNet::<f32>::new(tiny(), 3).unwrap();
        net.save(dir.path()).unwrap();
        let back = SegNet::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.params().checksum(), net.params().checksum());
    }

    #[test]
    fn standardize_moments() {
        let s = standardize(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f32 = s.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert_eq!(standardize(&[2.0; 3]), vec![0.0; 3]);
    }
}
