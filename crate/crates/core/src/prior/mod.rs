//! Shape, topology and joint (JMPE) convolutional auto-encoders.
//!
//! A [`PriorCodec`] owns one encoder, one or two decoder heads and a frozen
//! 1×1×1 projection applied to the latent code before it is compared in the
//! segmentation regularizer.

mod loss;
mod train;

pub use loss::{
    jmpe_loss, jmpe_loss_grad, smooth_l1, voxel_weights, weighted_smooth_l1,
    weighted_smooth_l1_grad, HeadLosses, VoxelWeights,
};
pub use train::{
    evaluate_codec, load_prior_samples, pearson, split_indices, train_prior, train_prior_on,
    CodecEval, PriorEpoch, PriorLog, PriorTrainConfig, TopoWeighting,
};

use std::path::Path;

use jmpe_nn::{Graph, ParamSet, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{run_stack, Act, Conv, Layer};
use crate::topo::compute_edt;
use crate::volume::{BinaryMask, DistanceMap, SoftMask, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Shape,
    Topo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorNetSpec {
    pub levels: usize,
    pub base_features: usize,
    /// Channel cap for the deeper levels.
    pub max_features: usize,
    pub latent_feature_maps: usize,
    pub projection_out_maps: usize,
    pub projection_seed: u64,
    pub heads: Vec<Head>,
}

impl Default for PriorNetSpec {
    fn default() -> Self {
        Self {
            levels: 5,
            base_features: 8,
            max_features: 64,
            latent_feature_maps: 32,
            projection_out_maps: 8,
            projection_seed: 0,
            heads: vec![Head::Shape, Head::Topo],
        }
    }
}

impl PriorNetSpec {
    pub fn with_heads(heads: &[Head]) -> Self {
        Self {
            heads: heads.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(invalid!("levels must be >= 2, got {}", self.levels));
        }
        if self.base_features == 0 || self.max_features < self.base_features {
            return Err(invalid!(
                "need 1 <= base_features <= max_features, got {} and {}",
                self.base_features,
                self.max_features
            ));
        }
        if self.projection_out_maps == 0 || self.latent_feature_maps < self.projection_out_maps {
            return Err(invalid!(
                "need latent_feature_maps >= projection_out_maps >= 1, got {} and {}",
                self.latent_feature_maps,
                self.projection_out_maps
            ));
        }
        if self.heads.is_empty() {
            return Err(invalid!("at least one decoder head is required"));
        }
        let mut h = self.heads.clone();
        h.sort();
        h.dedup();
        if h.len() != self.heads.len() {
            return Err(invalid!("duplicate decoder head in {:?}", self.heads));
        }
        Ok(())
    }

    pub fn has(&self, head: Head) -> bool {
        self.heads.contains(&head)
    }

    pub fn is_jmpe(&self) -> bool {
        self.has(Head::Shape) && self.has(Head::Topo)
    }

    fn features(&self, level: usize) -> usize {
        (self.base_features << level).min(self.max_features)
    }

    /// Spatial reduction factor between input and latent code.
    pub fn factor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = self.factor();
        for (axis, &n) in ["d", "h", "w"].iter().zip(&dims) {
            if n == 0 || n % f != 0 {
                return Err(Error::Geometry(format!(
                    "axis {axis} has size {n}, not divisible by 2^{} = {f}",
                    self.levels - 1
                )));
            }
        }
        Ok(())
    }
}

/// Balancing weights: `alpha_*` for the joint reconstruction loss, `lambda*`
/// for the segmentation regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub alpha_t: f64,
    /// Joint-prior regularization strength.
    pub lambda: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
}

impl Default for LossWeights {
    /// Values tuned for the dual-prior and joint variants.
    fn default() -> Self {
        Self {
            alpha_s: 1.0,
            alpha_t: 1.0,
            lambda: 65.10,
            lambda_s: 63.33,
            lambda_t: 14.53,
        }
    }
}

impl LossWeights {
    /// Regularization strengths tuned for single-prior variants.
    pub fn single_prior() -> Self {
        Self {
            lambda_s: 26.21,
            lambda_t: 32.01,
            ..Self::default()
        }
    }

    pub fn zero_lambdas(self) -> Self {
        Self {
            lambda: 0.0,
            lambda_s: 0.0,
            lambda_t: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_s,
            self.alpha_t,
            self.lambda,
            self.lambda_s,
            self.lambda_t,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid!(
                "loss weights must be finite and >= 0, got {self:?}"
            ));
        }
        Ok(())
    }
}

/// Latent code together with the voxel spacing of the volume it came from.
#[derive(Clone, Debug)]
pub struct Latent<S> {
    pub code: Tensor<S>,
    pub spacing: [f64; 3],
}

#[derive(Clone, Debug)]
struct Arch {
    encoder: Vec<Layer>,
    shape: Option<Vec<Layer>>,
    topo: Option<Vec<Layer>>,
}

fn build<S: Real>(spec: &PriorNetSpec, rng: &mut ChaCha8Rng) -> (ParamSet<S>, Arch) {
    let mut p = ParamSet::new();
    let l = spec.levels;
    let mut encoder = Vec::new();
    let mut prev = 1;
    for i in 0..l {
        let c = spec.features(i);
        if i > 0 {
            encoder.push(Layer::Conv(
                Conv::new(&mut p, &format!("enc{i}.down"), prev, c, 2, 2, rng),
                Act::Leaky,
            ));
            prev = c;
        }
        for j in 0..2 {
            encoder.push(Layer::Conv(
                Conv::new(&mut p, &format!("enc{i}.conv{j}"), prev, c, 3, 1, rng),
                Act::Leaky,
            ));
            prev = c;
        }
    }
    encoder.push(Layer::Conv(
        Conv::new(
            &mut p,
            "enc.latent",
            prev,
            spec.latent_feature_maps,
            1,
            1,
            rng,
        ),
        Act::Linear,
    ));

    let mut decoder = |name: &str, out: Act, p: &mut ParamSet<S>| {
        let mut layers = Vec::new();
        let top = spec.features(l - 1);
        layers.push(Layer::Conv(
            Conv::new(
                p,
                &format!("{name}.in"),
                spec.latent_feature_maps,
                top,
                1,
                1,
                rng,
            ),
            Act::Leaky,
        ));
        let mut prev = top;
        for i in (0..l - 1).rev() {
            let c = spec.features(i);
            layers.push(Layer::Up);
            for j in 0..2 {
                layers.push(Layer::Conv(
                    Conv::new(p, &format!("{name}{i}.conv{j}"), prev, c, 3, 1, rng),
                    Act::Leaky,
                ));
                prev = c;
            }
        }
        layers.push(Layer::Conv(
            Conv::new(p, &format!("{name}.out"), prev, 1, 1, 1, rng),
            out,
        ));
        layers
    };
    let shape = spec
        .has(Head::Shape)
        .then(|| decoder("shape", Act::Sigmoid, &mut p));
    let topo = spec
        .has(Head::Topo)
        .then(|| decoder("topo", Act::Relu, &mut p));
    (
        p,
        Arch {
            encoder,
            shape,
            topo,
        },
    )
}

fn projection_weights(spec: &PriorNetSpec) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.projection_seed);
    let normal = Normal::new(0.0, 1.0 / (spec.latent_feature_maps as f64).sqrt()).expect("std > 0");
    let n = spec.latent_feature_maps * spec.projection_out_maps;
    let w = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
    let mut set = ParamSet::new();
    set.add(
        "projection",
        vec![spec.latent_feature_maps, spec.projection_out_maps],
        w,
    );
    set
}

/// Graph handles for one forward pass through a codec.
pub struct CodecVars {
    pub input: Var,
    pub latent: Var,
    pub shape: Option<Var>,
    pub topo: Option<Var>,
}

/// Trained (or freshly initialised) prior network.
#[derive(Clone, Debug)]
pub struct PriorCodec<S = f32> {
    spec: PriorNetSpec,
    params: ParamSet<S>,
    projection: ParamSet<f32>,
    arch: Arch,
}

const SPEC_FILE: &str = "spec.json";
const PARAMS_STEM: &str = "params";
const PROJECTION_STEM: &str = "projection";

impl<S: Real> PriorCodec<S> {
    /// He-initialised codec; `weight_seed` drives the trainable weights and
    /// `spec.projection_seed` the frozen projection.
    pub fn new(spec: PriorNetSpec, weight_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let (params, arch) = build(&spec, &mut rng);
        let projection = projection_weights(&spec);
        Ok(Self {
            spec,
            params,
            projection,
            arch,
        })
    }

    pub fn spec(&self) -> &PriorNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Checksum over the trainable parameters and the projection.
    pub fn checksum(&self) -> String {
        format!("{}-{}", self.params.checksum(), self.projection.checksum())
    }

    pub fn projection_checksum(&self) -> String {
        self.projection.checksum()
    }

    pub fn cast<T: Real>(&self) -> PriorCodec<T> {
        PriorCodec {
            spec: self.spec.clone(),
            params: self.params.cast(),
            projection: self.projection.clone(),
            arch: self.arch.clone(),
        }
    }

    /// Records encoder and all present heads on `g`.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, x: Tensor<S>) -> CodecVars {
        let input = g.input(x);
        let latent = run_stack(g, input, &self.arch.encoder);
        let shape = self.arch.shape.as_ref().map(|l| run_stack(g, latent, l));
        let topo = self.arch.topo.as_ref().map(|l| run_stack(g, latent, l));
        CodecVars {
            input,
            latent,
            shape,
            topo,
        }
    }

    /// Records only the encoder on `g`; returns (input, latent).
    pub fn forward_encoder<'p>(&'p self, g: &mut Graph<'p, S>, x: Tensor<S>) -> (Var, Var) {
        let input = g.input(x);
        let latent = run_stack(g, input, &self.arch.encoder);
        (input, latent)
    }

    pub fn encode_tensor(&self, x: Tensor<S>) -> Result<Tensor<S>> {
        self.spec.check_dims(x.dims)?;
        if x.channels != 1 {
            return Err(invalid!("encoder expects 1 channel, got {}", x.channels));
        }
        let mut g = Graph::new(&self.params);
        let (_, z) = self.forward_encoder(&mut g, x);
        Ok(g.value(z).clone())
    }

    /// Encodes a (possibly soft) mask.
    pub fn encode(&self, mask: &SoftMask) -> Result<Latent<S>> {
        let x = Tensor::from_f32(mask.shape(), mask.values());
        Ok(Latent {
            code: self.encode_tensor(x)?,
            spacing: mask.grid().spacing(),
        })
    }

    fn decode_head(&self, z: &Latent<S>, head: Head) -> Result<VoxelGrid> {
        let layers = match head {
            Head::Shape => self.arch.shape.as_ref(),
            Head::Topo => self.arch.topo.as_ref(),
        }
        .ok_or_else(|| invalid!("codec has no {head:?} head"))?;
        if z.code.channels != self.spec.latent_feature_maps {
            return Err(invalid!(
                "latent has {} channels, codec expects {}",
                z.code.channels,
                self.spec.latent_feature_maps
            ));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(z.code.clone());
        let y = run_stack(&mut g, x, layers);
        let out = g.value(y);
        VoxelGrid::new(out.dims, z.spacing, out.to_f32_vec())
    }

    pub fn decode_shape(&self, z: &Latent<S>) -> Result<SoftMask> {
        SoftMask::new(self.decode_head(z, Head::Shape)?)
    }

    pub fn decode_topo(&self, z: &Latent<S>) -> Result<DistanceMap> {
        DistanceMap::new(self.decode_head(z, Head::Topo)?)
    }

    /// Applies the frozen 1×1×1 projection per voxel, in `f64`.
    pub fn project_code(&self, z: &Tensor<S>) -> Result<Tensor<f64>> {
        let (cin, cout) = (self.spec.latent_feature_maps, self.spec.projection_out_maps);
        if z.channels != cin {
            return Err(invalid!(
                "latent has {} channels, projection expects {cin}",
                z.channels
            ));
        }
        let w = self.projection.get(jmpe_nn::ParamId(0));
        let mut out = Tensor::zeros(z.dims, cout);
        for v in 0..z.voxels() {
            let src = &z.data[v * cin..(v + 1) * cin];
            let dst = &mut out.data[v * cout..(v + 1) * cout];
            for (ci, &x) in src.iter().enumerate() {
                let x = x.as_f64();
                let row = &w[ci * cout..(ci + 1) * cout];
                for (o, &wv) in dst.iter_mut().zip(row) {
                    *o += x * wv as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn project_latent(&self, z: &Latent<S>) -> Result<Tensor<f64>> {
        self.project_code(&z.code)
    }

    /// Pulls a gradient on the projected code back to the latent code (`Pᵀ g`).
    pub fn project_code_adjoint(&self, g: &Tensor<f64>) -> Tensor<S> {
        let (cin, cout) = (self.spec.latent_feature_maps, self.spec.projection_out_maps);
        let w = self.projection.get(jmpe_nn::ParamId(0));
        let mut out = Tensor::zeros(g.dims, cin);
        for v in 0..g.voxels() {
            let src = &g.data[v * cout..(v + 1) * cout];
            for ci in 0..cin {
                let row = &w[ci * cout..(ci + 1) * cout];
                let s: f64 = row.iter().zip(src).map(|(&a, &b)| a as f64 * b).sum();
                out.data[v * cin + ci] = S::from_f64_lossy(s);
            }
        }
        out
    }

    /// Writes parameters, projection and a spec echo into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let spec_path = dir.join(SPEC_FILE);
        std::fs::write(&spec_path, serde_json::to_string_pretty(&self.spec)?)
            .map_err(Error::io(&spec_path))?;
        self.params.cast::<f32>().save(dir, PARAMS_STEM)?;
        self.projection.save(dir, PROJECTION_STEM)?;
        Ok(())
    }

    /// Loads a codec written by [`PriorCodec::save`]. The stored projection
    /// must match the one regenerated from the recorded seed.
    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        let text = std::fs::read_to_string(&spec_path).map_err(Error::io(&spec_path))?;
        let spec: PriorNetSpec = serde_json::from_str(&text)?;
        let mut codec = Self::new(spec, 0)?;
        let stored = ParamSet::<f32>::load(dir, PARAMS_STEM)?;
        codec.params.assign_from(&stored.cast())?;
        let proj = ParamSet::<f32>::load(dir, PROJECTION_STEM)?;
        if proj.checksum() != codec.projection.checksum() {
            return Err(invalid!(
                "projection weights in {} do not match projection_seed {}",
                dir.display(),
                codec.spec.projection_seed
            ));
        }
        Ok(codec)
    }
}

/// Training pair for the prior networks: the input and shape target are the
/// mask itself; the topology target is its EDT divided by the per-volume
/// maximum.
#[derive(Clone, Debug)]
pub struct PriorSample {
    pub input: BinaryMask,
    pub shape_target: BinaryMask,
    pub topo_target: DistanceMap,
    /// Maximum EDT value (mm) the topology target was divided by.
    pub topo_scale: f64,
}

impl PriorSample {
    pub fn from_mask(mask: &BinaryMask) -> Result<Self> {
        if mask.is_empty() {
            return Err(invalid!("prior sample needs a nonempty mask"));
        }
        let edt = compute_edt(mask)?;
        let scale = edt.max() as f64;
        let norm = edt
            .values()
            .iter()
            .map(|&v| (v as f64 / scale) as f32)
            .collect();
        let topo_target = DistanceMap::new(mask.grid().with_values(norm)?)?;
        Ok(Self {
            input: mask.clone(),
            shape_target: mask.clone(),
            topo_target,
            topo_scale: scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_tree, TreeSpec};

    fn small_spec(heads: &[Head]) -> PriorNetSpec {
        PriorNetSpec {
            levels: 3,
            base_features: 2,
            max_features: 4,
            latent_feature_maps: 6,
            projection_out_maps: 3,
            heads: heads.to_vec(),
            ..PriorNetSpec::default()
        }
    }

    #[test]
    fn latent_shape_follows_levels() {
        let codec = PriorCodec::<f32>::new(PriorNetSpec::default(), 1).unwrap();
        let m = SoftMask::new(VoxelGrid::filled([32; 3], [1.0; 3], 0.5).unwrap()).unwrap();
        let z = codec.encode(&m).unwrap();
        assert_eq!((z.code.dims, z.code.channels), ([2; 3], 32));
        let z2 = codec.encode(&m).unwrap();
        assert_eq!(z.code.data, z2.code.data);
        let p = codec.project_latent(&z).unwrap();
        assert_eq!((p.dims, p.channels), ([2; 3], 8));

        let ok = SoftMask::new(VoxelGrid::filled([48; 3], [1.0; 3], 0.0).unwrap()).unwrap();
        assert_eq!(codec.encode(&ok).unwrap().code.dims, [3; 3]);
        let bad = SoftMask::new(VoxelGrid::filled([16, 20, 16], [1.0; 3], 0.0).unwrap()).unwrap();
        let err = codec.encode(&bad).unwrap_err().to_string();
        assert!(err.contains("axis h"), "{err}");
    }

    #[test]
    fn heads_are_bounded_and_checked() {
        let codec = PriorCodec::<f32>::new(small_spec(&[Head::Shape, Head::Topo]), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 5.0).unwrap();
        let code = Tensor::from_vec(
            [2; 3],
            6,
            (0..48).map(|_| normal.sample(&mut rng) as f32).collect(),
        );
        let z = Latent {
            code,
            spacing: [1.0; 3],
        };
        let s = codec.decode_shape(&z).unwrap();
        assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.shape(), [8; 3]);
        let t = codec.decode_topo(&z).unwrap();
        assert!(t.values().iter().all(|&v| v >= 0.0));

        let shape_only = PriorCodec::<f32>::new(small_spec(&[Head::Shape]), 3).unwrap();
        assert!(shape_only.decode_topo(&z).is_err());
        assert!(!shape_only.spec().is_jmpe());
    }

    #[test]
    fn spec_validation() {
        assert!(PriorNetSpec::default().validate().is_ok());
        for bad in [
            PriorNetSpec {
                levels: 1,
                ..PriorNetSpec::default()
            },
            PriorNetSpec {
                base_features: 0,
                ..PriorNetSpec::default()
            },
            PriorNetSpec {
                projection_out_maps: 64,
                ..PriorNetSpec::default()
            },
            PriorNetSpec {
                projection_out_maps: 0,
                ..PriorNetSpec::default()
            },
            PriorNetSpec::with_heads(&[]),
            PriorNetSpec::with_heads(&[Head::Topo, Head::Topo]),
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn projection_is_linear_and_frozen() {
        let codec = PriorCodec::<f64>::new(small_spec(&[Head::Shape]), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rand_t = || {
            Tensor::from_vec(
                [2; 3],
                6,
                (0..48).map(|_| normal.sample(&mut rng)).collect(),
            )
        };
        let (z1, z2) = (rand_t(), rand_t());
        let (a, b) = (0.7, -1.3);
        let mix = Tensor::from_vec(
            [2; 3],
            6,
            z1.data
                .iter()
                .zip(&z2.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        );
        let (p1, p2, pm) = (
            codec.project_code(&z1).unwrap(),
            codec.project_code(&z2).unwrap(),
            codec.project_code(&mix).unwrap(),
        );
        for i in 0..pm.len() {
            assert!((pm.data[i] - (a * p1.data[i] + b * p2.data[i])).abs() < 1e-6);
        }
        let zero = codec.project_code(&Tensor::zeros([2; 3], 6)).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert!(codec.project_code(&Tensor::zeros([2; 3], 5)).is_err());

        // adjoint: <P z, g> == <z, P^T g>
        let g = Tensor::from_vec([2; 3], 3, (0..24).map(|i| (i as f64).sin()).collect());
        let lhs: f64 = p1.data.iter().zip(&g.data).map(|(x, y)| x * y).sum();
        let back = codec.project_code_adjoint(&g);
        let rhs: f64 = z1.data.iter().zip(&back.data).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-9);

        // same projection seed, different weight seed -> same projection
        let other = PriorCodec::<f64>::new(small_spec(&[Head::Shape]), 10).unwrap();
        assert_eq!(codec.projection_checksum(), other.projection_checksum());
        assert_ne!(codec.checksum(), other.checksum());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codec = PriorCodec::<f32>::new(small_spec(&[Head::Shape, Head::Topo]), 4).unwrap();
        codec.save(dir.path()).unwrap();
        let back = PriorCodec::<f32>::load(dir.path()).unwrap();
        assert_eq!(codec.checksum(), back.checksum());
        assert_eq!(back.spec(), codec.spec());

        let mut tampered = small_spec(&[Head::Shape, Head::Topo]);
        tampered.projection_seed = 77;
        std::fs::write(
            dir.path().join(SPEC_FILE),
            serde_json::to_string(&tampered).unwrap(),
        )
        .unwrap();
        assert!(PriorCodec::<f32>::load(dir.path()).is_err());
    }

    #[test]
    fn prior_sample_targets() {
        let s = generate_tree(&TreeSpec {
            seed: 2,
            ..TreeSpec::default()
        })
        .unwrap();
        let p = PriorSample::from_mask(&s.mask).unwrap();
        let t = p.topo_target.values();
        assert_eq!(p.topo_target.max(), 1.0);
        for i in 0..t.len() {
            assert_eq!(t[i] == 0.0, !p.shape_target.is_fg(i));
        }
        assert!(p.topo_scale >= 1.0);
    }
}
