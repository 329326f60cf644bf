//! Prior-network training loop and held-out evaluation.

use jmpe_nn::{cosine_lr, Adam, AdamConfig, FlushDenormals, Gradients, Graph, ParamSet, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::jmpe_loss_grad;
use super::{Head, PriorCodec, PriorNetSpec, PriorSample};
use crate::error::{invalid, Error, Result};
use crate::harness::augment::{augment_mask, AugmentSpec};
use crate::harness::config::{AUGMENT_OFFSET, SHUFFLE_OFFSET, WEIGHTS_OFFSET};
use crate::metrics::dsc;
use crate::phantom::Manifest;
use crate::volume::{binarize, BinaryMask, SoftMask};

/// How the topology head's voxel weights are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopoWeighting {
    /// Class-balancing weights from the binary mask, as for the shape head.
    #[default]
    Mask,
    /// Every voxel weighted 1.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub val_fraction: f64,
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub topo_weighting: TopoWeighting,
    /// Geometric augmentation of training masks; `None` disables it.
    pub augment: Option<AugmentSpec>,
    /// When set, the learning rate is cosine-annealed from `adam.lr` to
    /// this value over the run.
    pub lr_min: Option<f64>,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 2,
            adam: AdamConfig::with_lr(1e-4),
            seed: 0,
            val_fraction: 0.2,
            alpha_s: 1.0,
            alpha_t: 1.0,
            topo_weighting: TopoWeighting::Mask,
            augment: None,
            lr_min: None,
        }
    }
}

impl PriorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.alpha_s < 0.0 || self.alpha_t < 0.0 {
            return Err(invalid!("task weights must be >= 0"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if let Some(m) = self.lr_min {
            if !(m >= 0.0 && m <= self.adam.lr) {
                return Err(invalid!("lr_min must be in [0, adam.lr], got {m}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEpoch {
    pub epoch: usize,
    pub shape_loss: Option<f64>,
    pub topo_loss: Option<f64>,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorLog {
    pub epochs: Vec<PriorEpoch>,
    pub best_epoch: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

impl PriorLog {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,shape_loss,topo_loss,train_loss,val_loss\n");
        for e in &self.epochs {
            s += &format!(
                "{},{},{},{},{}\n",
                e.epoch,
                f(e.shape_loss),
                f(e.topo_loss),
                e.train_loss,
                f(e.val_loss)
            );
        }
        s
    }
}

/// Masks listed in a manifest, as prior-training samples.
pub fn load_prior_samples(manifest: &Manifest) -> Result<Vec<PriorSample>> {
    manifest
        .load_cases()?
        .iter()
        .enumerate()
        .map(|(i, c)| {
            PriorSample::from_mask(&c.mask).map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn to_tensor(dims: [usize; 3], v: Vec<f64>) -> Tensor<f32> {
    Tensor::from_vec(dims, 1, v.into_iter().map(|x| x as f32).collect())
}

/// Loss of one sample; accumulates parameter gradients when `grads` is given.
fn sample_step(
    codec: &PriorCodec<f32>,
    sample: &PriorSample,
    cfg: &PriorTrainConfig,
    grads: Option<&mut Gradients<f32>>,
) -> Result<super::HeadLosses> {
    let dims = sample.input.shape();
    let x = Tensor::from_f32(dims, sample.input.grid().values());
    let mut g = Graph::new(codec.params());
    let vars = codec.forward(&mut g, x);
    let shape = vars.shape.map(|v| to_f64(g.value(v)));
    let topo = vars.topo.map(|v| to_f64(g.value(v)));
    let uniform;
    let topo_w = match cfg.topo_weighting {
        TopoWeighting::Mask => None,
        TopoWeighting::Uniform => {
            uniform = vec![1.0; sample.input.grid().len()];
            Some(uniform.as_slice())
        }
    };
    let (losses, ds, dt) = jmpe_loss_grad(
        shape.as_deref(),
        topo.as_deref(),
        sample,
        cfg.alpha_s,
        cfg.alpha_t,
        topo_w,
    )?;
    if let Some(grads) = grads {
        let mut seeds = Vec::new();
        if let (Some(v), Some(d)) = (vars.shape, ds) {
            seeds.push((v, to_tensor(dims, d)));
        }
        if let (Some(v), Some(d)) = (vars.topo, dt) {
            seeds.push((v, to_tensor(dims, d)));
        }
        g.backward_many(seeds, Some(grads), false);
    }
    Ok(losses)
}

/// Deterministic shuffled train/validation split of `n` items.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains a codec on the masks of `manifest`.
pub fn train_prior(
    manifest: &Manifest,
    spec: &PriorNetSpec,
    cfg: &PriorTrainConfig,
) -> Result<(PriorCodec, PriorLog)> {
    train_prior_on(&load_prior_samples(manifest)?, spec, cfg)
}

/// Trains a codec; `samples` are split into training and validation parts
/// and the parameters with the lowest validation loss are returned.
pub fn train_prior_on(
    samples: &[PriorSample],
    spec: &PriorNetSpec,
    cfg: &PriorTrainConfig,
) -> Result<(PriorCodec, PriorLog)> {
    spec.validate()?;
    cfg.validate()?;
    let _ftz = FlushDenormals::enable();
    if samples.len() < 2 {
        return Err(invalid!(
            "prior training needs >= 2 samples, got {}",
            samples.len()
        ));
    }
    for (i, s) in samples.iter().enumerate() {
        spec.check_dims(s.input.shape())
            .map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })?;
    }
    let mut codec = PriorCodec::<f32>::new(spec.clone(), cfg.seed + WEIGHTS_OFFSET)?;
    let (train_ids, val_ids) =
        split_indices(samples.len(), cfg.val_fraction, cfg.seed + SHUFFLE_OFFSET);
    let mut adam = Adam::new(cfg.adam, codec.params());
    let mut order = train_ids.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed + SHUFFLE_OFFSET);
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    let mut log = PriorLog {
        train_ids: train_ids.clone(),
        val_ids: val_ids.clone(),
        ..PriorLog::default()
    };
    let mut aug_counter = 0u64;
    for epoch in 1..=cfg.epochs {
        if let Some(min) = cfg.lr_min {
            adam.set_lr(cosine_lr(cfg.adam.lr, min, epoch - 1, cfg.epochs));
        }
        order.shuffle(&mut shuffle_rng);
        let (mut sum_s, mut sum_t, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(codec.params());
            for &i in batch {
                let augmented;
                let sample = match &cfg.augment {
                    Some(a) => {
                        let seed = (cfg.seed + AUGMENT_OFFSET)
                            .wrapping_mul(1_000_003)
                            .wrapping_add(aug_counter);
                        aug_counter += 1;
                        let m = augment_mask(&samples[i].input, a, seed)?;
                        augmented = if m.is_empty() {
                            samples[i].clone()
                        } else {
                            PriorSample::from_mask(&m)?
                        };
                        &augmented
                    }
                    None => &samples[i],
                };
                let l = sample_step(&codec, sample, cfg, Some(&mut grads))?;
                sum_s += l.shape.unwrap_or(0.0);
                sum_t += l.topo.unwrap_or(0.0);
                sum_total += l.total(cfg.alpha_s, cfg.alpha_t);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "prior gradient".into(),
                });
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.step(codec.params_mut(), &grads);
        }
        let n = order.len() as f64;
        let train_loss = sum_total / n;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                what: "prior loss".into(),
            });
        }
        let val_loss = if val_ids.is_empty() {
            None
        } else {
            let mut v = 0.0;
            for &i in &val_ids {
                v += sample_step(&codec, &samples[i], cfg, None)?.total(cfg.alpha_s, cfg.alpha_t);
            }
            Some(v / val_ids.len() as f64)
        };
        let select = val_loss.unwrap_or(train_loss);
        if !select.is_finite() {
            return Err(Error::Diverged {
                epoch,
                what: "prior validation loss".into(),
            });
        }
        if best.as_ref().is_none_or(|(b, _)| select < *b) {
            best = Some((select, codec.params().clone()));
            log.best_epoch = epoch;
        }
        let entry = PriorEpoch {
            epoch,
            shape_loss: spec.has(Head::Shape).then_some(sum_s / n),
            topo_loss: spec.has(Head::Topo).then_some(sum_t / n),
            train_loss,
            val_loss,
        };
        info!("prior epoch {epoch}: train {train_loss:.5} val {val_loss:?}");
        log.epochs.push(entry);
    }
    let (_, params) = best.expect("at least one epoch");
    codec.params_mut().assign_from(&params)?;
    Ok((codec, log))
}

/// Held-out quality of a codec.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecEval {
    /// Mean DSC of the thresholded shape reconstruction.
    pub shape_dsc: Option<f64>,
    /// Mean Pearson correlation between topology output and target on
    /// foreground voxels.
    pub topo_pearson: Option<f64>,
    pub cases: usize,
}

/// Sample Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn evaluate_codec(codec: &PriorCodec, samples: &[PriorSample]) -> Result<CodecEval> {
    if samples.is_empty() {
        return Err(invalid!("no samples to evaluate"));
    }
    let (mut dsum, mut rsum) = (0.0, 0.0);
    for s in samples {
        let z = codec.encode(&s.input.as_soft())?;
        if codec.spec().has(Head::Shape) {
            let rec: SoftMask = codec.decode_shape(&z)?;
            let bin: BinaryMask = binarize(&rec, 0.5)?;
            dsum += dsc(&bin, &s.shape_target)?;
        }
        if codec.spec().has(Head::Topo) {
            let out = codec.decode_topo(&z)?;
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for i in 0..out.values().len() {
                if s.shape_target.is_fg(i) {
                    p.push(out.values()[i] as f64);
                    t.push(s.topo_target.values()[i] as f64);
                }
            }
            rsum += pearson(&p, &t);
        }
    }
    let n = samples.len() as f64;
    if codec.spec().has(Head::Topo) && rsum == 0.0 {
        warn!("topology head output is constant on foreground");
    }
    Ok(CodecEval {
        shape_dsc: codec.spec().has(Head::Shape).then_some(dsum / n),
        topo_pearson: codec.spec().has(Head::Topo).then_some(rsum / n),
        cases: samples.len(),
    })
}
