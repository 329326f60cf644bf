//! Segmenter training with frozen prior regularizers.

use std::path::Path;

use jmpe_nn::{cosine_lr, Adam, AdamConfig, FlushDenormals, Gradients, Graph, ParamSet, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss_grad, VariantSpec};
use super::{standardize, SegModelSpec, SegNet};
use crate::error::{invalid, Error, Result};
use crate::harness::augment::{augment, AugmentSpec};
use crate::harness::config::{AUGMENT_OFFSET, SHUFFLE_OFFSET, WEIGHTS_OFFSET};
use crate::metrics::dsc;
use crate::phantom::Case;
use crate::volume::binarize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub model: SegModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub augment: Option<AugmentSpec>,
    /// When set, the learning rate is cosine-annealed from `adam.lr` to
    /// this value over the run.
    pub lr_min: Option<f64>,
    /// Threshold used for the validation DSC.
    pub threshold: f32,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            model: SegModelSpec::default(),
            epochs: 1500,
            batch_size: 2,
            adam: AdamConfig::with_lr(3e-4),
            seed: 0,
            augment: Some(AugmentSpec::default()),
            lr_min: None,
            threshold: 0.5,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch_size must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(invalid!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            ));
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

/// Per-epoch means over the training cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub l_phi: f64,
    pub l_reg_s: Option<f64>,
    pub l_reg_t: Option<f64>,
    pub l_reg_jmpe: Option<f64>,
    pub l_t: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegLog {
    pub epochs: Vec<SegEpoch>,
    pub best_epoch: usize,
    pub best_val_dsc: Option<f64>,
    pub codec_checksums_before: Vec<String>,
    pub codec_checksums_after: Vec<String>,
}

impl SegLog {
    /// `epoch,L_phi,L_reg_s,L_reg_t,L_reg_jmpe,L_t`; absent terms are empty.
    pub fn loss_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,L_phi,L_reg_s,L_reg_t,L_reg_jmpe,L_t\n");
        for e in &self.epochs {
            s += &format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.l_phi,
                f(e.l_reg_s),
                f(e.l_reg_t),
                f(e.l_reg_jmpe),
                e.l_t
            );
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = String::from("epoch,val_dsc\n");
        for e in &self.epochs {
            s += &format!(
                "{},{}\n",
                e.epoch,
                e.val_dsc.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        s
    }
}

/// Mean DSC of thresholded predictions over `cases`.
pub fn evaluate_segmenter(net: &SegNet, cases: &[&Case], threshold: f32) -> Result<f64> {
    let mut sum = 0.0;
    for c in cases {
        let p = binarize(&net.segment(&c.image)?, threshold)?;
        sum += dsc(&p, &c.mask)?;
    }
    Ok(sum / cases.len() as f64)
}

#[derive(Default)]
struct Sums {
    phi: f64,
    reg: [Option<f64>; 3],
    total: f64,
}

impl Sums {
    fn add(&mut self, l: &super::LossBreakdown) {
        self.phi += l.l_phi;
        self.total += l.l_t;
        for (slot, v) in self
            .reg
            .iter_mut()
            .zip([l.l_reg_s, l.l_reg_t, l.l_reg_jmpe])
        {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
    }
}

/// Trains a segmenter on `train`, selecting the epoch with the best mean DSC
/// on `val` (or the last epoch when `val` is empty).
pub fn train_segmenter(
    variant: &VariantSpec,
    train: &[&Case],
    val: &[&Case],
    cfg: &SegTrainConfig,
) -> Result<(SegNet, SegLog)> {
    cfg.validate()?;
    let _ftz = FlushDenormals::enable();
    if train.is_empty() {
        return Err(invalid!("segmenter training needs >= 1 case"));
    }
    for (i, c) in train.iter().chain(val).enumerate() {
        cfg.model
            .check_dims(c.image.shape())
            .map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })?;
        for r in variant.regularizers() {
            r.codec.spec().check_dims(c.image.shape())?;
        }
    }
    let mut log = SegLog {
        codec_checksums_before: variant.codec_checksums(),
        ..SegLog::default()
    };
    let mut net = SegNet::<f32>::new(cfg.model.clone(), cfg.seed + WEIGHTS_OFFSET)?;
    let mut adam = Adam::new(cfg.adam, net.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed + SHUFFLE_OFFSET);
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    let mut aug_counter = 0u64;
    for epoch in 1..=cfg.epochs {
        if let Some(min) = cfg.lr_min {
            adam.set_lr(cosine_lr(cfg.adam.lr, min, epoch - 1, cfg.epochs));
        }
        order.shuffle(&mut shuffle_rng);
        let mut sums = Sums::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(net.params());
            for &i in batch {
                let case = train[i];
                let (image, mask) = match &cfg.augment {
                    Some(a) => {
                        let seed = (cfg.seed + AUGMENT_OFFSET)
                            .wrapping_mul(1_000_003)
                            .wrapping_add(aug_counter);
                        aug_counter += 1;
                        let (img, m) = augment(&case.image, &case.mask, a, seed)?;
                        if m.is_empty() || m.count() == m.grid().len() {
                            (case.image.clone(), case.mask.clone())
                        } else {
                            (img, m)
                        }
                    }
                    None => (case.image.clone(), case.mask.clone()),
                };
                let dims = image.shape();
                let x = Tensor::from_f32(dims, &standardize(image.values()));
                let mut g = Graph::new(net.params());
                let vars = net.forward(&mut g, x);
                let yhat: Vec<f64> = g.value(vars.prob).data.iter().map(|&v| v as f64).collect();
                let (l, d) = total_loss_grad(variant, &mask, &yhat)?;
                sums.add(&l);
                let d = Tensor::from_vec(dims, 1, d.into_iter().map(|v| v as f32).collect());
                g.backward(vars.prob, d, Some(&mut grads), false);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "segmenter gradient".into(),
                });
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.step(net.params_mut(), &grads);
        }
        let n = train.len() as f64;
        let entry = SegEpoch {
            epoch,
            l_phi: sums.phi / n,
            l_reg_s: sums.reg[0].map(|v| v / n),
            l_reg_t: sums.reg[1].map(|v| v / n),
            l_reg_jmpe: sums.reg[2].map(|v| v / n),
            l_t: sums.total / n,
            val_dsc: if val.is_empty() {
                None
            } else {
                Some(evaluate_segmenter(&net, val, cfg.threshold)?)
            },
        };
        if !entry.l_t.is_finite() {
            return Err(Error::Diverged {
                epoch,
                what: "total loss".into(),
            });
        }
        let score = entry.val_dsc.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, net.params().clone()));
            log.best_epoch = epoch;
            log.best_val_dsc = entry.val_dsc;
        }
        info!(
            "seg[{}] epoch {epoch}: L_t {:.5} val dsc {:?}",
            variant.kind, entry.l_t, entry.val_dsc
        );
        log.epochs.push(entry);
    }
    let (_, params) = best.expect("at least one epoch");
    net.params_mut().assign_from(&params)?;
    log.codec_checksums_after = variant.codec_checksums();
    if log.codec_checksums_after != log.codec_checksums_before {
        return Err(invalid!(
            "a frozen prior codec changed during segmenter training"
        ));
    }
    Ok((net, log))
}

/// Writes checkpoint, logs and a config echo into `dir`.
pub fn write_run(dir: &Path, net: &SegNet, log: &SegLog, config_echo: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    net.save(&dir.join("checkpoint"))?;
    let files = [
        ("loss_log.csv", log.loss_csv()),
        ("val_log.csv", log.val_csv()),
        ("train_log.json", serde_json::to_string_pretty(log)?),
        ("config.toml", config_echo.to_string()),
    ];
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(Error::io(&p))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_tree, TreeSpec};
    use crate::prior::{Head, LossWeights, PriorCodec, PriorNetSpec};
    use crate::seg::VariantKind;

    fn cases(n: usize) -> Vec<Case> {
        (0..n)
            .map(|i| {
                let t = TreeSpec {
                    seed: 50 + i as u64,
                    grid_shape: [16; 3],
                    depth: 2,
                    root_radius_vox: 1.8,
                    segment_length_range: [4.0, 6.0],
                    ..TreeSpec::default()
                };
                let s = generate_tree(&t).unwrap();
                Case {
                    id: format!("c{i}"),
                    image: s.image,
                    mask: s.mask,
                }
            })
            .collect()
    }

    fn cfg(epochs: usize) -> SegTrainConfig {
        SegTrainConfig {
            model: SegModelSpec {
                levels: 2,
                base_features: 2,
                max_features: 4,
                residual_blocks_per_level: 1,
            },
            epochs,
            adam: AdamConfig::with_lr(3e-3),
            ..SegTrainConfig::default()
        }
    }

    fn jmpe_codec() -> PriorCodec {
        PriorCodec::new(
            PriorNetSpec {
                levels: 2,
                base_features: 2,
                max_features: 4,
                latent_feature_maps: 4,
                projection_out_maps: 2,
                heads: vec![Head::Shape, Head::Topo],
                ..PriorNetSpec::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn baseline_smoke_writes_run() {
        let cs = cases(4);
        let refs: Vec<&Case> = cs.iter().collect();
        let v = VariantSpec::baseline(LossWeights::default());
        let (net, log) = train_segmenter(&v, &refs[..3], &refs[3..], &cfg(2)).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert!(log
            .epochs
            .iter()
            .all(|e| e.l_t.is_finite() && e.l_reg_s.is_none()));
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &net, &log, "echo").unwrap();
        assert!(dir.path().join("checkpoint/model.bin").exists());
        let csv = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
        assert!(csv.starts_with("epoch,L_phi,L_reg_s,L_reg_t,L_reg_jmpe,L_t\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn jmpe_keeps_codec_frozen_and_zero_lambda_matches_baseline() {
        let cs = cases(3);
        let refs: Vec<&Case> = cs.iter().collect();
        let codec = jmpe_codec();
        let before = codec.checksum();
        let v = VariantSpec::new(VariantKind::Jmpe, vec![codec], LossWeights::default()).unwrap();
        let (_, log) = train_segmenter(&v, &refs[..2], &refs[2..], &cfg(2)).unwrap();
        assert_eq!(log.codec_checksums_after, vec![before]);
        assert!(log.epochs[0].l_reg_jmpe.is_some());

        let zero = VariantSpec::new(
            VariantKind::Jmpe,
            vec![jmpe_codec()],
            LossWeights::default().zero_lambdas(),
        )
        .unwrap();
        let base = VariantSpec::baseline(LossWeights::default());
        let (n1, l1) = train_segmenter(&zero, &refs[..2], &refs[2..], &cfg(2)).unwrap();
        let (n2, l2) = train_segmenter(&base, &refs[..2], &refs[2..], &cfg(2)).unwrap();
        assert_eq!(n1.params().checksum(), n2.params().checksum());
        for (a, b) in l1.epochs.iter().zip(&l2.epochs) {
            assert_eq!((a.l_phi, a.val_dsc), (b.l_phi, b.val_dsc));
        }
    }
}
