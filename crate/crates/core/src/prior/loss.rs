//! Class-balanced smooth-L1 reconstruction losses for the prior networks.

use super::PriorSample;
use crate::error::{invalid, Result};
use crate::volume::BinaryMask;

/// Per-voxel class-balancing weights: `N/N_pos` on foreground, `N/N_neg` on
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelWeights {
    positive: Vec<bool>,
    n_pos: usize,
    n_neg: usize,
    values: Vec<f64>,
}

impl VoxelWeights {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg
    }

    pub fn w_pos(&self) -> f64 {
        self.values.len() as f64 / self.n_pos as f64
    }

    pub fn w_neg(&self) -> f64 {
        self.values.len() as f64 / self.n_neg as f64
    }

    /// Weight of voxel `i` as an exact fraction `(numerator, denominator)`.
    pub fn ratio(&self, i: usize) -> (u64, u64) {
        let n = self.values.len() as u64;
        if self.positive[i] {
            (n, self.n_pos as u64)
        } else {
            (n, self.n_neg as u64)
        }
    }
}

pub fn voxel_weights(mask: &BinaryMask) -> Result<VoxelWeights> {
    let positive = mask.to_bools();
    let n = positive.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid!(
            "class weights need both classes, got {n_pos} foreground and {n_neg} background voxels"
        ));
    }
    let (wp, wn) = (n as f64 / n_pos as f64, n as f64 / n_neg as f64);
    let values = positive.iter().map(|&p| if p { wp } else { wn }).collect();
    Ok(VoxelWeights {
        positive,
        n_pos,
        n_neg,
        values,
    })
}

/// Smooth-L1 with transition point 1.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn check_lens(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != weights.len() || pred.is_empty() {
        return Err(invalid!(
            "loss inputs differ in size: pred {}, target {}, weights {}",
            pred.len(),
            target.len(),
            weights.len()
        ));
    }
    Ok(())
}

/// `(1/N) Σ w · smoothL1(pred − target)`.
pub fn weighted_smooth_l1(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<f64> {
    check_lens(pred, target, weights)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| w * smooth_l1(p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Loss value and its gradient with respect to `pred`.
pub fn weighted_smooth_l1_grad(
    pred: &[f64],
    target: &[f64],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let loss = weighted_smooth_l1(pred, target, weights)?;
    let inv_n = 1.0 / pred.len() as f64;
    let grad = pred
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| w * (p - t).clamp(-1.0, 1.0) * inv_n)
        .collect();
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadLosses {
    pub shape: Option<f64>,
    pub topo: Option<f64>,
}

impl HeadLosses {
    pub fn total(&self, alpha_s: f64, alpha_t: f64) -> f64 {
        alpha_s * self.shape.unwrap_or(0.0) + alpha_t * self.topo.unwrap_or(0.0)
    }
}

/// Joint reconstruction loss `α_s·ℓ(ỹ, y) + α_t·ℓ(T̃, T)`, both terms weighted
/// from the binary mask.
pub fn jmpe_loss(
    shape_out: &[f64],
    topo_out: &[f64],
    sample: &PriorSample,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<f64> {
    let w = voxel_weights(&sample.shape_target)?;
    let y: Vec<f64> = sample
        .shape_target
        .grid()
        .values()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let t: Vec<f64> = sample
        .topo_target
        .values()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let ls = weighted_smooth_l1(shape_out, &y, w.values())?;
    let lt = weighted_smooth_l1(topo_out, &t, w.values())?;
    Ok(alpha_s * ls + alpha_t * lt)
}

/// Loss and head-output gradients for whichever heads are given. `topo_weights`
/// overrides the mask-derived weights of the topology head.
pub fn jmpe_loss_grad(
    shape_out: Option<&[f64]>,
    topo_out: Option<&[f64]>,
    sample: &PriorSample,
    alpha_s: f64,
    alpha_t: f64,
    topo_weights: Option<&[f64]>,
) -> Result<(HeadLosses, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let w = voxel_weights(&sample.shape_target)?;
    let mut losses = HeadLosses::default();
    let d_shape = match shape_out {
        Some(p) => {
            let y: Vec<f64> = sample
                .shape_target
                .grid()
                .values()
                .iter()
                .map(|&v| v as f64)
                .collect();
            let (l, mut g) = weighted_smooth_l1_grad(p, &y, w.values())?;
            g.iter_mut().for_each(|v| *v *= alpha_s);
            losses.shape = Some(l);
            Some(g)
        }
        None => None,
    };
    let d_topo = match topo_out {
        Some(p) => {
            let t: Vec<f64> = sample
                .topo_target
                .values()
                .iter()
                .map(|&v| v as f64)
                .collect();
            let (l, mut g) = weighted_smooth_l1_grad(p, &t, topo_weights.unwrap_or(w.values()))?;
            g.iter_mut().for_each(|v| *v *= alpha_t);
            losses.topo = Some(l);
            Some(g)
        }
        None => None,
    };
    Ok((losses, d_shape, d_topo))
}
