//! Segmentation loss, latent-space regularizers and the per-variant total.

use std::fmt;
use std::str::FromStr;

use jmpe_nn::{Graph, Real, Tensor};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::prior::{voxel_weights, Head, LossWeights, PriorCodec};
use crate::volume::{BinaryMask, SoftMask};

pub const DICE_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;
pub const PROB_CLAMP: f64 = 1e-7;

/// The five compared configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "shape")]
    Shape,
    #[serde(rename = "topo")]
    Topo,
    #[serde(rename = "shape+topo")]
    ShapeTopo,
    #[serde(rename = "jmpe")]
    Jmpe,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Baseline,
        VariantKind::Shape,
        VariantKind::Topo,
        VariantKind::ShapeTopo,
        VariantKind::Jmpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::Shape => "shape",
            VariantKind::Topo => "topo",
            VariantKind::ShapeTopo => "shape+topo",
            VariantKind::Jmpe => "jmpe",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            VariantKind::Baseline => "ResUNet",
            VariantKind::Shape => "ResUNet+shape",
            VariantKind::Topo => "ResUNet+topo",
            VariantKind::ShapeTopo => "ResUNet+shape+topo",
            VariantKind::Jmpe => "ResUNet+JMPE",
        }
    }

    /// Head sets of the codecs this variant needs, one entry per codec.
    pub fn codec_heads(self) -> Vec<Vec<Head>> {
        match self {
            VariantKind::Baseline => vec![],
            VariantKind::Shape => vec![vec![Head::Shape]],
            VariantKind::Topo => vec![vec![Head::Topo]],
            VariantKind::ShapeTopo => vec![vec![Head::Shape], vec![Head::Topo]],
            VariantKind::Jmpe => vec![vec![Head::Shape, Head::Topo]],
        }
    }

    /// Default regularization weights for this variant.
    pub fn default_weights(self) -> LossWeights {
        match self {
            VariantKind::Shape | VariantKind::Topo => LossWeights::single_prior(),
            _ => LossWeights::default(),
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown variant {s:?}; expected one of baseline, shape, topo, shape+topo, jmpe"))
    }
}

/// Which λ scales a regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Shape,
    Topo,
    Jmpe,
}

#[derive(Clone, Debug)]
pub struct Regularizer<S> {
    pub role: Role,
    pub codec: PriorCodec<S>,
}

/// A variant with its frozen codecs and weights.
#[derive(Clone, Debug)]
pub struct VariantSpec<S = f32> {
    pub kind: VariantKind,
    pub weights: LossWeights,
    regs: Vec<Regularizer<S>>,
}

impl<S: Real> VariantSpec<S> {
    pub fn new(
        kind: VariantKind,
        codecs: Vec<PriorCodec<S>>,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let mut want = kind.codec_heads();
        if codecs.len() != want.len() {
            return Err(invalid!(
                "variant {kind} needs {} codec(s), got {}",
                want.len(),
                codecs.len()
            ));
        }
        let mut regs = Vec::new();
        for codec in codecs {
            let mut heads = codec.spec().heads.clone();
            heads.sort();
            let Some(pos) = want.iter().position(|w| *w == heads) else {
                return Err(invalid!(
                    "variant {kind} cannot use a codec with heads {heads:?}"
                ));
            };
            want.remove(pos);
            let role = match heads.as_slice() {
                [Head::Shape] => Role::Shape,
                [Head::Topo] => Role::Topo,
                _ => Role::Jmpe,
            };
            regs.push(Regularizer { role, codec });
        }
        regs.sort_by_key(|r| r.role as u8);
        Ok(Self {
            kind,
            weights,
            regs,
        })
    }

    pub fn baseline(weights: LossWeights) -> Self {
        Self {
            kind: VariantKind::Baseline,
            weights,
            regs: Vec::new(),
        }
    }

    pub fn regularizers(&self) -> &[Regularizer<S>] {
        &self.regs
    }

    pub fn lambda(&self, role: Role) -> f64 {
        match role {
            Role::Shape => self.weights.lambda_s,
            Role::Topo => self.weights.lambda_t,
            Role::Jmpe => self.weights.lambda,
        }
    }

    pub fn codec_checksums(&self) -> Vec<String> {
        self.regs.iter().map(|r| r.codec.checksum()).collect()
    }

    pub fn cast<T: Real>(&self) -> VariantSpec<T> {
        VariantSpec {
            kind: self.kind,
            weights: self.weights,
            regs: self
                .regs
                .iter()
                .map(|r| Regularizer {
                    role: r.role,
                    codec: r.codec.cast(),
                })
                .collect(),
        }
    }
}

fn target_values(y: &BinaryMask, n: usize) -> Result<Vec<f64>> {
    if y.grid().len() != n {
        return Err(invalid!(
            "prediction has {n} voxels, target {}",
            y.grid().len()
        ));
    }
    Ok(y.grid().values().iter().map(|&v| v as f64).collect())
}

/// Class-weighted binary cross-entropy and its gradient.
pub(crate) fn wbce_grad(yhat: &[f64], y: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    let t = target_values(y, yhat.len())?;
    let w = voxel_weights(y)?;
    let inv_n = 1.0 / yhat.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; yhat.len()];
    for i in 0..yhat.len() {
        let p = yhat[i].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let wi = w.values()[i];
        loss -= wi * (t[i] * p.ln() + (1.0 - t[i]) * (1.0 - p).ln());
        if yhat[i] > PROB_CLAMP && yhat[i] < 1.0 - PROB_CLAMP {
            grad[i] = wi * (-t[i] / p + (1.0 - t[i]) / (1.0 - p)) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

pub fn wbce(yhat: &[f64], y: &BinaryMask) -> Result<f64> {
    Ok(wbce_grad(yhat, y)?.0)
}

pub(crate) fn dice_grad(yhat: &[f64], y: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    let t = target_values(y, yhat.len())?;
    let inter: f64 = yhat.iter().zip(&t).map(|(a, b)| a * b).sum();
    let den = yhat.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    let grad = t
        .iter()
        .map(|&ti| -(2.0 * ti * den - num) / (den * den))
        .collect();
    Ok((1.0 - num / den, grad))
}

/// `1 − (2Σŷy + ε)/(Σŷ + Σy + ε)`.
pub fn dice_loss(yhat: &[f64], y: &BinaryMask) -> Result<f64> {
    Ok(dice_grad(yhat, y)?.0)
}

/// `wBCE + Dice` and its gradient with respect to `ŷ`.
pub fn seg_loss_grad(yhat: &[f64], y: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    let (a, mut ga) = wbce_grad(yhat, y)?;
    let (b, gb) = dice_grad(yhat, y)?;
    ga.iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
    Ok((a + b, ga))
}

pub fn seg_loss(yhat: &SoftMask, y: &BinaryMask) -> Result<f64> {
    yhat.grid().check_geometry(y.grid(), "seg_loss")?;
    let p: Vec<f64> = yhat.values().iter().map(|&v| v as f64).collect();
    Ok(seg_loss_grad(&p, y)?.0)
}

fn to_tensor<S: Real>(dims: [usize; 3], v: &[f64]) -> Tensor<S> {
    Tensor::from_vec(dims, 1, v.iter().map(|&x| S::from_f64_lossy(x)).collect())
}

fn projected<S: Real>(codec: &PriorCodec<S>, dims: [usize; 3], v: &[f64]) -> Result<Tensor<f64>> {
    codec.project_code(&codec.encode_tensor(to_tensor(dims, v))?)
}

struct Cosine {
    value: f64,
    /// d value / d v
    grad_v: Vec<f64>,
}

fn cosine_distance(u: &[f64], v: &[f64]) -> Cosine {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        warn!("zero-norm projected code in the cosine regularizer");
    }
    let den = nu * nv + COSINE_EPS;
    let grad_v = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| {
            let norm_term = if nv > 0.0 {
                dot * nu * (b / nv) / (den * den)
            } else {
                0.0
            };
            -(a / den - norm_term)
        })
        .collect();
    Cosine {
        value: 1.0 - dot / den,
        grad_v,
    }
}

/// Cosine distance between the projected codes of `y` and `ŷ`.
pub fn reg_term<S: Real>(codec: &PriorCodec<S>, y: &BinaryMask, yhat: &SoftMask) -> Result<f64> {
    yhat.grid().check_geometry(y.grid(), "reg_term")?;
    let dims = y.shape();
    let u = projected(codec, dims, &target_values(y, y.grid().len())?)?;
    let p: Vec<f64> = yhat.values().iter().map(|&v| v as f64).collect();
    let v = projected(codec, dims, &p)?;
    Ok(cosine_distance(&u.data, &v.data).value)
}

/// Regularizer value and gradient with respect to `ŷ`, back-propagated
/// through the frozen encoder and projection.
pub fn reg_term_grad<S: Real>(
    codec: &PriorCodec<S>,
    y: &BinaryMask,
    yhat: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let dims = y.shape();
    let u = projected(codec, dims, &target_values(y, yhat.len())?)?;
    codec.spec().check_dims(dims)?;
    let mut g = Graph::new(codec.params());
    let (input, z) = codec.forward_encoder(&mut g, to_tensor(dims, yhat));
    let v = codec.project_code(g.value(z))?;
    let c = cosine_distance(&u.data, &v.data);
    let dv = Tensor::from_vec(v.dims, v.channels, c.grad_v);
    let dz = codec.project_code_adjoint(&dv);
    let mut grads = g.backward(z, dz, None, true);
    let dx = grads.take(input).expect("input gradient requested");
    Ok((c.value, dx.data.iter().map(|v| v.as_f64()).collect()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_phi: f64,
    pub l_reg_s: Option<f64>,
    pub l_reg_t: Option<f64>,
    pub l_reg_jmpe: Option<f64>,
    pub l_t: f64,
}

impl LossBreakdown {
    fn set(&mut self, role: Role, v: f64) {
        match role {
            Role::Shape => self.l_reg_s = Some(v),
            Role::Topo => self.l_reg_t = Some(v),
            Role::Jmpe => self.l_reg_jmpe = Some(v),
        }
    }
}

fn evaluate<S: Real>(
    variant: &VariantSpec<S>,
    y: &BinaryMask,
    yhat: &[f64],
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (l_phi, mut grad) = seg_loss_grad(yhat, y)?;
    let mut out = LossBreakdown {
        l_phi,
        l_t: l_phi,
        ..LossBreakdown::default()
    };
    for r in variant.regularizers() {
        let lambda = variant.lambda(r.role);
        let value = if want_grad && lambda != 0.0 {
            let (v, g) = reg_term_grad(&r.codec, y, yhat)?;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += lambda * b);
            v
        } else {
            let dims = y.shape();
            let u = projected(&r.codec, dims, &target_values(y, yhat.len())?)?;
            let v = projected(&r.codec, dims, yhat)?;
            cosine_distance(&u.data, &v.data).value
        };
        out.set(r.role, value);
        out.l_t += lambda * value;
    }
    Ok((out, grad))
}

/// Total loss of `variant`; regularizer values are reported even when their
/// λ is zero.
pub fn total_loss<S: Real>(
    variant: &VariantSpec<S>,
    y: &BinaryMask,
    yhat: &SoftMask,
) -> Result<LossBreakdown> {
    yhat.grid().check_geometry(y.grid(), "total_loss")?;
    let p: Vec<f64> = yhat.values().iter().map(|&v| v as f64).collect();
    Ok(evaluate(variant, y, &p, false)?.0)
}

/// Total loss and its gradient with respect to `ŷ`.
pub fn total_loss_grad<S: Real>(
    variant: &VariantSpec<S>,
    y: &BinaryMask,
    yhat: &[f64],
) -> Result<(LossBreakdown, Vec<f64>)> {
    evaluate(variant, y, yhat, true)
}

/// Total loss and its gradient with respect to the pre-sigmoid logits.
pub fn total_loss_grad_logits<S: Real>(
    variant: &VariantSpec<S>,
    y: &BinaryMask,
    logits: &[f64],
) -> Result<(LossBreakdown, Vec<f64>)> {
    let p: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
    let (l, mut g) = evaluate(variant, y, &p, true)?;
    g.iter_mut().zip(&p).for_each(|(d, &s)| *d *= s * (1.0 - s));
    Ok((l, g))
}
