//! Overlap, centreline and surface-distance metrics for binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::topo::{skeletonize, squared_edt_from, FACE_OFFSETS};
use crate::volume::{binarize, BinaryMask, SoftMask};

fn check(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    pred.grid().check_geometry(gt.grid(), "metric inputs")
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut p, mut g) = (0, 0);
    for i in 0..pred.grid().len() {
        let (a, b) = (pred.is_fg(i), gt.is_fg(i));
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    (inter, p, g)
}

/// Dice similarity `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// Jaccard index `|P∩G| / |P∪G|`; 1 when both are empty.
pub fn jacc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let (i, p, g) = counts(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

/// Centreline Dice: harmonic mean of topology precision `|S(P)∩G|/|S(P)|`
/// and sensitivity `|S(G)∩P|/|S(G)|`, with skeletons from [`skeletonize`].
pub fn cldsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let sp = skeletonize(pred);
    let sg = skeletonize(gt);
    Ok(cldsc_from_skeletons(pred, gt, &sp, &sg))
}

pub(crate) fn cldsc_from_skeletons(
    pred: &BinaryMask,
    gt: &BinaryMask,
    skel_pred: &BinaryMask,
    skel_gt: &BinaryMask,
) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let n = pred.grid().len();
    let (sp, sg) = (skel_pred.count(), skel_gt.count());
    if sp == 0 || sg == 0 {
        return 0.0;
    }
    let hit_p = (0..n)
        .filter(|&i| skel_pred.is_fg(i) && gt.is_fg(i))
        .count();
    let hit_g = (0..n)
        .filter(|&i| skel_gt.is_fg(i) && pred.is_fg(i))
        .count();
    let tprec = hit_p as f64 / sp as f64;
    let tsens = hit_g as f64 / sg as f64;
    if tprec + tsens == 0.0 {
        0.0
    } else {
        2.0 * tprec * tsens / (tprec + tsens)
    }
}

/// Foreground voxels with at least one face neighbour in the background
/// (outside the grid counts as background).
pub fn surface(mask: &BinaryMask) -> Vec<bool> {
    let shape = mask.shape();
    (0..mask.grid().len())
        .map(|i| {
            mask.is_fg(i) && {
                let p = mask.grid().coords(i);
                FACE_OFFSETS
                    .iter()
                    .any(|o| crate::topo::offset(p, *o, shape).is_none_or(|j| !mask.is_fg(j)))
            }
        })
        .collect()
}

/// Distances (mm) from each surface voxel of `a` to the surface of `b`.
fn directed_surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("surface distance undefined for an empty mask"));
    }
    let sa = surface(a);
    let sb = surface(b);
    let d2 = squared_edt_from(&sb, b.shape(), b.spacing());
    Ok(sa
        .iter()
        .zip(&d2)
        .filter(|(s, _)| **s)
        .map(|(_, d)| d.sqrt())
        .collect())
}

/// Surface distances in both directions.
pub struct SurfaceDistances {
    pub pred_to_gt: Vec<f64>,
    pub gt_to_pred: Vec<f64>,
}

impl SurfaceDistances {
    pub fn compute(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        check(pred, gt)?;
        Ok(Self {
            pred_to_gt: directed_surface_distances(pred, gt)?,
            gt_to_pred: directed_surface_distances(gt, pred)?,
        })
    }

    pub fn hausdorff(&self) -> f64 {
        self.pred_to_gt
            .iter()
            .chain(&self.gt_to_pred)
            .copied()
            .fold(0.0, f64::max)
    }

    /// Max of the two directed 95th percentiles (nearest-rank).
    pub fn hausdorff95(&self) -> f64 {
        let pct = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
            s[rank - 1]
        };
        pct(&self.pred_to_gt).max(pct(&self.gt_to_pred))
    }

    pub fn assd(&self) -> f64 {
        let n = self.pred_to_gt.len() + self.gt_to_pred.len();
        let sum: f64 = self.pred_to_gt.iter().chain(&self.gt_to_pred).sum();
        sum / n as f64
    }
}

/// Symmetric Hausdorff distance between the mask surfaces, mm.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(SurfaceDistances::compute(pred, gt)?.hausdorff())
}

/// 95th-percentile Hausdorff distance, mm.
pub fn hausdorff95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(SurfaceDistances::compute(pred, gt)?.hausdorff95())
}

/// Average symmetric surface distance, mm.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(SurfaceDistances::compute(pred, gt)?.assd())
}

/// Absolute volume difference in mm³ and relative to the ground truth volume.
pub fn avd(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    check(pred, gt)?;
    let (_, p, g) = counts(pred, gt);
    if g == 0 {
        return Err(invalid!(
            "relative volume difference undefined for an empty ground truth"
        ));
    }
    let vv = gt.grid().voxel_volume_mm3();
    let abs = (p as f64 - g as f64).abs() * vv;
    Ok((abs, abs / (g as f64 * vv)))
}

/// The seven reported quantities for one case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub jacc: f64,
    pub cldsc: f64,
    pub hd_mm: f64,
    pub assd_mm: f64,
    pub avd_mm3: f64,
    pub rvd: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dsc,jacc,cldsc,hd_mm,assd_mm,avd_mm3,rvd";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dsc, self.jacc, self.cldsc, self.hd_mm, self.assd_mm, self.avd_mm3, self.rvd
        )
    }

    pub fn fields(&self) -> [f64; 7] {
        [
            self.dsc,
            self.jacc,
            self.cldsc,
            self.hd_mm,
            self.assd_mm,
            self.avd_mm3,
            self.rvd,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }
}

/// Binarises `pred` at `threshold` and computes every metric against `gt`.
pub fn evaluate_all(pred: &SoftMask, gt: &BinaryMask, threshold: f32) -> Result<MetricsReport> {
    let p = binarize(pred, threshold)?;
    evaluate_binary(&p, gt)
}

pub fn evaluate_binary(p: &BinaryMask, gt: &BinaryMask) -> Result<MetricsReport> {
    check(p, gt).map_err(|e| match e {
        Error::Geometry(m) => Error::Geometry(format!("evaluate_all: {m}")),
        other => other,
    })?;
    let sd = SurfaceDistances::compute(p, gt)?;
    let (avd_mm3, rvd) = avd(p, gt)?;
    Ok(MetricsReport {
        dsc: dsc(p, gt)?,
        jacc: jacc(p, gt)?,
        cldsc: cldsc(p, gt)?,
        hd_mm: sd.hausdorff(),
        assd_mm: sd.assd(),
        avd_mm3,
        rvd,
    })
}
