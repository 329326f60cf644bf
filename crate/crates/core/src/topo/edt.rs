//! Exact Euclidean distance transform via separable lower envelopes of
//! parabolas, with per-axis spacing folded into each 1D pass.

use crate::error::{invalid, Result};
use crate::par;
use crate::volume::{BinaryMask, DistanceMap, VoxelGrid};

/// One 1D pass: `out[p] = min_q f[q] + (s·(p − q))²`. Infinite entries of
/// `f` never enter the envelope.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = s * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + s2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let fr = f[r] + s2 * (r * r) as f64;
                    let cut = (fq - fr) / (2.0 * s2 * (q - r) as f64);
                    if cut <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cut);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let r = v[k];
        let d = p as f64 - r as f64;
        *o = f[r] + s2 * d * d;
    }
}

/// Squared distances (mm²) to the nearest voxel where `seed` is set;
/// `+∞` everywhere if there is none.
pub fn squared_edt_from(seed: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nd, nh, nw] = shape;
    let mut g: Vec<f64> = seed
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();

    // width: contiguous rows
    par::for_each_chunk_mut(&mut g, nw, |_, row| {
        let src = row.to_vec();
        let (mut v, mut z) = (Vec::new(), Vec::new());
        envelope_1d(&src, spacing[2], row, &mut v, &mut z);
    });
    // height: independent within each depth slab
    par::for_each_chunk_mut(&mut g, nh * nw, |_, slab| {
        let mut line = vec![0.0; nh];
        let mut out = vec![0.0; nh];
        let (mut v, mut z) = (Vec::new(), Vec::new());
        for w in 0..nw {
            for h in 0..nh {
                line[h] = slab[h * nw + w];
            }
            envelope_1d(&line, spacing[1], &mut out, &mut v, &mut z);
            for h in 0..nh {
                slab[h * nw + w] = out[h];
            }
        }
    });
    // depth: lines strided across slabs
    let lines = par::map_indexed(nh * nw, |hw| {
        let line: Vec<f64> = (0..nd).map(|d| g[d * nh * nw + hw]).collect();
        let mut out = vec![0.0; nd];
        let (mut v, mut z) = (Vec::new(), Vec::new());
        envelope_1d(&line, spacing[0], &mut out, &mut v, &mut z);
        out
    });
    for (hw, line) in lines.into_iter().enumerate() {
        for (d, val) in line.into_iter().enumerate() {
            g[d * nh * nw + hw] = val;
        }
    }
    g
}

/// Distance in mm from every foreground voxel centre to the nearest
/// background voxel centre; zero on the background.
pub fn compute_edt(mask: &BinaryMask) -> Result<DistanceMap> {
    let fg = mask.to_bools();
    let shape = mask.shape();
    if fg.iter().all(|&b| b) {
        return Err(invalid!(
            "mask has no background voxels; the distance transform is undefined"
        ));
    }
    let bg: Vec<bool> = fg.iter().map(|&b| !b).collect();
    let sq = squared_edt_from(&bg, shape, mask.spacing());
    let values = sq.iter().map(|&d| d.sqrt() as f32).collect();
    DistanceMap::new(VoxelGrid::new(shape, mask.spacing(), values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All-pairs reference: min over background voxels of the scaled distance.
    pub(crate) fn brute_force(fg: &[bool], shape: [usize; 3], sp: [f64; 3]) -> Vec<f64> {
        let coords: Vec<[usize; 3]> = (0..fg.len())
            .map(|i| crate::volume::unravel(i, shape))
            .collect();
        let bg: Vec<[usize; 3]> = (0..fg.len())
            .filter(|&i| !fg[i])
            .map(|i| coords[i])
            .collect();
        (0..fg.len())
            .map(|i| {
                if !fg[i] {
                    return 0.0;
                }
                let p = coords[i];
                bg.iter()
                    .map(|q| {
                        (0..3)
                            .map(|a| ((p[a] as f64 - q[a] as f64) * sp[a]).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn all_background_is_zero() {
        let m = BinaryMask::empty([3, 4, 5], [1.0, 2.0, 0.5]).unwrap();
        assert!(compute_edt(&m).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_foreground_is_an_error() {
        let m = BinaryMask::from_bools([2, 2, 2], [1.0; 3], &[true; 8]).unwrap();
        assert!(compute_edt(&m).is_err());
    }

    #[test]
    fn short_line() {
        let m = BinaryMask::from_bools([1, 1, 4], [1.0; 3], &[false, true, true, false]).unwrap();
        assert_eq!(compute_edt(&m).unwrap().values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn anisotropic_spacing_picks_the_cheaper_axis() {
        // centre of a 3x3x3 block of foreground inside a 5^3 grid
        let shape = [5, 5, 5];
        let fg: Vec<bool> = (0..125)
            .map(|i| {
                let p = crate::volume::unravel(i, shape);
                p.iter().all(|&c| (1..=3).contains(&c))
            })
            .collect();
        let m = BinaryMask::from_bools(shape, [3.0, 0.5, 2.0], &fg).unwrap();
        let e = compute_edt(&m).unwrap();
        assert!((e.grid().get([2, 2, 2]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let shape = [
                rng.random_range(1..9),
                rng.random_range(1..9),
                rng.random_range(1..9),
            ];
            let sp = [
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ];
            let p = rng.random_range(0.3..0.95);
            let mut fg: Vec<bool> = (0..shape.iter().product())
                .map(|_| rng.random_bool(p))
                .collect();
            fg[0] = false;
            let m = BinaryMask::from_bools(shape, sp, &fg).unwrap();
            let got = compute_edt(&m).unwrap();
            let want = brute_force(&fg, shape, sp);
            for (a, b) in got.values().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn eroding_never_increases_distance(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [6, 6, 6];
            let fg: Vec<bool> = (0..216).map(|_| rng.random_bool(0.8)).collect();
            let mut eroded = fg.clone();
            for e in eroded.iter_mut() {
                if *e && rng.random_bool(0.2) {
                    *e = false;
                }
            }
            eroded[0] = false;
            let mut base = fg.clone();
            base[0] = false;
            let a = compute_edt(&BinaryMask::from_bools(shape, [1.0, 1.3, 0.7], &base).unwrap()).unwrap();
            let b = compute_edt(&BinaryMask::from_bools(shape, [1.0, 1.3, 0.7], &eroded).unwrap()).unwrap();
            for i in 0..216 {
                if eroded[i] {
                    proptest::prop_assert!(b.values()[i] <= a.values()[i]);
                }
            }
            let bound = 1.3 * ((3.0 * 36.0f64).sqrt());
            proptest::prop_assert!(a.values().iter().all(|&v| (v as f64) <= bound));
        }
    }
}
