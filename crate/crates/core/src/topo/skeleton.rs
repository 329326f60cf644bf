//! Topology-preserving directional thinning (26-connected foreground,
//! 6-connected background).
//!
//! Each iteration sweeps the six face directions. Border voxels in the
//! current direction that are simple and not curve end points are collected,
//! then deleted one at a time with the simple-point test re-evaluated against
//! the current state, which keeps the deletion sequence topology preserving.

use std::sync::OnceLock;

use super::{offset, FACE_OFFSETS};
use crate::par;
use crate::volume::BinaryMask;

const CENTER: usize = 13;

#[inline]
fn pos(i: usize) -> [isize; 3] {
    [
        (i / 9) as isize - 1,
        ((i / 3) % 3) as isize - 1,
        (i % 3) as isize - 1,
    ]
}

struct Tables {
    adj26: Vec<Vec<usize>>,
    adj6_n18: Vec<Vec<usize>>,
    in_n18: [bool; 27],
    is_face: [bool; 27],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut in_n18 = [false; 27];
        let mut is_face = [false; 27];
        for i in 0..27 {
            let l1: isize = pos(i).iter().map(|c| c.abs()).sum();
            in_n18[i] = i != CENTER && l1 <= 2;
            is_face[i] = l1 == 1;
        }
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        for i in 0..27 {
            for j in 0..27 {
                if i == j || i == CENTER || j == CENTER {
                    continue;
                }
                let (a, b) = (pos(i), pos(j));
                let cheb = (0..3).map(|k| (a[k] - b[k]).abs()).max().unwrap();
                let l1: isize = (0..3).map(|k| (a[k] - b[k]).abs()).sum();
                if cheb == 1 {
                    adj26[i].push(j);
                }
                if l1 == 1 && in_n18[i] && in_n18[j] {
                    adj6_n18[i].push(j);
                }
            }
        }
        Tables {
            adj26,
            adj6_n18,
            in_n18,
            is_face,
        }
    })
}

/// Simple-point test on a 3×3×3 neighbourhood (index `9a + 3b + c`,
/// centre 13). A voxel is simple iff its deletion changes neither the
/// 26-connected foreground nor the 6-connected background topology.
pub fn is_simple(nb: &[bool; 27]) -> bool {
    let t = tables();
    // foreground: exactly one 26-component in N26*
    let mut seen = [false; 27];
    let mut fg_components = 0;
    let mut stack = Vec::with_capacity(27);
    for s in 0..27 {
        if s == CENTER || !nb[s] || seen[s] {
            continue;
        }
        fg_components += 1;
        if fg_components > 1 {
            return false;
        }
        seen[s] = true;
        stack.push(s);
        while let Some(i) = stack.pop() {
            for &j in &t.adj26[i] {
                if nb[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    if fg_components != 1 {
        return false;
    }
    // background: exactly one 6-component of N18 ∖ X that touches a face neighbour
    let mut seen = [false; 27];
    let mut bg_components = 0;
    for s in 0..27 {
        if !t.is_face[s] || nb[s] || seen[s] {
            continue;
        }
        bg_components += 1;
        if bg_components > 1 {
            return false;
        }
        seen[s] = true;
        stack.push(s);
        while let Some(i) = stack.pop() {
            for &j in &t.adj6_n18[i] {
                if t.in_n18[j] && !nb[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    bg_components == 1
}

fn neighborhood(fg: &[bool], p: [usize; 3], shape: [usize; 3]) -> [bool; 27] {
    let mut nb = [false; 27];
    for (i, v) in nb.iter_mut().enumerate() {
        *v = offset(p, pos(i), shape).is_some_and(|j| fg[j]);
    }
    nb
}

fn count_neighbors(nb: &[bool; 27]) -> usize {
    nb.iter()
        .enumerate()
        .filter(|&(i, &b)| i != CENTER && b)
        .count()
}

/// Thins the foreground to a one-voxel-wide curve skeleton with the same
/// 26-connected component structure.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let shape = mask.shape();
    let mut fg = mask.to_bools();
    let mut live: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
    loop {
        let mut changed = false;
        for dir in FACE_OFFSETS {
            let snapshot = &fg;
            let flags = par::map_slice(&live, |&i| {
                let p = crate::volume::unravel(i, shape);
                if offset(p, dir, shape).is_some_and(|j| snapshot[j]) {
                    return false;
                }
                let nb = neighborhood(snapshot, p, shape);
                count_neighbors(&nb) > 1 && is_simple(&nb)
            });
            let candidates: Vec<usize> = live
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| f)
                .map(|(&i, _)| i)
                .collect();
            for i in candidates {
                let p = crate::volume::unravel(i, shape);
                let nb = neighborhood(&fg, p, shape);
                if count_neighbors(&nb) > 1 && is_simple(&nb) {
                    fg[i] = false;
                    changed = true;
                }
            }
            live.retain(|&i| fg[i]);
        }
        if !changed {
            break;
        }
    }
    BinaryMask::from_bools(shape, mask.spacing(), &fg).expect("same geometry as input")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_tree, TreeSpec};
    use crate::topo::{components, neighbor_counts};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tube(shape: [usize; 3], radius: f64, len: std::ops::Range<usize>) -> BinaryMask {
        let c = [(shape[1] as f64 - 1.0) / 2.0, (shape[2] as f64 - 1.0) / 2.0];
        let fg: Vec<bool> = (0..shape.iter().product())
            .map(|i| {
                let [d, h, w] = crate::volume::unravel(i, shape);
                let r = ((h as f64 - c[0]).powi(2) + (w as f64 - c[1]).powi(2)).sqrt();
                len.contains(&d) && r <= radius
            })
            .collect();
        BinaryMask::from_bools(shape, [1.0; 3], &fg).unwrap()
    }

    #[test]
    fn empty_mask_gives_empty_skeleton() {
        let m = BinaryMask::empty([4, 4, 4], [1.0; 3]).unwrap();
        assert!(skeletonize(&m).is_empty());
    }

    #[test]
    fn isolated_voxel_is_kept() {
        let mut fg = vec![false; 27];
        fg[13] = true;
        let m = BinaryMask::from_bools([3, 3, 3], [1.0; 3], &fg).unwrap();
        assert_eq!(skeletonize(&m).count(), 1);
    }

    #[test]
    fn straight_tube_thins_to_a_single_path() {
        let m = tube([24, 11, 11], 3.0, 2..22);
        let s = skeletonize(&m);
        let fg = s.to_bools();
        assert!(s.count() >= 15, "skeleton too short: {}", s.count());
        assert_eq!(components(&fg, s.shape(), false), 1);
        let deg = neighbor_counts(&fg, s.shape());
        let ends = (0..fg.len()).filter(|&i| fg[i] && deg[i] == 1).count();
        let interior_ok = (0..fg.len()).filter(|&i| fg[i]).all(|i| deg[i] <= 2);
        assert_eq!(ends, 2);
        assert!(interior_ok, "path has a branch");
        // subset of the input
        assert!(fg.iter().zip(m.to_bools()).all(|(s, m)| !s || m));
    }

    #[test]
    fn bifurcation_has_one_junction() {
        // Three branches meeting off-lattice can leave a 3-voxel triangle of
        // mutually adjacent degree-3 voxels, so junctions are counted as
        // clusters.
        let mut single_voxel = 0;
        for seed in 0..12 {
            let spec = TreeSpec {
                depth: 2,
                seed,
                root_radius_vox: 2.5,
                ..TreeSpec::default()
            };
            let s = skeletonize(&generate_tree(&spec).unwrap().mask);
            let fg = s.to_bools();
            let deg = neighbor_counts(&fg, s.shape());
            let branch: Vec<bool> = (0..fg.len()).map(|i| fg[i] && deg[i] >= 3).collect();
            let ends = (0..fg.len()).filter(|&i| fg[i] && deg[i] == 1).count();
            assert_eq!(components(&branch, s.shape(), false), 1, "seed {seed}");
            assert_eq!(ends, 3, "seed {seed}");
            if branch.iter().filter(|&&b| b).count() == 1 {
                single_voxel += 1;
            }
        }
        assert!(
            single_voxel >= 6,
            "only {single_voxel} single-voxel junctions"
        );
    }

    #[test]
    fn simple_point_basics() {
        let mut nb = [false; 27];
        // isolated point and interior point are not simple
        assert!(!is_simple(&nb));
        let full = [true; 27];
        assert!(!is_simple(&full));
        // end of a line is simple, middle of a line is not
        nb[CENTER] = true;
        nb[CENTER + 1] = true;
        assert!(is_simple(&nb));
        nb[CENTER - 1] = true;
        assert!(!is_simple(&nb));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn thinning_preserves_component_count(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [8, 8, 8];
            let fg: Vec<bool> = (0..512).map(|_| rng.random_bool(0.55)).collect();
            let m = BinaryMask::from_bools(shape, [1.0; 3], &fg).unwrap();
            let s = skeletonize(&m);
            let sf = s.to_bools();
            proptest::prop_assert_eq!(components(&fg, shape, false), components(&sf, shape, false));
            proptest::prop_assert!(sf.iter().zip(&fg).all(|(s, m)| !s || *m));
        }
    }
}
