use crate::volume::{BinaryMask, DistanceMap};

/// Foreground voxels that are local maxima of the distance map along at
/// least two of the three axes. Outside the grid counts as zero.
///
/// Maxima are strict; a two-voxel plateau (an even-width cross-section) is
/// credited to its lower-index voxel. Wider plateaus, such as the value-1
/// rim of a discrete tube, are not maxima.
pub fn extract_ridge(dmap: &DistanceMap) -> BinaryMask {
    let g = dmap.grid();
    let shape = g.shape();
    let v = g.values();
    let at = |p: [isize; 3]| -> f32 {
        if (0..3).any(|a| p[a] < 0 || p[a] >= shape[a] as isize) {
            0.0
        } else {
            v[g.index([p[0] as usize, p[1] as usize, p[2] as usize])]
        }
    };
    let ridge: Vec<bool> = (0..v.len())
        .map(|i| {
            if v[i] <= 0.0 {
                return false;
            }
            let p = g.coords(i).map(|c| c as isize);
            let axes = (0..3)
                .filter(|&a| {
                    let step = |k: isize| {
                        let mut q = p;
                        q[a] += k;
                        at(q)
                    };
                    let (l, r) = (step(-1), step(1));
                    v[i] > l && (v[i] > r || (v[i] == r && v[i] > step(2)))
                })
                .count();
            axes >= 2
        })
        .collect();
    BinaryMask::from_bools(shape, g.spacing(), &ridge).expect("same geometry")
}
