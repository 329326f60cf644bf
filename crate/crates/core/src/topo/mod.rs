//! Distance transforms, thinning and connectivity on binary volumes.

mod edt;
mod ridge;
mod skeleton;

pub use edt::{compute_edt, squared_edt_from};
pub use ridge::extract_ridge;
pub use skeleton::{is_simple, skeletonize};

/// Offsets of the 26-neighbourhood in `(d, h, w)` order.
pub(crate) fn neighbors26() -> impl Iterator<Item = [isize; 3]> {
    (-1..=1)
        .flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| [a, b, c])))
        .filter(|o| *o != [0, 0, 0])
}

pub(crate) const FACE_OFFSETS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

#[inline]
pub(crate) fn offset(p: [usize; 3], o: [isize; 3], shape: [usize; 3]) -> Option<usize> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + o[a];
        if v < 0 || v >= shape[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some((q[0] * shape[1] + q[1]) * shape[2] + q[2])
}

/// Number of connected components of `fg` (26-connectivity, or 6 when
/// `six` is set).
pub fn components(fg: &[bool], shape: [usize; 3], six: bool) -> usize {
    let offs: Vec<[isize; 3]> = if six {
        FACE_OFFSETS.to_vec()
    } else {
        neighbors26().collect()
    };
    let mut seen = vec![false; fg.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..fg.len() {
        if !fg[s] || seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(i) = stack.pop() {
            let p = crate::volume::unravel(i, shape);
            for o in &offs {
                if let Some(j) = offset(p, *o, shape) {
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

/// Number of 26-neighbours that are foreground, per voxel.
pub fn neighbor_counts(fg: &[bool], shape: [usize; 3]) -> Vec<u8> {
    let offs: Vec<[isize; 3]> = neighbors26().collect();
    (0..fg.len())
        .map(|i| {
            let p = crate::volume::unravel(i, shape);
            offs.iter()
                .filter(|o| offset(p, **o, shape).is_some_and(|j| fg[j]))
                .count() as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_counts_respect_connectivity() {
        // two voxels touching at a corner: one 26-component, two 6-components
        let shape = [2, 2, 2];
        let mut fg = vec![false; 8];
        fg[0] = true;
        fg[7] = true;
        assert_eq!(components(&fg, shape, false), 1);
        assert_eq!(components(&fg, shape, true), 2);
        assert_eq!(neighbors26().count(), 26);
    }
}
