//! Chunked im2col convolution kernels.
//!
//! Weights are stored `(k³·Cin) × Cout` with row index `kidx·Cin + ci`, so a
//! chunk of output voxels is one GEMM `col (c × k³Cin) · W`. The input
//! gradient is computed by gathering output gradients onto input voxels,
//! which keeps every chunk's writes disjoint. Same-size 3³ convolutions with
//! narrow outputs bypass im2col (see `direct`).

use crate::par;
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Output voxels per GEMM chunk. Fixed so reductions are thread-count independent.
pub const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            in_ch,
            out_ch,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.taps() * self.in_ch * self.out_ch
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|n| (n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// Same-size 3³ convolution, served by the direct kernels.
    fn is_same3(&self) -> bool {
        self.kernel == 3 && self.stride == 1 && self.pad == 1
    }
}

#[inline]
fn unravel(p: usize, dims: [usize; 3]) -> [usize; 3] {
    let w = p % dims[2];
    let h = (p / dims[2]) % dims[1];
    let d = p / (dims[1] * dims[2]);
    [d, h, w]
}

/// Input coordinate read by output coordinate `o` at tap offset `t`.
#[inline]
fn src_coord(o: usize, t: usize, g: &ConvGeom, n: usize) -> Option<usize> {
    let i = (o * g.stride + t).checked_sub(g.pad)?;
    (i < n).then_some(i)
}

/// Output coordinate that reads input coordinate `i` at tap offset `t`.
#[inline]
fn dst_coord(i: usize, t: usize, g: &ConvGeom, n_out: usize) -> Option<usize> {
    let num = (i + g.pad).checked_sub(t)?;
    if num % g.stride != 0 {
        return None;
    }
    let o = num / g.stride;
    (o < n_out).then_some(o)
}

fn im2col<S: Real>(x: &Tensor<S>, g: &ConvGeom, out_dims: [usize; 3], p0: usize, col: &mut [S]) {
    let ci = g.in_ch;
    let k = g.kernel;
    let kk = g.taps() * ci;
    let rows = col.len() / kk;
    let [_, xh, xw] = x.dims;
    col.fill(S::zero());
    for r in 0..rows {
        let o = unravel(p0 + r, out_dims);
        let row = &mut col[r * kk..(r + 1) * kk];
        for a in 0..k {
            let Some(d) = src_coord(o[0], a, g, x.dims[0]) else {
                continue;
            };
            for b in 0..k {
                let Some(h) = src_coord(o[1], b, g, xh) else {
                    continue;
                };
                let base = (d * xh + h) * xw;
                let t0 = (a * k + b) * k;
                for c in 0..k {
                    if let Some(w) = src_coord(o[2], c, g, xw) {
                        let v = base + w;
                        let dst = (t0 + c) * ci;
                        if ci == 1 {
                            row[dst] = x.data[v];
                        } else {
                            row[dst..dst + ci].copy_from_slice(&x.data[v * ci..(v + 1) * ci]);
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<S: Real>(x: &Tensor<S>, w: &[S], b: Option<&[S]>, g: &ConvGeom) -> Tensor<S> {
    assert_eq!(x.channels, g.in_ch, "conv input channel mismatch");
    assert_eq!(w.len(), g.weight_len(), "conv weight size mismatch");
    let out_dims = g.out_dims(x.dims);
    let co = g.out_ch;
    let kk = g.taps() * g.in_ch;
    let mut out = Tensor::zeros(out_dims, co);
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let same3 = g.is_same3() && direct::supported(co);
    par::for_each_chunk_mut(&mut out.data, CHUNK * co, |ci, chunk| {
        let rows = chunk.len() / co;
        let p0 = ci * CHUNK;
        if same3 {
            direct::forward(co, &x.data, x.dims, g.in_ch, w, b, p0, chunk);
            return;
        }
        if let Some(bias) = b {
            for r in 0..rows {
                chunk[r * co..(r + 1) * co].copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        if pointwise {
            let src = &x.data[p0 * kk..(p0 + rows) * kk];
            gemm(rows, kk, co, src, false, w, false, beta, chunk);
        } else {
            let mut col = vec![S::zero(); rows * kk];
            im2col(x, g, out_dims, p0, &mut col);
            gemm(rows, kk, co, &col, false, w, false, beta, chunk);
        }
    });
    out
}

/// Gradient with respect to the weights (and bias, when `want_bias`).
pub fn backward_weight<S: Real>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    g: &ConvGeom,
    want_bias: bool,
) -> (Vec<S>, Option<Vec<S>>) {
    let out_dims = dy.dims;
    let co = g.out_ch;
    let kk = g.taps() * g.in_ch;
    let p = dy.voxels();
    let n_chunks = p.div_ceil(CHUNK);
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let partials: Vec<Vec<S>> = par::map_indexed(n_chunks, |ci| {
        let p0 = ci * CHUNK;
        let rows = CHUNK.min(p - p0);
        let dyc = &dy.data[p0 * co..(p0 + rows) * co];
        let mut dw = vec![S::zero(); kk * co];
        if pointwise {
            let src = &x.data[p0 * kk..(p0 + rows) * kk];
            gemm(kk, rows, co, src, true, dyc, false, S::zero(), &mut dw);
        } else {
            let mut col = vec![S::zero(); rows * kk];
            im2col(x, g, out_dims, p0, &mut col);
            gemm(kk, rows, co, &col, true, dyc, false, S::zero(), &mut dw);
        }
        dw
    });
    let mut dw = vec![S::zero(); kk * co];
    for part in &partials {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    let db = want_bias.then(|| {
        let mut db = vec![S::zero(); co];
        for v in dy.data.chunks(co) {
            for (a, &b) in db.iter_mut().zip(v) {
                *a += b;
            }
        }
        db
    });
    (dw, db)
}

/// Gradient with respect to the input.
pub fn backward_input<S: Real>(
    dy: &Tensor<S>,
    w: &[S],
    g: &ConvGeom,
    in_dims: [usize; 3],
) -> Tensor<S> {
    let (ci, co) = (g.in_ch, g.out_ch);
    let kk2 = g.taps() * co;
    // W2[(t, co), ci] = W[(t, ci), co]
    let mut w2 = vec![S::zero(); kk2 * ci];
    for t in 0..g.taps() {
        for i in 0..ci {
            for o in 0..co {
                w2[(t * co + o) * ci + i] = w[(t * ci + i) * co + o];
            }
        }
    }
    let out_dims = dy.dims;
    let mut dx = Tensor::zeros(in_dims, ci);
    if g.is_same3() && direct::supported(ci) {
        // A same-size conv's adjoint is the same conv with all taps mirrored.
        let n = g.taps();
        let mut flip = vec![S::zero(); w2.len()];
        for t in 0..n {
            let src = &w2[t * co * ci..(t + 1) * co * ci];
            flip[(n - 1 - t) * co * ci..(n - t) * co * ci].copy_from_slice(src);
        }
        par::for_each_chunk_mut(&mut dx.data, CHUNK * ci, |chunk_idx, chunk| {
            direct::forward(
                ci,
                &dy.data,
                out_dims,
                co,
                &flip,
                None,
                chunk_idx * CHUNK,
                chunk,
            );
        });
        return dx;
    }
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    par::for_each_chunk_mut(&mut dx.data, CHUNK * ci, |chunk_idx, chunk| {
        let rows = chunk.len() / ci;
        let q0 = chunk_idx * CHUNK;
        if pointwise {
            let src = &dy.data[q0 * co..(q0 + rows) * co];
            gemm(rows, co, ci, src, false, &w2, false, S::zero(), chunk);
            return;
        }
        let mut col = vec![S::zero(); rows * kk2];
        let k = g.kernel;
        let [_, oh, ow] = out_dims;
        for r in 0..rows {
            let q = unravel(q0 + r, in_dims);
            let row = &mut col[r * kk2..(r + 1) * kk2];
            for a in 0..k {
                let Some(d) = dst_coord(q[0], a, g, out_dims[0]) else {
                    continue;
                };
                for b in 0..k {
                    let Some(h) = dst_coord(q[1], b, g, oh) else {
                        continue;
                    };
                    let base = (d * oh + h) * ow;
                    let t0 = (a * k + b) * k;
                    for c in 0..k {
                        if let Some(w) = dst_coord(q[2], c, g, ow) {
                            let v = base + w;
                            let dst = (t0 + c) * co;
                            row[dst..dst + co].copy_from_slice(&dy.data[v * co..(v + 1) * co]);
                        }
                    }
                }
            }
        }
        gemm(rows, kk2, ci, &col, false, &w2, false, S::zero(), chunk);
    });
    dx
}

/// Direct kernels for the 3³, stride-1, pad-1 case with a small, fixed output
/// width. They skip the im2col copy, which dominates at low channel counts.
mod direct {
    use super::unravel;
    use crate::real::Real;

    /// Output widths with a specialised kernel. Wider outputs amortise the
    /// im2col copy well enough that GEMM wins.
    pub fn supported(co: usize) -> bool {
        matches!(co, 2 | 4 | 8)
    }

    /// In-bounds tap range `[lo, hi)` along an axis of length `n` at `p`.
    #[inline(always)]
    fn taps(p: usize, n: usize) -> (usize, usize) {
        (usize::from(p == 0), if p + 1 == n { 2 } else { 3 })
    }

    /// Visits every in-bounds `(tap, input voxel)` pair of output voxel `p`.
    #[inline(always)]
    fn for_taps(p: [usize; 3], dims: [usize; 3], mut f: impl FnMut(usize, usize)) {
        let [xd, xh, xw] = dims;
        let (a0, a1) = taps(p[0], xd);
        let (b0, b1) = taps(p[1], xh);
        let (c0, c1) = taps(p[2], xw);
        for a in a0..a1 {
            for b in b0..b1 {
                let base = ((p[0] + a - 1) * xh + p[1] + b - 1) * xw + p[2];
                let t0 = (a * 3 + b) * 3;
                for c in c0..c1 {
                    f(t0 + c, base + c - 1);
                }
            }
        }
    }

    #[inline(always)]
    fn fwd<S: Real, const CO: usize>(
        x: &[S],
        dims: [usize; 3],
        ci: usize,
        w: &[S],
        bias: Option<&[S]>,
        p0: usize,
        out: &mut [S],
    ) {
        for (r, o) in out.chunks_exact_mut(CO).enumerate() {
            let mut acc = [S::zero(); CO];
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for_taps(unravel(p0 + r, dims), dims, |t, v| {
                let xs = &x[v * ci..(v + 1) * ci];
                let wt = &w[t * ci * CO..(t + 1) * ci * CO];
                for (&xv, wr) in xs.iter().zip(wt.chunks_exact(CO)) {
                    let wr: &[S; CO] = wr.try_into().unwrap();
                    for k in 0..CO {
                        acc[k] += xv * wr[k];
                    }
                }
            });
            o.copy_from_slice(&acc);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn fwd_avx<S: Real, const CO: usize>(
        x: &[S],
        dims: [usize; 3],
        ci: usize,
        w: &[S],
        bias: Option<&[S]>,
        p0: usize,
        out: &mut [S],
    ) {
        fwd::<S, CO>(x, dims, ci, w, bias, p0, out)
    }

    fn fwd_width<S: Real, const CO: usize>(
        x: &[S],
        dims: [usize; 3],
        ci: usize,
        w: &[S],
        bias: Option<&[S]>,
        p0: usize,
        out: &mut [S],
    ) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the running CPU supports the enabled feature.
            return unsafe { fwd_avx::<S, CO>(x, dims, ci, w, bias, p0, out) };
        }
        fwd::<S, CO>(x, dims, ci, w, bias, p0, out)
    }

    /// Same-size 3³ convolution of the output voxels `p0..` that fill `out`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Real>(
        co: usize,
        x: &[S],
        dims: [usize; 3],
        ci: usize,
        w: &[S],
        bias: Option<&[S]>,
        p0: usize,
        out: &mut [S],
    ) {
        match co {
            2 => fwd_width::<S, 2>(x, dims, ci, w, bias, p0, out),
            4 => fwd_width::<S, 4>(x, dims, ci, w, bias, p0, out),
            8 => fwd_width::<S, 8>(x, dims, ci, w, bias, p0, out),
            _ => unreachable!("no direct kernel for width {co}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as the reference.
    fn naive(x: &Tensor<f64>, w: &[f64], b: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let od = g.out_dims(x.dims);
        let mut out = Tensor::zeros(od, g.out_ch);
        let k = g.kernel;
        for d in 0..od[0] {
            for h in 0..od[1] {
                for ww in 0..od[2] {
                    for o in 0..g.out_ch {
                        let mut acc = b[o];
                        for a in 0..k {
                            for bb in 0..k {
                                for c in 0..k {
                                    let id = (d * g.stride + a) as isize - g.pad as isize;
                                    let ih = (h * g.stride + bb) as isize - g.pad as isize;
                                    let iw = (ww * g.stride + c) as isize - g.pad as isize;
                                    if id < 0
                                        || ih < 0
                                        || iw < 0
                                        || id >= x.dims[0] as isize
                                        || ih >= x.dims[1] as isize
                                        || iw >= x.dims[2] as isize
                                    {
                                        continue;
                                    }
                                    let v = ((id as usize * x.dims[1] + ih as usize) * x.dims[2]
                                        + iw as usize)
                                        * g.in_ch;
                                    let t = (a * k + bb) * k + c;
                                    for i in 0..g.in_ch {
                                        acc += x.data[v + i] * w[(t * g.in_ch + i) * g.out_ch + o];
                                    }
                                }
                            }
                        }
                        out.data[((d * od[1] + h) * od[2] + ww) * g.out_ch + o] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn geoms() -> Vec<ConvGeom> {
        vec![
            ConvGeom::new(2, 3, 3, 1, 1),
            ConvGeom::new(3, 2, 3, 2, 1),
            ConvGeom::new(4, 2, 1, 1, 0),
            ConvGeom::new(3, 4, 3, 1, 1),
            ConvGeom::new(8, 8, 3, 1, 1),
        ]
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in geoms() {
            let dims = [4, 6, 5];
            let x = Tensor::from_vec(dims, g.in_ch, random(&mut rng, 120 * g.in_ch));
            let w = random(&mut rng, g.weight_len());
            let b = random(&mut rng, g.out_ch);
            let got = forward(&x, &w, Some(&b), &g);
            let want = naive(&x, &w, &b, &g);
            assert_eq!(got.dims, want.dims);
            for (a, c) in got.data.iter().zip(&want.data) {
                assert!((a - c).abs() < 1e-12, "{a} vs {c}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> must equal <dx, x> + <dw, w> + <db, b> for a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in geoms() {
            let dims = [4, 4, 6];
            let x = Tensor::from_vec(dims, g.in_ch, random(&mut rng, 96 * g.in_ch));
            let w = random(&mut rng, g.weight_len());
            let b = random(&mut rng, g.out_ch);
            let y = forward(&x, &w, Some(&b), &g);
            let dy = Tensor::from_vec(y.dims, g.out_ch, random(&mut rng, y.len()));
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, c)| a * c).sum();
            let dx = backward_input(&dy, &w, &g, dims);
            let (dw, db) = backward_weight(&x, &dy, &g, true);
            let db = db.unwrap();
            // forward is affine: split off the bias contribution.
            let y0 = forward(&x, &w, None, &g);
            let lin: f64 = y0.data.iter().zip(&dy.data).map(|(a, c)| a * c).sum();
            let via_x: f64 = dx.data.iter().zip(&x.data).map(|(a, c)| a * c).sum();
            let via_w: f64 = dw.iter().zip(&w).map(|(a, c)| a * c).sum();
            let via_b: f64 = db.iter().zip(&b).map(|(a, c)| a * c).sum();
            assert!((lin - via_x).abs() < 1e-9, "{lin} vs {via_x}");
            assert!((lin - via_w).abs() < 1e-9, "{lin} vs {via_w}");
            assert!((lhs - lin - via_b).abs() < 1e-9);
        }
    }
}
