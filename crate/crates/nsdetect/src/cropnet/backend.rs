//! Numeric backend contract and the self-contained CPU reference
//! implementation. Kernels are written to keep the innermost loops over
//! contiguous rows so the compiler can vectorize them.

use super::tensor::{Scalar, Tensor};

/// The operations a CropNet needs from a numeric backend, forward and
/// reverse. Implementations must be deterministic.
pub trait Backend<T: Scalar>: Sync {
    /// 3x3x3 same-padding convolution: input `[ci, d, h, w]`, weight
    /// `[co, ci, 3, 3, 3]`, bias `[co]`, out `[co, d, h, w]`.
    fn conv3d(&self, input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, out: &mut Tensor<T>);

    /// Accumulates input/weight/bias gradients for `conv3d`.
    fn conv3d_backward(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad_input: &mut Tensor<T>,
        grad_weight: &mut Tensor<T>,
        grad_bias: &mut Tensor<T>,
    );

    /// Non-overlapping 2x2x2 max pooling; `indices` receives the linear
    /// input index of each selected maximum (first-in-scan-order on ties).
    fn maxpool2(&self, input: &Tensor<T>, out: &mut Tensor<T>, indices: &mut Vec<u32>);

    fn maxpool2_backward(&self, grad_out: &Tensor<T>, indices: &[u32], grad_input: &mut Tensor<T>);

    /// Dense head: dot(input, weight) + bias.
    fn dense(&self, input: &[T], weight: &[T], bias: T) -> T;

    fn dense_backward(
        &self,
        input: &[T],
        weight: &[T],
        grad_logit: T,
        grad_input: &mut [T],
        grad_weight: &mut [T],
        grad_bias: &mut T,
    );

    /// In-place rectifier.
    fn relu(&self, x: &mut [T]);

    /// Masks `grad` by the rectifier activity implied by its output.
    fn relu_backward(&self, output: &[T], grad: &mut [T]);
}

/// Reference CPU backend; the crate has no other numeric dependency.
#[derive(Debug, Clone, Copy, Default)]
pub struct CpuBackend;

fn dims4<T>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    assert_eq!(t.shape.len(), 4, "expected [c, d, h, w] tensor");
    (t.shape[0], t.shape[1], t.shape[2], t.shape[3])
}

/// Copies `[c, d, h, w]` into a zero-padded `[c, d+2, h+2, w+2]` buffer.
fn pad1<T: Scalar>(src: &[T], c: usize, d: usize, h: usize, w: usize) -> Vec<T> {
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut out = vec![T::zero(); c * pd * ph * pw];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = &src[((ci * d + z) * h + y) * w..][..w];
                let dst_off = ((ci * pd + z + 1) * ph + y + 1) * pw + 1;
                out[dst_off..dst_off + w].copy_from_slice(s);
            }
        }
    }
    out
}

/// One fused x-tap triple over a flat padded channel:
/// `dst[i] += w0*src[i+off] + w1*src[i+off+1] + w2*src[i+off+2]` for every
/// `i` where all reads land in bounds. Both buffers share the padded
/// geometry, so a kernel tap is a constant flat offset; computing into pad
/// cells is fine because callers trim them on copy-out.
#[inline]
fn axpy_taps<T: Scalar>(dst: &mut [T], src: &[T], off: isize, w0: T, w1: T, w2: T) {
    let len = dst.len() as isize;
    let lo = (-off).max(0).min(len) as usize;
    let hi = (len - off - 2).clamp(0, len) as usize;
    if hi <= lo {
        return;
    }
    let n = hi - lo;
    let d = &mut dst[lo..hi];
    let s0 = &src[(lo as isize + off) as usize..][..n];
    let s1 = &src[(lo as isize + off + 1) as usize..][..n];
    let s2 = &src[(lo as isize + off + 2) as usize..][..n];
    for j in 0..n {
        d[j] = s2[j].mul_add(w2, s1[j].mul_add(w1, s0[j].mul_add(w0, d[j])));
    }
}

/// Reduction counterpart: returns the three tap dot products
/// `sum_i go[i] * src[i+off+t]` for `t` in 0..3, with fixed-order lane
/// accumulation so results are deterministic.
#[inline]
fn dot_taps<T: Scalar>(go: &[T], src: &[T], off: isize) -> [T; 3] {
    let len = go.len() as isize;
    let lo = (-off).max(0).min(len) as usize;
    let hi = (len - off - 2).clamp(0, len) as usize;
    if hi <= lo {
        return [T::zero(); 3];
    }
    let n = hi - lo;
    let g = &go[lo..hi];
    let s0 = &src[(lo as isize + off) as usize..][..n];
    let s1 = &src[(lo as isize + off + 1) as usize..][..n];
    let s2 = &src[(lo as isize + off + 2) as usize..][..n];

    const LANES: usize = 8;
    #[inline(always)]
    fn fma_lanes<T: Scalar, const N: usize>(a: &[T], b: &[T], acc: [T; N]) -> [T; N] {
        std::array::from_fn(|l| a[l].mul_add(b[l], acc[l]))
    }

    let mut acc0 = [T::zero(); LANES];
    let mut acc1 = [T::zero(); LANES];
    let mut acc2 = [T::zero(); LANES];
    let mut g_it = g.chunks_exact(LANES);
    let mut s0_it = s0.chunks_exact(LANES);
    let mut s1_it = s1.chunks_exact(LANES);
    let mut s2_it = s2.chunks_exact(LANES);
    for (((gc, c0), c1), c2) in (&mut g_it).zip(&mut s0_it).zip(&mut s1_it).zip(&mut s2_it) {
        acc0 = fma_lanes(gc, c0, acc0);
        acc1 = fma_lanes(gc, c1, acc1);
        acc2 = fma_lanes(gc, c2, acc2);
    }
    for (((gv, v0), v1), v2) in g_it
        .remainder()
        .iter()
        .zip(s0_it.remainder())
        .zip(s1_it.remainder())
        .zip(s2_it.remainder())
    {
        acc0[0] = gv.mul_add(*v0, acc0[0]);
        acc1[0] = gv.mul_add(*v1, acc1[0]);
        acc2[0] = gv.mul_add(*v2, acc2[0]);
    }
    let mut out = [T::zero(); 3];
    for l in 0..LANES {
        out[0] += acc0[l];
        out[1] += acc1[l];
        out[2] += acc2[l];
    }
    out
}

/// Flat offset of kernel tap `(kz, ky, 0)` between two buffers with the
/// same padded row geometry.
#[inline]
fn tap_offset(kz: usize, ky: usize, ph: usize, pw: usize) -> isize {
    ((kz as isize - 1) * ph as isize + (ky as isize - 1)) * pw as isize - 1
}

impl<T: Scalar> Backend<T> for CpuBackend {
    fn conv3d(&self, input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, out: &mut Tensor<T>) {
        let (ci_n, d, h, w) = dims4(input);
        let co_n = weight.shape[0];
        assert_eq!(weight.shape, vec![co_n, ci_n, 3, 3, 3]);
        assert_eq!(bias.shape, vec![co_n]);
        assert_eq!(out.shape, vec![co_n, d, h, w]);

        let padded = pad1(&input.data, ci_n, d, h, w);
        let (ph, pw) = (h + 2, w + 2);
        let pchan = (d + 2) * ph * pw;
        let chan = d * h * w;

        let mut out_pad = vec![T::zero(); pchan];
        for co in 0..co_n {
            out_pad.iter_mut().for_each(|x| *x = T::zero());
            for ci in 0..ci_n {
                let wbase = (co * ci_n + ci) * 27;
                let src = &padded[ci * pchan..(ci + 1) * pchan];
                for kz in 0..3 {
                    for ky in 0..3 {
                        let w0 = weight.data[wbase + (kz * 3 + ky) * 3];
                        let w1 = weight.data[wbase + (kz * 3 + ky) * 3 + 1];
                        let w2 = weight.data[wbase + (kz * 3 + ky) * 3 + 2];
                        axpy_taps(&mut out_pad, src, tap_offset(kz, ky, ph, pw), w0, w1, w2);
                    }
                }
            }
            // Trim the interior and add the bias.
            let b = bias.data[co];
            let out_ch = &mut out.data[co * chan..(co + 1) * chan];
            for z in 0..d {
                for y in 0..h {
                    let src_off = ((z + 1) * ph + y + 1) * pw + 1;
                    let s = &out_pad[src_off..src_off + w];
                    let dst = &mut out_ch[(z * h + y) * w..][..w];
                    for x in 0..w {
                        dst[x] = s[x] + b;
                    }
                }
            }
        }
    }

    fn conv3d_backward(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad_input: &mut Tensor<T>,
        grad_weight: &mut Tensor<T>,
        grad_bias: &mut Tensor<T>,
    ) {
        let (ci_n, d, h, w) = dims4(input);
        let co_n = weight.shape[0];
        assert_eq!(grad_out.shape, vec![co_n, d, h, w]);
        assert_eq!(grad_input.shape, input.shape);
        assert_eq!(grad_weight.shape, weight.shape);
        assert_eq!(grad_bias.shape, vec![co_n]);

        let chan = d * h * w;
        let (ph, pw) = (h + 2, w + 2);
        let pchan = (d + 2) * ph * pw;

        for co in 0..co_n {
            let go = &grad_out.data[co * chan..(co + 1) * chan];
            let mut acc = T::zero();
            for &g in go {
                acc += g;
            }
            grad_bias.data[co] += acc;
        }

        // Weight gradients: tap dot products of padded grad_out against the
        // padded input; the zeros in the grad_out padding kill the invalid
        // positions.
        let padded_in = pad1(&input.data, ci_n, d, h, w);
        let padded_go = pad1(&grad_out.data, co_n, d, h, w);
        for co in 0..co_n {
            let go_ch = &padded_go[co * pchan..(co + 1) * pchan];
            for ci in 0..ci_n {
                let wbase = (co * ci_n + ci) * 27;
                let in_ch = &padded_in[ci * pchan..(ci + 1) * pchan];
                for kz in 0..3 {
                    for ky in 0..3 {
                        let acc = dot_taps(go_ch, in_ch, tap_offset(kz, ky, ph, pw));
                        grad_weight.data[wbase + (kz * 3 + ky) * 3] += acc[0];
                        grad_weight.data[wbase + (kz * 3 + ky) * 3 + 1] += acc[1];
                        grad_weight.data[wbase + (kz * 3 + ky) * 3 + 2] += acc[2];
                    }
                }
            }
        }

        // Input gradients: convolution of padded grad_out with the
        // channel-transposed, spatially flipped kernel.
        let mut gi_pad = vec![T::zero(); pchan];
        for ci in 0..ci_n {
            gi_pad.iter_mut().for_each(|x| *x = T::zero());
            for co in 0..co_n {
                let wbase = (co * ci_n + ci) * 27;
                let go_ch = &padded_go[co * pchan..(co + 1) * pchan];
                for kz in 0..3 {
                    for ky in 0..3 {
                        let f0 = weight.data[wbase + ((2 - kz) * 3 + (2 - ky)) * 3 + 2];
                        let f1 = weight.data[wbase + ((2 - kz) * 3 + (2 - ky)) * 3 + 1];
                        let f2 = weight.data[wbase + ((2 - kz) * 3 + (2 - ky)) * 3];
                        axpy_taps(&mut gi_pad, go_ch, tap_offset(kz, ky, ph, pw), f0, f1, f2);
                    }
                }
            }
            let gi_ch = &mut grad_input.data[ci * chan..(ci + 1) * chan];
            for z in 0..d {
                for y in 0..h {
                    let src_off = ((z + 1) * ph + y + 1) * pw + 1;
                    let s = &gi_pad[src_off..src_off + w];
                    let dst = &mut gi_ch[(z * h + y) * w..][..w];
                    for x in 0..w {
                        dst[x] += s[x];
                    }
                }
            }
        }
    }

    fn maxpool2(&self, input: &Tensor<T>, out: &mut Tensor<T>, indices: &mut Vec<u32>) {
        let (c, d, h, w) = dims4(input);
        assert!(
            d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
            "pooling needs even dims"
        );
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        assert_eq!(out.shape, vec![c, od, oh, ow]);
        indices.clear();
        indices.reserve(out.len());

        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0u32;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((ci * d + 2 * z + dz) * h + 2 * y + dy) * w
                                        + 2 * x
                                        + dx;
                                    let v = input.data[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                        }
                        out.data[((ci * od + z) * oh + y) * ow + x] = best;
                        indices.push(best_idx);
                    }
                }
            }
        }
    }

    fn maxpool2_backward(&self, grad_out: &Tensor<T>, indices: &[u32], grad_input: &mut Tensor<T>) {
        assert_eq!(grad_out.len(), indices.len());
        for (g, &idx) in grad_out.data.iter().zip(indices) {
            grad_input.data[idx as usize] += *g;
        }
    }

    fn dense(&self, input: &[T], weight: &[T], bias: T) -> T {
        assert_eq!(input.len(), weight.len());
        let mut acc = T::zero();
        for (a, b) in input.iter().zip(weight) {
            acc += *a * *b;
        }
        acc + bias
    }

    fn dense_backward(
        &self,
        input: &[T],
        weight: &[T],
        grad_logit: T,
        grad_input: &mut [T],
        grad_weight: &mut [T],
        grad_bias: &mut T,
    ) {
        for ((gi, gw), (x, w)) in grad_input
            .iter_mut()
            .zip(grad_weight.iter_mut())
            .zip(input.iter().zip(weight))
        {
            *gi += grad_logit * *w;
            *gw += grad_logit * *x;
        }
        *grad_bias += grad_logit;
    }

    fn relu(&self, x: &mut [T]) {
        for v in x.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }

    fn relu_backward(&self, output: &[T], grad: &mut [T]) {
        for (g, &o) in grad.iter_mut().zip(output) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
    }
}
