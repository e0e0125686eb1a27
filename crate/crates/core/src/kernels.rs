//! Raw numeric kernels for 3D convolution.
//!
//! Direct (loop) convolution over row-major `N C D H W` buffers. The kernels
//! parallelize over independent output planes; for any fixed output element
//! the accumulation order is the lexicographic `(ci, kd, kh, kw)` /
//! `(n, od, oh, ow)` order of the sequential kernel, so results are
//! bit-identical to a single-threaded run.
//!
//! Transposed convolution reuses these kernels with the channel roles
//! swapped: its forward pass is `conv3d_bwd_input`, its input gradient is
//! `conv3d_fwd`, and its weight gradient is `conv3d_bwd_weight` with the
//! data/gradient arguments exchanged.

use rayon::prelude::*;

use crate::error::TensorError;
use crate::tensor::Scalar;

/// Resolved geometry for one convolution: all extents validated.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_sp: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_sp: [usize; 3],
}

impl ConvDims {
    /// Validate shapes for a forward convolution and compute output extents:
    /// `out = floor((in + 2p - k) / s) + 1` per spatial axis.
    pub fn conv(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<ConvDims, TensorError> {
        if x_shape.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv3d",
                expected: 5,
                shape: x_shape.to_vec(),
            });
        }
        if w_shape.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv3d weight",
                expected: 5,
                shape: w_shape.to_vec(),
            });
        }
        if x_shape[1] != w_shape[1] {
            return Err(TensorError::AxisMismatch {
                op: "conv3d",
                axis: 1,
                detail: format!(
                    "input has {} channels but weight expects {}",
                    x_shape[1], w_shape[1]
                ),
            });
        }
        let mut out_sp = [0usize; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "conv3d",
                    detail: format!("stride {} on spatial axis {}", stride[a], a),
                });
            }
            let padded = x_shape[2 + a] + 2 * pad[a];
            let k = w_shape[2 + a];
            if k == 0 || padded < k {
                return Err(TensorError::AxisMismatch {
                    op: "conv3d",
                    axis: 2 + a,
                    detail: format!(
                        "padded extent {} smaller than kernel extent {}",
                        padded, k
                    ),
                });
            }
            out_sp[a] = (padded - k) / stride[a] + 1;
        }
        Ok(ConvDims {
            batch: x_shape[0],
            cin: x_shape[1],
            cout: w_shape[0],
            in_sp: [x_shape[2], x_shape[3], x_shape[4]],
            k: [w_shape[2], w_shape[3], w_shape[4]],
            stride,
            pad,
            out_sp,
        })
    }

    /// Geometry for a transposed convolution viewed as the adjoint of a
    /// forward convolution. `x_shape` is the transpose input `(N, A, S)`,
    /// `w_shape` is `(A, B, k)`; the result maps onto the conv view where
    /// `out_sp` is the transpose INPUT grid and `in_sp` the transpose OUTPUT
    /// grid of extent `(in - 1)*s - 2p + k`.
    pub fn conv_transpose(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<ConvDims, TensorError> {
        if x_shape.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv_transpose3d",
                expected: 5,
                shape: x_shape.to_vec(),
            });
        }
        if w_shape.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv_transpose3d weight",
                expected: 5,
                shape: w_shape.to_vec(),
            });
        }
        if x_shape[1] != w_shape[0] {
            return Err(TensorError::AxisMismatch {
                op: "conv_transpose3d",
                axis: 1,
                detail: format!(
                    "input has {} channels but weight expects {}",
                    x_shape[1], w_shape[0]
                ),
            });
        }
        let mut full_sp = [0usize; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "conv_transpose3d",
                    detail: format!("stride {} on spatial axis {}", stride[a], a),
                });
            }
            let reach = (x_shape[2 + a] - 1) * stride[a] + w_shape[2 + a];
            if reach <= 2 * pad[a] {
                return Err(TensorError::AxisMismatch {
                    op: "conv_transpose3d",
                    axis: 2 + a,
                    detail: format!(
                        "output extent (in-1)*s - 2p + k = {} - {} is not positive",
                        reach,
                        2 * pad[a]
                    ),
                });
            }
            full_sp[a] = reach - 2 * pad[a];
        }
        Ok(ConvDims {
            batch: x_shape[0],
            cin: w_shape[1],
            cout: x_shape[1],
            in_sp: full_sp,
            k: [w_shape[2], w_shape[3], w_shape[4]],
            stride,
            pad,
            out_sp: [x_shape[2], x_shape[3], x_shape[4]],
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.out_sp[0],
            self.out_sp[1],
            self.out_sp[2],
        ]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cin,
            self.in_sp[0],
            self.in_sp[1],
            self.in_sp[2],
        ]
    }
}

/// Inclusive range of output coordinates whose sampled input coordinate
/// `o*stride + k_off - pad` stays inside `[0, in_extent)`. May be empty
/// (`lo > hi`).
#[inline]
fn valid_out_range(
    in_extent: usize,
    out_extent: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_num = in_extent - 1 + pad;
    if hi_num < k_off {
        return (1, 0);
    }
    let hi = ((hi_num - k_off) / stride).min(out_extent.saturating_sub(1));
    (lo, hi)
}

/// Forward convolution. `x: (N,Cin,D,H,W)`, `w: (Cout,Cin,kD,kH,kW)`.
///
/// Each output row is built in an L1-resident accumulator over the
/// `(ci, kd, kh, kw)` loop nest, which is also the per-element accumulation
/// order of the naive reference kernel.
pub fn conv3d_fwd<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let [ind, inh, inw] = d.in_sp;
    let [odx, ohx, owx] = d.out_sp;
    let [kd, kh, kw] = d.k;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let in_ch = ind * inh * inw;
    let out_plane = odx * ohx * owx;
    let kvol = kd * kh * kw;

    // per-xk valid output range along the row
    let wranges: Vec<(usize, usize, isize)> = (0..kw)
        .map(|xk| {
            let (lo, hi) = valid_out_range(inw, owx, xk, sw, pw);
            (lo, hi, xk as isize - pw as isize)
        })
        .collect();

    // one parallel job per (n, od) slab holding rows for every output
    // channel, so each input row is streamed once per kernel offset instead
    // of once per channel; slabs are permuted into N C D H W afterwards
    let slab_len = d.cout * ohx * owx;
    let mut slabs = vec![T::zero(); d.batch * odx * slab_len];
    slabs
        .par_chunks_mut(slab_len)
        .enumerate()
        .for_each(|(job, slab)| {
            let n = job / odx;
            let od = job % odx;
            let xn = n * d.cin * in_ch;
            for oh in 0..ohx {
                for ci in 0..d.cin {
                    let xc = xn + ci * in_ch;
                    for zk in 0..kd {
                        let id = od * sd + zk;
                        if id < pd || id - pd >= ind {
                            continue;
                        }
                        let id = id - pd;
                        for yk in 0..kh {
                            let ih = oh * sh + yk;
                            if ih < ph || ih - ph >= inh {
                                continue;
                            }
                            let ih = ih - ph;
                            let xrow = xc + (id * inh + ih) * inw;
                            for co in 0..d.cout {
                                let wrow = (co * d.cin + ci) * kvol + (zk * kh + yk) * kw;
                                let arow = (co * ohx + oh) * owx;
                                for (xk, &(wlo, whi, woff)) in wranges.iter().enumerate() {
                                    if wlo > whi {
                                        continue;
                                    }
                                    let wv = w[wrow + xk];
                                    if sw == 1 {
                                        let iw0 = (wlo as isize + woff) as usize;
                                        let len = whi + 1 - wlo;
                                        let xs = &x[xrow + iw0..xrow + iw0 + len];
                                        let accs = &mut slab[arow + wlo..arow + wlo + len];
                                        for (a, &xv) in accs.iter_mut().zip(xs) {
                                            *a = *a + wv * xv;
                                        }
                                    } else {
                                        let iw0 = (wlo * sw) as isize + woff;
                                        let iw0 = iw0 as usize;
                                        let count = whi + 1 - wlo;
                                        let xs = &x[xrow + iw0..xrow + iw0 + (count - 1) * sw + 1];
                                        let accs = &mut slab[arow + wlo..arow + wlo + count];
                                        for (k, a) in accs.iter_mut().enumerate() {
                                            *a = *a + wv * xs[k * sw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut out = vec![T::zero(); d.batch * d.cout * out_plane];
    let row = ohx * owx;
    for n in 0..d.batch {
        for od in 0..odx {
            let slab = &slabs[(n * odx + od) * slab_len..(n * odx + od + 1) * slab_len];
            for co in 0..d.cout {
                let dst = ((n * d.cout + co) * odx + od) * row;
                let src = &slab[co * row..(co + 1) * row];
                if let Some(b) = bias {
                    let bv = b[co];
                    for (o, &a) in out[dst..dst + row].iter_mut().zip(src) {
                        *o = a + bv;
                    }
                } else {
                    out[dst..dst + row].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input; also the forward pass of the
/// transposed convolution. `g` lives on the output grid `(N,Cout,out_sp)`,
/// the result on the input grid `(N,Cin,in_sp)`.
pub fn conv3d_bwd_input<T: Scalar>(g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let [ind, inh, inw] = d.in_sp;
    let [odx, ohx, owx] = d.out_sp;
    let [kd, kh, kw] = d.k;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let in_ch = ind * inh * inw;
    let out_plane = odx * ohx * owx;
    let kvol = kd * kh * kw;

    let wranges: Vec<(usize, usize, isize)> = (0..kw)
        .map(|xk| {
            let (lo, hi) = valid_out_range(inw, owx, xk, sw, pw);
            (lo, hi, xk as isize - pw as isize)
        })
        .collect();

    // one parallel job per (n, id) slab holding rows for every input channel
    let slab_len = d.cin * inh * inw;
    let mut slabs = vec![T::zero(); d.batch * ind * slab_len];
    slabs
        .par_chunks_mut(slab_len)
        .enumerate()
        .for_each(|(job, slab)| {
            let n = job / ind;
            let id = job % ind;
            let gn = n * d.cout * out_plane;
            for ih in 0..inh {
                for co in 0..d.cout {
                    let gc = gn + co * out_plane;
                    for zk in 0..kd {
                        // od*sd + zk - pd == id
                        let num = id + pd;
                        if num < zk || (num - zk) % sd != 0 {
                            continue;
                        }
                        let od = (num - zk) / sd;
                        if od >= odx {
                            continue;
                        }
                        for yk in 0..kh {
                            let num = ih + ph;
                            if num < yk || (num - yk) % sh != 0 {
                                continue;
                            }
                            let oh = (num - yk) / sh;
                            if oh >= ohx {
                                continue;
                            }
                            let grow = gc + (od * ohx + oh) * owx;
                            for ci in 0..d.cin {
                                let wrow = (co * d.cin + ci) * kvol + (zk * kh + yk) * kw;
                                let arow = (ci * inh + ih) * inw;
                                for (xk, &(wlo, whi, woff)) in wranges.iter().enumerate() {
                                    if wlo > whi {
                                        continue;
                                    }
                                    let wv = w[wrow + xk];
                                    if sw == 1 {
                                        let iw0 = (wlo as isize + woff) as usize;
                                        let len = whi + 1 - wlo;
                                        let gs = &g[grow + wlo..grow + wlo + len];
                                        let accs = &mut slab[arow + iw0..arow + iw0 + len];
                                        for (a, &gv) in accs.iter_mut().zip(gs) {
                                            *a = *a + wv * gv;
                                        }
                                    } else {
                                        let iw0 = (wlo * sw) as isize + woff;
                                        let iw0 = iw0 as usize;
                                        let count = whi + 1 - wlo;
                                        let gs = &g[grow + wlo..grow + wlo + count];
                                        let accs = &mut slab
                                            [arow + iw0..arow + iw0 + (count - 1) * sw + 1];
                                        for (k, &gv) in gs.iter().enumerate() {
                                            accs[k * sw] = accs[k * sw] + wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut dx = vec![T::zero(); d.batch * d.cin * in_ch];
    let row = inh * inw;
    for n in 0..d.batch {
        for id in 0..ind {
            let slab = &slabs[(n * ind + id) * slab_len..(n * ind + id + 1) * slab_len];
            for ci in 0..d.cin {
                let dst = ((n * d.cin + ci) * ind + id) * row;
                dx[dst..dst + row].copy_from_slice(&slab[ci * row..(ci + 1) * row]);
            }
        }
    }
    dx
}

/// Gradient w.r.t. the convolution weight: `(Cout,Cin,kD,kH,kW)`.
pub fn conv3d_bwd_weight<T: Scalar>(x: &[T], g: &[T], d: &ConvDims) -> Vec<T> {
    let [ind, inh, inw] = d.in_sp;
    let [odx, ohx, owx] = d.out_sp;
    let [kd, kh, kw] = d.k;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let in_ch = ind * inh * inw;
    let out_plane = odx * ohx * owx;
    let kvol = kd * kh * kw;

    let mut dw = vec![T::zero(); d.cout * d.cin * kvol];
    dw.par_chunks_mut(d.cin * kvol)
        .enumerate()
        .for_each(|(co, wchunk)| {
            for ci in 0..d.cin {
                for zk in 0..kd {
                    let (dlo, dhi) = valid_out_range(ind, odx, zk, sd, pd);
                    for yk in 0..kh {
                        let (hlo, hhi) = valid_out_range(inh, ohx, yk, sh, ph);
                        for xk in 0..kw {
                            let (wlo, whi) = valid_out_range(inw, owx, xk, sw, pw);
                            if dlo > dhi || hlo > hhi || wlo > whi {
                                continue;
                            }
                            let woff = xk as isize - pw as isize;
                            let mut acc = T::zero();
                            for n in 0..d.batch {
                                let gc = (n * d.cout + co) * out_plane;
                                let xc = (n * d.cin + ci) * in_ch;
                                for od in dlo..=dhi {
                                    let id = od * sd + zk - pd;
                                    for oh in hlo..=hhi {
                                        let ih = oh * sh + yk - ph;
                                        let grow = gc + (od * ohx + oh) * owx;
                                        let xrow = xc + (id * inh + ih) * inw;
                                        if sw == 1 {
                                            let iw0 = (wlo as isize + woff) as usize;
                                            let len = whi + 1 - wlo;
                                            let gs = &g[grow + wlo..grow + wlo + len];
                                            let xs = &x[xrow + iw0..xrow + iw0 + len];
                                            for (&gv, &xv) in gs.iter().zip(xs) {
                                                acc = acc + gv * xv;
                                            }
                                        } else {
                                            let iw0 = (wlo * sw) as isize + woff;
                                            let iw0 = iw0 as usize;
                                            let count = whi + 1 - wlo;
                                            let gs = &g[grow + wlo..grow + wlo + count];
                                            let xs = &x
                                                [xrow + iw0..xrow + iw0 + (count - 1) * sw + 1];
                                            for (k, &gv) in gs.iter().enumerate() {
                                                acc = acc + gv * xs[k * sw];
                                            }
                                        }
                                    }
                                }
                            }
                            wchunk[(ci * kd + zk) * kh * kw + yk * kw + xk] = acc;
                        }
                    }
                }
            }
        });
    dw
}

/// Per-channel sum of `g` over batch and spatial axes: the bias gradient.
pub fn sum_per_channel<T: Scalar>(g: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (n * channels + c) * spatial;
            for &v in &g[base..base + spatial] {
                *o = *o + v;
            }
        }
    }
    out
}
