//! Same-shape 3D convolution, lowered to per-sample im2col + GEMM.
//!
//! Padding keeps the output spatial shape equal to the input: odd kernels pad
//! `(k-1)/2` on both sides, the even 2³ kernel pads `(0 low, 1 high)` per
//! axis. Samples are processed independently (and in parallel), so results do
//! not depend on how tensors are batched; the gradient reduction over samples
//! runs in a fixed chunk order, keeping backward bit-deterministic.

use rayon::prelude::*;

use super::{DiffTensor, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    k: usize,
    pad_low: isize,
    d: usize,
    h: usize,
    w: usize,
}

impl ConvGeom {
    fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

/// Buffer whose every element the caller overwrites before reading (GEMM
/// with beta = 0 writes the full output; `im2col` covers its full extent).
fn uninit_buf<T: Scalar>(len: usize) -> Vec<T> {
    let mut v = Vec::with_capacity(len);
    // SAFETY: T is plain-old-data (Copy, no Drop); the contract above
    // guarantees initialization before any read.
    unsafe { v.set_len(len) };
    v
}

/// Expands one sample into the column matrix: row = (channel, tap), column =
/// output voxel. Out-of-range taps read zero. Writes every element of `col`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (d, h, w, k) = (g.d, g.h, g.w, g.k);
    let plane = h * w;
    let vol = d * plane;
    debug_assert_eq!(x.len(), g.cin * vol);
    debug_assert_eq!(col.len(), g.col_rows() * vol);
    let mut row = 0usize;
    for ci in 0..g.cin {
        let chan = &x[ci * vol..(ci + 1) * vol];
        for kd in 0..k {
            let sd = kd as isize - g.pad_low;
            for kh in 0..k {
                let sh = kh as isize - g.pad_low;
                for kw in 0..k {
                    let sw = kw as isize - g.pad_low;
                    let dst_row = &mut col[row * vol..(row + 1) * vol];
                    // valid output w range for this tap
                    let w_lo = (-sw).max(0) as usize;
                    let w_hi = ((w as isize - sw).min(w as isize)).max(0) as usize;
                    for od in 0..d {
                        let src_d = od as isize + sd;
                        let d_ok = src_d >= 0 && src_d < d as isize;
                        for oh in 0..h {
                            let src_h = oh as isize + sh;
                            let base = od * plane + oh * w;
                            let dst = &mut dst_row[base..base + w];
                            if !d_ok || src_h < 0 || src_h >= h as isize || w_lo >= w_hi {
                                dst.fill(T::ZERO);
                                continue;
                            }
                            let src_base = src_d as usize * plane + src_h as usize * w;
                            dst[..w_lo].fill(T::ZERO);
                            let src_lo = (w_lo as isize + sw) as usize;
                            dst[w_lo..w_hi].copy_from_slice(
                                &chan[src_base + src_lo..src_base + src_lo + (w_hi - w_lo)],
                            );
                            dst[w_hi..].fill(T::ZERO);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column-matrix gradients back onto the
/// input layout. `dx` must be zero-initialized.
fn col2im_add<T: Scalar>(dcol: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (d, h, w, k) = (g.d, g.h, g.w, g.k);
    let plane = h * w;
    let vol = d * plane;
    let mut row = 0usize;
    for ci in 0..g.cin {
        let chan = &mut dx[ci * vol..(ci + 1) * vol];
        for kd in 0..k {
            let sd = kd as isize - g.pad_low;
            for kh in 0..k {
                let sh = kh as isize - g.pad_low;
                for kw in 0..k {
                    let sw = kw as isize - g.pad_low;
                    let src_row = &dcol[row * vol..(row + 1) * vol];
                    let w_lo = (-sw).max(0) as usize;
                    let w_hi = ((w as isize - sw).min(w as isize)).max(0) as usize;
                    for od in 0..d {
                        let src_d = od as isize + sd;
                        if src_d < 0 || src_d >= d as isize {
                            continue;
                        }
                        for oh in 0..h {
                            let src_h = oh as isize + sh;
                            if src_h < 0 || src_h >= h as isize || w_lo >= w_hi {
                                continue;
                            }
                            let base = od * plane + oh * w;
                            let tgt_base = src_d as usize * plane
                                + src_h as usize * w
                                + (w_lo as isize + sw) as usize;
                            for i in 0..(w_hi - w_lo) {
                                chan[tgt_base + i] += src_row[base + w_lo + i];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 3D convolution with same-shape zero padding, differentiable in both the
/// input `(N, Cin, D, H, W)` and the kernel `(Cout, Cin, k, k, k)`.
pub fn conv3d<T: Scalar>(input: &DiffTensor<T>, kernel: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    let in_shape = input.shape();
    let k_shape = kernel.shape();
    if in_shape.len() != 5 {
        return Err(Error::Shape(format!(
            "conv3d input must be (N, Cin, D, H, W), got {:?}",
            in_shape
        )));
    }
    if k_shape.len() != 5 || k_shape[2] != k_shape[3] || k_shape[3] != k_shape[4] {
        return Err(Error::Shape(format!(
            "conv3d kernel must be (Cout, Cin, k, k, k), got {:?}",
            k_shape
        )));
    }
    if k_shape[1] != in_shape[1] {
        return Err(Error::Shape(format!(
            "conv3d channel mismatch: input has {}, kernel expects {}",
            in_shape[1], k_shape[1]
        )));
    }
    let k = k_shape[2];
    if k == 0 {
        return Err(Error::InvalidArgument("conv3d kernel extent 0".into()));
    }
    let (n, cin, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    if d < k || h < k || w < k {
        return Err(Error::Shape(format!(
            "conv3d spatial extents ({d},{h},{w}) smaller than kernel {k}"
        )));
    }
    let cout = k_shape[0];
    let geom = ConvGeom {
        cin,
        k,
        pad_low: ((k - 1) / 2) as isize,
        d,
        h,
        w,
    };
    let s = geom.spatial();
    let ck = geom.col_rows();
    let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);

    let mut out = uninit_buf::<T>(n * cout * s);
    {
        let xv = input.values_ref();
        let kv = kernel.values_ref();
        let xs: &[T] = &xv;
        let ks: &[T] = &kv;
        out.par_chunks_mut(chunk * cout * s)
            .enumerate()
            .for_each(|(ci, out_chunk)| {
                // one scratch column matrix per chunk, reused across samples
                let mut col = if k == 1 { Vec::new() } else { uninit_buf::<T>(ck * s) };
                for (j, out_n) in out_chunk.chunks_mut(cout * s).enumerate() {
                    let i = ci * chunk + j;
                    let x_n = &xs[i * cin * s..(i + 1) * cin * s];
                    let col_ptr = if k == 1 {
                        x_n.as_ptr() // pointwise: the input is the column matrix
                    } else {
                        im2col(x_n, &geom, &mut col);
                        col.as_ptr()
                    };
                    unsafe {
                        T::gemm(
                            cout, ck, s,
                            T::ONE,
                            ks.as_ptr(), ck as isize, 1,
                            col_ptr, s as isize, 1,
                            T::ZERO,
                            out_n.as_mut_ptr(), s as isize, 1,
                        );
                    }
                }
            });
    }

    DiffTensor::from_op(
        vec![n, cout, d, h, w],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |adj, parents| {
            let xv = parents[0].values_ref();
            let kv = parents[1].values_ref();
            let xs: &[T] = &xv;
            let ks: &[T] = &kv;

            // dX: spread adj through the transposed kernel, per sample
            let mut dx = if k == 1 {
                uninit_buf::<T>(n * cin * s) // gemm writes every element
            } else {
                vec![T::ZERO; n * cin * s] // col2im scatter-adds
            };
            dx.par_chunks_mut(chunk * cin * s)
                .enumerate()
                .for_each(|(ci, dx_chunk)| {
                    let mut dcol = if k == 1 { Vec::new() } else { uninit_buf::<T>(ck * s) };
                    for (j, dx_n) in dx_chunk.chunks_mut(cin * s).enumerate() {
                        let i = ci * chunk + j;
                        let dout_n = &adj[i * cout * s..(i + 1) * cout * s];
                        if k == 1 {
                            unsafe {
                                T::gemm(
                                    cin, cout, s,
                                    T::ONE,
                                    ks.as_ptr(), 1, cin as isize, // kernel transposed
                                    dout_n.as_ptr(), s as isize, 1,
                                    T::ZERO,
                                    dx_n.as_mut_ptr(), s as isize, 1,
                                );
                            }
                        } else {
                            unsafe {
                                T::gemm(
                                    ck, cout, s,
                                    T::ONE,
                                    ks.as_ptr(), 1, ck as isize,
                                    dout_n.as_ptr(), s as isize, 1,
                                    T::ZERO,
                                    dcol.as_mut_ptr(), s as isize, 1,
                                );
                            }
                            col2im_add(&dcol, &geom, dx_n);
                        }
                    }
                });

            // dK: per-chunk partials summed in fixed order for determinism
            let sample_ids: Vec<usize> = (0..n).collect();
            let partials: Vec<Vec<T>> = sample_ids
                .par_chunks(chunk)
                .map(|samples| {
                    let mut dk = vec![T::ZERO; cout * ck];
                    let mut col = if k == 1 { Vec::new() } else { uninit_buf::<T>(ck * s) };
                    for &i in samples {
                        let x_n = &xs[i * cin * s..(i + 1) * cin * s];
                        let dout_n = &adj[i * cout * s..(i + 1) * cout * s];
                        let col_ptr = if k == 1 {
                            x_n.as_ptr()
                        } else {
                            im2col(x_n, &geom, &mut col);
                            col.as_ptr()
                        };
                        unsafe {
                            T::gemm(
                                cout, s, ck,
                                T::ONE,
                                dout_n.as_ptr(), s as isize, 1,
                                col_ptr, 1, s as isize, // col transposed
                                T::ONE,
                                dk.as_mut_ptr(), ck as isize, 1,
                            );
                        }
                    }
                    dk
                })
                .collect();
            let mut dk = vec![T::ZERO; cout * ck];
            for p in &partials {
                for (a, b) in dk.iter_mut().zip(p.iter()) {
                    *a += *b;
                }
            }
            vec![Some(dx), Some(dk)]
        }),
        "conv3d",
    )
}
