//! Differentiable primitives: elementwise activations, arithmetic,
//! normalization, concatenation, broadcasting, gathering and the MAE loss.
//!
//! Reductions accumulate in f64 regardless of the tensor precision; the
//! result is cast back at the end. Accumulation order is fixed, so forward
//! passes are bit-reproducible.

use std::cell::{Cell, RefCell};

use super::{DiffTensor, Scalar};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(a: &DiffTensor<T>, b: &DiffTensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    same_shape(a, b, "add")?;
    let out: Vec<T> = {
        let av = a.values_ref();
        let bv = b.values_ref();
        av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect()
    };
    DiffTensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|adj, _| vec![Some(adj.to_vec()), Some(adj.to_vec())]),
        "add",
    )
}

/// Elementwise difference.
pub fn sub<T: Scalar>(a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    same_shape(a, b, "sub")?;
    let out: Vec<T> = {
        let av = a.values_ref();
        let bv = b.values_ref();
        av.iter().zip(bv.iter()).map(|(&x, &y)| x - y).collect()
    };
    DiffTensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|adj, _| {
            vec![
                Some(adj.to_vec()),
                Some(adj.iter().map(|&g| -g).collect()),
            ]
        }),
        "sub",
    )
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Scalar>(a: &DiffTensor<T>, b: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    same_shape(a, b, "mul")?;
    let out: Vec<T> = {
        let av = a.values_ref();
        let bv = b.values_ref();
        av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect()
    };
    DiffTensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|adj, parents| {
            let av = parents[0].values_ref();
            let bv = parents[1].values_ref();
            let da: Vec<T> = adj.iter().zip(bv.iter()).map(|(&g, &y)| g * y).collect();
            let db: Vec<T> = adj.iter().zip(av.iter()).map(|(&g, &x)| g * x).collect();
            vec![Some(da), Some(db)]
        }),
        "mul",
    )
}

/// Multiplies every element by a constant.
pub fn scale<T: Scalar>(a: &DiffTensor<T>, c: f64) -> Result<DiffTensor<T>> {
    let cc = T::from_f64(c);
    let out: Vec<T> = a.values_ref().iter().map(|&x| x * cc).collect();
    DiffTensor::from_op(
        a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |adj, _| vec![Some(adj.iter().map(|&g| g * cc).collect())]),
        "scale",
    )
}

/// Sum of a list of same-shape tensors.
pub fn add_n<T: Scalar>(tensors: &[DiffTensor<T>]) -> Result<DiffTensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
    let mut out = first.values();
    for t in &tensors[1..] {
        same_shape(first, t, "add_n")?;
        let tv = t.values_ref();
        for (o, &v) in out.iter_mut().zip(tv.iter()) {
            *o += v;
        }
    }
    let n = tensors.len();
    DiffTensor::from_op(
        first.shape(),
        out,
        tensors.to_vec(),
        Box::new(move |adj, _| (0..n).map(|_| Some(adj.to_vec())).collect()),
        "add_n",
    )
}

/// Sum over all elements, producing a scalar.
pub fn sum_all<T: Scalar>(a: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    let total: f64 = a.values_ref().iter().map(|v| v.to_f64()).sum();
    let n = a.numel();
    DiffTensor::from_op(
        vec![],
        vec![T::from_f64(total)],
        vec![a.clone()],
        Box::new(move |adj, _| vec![Some(vec![adj[0]; n])]),
        "sum_all",
    )
}

fn unary<T: Scalar>(
    a: &DiffTensor<T>,
    op_name: &'static str,
    fwd: impl Fn(T) -> T,
    bwd: impl Fn(T, T) -> T + 'static, // (x, y) -> dy/dx
) -> Result<DiffTensor<T>> {
    let out: Vec<T> = a.values_ref().iter().map(|&x| fwd(x)).collect();
    let saved = out.clone();
    DiffTensor::from_op(
        a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |adj, parents| {
            let xv = parents[0].values_ref();
            let g: Vec<T> = adj
                .iter()
                .zip(xv.iter().zip(saved.iter()))
                .map(|(&g, (&x, &y))| g * bwd(x, y))
                .collect();
            vec![Some(g)]
        }),
        op_name,
    )
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Rectified linear unit; subgradient at 0 is 0.
pub fn relu<T: Scalar>(a: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    unary(
        a,
        "relu",
        |x| if x > T::ZERO { x } else { T::ZERO },
        |x, _| if x > T::ZERO { T::ONE } else { T::ZERO },
    )
}

/// Logistic sigmoid.
pub fn sigmoid<T: Scalar>(a: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    unary(a, "sigmoid", sigmoid_val, |_, y| y * (T::ONE - y))
}

/// Hyperbolic tangent.
pub fn tanh<T: Scalar>(a: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    unary(a, "tanh", |x| x.tanh(), |_, y| T::ONE - y * y)
}

/// Swish: `x * sigmoid(x)`.
pub fn swish<T: Scalar>(a: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    unary(
        a,
        "swish",
        |x| x * sigmoid_val(x),
        |x, _| {
            let s = sigmoid_val(x);
            s + x * s * (T::ONE - s)
        },
    )
}

/// Concatenates along `axis`. All other extents must agree.
pub fn concat<T: Scalar>(tensors: &[DiffTensor<T>], axis: usize) -> Result<DiffTensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::InvalidArgument(format!(
            "concat axis {axis} out of range for rank {}",
            base.len()
        )));
    }
    let mut mids = Vec::with_capacity(tensors.len());
    for t in tensors {
        let s = t.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(base.iter())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::Shape(format!(
                "concat: {:?} incompatible with {:?} along axis {axis}",
                s, base
            )));
        }
        mids.push(s[axis]);
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total_mid: usize = mids.iter().sum();

    let mut out_shape = base.clone();
    out_shape[axis] = total_mid;
    let mut out = vec![T::ZERO; outer * total_mid * inner];
    for o in 0..outer {
        let mut dst_mid = 0usize;
        for (t, &mid) in tensors.iter().zip(mids.iter()) {
            let tv = t.values_ref();
            let src = &tv[o * mid * inner..(o + 1) * mid * inner];
            let dst_start = (o * total_mid + dst_mid) * inner;
            out[dst_start..dst_start + mid * inner].copy_from_slice(src);
            dst_mid += mid;
        }
    }
    let mids_b = mids.clone();
    DiffTensor::from_op(
        out_shape,
        out,
        tensors.to_vec(),
        Box::new(move |adj, parents| {
            let mut grads: Vec<Option<Vec<T>>> = parents
                .iter()
                .map(|p| Some(vec![T::ZERO; p.numel()]))
                .collect();
            for o in 0..outer {
                let mut src_mid = 0usize;
                for (pi, &mid) in mids_b.iter().enumerate() {
                    let g = grads[pi].as_mut().unwrap();
                    let src_start = (o * total_mid + src_mid) * inner;
                    g[o * mid * inner..(o + 1) * mid * inner]
                        .copy_from_slice(&adj[src_start..src_start + mid * inner]);
                    src_mid += mid;
                }
            }
            grads
        }),
        "concat",
    )
}

/// Takes the half-open range `[start, start+len)` along `axis`.
pub fn slice_axis<T: Scalar>(
    a: &DiffTensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<DiffTensor<T>> {
    let shape = a.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::InvalidArgument(format!(
            "slice_axis: range {start}..{} out of bounds for axis {axis} of {:?}",
            start + len,
            shape
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let mut out = vec![T::ZERO; outer * len * inner];
    {
        let av = a.values_ref();
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&av[src..src + len * inner]);
        }
    }
    let parent_numel = a.numel();
    DiffTensor::from_op(
        out_shape,
        out,
        vec![a.clone()],
        Box::new(move |adj, _| {
            let mut g = vec![T::ZERO; parent_numel];
            for o in 0..outer {
                let dst = (o * mid + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&adj[src..src + len * inner]);
            }
            vec![Some(g)]
        }),
        "slice_axis",
    )
}

/// Reinterprets the buffer under a new shape with the same element count.
pub fn reshape<T: Scalar>(a: &DiffTensor<T>, new_shape: &[usize]) -> Result<DiffTensor<T>> {
    let numel: usize = new_shape.iter().product();
    if numel != a.numel() {
        return Err(Error::Shape(format!(
            "reshape {:?} -> {:?} changes element count",
            a.shape(),
            new_shape
        )));
    }
    DiffTensor::from_op(
        new_shape.to_vec(),
        a.values(),
        vec![a.clone()],
        Box::new(|adj, _| vec![Some(adj.to_vec())]),
        "reshape",
    )
}

/// Picks rows (leading-axis slices) by index; indices may repeat, in which
/// case gradients accumulate into the shared source row.
pub fn gather_rows<T: Scalar>(a: &DiffTensor<T>, indices: &[usize]) -> Result<DiffTensor<T>> {
    let shape = a.shape();
    if shape.is_empty() {
        return Err(Error::InvalidArgument("gather_rows on a scalar".into()));
    }
    let rows = shape[0];
    let stride: usize = shape[1..].iter().product();
    for &i in indices {
        if i >= rows {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {i} out of {rows}"
            )));
        }
    }
    let mut out = vec![T::ZERO; indices.len() * stride];
    {
        let av = a.values_ref();
        for (k, &i) in indices.iter().enumerate() {
            out[k * stride..(k + 1) * stride].copy_from_slice(&av[i * stride..(i + 1) * stride]);
        }
    }
    let mut out_shape = shape.clone();
    out_shape[0] = indices.len();
    let idx = indices.to_vec();
    let parent_numel = a.numel();
    DiffTensor::from_op(
        out_shape,
        out,
        vec![a.clone()],
        Box::new(move |adj, _| {
            let mut g = vec![T::ZERO; parent_numel];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..stride {
                    g[i * stride + j] += adj[k * stride + j];
                }
            }
            vec![Some(g)]
        }),
        "gather_rows",
    )
}

/// Repeats a per-sample channel vector `(N, C)` at every voxel of a spatial
/// grid, producing `(N, C, D, H, W)`. The gradient sums over positions.
pub fn broadcast_spatial<T: Scalar>(
    vec: &DiffTensor<T>,
    spatial: (usize, usize, usize),
) -> Result<DiffTensor<T>> {
    let shape = vec.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "broadcast_spatial expects (N, C), got {:?}",
            shape
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let (d, h, w) = spatial;
    let vol = d * h * w;
    let mut out = vec![T::ZERO; n * c * vol];
    {
        let vv = vec.values_ref();
        for i in 0..n {
            for j in 0..c {
                let val = vv[i * c + j];
                let base = (i * c + j) * vol;
                for k in 0..vol {
                    out[base + k] = val;
                }
            }
        }
    }
    DiffTensor::from_op(
        vec![n, c, d, h, w],
        out,
        vec![vec.clone()],
        Box::new(move |adj, _| {
            let mut g = vec![T::ZERO; n * c];
            for i in 0..n {
                for j in 0..c {
                    let base = (i * c + j) * vol;
                    let mut s = 0.0f64;
                    for k in 0..vol {
                        s += adj[base + k].to_f64();
                    }
                    g[i * c + j] = T::from_f64(s);
                }
            }
            vec![Some(g)]
        }),
        "broadcast_spatial",
    )
}

/// Adds a per-channel bias `(C)` to every voxel of `(N, C, D, H, W)`.
pub fn add_channel_bias<T: Scalar>(
    x: &DiffTensor<T>,
    bias: &DiffTensor<T>,
) -> Result<DiffTensor<T>> {
    let shape = x.shape();
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "add_channel_bias expects rank 5, got {:?}",
            shape
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let vol: usize = shape[2..].iter().product();
    if bias.shape() != vec![c] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {c} channels",
            bias.shape()
        )));
    }
    let mut out = x.values();
    {
        let bv = bias.values_ref();
        for i in 0..n {
            for j in 0..c {
                let b = bv[j];
                let base = (i * c + j) * vol;
                for k in 0..vol {
                    out[base + k] += b;
                }
            }
        }
    }
    DiffTensor::from_op(
        shape,
        out,
        vec![x.clone(), bias.clone()],
        Box::new(move |adj, _| {
            let mut gb = vec![T::ZERO; c];
            for i in 0..n {
                for j in 0..c {
                    let base = (i * c + j) * vol;
                    let mut s = 0.0f64;
                    for k in 0..vol {
                        s += adj[base + k].to_f64();
                    }
                    gb[j] += T::from_f64(s);
                }
            }
            vec![Some(adj.to_vec()), Some(gb)]
        }),
        "add_channel_bias",
    )
}

/// Mean absolute error over all elements; subgradient at ties is 0.
pub fn mae_loss<T: Scalar>(pred: &DiffTensor<T>, target: &DiffTensor<T>) -> Result<DiffTensor<T>> {
    same_shape(pred, target, "mae_loss")?;
    let n = pred.numel();
    if n == 0 {
        return Err(Error::InvalidArgument("mae_loss on empty tensors".into()));
    }
    let total: f64 = {
        let pv = pred.values_ref();
        let tv = target.values_ref();
        pv.iter()
            .zip(tv.iter())
            .map(|(&p, &t)| (p - t).abs().to_f64())
            .sum()
    };
    let inv_n = 1.0 / n as f64;
    DiffTensor::from_op(
        vec![],
        vec![T::from_f64(total * inv_n)],
        vec![pred.clone(), target.clone()],
        Box::new(move |adj, parents| {
            let g0 = adj[0];
            let pv = parents[0].values_ref();
            let tv = parents[1].values_ref();
            let scale = T::from_f64(inv_n);
            let dp: Vec<T> = pv
                .iter()
                .zip(tv.iter())
                .map(|(&p, &t)| {
                    let d = p - t;
                    let s = if d > T::ZERO {
                        T::ONE
                    } else if d < T::ZERO {
                        -T::ONE
                    } else {
                        T::ZERO
                    };
                    g0 * s * scale
                })
                .collect();
            let dt: Vec<T> = dp.iter().map(|&g| -g).collect();
            vec![Some(dp), Some(dt)]
        }),
        "mae_loss",
    )
}

/// How a normalization layer sources its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-(sample, channel) statistics over the reduction groups of a rank-5
/// tensor. Shared by instance norm (groups = N*C) and batch norm (groups = C
/// with strided membership).
fn group_normalize<T: Scalar>(
    x: &DiffTensor<T>,
    gain: &DiffTensor<T>,
    bias: &DiffTensor<T>,
    eps: f64,
    // returns the group index of a flat element
    group_of: impl Fn(usize) -> usize + 'static,
    n_groups: usize,
    op_name: &'static str,
) -> Result<DiffTensor<T>> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    if gain.shape() != vec![c] || bias.shape() != vec![c] {
        return Err(Error::Shape(format!(
            "{op_name}: gain/bias must be ({c}), got {:?} and {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let vol: usize = shape[2..].iter().product();
    let numel = x.numel();

    // group statistics in f64
    let mut count = vec![0usize; n_groups];
    let mut mean = vec![0.0f64; n_groups];
    let mut var = vec![0.0f64; n_groups];
    {
        let xv = x.values_ref();
        for (i, v) in xv.iter().enumerate() {
            let g = group_of(i);
            mean[g] += v.to_f64();
            count[g] += 1;
        }
        for g in 0..n_groups {
            mean[g] /= count[g].max(1) as f64;
        }
        for (i, v) in xv.iter().enumerate() {
            let g = group_of(i);
            let d = v.to_f64() - mean[g];
            var[g] += d * d;
        }
        for g in 0..n_groups {
            var[g] /= count[g].max(1) as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::ZERO; numel];
    let mut out = vec![T::ZERO; numel];
    {
        let xv = x.values_ref();
        let gv = gain.values_ref();
        let bv = bias.values_ref();
        for i in 0..numel {
            let g = group_of(i);
            let ch = (i / vol) % c;
            let xh = (xv[i].to_f64() - mean[g]) * inv_std[g];
            xhat[i] = T::from_f64(xh);
            out[i] = T::from_f64(xh * gv[ch].to_f64() + bv[ch].to_f64());
        }
    }

    let group_of_b = group_of;
    let counts: Vec<f64> = count.iter().map(|&k| k as f64).collect();
    let _ = n;
    DiffTensor::from_op(
        shape,
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |adj, parents| {
            let gv = parents[1].values_ref();
            // dgain/dbias per channel, dy sums per group
            let mut dgain = vec![0.0f64; c];
            let mut dbias = vec![0.0f64; c];
            let mut sum_dy = vec![0.0f64; counts.len()];
            let mut sum_dy_xhat = vec![0.0f64; counts.len()];
            for i in 0..adj.len() {
                let grp = group_of_b(i);
                let ch = (i / vol) % c;
                let dy = adj[i].to_f64();
                let xh = xhat[i].to_f64();
                dgain[ch] += dy * xh;
                dbias[ch] += dy;
                let dxh = dy * gv[ch].to_f64();
                sum_dy[grp] += dxh;
                sum_dy_xhat[grp] += dxh * xh;
            }
            let mut dx = vec![T::ZERO; adj.len()];
            for i in 0..adj.len() {
                let grp = group_of_b(i);
                let ch = (i / vol) % c;
                let m = counts[grp];
                let dxh = adj[i].to_f64() * gv[ch].to_f64();
                let xh = xhat[i].to_f64();
                let v = inv_std[grp]
                    * (dxh - sum_dy[grp] / m - xh * sum_dy_xhat[grp] / m);
                dx[i] = T::from_f64(v);
            }
            vec![
                Some(dx),
                Some(dgain.iter().map(|&v| T::from_f64(v)).collect()),
                Some(dbias.iter().map(|&v| T::from_f64(v)).collect()),
            ]
        }),
        op_name,
    )
}

/// Instance normalization: per (sample, channel) spatial statistics.
pub fn instance_norm<T: Scalar>(
    x: &DiffTensor<T>,
    gain: &DiffTensor<T>,
    bias: &DiffTensor<T>,
    eps: f64,
) -> Result<DiffTensor<T>> {
    let shape = x.shape();
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "instance_norm expects (N, C, D, H, W), got {:?}",
            shape
        )));
    }
    let vol: usize = shape[2..].iter().product();
    if vol < 2 {
        return Err(Error::InvalidArgument(
            "instance_norm needs at least 2 spatial voxels".into(),
        ));
    }
    let (_, c) = (shape[0], shape[1]);
    let groups = shape[0] * c;
    group_normalize(
        x,
        gain,
        bias,
        eps,
        move |i| i / vol, // flat (n, c) pair index
        groups,
        "instance_norm",
    )
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug)]
pub struct BatchNormState<T: Scalar> {
    pub running_mean: RefCell<Vec<T>>,
    pub running_var: RefCell<Vec<T>>,
    pub initialized: Cell<bool>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: RefCell::new(vec![T::ZERO; channels]),
            running_var: RefCell::new(vec![T::ONE; channels]),
            initialized: Cell::new(false),
        }
    }
}

/// Batch normalization over (N, D, H, W) per channel. Train mode uses batch
/// statistics and updates the running averages; infer mode replays the
/// stored ones.
pub fn batch_norm<T: Scalar>(
    x: &DiffTensor<T>,
    gain: &DiffTensor<T>,
    bias: &DiffTensor<T>,
    state: &BatchNormState<T>,
    mode: NormMode,
    momentum: f64,
    eps: f64,
) -> Result<DiffTensor<T>> {
    let shape = x.shape();
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "batch_norm expects (N, C, D, H, W), got {:?}",
            shape
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let vol: usize = shape[2..].iter().product();
    if gain.shape() != vec![c] || bias.shape() != vec![c] {
        return Err(Error::Shape(format!(
            "batch_norm: gain/bias must be ({c})",
            )));
    }
    match mode {
        NormMode::Train => {
            if n * vol < 2 {
                return Err(Error::InvalidArgument(
                    "batch_norm training needs at least 2 values per channel".into(),
                ));
            }
            let out = group_normalize(
                x,
                gain,
                bias,
                eps,
                move |i| (i / vol) % c, // channel index
                c,
                "batch_norm",
            )?;
            // recompute batch stats for the running update
            let xv = x.values_ref();
            let m = (n * vol) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for (i, v) in xv.iter().enumerate() {
                mean[(i / vol) % c] += v.to_f64();
            }
            for mv in mean.iter_mut() {
                *mv /= m;
            }
            for (i, v) in xv.iter().enumerate() {
                let ch = (i / vol) % c;
                let d = v.to_f64() - mean[ch];
                var[ch] += d * d;
            }
            for vv in var.iter_mut() {
                *vv /= m;
            }
            {
                let mut rm = state.running_mean.borrow_mut();
                let mut rv = state.running_var.borrow_mut();
                if state.initialized.get() {
                    for ch in 0..c {
                        rm[ch] = T::from_f64(
                            (1.0 - momentum) * rm[ch].to_f64() + momentum * mean[ch],
                        );
                        rv[ch] =
                            T::from_f64((1.0 - momentum) * rv[ch].to_f64() + momentum * var[ch]);
                    }
                } else {
                    for ch in 0..c {
                        rm[ch] = T::from_f64(mean[ch]);
                        rv[ch] = T::from_f64(var[ch]);
                    }
                    state.initialized.set(true);
                }
            }
            Ok(out)
        }
        NormMode::Infer => {
            if !state.initialized.get() {
                return Err(Error::State(
                    "batch_norm inference before any training step initialized running stats"
                        .into(),
                ));
            }
            let rm: Vec<f64> = state.running_mean.borrow().iter().map(|v| v.to_f64()).collect();
            let rv: Vec<f64> = state.running_var.borrow().iter().map(|v| v.to_f64()).collect();
            let inv_std: Vec<f64> = rv.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let numel = x.numel();
            let mut out = vec![T::ZERO; numel];
            {
                let xv = x.values_ref();
                let gv = gain.values_ref();
                let bv = bias.values_ref();
                for i in 0..numel {
                    let ch = (i / vol) % c;
                    out[i] = T::from_f64(
                        (xv[i].to_f64() - rm[ch]) * inv_std[ch] * gv[ch].to_f64()
                            + bv[ch].to_f64(),
                    );
                }
            }
            let inv_std_b = inv_std.clone();
            let rm_b = rm.clone();
            DiffTensor::from_op(
                shape,
                out,
                vec![x.clone(), gain.clone(), bias.clone()],
                Box::new(move |adj, parents| {
                    let xv = parents[0].values_ref();
                    let gv = parents[1].values_ref();
                    let mut dx = vec![T::ZERO; adj.len()];
                    let mut dgain = vec![0.0f64; c];
                    let mut dbias = vec![0.0f64; c];
                    for i in 0..adj.len() {
                        let ch = (i / vol) % c;
                        let dy = adj[i].to_f64();
                        let xh = (xv[i].to_f64() - rm_b[ch]) * inv_std_b[ch];
                        dx[i] = T::from_f64(dy * gv[ch].to_f64() * inv_std_b[ch]);
                        dgain[ch] += dy * xh;
                        dbias[ch] += dy;
                    }
                    vec![
                        Some(dx),
                        Some(dgain.iter().map(|&v| T::from_f64(v)).collect()),
                        Some(dbias.iter().map(|&v| T::from_f64(v)).collect()),
                    ]
                }),
                "batch_norm_infer",
            )
        }
    }
}
