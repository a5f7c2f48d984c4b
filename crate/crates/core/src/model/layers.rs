//! Layer building blocks: convolution units with activation and optional
//! normalization, the parallel multi-kernel block, the 3D ConvLSTM cell, and
//! the q-axis convolution used by the non-recurrent ablation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    add, add_channel_bias, add_n, batch_norm, concat, conv3d, instance_norm, mul, relu, scale,
    sigmoid, slice_axis, swish, tanh, BatchNormState, DiffTensor, NormMode, Scalar,
};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Batch,
}

/// Glorot-uniform weights for a (Cout, Cin, k, k, k) kernel.
pub fn glorot_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<DiffTensor<T>> {
    let fan_in = (cin * k * k * k) as f64;
    let fan_out = (cout * k * k * k) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let n = cout * cin * k * k * k;
    let vals: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    DiffTensor::param(&[cout, cin, k, k, k], vals)
}

pub enum NormUnit<T: Scalar> {
    Instance {
        gain: DiffTensor<T>,
        bias: DiffTensor<T>,
    },
    Batch {
        gain: DiffTensor<T>,
        bias: DiffTensor<T>,
        state: BatchNormState<T>,
    },
}

impl<T: Scalar> NormUnit<T> {
    pub fn new(kind: NormKind, channels: usize) -> Result<Self> {
        let gain = DiffTensor::param(&[channels], vec![T::ONE; channels])?;
        let bias = DiffTensor::param(&[channels], vec![T::ZERO; channels])?;
        Ok(match kind {
            NormKind::Instance => NormUnit::Instance { gain, bias },
            NormKind::Batch => NormUnit::Batch {
                gain,
                bias,
                state: BatchNormState::new(channels),
            },
        })
    }

    pub fn forward(&self, x: &DiffTensor<T>, mode: NormMode) -> Result<DiffTensor<T>> {
        match self {
            NormUnit::Instance { gain, bias } => instance_norm(x, gain, bias, 1e-5),
            NormUnit::Batch { gain, bias, state } => {
                batch_norm(x, gain, bias, state, mode, 0.1, 1e-5)
            }
        }
    }
}

/// conv -> activation -> (optional) normalization, in that order.
pub struct ConvUnit<T: Scalar> {
    pub name: String,
    pub weight: DiffTensor<T>,
    pub bias: DiffTensor<T>,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
    pub norm: Option<NormUnit<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        activation: Activation,
        norm: Option<NormKind>,
    ) -> Result<Self> {
        Ok(ConvUnit {
            name: name.to_string(),
            weight: glorot_conv(rng, cout, cin, kernel)?,
            bias: DiffTensor::param(&[cout], vec![T::ZERO; cout])?,
            kernel,
            in_channels: cin,
            out_channels: cout,
            activation,
            norm: match norm {
                Some(kind) => Some(NormUnit::new(kind, cout)?),
                None => None,
            },
        })
    }

    pub fn forward(&self, x: &DiffTensor<T>, mode: NormMode) -> Result<DiffTensor<T>> {
        let y = conv3d(x, &self.weight)?;
        let y = add_channel_bias(&y, &self.bias)?;
        let y = match self.activation {
            Activation::Swish => swish(&y)?,
            Activation::Relu => relu(&y)?,
            Activation::Linear => y,
        };
        match &self.norm {
            Some(norm) => norm.forward(&y, mode),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.weight.numel() + self.bias.numel();
        if let Some(NormUnit::Instance { gain, bias } | NormUnit::Batch { gain, bias, .. }) =
            &self.norm
        {
            n += gain.numel() + bias.numel();
        }
        n
    }
}

/// Three convolutions with different kernel extents applied to the same
/// input in parallel; their outputs are concatenated channel-wise together
/// with a residual input.
pub struct ParallelBlock<T: Scalar> {
    pub branches: Vec<ConvUnit<T>>,
}

impl<T: Scalar> ParallelBlock<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        widths: [usize; 3],
        kernels: [usize; 3],
        norm: NormKind,
    ) -> Result<Self> {
        // branch index in the name keeps entries unique even when a variant
        // forces every kernel extent to the same value
        let branches = widths
            .iter()
            .zip(kernels.iter())
            .enumerate()
            .map(|(i, (&w, &k))| {
                ConvUnit::new(
                    rng,
                    &format!("{name}.b{i}k{k}"),
                    cin,
                    w,
                    k,
                    Activation::Swish,
                    Some(norm),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParallelBlock { branches })
    }

    pub fn forward(ourself: &Self, x: &DiffTensor<T>, residual: &DiffTensor<T>, mode: NormMode) -> Result<DiffTensor<T>> {
        let mut parts: Vec<DiffTensor<T>> = Vec::with_capacity(4);
        for b in &ourself.branches {
            parts.push(b.forward(x, mode)?);
        }
        parts.push(residual.clone());
        concat(&parts, 1)
    }

    pub fn out_channels(&self, residual_channels: usize) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum::<usize>() + residual_channels
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(|b| b.param_count()).sum()
    }
}

/// ConvLSTM hidden and cell state for one batch of patches.
#[derive(Clone)]
pub struct HiddenState<T: Scalar> {
    pub h: DiffTensor<T>,
    pub c: DiffTensor<T>,
}

/// 3D ConvLSTM cell: the dense connections of a standard LSTM are replaced
/// by same-padded convolutions. Standard gate activations, no peepholes, no
/// normalization. Gate packing order along channels is [i, f, g, o].
pub struct ConvLstm<T: Scalar> {
    pub w_x: DiffTensor<T>,
    pub w_h: DiffTensor<T>,
    pub bias: DiffTensor<T>,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl<T: Scalar> ConvLstm<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        hidden: usize,
        kernel: usize,
    ) -> Result<Self> {
        let w_x = glorot_conv(rng, 4 * hidden, cin, kernel)?;
        let w_h = glorot_conv(rng, 4 * hidden, hidden, kernel)?;
        // forget-gate bias starts at one, the usual LSTM persistence trick
        let mut b = vec![T::ZERO; 4 * hidden];
        for v in b.iter_mut().take(2 * hidden).skip(hidden) {
            *v = T::ONE;
        }
        let bias = DiffTensor::param(&[4 * hidden], b)?;
        Ok(ConvLstm {
            w_x,
            w_h,
            bias,
            in_channels: cin,
            hidden_channels: hidden,
            kernel,
        })
    }

    pub fn zero_state(&self, batch: usize, spatial: (usize, usize, usize)) -> HiddenState<T> {
        let shape = [
            batch,
            self.hidden_channels,
            spatial.0,
            spatial.1,
            spatial.2,
        ];
        HiddenState {
            h: DiffTensor::zeros(&shape),
            c: DiffTensor::zeros(&shape),
        }
    }

    pub fn step(&self, x: &DiffTensor<T>, state: &HiddenState<T>) -> Result<HiddenState<T>> {
        let h = self.hidden_channels;
        let gx = conv3d(x, &self.w_x)?;
        let gx = add_channel_bias(&gx, &self.bias)?;
        let gh = conv3d(&state.h, &self.w_h)?;
        let gates = add(&gx, &gh)?;
        let i = sigmoid(&slice_axis(&gates, 1, 0, h)?)?;
        let f = sigmoid(&slice_axis(&gates, 1, h, h)?)?;
        let g = tanh(&slice_axis(&gates, 1, 2 * h, h)?)?;
        let o = sigmoid(&slice_axis(&gates, 1, 3 * h, h)?)?;
        let c_new = add(&mul(&f, &state.c)?, &mul(&i, &g)?)?;
        let h_new = mul(&o, &tanh(&c_new)?)?;
        Ok(HiddenState { h: h_new, c: c_new })
    }

    pub fn param_count(&self) -> usize {
        self.w_x.numel() + self.w_h.numel() + self.bias.numel()
    }
}

/// Same-padded 1D convolution along the q axis (three pointwise taps),
/// followed by a mean over q. Produces the fixed-size state analogue for the
/// non-recurrent variant.
pub struct QConv<T: Scalar> {
    pub w_prev: DiffTensor<T>,
    pub w_curr: DiffTensor<T>,
    pub w_next: DiffTensor<T>,
    pub bias: DiffTensor<T>,
    pub in_channels: usize,
    pub hidden_channels: usize,
}

impl<T: Scalar> QConv<T> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, hidden: usize) -> Result<Self> {
        Ok(QConv {
            w_prev: glorot_conv(rng, hidden, cin, 1)?,
            w_curr: glorot_conv(rng, hidden, cin, 1)?,
            w_next: glorot_conv(rng, hidden, cin, 1)?,
            bias: DiffTensor::param(&[hidden], vec![T::ZERO; hidden])?,
            in_channels: cin,
            hidden_channels: hidden,
        })
    }

    /// `steps` are the per-q feature maps in sequence order.
    pub fn forward(&self, steps: &[DiffTensor<T>]) -> Result<DiffTensor<T>> {
        let q = steps.len();
        let mut outs: Vec<DiffTensor<T>> = Vec::with_capacity(q);
        for qi in 0..q {
            let mut acc = conv3d(&steps[qi], &self.w_curr)?;
            if qi > 0 {
                acc = add(&acc, &conv3d(&steps[qi - 1], &self.w_prev)?)?;
            }
            if qi + 1 < q {
                acc = add(&acc, &conv3d(&steps[qi + 1], &self.w_next)?)?;
            }
            outs.push(add_channel_bias(&acc, &self.bias)?);
        }
        scale(&add_n(&outs)?, 1.0 / q as f64)
    }

    pub fn param_count(&self) -> usize {
        self.w_prev.numel() + self.w_curr.numel() + self.w_next.numel() + self.bias.numel()
    }
}
