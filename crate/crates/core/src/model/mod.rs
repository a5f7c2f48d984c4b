//! The conditional autoencoder: a 3D CNN encoder whose parallel convolution
//! blocks feed a 3D ConvLSTM over q-space samples, and a b-vector-conditioned
//! decoder. Ablation variants swap every spatial kernel to 1x1x1 (rcnn1d) or
//! replace the ConvLSTM with a q-axis convolution plus mean (cnn3d).
//!
//! All convolutional layers except the ConvLSTM treat the q dimension as an
//! extra batch dimension, so parameters are shared across q samples; samples
//! are folded n-major (row of sample n, step q is `n * q_len + q`).

mod layers;

pub use layers::{Activation, ConvLstm, ConvUnit, HiddenState, NormKind, NormUnit, ParallelBlock, QConv};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    broadcast_spatial, concat, gather_rows, reshape, CheckpointEntry, DiffTensor, NormMode,
    Scalar,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// 3D recurrent CNN: full spatial kernels + ConvLSTM.
    Rcnn3d,
    /// Voxelwise ablation: every spatial kernel forced to 1x1x1.
    Rcnn1d,
    /// Non-recurrent ablation: q-axis convolution + mean instead of the
    /// ConvLSTM.
    Cnn3d,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelVariant::Rcnn3d => "rcnn3d",
            ModelVariant::Rcnn1d => "rcnn1d",
            ModelVariant::Cnn3d => "cnn3d",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcnn3d" => Ok(ModelVariant::Rcnn3d),
            "rcnn1d" => Ok(ModelVariant::Rcnn1d),
            "cnn3d" => Ok(ModelVariant::Cnn3d),
            other => Err(Error::Config(format!(
                "unknown model variant '{other}' (expected rcnn3d, rcnn1d or cnn3d)"
            ))),
        }
    }
}

fn norm_kind_default_instance() -> String {
    "instance".into()
}
fn norm_kind_default_batch() -> String {
    "batch".into()
}

/// Architecture hyperparameters. The topology is fixed; channel widths and
/// normalization choices are configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub patch_size: usize,
    /// Width of the first encoder pointwise layer.
    pub enc_pointwise: usize,
    /// Branch widths of both encoder parallel blocks.
    pub enc_branch: [usize; 3],
    /// Widths of the two pointwise layers feeding the ConvLSTM.
    pub enc_tail: [usize; 2],
    /// ConvLSTM hidden channels (also the q-conv output width for cnn3d).
    pub convlstm_hidden_channels: usize,
    /// ConvLSTM kernel extent; must be odd.
    pub convlstm_kernel: usize,
    /// Widths of the two decoder pointwise layers.
    pub dec_pointwise: [usize; 2],
    /// Branch widths of both decoder parallel blocks.
    pub dec_branch: [usize; 3],
    /// Width of the penultimate decoder layer (the last layer emits 1
    /// channel).
    pub dec_head: usize,
    #[serde(default = "norm_kind_default_instance")]
    pub encoder_norm: String,
    #[serde(default = "norm_kind_default_batch")]
    pub decoder_norm: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::Rcnn3d,
            patch_size: 10,
            enc_pointwise: 44,
            enc_branch: [22, 22, 22],
            enc_tail: [44, 44],
            convlstm_hidden_channels: 44,
            convlstm_kernel: 3,
            dec_pointwise: [44, 44],
            dec_branch: [22, 22, 22],
            dec_head: 44,
            encoder_norm: "instance".into(),
            decoder_norm: "batch".into(),
        }
    }
}

fn parse_norm(s: &str) -> Result<NormKind> {
    match s {
        "instance" => Ok(NormKind::Instance),
        "batch" => Ok(NormKind::Batch),
        other => Err(Error::Config(format!(
            "unknown normalization '{other}' (expected instance or batch)"
        ))),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 {
            return Err(Error::Config("patch_size must be at least 3".into()));
        }
        if self.convlstm_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "convlstm_kernel must be odd, got {}",
                self.convlstm_kernel
            )));
        }
        for w in [
            self.enc_pointwise,
            self.enc_tail[0],
            self.enc_tail[1],
            self.convlstm_hidden_channels,
            self.dec_pointwise[0],
            self.dec_pointwise[1],
            self.dec_head,
        ]
        .into_iter()
        .chain(self.enc_branch)
        .chain(self.dec_branch)
        {
            if w == 0 {
                return Err(Error::Config("all channel widths must be positive".into()));
            }
        }
        parse_norm(&self.encoder_norm)?;
        parse_norm(&self.decoder_norm)?;
        Ok(())
    }

    /// Spatial kernel extents after applying the variant rule: rcnn1d forces
    /// every extent to 1.
    fn spatial_kernels(&self) -> [usize; 3] {
        match self.variant {
            ModelVariant::Rcnn1d => [1, 1, 1],
            _ => [1, 2, 3],
        }
    }

    fn head_kernel(&self) -> usize {
        match self.variant {
            ModelVariant::Rcnn1d => 1,
            _ => 3,
        }
    }

    fn lstm_kernel(&self) -> usize {
        match self.variant {
            ModelVariant::Rcnn1d => 1,
            _ => self.convlstm_kernel,
        }
    }
}

/// Builds the q-space tensor: per (sample, q) the signal channel is
/// concatenated with the b-vector broadcast to every voxel, and q is folded
/// into the batch axis (n-major).
pub fn make_qspace_tensor<T: Scalar>(
    patches: &DiffTensor<T>,
    bvecs: &DiffTensor<T>,
) -> Result<DiffTensor<T>> {
    let ps = patches.shape();
    let bs = bvecs.shape();
    if ps.len() != 6 || ps[2] != 1 {
        return Err(Error::Shape(format!(
            "patches must be (N, q, 1, D, H, W), got {ps:?}"
        )));
    }
    if bs.len() != 3 || bs[2] != 3 {
        return Err(Error::Shape(format!(
            "b-vectors must be (N, q, 3), got {bs:?}"
        )));
    }
    if ps[0] != bs[0] || ps[1] != bs[1] {
        return Err(Error::Shape(format!(
            "patches {ps:?} and b-vectors {bs:?} disagree on (N, q)"
        )));
    }
    let (n, q, d, h, w) = (ps[0], ps[1], ps[3], ps[4], ps[5]);
    let sig = reshape(patches, &[n * q, 1, d, h, w])?;
    let vec2 = reshape(bvecs, &[n * q, 3])?;
    let bcast = broadcast_spatial(&vec2, (d, h, w))?;
    concat(&[sig, bcast], 1)
}

enum QMixer<T: Scalar> {
    Lstm(ConvLstm<T>),
    Conv(QConv<T>),
}

/// The full autoencoder with its learnable state.
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    enc_pw: ConvUnit<T>,
    enc_block1: ParallelBlock<T>,
    enc_block2: ParallelBlock<T>,
    enc_tail1: ConvUnit<T>,
    enc_tail2: ConvUnit<T>,
    mixer: QMixer<T>,
    dec_pw1: ConvUnit<T>,
    dec_pw2: ConvUnit<T>,
    dec_block1: ParallelBlock<T>,
    dec_block2: ParallelBlock<T>,
    dec_head1: ConvUnit<T>,
    dec_head2: ConvUnit<T>,
}

const QT_CHANNELS: usize = 4; // 1 signal + 3 b-vector
const BVEC_CHANNELS: usize = 3;

impl<T: Scalar> Model<T> {
    /// Random Glorot initialization, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let kernels = config.spatial_kernels();
        let enc_norm = parse_norm(&config.encoder_norm)?;
        let dec_norm = parse_norm(&config.decoder_norm)?;

        let enc_pw = ConvUnit::new(
            rng,
            "enc_pw",
            QT_CHANNELS,
            config.enc_pointwise,
            1,
            Activation::Swish,
            Some(enc_norm),
        )?;
        let enc_block1 = ParallelBlock::new(
            rng,
            "enc_block1",
            config.enc_pointwise,
            config.enc_branch,
            kernels,
            enc_norm,
        )?;
        let block1_out = enc_block1.out_channels(QT_CHANNELS);
        let enc_block2 = ParallelBlock::new(
            rng,
            "enc_block2",
            block1_out,
            config.enc_branch,
            kernels,
            enc_norm,
        )?;
        let block2_out = enc_block2.out_channels(QT_CHANNELS);
        let enc_tail1 = ConvUnit::new(
            rng,
            "enc_tail1",
            block2_out,
            config.enc_tail[0],
            1,
            Activation::Swish,
            Some(enc_norm),
        )?;
        let enc_tail2 = ConvUnit::new(
            rng,
            "enc_tail2",
            config.enc_tail[0],
            config.enc_tail[1],
            1,
            Activation::Swish,
            Some(enc_norm),
        )?;
        let hidden = config.convlstm_hidden_channels;
        let mixer = match config.variant {
            ModelVariant::Cnn3d => QMixer::Conv(QConv::new(rng, config.enc_tail[1], hidden)?),
            _ => QMixer::Lstm(ConvLstm::new(
                rng,
                config.enc_tail[1],
                hidden,
                config.lstm_kernel(),
            )?),
        };

        let dec_pw1 = ConvUnit::new(
            rng,
            "dec_pw1",
            hidden + BVEC_CHANNELS,
            config.dec_pointwise[0],
            1,
            Activation::Swish,
            Some(dec_norm),
        )?;
        let dec_pw2 = ConvUnit::new(
            rng,
            "dec_pw2",
            config.dec_pointwise[0],
            config.dec_pointwise[1],
            1,
            Activation::Swish,
            Some(dec_norm),
        )?;
        let dec_block1 = ParallelBlock::new(
            rng,
            "dec_block1",
            config.dec_pointwise[1] + BVEC_CHANNELS,
            config.dec_branch,
            kernels,
            dec_norm,
        )?;
        let dblock1_out = dec_block1.out_channels(BVEC_CHANNELS);
        let dec_block2 = ParallelBlock::new(
            rng,
            "dec_block2",
            dblock1_out,
            config.dec_branch,
            kernels,
            dec_norm,
        )?;
        let dblock2_out = dec_block2.out_channels(BVEC_CHANNELS);
        // the final two decoder layers carry no normalization; the last one
        // uses ReLU because the signal is strictly positive
        let dec_head1 = ConvUnit::new(
            rng,
            "dec_head1",
            dblock2_out,
            config.dec_head,
            config.head_kernel(),
            Activation::Swish,
            None,
        )?;
        let dec_head2 = ConvUnit::new(
            rng,
            "dec_head2",
            config.dec_head,
            1,
            1,
            Activation::Relu,
            None,
        )?;

        Ok(Model {
            config,
            enc_pw,
            enc_block1,
            enc_block2,
            enc_tail1,
            enc_tail2,
            mixer,
            dec_pw1,
            dec_pw2,
            dec_block1,
            dec_block2,
            dec_head1,
            dec_head2,
        })
    }

    /// The shared convolution stack applied to a folded (N*q) batch.
    fn encoder_stack(&self, qt: &DiffTensor<T>, mode: NormMode) -> Result<DiffTensor<T>> {
        let x = self.enc_pw.forward(qt, mode)?;
        let x = ParallelBlock::forward(&self.enc_block1, &x, qt, mode)?;
        let x = ParallelBlock::forward(&self.enc_block2, &x, qt, mode)?;
        let x = self.enc_tail1.forward(&x, mode)?;
        self.enc_tail2.forward(&x, mode)
    }

    /// Encodes a context set into the latent q-space state. Conv layers see
    /// all q samples as one folded batch; the recurrent mixer consumes them
    /// sequentially in the given order.
    pub fn encode(
        &self,
        patches: &DiffTensor<T>,
        bvecs: &DiffTensor<T>,
        mode: NormMode,
    ) -> Result<HiddenState<T>> {
        let ps = patches.shape();
        if ps.len() != 6 {
            return Err(Error::Shape(format!(
                "encode expects (N, q, 1, D, H, W), got {ps:?}"
            )));
        }
        let (n, q) = (ps[0], ps[1]);
        if q == 0 {
            return Err(Error::InvalidArgument("encode needs q_in >= 1".into()));
        }
        let spatial = (ps[3], ps[4], ps[5]);
        let qt = make_qspace_tensor(patches, bvecs)?;
        let feats = self.encoder_stack(&qt, mode)?;

        // per-step rows of the n-major fold
        let step_rows = |qi: usize| -> Vec<usize> { (0..n).map(|s| s * q + qi).collect() };
        match &self.mixer {
            QMixer::Lstm(lstm) => {
                let mut state = lstm.zero_state(n, spatial);
                for qi in 0..q {
                    let x_t = gather_rows(&feats, &step_rows(qi))?;
                    state = lstm.step(&x_t, &state)?;
                }
                Ok(state)
            }
            QMixer::Conv(qconv) => {
                let steps: Vec<DiffTensor<T>> = (0..q)
                    .map(|qi| gather_rows(&feats, &step_rows(qi)))
                    .collect::<Result<Vec<_>>>()?;
                let h = qconv.forward(&steps)?;
                let c = DiffTensor::zeros(&h.shape());
                Ok(HiddenState { h, c })
            }
        }
    }

    /// Decodes the latent state at target b-vectors. Each target is
    /// processed independently with shared weights; the final ReLU keeps
    /// outputs non-negative.
    pub fn decode(
        &self,
        state: &HiddenState<T>,
        target_bvecs: &DiffTensor<T>,
        mode: NormMode,
    ) -> Result<DiffTensor<T>> {
        let hs = state.h.shape();
        if hs.len() != 5 {
            return Err(Error::Shape(format!(
                "hidden state must be (N, C, D, H, W), got {hs:?}"
            )));
        }
        if hs[1] != self.config.convlstm_hidden_channels {
            return Err(Error::Shape(format!(
                "hidden state has {} channels, model expects {}",
                hs[1], self.config.convlstm_hidden_channels
            )));
        }
        let bs = target_bvecs.shape();
        if bs.len() != 3 || bs[2] != 3 || bs[0] != hs[0] {
            return Err(Error::Shape(format!(
                "target b-vectors must be ({}, q_out, 3), got {bs:?}",
                hs[0]
            )));
        }
        let (n, q_out) = (bs[0], bs[1]);
        let (d, h, w) = (hs[2], hs[3], hs[4]);

        // repeat the hidden state q_out times, n-major
        let mut rep_idx = Vec::with_capacity(n * q_out);
        for s in 0..n {
            for _ in 0..q_out {
                rep_idx.push(s);
            }
        }
        let h_rep = gather_rows(&state.h, &rep_idx)?;
        let tb = reshape(target_bvecs, &[n * q_out, 3])?;
        let tb_b = broadcast_spatial(&tb, (d, h, w))?;

        let x = concat(&[h_rep, tb_b.clone()], 1)?;
        let x = self.dec_pw1.forward(&x, mode)?;
        let x = self.dec_pw2.forward(&x, mode)?;
        let x = concat(&[x, tb_b.clone()], 1)?;
        let x = ParallelBlock::forward(&self.dec_block1, &x, &tb_b, mode)?;
        let x = ParallelBlock::forward(&self.dec_block2, &x, &tb_b, mode)?;
        let x = self.dec_head1.forward(&x, mode)?;
        let x = self.dec_head2.forward(&x, mode)?;
        reshape(&x, &[n, q_out, 1, d, h, w])
    }

    /// encode + decode in one call.
    pub fn forward(
        &self,
        context_patches: &DiffTensor<T>,
        context_bvecs: &DiffTensor<T>,
        target_bvecs: &DiffTensor<T>,
        mode: NormMode,
    ) -> Result<DiffTensor<T>> {
        let state = self.encode(context_patches, context_bvecs, mode)?;
        self.decode(&state, target_bvecs, mode)
    }

    fn conv_units(&self) -> Vec<&ConvUnit<T>> {
        let mut units: Vec<&ConvUnit<T>> = vec![&self.enc_pw];
        units.extend(self.enc_block1.branches.iter());
        units.extend(self.enc_block2.branches.iter());
        units.push(&self.enc_tail1);
        units.push(&self.enc_tail2);
        units.push(&self.dec_pw1);
        units.push(&self.dec_pw2);
        units.extend(self.dec_block1.branches.iter());
        units.extend(self.dec_block2.branches.iter());
        units.push(&self.dec_head1);
        units.push(&self.dec_head2);
        units
    }

    /// Learnable tensors in a fixed order (checkpoint and optimizer order).
    pub fn parameters(&self) -> Vec<DiffTensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_parameters(&self) -> Vec<(String, DiffTensor<T>)> {
        fn push_unit<T: Scalar>(out: &mut Vec<(String, DiffTensor<T>)>, u: &ConvUnit<T>) {
            out.push((format!("{}.weight", u.name), u.weight.clone()));
            out.push((format!("{}.bias", u.name), u.bias.clone()));
            match &u.norm {
                Some(layers::NormUnit::Instance { gain, bias })
                | Some(layers::NormUnit::Batch { gain, bias, .. }) => {
                    out.push((format!("{}.norm.gain", u.name), gain.clone()));
                    out.push((format!("{}.norm.bias", u.name), bias.clone()));
                }
                None => {}
            }
        }
        let mut out: Vec<(String, DiffTensor<T>)> = Vec::new();
        push_unit(&mut out, &self.enc_pw);
        for b in &self.enc_block1.branches {
            push_unit(&mut out, b);
        }
        for b in &self.enc_block2.branches {
            push_unit(&mut out, b);
        }
        push_unit(&mut out, &self.enc_tail1);
        push_unit(&mut out, &self.enc_tail2);
        match &self.mixer {
            QMixer::Lstm(l) => {
                out.push(("convlstm.w_x".into(), l.w_x.clone()));
                out.push(("convlstm.w_h".into(), l.w_h.clone()));
                out.push(("convlstm.bias".into(), l.bias.clone()));
            }
            QMixer::Conv(qc) => {
                out.push(("qconv.w_prev".into(), qc.w_prev.clone()));
                out.push(("qconv.w_curr".into(), qc.w_curr.clone()));
                out.push(("qconv.w_next".into(), qc.w_next.clone()));
                out.push(("qconv.bias".into(), qc.bias.clone()));
            }
        }
        push_unit(&mut out, &self.dec_pw1);
        push_unit(&mut out, &self.dec_pw2);
        for b in &self.dec_block1.branches {
            push_unit(&mut out, b);
        }
        for b in &self.dec_block2.branches {
            push_unit(&mut out, b);
        }
        push_unit(&mut out, &self.dec_head1);
        push_unit(&mut out, &self.dec_head2);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Everything a checkpoint must carry to reproduce the model, including
    /// batch-norm running statistics (suffixed `.running_*`) and their
    /// initialization flags.
    pub fn checkpoint_entries(&self) -> Result<Vec<CheckpointEntry>> {
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, _) in self.named_parameters() {
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!(
                    "duplicate parameter name '{name}'"
                )));
            }
        }
        for (name, t) in self.named_parameters() {
            let values: Vec<f32> = t.values().iter().map(|v| v.to_f64() as f32).collect();
            entries.push(CheckpointEntry::new(name, t.shape(), values)?);
        }
        for u in self.conv_units() {
            if let Some(layers::NormUnit::Batch { state, .. }) = &u.norm {
                let rm: Vec<f32> = state
                    .running_mean
                    .borrow()
                    .iter()
                    .map(|v| v.to_f64() as f32)
                    .collect();
                let rv: Vec<f32> = state
                    .running_var
                    .borrow()
                    .iter()
                    .map(|v| v.to_f64() as f32)
                    .collect();
                let n = rm.len();
                entries.push(CheckpointEntry::new(
                    format!("{}.norm.running_mean", u.name),
                    vec![n],
                    rm,
                )?);
                entries.push(CheckpointEntry::new(
                    format!("{}.norm.running_var", u.name),
                    vec![n],
                    rv,
                )?);
                entries.push(CheckpointEntry::new(
                    format!("{}.norm.initialized", u.name),
                    vec![1],
                    vec![state.initialized.get() as u8 as f32],
                )?);
            }
        }
        Ok(entries)
    }

    /// Restores parameters and normalization state from checkpoint entries.
    /// Name or shape mismatches are checkpoint errors.
    pub fn load_checkpoint_entries(&self, entries: &[CheckpointEntry]) -> Result<()> {
        let mut expected = self.checkpoint_entries()?;
        if expected.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} entries, model expects {}",
                entries.len(),
                expected.len()
            )));
        }
        for (exp, got) in expected.iter_mut().zip(entries.iter()) {
            if exp.name != got.name || exp.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "checkpoint entry '{}' {:?} does not match model entry '{}' {:?}",
                    got.name, got.shape, exp.name, exp.shape
                )));
            }
        }
        for (name, t) in self.named_parameters() {
            let e = entries.iter().find(|e| e.name == name).unwrap();
            t.set_values(e.values.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        }
        for u in self.conv_units() {
            if let Some(layers::NormUnit::Batch { state, .. }) = &u.norm {
                let rm = entries
                    .iter()
                    .find(|e| e.name == format!("{}.norm.running_mean", u.name))
                    .unwrap();
                let rv = entries
                    .iter()
                    .find(|e| e.name == format!("{}.norm.running_var", u.name))
                    .unwrap();
                let init = entries
                    .iter()
                    .find(|e| e.name == format!("{}.norm.initialized", u.name))
                    .unwrap();
                *state.running_mean.borrow_mut() =
                    rm.values.iter().map(|&v| T::from_f64(v as f64)).collect();
                *state.running_var.borrow_mut() =
                    rv.values.iter().map(|&v| T::from_f64(v as f64)).collect();
                state.initialized.set(init.values[0] != 0.0);
            }
        }
        Ok(())
    }

    /// One line per layer: name, kernel, channel flow, parameter count.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "variant: {}  patch: {}^3  parameters: {}\n",
            self.config.variant,
            self.config.patch_size,
            self.param_count()
        ));
        out.push_str(&format!(
            "{:<16} {:>6} {:>12} {:>10}\n",
            "layer", "kernel", "channels", "params"
        ));
        for u in self.conv_units() {
            out.push_str(&format!(
                "{:<16} {:>6} {:>12} {:>10}\n",
                u.name,
                format!("{0}x{0}x{0}", u.kernel),
                format!("{}->{}", u.in_channels, u.out_channels),
                u.param_count()
            ));
        }
        match &self.mixer {
            QMixer::Lstm(l) => out.push_str(&format!(
                "{:<16} {:>6} {:>12} {:>10}\n",
                "convlstm",
                format!("{0}x{0}x{0}", l.kernel),
                format!("{}->{}", l.in_channels, l.hidden_channels),
                l.param_count()
            )),
            QMixer::Conv(q) => out.push_str(&format!(
                "{:<16} {:>6} {:>12} {:>10}\n",
                "qconv",
                "3(q)",
                format!("{}->{}", q.in_channels, q.hidden_channels),
                q.param_count()
            )),
        }
        out
    }
}
