//! Evaluation metrics: masked per-q-sample RMSE, 3D MSSIM, tissue-masked
//! RMSE and DTI/FA absolute error, aggregated into an [`EvalReport`].
//!
//! All metrics operate on raw-scale (de-normalized) signal; the report keeps
//! every per-sample value so the aggregates can be recomputed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dti::{fa, DtiFitter};
use crate::error::{Error, Result};
use crate::qspace::BVector;
use crate::volume::{Mask3, Volume4};

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Per-q-sample root mean squared error over masked voxels.
pub fn rmse_per_sample(
    pred: &Volume4,
    truth: &Volume4,
    mask: Option<&Mask3>,
) -> Result<Vec<f64>> {
    if pred.shape != truth.shape {
        return Err(Error::Shape(format!(
            "rmse: {:?} vs {:?}",
            pred.shape, truth.shape
        )));
    }
    let [nx, ny, nz, nq] = pred.shape;
    if let Some(m) = mask {
        if m.shape != pred.spatial() {
            return Err(Error::Shape(format!(
                "rmse mask {:?} vs volume {:?}",
                m.shape,
                pred.spatial()
            )));
        }
        if m.count() == 0 {
            return Err(Error::InvalidArgument("rmse over an empty mask".into()));
        }
    }
    let mut sums = vec![0.0f64; nq];
    let mut count = 0usize;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if let Some(m) = mask {
                    if !m.at(x, y, z) {
                        continue;
                    }
                }
                count += 1;
                let p = pred.qvec(x, y, z);
                let t = truth.qvec(x, y, z);
                for q in 0..nq {
                    let d = p[q] - t[q];
                    sums[q] += d * d;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| (s / count as f64).sqrt())
        .collect())
}

/// Scalar RMSE over all masked voxels and q samples.
pub fn rmse(pred: &Volume4, truth: &Volume4, mask: Option<&Mask3>) -> Result<f64> {
    let per = rmse_per_sample(pred, truth, mask)?;
    let ms = per.iter().map(|r| r * r).sum::<f64>() / per.len() as f64;
    Ok(ms.sqrt())
}

/// SSIM parameters; defaults follow common practice, scaled for small
/// volumes: a 7³ Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 7,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(opts: &SsimOptions) -> Vec<f64> {
    let w = opts.window;
    let c = (w as f64 - 1.0) / 2.0;
    let mut kernel = Vec::with_capacity(w * w * w);
    for x in 0..w {
        for y in 0..w {
            for z in 0..w {
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                let dz = z as f64 - c;
                kernel.push((-(dx * dx + dy * dy + dz * dz) / (2.0 * opts.sigma * opts.sigma)).exp());
            }
        }
    }
    let total: f64 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= total;
    }
    kernel
}

/// Mean SSIM of one q sample over fully valid 3D sliding windows. The
/// dynamic range comes from the ground truth (max - min); identical inputs
/// score exactly 1.
pub fn mssim_per_sample(
    pred: &Volume4,
    truth: &Volume4,
    opts: &SsimOptions,
) -> Result<Vec<f64>> {
    if pred.shape != truth.shape {
        return Err(Error::Shape(format!(
            "mssim: {:?} vs {:?}",
            pred.shape, truth.shape
        )));
    }
    let [nx, ny, nz, nq] = pred.shape;
    let w = opts.window;
    if nx < w || ny < w || nz < w {
        return Err(Error::InvalidArgument(format!(
            "volume {:?} is smaller than the {w}^3 SSIM window",
            pred.spatial()
        )));
    }
    let kernel = gaussian_window(opts);
    let results: Vec<f64> = (0..nq)
        .into_par_iter()
        .map(|q| {
            // dynamic range of this sample's ground truth
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        let v = truth.at(x, y, z, q);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let range = if hi > lo { hi - lo } else { 1.0 };
            let c1 = (opts.k1 * range) * (opts.k1 * range);
            let c2 = (opts.k2 * range) * (opts.k2 * range);

            let mut total = 0.0f64;
            let mut n_win = 0usize;
            for ox in 0..=(nx - w) {
                for oy in 0..=(ny - w) {
                    for oz in 0..=(nz - w) {
                        let mut mu_p = 0.0;
                        let mut mu_t = 0.0;
                        let mut pp = 0.0;
                        let mut tt = 0.0;
                        let mut pt = 0.0;
                        let mut ki = 0usize;
                        for dx in 0..w {
                            for dy in 0..w {
                                for dz in 0..w {
                                    let kv = kernel[ki];
                                    ki += 1;
                                    let pv = pred.at(ox + dx, oy + dy, oz + dz, q);
                                    let tv = truth.at(ox + dx, oy + dy, oz + dz, q);
                                    mu_p += kv * pv;
                                    mu_t += kv * tv;
                                    pp += kv * pv * pv;
                                    tt += kv * tv * tv;
                                    pt += kv * pv * tv;
                                }
                            }
                        }
                        let var_p = pp - mu_p * mu_p;
                        let var_t = tt - mu_t * mu_t;
                        let cov = pt - mu_p * mu_t;
                        let ssim = ((2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2))
                            / ((mu_p * mu_p + mu_t * mu_t + c1) * (var_p + var_t + c2));
                        total += ssim;
                        n_win += 1;
                    }
                }
            }
            total / n_win as f64
        })
        .collect();
    Ok(results)
}

/// FA evaluation inputs: the full-resolution truth plus the split that
/// produced the prediction.
pub struct FaInputs<'a> {
    /// All shell volumes of the ground truth, raw scale.
    pub truth_full: &'a Volume4,
    /// B-vectors of `truth_full`'s q axis.
    pub bvectors: &'a [BVector],
    /// Shell-local context indices (into `bvectors`).
    pub context_indices: &'a [usize],
    /// Shell-local target indices, in prediction order.
    pub target_indices: &'a [usize],
    pub s0: f64,
}

/// Everything `evaluate` measures. Aggregates are recomputable from the
/// per-sample lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub rmse_per_sample: Vec<f64>,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub mssim_per_sample: Vec<f64>,
    pub mssim_mean: f64,
    pub mssim_sd: f64,
    pub wm_rmse_per_sample: Option<Vec<f64>>,
    pub wm_rmse_mean: Option<f64>,
    pub wm_rmse_sd: Option<f64>,
    pub gm_rmse_per_sample: Option<Vec<f64>>,
    pub gm_rmse_mean: Option<f64>,
    pub gm_rmse_sd: Option<f64>,
    /// Mean |FA(context + predicted) - FA(truth)| over tissue masks.
    pub fa_wm_mean_ae: Option<f64>,
    pub fa_gm_mean_ae: Option<f64>,
    /// Same, for the context-only (no super-resolution) baseline.
    pub fa_context_only_wm_mean_ae: Option<f64>,
    pub fa_context_only_gm_mean_ae: Option<f64>,
}

impl EvalReport {
    /// Paper-style `mean±sd` text block.
    pub fn to_text(&self, label: &str) -> String {
        let mut out = format!(
            "{label}: RMSE {:.4}±{:.4}  MSSIM {:.4}±{:.4}",
            self.rmse_mean, self.rmse_sd, self.mssim_mean, self.mssim_sd
        );
        if let (Some(wm), Some(sd)) = (self.wm_rmse_mean, self.wm_rmse_sd) {
            out.push_str(&format!("  WM-RMSE {wm:.4}±{sd:.4}"));
        }
        if let (Some(gm), Some(sd)) = (self.gm_rmse_mean, self.gm_rmse_sd) {
            out.push_str(&format!("  GM-RMSE {gm:.4}±{sd:.4}"));
        }
        if let Some(fa) = self.fa_wm_mean_ae {
            out.push_str(&format!("  FA-AE-WM {fa:.4}"));
        }
        if let Some(fa) = self.fa_gm_mean_ae {
            out.push_str(&format!("  FA-AE-GM {fa:.4}"));
        }
        out.push('\n');
        out
    }
}

/// Evaluation products: the report plus the per-voxel FA absolute-error map
/// when FA inputs were supplied.
pub struct EvalOutput {
    pub report: EvalReport,
    pub fa_abs_error: Option<Volume4>,
}

/// Masks available to the evaluator; tissue masks are optional and their
/// absence just omits the tissue metrics.
pub struct EvalMasks<'a> {
    pub brain: &'a Mask3,
    pub wm: Option<&'a Mask3>,
    pub gm: Option<&'a Mask3>,
}

/// Computes RMSE/MSSIM per q sample, tissue-masked RMSE when masks are
/// given, and the FA absolute-error map when FA inputs allow.
pub fn evaluate(
    pred: &Volume4,
    truth: &Volume4,
    masks: &EvalMasks<'_>,
    ssim_opts: &SsimOptions,
    fa_inputs: Option<&FaInputs<'_>>,
) -> Result<EvalOutput> {
    let rmse_samples = rmse_per_sample(pred, truth, Some(masks.brain))?;
    let (rmse_mean, rmse_sd) = mean_sd(&rmse_samples);
    let mssim_samples = mssim_per_sample(pred, truth, ssim_opts)?;
    let (mssim_mean, mssim_sd) = mean_sd(&mssim_samples);

    let tissue = |mask: Option<&Mask3>| -> Result<Option<Vec<f64>>> {
        match mask {
            Some(m) if m.count() > 0 => Ok(Some(rmse_per_sample(pred, truth, Some(m))?)),
            _ => Ok(None),
        }
    };
    let wm_samples = tissue(masks.wm)?;
    let gm_samples = tissue(masks.gm)?;
    let (wm_mean, wm_sd) = wm_samples
        .as_ref()
        .map(|s| mean_sd(s))
        .map_or((None, None), |(m, s)| (Some(m), Some(s)));
    let (gm_mean, gm_sd) = gm_samples
        .as_ref()
        .map(|s| mean_sd(s))
        .map_or((None, None), |(m, s)| (Some(m), Some(s)));

    let mut report = EvalReport {
        n_samples: rmse_samples.len(),
        rmse_per_sample: rmse_samples,
        rmse_mean,
        rmse_sd,
        mssim_per_sample: mssim_samples,
        mssim_mean,
        mssim_sd,
        wm_rmse_per_sample: wm_samples,
        wm_rmse_mean: wm_mean,
        wm_rmse_sd: wm_sd,
        gm_rmse_per_sample: gm_samples,
        gm_rmse_mean: gm_mean,
        gm_rmse_sd: gm_sd,
        fa_wm_mean_ae: None,
        fa_gm_mean_ae: None,
        fa_context_only_wm_mean_ae: None,
        fa_context_only_gm_mean_ae: None,
    };

    let fa_map = match fa_inputs {
        Some(inputs) => Some(fa_absolute_error(pred, masks, inputs, &mut report)?),
        None => None,
    };
    Ok(EvalOutput {
        report,
        fa_abs_error: fa_map,
    })
}

/// |FA(context ∪ predicted) − FA(truth)| per masked voxel, plus the
/// context-only baseline FA error.
fn fa_absolute_error(
    pred: &Volume4,
    masks: &EvalMasks<'_>,
    inputs: &FaInputs<'_>,
    report: &mut EvalReport,
) -> Result<Volume4> {
    let truth = inputs.truth_full;
    let [nx, ny, nz, nq] = truth.shape;
    if pred.spatial() != truth.spatial() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.spatial(),
            truth.spatial()
        )));
    }
    if inputs.bvectors.len() != nq {
        return Err(Error::Shape(format!(
            "{} b-vectors for Q = {nq}",
            inputs.bvectors.len()
        )));
    }
    if pred.shape[3] != inputs.target_indices.len() {
        return Err(Error::Shape(format!(
            "prediction has {} q samples but the split names {} targets",
            pred.shape[3],
            inputs.target_indices.len()
        )));
    }

    let full_fitter = DtiFitter::new(inputs.bvectors)?;
    let ctx_bvecs: Vec<BVector> = inputs
        .context_indices
        .iter()
        .map(|&i| inputs.bvectors[i])
        .collect();
    let ctx_fitter = DtiFitter::new(&ctx_bvecs)?;

    let mut map = Volume4::zeros([nx, ny, nz, 1]);
    let mut wm_sum = (0.0f64, 0usize);
    let mut gm_sum = (0.0f64, 0usize);
    let mut wm_ctx = (0.0f64, 0usize);
    let mut gm_ctx = (0.0f64, 0usize);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !masks.brain.at(x, y, z) {
                    continue;
                }
                let tvec = truth.qvec(x, y, z);
                // stitched q vector: truth at context slots, prediction at
                // target slots
                let mut combined = tvec.to_vec();
                let pv = pred.qvec(x, y, z);
                for (k, &t) in inputs.target_indices.iter().enumerate() {
                    combined[t] = pv[k];
                }
                let fa_truth = fa(&full_fitter.fit(tvec, inputs.s0)?);
                let fa_pred = fa(&full_fitter.fit(&combined, inputs.s0)?);
                let err = (fa_pred - fa_truth).abs();
                let idx = map.idx(x, y, z, 0);
                map.data[idx] = err;

                let ctx_signals: Vec<f64> = inputs
                    .context_indices
                    .iter()
                    .map(|&i| tvec[i])
                    .collect();
                let fa_ctx = fa(&ctx_fitter.fit(&ctx_signals, inputs.s0)?);
                let err_ctx = (fa_ctx - fa_truth).abs();

                if let Some(wm) = masks.wm {
                    if wm.at(x, y, z) {
                        wm_sum = (wm_sum.0 + err, wm_sum.1 + 1);
                        wm_ctx = (wm_ctx.0 + err_ctx, wm_ctx.1 + 1);
                    }
                }
                if let Some(gm) = masks.gm {
                    if gm.at(x, y, z) {
                        gm_sum = (gm_sum.0 + err, gm_sum.1 + 1);
                        gm_ctx = (gm_ctx.0 + err_ctx, gm_ctx.1 + 1);
                    }
                }
            }
        }
    }
    if wm_sum.1 > 0 {
        report.fa_wm_mean_ae = Some(wm_sum.0 / wm_sum.1 as f64);
        report.fa_context_only_wm_mean_ae = Some(wm_ctx.0 / wm_ctx.1 as f64);
    }
    if gm_sum.1 > 0 {
        report.fa_gm_mean_ae = Some(gm_sum.0 / gm_sum.1 as f64);
        report.fa_context_only_gm_mean_ae = Some(gm_ctx.0 / gm_ctx.1 as f64);
    }
    Ok(map)
}
