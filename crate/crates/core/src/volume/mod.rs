//! Dataset ingestion, shell normalization, denoising, masking, and patch
//! extraction/reassembly.

mod nifti;

pub use nifti::{load_nifti, save_nifti};

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::qspace::BVector;

/// Dense (X, Y, Z, Q) array, Q fastest in memory. Values are held in f64
/// in memory; the NIfTI interchange format stores float32.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Volume4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "volume shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Volume4 { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Volume4 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize, q: usize) -> usize {
        ((x * self.shape[1] + y) * self.shape[2] + z) * self.shape[3] + q
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize, q: usize) -> f64 {
        self.data[self.idx(x, y, z, q)]
    }

    /// The Q-vector at one voxel, contiguous in memory.
    pub fn qvec(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let base = self.idx(x, y, z, 0);
        &self.data[base..base + self.shape[3]]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[0], self.shape[1], self.shape[2]]
    }

    /// New volume containing only the listed q columns, in the given order.
    pub fn select_q(&self, q_indices: &[usize]) -> Result<Volume4> {
        let q_all = self.shape[3];
        for &q in q_indices {
            if q >= q_all {
                return Err(Error::InvalidArgument(format!(
                    "q index {q} out of {q_all}"
                )));
            }
        }
        let [nx, ny, nz, _] = self.shape;
        let qn = q_indices.len();
        let mut out = Volume4::zeros([nx, ny, nz, qn]);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let src = self.qvec(x, y, z);
                    let base = out.idx(x, y, z, 0);
                    for (k, &q) in q_indices.iter().enumerate() {
                        out.data[base + k] = src[q];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Binary 3D mask, same spatial order as [`Volume4`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl Mask3 {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "mask shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Mask3 { shape, data })
    }

    pub fn full(shape: [usize; 3]) -> Self {
        Mask3 {
            shape,
            data: vec![1; shape.iter().product()],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(x * self.shape[1] + y) * self.shape[2] + z] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Thresholds a float volume (first q column) at 0.5.
    pub fn from_volume(vol: &Volume4) -> Self {
        let [nx, ny, nz, _] = vol.shape;
        let mut data = vec![0u8; nx * ny * nz];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data[(x * ny + y) * nz + z] = (vol.at(x, y, z, 0) > 0.5) as u8;
                }
            }
        }
        Mask3 {
            shape: [nx, ny, nz],
            data,
        }
    }

    pub fn to_volume(&self) -> Volume4 {
        let [nx, ny, nz] = self.shape;
        Volume4 {
            shape: [nx, ny, nz, 1],
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// One ingested 4D acquisition: signal, per-volume b-vectors, the shell
/// grouping of the q axis, and a brain mask.
#[derive(Debug, Clone)]
pub struct DwiDataset {
    pub signal: Volume4,
    pub bvectors: Vec<BVector>,
    /// Nominal shell b-value (rounded) -> q indices, grouped within tolerance.
    pub shells: BTreeMap<i64, Vec<usize>>,
    pub b0_indices: Vec<usize>,
    pub mask: Mask3,
}

impl DwiDataset {
    pub fn new(
        signal: Volume4,
        bvectors: Vec<BVector>,
        mask: Mask3,
        shell_tolerance: f64,
    ) -> Result<Self> {
        if signal.shape[3] != bvectors.len() {
            return Err(Error::Shape(format!(
                "signal has {} q volumes but {} b-vectors",
                signal.shape[3],
                bvectors.len()
            )));
        }
        if signal.spatial() != mask.shape {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match signal {:?}",
                mask.shape,
                signal.spatial()
            )));
        }
        if signal.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal contains NaN/Inf".into()));
        }
        let mut shells: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        let mut b0_indices = Vec::new();
        for (q, bv) in bvectors.iter().enumerate() {
            if bv.bvalue == 0.0 {
                b0_indices.push(q);
                continue;
            }
            let nominal = shells
                .keys()
                .copied()
                .find(|&k| (k as f64 - bv.bvalue).abs() <= shell_tolerance);
            match nominal {
                Some(k) => shells.get_mut(&k).unwrap().push(q),
                None => {
                    shells.insert(bv.bvalue.round() as i64, vec![q]);
                }
            }
        }
        Ok(DwiDataset {
            signal,
            bvectors,
            shells,
            b0_indices,
            mask,
        })
    }

    /// b-vectors of one shell, in q-axis order.
    pub fn shell_bvectors(&self, shell: i64) -> Result<Vec<BVector>> {
        let idx = self
            .shells
            .get(&shell)
            .ok_or_else(|| Error::InvalidArgument(format!("no shell b={shell}")))?;
        Ok(idx.iter().map(|&q| self.bvectors[q]).collect())
    }

    /// 95th percentile of masked signal, the normalization sanity statistic.
    pub fn masked_p95(&self) -> f64 {
        let mut vals: Vec<f64> = Vec::new();
        let [nx, ny, nz, nq] = self.signal.shape;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if self.mask.at(x, y, z) {
                        for q in 0..nq {
                            vals.push(self.signal.at(x, y, z, q));
                        }
                    }
                }
            }
        }
        if vals.is_empty() {
            return 0.0;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[((vals.len() - 1) as f64 * 0.95) as usize]
    }
}

/// Finds the divisor for a shell nominal, tolerating small b-value offsets.
fn divisor_for(divisors: &BTreeMap<i64, f64>, shell: i64, tolerance: f64) -> Option<f64> {
    divisors
        .iter()
        .find(|(&k, _)| (k - shell).abs() as f64 <= tolerance)
        .map(|(_, &v)| v)
}

/// Divides each voxel by its shell's divisor. b=0 volumes are left as-is
/// (they are not model inputs). Warns when the normalized distribution is
/// off-scale.
pub fn normalize_shells(
    dataset: &DwiDataset,
    divisors: &BTreeMap<i64, f64>,
    tolerance: f64,
) -> Result<DwiDataset> {
    scale_shells(dataset, divisors, tolerance, true)
}

/// Inverse of [`normalize_shells`]: multiplies each shell back to raw scale.
pub fn denormalize_shells(
    dataset: &DwiDataset,
    divisors: &BTreeMap<i64, f64>,
    tolerance: f64,
) -> Result<DwiDataset> {
    scale_shells(dataset, divisors, tolerance, false)
}

fn scale_shells(
    dataset: &DwiDataset,
    divisors: &BTreeMap<i64, f64>,
    tolerance: f64,
    forward: bool,
) -> Result<DwiDataset> {
    let mut per_q: Vec<f64> = vec![1.0; dataset.signal.shape[3]];
    for (&shell, q_idx) in &dataset.shells {
        let div = divisor_for(divisors, shell, tolerance).ok_or_else(|| {
            Error::Config(format!("no normalization divisor for shell b={shell}"))
        })?;
        if div <= 0.0 {
            return Err(Error::Config(format!(
                "divisor for shell b={shell} must be positive, got {div}"
            )));
        }
        for &q in q_idx {
            per_q[q] = if forward { 1.0 / div } else { div };
        }
    }
    let mut out = dataset.clone();
    let nq = out.signal.shape[3];
    for (i, v) in out.signal.data.iter_mut().enumerate() {
        *v *= per_q[i % nq];
    }
    if forward {
        let p95 = out.masked_p95();
        if p95 > 1.5 {
            log::warn!(
                "normalized 95th percentile is {p95:.3}; expected the bulk of the distribution in [0, 1]"
            );
        }
    }
    Ok(out)
}

/// Scale factor applied to a given q index by normalization (1/divisor), or
/// 1.0 for b=0 volumes. Used to de-normalize model outputs.
pub fn q_scale_factors(
    dataset: &DwiDataset,
    divisors: &BTreeMap<i64, f64>,
    tolerance: f64,
) -> Result<Vec<f64>> {
    let mut per_q: Vec<f64> = vec![1.0; dataset.signal.shape[3]];
    for (&shell, q_idx) in &dataset.shells {
        let div = divisor_for(divisors, shell, tolerance).ok_or_else(|| {
            Error::Config(format!("no normalization divisor for shell b={shell}"))
        })?;
        for &q in q_idx {
            per_q[q] = div;
        }
    }
    Ok(per_q)
}

/// Self-supervised denoiser: each volume's masked voxels are replaced by the
/// OLS prediction from the corresponding voxels of every other volume
/// (radius-0 regressors, intercept included). Voxels outside the mask pass
/// through unchanged.
pub fn denoise_p2s(dataset: &DwiDataset) -> Result<DwiDataset> {
    let nq = dataset.signal.shape[3];
    if nq < 10 {
        return Err(Error::InvalidArgument(format!(
            "patch2self needs at least 10 volumes as regressors, got {nq}; \
             denoising can be skipped via configuration"
        )));
    }
    let [nx, ny, nz, _] = dataset.signal.shape;
    let mut voxels: Vec<usize> = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if dataset.mask.at(x, y, z) {
                    voxels.push(dataset.signal.idx(x, y, z, 0));
                }
            }
        }
    }
    if voxels.is_empty() {
        return Err(Error::InvalidArgument("empty mask".into()));
    }

    // Gram matrix over [volumes | intercept] in one pass; each leave-one-out
    // regression then reads a submatrix.
    let dim = nq + 1;
    let mut gram = Mat::zeros(dim, dim);
    for &base in &voxels {
        let row = &dataset.signal.data[base..base + nq];
        for i in 0..nq {
            let vi = row[i];
            for j in i..nq {
                *gram.at_mut(i, j) += vi * row[j];
            }
            *gram.at_mut(i, nq) += vi;
        }
    }
    *gram.at_mut(nq, nq) = voxels.len() as f64;
    for i in 0..dim {
        for j in 0..i {
            *gram.at_mut(i, j) = gram.at(j, i);
        }
    }

    // tiny ridge keeps exactly collinear volumes solvable; the prediction it
    // produces still reproduces linear combinations to ~1e-10 relative
    let mean_diag: f64 = (0..dim).map(|i| gram.at(i, i)).sum::<f64>() / dim as f64;
    let ridge = 1e-10 * mean_diag.max(1e-30);

    let mut out = dataset.clone();
    for target in 0..nq {
        // regressors: all volumes except `target`, plus the intercept
        let keep: Vec<usize> = (0..dim).filter(|&i| i != target).collect();
        let k = keep.len();
        let mut sub = Mat::zeros(k, k);
        let mut rhs = vec![0.0f64; k];
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                *sub.at_mut(a, b) = gram.at(i, j);
            }
            *sub.at_mut(a, a) += ridge;
            rhs[a] = gram.at(i, target);
        }
        let beta = crate::linalg::solve(&sub, &rhs)?;
        for &base in &voxels {
            let row = &dataset.signal.data[base..base + nq];
            let mut pred = 0.0f64;
            for (a, &i) in keep.iter().enumerate() {
                let xi = if i == nq { 1.0 } else { row[i] };
                pred += beta[a] * xi;
            }
            out.signal.data[base + target] = pred;
        }
    }
    Ok(out)
}

/// One spatial patch with its origin in the padded grid.
#[derive(Debug, Clone)]
pub struct Patch {
    /// (P, P, P, Q) values, Q fastest.
    pub data: Vec<f64>,
    pub origin: [usize; 3],
}

/// Non-overlapping patches of one shell's volumes plus the bookkeeping for
/// exact reassembly.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub patch_size: usize,
    /// Zero-padding added at the high end of each axis.
    pub pad_amounts: [usize; 3],
    pub padded_dims: [usize; 3],
    pub orig_dims: [usize; 3],
    /// Global q indices the patch columns came from.
    pub q_indices: Vec<usize>,
    /// The shell's b-vectors, in patch column order.
    pub q_metadata: Vec<BVector>,
    pub shell_bvalue: i64,
}

impl PatchSet {
    pub fn q_len(&self) -> usize {
        self.q_indices.len()
    }
}

/// Tiles one shell of the dataset into `patch_size`³ patches on a stride
/// grid of the zero-padded volume, discarding patches that never touch the
/// brain mask.
pub fn extract_patches(dataset: &DwiDataset, shell: i64, patch_size: usize) -> Result<PatchSet> {
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch_size must be positive".into()));
    }
    let q_indices = dataset
        .shells
        .get(&shell)
        .ok_or_else(|| Error::InvalidArgument(format!("no shell b={shell} in dataset")))?
        .clone();
    let q_metadata: Vec<BVector> = q_indices.iter().map(|&q| dataset.bvectors[q]).collect();
    let [nx, ny, nz, _] = dataset.signal.shape;
    let pad = |n: usize| (patch_size - n % patch_size) % patch_size;
    let pad_amounts = [pad(nx), pad(ny), pad(nz)];
    let padded = [nx + pad_amounts[0], ny + pad_amounts[1], nz + pad_amounts[2]];
    let qn = q_indices.len();

    let mut patches = Vec::new();
    for px in (0..padded[0]).step_by(patch_size) {
        for py in (0..padded[1]).step_by(patch_size) {
            for pz in (0..padded[2]).step_by(patch_size) {
                let mut any_brain = false;
                let mut data = vec![0f64; patch_size * patch_size * patch_size * qn];
                for lx in 0..patch_size {
                    let gx = px + lx;
                    for ly in 0..patch_size {
                        let gy = py + ly;
                        for lz in 0..patch_size {
                            let gz = pz + lz;
                            if gx >= nx || gy >= ny || gz >= nz {
                                continue; // padded voxel stays zero
                            }
                            if dataset.mask.at(gx, gy, gz) {
                                any_brain = true;
                            }
                            let src = dataset.signal.qvec(gx, gy, gz);
                            let dst = ((lx * patch_size + ly) * patch_size + lz) * qn;
                            for (k, &q) in q_indices.iter().enumerate() {
                                data[dst + k] = src[q];
                            }
                        }
                    }
                }
                if any_brain {
                    patches.push(Patch {
                        data,
                        origin: [px, py, pz],
                    });
                }
            }
        }
    }
    Ok(PatchSet {
        patches,
        patch_size,
        pad_amounts,
        padded_dims: padded,
        orig_dims: [nx, ny, nz],
        q_indices,
        q_metadata,
        shell_bvalue: shell,
    })
}

/// Places predicted patches back at their origins and crops the padding.
/// Voxels belonging to discarded patches are zero. The q extent is inferred
/// from the predicted patch length.
pub fn reassemble(patchset: &PatchSet, predicted: &[Vec<f64>]) -> Result<Volume4> {
    if predicted.len() != patchset.patches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted patches for {} origins",
            predicted.len(),
            patchset.patches.len()
        )));
    }
    let p = patchset.patch_size;
    let vol = p * p * p;
    let qn = if predicted.is_empty() {
        patchset.q_len()
    } else {
        if predicted[0].len() % vol != 0 {
            return Err(Error::Shape(format!(
                "predicted patch length {} is not a multiple of {vol}",
                predicted[0].len()
            )));
        }
        predicted[0].len() / vol
    };
    let [nx, ny, nz] = patchset.orig_dims;
    let mut out = Volume4::zeros([nx, ny, nz, qn]);
    for (patch, pred) in patchset.patches.iter().zip(predicted.iter()) {
        if pred.len() != vol * qn {
            return Err(Error::Shape(format!(
                "predicted patch has {} values, expected {}",
                pred.len(),
                vol * qn
            )));
        }
        let [px, py, pz] = patch.origin;
        for lx in 0..p {
            let gx = px + lx;
            if gx >= nx {
                continue;
            }
            for ly in 0..p {
                let gy = py + ly;
                if gy >= ny {
                    continue;
                }
                for lz in 0..p {
                    let gz = pz + lz;
                    if gz >= nz {
                        continue;
                    }
                    let src = ((lx * p + ly) * p + lz) * qn;
                    let dst = out.idx(gx, gy, gz, 0);
                    out.data[dst..dst + qn].copy_from_slice(&pred[src..src + qn]);
                }
            }
        }
    }
    Ok(out)
}

/// Loads the four ingestion files (data, bvecs, bvals, mask) into a dataset.
pub fn load_dataset(
    data_path: &Path,
    bvecs_path: &Path,
    bvals_path: &Path,
    mask_path: &Path,
    shell_tolerance: f64,
) -> Result<DwiDataset> {
    let signal = load_nifti(data_path)?;
    let dirs = crate::qspace::read_bvecs(bvecs_path)?;
    let bvals = crate::qspace::read_bvals(bvals_path)?;
    if dirs.len() != bvals.len() {
        return Err(Error::Format(format!(
            "bvecs has {} entries, bvals has {}",
            dirs.len(),
            bvals.len()
        )));
    }
    let bvectors: Vec<BVector> = dirs
        .iter()
        .zip(bvals.iter())
        .map(|(&d, &b)| BVector::new(d, b))
        .collect::<Result<Vec<_>>>()?;
    let mask = Mask3::from_volume(&load_nifti(mask_path)?);
    DwiDataset::new(signal, bvectors, mask, shell_tolerance)
}
