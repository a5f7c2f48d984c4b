//! The intermediate bundle written by `preprocess` and consumed by `train`,
//! `infer`, `baseline-sh` and `eval`: a directory holding the normalized
//! NIfTI volume, the mask, the FSL b-tables, and a TOML record of how the
//! data was scaled.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use qsr_core::error::{Error, Result};
use qsr_core::volume::{load_dataset, save_nifti, DwiDataset};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub denoised: bool,
    /// Divisors applied per shell (keys are b-values as strings).
    pub divisors: BTreeMap<String, f64>,
    pub shell_tolerance: f64,
}

impl BundleMeta {
    pub fn divisor_map(&self) -> Result<BTreeMap<i64, f64>> {
        let mut out = BTreeMap::new();
        for (k, &v) in &self.divisors {
            let key: f64 = k
                .parse()
                .map_err(|_| Error::Config(format!("bundle divisor key '{k}'")))?;
            out.insert(key.round() as i64, v);
        }
        Ok(out)
    }
}

/// Writes `data.nii` (normalized), `mask.nii`, `bvecs`, `bvals` and
/// `bundle.toml` into `dir`.
pub fn save_bundle(dir: &Path, dataset: &DwiDataset, meta: &BundleMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_nifti(&dataset.signal, &dir.join("data.nii"))?;
    save_nifti(&dataset.mask.to_volume(), &dir.join("mask.nii"))?;
    qsr_core::qspace::write_bvecs_bvals(
        &dataset.bvectors,
        &dir.join("bvecs"),
        &dir.join("bvals"),
    )?;
    let text = toml::to_string_pretty(meta)
        .map_err(|e| Error::Config(format!("bundle meta serialize: {e}")))?;
    std::fs::write(dir.join("bundle.toml"), text)?;
    Ok(())
}

/// Loads a bundle directory back into a normalized dataset plus its meta.
pub fn load_bundle(dir: &Path) -> Result<(DwiDataset, BundleMeta)> {
    let meta_text = std::fs::read_to_string(dir.join("bundle.toml")).map_err(|_| {
        Error::Config(format!(
            "{} is not a bundle (missing bundle.toml; run `qsr preprocess` first)",
            dir.display()
        ))
    })?;
    let meta: BundleMeta = toml::from_str(&meta_text)
        .map_err(|e| Error::Config(format!("bundle.toml parse error: {e}")))?;
    let dataset = load_dataset(
        &dir.join("data.nii"),
        &dir.join("bvecs"),
        &dir.join("bvals"),
        &dir.join("mask.nii"),
        meta.shell_tolerance,
    )?;
    Ok((dataset, meta))
}
