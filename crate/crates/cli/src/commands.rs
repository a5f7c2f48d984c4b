//! Subcommand implementations over the library pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qsr_core::autodiff::{read_checkpoint, write_checkpoint};
use qsr_core::config::RunConfig;
use qsr_core::error::{Error, Result};
use qsr_core::model::Model;
use qsr_core::phantom;
use qsr_core::qspace::{self, ContextTargetSplit, QSpaceShell};
use qsr_core::trainer::{
    self, evaluate, EvalMasks, FaInputs, ShellData, TrainResult,
};
use qsr_core::volume::{
    denormalize_shells, denoise_p2s, extract_patches, load_dataset, load_nifti, normalize_shells,
    save_nifti, DwiDataset, Mask3, Volume4,
};

use crate::bundle::{load_bundle, save_bundle, BundleMeta};

/// The split that produced a prediction, stored next to it so `eval` can
/// find the matching ground-truth volumes. Indices are shell-local.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub shell: i64,
    pub q_in: usize,
    pub q_out: usize,
    pub split_seed: u64,
    pub context_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

pub fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let result = phantom::generate(&cfg.phantom)?;
    save_nifti(&result.dataset.signal, &out.join("data.nii"))?;
    save_nifti(&result.clean, &out.join("truth.nii"))?;
    save_nifti(&result.dataset.mask.to_volume(), &out.join("mask.nii"))?;
    save_nifti(&result.wm_mask.to_volume(), &out.join("wm_mask.nii"))?;
    save_nifti(&result.gm_mask.to_volume(), &out.join("gm_mask.nii"))?;
    qspace::write_bvecs_bvals(
        &result.dataset.bvectors,
        &out.join("bvecs"),
        &out.join("bvals"),
    )?;
    let spec_text = toml::to_string_pretty(&cfg.phantom)
        .map_err(|e| Error::Config(format!("phantom spec serialize: {e}")))?;
    std::fs::write(out.join("phantom.toml"), spec_text)?;
    println!(
        "phantom: {}x{}x{} voxels, {} q volumes, {} masked -> {}",
        cfg.phantom.dims[0],
        cfg.phantom.dims[1],
        cfg.phantom.dims[2],
        result.dataset.signal.shape[3],
        result.dataset.mask.count(),
        out.display()
    );
    Ok(())
}

pub fn cmd_preprocess(cfg: &RunConfig, denoise: bool, out: &Path) -> Result<()> {
    let ds = load_dataset(
        Path::new(&cfg.dataset.data),
        Path::new(&cfg.dataset.bvecs),
        Path::new(&cfg.dataset.bvals),
        Path::new(&cfg.dataset.mask),
        cfg.dataset.shell_tolerance,
    )?;
    let ds = if denoise { denoise_p2s(&ds)? } else { ds };
    let divisors = cfg.preprocess.divisor_map()?;
    let normalized = normalize_shells(&ds, &divisors, cfg.dataset.shell_tolerance)?;
    let meta = BundleMeta {
        denoised: denoise,
        divisors: cfg.preprocess.divisors.clone(),
        shell_tolerance: cfg.dataset.shell_tolerance,
    };
    save_bundle(out, &normalized, &meta)?;
    println!(
        "preprocess: {} shells, denoised={}, p95={:.4} -> {}",
        normalized.shells.len(),
        denoise,
        normalized.masked_p95(),
        out.display()
    );
    Ok(())
}

fn shell_sets(dirs: &[PathBuf], shells: &[i64], patch_size: usize) -> Result<Vec<ShellData>> {
    let mut sets = Vec::new();
    for dir in dirs {
        let (ds, _meta) = load_bundle(dir)?;
        for &shell in shells {
            if !ds.shells.contains_key(&shell) {
                return Err(Error::Config(format!(
                    "{}: no shell b={shell} (present: {:?})",
                    dir.display(),
                    ds.shells.keys().collect::<Vec<_>>()
                )));
            }
            let patches = extract_patches(&ds, shell, patch_size)?;
            sets.push(ShellData::new(patches)?);
        }
    }
    Ok(sets)
}

pub fn cmd_train(
    cfg: &RunConfig,
    train_dirs: &[PathBuf],
    val_dirs: &[PathBuf],
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let train_sets = shell_sets(train_dirs, &cfg.train.shells, cfg.model.patch_size)?;
    let val_sets = shell_sets(val_dirs, &cfg.train.shells, cfg.model.patch_size)?;
    let result: TrainResult = trainer::train::<f32>(&cfg.model, &train_sets, &val_sets, &cfg.train)?;

    write_checkpoint(&out.join("checkpoint.bin"), &result.checkpoint)?;
    let mut history = String::from("epoch,train_loss,val_loss\n");
    for rec in &result.history {
        history.push_str(&format!(
            "{},{},{}\n",
            rec.epoch, rec.train_loss, rec.val_loss
        ));
    }
    std::fs::write(out.join("history.csv"), history)?;
    cfg.save(&out.join("config.toml"))?;
    println!(
        "train: best epoch {} (val {:.6}) over {} epochs -> {}",
        result.best_epoch,
        result.best_val_loss,
        result.history.len(),
        out.display()
    );
    Ok(())
}

fn shell_geometry(ds: &DwiDataset, shell: i64) -> Result<QSpaceShell> {
    QSpaceShell::new(ds.shell_bvectors(shell)?, shell as f64, 100.0)
}

fn draw_split(cfg: &RunConfig, shell: &QSpaceShell) -> Result<ContextTargetSplit> {
    qspace::shuffle_and_split_with(
        shell,
        cfg.train.q_in,
        cfg.train.q_out,
        cfg.infer.split_seed,
        cfg.train.selection_strategy,
    )
}

fn write_prediction(
    out: &Path,
    cfg: &RunConfig,
    shell: &QSpaceShell,
    split: &ContextTargetSplit,
    pred: &Volume4,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    save_nifti(pred, &out.join("pred.nii"))?;
    let record = SplitRecord {
        shell: cfg.infer.shell,
        q_in: split.context_indices.len(),
        q_out: split.target_indices.len(),
        split_seed: cfg.infer.split_seed,
        context_indices: split.context_indices.clone(),
        target_indices: split.target_indices.clone(),
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Config(format!("split serialize: {e}")))?;
    std::fs::write(out.join("split.json"), json)?;
    let target_bvecs: Vec<qsr_core::qspace::BVector> = split
        .target_indices
        .iter()
        .map(|&i| shell.bvectors()[i])
        .collect();
    qspace::write_bvecs_bvals(
        &target_bvecs,
        &out.join("target_bvecs"),
        &out.join("target_bvals"),
    )?;
    Ok(())
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    bundle_dir: &Path,
    out: &Path,
) -> Result<()> {
    let model: Model<f32> = Model::new(cfg.model.clone(), 0)?;
    let entries = read_checkpoint(checkpoint)?;
    model.load_checkpoint_entries(&entries)?;

    let (ds, meta) = load_bundle(bundle_dir)?;
    let shell = cfg.infer.shell;
    let patches = extract_patches(&ds, shell, cfg.model.patch_size)?;
    let data = ShellData::new(patches)?;
    let split = draw_split(cfg, &data.shell)?;
    let divisor = *meta
        .divisor_map()?
        .get(&shell)
        .ok_or_else(|| Error::Config(format!("bundle has no divisor for shell b={shell}")))?;
    let pred = trainer::infer_volume(&model, &data, &split, divisor, cfg.infer.batch_size)?;
    write_prediction(out, cfg, &data.shell, &split, &pred)?;
    println!(
        "infer: shell b={shell}, q_in={} -> q_out={} -> {}",
        split.context_indices.len(),
        split.target_indices.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_baseline_sh(cfg: &RunConfig, bundle_dir: &Path, out: &Path) -> Result<()> {
    let (ds, meta) = load_bundle(bundle_dir)?;
    let shell = cfg.infer.shell;
    let raw = denormalize_shells(&ds, &meta.divisor_map()?, meta.shell_tolerance)?;
    let geometry = shell_geometry(&raw, shell)?;
    let q_indices = raw.shells.get(&shell).unwrap().clone();
    let shell_signal = raw.signal.select_q(&q_indices)?;
    let split = draw_split(cfg, &geometry)?;
    let pred = trainer::sh_baseline_volume(
        &shell_signal,
        &geometry,
        &raw.mask,
        &split,
        cfg.sh.l_max,
        &cfg.sh.fit_options(&format!("shell b={shell}")),
    )?;
    write_prediction(out, cfg, &geometry, &split, &pred)?;
    println!(
        "baseline-sh: shell b={shell}, l_max={}, q_in={} -> q_out={} -> {}",
        cfg.sh.l_max,
        split.context_indices.len(),
        split.target_indices.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &RunConfig,
    pred_dirs: &[PathBuf],
    bundle_dir: &Path,
    wm_path: Option<&Path>,
    gm_path: Option<&Path>,
    s0: Option<f64>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (ds, meta) = load_bundle(bundle_dir)?;
    let mut raw = denormalize_shells(&ds, &meta.divisor_map()?, meta.shell_tolerance)?;
    // predictions arrive as float32 files; compare the truth at the same
    // interchange precision
    for v in raw.signal.data.iter_mut() {
        *v = *v as f32 as f64;
    }
    let wm = wm_path.map(load_nifti).transpose()?.map(|v| Mask3::from_volume(&v));
    let gm = gm_path.map(load_nifti).transpose()?.map(|v| Mask3::from_volume(&v));

    // s0 for the DTI fit: explicit flag, or the masked mean of b=0 volumes
    let s0 = s0.or_else(|| {
        if raw.b0_indices.is_empty() {
            return None;
        }
        let [nx, ny, nz, _] = raw.signal.shape;
        let mut sum = 0.0;
        let mut n = 0usize;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if raw.mask.at(x, y, z) {
                        for &q in &raw.b0_indices {
                            sum += raw.signal.at(x, y, z, q);
                            n += 1;
                        }
                    }
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    });

    let mut table = String::from("model  RMSE(mean±sd)  MSSIM(mean±sd)\n");
    for pred_dir in pred_dirs {
        let label = pred_dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| pred_dir.display().to_string());
        let record_text = std::fs::read_to_string(pred_dir.join("split.json"))?;
        let record: SplitRecord = serde_json::from_str(&record_text)
            .map_err(|e| Error::Format(format!("split.json: {e}")))?;
        let pred = load_nifti(&pred_dir.join("pred.nii"))?;

        let shell_q = raw
            .shells
            .get(&record.shell)
            .ok_or_else(|| Error::Config(format!("bundle has no shell b={}", record.shell)))?;
        let global_targets: Vec<usize> =
            record.target_indices.iter().map(|&i| shell_q[i]).collect();
        let truth = raw.signal.select_q(&global_targets)?;
        let truth_full = raw.signal.select_q(shell_q)?;
        let shell_bvecs = raw.shell_bvectors(record.shell)?;

        let fa_inputs = s0.map(|s0| FaInputs {
            truth_full: &truth_full,
            bvectors: &shell_bvecs,
            context_indices: &record.context_indices,
            target_indices: &record.target_indices,
            s0,
        });
        let masks = EvalMasks {
            brain: &raw.mask,
            wm: wm.as_ref(),
            gm: gm.as_ref(),
        };
        let result = evaluate(&pred, &truth, &masks, &cfg.ssim, fa_inputs.as_ref())?;
        let json = serde_json::to_string_pretty(&result.report)
            .map_err(|e| Error::Config(format!("report serialize: {e}")))?;
        std::fs::write(out.join(format!("report_{label}.json")), json)?;
        if let Some(map) = &result.fa_abs_error {
            save_nifti(map, &out.join(format!("fa_ae_{label}.nii")))?;
        }
        table.push_str(&format!(
            "{label}  {:.4}±{:.4}  {:.4}±{:.4}\n",
            result.report.rmse_mean,
            result.report.rmse_sd,
            result.report.mssim_mean,
            result.report.mssim_sd
        ));
        print!("{}", result.report.to_text(&label));
    }
    std::fs::write(out.join("table.txt"), &table)?;
    Ok(())
}

pub fn cmd_describe(cfg: &RunConfig) -> Result<()> {
    let model: Model<f32> = Model::new(cfg.model.clone(), 0)?;
    print!("{}", model.describe());
    Ok(())
}

pub fn cmd_config_defaults() -> Result<()> {
    print!("{}", RunConfig::default().to_toml()?);
    Ok(())
}
