//! Temporary calibration probe #2 (removed before release).

use qsr_core::model::{Model, ModelConfig, ModelVariant};
use qsr_core::phantom::{self, NoiseModel, PhantomSpec, ShellSpec};
use qsr_core::qspace;
use qsr_core::trainer::{self, rmse_per_sample, ShellData, TrainRunConfig};
use qsr_core::volume::{extract_patches, normalize_shells};
use std::collections::BTreeMap;
use std::time::Instant;

fn divisors() -> BTreeMap<i64, f64> {
    let mut d = BTreeMap::new();
    d.insert(1000i64, 4000.0);
    d
}

fn shell_data(out: &phantom::PhantomOutput) -> ShellData {
    let norm = normalize_shells(&out.dataset, &divisors(), 100.0).unwrap();
    ShellData::new(extract_patches(&norm, 1000, 10).unwrap()).unwrap()
}

fn model_cfg(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        patch_size: 10,
        enc_pointwise: 6,
        enc_branch: [3, 3, 3],
        enc_tail: [6, 6],
        convlstm_hidden_channels: 6,
        convlstm_kernel: 3,
        dec_pointwise: [6, 6],
        dec_branch: [3, 3, 3],
        dec_head: 6,
        ..Default::default()
    }
}

#[test]
#[ignore]
fn probe_variants() {
    let sigma = 128.62;
    let spec = |seed| PhantomSpec {
        dims: [20, 20, 20],
        shells: vec![ShellSpec { bvalue: 1000.0, n_directions: 90 }],
        seed,
        noise: NoiseModel::Rician { sigma },
        ..Default::default()
    };
    let train_out = phantom::generate(&spec(901)).unwrap();
    let val_out = phantom::generate(&spec(902)).unwrap();
    let eval_out = phantom::generate(&spec(903)).unwrap();
    let shell = qsr_core::qspace::QSpaceShell::new(
        eval_out.dataset.shell_bvectors(1000).unwrap(),
        1000.0,
        100.0,
    )
    .unwrap();

    let run = |variant: ModelVariant, q_in: usize, q_out: usize, epochs: usize| {
        let split = qspace::shuffle_and_split(&shell, q_in, q_out, 4242).unwrap();
        let truth = eval_out.dataset.signal.select_q(&split.target_indices).unwrap();
        let cfg = TrainRunConfig {
            epochs,
            q_in,
            q_out,
            batch_size: 2,
            data_seed: 7,
            model_seed: 21,
            val_cadence: 10,
            ..Default::default()
        };
        let mc = model_cfg(variant);
        let t0 = Instant::now();
        let result = trainer::train::<f32>(
            &mc,
            &[shell_data(&train_out)],
            &[shell_data(&val_out)],
            &cfg,
        )
        .unwrap();
        let dt = t0.elapsed();
        let model: Model<f32> = Model::new(mc, 0).unwrap();
        model.load_checkpoint_entries(&result.checkpoint).unwrap();
        let pred = trainer::infer_volume(&model, &shell_data(&eval_out), &split, 4000.0, 2).unwrap();
        let per = rmse_per_sample(&pred, &truth, Some(&eval_out.dataset.mask)).unwrap();
        let r = per.iter().sum::<f64>() / per.len() as f64;
        eprintln!(
            "{variant:?} q{q_in}/{q_out} x{epochs}ep: RMSE {r:.2}  ({dt:?}, {:?}/ep, best val {:.5}@{})",
            dt / epochs as u32,
            result.best_val_loss,
            result.best_epoch
        );
        r
    };

    // SH references
    for (q_in, q_out) in [(6usize, 84usize), (10, 80), (30, 60)] {
        let split = qspace::shuffle_and_split(&shell, q_in, q_out, 4242).unwrap();
        let truth = eval_out.dataset.signal.select_q(&split.target_indices).unwrap();
        let sh_pred = trainer::sh_baseline_volume(
            &eval_out.dataset.signal,
            &shell,
            &eval_out.dataset.mask,
            &split,
            2,
            &Default::default(),
        )
        .unwrap();
        let per = rmse_per_sample(&sh_pred, &truth, Some(&eval_out.dataset.mask)).unwrap();
        eprintln!(
            "SH q{q_in}/{q_out}: RMSE {:.2}",
            per.iter().sum::<f64>() / per.len() as f64
        );
    }

    run(ModelVariant::Rcnn1d, 6, 84, 120);
    run(ModelVariant::Rcnn3d, 6, 84, 120);
    run(ModelVariant::Rcnn3d, 30, 60, 40);
    run(ModelVariant::Rcnn3d, 10, 80, 80);
    run(ModelVariant::Cnn3d, 10, 80, 80);
}
