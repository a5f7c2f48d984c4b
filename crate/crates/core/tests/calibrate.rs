//! Temporary calibration probe (removed before release).

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

#[test]
#[ignore]
fn probe_trend_training() {
    let sigma = {
        let clean = phantom::generate(&PhantomSpec {
            dims: [20, 20, 20],
            shells: vec![ShellSpec { bvalue: 1000.0, n_directions: 90 }],
            seed: 900,
            ..Default::default()
        })
        .unwrap();
        let [nx, ny, nz, nq] = clean.clean.shape;
        let mut sum = 0.0;
        let mut n = 0usize;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if clean.dataset.mask.at(x, y, z) {
                        for q in 0..nq {
                            sum += clean.clean.at(x, y, z, q);
                            n += 1;
                        }
                    }
                }
            }
        }
        sum / n as f64 / 15.0
    };
    eprintln!("sigma = {sigma:.2}");
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
    let split6 = qspace::shuffle_and_split(&shell, 6, 84, 4242).unwrap();

    // SH baseline
    let t0 = Instant::now();
    let sh_pred = trainer::sh_baseline_volume(
        &eval_out.dataset.signal,
        &shell,
        &eval_out.dataset.mask,
        &split6,
        2,
        &Default::default(),
    )
    .unwrap();
    let truth = eval_out.dataset.signal.select_q(&split6.target_indices).unwrap();
    let per = rmse_per_sample(&sh_pred, &truth, Some(&eval_out.dataset.mask)).unwrap();
    let sh6 = per.iter().sum::<f64>() / per.len() as f64;
    eprintln!("SH q6: RMSE {sh6:.2} in {:?}", t0.elapsed());

    // rcnn3d short training probes
    let model_cfg = ModelConfig {
        variant: ModelVariant::Rcnn3d,
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
    };
    for epochs in [10usize, 40, 80] {
        let cfg = TrainRunConfig {
            epochs,
            q_in: 6,
            q_out: 84,
            batch_size: 2,
            data_seed: 7,
            model_seed: 21,
            val_cadence: 10,
            ..Default::default()
        };
        let t0 = Instant::now();
        let result =
            trainer::train::<f32>(&model_cfg, &[shell_data(&train_out)], &[shell_data(&val_out)], &cfg)
                .unwrap();
        let train_time = t0.elapsed();
        let model: Model<f32> = Model::new(model_cfg.clone(), 0).unwrap();
        model.load_checkpoint_entries(&result.checkpoint).unwrap();
        let pred =
            trainer::infer_volume(&model, &shell_data(&eval_out), &split6, 4000.0, 2).unwrap();
        let per = rmse_per_sample(&pred, &truth, Some(&eval_out.dataset.mask)).unwrap();
        let r = per.iter().sum::<f64>() / per.len() as f64;
        eprintln!(
            "rcnn3d q6 epochs={epochs}: train {train_time:?} ({:?}/epoch), best val {:.5} @ {}, eval RMSE {r:.2}",
            train_time / epochs as u32,
            result.best_val_loss,
            result.best_epoch,
        );
    }
}
