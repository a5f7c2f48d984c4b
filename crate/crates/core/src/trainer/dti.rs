//! Log-linear diffusion tensor fit and fractional anisotropy.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::qspace::BVector;

/// Symmetric 3x3 diffusion tensor.
pub type Tensor3 = [[f64; 3]; 3];

/// Precomputed least-squares operator for one direction set, reusable across
/// voxels: `D_vec = P * (-log(S / s0))`.
pub struct DtiFitter {
    design_pinv: Mat, // 6 x Q
    n_dirs: usize,
    /// Relative floor applied to non-positive signals before the log.
    pub signal_floor: f64,
}

impl DtiFitter {
    pub fn new(bvectors: &[BVector]) -> Result<Self> {
        let q = bvectors.len();
        if q < 6 {
            return Err(Error::InvalidArgument(format!(
                "DTI fit needs at least 6 directions, got {q}"
            )));
        }
        let mut rows = Vec::with_capacity(q);
        for bv in bvectors {
            if bv.bvalue <= 0.0 {
                return Err(Error::InvalidArgument(
                    "DTI design rows require b > 0 volumes".into(),
                ));
            }
            let [gx, gy, gz] = bv.direction;
            let b = bv.bvalue;
            rows.push(vec![
                b * gx * gx,
                b * gy * gy,
                b * gz * gz,
                2.0 * b * gx * gy,
                2.0 * b * gx * gz,
                2.0 * b * gy * gz,
            ]);
        }
        let design = Mat::from_rows(&rows);
        let gram = design.gram();
        let cond = linalg::spd_condition_number(&gram)?;
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::IllConditioned {
                cond,
                cap: 1e12,
                context: "DTI design matrix (collinear directions?)".into(),
            });
        }
        // P = (X^T X)^{-1} X^T, built column by column
        let mut pinv = Mat::zeros(6, q);
        for col in 0..q {
            let mut e = vec![0.0; q];
            e[col] = 1.0;
            let rhs = design.tr_mul_vec(&e);
            let x = linalg::solve(&gram, &rhs)?;
            for r in 0..6 {
                *pinv.at_mut(r, col) = x[r];
            }
        }
        Ok(DtiFitter {
            design_pinv: pinv,
            n_dirs: q,
            signal_floor: 1e-6,
        })
    }

    /// Fits one voxel's signals. Non-positive signals are clamped at
    /// `signal_floor * s0` with a warning.
    pub fn fit(&self, signals: &[f64], s0: f64) -> Result<Tensor3> {
        if signals.len() != self.n_dirs {
            return Err(Error::Shape(format!(
                "{} signals for a {}-direction DTI fit",
                signals.len(),
                self.n_dirs
            )));
        }
        if s0 <= 0.0 {
            return Err(Error::InvalidArgument("s0 must be positive".into()));
        }
        let floor = self.signal_floor * s0;
        let mut clamped = 0usize;
        let y: Vec<f64> = signals
            .iter()
            .map(|&s| {
                let s = if s <= floor {
                    clamped += 1;
                    floor
                } else {
                    s
                };
                -(s / s0).ln()
            })
            .collect();
        if clamped > 0 {
            log::warn!("DTI fit clamped {clamped} non-positive signals at {floor:.3e}");
        }
        let d = self.design_pinv.mul_vec(&y);
        Ok([
            [d[0], d[3], d[4]],
            [d[3], d[1], d[5]],
            [d[4], d[5], d[2]],
        ])
    }
}

/// One-shot tensor fit; prefer [`DtiFitter`] when fitting many voxels with
/// the same direction set.
pub fn fit_dti(signals: &[f64], bvectors: &[BVector], s0: f64) -> Result<Tensor3> {
    DtiFitter::new(bvectors)?.fit(signals, s0)
}

/// Fractional anisotropy, `sqrt(3/2) ||D - (tr D / 3) I||_F / ||D||_F`,
/// clamped into [0, 1]. The zero tensor maps to 0.
pub fn fa(tensor: &Tensor3) -> f64 {
    let mut norm_sq = 0.0;
    for row in tensor {
        for v in row {
            norm_sq += v * v;
        }
    }
    if norm_sq == 0.0 {
        return 0.0;
    }
    let mean_diag = (tensor[0][0] + tensor[1][1] + tensor[2][2]) / 3.0;
    let mut dev_sq = 0.0;
    for (i, row) in tensor.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let d = if i == j { v - mean_diag } else { *v };
            dev_sq += d * d;
        }
    }
    ((1.5 * dev_sq / norm_sq).sqrt()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::fibonacci_directions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bvecs_from(dirs: &[[f64; 3]], b: f64) -> Vec<BVector> {
        dirs.iter().map(|&d| BVector::new(d, b).unwrap()).collect()
    }

    #[test]
    fn fit_round_trips_a_known_tensor() {
        let dirs = fibonacci_directions(30, 4).unwrap();
        let bvecs = bvecs_from(&dirs, 1000.0);
        let d_true = [
            [1.5e-3, 0.2e-3, 0.1e-3],
            [0.2e-3, 0.8e-3, 0.05e-3],
            [0.1e-3, 0.05e-3, 0.4e-3],
        ];
        let s0 = 4000.0;
        let signals: Vec<f64> = bvecs
            .iter()
            .map(|bv| {
                let g = bv.direction;
                let mut q = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        q += g[i] * d_true[i][j] * g[j];
                    }
                }
                s0 * (-bv.bvalue * q).exp()
            })
            .collect();
        let d_fit = fit_dti(&signals, &bvecs, s0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (d_fit[i][j] - d_true[i][j]).abs() <= 1e-8 * (1.0 + d_true[i][j].abs()),
                    "D[{i}][{j}]: {} vs {}",
                    d_fit[i][j],
                    d_true[i][j]
                );
            }
        }
    }

    #[test]
    fn isotropic_signals_give_a_scaled_identity() {
        let dirs = fibonacci_directions(20, 9).unwrap();
        let bvecs = bvecs_from(&dirs, 1000.0);
        let lambda = 0.8e-3;
        let s0 = 1000.0;
        let signals: Vec<f64> = bvecs
            .iter()
            .map(|bv| s0 * (-bv.bvalue * lambda).exp())
            .collect();
        let d = fit_dti(&signals, &bvecs, s0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { lambda } else { 0.0 };
                assert!((d[i][j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_few_directions_is_an_error() {
        let dirs = fibonacci_directions(5, 1).unwrap();
        let bvecs = bvecs_from(&dirs, 1000.0);
        assert!(fit_dti(&[1.0; 5], &bvecs, 1.0).is_err());
    }

    #[test]
    fn collinear_directions_are_rejected() {
        let bvecs: Vec<BVector> = (0..8)
            .map(|_| BVector::new([1.0, 0.0, 0.0], 1000.0).unwrap())
            .collect();
        assert!(matches!(
            DtiFitter::new(&bvecs),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn fa_closed_forms() {
        let iso = [[0.7, 0.0, 0.0], [0.0, 0.7, 0.0], [0.0, 0.0, 0.7]];
        assert!(fa(&iso) < 1e-12);

        let stick = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!((fa(&stick) - 1.0).abs() < 1e-12);

        let d211 = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let want = 1.0 / 6.0f64.sqrt();
        assert!((fa(&d211) - want).abs() < 1e-12);
        assert!((want - 0.4082).abs() < 1e-4);

        let zero = [[0.0; 3]; 3];
        assert_eq!(fa(&zero), 0.0);
    }

    #[test]
    fn fa_is_scale_invariant_over_random_spd_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            // random SPD tensor via A^T A + eps I
            let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut d = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        d[i][j] += a[k * 3 + i] * a[k * 3 + j];
                    }
                }
                d[i][i] += 1e-3;
            }
            let alpha = rng.gen_range(0.1..10.0);
            let scaled = {
                let mut s = d;
                for row in s.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= alpha;
                    }
                }
                s
            };
            assert!((fa(&d) - fa(&scaled)).abs() < 1e-12);
        }
    }

    #[test]
    fn crossing_fibers_have_lower_fa_than_single_fibers() {
        // phantom invariant, via the DTI fit on clean signal
        let dirs = fibonacci_directions(60, 2).unwrap();
        let bvecs = bvecs_from(&dirs, 1000.0);
        let s0 = 4000.0;
        let single = |d: [f64; 3]| {
            let mut t = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    t[i][j] = (1.7e-3 - 0.3e-3) * d[i] * d[j];
                }
                t[i][i] += 0.3e-3;
            }
            t
        };
        let pops_single = vec![(1.0, single([1.0, 0.0, 0.0]))];
        let pops_crossing = vec![
            (0.5, single([1.0, 0.0, 0.0])),
            (0.5, single([0.0, 1.0, 0.0])),
        ];
        let fit = DtiFitter::new(&bvecs).unwrap();
        let signal = |pops: &Vec<(f64, Tensor3)>| -> Vec<f64> {
            bvecs
                .iter()
                .map(|bv| crate::phantom::multi_tensor_signal(pops, s0, bv.bvalue, bv.direction))
                .collect()
        };
        let fa_single = fa(&fit.fit(&signal(&pops_single), s0).unwrap());
        let fa_cross = fa(&fit.fit(&signal(&pops_crossing), s0).unwrap());
        assert!(
            fa_cross < fa_single,
            "crossing {fa_cross} should be below single {fa_single}"
        );
    }
}
