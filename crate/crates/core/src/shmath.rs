//! Modified real spherical-harmonic basis, least-squares fitting, and the
//! SH interpolation baseline.
//!
//! The basis keeps even orders only (the diffusion signal is antipodally
//! symmetric) and realifies the standard complex harmonics: `sqrt(2) Im` for
//! negative m, `Y_l^0` for m = 0, `sqrt(2) Re` for positive m. Associated
//! Legendre values come from the stable upward recurrence with the
//! Condon-Shortley phase folded in.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Number of even-order coefficients up to `l_max`: `(l_max+1)(l_max+2)/2`.
pub fn n_coef(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 2) / 2
}

/// Even-order (l, m) pairs in ascending (l, m) order.
pub fn coef_orders(l_max: usize) -> Vec<(usize, i64)> {
    let mut out = Vec::with_capacity(n_coef(l_max));
    for l in (0..=l_max).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            out.push((l, m));
        }
    }
    out
}

/// SH coefficient vector for one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    pub values: Vec<f64>,
    pub l_max: usize,
}

impl ShCoefficients {
    pub fn new(values: Vec<f64>, l_max: usize) -> Result<Self> {
        if l_max % 2 != 0 {
            return Err(Error::InvalidArgument(format!("odd l_max {l_max}")));
        }
        if values.len() != n_coef(l_max) {
            return Err(Error::Shape(format!(
                "expected {} coefficients for l_max {}, got {}",
                n_coef(l_max),
                l_max,
                values.len()
            )));
        }
        Ok(ShCoefficients { values, l_max })
    }
}

/// Basis matrix: one row per direction, one column per (l, m) coefficient.
#[derive(Debug, Clone)]
pub struct ShBasisMatrix {
    pub matrix: Mat,
    pub l_max: usize,
    /// (theta, phi) per row, theta in [0, pi], phi in [0, 2 pi).
    pub angles: Vec<(f64, f64)>,
}

impl ShBasisMatrix {
    pub fn n_directions(&self) -> usize {
        self.matrix.rows
    }

    pub fn n_coef(&self) -> usize {
        self.matrix.cols
    }
}

/// Associated Legendre P_l^m(x) with Condon-Shortley phase, m >= 0.
fn assoc_legendre(l: usize, m: usize, x: f64) -> f64 {
    debug_assert!(m <= l);
    // P_m^m = (-1)^m (2m-1)!! (1-x^2)^{m/2}
    let mut pmm = 1.0;
    if m > 0 {
        let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * somx2;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    // P_{m+1}^m = x (2m+1) P_m^m
    let mut pmmp1 = x * (2.0 * m as f64 + 1.0) * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    // (l-m) P_l^m = x (2l-1) P_{l-1}^m - (l+m-1) P_{l-2}^m
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = (x * (2.0 * ll as f64 - 1.0) * pmmp1 - (ll + m - 1) as f64 * pmm)
            / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Orthonormal normalization sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!), m >= 0.
fn sh_norm(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2.0 * l as f64 + 1.0) / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

/// The modified real SH basis function: zero for odd l, realified standard
/// harmonics otherwise.
pub fn modified_sh(l: usize, m: i64, theta: f64, phi: f64) -> Result<f64> {
    if m.unsigned_abs() as usize > l {
        return Err(Error::InvalidArgument(format!(
            "|m| = {} exceeds l = {l}",
            m.unsigned_abs()
        )));
    }
    if l % 2 == 1 {
        return Ok(0.0);
    }
    let am = m.unsigned_abs() as usize;
    let base = sh_norm(l, am) * assoc_legendre(l, am, theta.cos());
    let v = if m < 0 {
        // sqrt(2) Im(Y_l^{-m}) with -m > 0
        std::f64::consts::SQRT_2 * base * (am as f64 * phi).sin()
    } else if m == 0 {
        base
    } else {
        std::f64::consts::SQRT_2 * base * (am as f64 * phi).cos()
    };
    Ok(v)
}

/// Converts a unit direction to (theta, phi): theta = arccos(z),
/// phi = atan2(y, x) wrapped into [0, 2 pi).
pub fn dir_to_angles(dir: [f64; 3]) -> (f64, f64) {
    let z = dir[2].clamp(-1.0, 1.0);
    let theta = z.acos();
    let mut phi = dir[1].atan2(dir[0]);
    if phi < 0.0 {
        phi += 2.0 * std::f64::consts::PI;
    }
    (theta, phi)
}

/// Samples the even basis at each direction; one row per direction.
pub fn build_basis(directions: &[[f64; 3]], l_max: usize) -> Result<ShBasisMatrix> {
    if l_max % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "l_max must be even, got {l_max}"
        )));
    }
    if directions.is_empty() {
        return Err(Error::InvalidArgument("no directions".into()));
    }
    let orders = coef_orders(l_max);
    let mut matrix = Mat::zeros(directions.len(), orders.len());
    let mut angles = Vec::with_capacity(directions.len());
    for (row, dir) in directions.iter().enumerate() {
        let (theta, phi) = dir_to_angles(*dir);
        angles.push((theta, phi));
        for (col, &(l, m)) in orders.iter().enumerate() {
            *matrix.at_mut(row, col) = modified_sh(l, m, theta, phi)?;
        }
    }
    Ok(ShBasisMatrix {
        matrix,
        l_max,
        angles,
    })
}

/// Options for the least-squares fit.
#[derive(Debug, Clone)]
pub struct ShFitOptions {
    /// Condition-number cap on `B^T B`; exceeding it is an error.
    pub condition_cap: f64,
    /// Solve through Householder QR instead of the normal equations.
    pub use_qr: bool,
    /// Label woven into error messages (typically the shell name).
    pub context: String,
}

impl Default for ShFitOptions {
    fn default() -> Self {
        ShFitOptions {
            condition_cap: 1e8,
            use_qr: false,
            context: String::new(),
        }
    }
}

/// Least-squares SH coefficients for one voxel's signals:
/// `c = (B^T B)^{-1} B^T s`, guarded by a condition-number check.
pub fn fit_sh(signals: &[f64], basis: &ShBasisMatrix) -> Result<ShCoefficients> {
    fit_sh_with(signals, basis, &ShFitOptions::default())
}

pub fn fit_sh_with(
    signals: &[f64],
    basis: &ShBasisMatrix,
    opts: &ShFitOptions,
) -> Result<ShCoefficients> {
    let n = basis.n_directions();
    let k = basis.n_coef();
    if signals.len() != n {
        return Err(Error::Shape(format!(
            "{} signals for a {}-row basis",
            signals.len(),
            n
        )));
    }
    if n < k {
        return Err(Error::Underdetermined(format!(
            "{n} directions cannot determine {k} coefficients (l_max {})",
            basis.l_max
        )));
    }
    let gram = basis.matrix.gram();
    let cond = linalg::spd_condition_number(&gram)?;
    if cond > opts.condition_cap {
        return Err(Error::IllConditioned {
            cond,
            cap: opts.condition_cap,
            context: if opts.context.is_empty() {
                "sh fit".into()
            } else {
                opts.context.clone()
            },
        });
    }
    let values = if opts.use_qr {
        linalg::qr_least_squares(&basis.matrix, signals)?
    } else {
        let rhs = basis.matrix.tr_mul_vec(signals);
        linalg::solve(&gram, &rhs)?
    };
    ShCoefficients::new(values, basis.l_max)
}

/// Evaluates fitted coefficients at a target basis: `s_H = B_H c`.
pub fn expand_sh(coefficients: &ShCoefficients, basis: &ShBasisMatrix) -> Result<Vec<f64>> {
    if basis.n_coef() != coefficients.values.len() {
        return Err(Error::Shape(format!(
            "basis has {} columns, coefficients have {}",
            basis.n_coef(),
            coefficients.values.len()
        )));
    }
    Ok(basis.matrix.mul_vec(&coefficients.values))
}

/// The full interpolation baseline for one voxel: fit on the low-resolution
/// directions, evaluate at the high-resolution ones.
pub fn sh_interpolate(
    low_signals: &[f64],
    low_dirs: &[[f64; 3]],
    high_dirs: &[[f64; 3]],
    l_max: usize,
) -> Result<Vec<f64>> {
    sh_interpolate_with(low_signals, low_dirs, high_dirs, l_max, &ShFitOptions::default())
}

pub fn sh_interpolate_with(
    low_signals: &[f64],
    low_dirs: &[[f64; 3]],
    high_dirs: &[[f64; 3]],
    l_max: usize,
    opts: &ShFitOptions,
) -> Result<Vec<f64>> {
    let basis_low = build_basis(low_dirs, l_max)?;
    let basis_high = build_basis(high_dirs, l_max)?;
    let coef = fit_sh_with(low_signals, &basis_low, opts)?;
    expand_sh(&coef, &basis_high)
}
