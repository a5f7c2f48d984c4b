//! Synthetic multi-shell diffusion phantom.
//!
//! The phantom is a multi-tensor signal model on a small grid: an ellipsoidal
//! "brain" holding an anisotropic fiber slab (single fibers plus a crossing
//! region) surrounded by isotropic tissue. It provides ground truth, masks
//! and noise realizations for every desk-scale end-to-end test, emitting the
//! same NIfTI + bvecs/bvals files the ingestion path consumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, Mat};
use crate::qspace::BVector;
use crate::volume::{DwiDataset, Mask3, Volume4};

/// One shell to synthesize.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ShellSpec {
    pub bvalue: f64,
    pub n_directions: usize,
}

/// Magnitude-noise model applied to the clean signal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseModel {
    #[default]
    None,
    Gaussian {
        sigma: f64,
    },
    /// `|clean + e1 + i e2|` with independent Gaussian components.
    Rician {
        sigma: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub shells: Vec<ShellSpec>,
    /// Raw-scale non-diffusion-weighted magnitude.
    pub s0: f64,
    pub noise: NoiseModel,
    pub seed: u64,
    /// WM-like axial/radial diffusivities, mm²/s.
    pub axial_diffusivity: f64,
    pub radial_diffusivity: f64,
    /// GM-like isotropic diffusivity, mm²/s.
    pub gm_diffusivity: f64,
    /// In-plane fiber rotation across the slab, degrees (0 = straight).
    pub fiber_rotation_deg: f64,
    /// Also emit one b=0 volume at q index 0.
    pub include_b0: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [20, 20, 20],
            shells: vec![
                ShellSpec { bvalue: 1000.0, n_directions: 90 },
                ShellSpec { bvalue: 2000.0, n_directions: 90 },
                ShellSpec { bvalue: 3000.0, n_directions: 90 },
            ],
            s0: 4000.0,
            noise: NoiseModel::None,
            seed: 0,
            axial_diffusivity: 1.7e-3,
            radial_diffusivity: 0.3e-3,
            gm_diffusivity: 0.8e-3,
            fiber_rotation_deg: 30.0,
            include_b0: false,
        }
    }
}

/// Everything `generate` produces: the (possibly noisy) dataset, the
/// noise-free truth, and the synthetic tissue masks.
#[derive(Debug, Clone)]
pub struct PhantomOutput {
    pub dataset: DwiDataset,
    pub clean: Volume4,
    pub wm_mask: Mask3,
    pub gm_mask: Mask3,
    pub spec: PhantomSpec,
}

/// Spherical-Fibonacci directions folded to the z >= 0 hemisphere and
/// rotated by a seed-dependent random rotation. Approximately uniform under
/// the antipodal metric.
pub fn fibonacci_directions(n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one direction".into()));
    }
    let rot = random_rotation(seed);
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut dirs = Vec::with_capacity(n);
    for i in 0..n {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden_angle * i as f64;
        let v = [r * phi.cos(), r * phi.sin(), z];
        let mut w = [
            rot[0][0] * v[0] + rot[0][1] * v[1] + rot[0][2] * v[2],
            rot[1][0] * v[0] + rot[1][1] * v[1] + rot[1][2] * v[2],
            rot[2][0] * v[0] + rot[2][1] * v[1] + rot[2][2] * v[2],
        ];
        if w[2] < 0.0 {
            w = [-w[0], -w[1], -w[2]];
        }
        let norm = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        dirs.push([w[0] / norm, w[1] / norm, w[2] / norm]);
    }
    Ok(dirs)
}

/// Uniform random rotation from a quaternion with Gaussian components.
fn random_rotation(seed: u64) -> [[f64; 3]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = box_muller(&mut rng);
    let (c, d) = box_muller(&mut rng);
    let normals = [a, b, c, d];
    let norm = normals.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = [
        normals[0] / norm,
        normals[1] / norm,
        normals[2] / norm,
        normals[3] / norm,
    ];
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f64::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

/// Symmetric diffusion tensor for a fiber along `dir`.
fn fiber_tensor(dir: [f64; 3], axial: f64, radial: f64) -> [[f64; 3]; 3] {
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = (axial - radial) * dir[i] * dir[j];
        }
        d[i][i] += radial;
    }
    d
}

fn quadratic_form(d: &[[f64; 3]; 3], g: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += g[i] * d[i][j] * g[j];
        }
    }
    s
}

/// Multi-tensor signal equation `S(g, b) = s0 * sum_i f_i exp(-b g^T D_i g)`.
pub fn multi_tensor_signal(
    populations: &[(f64, [[f64; 3]; 3])],
    s0: f64,
    bvalue: f64,
    g: [f64; 3],
) -> f64 {
    populations
        .iter()
        .map(|(f, d)| f * s0 * (-bvalue * quadratic_form(d, g)).exp())
        .sum()
}

/// Tissue classification of one voxel.
enum VoxelTissue {
    Outside,
    Wm(Vec<(f64, [[f64; 3]; 3])>),
    Gm(Vec<(f64, [[f64; 3]; 3])>),
}

fn classify_voxel(spec: &PhantomSpec, x: usize, y: usize, z: usize) -> VoxelTissue {
    let dims = spec.dims;
    let c = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let r = [
        0.45 * dims[0] as f64,
        0.45 * dims[1] as f64,
        0.45 * dims[2] as f64,
    ];
    let fx = (x as f64 - c[0]) / r[0];
    let fy = (y as f64 - c[1]) / r[1];
    let fz = (z as f64 - c[2]) / r[2];
    if fx * fx + fy * fy + fz * fz > 1.0 {
        return VoxelTissue::Outside;
    }
    let in_slab = (z as f64 - c[2]).abs() < 0.2 * dims[2] as f64;
    if !in_slab {
        let iso = spec.gm_diffusivity;
        return VoxelTissue::Gm(vec![(
            1.0,
            [[iso, 0.0, 0.0], [0.0, iso, 0.0], [0.0, 0.0, iso]],
        )]);
    }
    // fiber A bends smoothly across x
    let half = spec.fiber_rotation_deg.to_radians() / 2.0;
    let alpha = if dims[0] > 1 {
        (x as f64 / (dims[0] as f64 - 1.0) - 0.5) * 2.0 * half
    } else {
        0.0
    };
    let dir_a = [alpha.cos(), alpha.sin(), 0.0];
    let tensor_a = fiber_tensor(dir_a, spec.axial_diffusivity, spec.radial_diffusivity);
    let crossing = (y as f64 - c[1]).abs() < 0.15 * dims[1] as f64;
    if crossing {
        let dir_b = [0.0, 1.0, 0.0];
        let tensor_b = fiber_tensor(dir_b, spec.axial_diffusivity, spec.radial_diffusivity);
        VoxelTissue::Wm(vec![(0.5, tensor_a), (0.5, tensor_b)])
    } else {
        VoxelTissue::Wm(vec![(1.0, tensor_a)])
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("phantom dims must be positive".into()));
    }
    if spec.shells.is_empty() {
        return Err(Error::InvalidArgument("phantom needs at least one shell".into()));
    }
    if spec.s0 <= 0.0 {
        return Err(Error::InvalidArgument("s0 must be positive".into()));
    }
    for (name, ten) in [
        (
            "fiber",
            fiber_tensor([1.0, 0.0, 0.0], spec.axial_diffusivity, spec.radial_diffusivity),
        ),
        (
            "gm",
            [
                [spec.gm_diffusivity, 0.0, 0.0],
                [0.0, spec.gm_diffusivity, 0.0],
                [0.0, 0.0, spec.gm_diffusivity],
            ],
        ),
    ] {
        let mat = Mat::from_rows(&[ten[0].to_vec(), ten[1].to_vec(), ten[2].to_vec()]);
        let eig = symmetric_eigenvalues(&mat)?;
        if eig[0] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{name} tensor is not positive definite (min eigenvalue {})",
                eig[0]
            )));
        }
    }
    match spec.noise {
        NoiseModel::Gaussian { sigma } | NoiseModel::Rician { sigma } if sigma < 0.0 => Err(
            Error::InvalidArgument("noise sigma must be non-negative".into()),
        ),
        _ => Ok(()),
    }
}

/// Builds the phantom: noisy dataset, noise-free truth, brain mask, and
/// synthetic WM/GM masks. Deterministic per seed; noise uses one
/// counter-seeded generator per voxel, so results do not depend on
/// evaluation order.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomOutput> {
    validate(spec)?;
    let [nx, ny, nz] = spec.dims;

    // q-axis layout: optional b0 first, then shells in listed order
    let mut bvectors: Vec<BVector> = Vec::new();
    if spec.include_b0 {
        bvectors.push(BVector::new([0.0, 0.0, 0.0], 0.0)?);
    }
    for (si, shell) in spec.shells.iter().enumerate() {
        let dirs = fibonacci_directions(shell.n_directions, spec.seed.wrapping_add(si as u64))?;
        for d in dirs {
            bvectors.push(BVector::new(d, shell.bvalue)?);
        }
    }
    let nq = bvectors.len();

    let mut clean = Volume4::zeros([nx, ny, nz, nq]);
    let mut noisy = Volume4::zeros([nx, ny, nz, nq]);
    let mut brain = Mask3::new([nx, ny, nz], vec![0; nx * ny * nz])?;
    let mut wm = brain.clone();
    let mut gm = brain.clone();

    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let vox = (x * ny + y) * nz + z;
                let populations = match classify_voxel(spec, x, y, z) {
                    VoxelTissue::Outside => continue,
                    VoxelTissue::Wm(p) => {
                        brain.data[vox] = 1;
                        wm.data[vox] = 1;
                        p
                    }
                    VoxelTissue::Gm(p) => {
                        brain.data[vox] = 1;
                        gm.data[vox] = 1;
                        p
                    }
                };
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ (vox as u64 + 1)));
                let base = clean.idx(x, y, z, 0);
                for (qi, bv) in bvectors.iter().enumerate() {
                    let s = multi_tensor_signal(&populations, spec.s0, bv.bvalue, bv.direction);
                    clean.data[base + qi] = s;
                    noisy.data[base + qi] = match spec.noise {
                        NoiseModel::None => {
                            let _ = box_muller(&mut rng); // keep the stream aligned
                            s
                        }
                        NoiseModel::Gaussian { sigma } => {
                            let (e1, _) = box_muller(&mut rng);
                            s + sigma * e1
                        }
                        NoiseModel::Rician { sigma } => {
                            let (e1, e2) = box_muller(&mut rng);
                            let re = s + sigma * e1;
                            let im = sigma * e2;
                            (re * re + im * im).sqrt()
                        }
                    };
                }
            }
        }
    }

    let dataset = DwiDataset::new(noisy, bvectors, brain, 100.0)?;
    Ok(PhantomOutput {
        dataset,
        clean,
        wm_mask: wm,
        gm_mask: gm,
        spec: spec.clone(),
    })
}
