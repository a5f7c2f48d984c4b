//! B-vector geometry, antipodal angular metrics, uniform q-space subset
//! selection, and the per-epoch context/target shuffle.
//!
//! Diffusion signal is symmetric under `g -> -g`, so every distance here is
//! the antipodally folded angle `arccos(|u . v|)` in `[0, pi/2]`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One diffusion-sensitizing gradient: a unit direction plus its b-value
/// in s/mm². `bvalue == 0` marks a non-diffusion-weighted volume; its
/// direction is conventionally the zero vector and it never joins a shell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BVector {
    pub direction: [f64; 3],
    pub bvalue: f64,
}

impl BVector {
    /// Builds a b-vector, renormalizing the direction to unit length.
    /// A zero direction is only legal for `bvalue == 0`.
    pub fn new(direction: [f64; 3], bvalue: f64) -> Result<Self> {
        if direction.iter().any(|c| !c.is_finite()) || !bvalue.is_finite() {
            return Err(Error::InvalidInput(
                "b-vector has non-finite components".into(),
            ));
        }
        if bvalue < 0.0 {
            return Err(Error::InvalidInput(format!(
                "negative b-value {bvalue}"
            )));
        }
        let norm = (direction[0] * direction[0]
            + direction[1] * direction[1]
            + direction[2] * direction[2])
            .sqrt();
        if norm < 1e-12 {
            if bvalue == 0.0 {
                return Ok(BVector {
                    direction: [0.0; 3],
                    bvalue,
                });
            }
            return Err(Error::InvalidInput(
                "zero direction with nonzero b-value".into(),
            ));
        }
        Ok(BVector {
            direction: [
                direction[0] / norm,
                direction[1] / norm,
                direction[2] / norm,
            ],
            bvalue,
        })
    }
}

/// The sampling geometry of one shell: an ordered list of directions sharing
/// a nominal b-value. Order matters; it is the q-axis order of the paired 4D
/// signal array.
#[derive(Debug, Clone, PartialEq)]
pub struct QSpaceShell {
    bvectors: Vec<BVector>,
    shell_bvalue: f64,
}

impl QSpaceShell {
    /// Builds a shell, checking every member stays within `tolerance` of the
    /// nominal b-value and excludes b=0 volumes.
    pub fn new(bvectors: Vec<BVector>, shell_bvalue: f64, tolerance: f64) -> Result<Self> {
        if bvectors.is_empty() {
            return Err(Error::InvalidArgument("empty shell".into()));
        }
        for (i, bv) in bvectors.iter().enumerate() {
            if bv.bvalue == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "b=0 volume at shell position {i}; b=0 is excluded from shells"
                )));
            }
            if (bv.bvalue - shell_bvalue).abs() > tolerance {
                return Err(Error::InvalidArgument(format!(
                    "b-value {} at position {i} outside {} +/- {}",
                    bv.bvalue, shell_bvalue, tolerance
                )));
            }
        }
        Ok(QSpaceShell {
            bvectors,
            shell_bvalue,
        })
    }

    pub fn len(&self) -> usize {
        self.bvectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvectors.is_empty()
    }

    pub fn bvalue(&self) -> f64 {
        self.shell_bvalue
    }

    pub fn bvectors(&self) -> &[BVector] {
        &self.bvectors
    }

    pub fn direction(&self, i: usize) -> [f64; 3] {
        self.bvectors[i].direction
    }
}

/// Indices of one epoch's context/target partition of a sampled subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTargetSplit {
    pub context_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// How `select_uniform_subset` grows the subset after the random start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Greedy max-min: each new point maximizes its minimum antipodal angle
    /// to the points already chosen.
    #[default]
    FarthestPoint,
    /// Greedy electrostatic: each new point minimizes the added repulsion
    /// energy `sum(1/angle)` against the points already chosen.
    MinTotalEnergy,
}

/// Antipodally folded angle between two unit vectors, in `[0, pi/2]`.
/// Symmetric in its arguments and invariant under negating either one.
pub fn angular_distance(u: [f64; 3], v: [f64; 3]) -> Result<f64> {
    for c in u.iter().chain(v.iter()) {
        if !c.is_finite() {
            return Err(Error::InvalidInput(
                "angular_distance: non-finite component".into(),
            ));
        }
    }
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if (nu - 1.0).abs() > 1e-6 || (nv - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "angular_distance expects unit vectors, norms {nu} and {nv}"
        )));
    }
    let dot = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).abs();
    Ok(dot.min(1.0).acos())
}

/// Picks `k` approximately evenly distributed shell indices. The first index
/// is drawn uniformly from `seed`; the rest follow the configured greedy
/// strategy with lowest-index tie-breaking. Deterministic in
/// `(shell, k, seed, strategy)`.
pub fn select_uniform_subset(shell: &QSpaceShell, k: usize, seed: u64) -> Result<Vec<usize>> {
    select_uniform_subset_with(shell, k, seed, SelectionStrategy::FarthestPoint)
}

pub fn select_uniform_subset_with(
    shell: &QSpaceShell,
    k: usize,
    seed: u64,
    strategy: SelectionStrategy,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..shell.len());
    select_subset_from(shell, k, first, strategy)
}

/// Greedy completion with a forced first index. Split out so tests can pin
/// the otherwise random starting point.
pub fn select_subset_from(
    shell: &QSpaceShell,
    k: usize,
    first: usize,
    strategy: SelectionStrategy,
) -> Result<Vec<usize>> {
    let n = shell.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "subset size {k} out of range 1..={n}"
        )));
    }
    if first >= n {
        return Err(Error::InvalidArgument(format!(
            "first index {first} out of range for shell of {n}"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    selected.push(first);
    taken[first] = true;

    // min angle to the selected set, maintained incrementally
    let mut min_angle = vec![f64::INFINITY; n];
    let mut energy = vec![0.0f64; n];
    let update = |sel: usize,
                  taken: &[bool],
                  min_angle: &mut [f64],
                  energy: &mut [f64]|
     -> Result<()> {
        for cand in 0..n {
            if taken[cand] {
                continue;
            }
            let a = angular_distance(shell.direction(cand), shell.direction(sel))?;
            if a < min_angle[cand] {
                min_angle[cand] = a;
            }
            energy[cand] += 1.0 / a.max(1e-12);
        }
        Ok(())
    };
    update(first, &taken, &mut min_angle, &mut energy)?;

    while selected.len() < k {
        let mut best: Option<usize> = None;
        for cand in 0..n {
            if taken[cand] {
                continue;
            }
            let better = match (strategy, best) {
                (_, None) => true,
                (SelectionStrategy::FarthestPoint, Some(b)) => min_angle[cand] > min_angle[b],
                (SelectionStrategy::MinTotalEnergy, Some(b)) => energy[cand] < energy[b],
            };
            if better {
                best = Some(cand);
            }
        }
        let chosen = best.expect("k <= n guarantees a candidate");
        selected.push(chosen);
        taken[chosen] = true;
        if selected.len() < k {
            update(chosen, &taken, &mut min_angle, &mut energy)?;
        }
    }
    Ok(selected)
}

/// Draws `q_in + q_out` evenly spread directions for one epoch, permutes them
/// with the same seed stream, and splits into context and target sets.
pub fn shuffle_and_split(
    shell: &QSpaceShell,
    q_in: usize,
    q_out: usize,
    epoch_seed: u64,
) -> Result<ContextTargetSplit> {
    shuffle_and_split_with(shell, q_in, q_out, epoch_seed, SelectionStrategy::FarthestPoint)
}

pub fn shuffle_and_split_with(
    shell: &QSpaceShell,
    q_in: usize,
    q_out: usize,
    epoch_seed: u64,
    strategy: SelectionStrategy,
) -> Result<ContextTargetSplit> {
    let total = q_in
        .checked_add(q_out)
        .ok_or_else(|| Error::InvalidArgument("q_in + q_out overflow".into()))?;
    if q_in == 0 || q_out == 0 {
        return Err(Error::InvalidArgument(
            "q_in and q_out must both be at least 1".into(),
        ));
    }
    if total > shell.len() {
        return Err(Error::InvalidArgument(format!(
            "q_in + q_out = {total} exceeds shell size {}",
            shell.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let first = rng.gen_range(0..shell.len());
    let mut subset = select_subset_from(shell, total, first, strategy)?;
    subset.shuffle(&mut rng);
    let target_indices = subset.split_off(q_in);
    Ok(ContextTargetSplit {
        context_indices: subset,
        target_indices,
    })
}

/// Minimum pairwise antipodal angle within the subset. A uniformity
/// diagnostic: larger is more even.
pub fn total_min_angle(indices: &[usize], shell: &QSpaceShell) -> Result<f64> {
    if indices.len() < 2 {
        return Err(Error::InvalidArgument(
            "total_min_angle needs at least 2 indices".into(),
        ));
    }
    let mut min = f64::INFINITY;
    for (i, &a) in indices.iter().enumerate() {
        for &b in &indices[i + 1..] {
            let d = angular_distance(shell.direction(a), shell.direction(b))?;
            if d < min {
                min = d;
            }
        }
    }
    Ok(min)
}

/// Reads an FSL `bvecs` file: three whitespace-separated rows of x, y, z
/// components, one column per volume.
pub fn read_bvecs(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::Format(format!("bvecs: cannot parse '{t}' as a number"))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != 3 {
        return Err(Error::Format(format!(
            "bvecs: expected 3 rows, found {}",
            rows.len()
        )));
    }
    let q = rows[0].len();
    if rows[1].len() != q || rows[2].len() != q {
        return Err(Error::Format("bvecs: rows have unequal lengths".into()));
    }
    Ok((0..q).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect())
}

/// Reads an FSL `bvals` file: a single whitespace-separated row.
pub fn read_bvals(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("bvals: cannot parse '{t}' as a number")))
        })
        .collect()
}

/// Writes FSL-convention `bvecs` (3 rows) and `bvals` (1 row) files.
pub fn write_bvecs_bvals(
    bvectors: &[BVector],
    bvecs_path: &Path,
    bvals_path: &Path,
) -> Result<()> {
    let mut rows = [String::new(), String::new(), String::new()];
    let mut bvals = String::new();
    for (i, bv) in bvectors.iter().enumerate() {
        for (r, row) in rows.iter_mut().enumerate() {
            if i > 0 {
                row.push(' ');
            }
            let _ = write!(row, "{}", bv.direction[r]);
        }
        if i > 0 {
            bvals.push(' ');
        }
        let _ = write!(bvals, "{}", bv.bvalue);
    }
    std::fs::write(bvecs_path, format!("{}\n{}\n{}\n", rows[0], rows[1], rows[2]))?;
    std::fs::write(bvals_path, format!("{bvals}\n"))?;
    Ok(())
}
