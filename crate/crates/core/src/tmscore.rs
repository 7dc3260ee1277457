//! Optimal superposition and TM-score for pairs with a known residue
//! correspondence.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Coord3, RigidMotion};
use crate::protein_io::ProteinChain;

#[derive(Debug, Error, PartialEq)]
pub enum TmError {
    #[error("point sets are degenerate (fewer than 3 points, unequal sizes, or collinear)")]
    DegeneratePointSet,
    #[error("correspondence has {0} pairs, at least 3 are needed")]
    CorrespondenceTooShort(usize),
    #[error("correspondence pair ({0}, {1}) is out of range")]
    BadCorrespondence(usize, usize),
    #[error("window [{start}, {start}+{length}) does not fit a chain of {len} residues")]
    WindowOutOfRange { start: usize, length: usize, len: usize },
}

/// Rigid transform taking the mobile set onto the reference set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superposition {
    pub rotation: [[f64; 3]; 3],
    pub translation: Coord3,
    pub rmsd: f64,
}

impl Superposition {
    pub fn motion(&self) -> RigidMotion {
        RigidMotion { rotation: self.rotation, translation: self.translation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmResult {
    pub score: f64,
    pub aligned_length: usize,
    pub d0: f64,
}

/// Search constants of the TM-score heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TmSearch {
    pub max_iterations: usize,
    pub min_seed: usize,
    /// Seed lengths are `n / divisor` for each divisor.
    pub seed_divisors: [usize; 3],
    pub cutoff_step: f64,
}

impl Default for TmSearch {
    fn default() -> Self {
        Self { max_iterations: 20, min_seed: 4, seed_divisors: [1, 2, 4], cutoff_step: 0.5 }
    }
}

fn centroid(p: &[Coord3]) -> Coord3 {
    let s = p.iter().fold(Coord3::ZERO, |a, &b| a + b);
    s * (1.0 / p.len() as f64)
}

/// Kabsch superposition without the degeneracy check.
fn superpose(x: &[Coord3], y: &[Coord3]) -> RigidMotion {
    let (cx, cy) = (centroid(x), centroid(y));
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in x.iter().zip(y) {
        h += (*a - cx).to_na() * (*b - cy).to_na().transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = cy.to_na() - r * cx.to_na();
    RigidMotion::from_na(&r, Coord3::from_na(&t))
}

fn is_degenerate(x: &[Coord3]) -> bool {
    if x.len() < 3 {
        return true;
    }
    let c = centroid(x);
    let mut cov = Matrix3::<f64>::zeros();
    for p in x {
        let v = (*p - c).to_na();
        cov += v * v.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0]
}

/// Rotation and translation minimizing the RMSD of `x` onto `y`, with the
/// determinant corrected so the rotation is proper.
pub fn kabsch(x: &[Coord3], y: &[Coord3]) -> Result<Superposition, TmError> {
    if x.len() != y.len() || is_degenerate(x) || is_degenerate(y) {
        return Err(TmError::DegeneratePointSet);
    }
    let m = superpose(x, y);
    let msd = x.iter().zip(y).map(|(a, b)| m.apply(*a).dist(*b).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(Superposition { rotation: m.rotation, translation: m.translation, rmsd: msd.sqrt() })
}

/// Distance scale `max(1.24 (L - 15)^(1/3) - 1.8, 0.5)`.
pub fn d0(l_target: usize) -> f64 {
    let l = l_target as f64;
    if l <= 15.0 {
        return 0.5;
    }
    (1.24 * (l - 15.0).cbrt() - 1.8).max(0.5)
}

pub fn tm_score_identity(a: &ProteinChain, b: &ProteinChain, corr: &[(usize, usize)]) -> Result<TmResult, TmError> {
    tm_score_identity_with(a, b, corr, &TmSearch::default())
}

/// TM-score of `a` against reference `b` (normalized by `|b|`) over a fixed
/// residue correspondence.
pub fn tm_score_identity_with(
    a: &ProteinChain,
    b: &ProteinChain,
    corr: &[(usize, usize)],
    search: &TmSearch,
) -> Result<TmResult, TmError> {
    if corr.len() < 3 {
        return Err(TmError::CorrespondenceTooShort(corr.len()));
    }
    let mut x = Vec::with_capacity(corr.len());
    let mut y = Vec::with_capacity(corr.len());
    for &(i, j) in corr {
        if i >= a.len() || j >= b.len() {
            return Err(TmError::BadCorrespondence(i, j));
        }
        x.push(a.residues[i].ca);
        y.push(b.residues[j].ca);
    }
    let d0 = d0(b.len());
    let score = tm_search(&x, &y, b.len(), d0, search);
    Ok(TmResult { score, aligned_length: corr.len(), d0 })
}

fn tm_search(x: &[Coord3], y: &[Coord3], l_target: usize, d0: f64, search: &TmSearch) -> f64 {
    let n = x.len();
    let mut seeds: Vec<usize> = search.seed_divisors.iter().map(|&div| (n / div.max(1)).max(search.min_seed).min(n)).collect();
    seeds.dedup();
    let stride = (n / 10).max(1);
    let mut best = 0.0f64;
    let mut dist = vec![0.0; n];
    let mut sub_x = Vec::with_capacity(n);
    let mut sub_y = Vec::with_capacity(n);
    for &len in &seeds {
        let mut starts: Vec<usize> = (0..=n - len).step_by(stride).collect();
        if *starts.last().unwrap() != n - len {
            starts.push(n - len);
        }
        for start in starts {
            let mut subset: Vec<usize> = (start..start + len).collect();
            for _ in 0..search.max_iterations {
                sub_x.clear();
                sub_y.clear();
                sub_x.extend(subset.iter().map(|&i| x[i]));
                sub_y.extend(subset.iter().map(|&i| y[i]));
                let m = superpose(&sub_x, &sub_y);
                let mut s = 0.0;
                for i in 0..n {
                    dist[i] = m.apply(x[i]).dist(y[i]);
                    s += 1.0 / (1.0 + (dist[i] / d0).powi(2));
                }
                best = best.max(s / l_target as f64);
                let next = select(&dist, d0, search.cutoff_step);
                if next == subset {
                    break;
                }
                subset = next;
            }
        }
    }
    best
}

/// Indices with `d < d0`; if fewer than 3, the cutoff starts at `d0 + 1` and
/// grows until at least 3 pairs qualify.
fn select(dist: &[f64], d0: f64, step: f64) -> Vec<usize> {
    let pick = |cut: f64| (0..dist.len()).filter(|&i| dist[i] < cut).collect::<Vec<_>>();
    let mut s = pick(d0);
    let mut cut = d0 + 1.0;
    while s.len() < 3.min(dist.len()) {
        s = pick(cut);
        cut += step;
    }
    s
}

/// TM-score of the window `[start, start + length)` of `p` against the whole of `p`.
pub fn tm_fragment(p: &ProteinChain, start: usize, length: usize) -> Result<TmResult, TmError> {
    if length == 0 || start.checked_add(length).is_none_or(|end| end > p.len()) {
        return Err(TmError::WindowOutOfRange { start, length, len: p.len() });
    }
    let frag = p.window(start, length);
    let corr: Vec<(usize, usize)> = (0..length).map(|i| (i, start + i)).collect();
    tm_score_identity(&frag, p, &corr)
}
