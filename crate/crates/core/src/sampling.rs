//! Training batch construction: positive sets, uniform negatives, and
//! substructure windows whose TM-score against the full chain stays above α.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::protein_io::ProteinChain;
use crate::simmatrix::SimilarityMatrix;
use crate::tmscore::{tm_fragment, TmError};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("need at least 2 structures")]
    SingletonDataset,
    #[error("query {query} has {available} non-positive structures, {needed} negatives requested")]
    NotEnoughNegatives { query: usize, available: usize, needed: usize },
    #[error("index {0} out of range")]
    OutOfRange(usize),
    #[error("chain `{0}` is shorter than 3 residues")]
    ChainTooShort(String),
    #[error("plan line {line}: {reason}")]
    PlanParse { line: usize, reason: String },
    #[error(transparent)]
    Tm(#[from] TmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// All `b ≠ a` with `scores[a][b] ≥ ρ · max_{c ≠ a} scores[a][c]`, ascending.
pub fn positives(m: &SimilarityMatrix, a: usize, rho: f64) -> Result<Vec<usize>, SamplingError> {
    if m.len() < 2 {
        return Err(SamplingError::SingletonDataset);
    }
    if a >= m.len() {
        return Err(SamplingError::OutOfRange(a));
    }
    let row = m.row(a);
    let max = row.iter().enumerate().filter(|&(b, _)| b != a).map(|(_, &s)| s as f64).fold(f64::NEG_INFINITY, f64::max);
    let threshold = rho * max;
    Ok((0..m.len()).filter(|&b| b != a && row[b] as f64 >= threshold).collect())
}

/// Positive lists for every structure.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSets {
    pub rho: f64,
    pub sets: Vec<Vec<usize>>,
}

impl PositiveSets {
    pub fn build(m: &SimilarityMatrix, rho: f64) -> Result<Self, SamplingError> {
        let sets = (0..m.len()).map(|a| positives(m, a, rho)).collect::<Result<_, _>>()?;
        Ok(Self { rho, sets })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub query: usize,
    pub positive: usize,
    /// Substructure window `(start, length)` of the positive, if sampled.
    pub window: Option<(usize, usize)>,
    pub negatives: Vec<usize>,
}

/// Draws one positive uniformly and `k` distinct negatives uniformly from the
/// structures that are neither the query nor its positives.
pub fn sample_batch<R: Rng + ?Sized>(
    sets: &PositiveSets,
    query: usize,
    k: usize,
    rng: &mut R,
) -> Result<TrainingBatch, SamplingError> {
    let n = sets.sets.len();
    let pos = sets.sets.get(query).ok_or(SamplingError::OutOfRange(query))?;
    if pos.is_empty() {
        return Err(SamplingError::SingletonDataset);
    }
    let positive = pos[rng.random_range(0..pos.len())];
    let complement: Vec<usize> = (0..n).filter(|&b| b != query && pos.binary_search(&b).is_err()).collect();
    if complement.len() < k {
        return Err(SamplingError::NotEnoughNegatives { query, available: complement.len(), needed: k });
    }
    let negatives = index::sample(rng, complement.len(), k).into_iter().map(|i| complement[i]).collect();
    Ok(TrainingBatch { query, positive, window: None, negatives })
}

fn all_windows_pass(p: &ProteinChain, len: usize, alpha: f64) -> Result<bool, SamplingError> {
    for start in 0..=p.len() - len {
        if tm_fragment(p, start, len)?.score < alpha {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Smallest `L` such that every window of length `L` and of every greater
/// length scores at least `alpha` against `p`. A binary search over
/// `[3, |P|]` proposes the length; an upward pass then raises it past any
/// longer failing length, so every length the sampler may draw is admissible.
pub fn precompute_min_length(p: &ProteinChain, alpha: f64) -> Result<usize, SamplingError> {
    let n = p.len();
    if n < 3 {
        return Err(SamplingError::ChainTooShort(p.id.clone()));
    }
    let (mut lo, mut hi) = (3usize, n);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if all_windows_pass(p, mid, alpha)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut min = lo;
    for len in lo + 1..n {
        if !all_windows_pass(p, len, alpha)? {
            min = len + 1;
        }
    }
    Ok(min.min(n))
}

/// Minimum sampling length per structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstructurePlan {
    pub alpha: f64,
    pub entries: Vec<(String, usize)>,
}

impl SubstructurePlan {
    pub fn build(chains: &[ProteinChain], alpha: f64) -> Result<Self, SamplingError> {
        let entries = chains
            .par_iter()
            .map(|c| precompute_min_length(c, alpha).map(|l| (c.id.clone(), l)))
            .collect::<Result<_, _>>()?;
        Ok(Self { alpha, entries })
    }

    pub fn min_length(&self, id: &str) -> Option<usize> {
        self.entries.iter().find(|(i, _)| i == id).map(|&(_, l)| l)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, l) in &self.entries {
            writeln!(w, "{id}\t{l}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, alpha: f64) -> Result<Self, SamplingError> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, l) = line.split_once('\t').ok_or(SamplingError::PlanParse { line: i + 1, reason: "expected id<TAB>min_length".into() })?;
            let l = l.trim().parse().map_err(|_| SamplingError::PlanParse { line: i + 1, reason: format!("bad length `{l}`") })?;
            entries.push((id.to_string(), l));
        }
        Ok(Self { alpha, entries })
    }
}

/// Grows a window of `length` residues from `anchor`, one residue at a time,
/// alternating right then left and continuing on one side once the other
/// reaches the chain end.
pub fn grow_window(n: usize, anchor: usize, length: usize) -> (usize, usize) {
    let length = length.clamp(1, n);
    let (mut lo, mut hi) = (anchor, anchor + 1);
    let mut right = true;
    while hi - lo < length {
        if (right && hi < n) || lo == 0 {
            hi += 1;
        } else {
            lo -= 1;
        }
        right = !right;
    }
    (lo, hi - lo)
}

/// Uniform anchor, length uniform in `[min_length, |P|]`.
pub fn sample_substructure<R: Rng + ?Sized>(n: usize, min_length: usize, rng: &mut R) -> (usize, usize) {
    let min_length = min_length.clamp(1, n);
    let anchor = rng.random_range(0..n);
    let length = rng.random_range(min_length..=n);
    grow_window(n, anchor, length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Coord3, RigidMotion};
    use crate::protein_io::Residue;
    use crate::synth::{generate, FamilySpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[&[f32]]) -> SimilarityMatrix {
        let ids = (0..rows.len()).map(|i| format!("s{i}")).collect();
        let mut m = SimilarityMatrix::new(ids).unwrap();
        for (a, r) in rows.iter().enumerate() {
            for (b, &v) in r.iter().enumerate() {
                m.set(a, b, v).unwrap();
            }
        }
        m
    }

    fn chain(len: usize, seed: u64) -> ProteinChain {
        generate(&FamilySpec { n_families: 1, members: 1, min_len: len, max_len: len, sigma: 0.0, seed }).unwrap().chains.remove(0)
    }

    fn hinge_chain(len: usize, seed: u64) -> ProteinChain {
        let p = chain(len, seed);
        let h = len / 2;
        let pivot = p.residues[h].ca;
        let m = RigidMotion::from_quaternion([0.8, 0.4, 0.3, 0.2], Coord3::ZERO);
        let res: Vec<Residue> = p
            .residues
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if i <= h {
                    return r.clone();
                }
                let f = |q: Coord3| m.rotate(q - pivot) + pivot;
                Residue { n: f(r.n), ca: f(r.ca), c: f(r.c), o: f(r.o), cb: r.cb.map(f), ..r.clone() }
            })
            .collect();
        ProteinChain::new("hinge", res)
    }

    #[test]
    fn positives_examples() {
        let m = matrix(&[&[1.0, 0.9, 0.5, 0.88], &[0.9, 1.0, 0.1, 0.1], &[0.5; 4], &[0.1, 0.1, 0.1, 1.0]]);
        assert_eq!(positives(&m, 0, 0.9).unwrap(), vec![1, 3]);
        assert_eq!(positives(&m, 0, 0.9999).unwrap(), vec![1]);
        assert_eq!(positives(&m, 2, 0.9).unwrap(), vec![0, 1, 3]);
        assert!(matches!(positives(&matrix(&[&[1.0]]), 0, 0.9), Err(SamplingError::SingletonDataset)));
    }

    #[test]
    fn batch_contracts() {
        let m = matrix(&[
            &[1.0, 0.9, 0.2, 0.2, 0.2, 0.2],
            &[0.9, 1.0, 0.2, 0.2, 0.2, 0.2],
            &[0.2, 0.2, 1.0, 0.9, 0.9, 0.2],
            &[0.2, 0.2, 0.9, 1.0, 0.9, 0.2],
            &[0.2, 0.2, 0.9, 0.9, 1.0, 0.2],
            &[0.2, 0.2, 0.2, 0.2, 0.3, 1.0],
        ]);
        let sets = PositiveSets::build(&m, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // single positive is forced; K = n - 1 - |pos| takes the whole complement
        let b = sample_batch(&sets, 0, 4, &mut rng).unwrap();
        assert_eq!(b.positive, 1);
        let mut negs = b.negatives.clone();
        negs.sort();
        assert_eq!(negs, vec![2, 3, 4, 5]);
        assert!(matches!(sample_batch(&sets, 0, 5, &mut rng), Err(SamplingError::NotEnoughNegatives { available: 4, .. })));

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|q| sample_batch(&sets, q % 6, 2, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        for b in draw(6) {
            assert!(sets.sets[b.query].contains(&b.positive));
            assert_eq!(b.negatives.len(), 2);
            for n in &b.negatives {
                assert!(*n != b.query && !sets.sets[b.query].contains(n));
            }
            assert_ne!(b.negatives[0], b.negatives[1]);
        }
    }

    #[test]
    fn rigid_chain_min_length_is_ceil_alpha_n() {
        let p = chain(40, 2);
        assert_eq!(precompute_min_length(&p, 0.9).unwrap(), 36);
        assert_eq!(precompute_min_length(&p, 0.5).unwrap(), 20);
        assert_eq!(precompute_min_length(&p, 1e-9).unwrap(), 3);
        assert!(matches!(precompute_min_length(&p.window(0, 2), 0.9), Err(SamplingError::ChainTooShort(_))));
    }

    #[test]
    fn hinge_chain_matches_linear_scan() {
        let p = hinge_chain(30, 3);
        for alpha in [0.3, 0.5, 0.7, 0.9] {
            let mut expect = p.len();
            for len in (3..=p.len()).rev() {
                let ok = (0..=p.len() - len).all(|s| tm_fragment(&p, s, len).unwrap().score >= alpha);
                if !ok {
                    break;
                }
                expect = len;
            }
            assert_eq!(precompute_min_length(&p, alpha).unwrap(), expect, "alpha {alpha}");
        }
    }

    #[test]
    fn window_growth_examples() {
        assert_eq!(grow_window(10, 4, 10), (0, 10));
        assert_eq!(grow_window(10, 0, 4), (0, 4));
        assert_eq!(grow_window(10, 9, 3), (7, 3));
        assert_eq!(grow_window(10, 5, 1), (5, 1));
        assert_eq!(grow_window(10, 5, 4), (4, 4)); // right, left, right
    }

    #[test]
    fn sampled_windows_satisfy_alpha() {
        let p = hinge_chain(40, 4);
        let min = precompute_min_length(&p, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let (s, l) = sample_substructure(p.len(), min, &mut rng);
            assert!(l >= min);
            assert!(tm_fragment(&p, s, l).unwrap().score >= 0.9);
        }
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = SubstructurePlan { alpha: 0.9, entries: vec![("a".into(), 36), ("b b".into(), 3)] };
        let mut buf = Vec::new();
        plan.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a\t36\nb b\t3\n");
        assert_eq!(SubstructurePlan::read(&buf[..], 0.9).unwrap(), plan);
        assert!(SubstructurePlan::read(&b"a\tx\n"[..], 0.9).is_err());
    }

    proptest! {
        #[test]
        fn grown_window_is_in_bounds_and_covers_anchor(n in 1usize..200, a in 0usize..200, l in 1usize..200) {
            let a = a % n;
            let (s, len) = grow_window(n, a, l);
            prop_assert_eq!(len, l.min(n));
            prop_assert!(s <= a && a < s + len && s + len <= n);
        }

        #[test]
        fn positives_invariant_under_row_scaling(row in prop::collection::vec(0.01f32..0.5, 5), c in 0.1f32..2.0) {
            let mut r2 = row.clone();
            r2.iter_mut().for_each(|v| *v *= c);
            let a = matrix(&[&row, &[0.1; 5], &[0.1; 5], &[0.1; 5], &[0.1; 5]]);
            let b = matrix(&[&r2, &[0.1; 5], &[0.1; 5], &[0.1; 5], &[0.1; 5]]);
            // scaling in f32 can move values sitting exactly on the threshold
            let pa = positives(&a, 0, 0.9).unwrap();
            let pb = positives(&b, 0, 0.9).unwrap();
            let max = row[1..].iter().cloned().fold(0.0f32, f32::max);
            let near = row[1..].iter().any(|v| ((*v / max) - 0.9).abs() < 1e-5);
            prop_assert!(pa == pb || near);
        }
    }
}
