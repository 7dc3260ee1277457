//! Synthetic families of backbone chains with known pairwise similarity.
//!
//! Each family has a random self-avoiding template built residue by residue
//! from ideal bond geometry. Members are noisy, rigidly moved copies.

use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{parse_kv, ConfigError};
use crate::geometry::{Coord3, RigidMotion};
use crate::protein_io::{ensure_cbeta, write_chains, write_pdb, ProteinChain, Residue};
use crate::simmatrix::{SimMatrixError, SimilarityMatrix};
use crate::tmscore::{tm_score_identity, TmError};

pub const BOND_N_CA: f64 = 1.46;
pub const BOND_CA_C: f64 = 1.52;
pub const BOND_C_N: f64 = 1.33;
const BOND_C_O: f64 = 1.23;
const ANGLE_N_CA_C: f64 = 111.0;
const ANGLE_CA_C_N: f64 = 116.2;
const ANGLE_C_N_CA: f64 = 121.7;
const ANGLE_CA_C_O: f64 = 120.5;

/// Score assigned to every cross-family pair.
pub const CROSS_FAMILY_TM: f32 = 0.17;

/// Minimum Cα separation between residues at least three apart.
const CLASH_DISTANCE: f64 = 4.0;
const PLACEMENT_TRIES: usize = 60;
const TEMPLATE_TRIES: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid family spec: {0}")]
    InvalidSpec(String),
    #[error("could not build a self-avoiding template of length {0}")]
    Stuck(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tm(#[from] TmError),
    #[error(transparent)]
    Matrix(#[from] SimMatrixError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub n_families: usize,
    pub members: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of per-coordinate noise, in Å.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self { n_families: 30, members: 6, min_len: 40, max_len: 80, sigma: 0.5, seed: 1 }
    }
}

impl FamilySpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.n_families == 0 || self.members == 0 {
            return bad("need at least one family and one member");
        }
        if self.min_len < 10 || self.max_len < self.min_len {
            return bad("lengths must satisfy 10 <= min_len <= max_len");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be a finite non-negative number");
        }
        Ok(())
    }

    /// Reads `key = value` text over the defaults. Keys: n_families, members,
    /// min_len, max_len, sigma, seed.
    pub fn from_text(text: &str) -> Result<Self, SynthError> {
        let mut s = Self::default();
        for (k, v) in parse_kv(text)? {
            let bad = || ConfigError::BadValue { key: k.clone(), value: v.clone() };
            match k.as_str() {
                "n_families" => s.n_families = v.parse().map_err(|_| bad())?,
                "members" => s.members = v.parse().map_err(|_| bad())?,
                "min_len" => s.min_len = v.parse().map_err(|_| bad())?,
                "max_len" => s.max_len = v.parse().map_err(|_| bad())?,
                "sigma" => s.sigma = v.parse().map_err(|_| bad())?,
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(ConfigError::UnknownKey(k).into()),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_families = {}\nmembers = {}\nmin_len = {}\nmax_len = {}\nsigma = {}\nseed = {}\n",
            self.n_families, self.members, self.min_len, self.max_len, self.sigma, self.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub chains: Vec<ProteinChain>,
    /// Family index of each chain.
    pub families: Vec<usize>,
    pub matrix: SimilarityMatrix,
}

pub fn member_id(family: usize, member: usize) -> String {
    format!("fam{family:03}_m{member:02}")
}

/// Places `d` so that `|cd| = bond`, angle `bcd = angle` and dihedral
/// `abcd = torsion` (angles in radians).
pub fn place_atom(a: Coord3, b: Coord3, c: Coord3, bond: f64, angle: f64, torsion: f64) -> Coord3 {
    let bc = (c - b).unit().expect("coincident atoms");
    let n = (b - a).cross(bc).unit().expect("collinear atoms");
    let m = n.cross(bc);
    let d2 = Coord3::new(-bond * angle.cos(), bond * angle.sin() * torsion.cos(), bond * angle.sin() * torsion.sin());
    c + bc * d2.x + m * d2.y + n * d2.z
}

/// Backbone dihedral preferences: helix, strand, and a loose coil region.
const BASINS: [(f64, f64); 3] = [(-57.0, -47.0), (-120.0, 130.0), (-75.0, 150.0)];

fn template<R: Rng>(rng: &mut R, len: usize, id: &str) -> Result<ProteinChain, SynthError> {
    let rad = f64::to_radians;
    'attempt: for _ in 0..TEMPLATE_TRIES {
        let mut n = vec![Coord3::new(0.0, 0.0, 0.0)];
        let mut ca = vec![Coord3::new(BOND_N_CA, 0.0, 0.0)];
        let t = rad(180.0 - ANGLE_N_CA_C);
        let mut c = vec![ca[0] + Coord3::new(BOND_CA_C * t.cos(), BOND_CA_C * t.sin(), 0.0)];
        let mut psi = Vec::with_capacity(len);
        let mut basin = rng.random_range(0..BASINS.len());
        let mut seg_left = 0usize;
        for i in 1..=len {
            if seg_left == 0 {
                basin = rng.random_range(0..BASINS.len());
                seg_left = rng.random_range(4..12);
            }
            seg_left -= 1;
            let (phi0, psi0) = BASINS[basin];
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                let ps = rad(psi0 + rng.random_range(-25.0..25.0));
                if i == len {
                    psi.push(ps);
                    placed = true;
                    break;
                }
                let ph = rad(phi0 + rng.random_range(-25.0..25.0));
                let (a, b, cc) = (n[i - 1], ca[i - 1], c[i - 1]);
                let nn = place_atom(a, b, cc, BOND_C_N, rad(ANGLE_CA_C_N), ps);
                let nca = place_atom(b, cc, nn, BOND_N_CA, rad(ANGLE_C_N_CA), PI);
                let nc = place_atom(cc, nn, nca, BOND_CA_C, rad(ANGLE_N_CA_C), ph);
                if ca.len() >= 3 && ca[..ca.len() - 2].iter().any(|p| p.dist(nca) < CLASH_DISTANCE) {
                    continue;
                }
                psi.push(ps);
                n.push(nn);
                ca.push(nca);
                c.push(nc);
                placed = true;
                break;
            }
            if !placed {
                continue 'attempt;
            }
        }
        let residues = (0..len)
            .map(|i| Residue {
                index: i,
                n: n[i],
                ca: ca[i],
                c: c[i],
                o: place_atom(n[i], ca[i], c[i], BOND_C_O, rad(ANGLE_CA_C_O), psi[i] + PI),
                cb: None,
                cb_is_virtual: false,
            })
            .collect();
        return Ok(ProteinChain::new(id, residues));
    }
    Err(SynthError::Stuck(len))
}

fn perturb<R: Rng>(rng: &mut R, t: &ProteinChain, sigma: f64, id: String) -> ProteinChain {
    let motion = RigidMotion::random(rng, 20.0);
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    let mut jitter = |p: Coord3| {
        if sigma == 0.0 {
            return p;
        }
        p + Coord3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
    };
    let residues = t
        .residues
        .iter()
        .map(|r| Residue {
            index: r.index,
            n: motion.apply(jitter(r.n)),
            ca: motion.apply(jitter(r.ca)),
            c: motion.apply(jitter(r.c)),
            o: motion.apply(jitter(r.o)),
            cb: None,
            cb_is_virtual: false,
        })
        .collect();
    ensure_cbeta(&ProteinChain::new(id, residues))
}

/// Generates families and their similarity matrix. Deterministic in `spec.seed`.
pub fn generate(spec: &FamilySpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chains = Vec::with_capacity(spec.n_families * spec.members);
    let mut families = Vec::with_capacity(chains.capacity());
    for f in 0..spec.n_families {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let t = template(&mut rng, len, &format!("fam{f:03}"))?;
        for m in 0..spec.members {
            chains.push(perturb(&mut rng, &t, spec.sigma, member_id(f, m)));
            families.push(f);
        }
    }
    let mut matrix = SimilarityMatrix::new(chains.iter().map(|c| c.id.clone()).collect())?;
    for a in 0..chains.len() {
        for b in 0..chains.len() {
            let v = if a == b {
                1.0
            } else if families[a] == families[b] {
                let corr: Vec<(usize, usize)> = (0..chains[a].len()).map(|i| (i, i)).collect();
                // normalized by the row structure
                tm_score_identity(&chains[b], &chains[a], &corr)?.score.min(1.0) as f32
            } else {
                CROSS_FAMILY_TM
            };
            matrix.set(a, b, v)?;
        }
    }
    Ok(SynthData { chains, families, matrix })
}

/// Writes `pdb/<id>.pdb`, `chains.bin`, `sim.tsv` and `families.tsv` under `dir`.
pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<(), SynthError> {
    let pdb_dir = dir.join("pdb");
    fs::create_dir_all(&pdb_dir)?;
    for c in &data.chains {
        write_pdb(c, 'A', BufWriter::new(fs::File::create(pdb_dir.join(format!("{}.pdb", c.id)))?))?;
    }
    write_chains(&data.chains, BufWriter::new(fs::File::create(dir.join("chains.bin"))?))?;
    data.matrix.write_tsv(BufWriter::new(fs::File::create(dir.join("sim.tsv"))?))?;
    let mut fam = String::from("id\tfamily\n");
    for (c, f) in data.chains.iter().zip(&data.families) {
        fam.push_str(&format!("{}\t{}\n", c.id, f));
    }
    fs::write(dir.join("families.tsv"), fam)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::label_similar;
    use crate::geometry::{bond_angle, dihedral};
    use crate::protein_io::read_chains;

    fn ident(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, i)).collect()
    }

    #[test]
    fn place_atom_hits_requested_geometry() {
        let (a, b, c) = (Coord3::new(1.0, 2.0, 0.5), Coord3::new(0.0, 0.3, 0.0), Coord3::new(1.4, 0.0, 0.2));
        for tor in [-2.0, -0.3, 0.0, 1.1, PI] {
            let d = place_atom(a, b, c, 1.5, 1.9, tor);
            assert!((d.dist(c) - 1.5).abs() < 1e-12);
            assert!((bond_angle(b, c, d).unwrap() - 1.9).abs() < 1e-10);
            let got = dihedral(a, b, c, d).unwrap();
            let diff = (got - tor).rem_euclid(2.0 * PI);
            assert!(diff.min(2.0 * PI - diff) < 1e-10, "{got} vs {tor}");
        }
    }

    #[test]
    fn templates_have_ideal_bonds_and_no_clashes() {
        let d = generate(&FamilySpec { n_families: 3, members: 1, min_len: 50, max_len: 70, sigma: 0.0, seed: 4 }).unwrap();
        for ch in &d.chains {
            assert!((50..=70).contains(&ch.len()));
            let r = &ch.residues;
            for i in 0..r.len() {
                assert!((r[i].n.dist(r[i].ca) - BOND_N_CA).abs() < 1e-9);
                assert!((r[i].ca.dist(r[i].c) - BOND_CA_C).abs() < 1e-9);
                if i + 1 < r.len() {
                    assert!((r[i].c.dist(r[i + 1].n) - BOND_C_N).abs() < 1e-9);
                    let omega = dihedral(r[i].ca, r[i].c, r[i + 1].n, r[i + 1].ca).unwrap();
                    assert!((omega.abs() - PI).abs() < 1e-9);
                }
                for j in i + 3..r.len() {
                    assert!(r[i].ca.dist(r[j].ca) >= CLASH_DISTANCE - 1e-9);
                }
                assert!(r[i].cb.is_some());
            }
        }
    }

    #[test]
    fn noiseless_members_score_one() {
        let d = generate(&FamilySpec { n_families: 2, members: 3, min_len: 30, max_len: 40, sigma: 0.0, seed: 1 }).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                if d.families[a] == d.families[b] {
                    assert!((d.matrix.get(a, b) - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn block_structure() {
        let d = generate(&FamilySpec { n_families: 2, members: 2, min_len: 20, max_len: 20, sigma: 0.1, seed: 3 }).unwrap();
        assert_eq!(d.chains.len(), 4);
        assert_eq!(d.matrix.len(), 4);
        assert_eq!(d.families, vec![0, 0, 1, 1]);
        for a in 0..4 {
            for b in 0..4 {
                let v = d.matrix.get(a, b);
                if a / 2 == b / 2 {
                    assert!(v > 0.5);
                } else {
                    assert_eq!(v, CROSS_FAMILY_TM);
                }
            }
        }
    }

    #[test]
    fn noisy_members_score_high() {
        let d = generate(&FamilySpec { n_families: 1, members: 4, min_len: 60, max_len: 60, sigma: 0.5, seed: 8 }).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    let tm = tm_score_identity(&d.chains[a], &d.chains[b], &ident(60)).unwrap().score;
                    assert!((0.8..=1.0).contains(&tm), "{tm}");
                    assert!((d.matrix.get(b, a) as f64 - tm).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn labels_recover_families() {
        let d = generate(&FamilySpec { n_families: 4, members: 3, min_len: 40, max_len: 60, sigma: 0.5, seed: 5 }).unwrap();
        let all: Vec<usize> = (0..12).collect();
        for q in 0..12 {
            let sim = label_similar(&d.matrix, q, &all, 0.9).unwrap();
            let want: Vec<usize> = (0..12).filter(|&b| b != q && d.families[b] == d.families[q]).collect();
            assert_eq!(sim, want);
        }
    }

    #[test]
    fn deterministic_and_writes_files() {
        let spec = FamilySpec { n_families: 2, members: 2, min_len: 15, max_len: 25, sigma: 0.5, seed: 11 };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.chains, b.chains);
        assert_eq!(a.matrix, b.matrix);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&a, dir.path()).unwrap();
        let back = read_chains(fs::File::open(dir.path().join("chains.bin")).unwrap()).unwrap();
        assert_eq!(back.len(), 4);
        let sim = SimilarityMatrix::load(&fs::read(dir.path().join("sim.tsv")).unwrap()).unwrap();
        assert_eq!(sim.len(), 4);
        assert!(dir.path().join("pdb").join(format!("{}.pdb", member_id(1, 1))).exists());
    }

    #[test]
    fn spec_text_round_trip_and_validation() {
        let s = FamilySpec { n_families: 3, members: 2, min_len: 12, max_len: 30, sigma: 0.25, seed: 7 };
        assert_eq!(FamilySpec::from_text(&s.to_text()).unwrap(), s);
        assert!(FamilySpec::from_text("min_len = 5").is_err());
        assert!(FamilySpec::from_text("sigma = -1").is_err());
        assert!(FamilySpec::from_text("colour = red").is_err());
    }
}
