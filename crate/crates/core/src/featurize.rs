//! Hand-crafted graph features for a protein chain.
//!
//! Nodes are residues carrying the sine and cosine of three bond angles and
//! three dihedrals. Each residue is connected to its `k` nearest neighbours,
//! and each directed edge carries Gaussian RBF expansions of the 25
//! inter-residue distances between the backbone atoms C, Cα, N, O and Cβ.
//! All features depend only on internal distances and angles, so they are
//! invariant to rigid motions of the input.

use std::io::{Read, Write};

use thiserror::Error;

use crate::geometry::{bond_angle, dihedral, Coord3};
use crate::protein_io::ProteinChain;

pub const NODE_FEATURE_DIM: usize = 12;
pub const ATOM_PAIRS: usize = 25;
pub const GRAPH_MAGIC: &[u8; 8] = b"POSHGRF1";

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("degenerate geometry at residue {residue}: {what}")]
    DegenerateGeometry { residue: usize, what: &'static str },
    #[error("chain has {0} residues, need at least 2")]
    ChainTooShort(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("residue {0} has no Cβ")]
    MissingCbeta(usize),
    #[error("invalid RBF bank: {0}")]
    InvalidRbf(String),
    #[error("bad graph file magic")]
    BadMagic,
    #[error("truncated graph file")]
    Truncated,
    #[error("invalid graph file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Gaussian radial basis bank with linearly spaced centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfBank {
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl RbfBank {
    /// `count` centers evenly spaced on `[min, max]`, width equal to the spacing.
    pub fn linear(count: usize, min: f64, max: f64) -> Result<Self, FeaturizeError> {
        if count < 2 || !(max > min) {
            return Err(FeaturizeError::InvalidRbf(format!(
                "need count >= 2 and max > min, got {count} on [{min}, {max}]"
            )));
        }
        let step = (max - min) / (count - 1) as f64;
        let centers = (0..count).map(|k| min + step * k as f64).collect();
        Ok(Self { centers, sigma: step })
    }

    pub fn with_sigma(centers: Vec<f64>, sigma: f64) -> Result<Self, FeaturizeError> {
        if centers.is_empty() || centers.windows(2).any(|w| w[1] <= w[0]) || !(sigma > 0.0) {
            return Err(FeaturizeError::InvalidRbf(
                "centers must be strictly increasing and sigma positive".into(),
            ));
        }
        Ok(Self { centers, sigma })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.centers[0]
    }

    pub fn max(&self) -> f64 {
        *self.centers.last().unwrap()
    }
}

impl Default for RbfBank {
    fn default() -> Self {
        RbfBank::linear(16, 0.0, 20.0).unwrap()
    }
}

/// How residues are compared when picking nearest neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnnMetric {
    /// Euclidean distance between Cα coordinates.
    #[default]
    CalphaCoords,
    /// Euclidean distance between the 12-dimensional angle feature rows.
    NodeFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizeConfig {
    pub k: usize,
    pub rbf: RbfBank,
    pub metric: KnnMetric,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self { k: 30, rbf: RbfBank::default(), metric: KnnMetric::CalphaCoords }
    }
}

impl FeaturizeConfig {
    pub fn edge_dim(&self) -> usize {
        ATOM_PAIRS * self.rbf.len()
    }
}

/// Directed edge list, `src -> dst`, grouped by source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgeList {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().zip(&self.dst).map(|(&i, &j)| (i as usize, j as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinGraph {
    pub id: String,
    pub n_residues: usize,
    /// Row-major `n x 12`.
    pub node_feats: Vec<f64>,
    pub edges: EdgeList,
    /// Row-major `m x edge_dim`.
    pub edge_feats: Vec<f64>,
    pub edge_dim: usize,
    pub k: usize,
    pub rbf: RbfBank,
}

impl ProteinGraph {
    pub fn node_row(&self, i: usize) -> &[f64] {
        &self.node_feats[i * NODE_FEATURE_DIM..(i + 1) * NODE_FEATURE_DIM]
    }

    pub fn edge_row(&self, e: usize) -> &[f64] {
        &self.edge_feats[e * self.edge_dim..(e + 1) * self.edge_dim]
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Per-residue `[α, β, γ]` bond angles; `None` where undefined at the termini.
pub fn bond_angles(chain: &ProteinChain) -> Result<Vec<[Option<f64>; 3]>, FeaturizeError> {
    let res = &chain.residues;
    if res.len() < 2 {
        return Err(FeaturizeError::ChainTooShort(res.len()));
    }
    let degenerate = |residue, what| FeaturizeError::DegenerateGeometry { residue, what };
    let mut out = Vec::with_capacity(res.len());
    for i in 0..res.len() {
        let r = &res[i];
        let alpha = bond_angle(r.n, r.ca, r.c).ok_or_else(|| degenerate(i, "zero-length N-Cα or Cα-C bond"))?;
        let beta = if i > 0 {
            Some(bond_angle(res[i - 1].c, r.n, r.ca).ok_or_else(|| degenerate(i, "zero-length C-N or N-Cα bond"))?)
        } else {
            None
        };
        let gamma = if i + 1 < res.len() {
            Some(bond_angle(r.ca, r.c, res[i + 1].n).ok_or_else(|| degenerate(i, "zero-length Cα-C or C-N bond"))?)
        } else {
            None
        };
        out.push([Some(alpha), beta, gamma]);
    }
    Ok(out)
}

/// Per-residue `[φ, ψ, ω]` dihedrals in `(-π, π]`; `None` at the termini.
pub fn dihedral_angles(chain: &ProteinChain) -> Result<Vec<[Option<f64>; 3]>, FeaturizeError> {
    let res = &chain.residues;
    if res.len() < 2 {
        return Err(FeaturizeError::ChainTooShort(res.len()));
    }
    let torsion = |i: usize, p: [Coord3; 4], what| {
        dihedral(p[0], p[1], p[2], p[3]).ok_or(FeaturizeError::DegenerateGeometry { residue: i, what })
    };
    let mut out = Vec::with_capacity(res.len());
    for i in 0..res.len() {
        let r = &res[i];
        let (phi, omega) = if i > 0 {
            let p = &res[i - 1];
            (
                Some(torsion(i, [p.c, r.n, r.ca, r.c], "collinear atoms in phi")?),
                Some(torsion(i, [p.ca, p.c, r.n, r.ca], "collinear atoms in omega")?),
            )
        } else {
            (None, None)
        };
        let psi = if i + 1 < res.len() {
            Some(torsion(i, [r.n, r.ca, r.c, res[i + 1].n], "collinear atoms in psi")?)
        } else {
            None
        };
        out.push([phi, psi, omega]);
    }
    Ok(out)
}

/// `n x 12` matrix of `[sin, cos]` pairs for α, β, γ, φ, ψ, ω; absent angles
/// become `(0, 0)`.
pub fn node_features(chain: &ProteinChain) -> Result<Vec<f64>, FeaturizeError> {
    let bonds = bond_angles(chain)?;
    let dihedrals = dihedral_angles(chain)?;
    let mut out = Vec::with_capacity(chain.len() * NODE_FEATURE_DIM);
    for (b, d) in bonds.iter().zip(&dihedrals) {
        for angle in b.iter().chain(d.iter()) {
            match angle {
                Some(a) => out.extend_from_slice(&[a.sin(), a.cos()]),
                None => out.extend_from_slice(&[0.0, 0.0]),
            }
        }
    }
    Ok(out)
}

/// kNN over arbitrary points given a squared-distance function. Ties go to the
/// smaller index; edges come out grouped by source in ascending distance.
fn knn_by<F: Fn(usize, usize) -> f64>(n: usize, k: usize, dist2: F) -> EdgeList {
    let kk = k.min(n.saturating_sub(1));
    let mut edges = EdgeList {
        src: Vec::with_capacity(n * kk),
        dst: Vec::with_capacity(n * kk),
    };
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (dist2(i, j), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk, cmp);
            cand.truncate(kk);
        }
        cand.sort_unstable_by(cmp);
        for &(_, j) in &cand {
            edges.src.push(i as u32);
            edges.dst.push(j as u32);
        }
    }
    edges
}

/// Each residue connected to its `min(k, n-1)` nearest residues by Cα distance.
pub fn knn_graph(chain: &ProteinChain, k: usize) -> Result<EdgeList, FeaturizeError> {
    if chain.len() < 2 {
        return Err(FeaturizeError::ChainTooShort(chain.len()));
    }
    if k == 0 {
        return Err(FeaturizeError::ZeroK);
    }
    let ca = chain.ca_coords();
    Ok(knn_by(ca.len(), k, |i, j| (ca[i] - ca[j]).norm_sq()))
}

/// kNN in the 12-dimensional node-feature space.
pub fn knn_graph_features(node_feats: &[f64], k: usize) -> Result<EdgeList, FeaturizeError> {
    let n = node_feats.len() / NODE_FEATURE_DIM;
    if n < 2 {
        return Err(FeaturizeError::ChainTooShort(n));
    }
    if k == 0 {
        return Err(FeaturizeError::ZeroK);
    }
    let row = |i: usize| &node_feats[i * NODE_FEATURE_DIM..(i + 1) * NODE_FEATURE_DIM];
    Ok(knn_by(n, k, |i, j| row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum()))
}

/// Smallest positive normal f32. RBF responses are floored here so far-tail
/// values stay strictly positive after the f32 cache round-trip.
const RBF_FLOOR: f64 = f32::MIN_POSITIVE as f64;

pub fn rbf_encode(distance: f64, bank: &RbfBank) -> Vec<f64> {
    let mut out = Vec::with_capacity(bank.len());
    rbf_encode_into(distance, bank, &mut out);
    out
}

fn rbf_encode_into(distance: f64, bank: &RbfBank, out: &mut Vec<f64>) {
    let denom = 2.0 * bank.sigma * bank.sigma;
    out.extend(bank.centers.iter().map(|mu| {
        let d = distance - mu;
        (-(d * d) / denom).exp().max(RBF_FLOOR)
    }));
}

/// `m x (25 * n_rbf)` edge features. Row `e` holds, for the edge `(i, j)`, the
/// RBF expansion of `|X_i - Y_j|` for X, Y over [C, Cα, N, O, Cβ], X major.
pub fn edge_features(chain: &ProteinChain, edges: &EdgeList, bank: &RbfBank) -> Result<Vec<f64>, FeaturizeError> {
    let atoms: Vec<[Coord3; 5]> = chain
        .residues
        .iter()
        .map(|r| {
            let cb = r.cb.ok_or(FeaturizeError::MissingCbeta(r.index))?;
            Ok([r.c, r.ca, r.n, r.o, cb])
        })
        .collect::<Result<_, FeaturizeError>>()?;
    let mut out = Vec::with_capacity(edges.len() * ATOM_PAIRS * bank.len());
    for (i, j) in edges.iter() {
        for x in &atoms[i] {
            for y in &atoms[j] {
                rbf_encode_into(x.dist(*y), bank, &mut out);
            }
        }
    }
    Ok(out)
}

/// Full featurization. The chain must already carry Cβ atoms.
pub fn build_graph(chain: &ProteinChain, config: &FeaturizeConfig) -> Result<ProteinGraph, FeaturizeError> {
    let node_feats = node_features(chain)?;
    let edges = match config.metric {
        KnnMetric::CalphaCoords => knn_graph(chain, config.k)?,
        KnnMetric::NodeFeatures => knn_graph_features(&node_feats, config.k)?,
    };
    let edge_feats = edge_features(chain, &edges, &config.rbf)?;
    Ok(ProteinGraph {
        id: chain.id.clone(),
        n_residues: chain.len(),
        node_feats,
        edges,
        edge_feats,
        edge_dim: config.edge_dim(),
        k: config.k,
        rbf: config.rbf.clone(),
    })
}

/// Serializes one graph record: magic, header, f32 node features, u32 edge
/// pairs, f32 edge features.
pub fn encode_graph(g: &ProteinGraph) -> Vec<u8> {
    let n = g.n_residues;
    let m = g.n_edges();
    let mut buf = Vec::with_capacity(8 + 64 + 4 * (n * NODE_FEATURE_DIM + 2 * m + m * g.edge_dim));
    buf.extend_from_slice(GRAPH_MAGIC);
    for v in [n, m, NODE_FEATURE_DIM, g.edge_dim, g.k, g.rbf.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [g.rbf.min(), g.rbf.max(), g.rbf.sigma] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &g.node_feats {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for (i, j) in g.edges.iter() {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        buf.extend_from_slice(&(j as u32).to_le_bytes());
    }
    for &v in &g.edge_feats {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeaturizeError> {
        let end = self.pos.checked_add(n).ok_or(FeaturizeError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(FeaturizeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, FeaturizeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, FeaturizeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, FeaturizeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FeaturizeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes one graph record; returns the graph (with an empty id) and the
/// number of bytes consumed.
pub fn decode_graph(data: &[u8]) -> Result<(ProteinGraph, usize), FeaturizeError> {
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != GRAPH_MAGIC {
        return Err(FeaturizeError::BadMagic);
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let d_v = r.u32()? as usize;
    let d_e = r.u32()? as usize;
    let k = r.u32()? as usize;
    let n_rbf = r.u32()? as usize;
    let (mu_min, mu_max, sigma) = (r.f64()?, r.f64()?, r.f64()?);
    if d_v != NODE_FEATURE_DIM || d_e != ATOM_PAIRS * n_rbf || n_rbf < 2 {
        return Err(FeaturizeError::Invalid(format!("inconsistent dims d_v={d_v} d_e={d_e} n_rbf={n_rbf}")));
    }
    let step = (mu_max - mu_min) / (n_rbf - 1) as f64;
    let rbf = RbfBank::with_sigma((0..n_rbf).map(|i| mu_min + step * i as f64).collect(), sigma)?;
    let node_feats = (0..n * d_v).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
    let mut edges = EdgeList { src: Vec::with_capacity(m), dst: Vec::with_capacity(m) };
    for _ in 0..m {
        let (i, j) = (r.u32()?, r.u32()?);
        if i as usize >= n || j as usize >= n {
            return Err(FeaturizeError::Invalid(format!("edge ({i}, {j}) out of range for n={n}")));
        }
        edges.src.push(i);
        edges.dst.push(j);
    }
    let edge_feats = (0..m * d_e).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
    let g = ProteinGraph { id: String::new(), n_residues: n, node_feats, edges, edge_feats, edge_dim: d_e, k, rbf };
    Ok((g, r.pos))
}

/// Writes a graph collection: each entry is a u16 id length, the UTF-8 id,
/// then the graph record.
pub fn write_graphs<W: Write>(graphs: &[ProteinGraph], mut w: W) -> std::io::Result<()> {
    for g in graphs {
        w.write_all(&(g.id.len() as u16).to_le_bytes())?;
        w.write_all(g.id.as_bytes())?;
        w.write_all(&encode_graph(g))?;
    }
    Ok(())
}

pub fn read_graphs<R: Read>(mut src: R) -> Result<Vec<ProteinGraph>, FeaturizeError> {
    let mut data = Vec::new();
    src.read_to_end(&mut data)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < data.len() {
        let mut r = Reader { data: &data[pos..], pos: 0 };
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| FeaturizeError::Invalid(format!("graph id is not UTF-8: {e}")))?
            .to_string();
        pos += r.pos;
        let (mut g, used) = decode_graph(&data[pos..])?;
        g.id = id;
        out.push(g);
        pos += used;
    }
    Ok(out)
}
