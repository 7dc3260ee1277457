//! Backbone-level protein structure I/O.
//!
//! Reads PDB fixed-column text into a [`ProteinChain`] holding the N, Cα, C, O
//! and Cβ atoms of every residue, synthesizes Cβ positions for residues that
//! lack one, and (de)serializes chains in a compact little-endian binary form.

use std::collections::HashMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::geometry::Coord3;

pub const CHAIN_MAGIC: &[u8; 8] = b"POSHCHN1";

/// Weights of the ideal-geometry Cβ placement `Cα + wa·a + wb·b + wc·c`.
pub const DEFAULT_CBETA_WEIGHTS: [f64; 3] = [-0.58273431, 0.56802827, -0.54067466];

pub const MIN_CHAIN_LENGTH: usize = 3;

#[derive(Debug, Error)]
pub enum ProteinIoError {
    #[error("no chain found{}", .0.as_ref().map(|c| format!(" with id {c:?}")).unwrap_or_default())]
    NoChainFound(Option<String>),
    #[error("chain {id:?} has {len} usable residues, at least {MIN_CHAIN_LENGTH} required")]
    ChainTooShort { id: String, len: usize },
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("bad chain file magic")]
    BadMagic,
    #[error("truncated chain file")]
    Truncated,
    #[error("invalid chain file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    /// Ordinal position in the chain.
    pub index: usize,
    pub n: Coord3,
    pub ca: Coord3,
    pub c: Coord3,
    pub o: Coord3,
    pub cb: Option<Coord3>,
    pub cb_is_virtual: bool,
}

impl Residue {
    /// Cβ position; panics if [`ensure_cbeta`] has not been applied and the
    /// residue had none.
    pub fn cb(&self) -> Coord3 {
        self.cb.expect("residue has no Cβ; call ensure_cbeta first")
    }

    /// The five backbone atoms in the fixed order C, Cα, N, O, Cβ.
    pub fn atoms(&self) -> [Coord3; 5] {
        [self.c, self.ca, self.n, self.o, self.cb()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinChain {
    pub id: String,
    pub residues: Vec<Residue>,
}

impl ProteinChain {
    /// Builds a chain, renumbering residue indices to their ordinals.
    pub fn new(id: impl Into<String>, mut residues: Vec<Residue>) -> Self {
        for (i, r) in residues.iter_mut().enumerate() {
            r.index = i;
        }
        Self { id: id.into(), residues }
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn ca_coords(&self) -> Vec<Coord3> {
        self.residues.iter().map(|r| r.ca).collect()
    }

    /// Contiguous sub-chain `[start, start + len)`, renumbered from zero.
    pub fn window(&self, start: usize, len: usize) -> ProteinChain {
        let residues = self.residues[start..start + len].to_vec();
        ProteinChain::new(format!("{}[{}..{}]", self.id, start, start + len), residues)
    }

    /// Applies `f` to every atom coordinate.
    pub fn map_coords(&self, f: impl Fn(Coord3) -> Coord3) -> ProteinChain {
        let residues = self
            .residues
            .iter()
            .map(|r| Residue {
                index: r.index,
                n: f(r.n),
                ca: f(r.ca),
                c: f(r.c),
                o: f(r.o),
                cb: r.cb.map(&f),
                cb_is_virtual: r.cb_is_virtual,
            })
            .collect();
        ProteinChain { id: self.id.clone(), residues }
    }
}

/// Result of parsing, including the number of residues dropped for missing
/// backbone atoms.
#[derive(Debug, Clone)]
pub struct ParsedChain {
    pub chain: ProteinChain,
    pub dropped_residues: usize,
}

#[derive(Default)]
struct AtomSlot {
    coord: Coord3,
    occupancy: f64,
}

#[derive(Default)]
struct ResidueAtoms {
    atoms: HashMap<&'static str, AtomSlot>,
}

fn atom_key(name: &str) -> Option<&'static str> {
    match name {
        "N" => Some("N"),
        "CA" => Some("CA"),
        "C" => Some("C"),
        "O" => Some("O"),
        "CB" => Some("CB"),
        _ => None,
    }
}

fn column(line: &str, from: usize, to: usize) -> &str {
    // Columns are 1-based and inclusive, lines may be short.
    let len = line.len();
    if from > len {
        return "";
    }
    line.get(from - 1..to.min(len)).unwrap_or("")
}

fn parse_f64(line: &str, lineno: usize, from: usize, to: usize, what: &str) -> Result<f64, ProteinIoError> {
    let s = column(line, from, to).trim();
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ProteinIoError::MalformedRecord {
            line: lineno,
            reason: format!("cannot parse {what} from {s:?}"),
        })
}

/// Parses the first chain (or the chain named `chain_id`) of a PDB file.
pub fn parse_pdb(bytes: &[u8], chain_id: Option<&str>) -> Result<ProteinChain, ProteinIoError> {
    let parsed = parse_pdb_report(bytes, chain_id)?;
    if parsed.dropped_residues > 0 {
        log::warn!(
            "chain {}: dropped {} residue(s) missing backbone atoms",
            parsed.chain.id,
            parsed.dropped_residues
        );
    }
    Ok(parsed.chain)
}

pub fn parse_pdb_report(bytes: &[u8], chain_id: Option<&str>) -> Result<ParsedChain, ProteinIoError> {
    let text = String::from_utf8_lossy(bytes);
    let wanted = chain_id.map(|c| c.trim().to_string());

    let mut selected: Option<String> = None;
    // (resSeq, iCode) in file order
    let mut order: Vec<(i64, char)> = Vec::new();
    let mut residues: HashMap<(i64, char), ResidueAtoms> = HashMap::new();
    let mut first_icode: HashMap<i64, char> = HashMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        let chain = column(line, 22, 22).trim().to_string();
        match (&wanted, &selected) {
            (Some(w), _) if *w != chain => continue,
            (None, Some(s)) if *s != chain => continue,
            _ => {}
        }
        let name = column(line, 13, 16).trim();
        let Some(key) = atom_key(name) else { continue };
        if selected.is_none() {
            selected = Some(chain.clone());
        }

        let res_seq: i64 = column(line, 23, 26).trim().parse().map_err(|_| {
            ProteinIoError::MalformedRecord {
                line: lineno,
                reason: format!("bad residue number {:?}", column(line, 23, 26)),
            }
        })?;
        let icode = column(line, 27, 27).chars().next().unwrap_or(' ');
        let first = *first_icode.entry(res_seq).or_insert(icode);
        if first != icode {
            continue;
        }
        let coord = Coord3::new(
            parse_f64(line, lineno, 31, 38, "x")?,
            parse_f64(line, lineno, 39, 46, "y")?,
            parse_f64(line, lineno, 47, 54, "z")?,
        );
        let occ_field = column(line, 55, 60).trim();
        let occupancy = if occ_field.is_empty() {
            1.0
        } else {
            occ_field.parse::<f64>().map_err(|_| ProteinIoError::MalformedRecord {
                line: lineno,
                reason: format!("bad occupancy {occ_field:?}"),
            })?
        };

        let rkey = (res_seq, icode);
        let entry = residues.entry(rkey).or_insert_with(|| {
            order.push(rkey);
            ResidueAtoms::default()
        });
        match entry.atoms.get_mut(key) {
            Some(slot) if occupancy > slot.occupancy => {
                *slot = AtomSlot { coord, occupancy };
            }
            Some(_) => {}
            None => {
                entry.atoms.insert(key, AtomSlot { coord, occupancy });
            }
        }
    }

    let Some(id) = selected else {
        return Err(ProteinIoError::NoChainFound(wanted));
    };

    let mut out = Vec::with_capacity(order.len());
    let mut dropped = 0;
    for key in &order {
        let atoms = &residues[key].atoms;
        let get = |k: &str| atoms.get(k).map(|s| s.coord);
        match (get("N"), get("CA"), get("C"), get("O")) {
            (Some(n), Some(ca), Some(c), Some(o)) => out.push(Residue {
                index: out.len(),
                n,
                ca,
                c,
                o,
                cb: get("CB"),
                cb_is_virtual: false,
            }),
            _ => dropped += 1,
        }
    }
    if out.len() < MIN_CHAIN_LENGTH {
        return Err(ProteinIoError::ChainTooShort { id, len: out.len() });
    }
    Ok(ParsedChain { chain: ProteinChain::new(id, out), dropped_residues: dropped })
}

/// Fills in a virtual Cβ for every residue that lacks one.
pub fn ensure_cbeta(chain: &ProteinChain) -> ProteinChain {
    ensure_cbeta_with(chain, DEFAULT_CBETA_WEIGHTS)
}

pub fn ensure_cbeta_with(chain: &ProteinChain, weights: [f64; 3]) -> ProteinChain {
    let mut out = chain.clone();
    for r in &mut out.residues {
        if r.cb.is_none() {
            r.cb = Some(virtual_cbeta(r.n, r.ca, r.c, weights));
            r.cb_is_virtual = true;
        }
    }
    out
}

pub fn virtual_cbeta(n: Coord3, ca: Coord3, c: Coord3, [wa, wb, wc]: [f64; 3]) -> Coord3 {
    let b = ca - n;
    let cv = c - ca;
    let a = b.cross(cv);
    ca + a * wa + b * wb + cv * wc
}

/// Writes backbone atoms as PDB `ATOM` records. Virtual Cβ atoms are omitted.
pub fn write_pdb<W: Write>(chain: &ProteinChain, chain_letter: char, mut w: W) -> std::io::Result<()> {
    let mut serial = 1;
    for (i, r) in chain.residues.iter().enumerate() {
        let mut atoms = vec![("N", r.n, 'N'), ("CA", r.ca, 'C'), ("C", r.c, 'C'), ("O", r.o, 'O')];
        if let (Some(cb), false) = (r.cb, r.cb_is_virtual) {
            atoms.push(("CB", cb, 'C'));
        }
        for (name, p, element) in atoms {
            writeln!(
                w,
                "ATOM  {serial:>5} {name:<4} ALA {chain_letter}{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {element:>2}",
                i + 1,
                p.x,
                p.y,
                p.z,
                1.0,
                0.0,
                name = format!(" {name}"),
            )?;
            serial += 1;
        }
    }
    writeln!(w, "TER")?;
    writeln!(w, "END")
}

fn put_coord(buf: &mut Vec<u8>, c: Coord3) {
    for v in c.to_array() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

const FLAG_VIRTUAL: u8 = 1;
const FLAG_ABSENT: u8 = 2;

/// Serializes one chain record.
pub fn encode_chain(chain: &ProteinChain) -> Vec<u8> {
    let id = chain.id.as_bytes();
    let mut buf = Vec::with_capacity(8 + 2 + id.len() + 4 + chain.len() * 121);
    buf.extend_from_slice(CHAIN_MAGIC);
    buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(chain.len() as u32).to_le_bytes());
    for r in &chain.residues {
        put_coord(&mut buf, r.n);
        put_coord(&mut buf, r.ca);
        put_coord(&mut buf, r.c);
        put_coord(&mut buf, r.o);
        put_coord(&mut buf, r.cb.unwrap_or(Coord3::new(f64::NAN, f64::NAN, f64::NAN)));
        let flag = match (r.cb, r.cb_is_virtual) {
            (None, _) => FLAG_ABSENT,
            (Some(_), true) => FLAG_VIRTUAL,
            (Some(_), false) => 0,
        };
        buf.push(flag);
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProteinIoError> {
        let end = self.pos.checked_add(n).ok_or(ProteinIoError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(ProteinIoError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64, ProteinIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn coord(&mut self) -> Result<Coord3, ProteinIoError> {
        Ok(Coord3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

/// Decodes one chain record from the front of `data`, returning the chain and
/// the number of bytes consumed.
pub fn decode_chain(data: &[u8]) -> Result<(ProteinChain, usize), ProteinIoError> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.take(8)? != CHAIN_MAGIC {
        return Err(ProteinIoError::BadMagic);
    }
    let id_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
    let id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|e| ProteinIoError::Invalid(format!("chain id is not UTF-8: {e}")))?
        .to_string();
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut residues = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let n = cur.coord()?;
        let ca = cur.coord()?;
        let c = cur.coord()?;
        let o = cur.coord()?;
        let cb = cur.coord()?;
        let flag = cur.take(1)?[0];
        let (cb, cb_is_virtual) = match flag {
            0 => (Some(cb), false),
            FLAG_VIRTUAL => (Some(cb), true),
            FLAG_ABSENT => (None, false),
            f => return Err(ProteinIoError::Invalid(format!("unknown residue flag {f}"))),
        };
        residues.push(Residue { index, n, ca, c, o, cb, cb_is_virtual });
    }
    Ok((ProteinChain { id, residues }, cur.pos))
}

/// Writes a sequence of chain records.
pub fn write_chains<W: Write>(chains: &[ProteinChain], mut w: W) -> std::io::Result<()> {
    for c in chains {
        w.write_all(&encode_chain(c))?;
    }
    Ok(())
}

/// Reads every chain record in a concatenated chain file.
pub fn read_chains<R: Read>(mut r: R) -> Result<Vec<ProteinChain>, ProteinIoError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < data.len() {
        let (chain, used) = decode_chain(&data[pos..])?;
        out.push(chain);
        pos += used;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidMotion;
    use proptest::prelude::*;
    use rand::SeedableRng;

    const THREE_RES: &str = "\
HEADER    TEST
ATOM      1  N   ALA A   1      -1.458   0.000   0.000  1.00  0.00           N
ATOM      2  CA  ALA A   1       0.000   0.000   0.000  1.00  0.00           C
ATOM      3  C   ALA A   1       0.551   1.420   0.000  1.00  0.00           C
ATOM      4  O   ALA A   1      -0.200   2.390   0.000  1.00  0.00           O
ATOM      5  CB  ALA A   1      -0.520  -0.780   1.200  1.00  0.00           C
ATOM      6  N   GLY A   2       1.880   1.540   0.000  1.00  0.00           N
ATOM      7  CA  GLY A   2       2.540   2.840   0.000  1.00  0.00           C
ATOM      8  C   GLY A   2       4.050   2.700   0.000  1.00  0.00           C
ATOM      9  O   GLY A   2       4.620   1.610   0.000  1.00  0.00           O
ATOM     10  N   ALA A   3       4.720   3.850   0.000  1.00  0.00           N
ATOM     11  CA  ALA A   3       6.170   3.900   0.000  1.00  0.00           C
ATOM     12  C   ALA A   3       6.700   5.330   0.000  1.00  0.00           C
ATOM     13  O   ALA A   3       5.950   6.300   0.000  1.00  0.00           O
HETATM   14  O   HOH A 101       9.000   9.000   9.000  1.00  0.00           O
END
";

    #[test]
    fn parses_minimal_chain() {
        let chain = parse_pdb(THREE_RES.as_bytes(), None).unwrap();
        assert_eq!(chain.id, "A");
        assert_eq!(chain.len(), 3);
        assert_eq!(chain.residues[1].ca, Coord3::new(2.54, 2.84, 0.0));
        assert!(chain.residues[0].cb.is_some());
        assert!(chain.residues[1].cb.is_none());
        assert_eq!(chain.residues.iter().map(|r| r.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn absent_chain_is_an_error() {
        let err = parse_pdb(THREE_RES.as_bytes(), Some("B")).unwrap_err();
        assert!(matches!(err, ProteinIoError::NoChainFound(Some(ref c)) if c == "B"));
    }

    #[test]
    fn missing_oxygen_drops_residue_and_chain_becomes_too_short() {
        let text: String = THREE_RES
            .lines()
            .filter(|l| !l.starts_with("ATOM      9"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = parse_pdb(text.as_bytes(), None).unwrap_err();
        assert!(matches!(err, ProteinIoError::ChainTooShort { len: 2, .. }));
    }

    #[test]
    fn altloc_prefers_highest_occupancy() {
        let mut text = String::from(THREE_RES);
        text = text.replace(
            "ATOM      2  CA  ALA A   1       0.000   0.000   0.000  1.00",
            "ATOM      2  CA AALA A   1       0.000   0.000   0.000  0.40\n\
             ATOM      2  CA BALA A   1       0.100   0.100   0.100  0.60",
        );
        let chain = parse_pdb(text.as_bytes(), None).unwrap();
        assert_eq!(chain.residues[0].ca, Coord3::new(0.1, 0.1, 0.1));
    }

    #[test]
    fn malformed_coordinate_is_reported() {
        let text = THREE_RES.replace("  -1.458   0.000", "  -1.4x8   0.000");
        let err = parse_pdb(text.as_bytes(), None).unwrap_err();
        assert!(matches!(err, ProteinIoError::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn cbeta_real_atom_untouched() {
        let chain = ensure_cbeta(&parse_pdb(THREE_RES.as_bytes(), None).unwrap());
        assert_eq!(chain.residues[0].cb, Some(Coord3::new(-0.52, -0.78, 1.2)));
        assert!(!chain.residues[0].cb_is_virtual);
        assert!(chain.residues[1].cb_is_virtual);
    }

    #[test]
    fn cbeta_collinear_backbone() {
        let n = Coord3::new(-1.0, 0.0, 0.0);
        let ca = Coord3::ZERO;
        let c = Coord3::new(1.5, 0.0, 0.0);
        let [_, wb, wc] = DEFAULT_CBETA_WEIGHTS;
        let cb = virtual_cbeta(n, ca, c, DEFAULT_CBETA_WEIGHTS);
        let expect = ca + (ca - n) * wb + (c - ca) * wc;
        assert_eq!(cb, expect);
    }

    #[test]
    fn cbeta_direct_evaluation() {
        let n = Coord3::new(-1.45, 0.0, 0.0);
        let ca = Coord3::ZERO;
        let c = Coord3::new(0.55, 1.42, 0.0);
        // b = (1.45, 0, 0), c = (0.55, 1.42, 0), a = b x c = (0, 0, 2.059)
        let a_z = 1.45 * 1.42;
        let expect = Coord3::new(
            0.56802827 * 1.45 - 0.54067466 * 0.55,
            -0.54067466 * 1.42,
            -0.58273431 * a_z,
        );
        let cb = virtual_cbeta(n, ca, c, DEFAULT_CBETA_WEIGHTS);
        assert!((cb - expect).norm() < 1e-12, "{cb:?} vs {expect:?}");
    }

    #[test]
    fn cbeta_is_idempotent() {
        let chain = parse_pdb(THREE_RES.as_bytes(), None).unwrap();
        let once = ensure_cbeta(&chain);
        assert_eq!(ensure_cbeta(&once), once);
    }

    #[test]
    fn chain_round_trip() {
        let chain = ensure_cbeta(&parse_pdb(THREE_RES.as_bytes(), None).unwrap());
        let mut raw = parse_pdb(THREE_RES.as_bytes(), None).unwrap();
        raw.id = "raw".into();
        let mut buf = Vec::new();
        write_chains(&[chain.clone(), raw.clone()], &mut buf).unwrap();
        let back = read_chains(&buf[..]).unwrap();
        assert_eq!(back, vec![chain, raw]);
    }

    #[test]
    fn truncated_chain_file() {
        let chain = ensure_cbeta(&parse_pdb(THREE_RES.as_bytes(), None).unwrap());
        let buf = encode_chain(&chain);
        assert!(matches!(decode_chain(&buf[..buf.len() - 3]), Err(ProteinIoError::Truncated)));
        assert!(matches!(decode_chain(b"NOTMAGIC"), Err(ProteinIoError::BadMagic)));
    }

    #[test]
    fn pdb_writer_round_trip() {
        let chain = parse_pdb(THREE_RES.as_bytes(), None).unwrap();
        let mut buf = Vec::new();
        write_pdb(&chain, 'A', &mut buf).unwrap();
        let back = parse_pdb(&buf, None).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.residues.iter().zip(&chain.residues) {
            assert!((a.ca - b.ca).norm() < 1e-3);
            assert_eq!(a.cb.is_some(), b.cb.is_some());
        }
    }

    proptest! {
        #[test]
        fn cbeta_rigid_equivariance(q in proptest::array::uniform4(-1.0f64..1.0), seed in 0u64..1000) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let motion = RigidMotion::from_quaternion(q, RigidMotion::random(&mut rng, 30.0).translation);
            let mut chain = parse_pdb(THREE_RES.as_bytes(), None).unwrap();
            chain.residues[0].cb = None;
            let a = ensure_cbeta(&chain.map_coords(|p| motion.apply(p)));
            let b = ensure_cbeta(&chain).map_coords(|p| motion.apply(p));
            for (ra, rb) in a.residues.iter().zip(&b.residues) {
                prop_assert!((ra.cb() - rb.cb()).norm() < 1e-9);
            }
        }
    }
}
