//! Dense pairwise TM-score matrix with a TSV exchange format and a binary cache.
//!
//! TSV: one line per unordered pair, `id_a<TAB>id_b<TAB>tm_ab<TAB>tm_ba`, where
//! `tm_ab` is normalized by the length of `a`. Lines starting with `#` are
//! comments. Pairs that never appear score 0.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use thiserror::Error;

pub const SIMMATRIX_MAGIC: &[u8; 8] = b"POSHTMM1";

#[derive(Debug, Error)]
pub enum SimMatrixError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("not a similarity matrix cache")]
    BadMagic,
    #[error("truncated similarity matrix cache")]
    Truncated,
    #[error("unknown structure id `{0}`")]
    UnknownId(String),
    #[error("duplicate structure id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    /// Row-major `n x n`; `scores[a * n + b]` is TM(a, b) normalized by `|a|`.
    scores: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn new(ids: Vec<String>) -> Result<Self, SimMatrixError> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(SimMatrixError::DuplicateId(id.clone()));
            }
        }
        let n = ids.len();
        Ok(Self { ids, index, scores: vec![0.0; n * n] })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, a: usize, b: usize) -> f32 {
        self.scores[a * self.ids.len() + b]
    }

    pub fn row(&self, a: usize) -> &[f32] {
        let n = self.ids.len();
        &self.scores[a * n..(a + 1) * n]
    }

    pub fn set(&mut self, a: usize, b: usize, v: f32) -> Result<(), SimMatrixError> {
        if !(0.0..=1.0).contains(&v) {
            return Err(SimMatrixError::OutOfRange(v as f64));
        }
        let n = self.ids.len();
        self.scores[a * n + b] = v;
        Ok(())
    }

    /// Restriction to `ids` (in that order).
    pub fn subset(&self, ids: &[String]) -> Result<Self, SimMatrixError> {
        let idx: Vec<usize> = ids.iter().map(|id| self.index_of(id).ok_or_else(|| SimMatrixError::UnknownId(id.clone()))).collect::<Result<_, _>>()?;
        let mut out = Self::new(ids.to_vec())?;
        for (i, &a) in idx.iter().enumerate() {
            for (j, &b) in idx.iter().enumerate() {
                out.scores[i * ids.len() + j] = self.get(a, b);
            }
        }
        Ok(out)
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, SimMatrixError> {
        let mut ids = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split('\t').collect();
            if f.len() != 4 {
                return Err(SimMatrixError::Parse { line: i + 1, reason: format!("expected 4 tab-separated fields, got {}", f.len()) });
            }
            let num = |s: &str| {
                s.trim().parse::<f32>().map_err(|_| SimMatrixError::Parse { line: i + 1, reason: format!("bad score `{s}`") })
            };
            let (ab, ba) = (num(f[2])?, num(f[3])?);
            let mut slot = |id: &str| {
                *seen.entry(id.to_string()).or_insert_with(|| {
                    ids.push(id.to_string());
                    ids.len() - 1
                })
            };
            let (a, b) = (slot(f[0]), slot(f[1]));
            entries.push((a, b, ab, ba));
        }
        let mut m = Self::new(ids)?;
        for (a, b, ab, ba) in entries {
            m.set(a, b, ab)?;
            m.set(b, a, ba)?;
        }
        Ok(m)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for a in 0..self.len() {
            for b in a + 1..self.len() {
                writeln!(w, "{}\t{}\t{}\t{}", self.ids[a], self.ids[b], self.get(a, b), self.get(b, a))?;
            }
        }
        Ok(())
    }

    pub fn write_cache<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(16 + self.scores.len() * 4);
        buf.extend_from_slice(SIMMATRIX_MAGIC);
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for s in &self.scores {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self, SimMatrixError> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], SimMatrixError> {
            let s = data.get(pos..pos + n).ok_or(SimMatrixError::Truncated)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != SIMMATRIX_MAGIC {
            return Err(SimMatrixError::BadMagic);
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|_| SimMatrixError::Truncated)?;
            ids.push(id.to_string());
        }
        let mut m = Self::new(ids)?;
        let raw = take(n * n * 4)?;
        m.scores = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(m)
    }

    /// Reads either format, detected by the cache magic.
    pub fn load(bytes: &[u8]) -> Result<Self, SimMatrixError> {
        if bytes.starts_with(SIMMATRIX_MAGIC) {
            Self::read_cache(bytes)
        } else {
            Self::read_tsv(bytes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SimilarityMatrix {
        let mut m = SimilarityMatrix::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        m.set(0, 1, 0.9).unwrap();
        m.set(1, 0, 0.85).unwrap();
        m.set(0, 2, 0.2).unwrap();
        m.set(2, 0, 0.25).unwrap();
        m.set(1, 2, 0.5).unwrap();
        m.set(2, 1, 0.125).unwrap();
        m
    }

    #[test]
    fn tsv_round_trip_keeps_both_directions() {
        let m = sample();
        let mut buf = Vec::new();
        m.write_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().next().unwrap(), "a\tb\t0.9\t0.85");
        let back = SimilarityMatrix::load(&buf).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get(2, 1), 0.125);
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let m = sample();
        let mut buf = Vec::new();
        m.write_cache(&mut buf).unwrap();
        assert_eq!(SimilarityMatrix::load(&buf).unwrap(), m);
        assert!(matches!(SimilarityMatrix::read_cache(&buf[..buf.len() - 1]), Err(SimMatrixError::Truncated)));
        assert!(matches!(SimilarityMatrix::read_cache(&b"POSHXXXX"[..]), Err(SimMatrixError::BadMagic)));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(SimilarityMatrix::read_tsv(&b"a\tb\t0.5\n"[..]), Err(SimMatrixError::Parse { line: 1, .. })));
        assert!(matches!(SimilarityMatrix::read_tsv(&b"# c\na\tb\tx\t0.5\n"[..]), Err(SimMatrixError::Parse { line: 2, .. })));
        assert!(matches!(SimilarityMatrix::read_tsv(&b"a\tb\t1.5\t0.5\n"[..]), Err(SimMatrixError::OutOfRange(_))));
    }

    #[test]
    fn subset_reorders() {
        let s = sample().subset(&["c".into(), "a".into()]).unwrap();
        assert_eq!(s.get(0, 1), 0.25);
        assert_eq!(s.get(1, 0), 0.2);
        assert!(sample().subset(&["z".into()]).is_err());
    }
}
