//! Packed binary codes, Hamming distance, length-scaled ranking and the
//! on-disk index.
//!
//! Index file layout (little-endian): magic `POSHIDX1`, version `u16`, code
//! length `d: u32`, entry count `u64`, `l_max: u32`, then per entry an id
//! (`u16` length + UTF-8), `n_residues: u32` and `ceil(d/8)` code bytes, and
//! finally a CRC32 of every preceding byte.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::LengthScaling;

pub const INDEX_MAGIC: &[u8; 8] = b"POSHIDX1";
pub const INDEX_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("code lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("not an index file")]
    BadMagic,
    #[error("index version {0} is not supported")]
    VersionMismatch(u16),
    #[error("index file is truncated")]
    TruncatedFile,
    #[error("index checksum mismatch")]
    ChecksumMismatch,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("invalid index: {0}")]
    Invalid(String),
    #[error("codes line {line}: {reason}")]
    CodesParse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn words_for(d: usize) -> usize {
    d.div_ceil(64)
}

fn pad_mask(d: usize) -> u64 {
    match d % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// A `d`-bit code. Bit `k` lives in word `k / 64` at position `k % 64`,
/// which matches byte `k / 8`, position `k % 8` of the little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    pub id: String,
    pub n_residues: u32,
    pub d: usize,
    pub words: Vec<u64>,
}

impl HashCode {
    /// Bit set where the value is strictly positive.
    pub fn from_signs(id: String, n_residues: u32, y: &[f64]) -> Self {
        let mut words = vec![0u64; words_for(y.len())];
        for (k, v) in y.iter().enumerate() {
            if *v > 0.0 {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        Self { id, n_residues, d: y.len(), words }
    }

    pub fn from_bits(id: String, n_residues: u32, bits: &[bool]) -> Self {
        let y: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        Self::from_signs(id, n_residues, &y)
    }

    /// Unpacks `ceil(d/8)` little-endian bytes; pad bits must be clear.
    pub fn from_bytes(id: String, n_residues: u32, d: usize, bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() != d.div_ceil(8) {
            return Err(IndexError::LengthMismatch(bytes.len() * 8, d));
        }
        let mut words = vec![0u64; words_for(d)];
        for (i, b) in bytes.iter().enumerate() {
            words[i / 8] |= (*b as u64) << (8 * (i % 8));
        }
        if let Some(last) = words.last() {
            if last & !pad_mask(d) != 0 {
                return Err(IndexError::Invalid("pad bits set".into()));
            }
        }
        Ok(Self { id, n_residues, d, words })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.d.div_ceil(8));
        out
    }

    pub fn bit(&self, k: usize) -> bool {
        (self.words[k / 64] >> (k % 64)) & 1 == 1
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Number of differing bits among the first `d`.
pub fn hamming(a: &[u64], b: &[u64], d: usize) -> Result<u32, IndexError> {
    let w = words_for(d);
    if a.len() != w || b.len() != w {
        return Err(IndexError::LengthMismatch(a.len() * 64, b.len() * 64));
    }
    Ok(hamming_words(a, b, pad_mask(d)))
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64], last_mask: u64) -> u32 {
    let n = a.len();
    if n == 0 {
        return 0;
    }
    let mut s = 0;
    for i in 0..n - 1 {
        s += (a[i] ^ b[i]).count_ones();
    }
    s + ((a[n - 1] ^ b[n - 1]) & last_mask).count_ones()
}

/// Length-scaled distance with factor `1 + |l_q - l_t| / l_max`.
pub fn scaled_distance(hamming: u32, l_q: u32, l_t: u32, l_max: u32, mode: LengthScaling) -> f64 {
    let f = 1.0 + (l_q as f64 - l_t as f64).abs() / l_max.max(1) as f64;
    match mode {
        LengthScaling::Divide => hamming as f64 / f,
        LengthScaling::Multiply => hamming as f64 * f,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub id: String,
    pub hamming: u32,
    pub scaled: f64,
    pub n_residues: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    scaled: f64,
    hamming: u32,
    rank: u32,
    idx: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.scaled.total_cmp(&o.scaled).then(self.hamming.cmp(&o.hamming)).then(self.rank.cmp(&o.rank))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Immutable set of codes sharing one length.
#[derive(Debug, Clone)]
pub struct CodeDatabase {
    d: usize,
    stride: usize,
    ids: Vec<String>,
    n_residues: Vec<u32>,
    words: Vec<u64>,
    l_max: u32,
    /// Position of each id in sorted id order, for tie breaking.
    id_rank: Vec<u32>,
    pub scaling: LengthScaling,
}

impl PartialEq for CodeDatabase {
    fn eq(&self, o: &Self) -> bool {
        self.d == o.d && self.ids == o.ids && self.n_residues == o.n_residues && self.words == o.words && self.l_max == o.l_max
    }
}

impl CodeDatabase {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            stride: words_for(d),
            ids: Vec::new(),
            n_residues: Vec::new(),
            words: Vec::new(),
            l_max: 0,
            id_rank: Vec::new(),
            scaling: LengthScaling::Divide,
        }
    }

    pub fn build(d: usize, codes: impl IntoIterator<Item = HashCode>) -> Result<Self, IndexError> {
        let mut db = Self::new(d);
        let mut seen = HashSet::new();
        for c in codes {
            if c.d != d || c.words.len() != db.stride {
                return Err(IndexError::LengthMismatch(c.d, d));
            }
            if !seen.insert(c.id.clone()) {
                return Err(IndexError::DuplicateId(c.id));
            }
            if c.n_residues == 0 {
                return Err(IndexError::Invalid(format!("entry `{}` has zero residues", c.id)));
            }
            db.l_max = db.l_max.max(c.n_residues);
            db.words.extend_from_slice(&c.words);
            db.ids.push(c.id);
            db.n_residues.push(c.n_residues);
        }
        db.rank_ids();
        Ok(db)
    }

    fn rank_ids(&mut self) {
        let mut order: Vec<u32> = (0..self.ids.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| self.ids[a as usize].cmp(&self.ids[b as usize]));
        self.id_rank = vec![0; self.ids.len()];
        for (r, &i) in order.iter().enumerate() {
            self.id_rank[i as usize] = r as u32;
        }
    }

    pub fn code_length(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn l_max(&self) -> u32 {
        self.l_max
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn code(&self, i: usize) -> HashCode {
        HashCode {
            id: self.ids[i].clone(),
            n_residues: self.n_residues[i],
            d: self.d,
            words: self.words[i * self.stride..(i + 1) * self.stride].to_vec(),
        }
    }

    fn check_query(&self, q: &HashCode) -> Result<(), IndexError> {
        if q.d != self.d || q.words.len() != self.stride {
            return Err(IndexError::LengthMismatch(q.d, self.d));
        }
        Ok(())
    }

    fn scan(&self, q: &HashCode, k: usize, range: std::ops::Range<usize>, skip: Option<&str>) -> BinaryHeap<Candidate> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mask = pad_mask(self.d);
        let s = self.stride;
        for i in range {
            let h = hamming_words(&q.words, &self.words[i * s..(i + 1) * s], mask);
            let scaled = scaled_distance(h, q.n_residues, self.n_residues[i], self.l_max, self.scaling);
            let c = Candidate { scaled, hamming: h, rank: self.id_rank[i], idx: i as u32 };
            if heap.len() < k {
                if skip.is_some_and(|id| self.ids[i] == id) {
                    continue;
                }
                heap.push(c);
            } else if c < *heap.peek().unwrap() {
                if skip.is_some_and(|id| self.ids[i] == id) {
                    continue;
                }
                heap.pop();
                heap.push(c);
            }
        }
        heap
    }

    fn finish(&self, heap: impl IntoIterator<Item = Candidate>, k: usize) -> Vec<SearchHit> {
        let mut all: Vec<Candidate> = heap.into_iter().collect();
        all.sort_unstable();
        all.truncate(k);
        all.into_iter()
            .map(|c| SearchHit {
                id: self.ids[c.idx as usize].clone(),
                hamming: c.hamming,
                scaled: c.scaled,
                n_residues: self.n_residues[c.idx as usize],
            })
            .collect()
    }

    /// Exact top-`k` by scaled distance, then hamming, then id.
    pub fn search(&self, q: &HashCode, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        self.search_excluding(q, k, None)
    }

    /// As [`search`](Self::search), leaving out the entry whose id is `skip`.
    pub fn search_excluding(&self, q: &HashCode, k: usize, skip: Option<&str>) -> Result<Vec<SearchHit>, IndexError> {
        self.check_query(q)?;
        if k == 0 {
            return Ok(Vec::new());
        }
        Ok(self.finish(self.scan(q, k, 0..self.len(), skip), k))
    }

    /// Sharded scan on the current rayon pool; identical results to [`search`](Self::search).
    pub fn search_parallel(&self, q: &HashCode, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        self.check_query(q)?;
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let shards = rayon::current_num_threads().max(1) * 4;
        let block = self.len().div_ceil(shards).max(1024);
        let heaps: Vec<BinaryHeap<Candidate>> = (0..self.len())
            .step_by(block)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|lo| self.scan(q, k, lo..(lo + block).min(self.len()), None))
            .collect();
        Ok(self.finish(heaps.into_iter().flatten(), k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let code_bytes = self.d.div_ceil(8);
        let mut buf = Vec::with_capacity(30 + self.len() * (code_bytes + 16));
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.l_max.to_le_bytes());
        for i in 0..self.len() {
            let id = self.ids[i].as_bytes();
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id);
            buf.extend_from_slice(&self.n_residues[i].to_le_bytes());
            let words = &self.words[i * self.stride..(i + 1) * self.stride];
            let mut bytes = 0;
            'w: for w in words {
                for b in w.to_le_bytes() {
                    if bytes == code_bytes {
                        break 'w;
                    }
                    buf.push(b);
                    bytes += 1;
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, IndexError> {
        if data.len() < 8 || &data[..8] != INDEX_MAGIC {
            return Err(if data.len() < 8 && INDEX_MAGIC.starts_with(data) { IndexError::TruncatedFile } else { IndexError::BadMagic });
        }
        let pos = std::cell::Cell::new(8usize);
        let take = |n: usize| -> Result<&[u8], IndexError> {
            let s = data.get(pos.get()..pos.get() + n).ok_or(IndexError::TruncatedFile)?;
            pos.set(pos.get() + n);
            Ok(s)
        };
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(IndexError::VersionMismatch(version));
        }
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let l_max = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if d == 0 {
            return Err(IndexError::Invalid("code length 0".into()));
        }
        let code_bytes = d.div_ceil(8);
        // each entry needs at least 6 + code_bytes bytes
        if count.saturating_mul((6 + code_bytes) as u64) > data.len() as u64 {
            return Err(IndexError::TruncatedFile);
        }
        let mut codes = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|_| IndexError::Invalid("id is not UTF-8".into()))?.to_string();
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let bytes = take(code_bytes)?;
            codes.push((id, n, bytes));
        }
        let body_end = pos.get();
        let crc = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if pos.get() != data.len() {
            return Err(IndexError::Invalid("trailing bytes after checksum".into()));
        }
        if crc32fast::hash(&data[..body_end]) != crc {
            return Err(IndexError::ChecksumMismatch);
        }
        let codes: Vec<HashCode> = codes
            .into_iter()
            .map(|(id, n, bytes)| HashCode::from_bytes(id, n, d, bytes))
            .collect::<Result<_, _>>()?;
        let db = Self::build(d, codes)?;
        if db.l_max != l_max {
            return Err(IndexError::Invalid(format!("stored l_max {l_max} differs from entries ({})", db.l_max)));
        }
        Ok(db)
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }
}

/// Text codes file: `id<TAB>n_residues<TAB>d<TAB>hex bytes` per line.
pub fn write_codes<W: Write>(codes: &[HashCode], mut w: W) -> std::io::Result<()> {
    for c in codes {
        writeln!(w, "{}\t{}\t{}\t{}", c.id, c.n_residues, c.d, c.to_hex())?;
    }
    Ok(())
}

pub fn read_codes<R: BufRead>(r: R) -> Result<Vec<HashCode>, IndexError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| IndexError::CodesParse { line: i + 1, reason: reason.into() };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err("expected 4 tab-separated fields"));
        }
        let n: u32 = f[1].parse().map_err(|_| err("bad residue count"))?;
        let d: usize = f[2].parse().map_err(|_| err("bad code length"))?;
        let hex = f[3].trim();
        if !hex.len().is_multiple_of(2) || !hex.is_ascii() {
            return Err(err("bad hex"));
        }
        let bytes = (0..hex.len() / 2)
            .map(|j| u8::from_str_radix(&hex[2 * j..2 * j + 2], 16))
            .collect::<Result<Vec<u8>, _>>()
            .map_err(|_| err("bad hex"))?;
        out.push(HashCode::from_bytes(f[0].to_string(), n, d, &bytes).map_err(|e| err(&e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_code(rng: &mut ChaCha8Rng, id: String, d: usize) -> HashCode {
        let bits: Vec<bool> = (0..d).map(|_| rng.random()).collect();
        HashCode::from_bits(id, rng.random_range(20..300), &bits)
    }

    fn random_db(rng: &mut ChaCha8Rng, n: usize, d: usize) -> CodeDatabase {
        CodeDatabase::build(d, (0..n).map(|i| random_code(rng, format!("e{i:05}"), d))).unwrap()
    }

    fn bit_loop(a: &HashCode, b: &HashCode) -> u32 {
        (0..a.d).filter(|&k| a.bit(k) != b.bit(k)).count() as u32
    }

    fn oracle(db: &CodeDatabase, q: &HashCode, k: usize) -> Vec<SearchHit> {
        let mut all: Vec<SearchHit> = (0..db.len())
            .map(|i| {
                let c = db.code(i);
                let h = bit_loop(q, &c);
                SearchHit { id: c.id, hamming: h, scaled: scaled_distance(h, q.n_residues, c.n_residues, db.l_max(), db.scaling), n_residues: c.n_residues }
            })
            .collect();
        all.sort_by(|a, b| a.scaled.total_cmp(&b.scaled).then(a.hamming.cmp(&b.hamming)).then(a.id.cmp(&b.id)));
        all.truncate(k);
        all
    }

    #[test]
    fn hamming_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_code(&mut rng, "a".into(), 400);
        assert_eq!(hamming(&a.words, &a.words, 400).unwrap(), 0);
        let not_a = HashCode::from_bits("n".into(), 1, &(0..400).map(|k| !a.bit(k)).collect::<Vec<_>>());
        assert_eq!(hamming(&a.words, &not_a.words, 400).unwrap(), 400);
        for _ in 0..50 {
            let x = random_code(&mut rng, "x".into(), 37);
            let y = random_code(&mut rng, "y".into(), 37);
            assert_eq!(hamming(&x.words, &y.words, 37).unwrap(), bit_loop(&x, &y));
        }
        assert!(matches!(hamming(&a.words, &[0u64], 400), Err(IndexError::LengthMismatch(..))));
    }

    #[test]
    fn pad_bits_are_masked() {
        let a = HashCode { id: "a".into(), n_residues: 1, d: 37, words: vec![0] };
        let b = HashCode { id: "b".into(), n_residues: 1, d: 37, words: vec![u64::MAX << 37] };
        assert_eq!(hamming(&a.words, &b.words, 37).unwrap(), 0);
    }

    #[test]
    fn scaled_distance_examples() {
        assert_eq!(scaled_distance(10, 150, 150, 300, LengthScaling::Divide), 10.0);
        assert_eq!(scaled_distance(10, 100, 200, 400, LengthScaling::Divide), 8.0);
        assert_eq!(scaled_distance(10, 100, 200, 400, LengthScaling::Multiply), 12.5);
        assert_eq!(scaled_distance(0, 10, 300, 300, LengthScaling::Divide), 0.0);
    }

    #[test]
    fn search_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let db = random_db(&mut rng, 50, 64);
        let q = db.code(17);
        let hits = db.search(&q, 3).unwrap();
        assert_eq!(hits[0].id, q.id);
        assert_eq!(hits[0].scaled, 0.0);
        let one = CodeDatabase::build(64, [db.code(3)]).unwrap();
        assert_eq!(one.search(&q, 10).unwrap().len(), 1);
        assert!(db.search_excluding(&q, 50, Some(&q.id)).unwrap().iter().all(|h| h.id != q.id));
        let wrong = random_code(&mut rng, "w".into(), 65);
        assert!(matches!(db.search(&wrong, 1), Err(IndexError::LengthMismatch(65, 64))));
    }

    #[test]
    fn search_equals_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scaling in [LengthScaling::Divide, LengthScaling::Multiply] {
            let mut db = random_db(&mut rng, 1000, 400);
            db.scaling = scaling;
            for _ in 0..5 {
                let q = random_code(&mut rng, "q".into(), 400);
                for k in [1, 5, 10, 1000, 2000] {
                    let expect = oracle(&db, &q, k);
                    assert_eq!(db.search(&q, k).unwrap(), expect);
                    assert_eq!(db.search_parallel(&q, k).unwrap(), expect);
                }
            }
        }
    }

    #[test]
    fn ties_break_by_hamming_then_id() {
        let bits = |v: u64| (0..8).map(|k| (v >> k) & 1 == 1).collect::<Vec<_>>();
        let codes = vec![
            HashCode::from_bits("b".into(), 10, &bits(0b11)),
            HashCode::from_bits("a".into(), 10, &bits(0b11)),
            HashCode::from_bits("c".into(), 10, &bits(0b1)),
        ];
        let db = CodeDatabase::build(8, codes).unwrap();
        let q = HashCode::from_bits("q".into(), 10, &bits(0));
        let ids: Vec<String> = db.search(&q, 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn persistence_round_trip_and_errors() {
        let empty = CodeDatabase::new(400);
        let bytes = empty.to_bytes();
        assert_eq!(bytes.len(), 8 + 2 + 4 + 8 + 4 + 4);
        assert_eq!(CodeDatabase::from_bytes(&bytes).unwrap(), empty);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [37, 64, 400] {
            let db = random_db(&mut rng, 30, d);
            let bytes = db.to_bytes();
            let back = CodeDatabase::from_bytes(&bytes).unwrap();
            assert_eq!(back, db);
            assert_eq!(back.to_bytes(), bytes);
        }
        let db = random_db(&mut rng, 30, 400);
        let mut bytes = db.to_bytes();
        assert!(matches!(CodeDatabase::from_bytes(&bytes[..bytes.len() - 3]), Err(IndexError::TruncatedFile)));
        assert!(matches!(CodeDatabase::from_bytes(&bytes[..100]), Err(IndexError::TruncatedFile)));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(CodeDatabase::from_bytes(&bytes), Err(IndexError::ChecksumMismatch) | Err(IndexError::Invalid(_))));
        let mut v = db.to_bytes();
        v[8] = 9;
        assert!(matches!(CodeDatabase::from_bytes(&v), Err(IndexError::VersionMismatch(9))));
        v[0] = b'X';
        assert!(matches!(CodeDatabase::from_bytes(&v), Err(IndexError::BadMagic)));
    }

    #[test]
    fn build_rejects_bad_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_code(&mut rng, "a".into(), 16);
        assert!(matches!(CodeDatabase::build(16, [a.clone(), a.clone()]), Err(IndexError::DuplicateId(_))));
        assert!(matches!(CodeDatabase::build(17, [a]), Err(IndexError::LengthMismatch(16, 17))));
    }

    #[test]
    fn codes_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let codes: Vec<HashCode> = (0..5).map(|i| random_code(&mut rng, format!("c{i}"), 37)).collect();
        let mut buf = Vec::new();
        write_codes(&codes, &mut buf).unwrap();
        assert_eq!(read_codes(&buf[..]).unwrap(), codes);
        assert!(read_codes(&b"a\t1\t8\tzz\n"[..]).is_err());
        assert!(read_codes(&b"a\t1\t8\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bits in prop::collection::vec(any::<bool>(), 1..300)) {
            let c = HashCode::from_bits("p".into(), 5, &bits);
            prop_assert_eq!(c.to_bytes().len(), bits.len().div_ceil(8));
            let back = HashCode::from_bytes("p".into(), 5, bits.len(), &c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            for (k, b) in bits.iter().enumerate() {
                prop_assert_eq!(back.bit(k), *b);
                prop_assert_eq!((c.to_bytes()[k / 8] >> (k % 8)) & 1 == 1, *b);
            }
        }

        #[test]
        fn scaled_never_exceeds_hamming_and_keeps_zero(h in 0u32..500, lq in 1u32..1000, lt in 1u32..1000) {
            let lmax = lt.max(1);
            let s = scaled_distance(h, lq, lt, lmax, LengthScaling::Divide);
            prop_assert!(s <= h as f64);
            prop_assert_eq!(s == 0.0, h == 0);
        }

        #[test]
        fn scaled_decreases_with_length_gap(h in 1u32..500, gap in 0u32..100) {
            let a = scaled_distance(h, 200, 200 + gap, 400, LengthScaling::Divide);
            let b = scaled_distance(h, 200, 200 + gap + 1, 400, LengthScaling::Divide);
            prop_assert!(b < a);
        }
    }
}
