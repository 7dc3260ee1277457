//! Binary checkpoint: magic, version, SHA-256 digest of the configuration
//! text, the configuration text itself, named parameters, batchnorm running
//! statistics and optionally the Adam state. Little-endian throughout.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::{Adam, AdamConfig, BatchNormState, NeuralError, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POSHCKP1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `key = value` lines describing the model; its digest is stored and
    /// verified on load.
    pub config_text: String,
    pub params: ParamSet<f32>,
    pub batchnorm: Vec<(String, BatchNormState<f32>)>,
    pub adam: Option<Adam>,
}

fn err(msg: impl Into<String>) -> NeuralError {
    NeuralError::Checkpoint(msg.into())
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, mut w: W) -> Result<(), NeuralError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&Sha256::digest(ck.config_text.as_bytes()));
    put_str(&mut buf, &ck.config_text);

    buf.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        put_f32s(&mut buf, &t.data);
    }

    buf.extend_from_slice(&(ck.batchnorm.len() as u32).to_le_bytes());
    for (name, s) in &ck.batchnorm {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(s.running_mean.len() as u32).to_le_bytes());
        buf.extend_from_slice(&s.momentum.to_le_bytes());
        buf.extend_from_slice(&s.eps.to_le_bytes());
        put_f32s(&mut buf, &s.running_mean);
        put_f32s(&mut buf, &s.running_var);
    }

    match &ck.adam {
        None => buf.push(0),
        Some(a) => {
            buf.push(1);
            buf.extend_from_slice(&a.step.to_le_bytes());
            for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for moments in [&a.m, &a.v] {
                for m in moments {
                    for x in m {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NeuralError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, NeuralError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, NeuralError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, NeuralError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("string is not UTF-8"))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, NeuralError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| err("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_checkpoint<R: Read>(mut src: R) -> Result<Checkpoint, NeuralError> {
    let mut data = Vec::new();
    src.read_to_end(&mut data)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let digest = r.take(32)?.to_vec();
    let config_text = r.string()?;
    if Sha256::digest(config_text.as_bytes()).as_slice() != digest.as_slice() {
        return Err(err("configuration digest mismatch"));
    }

    let mut params = ParamSet::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let vals = r.f32s(rows * cols)?;
        params.push(name, Tensor::from_vec(rows, cols, vals)?);
    }

    let mut batchnorm = Vec::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let dim = r.u32()? as usize;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        let running_mean = r.f32s(dim)?;
        let running_var = r.f32s(dim)?;
        batchnorm.push((name, BatchNormState { running_mean, running_var, momentum, eps }));
    }

    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
            let read_moments = |r: &mut Reader| -> Result<Vec<Vec<f64>>, NeuralError> {
                params.shapes().iter().map(|&(a, b)| (0..a * b).map(|_| r.f64()).collect()).collect()
            };
            let m = read_moments(&mut r)?;
            let v = read_moments(&mut r)?;
            Some(Adam { config, step, m, v })
        }
        f => return Err(err(format!("bad optimizer flag {f}"))),
    };
    if r.pos != data.len() {
        return Err(err("trailing bytes"));
    }
    Ok(Checkpoint { config_text, params, batchnorm, adam })
}
