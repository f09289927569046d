//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "KGNVCKPT"
//! version   u32      currently 1
//! frames    u64      global frame counter at save time
//! meta_len  u32      followed by meta_len bytes of UTF-8 text
//! n_records u32
//! records   n_records times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, then ndim u32 dimensions
//!   values   product(dims) f32
//! ```
//!
//! Parameter tensors are stored under their own names and RMSProp
//! accumulators under `rmsprop/<name>`.

use super::params::ParameterSet;
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KGNVCKPT";
const OPTIM_PREFIX: &str = "rmsprop/";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub frames: u64,
    pub meta: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Appends every parameter and its optimizer accumulator.
    pub fn push_params(&mut self, params: &ParameterSet) {
        for (name, p) in params.iter() {
            self.records.push(Record {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|&v| v as f32).collect(),
            });
        }
        for (name, p) in params.iter() {
            self.records.push(Record {
                name: format!("{OPTIM_PREFIX}{name}"),
                shape: p.value.shape().to_vec(),
                values: p.accum.iter().map(|&v| v as f32).collect(),
            });
        }
    }

    /// Overwrites `params` from matching records; every parameter must be present
    /// with the same shape. Missing accumulators are reset to zero.
    pub fn restore_params(&self, params: &mut ParameterSet) -> Result<(), NnError> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for (i, name) in names.iter().enumerate() {
            let rec = self.record(name).ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name:?}")))?;
            let p = params.param_mut(i);
            if rec.shape != p.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    rec.shape,
                    p.value.shape()
                )));
            }
            p.value.data_mut().iter_mut().zip(&rec.values).for_each(|(d, &s)| *d = f64::from(s));
            match self.record(&format!("{OPTIM_PREFIX}{name}")) {
                Some(acc) if acc.values.len() == p.accum.len() => {
                    p.accum.iter_mut().zip(&acc.values).for_each(|(d, &s)| *d = f64::from(s));
                }
                _ => p.accum.fill(0.0),
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.frames.to_le_bytes());
    put_u32(&mut out, ckpt.meta.len());
    out.extend_from_slice(ckpt.meta.as_bytes());
    put_u32(&mut out, ckpt.records.len());
    for r in &ckpt.records {
        put_u32(&mut out, r.name.len());
        out.extend_from_slice(r.name.as_bytes());
        put_u32(&mut out, r.shape.len());
        for &d in &r.shape {
            put_u32(&mut out, d);
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, NnError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String, NnError> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| NnError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let fb = r.take(8, "frames")?;
    let frames = u64::from_le_bytes(fb.try_into().expect("8 bytes"));
    let meta = r.string("meta")?;
    let n = r.u32("record count")?;
    let mut records = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.string("record name")?;
        let ndim = r.u32("ndim")?;
        let shape = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NnError::Checkpoint(format!("record {name:?} is too large")))?;
        let raw = r.take(count.checked_mul(4).unwrap_or(usize::MAX), "values")?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        records.push(Record { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { frames, meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn header_layout() {
        let ckpt = Checkpoint { frames: 7, meta: "a=1".into(), records: vec![] };
        let bytes = write_checkpoint(&ckpt);
        assert_eq!(&bytes[..8], b"KGNVCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &7u64.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 4 + 8 + 4 + 3 + 4);
        assert_eq!(read_checkpoint(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn params_round_trip() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![0.5, -0.25, 1.0, 2.0]).unwrap()).unwrap();
        p.param_mut(0).accum = vec![0.1, 0.0, 0.0, 3.0];
        let mut ckpt = Checkpoint { frames: 3, ..Default::default() };
        ckpt.push_params(&p);
        let bytes = write_checkpoint(&ckpt);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&back), bytes);
        let mut q = p.clone();
        q.get_mut("w").unwrap().data_mut().fill(0.0);
        back.restore_params(&mut q).unwrap();
        assert_eq!(q.tensor(0), p.tensor(0));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(read_checkpoint(b"nope").is_err());
        let mut bytes = write_checkpoint(&Checkpoint::default());
        bytes.push(0);
        assert!(read_checkpoint(&bytes).is_err());
        let mut ckpt = Checkpoint::default();
        ckpt.records.push(Record { name: "x".into(), shape: vec![3], values: vec![1.0; 3] });
        let bytes = write_checkpoint(&ckpt);
        assert!(read_checkpoint(&bytes[..bytes.len() - 2]).is_err());
    }
}
