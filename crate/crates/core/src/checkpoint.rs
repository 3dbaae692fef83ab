//! Versioned binary checkpoints: config echo, named tensors and optional
//! training state, all little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters of the best validation epoch seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot<F> {
    pub metric: f64,
    pub epoch: usize,
    pub params: Vec<Vec<F>>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// Optimizer velocities in parameter order.
    pub velocity: Vec<Vec<F>>,
    pub best: Option<BestSnapshot<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    /// `key=value` lines describing the run.
    pub config: String,
    pub params: ParamStore<F>,
    pub state: Option<TrainState<F>>,
}

fn dtype_byte(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_flat<F: Float>(out: &mut Vec<u8>, v: &[F]) {
    put_u64(out, v.len() as u64);
    for &x in v {
        x.write_le(out);
    }
}

pub fn encode_checkpoint<F: Float>(ck: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, ck.config.len() as u32);
    out.extend_from_slice(ck.config.as_bytes());
    out.push(dtype_byte(F::DTYPE));
    put_u32(&mut out, ck.params.len() as u32);
    for (_, p) in ck.params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("parameter name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        put_u32(&mut out, p.tensor.rank() as u32);
        for &d in p.tensor.shape() {
            put_u32(&mut out, d as u32);
        }
        for &x in p.tensor.data() {
            x.write_le(&mut out);
        }
    }
    match &ck.state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            put_u64(&mut out, s.epoch as u64);
            put_u64(&mut out, s.seed);
            put_u32(&mut out, s.velocity.len() as u32);
            for v in &s.velocity {
                put_flat(&mut out, v);
            }
            match &s.best {
                None => out.push(0),
                Some(b) => {
                    out.push(1);
                    out.extend_from_slice(&b.metric.to_le_bytes());
                    put_u64(&mut out, b.epoch as u64);
                    put_u32(&mut out, b.params.len() as u32);
                    for v in &b.params {
                        put_flat(&mut out, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint<F: Float>(path: &Path, ck: &Checkpoint<F>) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated { context: what },
            _ => Error::Io(e),
        })
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, len: usize, what: &'static str) -> Result<String> {
        let mut b = vec![0u8; len];
        self.fill(&mut b, what)?;
        String::from_utf8(b).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }

    fn values<F: Float>(&mut self, n: usize, what: &'static str) -> Result<Vec<F>> {
        let w = F::DTYPE.size();
        let mut raw = vec![0u8; n * w];
        self.fill(&mut raw, what)?;
        Ok(raw.chunks_exact(w).map(F::read_le).collect())
    }

    fn flat<F: Float>(&mut self, what: &'static str) -> Result<Vec<F>> {
        let n = self.u64(what)? as usize;
        self.values(n, what)
    }
}

pub fn decode_checkpoint<F: Float, R: Read>(reader: R) -> Result<Checkpoint<F>> {
    let mut r = Cursor { inner: reader };
    let magic = r.array::<4>("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let clen = r.u32("config length")? as usize;
    let config = r.string(clen, "config")?;
    let dtype = r.u8("dtype")?;
    if dtype != dtype_byte(F::DTYPE) {
        return Err(Error::Malformed(format!("checkpoint dtype tag {dtype} does not match {:?}", F::DTYPE)));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u16("tensor name length")? as usize;
        let name = r.string(nlen, "tensor name")?;
        let ndim = r.u32("tensor rank")? as usize;
        if ndim > 8 {
            return Err(Error::Malformed(format!("tensor {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor shape")? as usize);
        }
        let n = shape.iter().product();
        let data = r.values(n, "tensor payload")?;
        params.add(name, Tensor::new(shape, data)?)?;
    }
    let state = match r.u8("state flag")? {
        0 => None,
        1 => {
            let epoch = r.u64("epoch")? as usize;
            let seed = r.u64("seed")?;
            let nv = r.u32("velocity count")? as usize;
            let velocity = (0..nv).map(|_| r.flat("velocity")).collect::<Result<Vec<_>>>()?;
            let best = match r.u8("best flag")? {
                0 => None,
                1 => {
                    let metric = f64::from_le_bytes(r.array("best metric")?);
                    let epoch = r.u64("best epoch")? as usize;
                    let np = r.u32("best tensor count")? as usize;
                    let params = (0..np).map(|_| r.flat("best params")).collect::<Result<Vec<_>>>()?;
                    Some(BestSnapshot { metric, epoch, params })
                }
                f => return Err(Error::Malformed(format!("best flag {f}"))),
            };
            Some(TrainState {
                epoch,
                seed,
                velocity,
                best,
            })
        }
        f => return Err(Error::Malformed(format!("state flag {f}"))),
    };
    Ok(Checkpoint { config, params, state })
}

pub fn load_checkpoint<F: Float>(path: &Path) -> Result<Checkpoint<F>> {
    decode_checkpoint(BufReader::new(File::open(path)?))
}
