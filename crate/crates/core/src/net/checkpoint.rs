//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "EYED" | version u32 = 1 | fingerprint u64 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | rank u8 | dims u32 x rank | f32 data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MfmNet, NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EYED";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &NetParams<f32>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&params.fingerprint.to_le_bytes())?;
    w.write_all(&(params.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_checkpoint(params: &NetParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Load("truncated file".into()),
            _ => Error::Load(format!("read failed: {e}")),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
}

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

/// Decodes a checkpoint stream into `(fingerprint, named tensors)`.
pub fn read_checkpoint(r: impl Read) -> Result<(u64, NamedTensors)> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Load("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!("unsupported version {version}")));
    }
    let fingerprint = u64::from_le_bytes(r.bytes()?);
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.bytes()?) as usize;
        let mut name = vec![0u8; len];
        for b in name.iter_mut() {
            *b = r.bytes::<1>()?[0];
        }
        let name = String::from_utf8(name).map_err(|_| Error::Load("tensor name is not UTF-8".into()))?;
        let rank = r.bytes::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        if count > 1 << 28 {
            return Err(Error::Load(format!("tensor {name} claims {count} elements")));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f32::from_le_bytes(r.bytes()?));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Load(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let mut trailing = [0u8; 1];
    if r.inner
        .read(&mut trailing)
        .map_err(|e| Error::Load(format!("read failed: {e}")))?
        != 0
    {
        return Err(Error::Load("trailing bytes after the last tensor".into()));
    }
    Ok((fingerprint, tensors))
}

/// Loads a checkpoint for `net`, rejecting files written for another layout.
pub fn load_checkpoint(path: impl AsRef<Path>, net: &MfmNet) -> Result<NetParams<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (fingerprint, tensors) = read_checkpoint(BufReader::new(file))?;
    if fingerprint != net.fingerprint() {
        return Err(Error::Load(format!(
            "fingerprint mismatch: file {fingerprint:016x}, network {:016x}",
            net.fingerprint()
        )));
    }
    net.params_from_tensors(tensors)
        .map_err(|e| Error::Load(format!("layout mismatch: {e}")))
}

/// Loads a checkpoint written for any built-in preset, identified by fingerprint.
pub fn load_any_checkpoint(path: impl AsRef<Path>) -> Result<(MfmNet, NetParams<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (fingerprint, tensors) = read_checkpoint(BufReader::new(file))?;
    for name in NetConfig::preset_names() {
        let cfg = NetConfig::preset(name)?;
        if cfg.fingerprint() == fingerprint {
            let net = MfmNet::new(cfg)?;
            let params = net
                .params_from_tensors(tensors)
                .map_err(|e| Error::Load(format!("layout mismatch: {e}")))?;
            return Ok((net, params));
        }
    }
    Err(Error::Load(format!(
        "fingerprint mismatch: {fingerprint:016x} matches no known network preset"
    )))
}
