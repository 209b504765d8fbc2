//! Binary checkpoint format: magic, version, embedded config, and raw
//! little-endian parameter + Adam state blobs. Round-trips are bit-exact.

use crate::config::RunConfig;
use crate::error::{Result, SprError};
use crate::num::Element;
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SPRD";
pub const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> SprError {
    SprError::Checkpoint(msg.into())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn write_tensor<E: Element>(w: &mut impl Write, t: &Tensor<E>) -> Result<()> {
    for d in t.shape() {
        write_u64(w, d as u64)?;
    }
    let mut raw = Vec::with_capacity(t.numel() * 8);
    for &v in t.data() {
        raw.extend_from_slice(&v.to_f64().to_le_bytes());
    }
    write_bytes(w, &raw)
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| err("truncated file"))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

fn read_len(r: &mut impl Read, cap: u64, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > cap {
        return Err(err(format!("{what} length {n} exceeds sanity cap {cap}")));
    }
    Ok(n as usize)
}

fn read_bytes(r: &mut impl Read, cap: u64, what: &str) -> Result<Vec<u8>> {
    let n = read_len(r, cap, what)?;
    read_exact(r, n)
}

fn read_tensor<E: Element>(r: &mut impl Read) -> Result<Tensor<E>> {
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = read_len(r, 1 << 32, "tensor dim")?;
    }
    let raw = read_bytes(r, 1 << 40, "tensor blob")?;
    let numel: usize = shape.iter().product();
    if raw.len() != numel * 8 {
        return Err(err(format!("tensor blob is {} bytes, shape {shape:?} needs {}", raw.len(), numel * 8)));
    }
    let data: Vec<E> = raw
        .chunks_exact(8)
        .map(|c| E::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Saves config text, every parameter value, and its Adam state (m, v, t).
pub fn save_checkpoint<E: Element>(path: &Path, store: &ParamStore<E>, config: &RunConfig) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, VERSION)?;
    write_bytes(&mut buf, config.digest().as_bytes())?;
    write_bytes(&mut buf, config.to_text().as_bytes())?;
    write_u64(&mut buf, store.len() as u64)?;
    for (name, p) in store.iter() {
        write_bytes(&mut buf, name.as_bytes())?;
        write_tensor(&mut buf, &p.value)?;
        write_tensor(&mut buf, &p.m)?;
        write_tensor(&mut buf, &p.v)?;
        write_u64(&mut buf, p.t)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint<E: Element> {
    pub config: RunConfig,
    pub store: ParamStore<E>,
}

fn read_header(r: &mut Cursor<Vec<u8>>) -> Result<RunConfig> {
    let magic = read_exact(r, 4)?;
    if magic != MAGIC {
        return Err(err("wrong magic: not a checkpoint file"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(err(format!("format version {version} is not supported (expected {VERSION})")));
    }
    let digest = String::from_utf8(read_bytes(r, 1 << 10, "digest")?)
        .map_err(|_| err("digest is not utf-8"))?;
    let text = String::from_utf8(read_bytes(r, 1 << 20, "config")?)
        .map_err(|_| err("config is not utf-8"))?;
    let config = RunConfig::from_text(&text)?;
    if config.digest() != digest {
        return Err(err("embedded config does not match its recorded digest"));
    }
    Ok(config)
}

/// Reads just the embedded run config, skipping the parameter blob. Lets a
/// caller pick the element type before a full load.
pub fn peek_config(path: &Path) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    read_header(&mut Cursor::new(bytes))
}

/// Loads and verifies a checkpoint. When `expect` is given, its digest must
/// match the embedded one unless `force` is set.
pub fn load_checkpoint<E: Element>(
    path: &Path,
    expect: Option<&RunConfig>,
    force: bool,
) -> Result<LoadedCheckpoint<E>> {
    let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    let mut r = Cursor::new(bytes);
    let config = read_header(&mut r)?;
    if let Some(run) = expect {
        if run.digest() != config.digest() && !force {
            return Err(err(
                "checkpoint config digest differs from the run config (pass --force to override)",
            ));
        }
    }

    let count = read_len(&mut r, 1 << 20, "parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r, 1 << 12, "name")?)
            .map_err(|_| err("parameter name is not utf-8"))?;
        let value = read_tensor::<E>(&mut r)?;
        let m = read_tensor::<E>(&mut r)?;
        let v = read_tensor::<E>(&mut r)?;
        let t = read_u64(&mut r)?;
        store.insert(&name, value)?;
        let p = store.get_mut(&name).unwrap();
        p.m = m;
        p.v = v;
        p.t = t;
    }
    let pos = r.position() as usize;
    if pos != r.get_ref().len() {
        return Err(err(format!("{} trailing bytes after the last parameter", r.get_ref().len() - pos)));
    }
    Ok(LoadedCheckpoint { config, store })
}
