//! Checkpoint archive: magic "BRPC", format version, a config text block and
//! named tensors. The same container serves the stage-1 and stage-2 nets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{Elem, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BRPC";
const VERSION: u32 = 1;

pub fn save_archive<T: Elem>(
    path: &Path,
    config_text: &str,
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let cfg = config_text.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(nb).map_err(io)?;
        w.write_all(&[T::DTYPE]).map_err(io)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            let x = v.to_f64();
            if T::DTYPE == 0 {
                w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
            } else {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn load_archive<T: Elem>(path: &Path) -> Result<(String, Vec<(String, Tensor<T>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4).map_err(io)?;
    let version = u32::from_le_bytes(u4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut u4).map_err(io)?;
    let cfg_len = u32::from_le_bytes(u4) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(io)?;
    let config_text = String::from_utf8(cfg_bytes)
        .map_err(|e| Error::Checkpoint(format!("config not utf-8: {e}")))?;
    r.read_exact(&mut u4).map_err(io)?;
    let n_entries = u32::from_le_bytes(u4) as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let mut u2 = [0u8; 2];
        r.read_exact(&mut u2).map_err(io)?;
        let name_len = u16::from_le_bytes(u2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("entry name not utf-8: {e}")))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(io)?;
        r.read_exact(&mut u4).map_err(io)?;
        let ndim = u32::from_le_bytes(u4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u4).map_err(io)?;
            shape.push(u32::from_le_bytes(u4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match dtype[0] {
            0 => {
                let mut buf = vec![0u8; numel * 4];
                r.read_exact(&mut buf).map_err(io)?;
                for c in buf.chunks_exact(4) {
                    data.push(T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
                }
            }
            1 => {
                let mut buf = vec![0u8; numel * 8];
                r.read_exact(&mut buf).map_err(io)?;
                for c in buf.chunks_exact(8) {
                    data.push(T::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
            d => return Err(Error::Checkpoint(format!("unknown dtype tag {d}"))),
        }
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok((config_text, entries))
}
