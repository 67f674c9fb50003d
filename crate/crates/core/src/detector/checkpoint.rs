//! Binary checkpoint format: magic string, format version, tensor count,
//! then per tensor (name length, name, rank, extents, little-endian f64
//! payload). Loads validate the whole file before touching any parameter,
//! so a failed load never leaves partial state.

use std::io::{Read, Write};
use std::path::Path;

use crate::detector::NanoParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FRSCKPT\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(named: &[(String, &Tensor)], path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let err = |msg: String| Error::Checkpoint(msg);

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(err(format!("truncated file at byte {pos:?}", pos = *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(err("bad magic; not a checkpoint file".into()));
    }
    let version = take_u32(&mut pos)?;
    if version != VERSION {
        return Err(err(format!(
            "format version mismatch: file has {version}, expected {VERSION}"
        )));
    }
    let count = take_u32(&mut pos)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| err("tensor name is not valid UTF-8".into()))?
            .to_string();
        let rank = take_u32(&mut pos)? as usize;
        if rank == 0 || rank > 4 {
            return Err(err(format!("tensor `{name}` has invalid rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut pos, n * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((
            name.clone(),
            Tensor::new(shape, data)
                .map_err(|e| err(format!("tensor `{name}` is malformed: {e}")))?,
        ));
    }
    if pos != bytes.len() {
        return Err(err(format!("{} trailing bytes after payload", bytes.len() - pos)));
    }
    Ok(out)
}

pub fn save_params(params: &NanoParams, path: &Path) -> Result<()> {
    save_checkpoint(&params.named_tensors(), path)
}

/// Load a checkpoint into an existing parameter set. Names and shapes must
/// match the current configuration exactly; the first mismatch is named in
/// the error and nothing is modified on failure.
pub fn load_params_into(params: &mut NanoParams, path: &Path) -> Result<()> {
    let loaded = load_checkpoint(path)?;
    let expected = params.named_tensors();
    if loaded.len() != expected.len() {
        // find the first name present on one side only
        for ((le, _), (ex, _)) in loaded.iter().zip(&expected) {
            if le != ex {
                return Err(Error::Checkpoint(format!(
                    "tensor name mismatch: file has `{le}`, config expects `{ex}`"
                )));
            }
        }
        let diff = if loaded.len() > expected.len() {
            loaded[expected.len()].0.clone()
        } else {
            expected[loaded.len()].0.clone()
        };
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch ({} in file, {} in config), first unmatched: `{diff}`",
            loaded.len(),
            expected.len()
        )));
    }
    for ((le, lt), (ex, et)) in loaded.iter().zip(&expected) {
        if le != ex {
            return Err(Error::Checkpoint(format!(
                "tensor name mismatch: file has `{le}`, config expects `{ex}`"
            )));
        }
        if lt.shape() != et.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{le}` shape mismatch: file has {:?}, config expects {:?}",
                lt.shape(),
                et.shape()
            )));
        }
    }
    // fully validated; now assign
    let mut by_name: std::collections::BTreeMap<String, Tensor> = loaded.into_iter().collect();
    params.visit_mut(&mut |name, t| {
        *t = by_name.remove(name).expect("validated above");
    });
    Ok(())
}
