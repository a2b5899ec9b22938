//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   b"TIMLABCK"
//! version u32 = 1
//! config  u32 length + JSON PolicyConfig
//! count   u32 number of tensors (6)
//! tensor  u32 name length + name, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Values are stored as raw IEEE bits, so loading is a bitwise round trip.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PolicyConfig, PolicyError, PolicyParams};

const MAGIC: &[u8; 8] = b"TIMLABCK";
const VERSION: u32 = 1;

fn shapes(p: &PolicyParams) -> [(usize, usize); 6] {
    let c = p.config;
    [p.embedding.shape(), p.w1.shape(), (1, c.hidden_dim), (1, c.hidden_dim), p.w2.shape(), (1, c.vocab_size)]
}

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut w: W) -> Result<(), PolicyError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&6u32.to_le_bytes())?;
    for ((name, data), (rows, cols)) in params.tensors().iter().zip(shapes(params)) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(rows as u64).to_le_bytes())?;
        w.write_all(&(cols as u64).to_le_bytes())?;
        for v in data.iter() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PolicyError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, PolicyError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PolicyParams, PolicyError> {
    let bad = |m: String| PolicyError::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a timlab checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: PolicyConfig = serde_json::from_slice(&cfg).map_err(|e| bad(e.to_string()))?;
    config.validate()?;
    let mut params = PolicyParams::zeros(config);
    let expected = shapes(&params);
    let count = read_u32(&mut r)?;
    if count != 6 {
        return Err(bad(format!("expected 6 tensors, found {count}")));
    }
    for (i, (rows, cols)) in expected.into_iter().enumerate() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let want = params.tensors()[i].0;
        if name != want.as_bytes() {
            return Err(bad(format!("tensor {i}: expected `{want}`")));
        }
        let (r_rows, r_cols) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
        if (r_rows, r_cols) != (rows, cols) {
            return Err(bad(format!("tensor `{want}`: shape {r_rows}x{r_cols}, expected {rows}x{cols}")));
        }
        let dst = &mut params.tensors_mut()[i];
        for d in dst.iter_mut() {
            *d = f64::from_bits(read_u64(&mut r)?);
        }
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
