//! Binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "DGDT" | version u16
//! config: num_blocks hidden_size num_heads grid_h grid_w data_dim num_classes t_embed_dim (u32 each), sigma_max f64
//! record count u32
//! per record: name length u16 | name bytes | rank u8 | extents u32 x rank | payload f32 x prod(extents)
//! ```

use std::path::Path;

use crate::dit::{DitConfig, DitParams, DitWeights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"DGDT";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint(w: &DitWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = &w.config;
    for v in [
        c.num_blocks,
        c.hidden_size,
        c.num_heads,
        c.grid_h,
        c.grid_w,
        c.data_dim,
        c.num_classes,
        c.t_embed_dim,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.sigma_max.to_le_bytes());
    let named = w.params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DitWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let found = r.u16("version")?;
    if found != VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: VERSION,
        });
    }
    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        *d = r.u32("config")? as usize;
    }
    let config = DitConfig {
        num_blocks: dims[0],
        hidden_size: dims[1],
        num_heads: dims[2],
        grid_h: dims[3],
        grid_w: dims[4],
        data_dim: dims[5],
        num_classes: dims[6],
        t_embed_dim: dims[7],
        sigma_max: r.f64("config")?,
    };
    config
        .validate()
        .map_err(|e| Error::MalformedCheckpoint(format!("config block: {e}")))?;

    let count = r.u32("record count")? as usize;
    let shapes = crate::dit::param_shapes(&config);
    let expected = shapes.named();
    if count != expected.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{count} tensor records, config implies {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (want_name, want_shape) in expected {
        let len = r.u16("tensor name")? as usize;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::MalformedCheckpoint(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let rank = r.u8(&name)? as usize;
        let shape = (0..rank)
            .map(|_| r.u32(&name).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != *want_shape {
            return Err(Error::MalformedCheckpoint(format!(
                "{name}: shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        values.push(Tensor::new(shape, data).map_err(|e| match e {
            e @ Error::NonFinite { .. } => e,
            e => Error::MalformedCheckpoint(format!("{name}: {e}")),
        })?);
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = DitParams::from_ordered(config.num_blocks, values).expect("count checked");
    DitWeights::new(config, params)
}

pub fn save_checkpoint(w: &DitWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(w)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DitWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// The weights as they will read back from disk.
pub fn round_to_stored(w: &DitWeights) -> DitWeights {
    DitWeights {
        config: w.config.clone(),
        params: w.params.map(|t| {
            let data = t.data().iter().map(|&v| v as f32 as f64).collect();
            Tensor::new(t.shape().to_vec(), data).expect("finite")
        }),
    }
}
