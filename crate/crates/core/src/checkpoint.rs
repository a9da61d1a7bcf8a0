//! `LWDL1` model checkpoints.
//!
//! ```text
//! "LWDL1"                 5 bytes
//! spec length L           u32, little-endian
//! spec                    L bytes of UTF-8 TOML (a `ModelSpec`)
//! parameter count P       u64, little-endian
//! parameters              P × f64, little-endian, declaration order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LWDL1";

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let spec = toml::to_string(model.spec()).map_err(|e| Error::config("model spec", e.to_string()))?;
    let params = model.parameters();
    let spec_len = u32::try_from(spec.len()).map_err(|_| Error::config("model spec", "too long"))?;
    let mut out = Vec::with_capacity(17 + spec.len() + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&spec_len.to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(Error::Format {
            offset: bytes.len(),
            reason: format!("truncated while reading {what}"),
        });
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0;
    if take(bytes, &mut pos, 5, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected LWDL1".into(),
        });
    }
    let len = u32::from_le_bytes(take(bytes, &mut pos, 4, "spec length")?.try_into().expect("4 bytes")) as usize;
    let spec_offset = pos;
    let text = std::str::from_utf8(take(bytes, &mut pos, len, "spec")?).map_err(|e| Error::Format {
        offset: spec_offset + e.valid_up_to(),
        reason: "spec is not UTF-8".into(),
    })?;
    let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Format {
        offset: spec_offset,
        reason: format!("invalid spec: {}", e.message()),
    })?;
    let mut model = Model::build(spec)?;
    let count_offset = pos;
    let count = u64::from_le_bytes(take(bytes, &mut pos, 8, "parameter count")?.try_into().expect("8 bytes"));
    if count != model.num_parameters() as u64 {
        return Err(Error::Format {
            offset: count_offset,
            reason: format!("spec needs {} parameters, file declares {count}", model.num_parameters()),
        });
    }
    let raw = take(bytes, &mut pos, model.num_parameters() * 8, "parameters")?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos,
            reason: "trailing bytes after parameters".into(),
        });
    }
    model.set_parameters(&params)?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?).map_err(Error::file(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path).map_err(Error::file(path))?)
}
