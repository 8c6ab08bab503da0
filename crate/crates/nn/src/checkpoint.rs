//! Versioned binary checkpoint:
//!
//! ```text
//! magic "FLNNCKPT" | u32 version | u32 spec length | spec JSON | u64 count | f32 LE params
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::NnError;
use crate::network::Network;
use crate::spec::NetworkSpec;

pub const MAGIC: &[u8; 8] = b"FLNNCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(net: &Network<f32>) -> Vec<u8> {
    let spec = serde_json::to_vec(net.spec()).expect("spec serializes");
    let mut out = Vec::with_capacity(24 + spec.len() + 4 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Checkpoint {
                offset: self.pos,
                msg: format!("truncated {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Network<f32>, NnError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(NnError::Checkpoint {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NnError::Checkpoint {
            offset: 8,
            msg: format!("unsupported version {version}"),
        });
    }
    let spec_len = r.u32("spec length")? as usize;
    let spec_at = r.pos;
    let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len, "spec")?).map_err(|e| NnError::Checkpoint {
        offset: spec_at,
        msg: format!("spec: {e}"),
    })?;
    let mut net = Network::zeroed(spec).map_err(|e| NnError::Checkpoint {
        offset: spec_at,
        msg: e.to_string(),
    })?;
    let count_at = r.pos;
    let count = r.u64("parameter count")? as usize;
    if count != net.num_params() {
        return Err(NnError::Checkpoint {
            offset: count_at,
            msg: format!("spec needs {} parameters, file has {count}", net.num_params()),
        });
    }
    let raw = r.take(count * 4, "parameters")?;
    let params: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if r.pos != buf.len() {
        return Err(NnError::Checkpoint {
            offset: r.pos,
            msg: "trailing bytes".into(),
        });
    }
    net.set_params(&params)?;
    Ok(net)
}

pub fn save(net: &Network<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network<f32>, NnError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
