//! Parameter checkpoints.
//!
//! Layout: one ASCII line `dirdp-params v1 <architecture descriptor> count=<n>\n`
//! followed by exactly `n` little-endian IEEE-754 `f64` values in flattened
//! parameter order. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Architecture, NetworkParams};
use crate::error::{Error, Result};
use crate::tensor::FlatVector;

const MAGIC: &str = "dirdp-params v1";

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let header = format!("{MAGIC} {} count={}\n", params.arch(), params.len());
    let mut out = Vec::with_capacity(header.len() + 8 * params.len());
    out.extend_from_slice(header.as_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<NetworkParams> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::data(origin, "missing checkpoint header line"))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::data(origin, "checkpoint header is not UTF-8"))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::data(origin, format!("bad checkpoint magic in {header:?}")))?
        .trim();
    let (descriptor, count) = rest
        .rsplit_once(" count=")
        .ok_or_else(|| Error::data(origin, "checkpoint header lacks count"))?;
    let count: usize = count
        .parse()
        .map_err(|_| Error::data(origin, format!("bad parameter count {count:?}")))?;
    let arch = Architecture::parse_descriptor(descriptor)
        .map_err(|e| Error::data(origin, e.to_string()))?;
    if arch.param_count() != count {
        return Err(Error::data(
            origin,
            format!("{arch} has {} parameters, header says {count}", arch.param_count()),
        ));
    }
    let body = &bytes[newline + 1..];
    if body.len() != 8 * count {
        return Err(Error::data(
            origin,
            format!("expected {} payload bytes, found {}", 8 * count, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let flat = FlatVector::new(data).map_err(|e| Error::data(origin, e.to_string()))?;
    NetworkParams::from_flat(arch, flat)
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(params)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
