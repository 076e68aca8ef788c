//! Parameter checkpoints: a text manifest of named shapes terminated by
//! `end\n`, followed by every value as a little-endian `f64`, tensors in
//! manifest order.
//!
//! ```text
//! riskmeta-checkpoint 1
//! w0 20x64
//! b0 64
//! end
//! <raw f64 LE ...>
//! ```

use super::{ModelError, ModelParams};
use crate::autodiff::Tensor;

const MAGIC_LINE: &str = "riskmeta-checkpoint 1";

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut header = format!("{MAGIC_LINE}\n");
    for (name, t) in &params.tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {}\n", dims.join("x")));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for (_, t) in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a checkpoint, requiring its manifest to equal `expected`.
pub fn read_checkpoint(bytes: &[u8], expected: &[(String, Vec<usize>)]) -> Result<ModelParams, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let end = find_header_end(bytes).ok_or_else(|| bad("missing `end` line".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| bad(e.to_string()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC_LINE) {
        return Err(bad("not a riskmeta checkpoint".into()));
    }
    let mut manifest = Vec::new();
    for line in lines.take_while(|l| *l != "end") {
        let (name, dims) = line.split_once(' ').ok_or_else(|| bad(format!("bad manifest line `{line}`")))?;
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse::<usize>().map_err(|e| bad(format!("bad dimension `{d}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?
        };
        manifest.push((name.to_string(), shape));
    }
    if manifest != expected {
        return Err(bad(format!("manifest {manifest:?} does not match expected {expected:?}")));
    }
    let body = &bytes[end..];
    let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if body.len() != total * 8 {
        return Err(bad(format!("expected {} payload bytes, found {}", total * 8, body.len())));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = manifest
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            (name, Tensor::new(shape, data))
        })
        .collect();
    Ok(ModelParams::new(tensors))
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"\nend\n";
    bytes.windows(needle.len()).position(|w| w == needle).map(|p| p + needle.len())
}
