use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::model::{ModelConfig, ModelParams, TensorMut, TensorRef, Vocab};

const MAGIC: &str = "fedpt-model";
const VERSION: u32 = 1;

/// Writes a model checkpoint: a text header listing the config and every
/// tensor name with its shape, then all tensor values as little-endian f64
/// in header order. Round-trips are bit-exact.
pub fn save_model(params: &ModelParams, seed: u64, path: &Path) -> Result<()> {
    let c = &params.config;
    let tensors = params.tensors();
    let mut payload: Vec<u8> = Vec::with_capacity(params.param_count() * 8);
    for (_, t) in &tensors {
        match t {
            TensorRef::M(m) => {
                for &x in m.iter() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorRef::V(v) => {
                for &x in v.iter() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} v{VERSION}\n"));
    header.push_str(&format!("layers={}\n", c.layers));
    header.push_str(&format!("width={}\n", c.width));
    header.push_str(&format!("heads={}\n", c.heads));
    header.push_str(&format!("context_len={}\n", c.context_len));
    header.push_str(&format!(
        "vocab_size={} pad={} begin={} end={}\n",
        c.vocab.size, c.vocab.pad, c.vocab.begin, c.vocab.end
    ));
    header.push_str(&format!("seed={seed}\n"));
    header.push_str(&format!("payload_bytes={}\n", payload.len()));
    header.push_str(&format!("checksum={:016x}\n", fnv1a(&payload)));
    for (name, t) in &tensors {
        let (rows, cols) = match t {
            TensorRef::M(m) => (m.nrows(), m.ncols()),
            TensorRef::V(v) => (v.len(), 0),
        };
        header.push_str(&format!("tensor={name} rows={rows} cols={cols}\n"));
    }
    header.push_str("end-header\n");

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(&payload).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn header_field<'a>(line: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .ok_or_else(|| Error::format(path, format!("expected `{key}=...`, saw {line:?}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, path: &Path) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::format(path, format!("bad {what} value {s:?}")))
}

/// Loads a checkpoint written by [`save_model`]. Returns the model and the
/// seed recorded at save time.
pub fn load_model(path: &Path) -> Result<(ModelParams, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end-header\n")
        .ok_or_else(|| Error::format(path, "missing end-header marker"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format(path, "header is not utf-8"))?;
    let payload = &bytes[header_end + 11..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != format!("{MAGIC} v{VERSION}") {
        return Err(Error::format(path, format!("bad magic line {magic:?}")));
    }
    let layers: usize = parse_num(header_field(lines.next().unwrap_or(""), "layers", path)?, "layers", path)?;
    let width: usize = parse_num(header_field(lines.next().unwrap_or(""), "width", path)?, "width", path)?;
    let heads: usize = parse_num(header_field(lines.next().unwrap_or(""), "heads", path)?, "heads", path)?;
    let context_len: usize =
        parse_num(header_field(lines.next().unwrap_or(""), "context_len", path)?, "context_len", path)?;
    let vocab_line = lines.next().unwrap_or("");
    let mut vocab_parts = vocab_line.split_whitespace();
    let vsize: usize =
        parse_num(header_field(vocab_parts.next().unwrap_or(""), "vocab_size", path)?, "vocab_size", path)?;
    let pad: u32 = parse_num(header_field(vocab_parts.next().unwrap_or(""), "pad", path)?, "pad", path)?;
    let begin: u32 =
        parse_num(header_field(vocab_parts.next().unwrap_or(""), "begin", path)?, "begin", path)?;
    let end: u32 = parse_num(header_field(vocab_parts.next().unwrap_or(""), "end", path)?, "end", path)?;
    let seed: u64 = parse_num(header_field(lines.next().unwrap_or(""), "seed", path)?, "seed", path)?;
    let payload_bytes: usize = parse_num(
        header_field(lines.next().unwrap_or(""), "payload_bytes", path)?,
        "payload_bytes",
        path,
    )?;
    let checksum: u64 = u64::from_str_radix(
        header_field(lines.next().unwrap_or(""), "checksum", path)?,
        16,
    )
    .map_err(|_| Error::format(path, "bad checksum value"))?;

    if payload.len() != payload_bytes {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header says {payload_bytes}", payload.len()),
        ));
    }
    if fnv1a(payload) != checksum {
        return Err(Error::format(path, "payload checksum mismatch"));
    }

    let config = ModelConfig {
        layers,
        width,
        heads,
        context_len,
        vocab: Vocab { size: vsize, pad, begin, end },
    };
    config.validate().map_err(|e| Error::format(path, format!("bad config: {e}")))?;
    let mut model = ModelParams::zeros(config);

    let mut cursor = payload;
    let mut read_f64 = |n: usize| -> Result<Vec<f64>> {
        if cursor.len() < n * 8 {
            return Err(Error::format(path, "payload truncated"));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 8];
            (&cursor[..8]).read_exact(&mut buf).expect("length checked");
            out.push(f64::from_le_bytes(buf));
            cursor = &cursor[8..];
        }
        Ok(out)
    };

    for (name, t) in model.tensors_mut() {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing tensor line for {name}")))?;
        let mut parts = line.split_whitespace();
        let got = header_field(parts.next().unwrap_or(""), "tensor", path)?;
        if got != name {
            return Err(Error::format(path, format!("expected tensor {name}, saw {got}")));
        }
        let rows: usize = parse_num(header_field(parts.next().unwrap_or(""), "rows", path)?, "rows", path)?;
        let cols: usize = parse_num(header_field(parts.next().unwrap_or(""), "cols", path)?, "cols", path)?;
        match t {
            TensorMut::M(m) => {
                if (rows, cols) != m.dim() {
                    return Err(Error::format(
                        path,
                        format!("tensor {name} has shape {rows}x{cols}, expected {:?}", m.dim()),
                    ));
                }
                let vals = read_f64(rows * cols)?;
                for (dst, src) in m.iter_mut().zip(vals) {
                    *dst = src;
                }
            }
            TensorMut::V(v) => {
                if rows != v.len() || cols != 0 {
                    return Err(Error::format(
                        path,
                        format!("tensor {name} has shape {rows}x{cols}, expected {}", v.len()),
                    ));
                }
                let vals = read_f64(rows)?;
                for (dst, src) in v.iter_mut().zip(vals) {
                    *dst = src;
                }
            }
        }
    }
    if !cursor.is_empty() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((model, seed))
}
