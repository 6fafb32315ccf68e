//! NPY v1.0 reader/writer.
//!
//! Float tensors are restricted to little-endian `<f4` / `<f8`, C order.
//! Integer maps (ground truth, masks) go through [`read_npy_ints`] /
//! [`write_npy_ints`]. Writes follow the NumPy layout byte-for-byte: magic,
//! version 1.0, little-endian u16 header length, then the dict literal padded
//! with spaces and terminated by `\n` so that the total header size is a
//! multiple of 64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

struct Header {
    descr: String,
    shape: Vec<usize>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 10 {
        return Err(format_err(0, "file shorter than the 10-byte NPY preamble"));
    }
    if &bytes[..6] != MAGIC {
        return Err(format_err(0, "bad magic, not an NPY file"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if major != 1 || minor != 0 {
        return Err(format_err(
            6,
            format!("unsupported NPY version {major}.{minor}, only 1.0 is accepted"),
        ));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_offset = 10 + hlen;
    if bytes.len() < payload_offset {
        return Err(format_err(
            10,
            format!("declared header length {hlen} exceeds file size"),
        ));
    }
    let dict = std::str::from_utf8(&bytes[10..payload_offset])
        .map_err(|_| format_err(10, "header dict is not valid UTF-8"))?;

    let descr = extract_quoted(dict, "descr")
        .ok_or_else(|| format_err(10, "header dict missing 'descr'"))?;
    let fortran = extract_after(dict, "fortran_order")
        .ok_or_else(|| format_err(10, "header dict missing 'fortran_order'"))?;
    if fortran.starts_with("True") {
        return Err(format_err(10, "Fortran-order arrays are not supported"));
    }
    if !fortran.starts_with("False") {
        return Err(format_err(10, "unparseable 'fortran_order' value"));
    }
    let shape = extract_shape(dict).ok_or_else(|| format_err(10, "unparseable 'shape' tuple"))?;
    Ok(Header {
        descr,
        shape,
        payload_offset,
    })
}

/// Value of `'key': 'value'` inside the dict literal.
fn extract_quoted(dict: &str, key: &str) -> Option<String> {
    let pat = format!("'{key}'");
    let at = dict.find(&pat)? + pat.len();
    let rest = &dict[at..];
    let colon = rest.find(':')?;
    let rest = rest[colon + 1..].trim_start();
    let quote = rest.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    let rest = &rest[1..];
    let end = rest.find(quote)?;
    Some(rest[..end].to_string())
}

/// Raw token following `'key':`.
fn extract_after<'a>(dict: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}'");
    let at = dict.find(&pat)? + pat.len();
    let rest = &dict[at..];
    let colon = rest.find(':')?;
    Some(rest[colon + 1..].trim_start())
}

fn extract_shape(dict: &str) -> Option<Vec<usize>> {
    let rest = extract_after(dict, "shape")?;
    if !rest.starts_with('(') {
        return None;
    }
    let close = rest.find(')')?;
    let inner = &rest[1..close];
    let mut out = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse::<usize>().ok()?);
    }
    Some(out)
}

fn check_payload(
    bytes: &[u8],
    header: &Header,
    item_size: usize,
) -> Result<usize> {
    let count: usize = header.shape.iter().product();
    let need = count * item_size;
    let have = bytes.len() - header.payload_offset;
    if have < need {
        return Err(format_err(
            header.payload_offset,
            format!(
                "payload truncated: shape {:?} with {item_size}-byte items requires {need} bytes, found {have}",
                header.shape
            ),
        ));
    }
    Ok(count)
}

/// Decodes an NPY byte buffer into a float tensor (`<f4` or `<f8` only).
pub fn read_npy_bytes(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes)?;
    let (dtype, item) = match header.descr.as_str() {
        "<f4" => (Dtype::F32, 4usize),
        "<f8" => (Dtype::F64, 8usize),
        other => {
            return Err(format_err(
                10,
                format!("unsupported dtype '{other}', expected '<f4' or '<f8'"),
            ))
        }
    };
    let count = check_payload(bytes, &header, item)?;
    let payload = &bytes[header.payload_offset..header.payload_offset + count * item];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::with_dtype(header.shape, data, dtype)
}

/// Encodes a tensor; the dtype tag picks `<f4` or `<f8`.
pub fn write_npy_bytes(t: &Tensor) -> Vec<u8> {
    let mut payload = Vec::with_capacity(t.len() * t.dtype().item_size());
    match t.dtype() {
        Dtype::F32 => {
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    encode(t.dtype().descr(), t.shape(), payload)
}

fn shape_literal(shape: &[usize]) -> String {
    match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => {
            let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

fn encode(descr: &str, shape: &[usize], payload: Vec<u8>) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {}, }}",
        shape_literal(shape)
    );
    // Pad with spaces, terminate with '\n', align the full header to 64.
    let unpadded = 10 + dict.len() + 1;
    let total = unpadded.div_ceil(64) * 64;
    let hlen = total - 10;
    let mut out = Vec::with_capacity(total + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(hlen as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(total - 1, b' ');
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    read_npy_bytes(&bytes)
}

pub fn write_npy(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_npy_bytes(t))?;
    Ok(())
}

/// Reads an integer-typed NPY map (any little-endian signed/unsigned width).
/// Returns the shape and the values widened to `i64`.
pub fn read_npy_ints(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<i64>)> {
    let bytes = fs::read(path)?;
    read_npy_ints_bytes(&bytes)
}

pub fn read_npy_ints_bytes(bytes: &[u8]) -> Result<(Vec<usize>, Vec<i64>)> {
    let header = parse_header(bytes)?;
    let descr = header.descr.as_str();
    let item = match descr {
        "|i1" | "|u1" | "|b1" => 1usize,
        "<i2" | "<u2" => 2,
        "<i4" | "<u4" => 4,
        "<i8" | "<u8" => 8,
        other => {
            return Err(format_err(
                10,
                format!("unsupported integer dtype '{other}'"),
            ))
        }
    };
    let count = check_payload(bytes, &header, item)?;
    let payload = &bytes[header.payload_offset..header.payload_offset + count * item];
    let signed = descr.contains('i');
    let data: Vec<i64> = payload
        .chunks_exact(item)
        .map(|c| {
            let mut buf = [0u8; 8];
            buf[..item].copy_from_slice(c);
            let raw = u64::from_le_bytes(buf);
            if signed {
                // Sign-extend from the item width.
                let shift = 64 - 8 * item;
                ((raw << shift) as i64) >> shift
            } else {
                raw as i64
            }
        })
        .collect();
    Ok((header.shape, data))
}

/// Writes an integer map as `<i8`.
pub fn write_npy_ints(shape: &[usize], data: &[i64], path: impl AsRef<Path>) -> Result<()> {
    let expect: usize = shape.iter().product();
    if expect != data.len() {
        return Err(Error::Dimension(format!(
            "shape {shape:?} implies {expect} elements but buffer holds {}",
            data.len()
        )));
    }
    let mut payload = Vec::with_capacity(data.len() * 8);
    for &v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, encode("<i8", shape, payload))?;
    Ok(())
}
