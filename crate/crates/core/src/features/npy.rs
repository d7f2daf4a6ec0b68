//! Minimal NPY support: little-endian `f32`, C order.

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

pub fn decode_npy_f32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::format(0, "bad npy magic"));
    }
    let (hlen, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize, 12),
        v => return Err(Error::format(6, format!("unsupported npy version {v}"))),
    };
    let end = start + hlen;
    if bytes.len() < end {
        return Err(Error::format(start as u64, "npy header truncated"));
    }
    let header =
        std::str::from_utf8(&bytes[start..end]).map_err(|_| Error::format(start as u64, "npy header is not utf-8"))?;

    let descr = dict_value(header, "descr").ok_or_else(|| Error::format(start as u64, "npy header lacks descr"))?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    if descr != "<f4" {
        return Err(Error::format(start as u64, format!("unsupported dtype {descr}")));
    }
    if dict_value(header, "fortran_order").map(str::trim) != Some("False") {
        return Err(Error::format(start as u64, "fortran order is not supported"));
    }
    let shape_src = dict_value(header, "shape").ok_or_else(|| Error::format(start as u64, "npy header lacks shape"))?;
    let shape = shape_src
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(start as u64, format!("bad shape {shape_src}")))?;

    let count: usize = shape.iter().product();
    let payload = &bytes[end..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            (end + payload.len().min(count * 4)) as u64,
            format!("payload has {} bytes, shape needs {}", payload.len(), count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(Error::format((end + i * 4) as u64, "non-finite value"));
        }
        data.push(x);
    }
    Ok((shape, data))
}

/// Raw text of the value for `key` in a python dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let at = header.find(&format!("'{key}'")).or_else(|| header.find(&format!("\"{key}\"")))?;
    let rest = &header[at + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    if rest.starts_with('(') {
        let close = rest.find(')')?;
        Some(&rest[..=close])
    } else {
        let stop = rest.find([',', '}']).unwrap_or(rest.len());
        Some(rest[..stop].trim())
    }
}

pub fn encode_npy_f32(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_txt = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_txt}, }}");
    // pad so that the payload starts on a 64-byte boundary
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numpy_style_header() {
        // as written by numpy.save for np.zeros((1, 2, 3), dtype='<f4')
        let mut bytes = b"\x93NUMPY\x01\x00v\x00".to_vec();
        let mut h = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 2, 3), }".to_string();
        h.push_str(&" ".repeat(118 - h.len() - 1));
        h.push('\n');
        bytes.extend_from_slice(h.as_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 24));
        let (shape, data) = decode_npy_f32(&bytes).unwrap();
        assert_eq!(shape, vec![1, 2, 3]);
        assert_eq!(data, vec![0.0; 6]);
    }

    #[test]
    fn roundtrip_and_alignment() {
        let bytes = encode_npy_f32(&[2, 1, 2], &[1.0, -2.0, 3.5, 0.25]);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        let (shape, data) = decode_npy_f32(&bytes).unwrap();
        assert_eq!(shape, vec![2, 1, 2]);
        assert_eq!(data, vec![1.0, -2.0, 3.5, 0.25]);
    }

    #[test]
    fn rejects_f64() {
        let mut bytes = encode_npy_f32(&[1], &[1.0]);
        let at = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[at + 2] = b'8';
        assert!(decode_npy_f32(&bytes).is_err());
    }
}
