//! `.vol` files: one UTF-8 JSON header line, then `X*Y*Z` little-endian
//! `f32` values in x-major, y, z order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolHeader {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: String,
    pub value_range: [f32; 2],
}

pub fn encode(v: &Volume) -> Vec<u8> {
    let (lo, hi) = v.min_max();
    let header = VolHeader {
        shape: v.shape(),
        spacing: v.spacing(),
        dtype: DTYPE_F32LE.to_string(),
        value_range: [lo, hi],
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(v.len() * 4);
    for &value in v.data() {
        out.extend_from_slice(&value.to_le_bytes());
    }
    out
}

pub fn decode(mut reader: impl BufRead) -> Result<Volume> {
    let bad = |reason: String| Error::Format {
        what: "volume file",
        reason,
    };
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| bad(format!("reading header: {e}")))?;
    if line.last() != Some(&b'\n') {
        return Err(bad("header line is not newline-terminated".into()));
    }
    let header: VolHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| bad(format!("header json: {e}")))?;
    if header.dtype != DTYPE_F32LE {
        return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
    }
    let count: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; count * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| bad(format!("payload truncated, expected {count} f32 values")))?;
    let mut rest = [0u8; 1];
    if reader.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.shape, header.spacing, data)
}

pub fn write_vol(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(v)).map_err(|e| Error::io(path, e))
}

pub fn read_vol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let v = Volume::new([1, 2, 1], [0.5, 0.5, 2.5], vec![0.25, 1.0]).unwrap();
        let bytes = encode(&v);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["shape"], serde_json::json!([1, 2, 1]));
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["value_range"], serde_json::json!([0.25, 1.0]));
        assert_eq!(&bytes[nl + 1..nl + 5], &0.25f32.to_le_bytes());
        assert_eq!(bytes.len(), nl + 1 + 8);
    }

    #[test]
    fn truncated_and_padded_payloads_fail() {
        let v = Volume::filled([2, 2, 2], 0.5).unwrap();
        let bytes = encode(&v);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer[..]).is_err());
        assert!(decode(&b"{\"shape\":[1,1,1]}"[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let v = Volume::from_fn([shape.0, shape.1, shape.2], |_, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 33) as u32 & 0x3f7f_ffff)
            }).unwrap().with_spacing([0.7, 1.1, 2.5]);
            let back = decode(&encode(&v)[..]).unwrap();
            prop_assert_eq!(back.shape(), v.shape());
            prop_assert_eq!(back.spacing(), v.spacing());
            let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
