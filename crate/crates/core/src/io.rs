//! On-disk formats: the `TNSR` tensor container and binary Netpbm (P5/P6).
//!
//! `TNSR` layout, all integers little-endian:
//!
//! | offset | size  | field                          |
//! |--------|-------|--------------------------------|
//! | 0      | 4     | magic `b"TNSR"`                |
//! | 4      | 4     | `u32` version, always 1        |
//! | 8      | 1     | `u8` dtype: 0 = f32, 1 = f64   |
//! | 9      | 1     | `u8` rank r, 1 ..= 4           |
//! | 10     | 8 r   | `u64` dims                     |
//! | 10+8r  | ...   | row-major payload              |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, ImageRgb, LabelMap, Tensor};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;
const MAX_RANK: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_tensor(tensor: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    if tensor.rank() > MAX_RANK as usize {
        return Err(Error::UnsupportedRank(tensor.rank() as u8));
    }
    let mut out = Vec::with_capacity(10 + 8 * tensor.rank() + dtype.width() * tensor.len());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&TNSR_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or(Error::Truncated {
        expected: at + n,
        found: bytes.len(),
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().unwrap();
    if &magic != TNSR_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().unwrap());
    if version != TNSR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = match take(bytes, 8, 1)?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        code => return Err(Error::UnsupportedDtype(code)),
    };
    let rank = take(bytes, 9, 1)?[0];
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::UnsupportedRank(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for i in 0..rank as usize {
        let d = u64::from_le_bytes(take(bytes, 10 + 8 * i, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::DimOverflow)?);
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero dimension in {shape:?}")));
    }
    let numel = checked_numel(&shape)?;
    let header = 10 + 8 * rank as usize;
    let payload_len = numel
        .checked_mul(dtype.width())
        .ok_or(Error::DimOverflow)?;
    let payload = take(bytes, header, payload_len)?;
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    write_tensor_as(path, tensor, Dtype::F64)
}

pub fn write_tensor_as(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Parsed Netpbm header plus the offset of the first payload byte.
struct PnmHeader {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::MalformedHeader(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!("expected a number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::MalformedHeader("number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedHeader("missing separator before payload".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader("zero image dimension".into()));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    Ok(PnmHeader {
        width: width as usize,
        height: height as usize,
        payload_start: pos,
    })
}

pub fn encode_ppm(image: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().flatten());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let header = parse_pnm_header(bytes, b"P6")?;
    let n = header.width * header.height;
    let payload = take(bytes, header.payload_start, 3 * n)?;
    let pixels = payload.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    ImageRgb::new(header.height, header.width, pixels)
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.labels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_pnm_header(bytes, b"P5")?;
    let n = header.width * header.height;
    let payload = take(bytes, header.payload_start, n)?;
    LabelMap::new(header.height, header.width, payload.to_vec())
}

pub fn write_ppm(path: impl AsRef<Path>, image: &ImageRgb) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
