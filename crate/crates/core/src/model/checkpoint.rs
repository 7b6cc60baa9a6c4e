//! Binary checkpoint format.
//!
//! ```text
//! "MFED"                      4 bytes magic
//! version                     u8 (= 1)
//! entry count                 u32
//! per entry:
//!   segment                   u8 (0 = encoder, 1 = decoder)
//!   name length, name         u16, UTF-8 bytes
//!   offset, length            u64, u64
//!   rank, dims                u8, rank × u64
//! encoder length              u64
//! decoder length              u64
//! values                      f64 × (encoder + decoder), encoder first
//! ```
//!
//! All integers and floats are little-endian. Values are stored as raw
//! IEEE-754 bits, so a write/read cycle is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Layout, LayoutEntry, ModelParams, ParamVector};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFED";
pub const VERSION: u8 = 1;

const SEGMENT_ENCODER: u8 = 0;
const SEGMENT_DECODER: u8 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.total_len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = params.encoder_layout.entries().len() + params.decoder_layout.entries().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (segment, layout) in [
        (SEGMENT_ENCODER, &params.encoder_layout),
        (SEGMENT_DECODER, &params.decoder_layout),
    ] {
        for e in layout.entries() {
            out.push(segment);
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.offset as u64).to_le_bytes());
            out.extend_from_slice(&(e.len as u64).to_le_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(params.encoder.len() as u64).to_le_bytes());
    out.extend_from_slice(&(params.decoder.len() as u64).to_le_bytes());
    for v in params.encoder.iter().chain(params.decoder.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let (mut enc, mut dec) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let segment = c.u8()?;
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("layout name is not UTF-8".into()))?
            .to_string();
        let offset = c.usize()?;
        let len = c.usize()?;
        let rank = c.u8()?;
        let shape = (0..rank).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
        let entry = LayoutEntry {
            name,
            offset,
            len,
            shape,
        };
        match segment {
            SEGMENT_ENCODER => enc.push(entry),
            SEGMENT_DECODER => dec.push(entry),
            s => return Err(Error::Checkpoint(format!("unknown segment tag {s}"))),
        }
    }
    let enc_layout = Layout::from_entries(enc).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let dec_layout = Layout::from_entries(dec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let enc_len = c.usize()?;
    let dec_len = c.usize()?;
    if enc_len != enc_layout.total_len() || dec_len != dec_layout.total_len() {
        return Err(Error::Checkpoint("segment lengths disagree with layout".into()));
    }
    let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| c.u64().map(f64::from_bits)).collect() };
    let encoder = ParamVector::new(read(enc_len)?);
    let decoder = ParamVector::new(read(dec_len)?);
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    ModelParams::new(encoder, decoder, enc_layout, dec_layout)
}

pub fn write(path: &Path, params: &ModelParams) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Architecture, HeadKind};

    #[test]
    fn header_layout() {
        let p = init_params(&Architecture::default_for(4), &HeadKind::Binary, 1, 3).unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"MFED");
        assert_eq!(bytes[4], VERSION);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 6);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), *p.decoder.last().unwrap());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let p = init_params(&Architecture::default_for(4), &HeadKind::Binary, 1, 3).unwrap();
        let bytes = encode(&p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn special_values_survive() {
        let mut p = init_params(&Architecture::default_for(2), &HeadKind::Binary, 1, 3).unwrap();
        p.encoder[0] = -0.0;
        p.encoder[1] = f64::MIN_POSITIVE / 4.0;
        let q = decode(&encode(&p)).unwrap();
        assert_eq!(q.encoder[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(q.encoder[1].to_bits(), p.encoder[1].to_bits());
    }
}
