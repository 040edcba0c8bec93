//! Frame codec for the robot/server connection.
//!
//! Layout, little-endian: magic `HPV1`, message type u8, inference id u32,
//! layer id u32, range start u32, range end u32, ndim u8, ndim dims u32,
//! payload length u64, payload, CRC-32 of every preceding byte.
//!
//! FRAGMENT and RESULT frames carry an operator range of the source layer
//! (layer id `u32::MAX` is the raw input) and the matching rows as f32 values.
//! START_INFERENCE carries the plan bucket in the layer id field.

use std::io::{Read, Write};
use std::ops::Range;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::model::Source;

pub const MAGIC: &[u8; 4] = b"HPV1";
pub const INPUT_LAYER_ID: u32 = u32::MAX;
const MAX_PAYLOAD: u64 = 1 << 32;
const MAX_DIMS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Model = 2,
    ProfileInfo = 3,
    Planbook = 4,
    StartInference = 5,
    Fragment = 6,
    Result = 7,
    Error = 8,
    Bye = 9,
}

impl MsgType {
    fn from_u8(v: u8) -> Option<MsgType> {
        use MsgType::*;
        Some(match v {
            1 => Hello,
            2 => Model,
            3 => ProfileInfo,
            4 => Planbook,
            5 => StartInference,
            6 => Fragment,
            7 => Result,
            8 => Error,
            9 => Bye,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub kind: MsgType,
    pub inference: u32,
    pub layer: u32,
    pub range: Range<u32>,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn control(kind: MsgType, payload: Vec<u8>) -> Frame {
        Frame {
            kind,
            inference: 0,
            layer: 0,
            range: 0..0,
            dims: Vec::new(),
            payload,
        }
    }

    pub fn source(&self) -> Source {
        if self.layer == INPUT_LAYER_ID {
            Source::Input
        } else {
            Source::Layer(self.layer as usize)
        }
    }

    pub fn ops(&self) -> Range<usize> {
        self.range.start as usize..self.range.end as usize
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 4 * 4 + 1 + 4 * self.dims.len() + 8 + self.payload.len() + 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.encoded_len());
        b.extend_from_slice(MAGIC);
        b.push(self.kind as u8);
        for v in [self.inference, self.layer, self.range.start, self.range.end] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(self.dims.len() as u8);
        for d in &self.dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }
}

pub fn layer_id(src: Source) -> u32 {
    match src {
        Source::Input => INPUT_LAYER_ID,
        Source::Layer(i) => i as u32,
    }
}

pub fn write_frame(w: &mut impl Write, f: &Frame) -> Result<()> {
    w.write_all(&f.encode()).map_err(Error::Network)?;
    w.flush().map_err(Error::Network)
}

struct Crc<'a, R> {
    inner: &'a mut R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> Crc<'_, R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(Error::Network)?;
        self.hasher.update(buf);
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Reads one frame. I/O failures are network errors; malformed or corrupted
/// frames are protocol errors.
pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut c = Crc {
        inner: r,
        hasher: crc32fast::Hasher::new(),
    };
    let mut magic = [0; 4];
    c.take(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", magic)));
    }
    let mut t = [0; 1];
    c.take(&mut t)?;
    let kind = MsgType::from_u8(t[0])
        .ok_or_else(|| Error::Protocol(format!("unknown message type {}", t[0])))?;
    let inference = c.u32()?;
    let layer = c.u32()?;
    let (start, end) = (c.u32()?, c.u32()?);
    c.take(&mut t)?;
    let ndim = t[0] as usize;
    if ndim > MAX_DIMS {
        return Err(Error::Protocol(format!(
            "{} dims exceed the limit of {}",
            ndim, MAX_DIMS
        )));
    }
    let dims = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let mut lb = [0; 8];
    c.take(&mut lb)?;
    let len = u64::from_le_bytes(lb);
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "payload of {} bytes is too large",
            len
        )));
    }
    let mut payload = vec![0; len as usize];
    c.take(&mut payload)?;
    let want = c.hasher.clone().finalize();
    let mut cb = [0; 4];
    c.inner.read_exact(&mut cb).map_err(Error::Network)?;
    let got = u32::from_le_bytes(cb);
    if got != want {
        return Err(Error::Protocol(format!(
            "{:?} frame failed its CRC check",
            kind
        )));
    }
    if end < start {
        return Err(Error::Protocol(format!(
            "inverted range {}..{}",
            start, end
        )));
    }
    Ok(Frame {
        kind,
        inference,
        layer,
        range: start..end,
        dims,
        payload,
    })
}

pub fn compress(data: &[u8]) -> Vec<u8> {
    let mut e = ZlibEncoder::new(Vec::new(), Compression::default());
    e.write_all(data).expect("in-memory write");
    e.finish().expect("in-memory write")
}

pub fn decompress(data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    ZlibDecoder::new(data)
        .read_to_end(&mut out)
        .map_err(|e| Error::Protocol(format!("bad compressed payload: {}", e)))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crc_detects_corruption() {
        let f = Frame::control(MsgType::Planbook, compress(b"{\"a\":1}"));
        let mut b = f.encode();
        assert_eq!(read_frame(&mut b.as_slice()).unwrap(), f);
        let k = b.len() - 6;
        b[k] ^= 0x40;
        assert!(matches!(
            read_frame(&mut b.as_slice()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn truncated_stream_is_network_error() {
        let b = Frame::control(MsgType::Bye, vec![]).encode();
        assert!(matches!(read_frame(&mut &b[..10]), Err(Error::Network(_))));
    }

    proptest! {
        #[test]
        fn round_trip(kind in 1u8..=9, inf in any::<u32>(), layer in any::<u32>(), a in 0u32..1000, len in 0u32..1000,
                      dims in proptest::collection::vec(any::<u32>(), 0..4), payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let f = Frame { kind: MsgType::from_u8(kind).unwrap(), inference: inf, layer, range: a..a + len, dims, payload };
            let b = f.encode();
            prop_assert_eq!(b.len(), f.encoded_len());
            prop_assert_eq!(read_frame(&mut b.as_slice()).unwrap(), f);
        }
    }
}
