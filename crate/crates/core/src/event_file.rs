//! Binary event file.
//!
//! All fields little-endian. A fixed 40-byte header:
//!
//! | offset | type   | field                         |
//! |--------|--------|-------------------------------|
//! | 0      | [u8;4] | magic `EVPL`                  |
//! | 4      | u32    | version (1)                   |
//! | 8      | u16    | height                        |
//! | 10     | u16    | width                         |
//! | 12     | i64    | t_begin (µs)                  |
//! | 20     | i64    | t_end (µs)                    |
//! | 28     | f64    | contrast threshold            |
//! | 36     | u32    | event count                   |
//!
//! followed by `count` packed 13-byte records `(u16 x, u16 y, i64 t, i8 p)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::event_model::{Event, EventStream};

pub const MAGIC: &[u8; 4] = b"EVPL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
pub const RECORD_LEN: usize = 13;

pub fn encode(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(stream.height as u16).to_le_bytes());
    out.extend_from_slice(&(stream.width as u16).to_le_bytes());
    out.extend_from_slice(&stream.t_begin.to_le_bytes());
    out.extend_from_slice(&stream.t_end.to_le_bytes());
    out.extend_from_slice(&stream.threshold.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<EventStream> {
    let bad = |r: &str| Error::format(origin, r);
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
    let i64_at = |o: usize| i64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let height = u16_at(8) as usize;
    let width = u16_at(10) as usize;
    let t_begin = i64_at(12);
    let t_end = i64_at(20);
    let threshold = f64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes"));
    let count = u32_at(36) as usize;
    if bytes.len() != HEADER_LEN + count * RECORD_LEN {
        return Err(bad(&format!("expected {count} records, payload is {} bytes", bytes.len() - HEADER_LEN)));
    }
    let events = bytes[HEADER_LEN..]
        .chunks_exact(RECORD_LEN)
        .map(|r| Event {
            x: u16::from_le_bytes([r[0], r[1]]),
            y: u16::from_le_bytes([r[2], r[3]]),
            t: i64::from_le_bytes(r[4..12].try_into().expect("8 bytes")),
            p: r[12] as i8,
        })
        .collect();
    EventStream::new(height, width, t_begin, t_end, threshold, events).map_err(|e| bad(&e.to_string()))
}

pub fn write(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&encode(stream))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<EventStream> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode(&bytes, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(raw in proptest::collection::vec((0u16..50, 0u16..40, 0i64..10_000, any::<bool>()), 0..200),
                                      threshold in 0.01f64..2.0) {
            let events = raw.into_iter().map(|(x, y, t, p)| Event { x, y, t, p: if p { 1 } else { -1 } }).collect();
            let s = EventStream::new(40, 50, 0, 10_000, threshold, events).unwrap();
            let bytes = encode(&s);
            prop_assert_eq!(bytes.len(), HEADER_LEN + RECORD_LEN * s.len());
            let back = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn rejects_corruption() {
        let s = EventStream::new(2, 2, 0, 10, 0.2, vec![Event { x: 1, y: 1, t: 4, p: -1 }]).unwrap();
        let mut b = encode(&s);
        assert!(decode(&b[..HEADER_LEN - 1], Path::new("x")).is_err());
        assert!(decode(&b[..b.len() - 1], Path::new("x")).is_err());
        b[0] = b'X';
        assert!(decode(&b, Path::new("x")).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.evpl");
        let s = EventStream::new(3, 3, -5, 10, 0.25, vec![Event { x: 2, y: 0, t: -5, p: 1 }]).unwrap();
        write(&p, &s).unwrap();
        assert_eq!(read(&p).unwrap(), s);
    }
}
