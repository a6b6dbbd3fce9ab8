//! Spill-to-disk file format shared by the store backends.
//!
//! Little-endian. Header: magic `AETS`, version `u32`, `N_in` `u32`, scheme `u8`.
//! Each record: `t u32, s u8, field u8, tile u32, offset f64, scale f64,
//! payload_len u32`, then the payload bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AETS";
pub const VERSION: u32 = 1;

pub const SCHEME_SPACE: u8 = 0;
pub const SCHEME_TIME: u8 = 1;
/// Whole uncompressed states, one per record.
pub const SCHEME_RAW: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpillHeader {
    pub n_in: u32,
    pub scheme: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordHeader {
    pub t: u32,
    pub s: u8,
    pub field: u8,
    pub tile: u32,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpillRecord {
    pub header: RecordHeader,
    pub payload: Vec<u8>,
}

pub fn write_to<W: Write>(mut w: W, header: &SpillHeader, records: impl IntoIterator<Item = SpillRecord>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&header.n_in.to_le_bytes())?;
    w.write_all(&[header.scheme])?;
    for rec in records {
        let h = &rec.header;
        w.write_all(&h.t.to_le_bytes())?;
        w.write_all(&[h.s, h.field])?;
        w.write_all(&h.tile.to_le_bytes())?;
        w.write_all(&h.offset.to_le_bytes())?;
        w.write_all(&h.scale.to_le_bytes())?;
        let len = u32::try_from(rec.payload.len()).map_err(|_| Error::Format("record payload too large".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&rec.payload)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_file(path: &Path, header: &SpillHeader, records: impl IntoIterator<Item = SpillRecord>) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), header, records)
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 if filled == 0 => return Ok(false),
            0 => return Err(Error::Format("truncated spill record".into())),
            n => filled += n,
        }
    }
    Ok(true)
}

pub fn read_from<R: Read>(mut r: R) -> Result<(SpillHeader, Vec<SpillRecord>)> {
    let mut head = [0u8; 13];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated spill header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad spill magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported spill version {version}")));
    }
    let header = SpillHeader { n_in: u32::from_le_bytes(head[8..12].try_into().unwrap()), scheme: head[12] };
    let mut records = Vec::new();
    let mut rh = [0u8; 30];
    while read_exact_or_eof(&mut r, &mut rh)? {
        let header = RecordHeader {
            t: u32::from_le_bytes(rh[0..4].try_into().unwrap()),
            s: rh[4],
            field: rh[5],
            tile: u32::from_le_bytes(rh[6..10].try_into().unwrap()),
            offset: f64::from_le_bytes(rh[10..18].try_into().unwrap()),
            scale: f64::from_le_bytes(rh[18..26].try_into().unwrap()),
        };
        let len = u32::from_le_bytes(rh[26..30].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).map_err(|_| Error::Format("truncated spill payload".into()))?;
        records.push(SpillRecord { header, payload });
    }
    Ok((header, records))
}

pub fn read_file(path: &Path) -> Result<(SpillHeader, Vec<SpillRecord>)> {
    read_from(BufReader::new(File::open(path)?))
}

pub fn f64s_from_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format("payload is not a whole number of f64".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let header = SpillHeader { n_in: 3, scheme: SCHEME_SPACE };
        let recs = vec![
            SpillRecord {
                header: RecordHeader { t: 7, s: 3, field: 1, tile: 12, offset: -0.5, scale: 2.0 },
                payload: vec![1, 2, 3],
            },
            SpillRecord {
                header: RecordHeader { t: 0, s: 0, field: 0, tile: 0, offset: 0.0, scale: 1e-7 },
                payload: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_to(&mut buf, &header, recs.clone()).unwrap();
        assert_eq!(&buf[..4], b"AETS");
        let (h, r) = read_from(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(r, recs);
        assert!(read_from(&buf[..buf.len() - 1]).is_err());
        assert!(read_from(&b"XXXX"[..]).is_err());
    }
}
