//! Classic libpcap file format, Ethernet link type, microsecond resolution.

use std::io::{self, Read, Write};

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const LINKTYPE_ETHERNET: u32 = 1;
const SNAPLEN: u32 = 65_535;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    /// Microseconds since the start of the simulation.
    pub timestamp_us: u64,
    pub data: Vec<u8>,
}

pub fn write_header<W: Write>(out: &mut W) -> io::Result<()> {
    out.write_all(&MAGIC_MICROS.to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&4u16.to_le_bytes())?;
    out.write_all(&0i32.to_le_bytes())?; // thiszone
    out.write_all(&0u32.to_le_bytes())?; // sigfigs
    out.write_all(&SNAPLEN.to_le_bytes())?;
    out.write_all(&LINKTYPE_ETHERNET.to_le_bytes())
}

pub fn write_record<W: Write>(out: &mut W, timestamp_us: u64, data: &[u8]) -> io::Result<()> {
    let secs = (timestamp_us / 1_000_000) as u32;
    let micros = (timestamp_us % 1_000_000) as u32;
    let len = data.len() as u32;
    out.write_all(&secs.to_le_bytes())?;
    out.write_all(&micros.to_le_bytes())?;
    out.write_all(&len.min(SNAPLEN).to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&data[..data.len().min(SNAPLEN as usize)])
}

pub fn write_all<W: Write>(mut out: W, records: &[PcapRecord]) -> io::Result<()> {
    write_header(&mut out)?;
    for r in records {
        write_record(&mut out, r.timestamp_us, &r.data)?;
    }
    out.flush()
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a little-endian microsecond Ethernet capture as written by [`write_all`].
pub fn read_all<R: Read>(mut input: R) -> io::Result<Vec<PcapRecord>> {
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_owned());
    let mut header = [0u8; 24];
    input.read_exact(&mut header)?;
    if u32::from_le_bytes(header[0..4].try_into().unwrap()) != MAGIC_MICROS {
        return Err(bad("unsupported pcap magic"));
    }
    if u32::from_le_bytes(header[20..24].try_into().unwrap()) != LINKTYPE_ETHERNET {
        return Err(bad("link type is not Ethernet"));
    }
    let mut records = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match input.read(&mut first)? {
            0 => break,
            4 => {}
            n => input.read_exact(&mut first[n..])?,
        }
        let secs = u32::from_le_bytes(first) as u64;
        let micros = read_u32(&mut input)? as u64;
        let incl = read_u32(&mut input)? as usize;
        let _orig = read_u32(&mut input)?;
        let mut data = vec![0u8; incl];
        input.read_exact(&mut data)?;
        records.push(PcapRecord {
            timestamp_us: secs * 1_000_000 + micros,
            data,
        });
    }
    Ok(records)
}
