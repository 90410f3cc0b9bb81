//! SMC1 cube container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SMC1" | version u16 | channel_count u16 | T u32 | H u32 | W u32 | cadence_days u32
//! | origin_x f64 | origin_y f64 | pixel_size f64 | timestamps i64 x T
//! | channel table (len u8 + ASCII name, per channel)
//! | payload f32, T-major, then channel, then row-major plane
//! ```

use std::fs;
use std::path::Path;

use super::{ChannelId, GridGeo, Raster2D, RasterStack, SceneSeries};
use crate::error::{validation, Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"SMC1";
pub const CUBE_VERSION: u16 = 1;

/// Fixed-size part of the header, before the timestamp array.
const FIXED_HEADER: usize = 4 + 2 + 2 + 4 * 4 + 8 * 3;

/// Exact encoded size for `t` stacks of `channels` on an `h x w` grid.
pub fn cube_encoded_len(t: usize, channels: &[ChannelId], h: usize, w: usize) -> usize {
    let table: usize = channels.iter().map(|c| 1 + c.name().len()).sum();
    FIXED_HEADER + 8 * t + table + 4 * t * channels.len() * h * w
}

pub fn encode_cube(series: &SceneSeries) -> Result<Vec<u8>> {
    series.validate()?;
    let first = &series.stacks[0];
    let geo = *first.geo().expect("validated series has channels");
    let ids: Vec<ChannelId> = first.channel_ids().collect();
    let channel_count = u16::try_from(ids.len())
        .map_err(|_| validation(format!("{} channels exceed the u16 channel count", ids.len())))?;
    let t = u32::try_from(series.stacks.len()).map_err(|_| validation("too many stacks for a u32 count"))?;

    let (h, w) = (geo.height as usize, geo.width as usize);
    let mut out = Vec::with_capacity(cube_encoded_len(t as usize, &ids, h, w));
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    out.extend_from_slice(&channel_count.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&geo.height.to_le_bytes());
    out.extend_from_slice(&geo.width.to_le_bytes());
    out.extend_from_slice(&series.cadence.to_le_bytes());
    out.extend_from_slice(&geo.origin_x.to_le_bytes());
    out.extend_from_slice(&geo.origin_y.to_le_bytes());
    out.extend_from_slice(&geo.pixel_size.to_le_bytes());
    for stack in &series.stacks {
        out.extend_from_slice(&stack.timestamp().to_le_bytes());
    }
    for id in &ids {
        let name = id.name().as_bytes();
        out.push(name.len() as u8);
        out.extend_from_slice(name);
    }
    for stack in &series.stacks {
        for (_, plane) in stack.channels() {
            for v in plane.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes `series` to `path`. Validation happens before the file is created.
pub fn cube_write(series: &SceneSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cube(series)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cube_read(path: impl AsRef<Path>) -> Result<SceneSeries> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, expected_total: u64) -> Result<&'a [u8]> {
        if self.buf.len() < self.pos + n {
            return Err(Error::Truncated {
                expected: expected_total.max((self.pos + n) as u64),
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, expected_total: u64) -> Result<[u8; N]> {
        Ok(self.take(N, expected_total)?.try_into().expect("slice of length N"))
    }
}

pub fn decode_cube(bytes: &[u8]) -> Result<SceneSeries> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = FIXED_HEADER as u64;
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().expect("4 bytes"),
        None => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(Error::BadMagic { found });
        }
    };
    if &magic != CUBE_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    r.pos = 4;
    let version = u16::from_le_bytes(r.array(header)?);
    if version != CUBE_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CUBE_VERSION });
    }
    let c = u16::from_le_bytes(r.array(header)?) as usize;
    let t = u32::from_le_bytes(r.array(header)?) as usize;
    let h = u32::from_le_bytes(r.array(header)?);
    let w = u32::from_le_bytes(r.array(header)?);
    let cadence = u32::from_le_bytes(r.array(header)?);
    let origin_x = f64::from_le_bytes(r.array(header)?);
    let origin_y = f64::from_le_bytes(r.array(header)?);
    let pixel_size = f64::from_le_bytes(r.array(header)?);
    let geo = GridGeo::new(w, h, origin_x, origin_y, pixel_size)?;

    // Lower bound until the channel table has been read.
    let plane = geo.len();
    let payload = 4u64 * t as u64 * c as u64 * plane as u64;
    let min_total = header + 8 * t as u64 + c as u64 + payload;

    let mut timestamps = Vec::with_capacity(t);
    for _ in 0..t {
        timestamps.push(i64::from_le_bytes(r.array(min_total)?));
    }
    let mut ids = Vec::with_capacity(c);
    let mut names_len = 0u64;
    for _ in 0..c {
        let [len] = r.array::<1>(min_total + names_len)?;
        names_len += len as u64;
        let name = r.take(len as usize, min_total + names_len)?;
        let name = std::str::from_utf8(name).map_err(|_| validation("channel name is not ASCII"))?;
        ids.push(name.parse::<ChannelId>()?);
    }
    let expected = r.pos as u64 + payload;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated { expected, actual: bytes.len() as u64 });
    }
    if (bytes.len() as u64) > expected {
        return Err(validation(format!("{} trailing bytes after payload", bytes.len() as u64 - expected)));
    }

    let mut stacks = Vec::with_capacity(t);
    for ts in timestamps {
        let mut channels = Vec::with_capacity(c);
        for id in &ids {
            let raw = r.take(4 * plane, expected)?;
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            channels.push((*id, Raster2D::new(geo, values)?));
        }
        stacks.push(RasterStack::new(ts, channels)?);
    }
    SceneSeries::new(stacks, cadence)
}
