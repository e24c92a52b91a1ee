//! Raster file I/O.
//!
//! Native container "MBR1": magic `MBR1`; u32 LE width, height, bands;
//! one role code byte per band; f64 LE value range (min, max); then
//! bands*height*width f64 LE planar samples. Round-trips are bit-exact.
//!
//! PNM export: PGM (P5) for single bands, PPM (P6) for RGB composites,
//! scaled linearly from the declared value range and quantized.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{BandRole, Raster};

const MAGIC: &[u8; 4] = b"MBR1";

/// Upper bound on each dimension so width*height*bands cannot overflow.
const DIM_LIMIT: u32 = 1 << 24;

pub fn write_raster(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = r.data().len();
    let mut buf = Vec::with_capacity(4 + 12 + r.bands() + 16 + 8 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(r.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(r.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(r.bands() as u32).to_le_bytes());
    for role in r.band_roles() {
        buf.push(role.code());
    }
    buf.extend_from_slice(&r.value_range().0.to_le_bytes());
    buf.extend_from_slice(&r.value_range().1.to_le_bytes());
    for v in r.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    let fail = |offset: usize, message: &str| Error::Format {
        path: name.clone(),
        offset: offset as u64,
        message: message.to_string(),
    };

    if buf.len() < 4 || &buf[0..4] != MAGIC {
        return Err(fail(0, "bad magic, expected MBR1"));
    }
    let mut off = 4;
    let read_u32 = |buf: &[u8], off: &mut usize| -> Result<u32> {
        if *off + 4 > buf.len() {
            return Err(fail(*off, "truncated header"));
        }
        let v = u32::from_le_bytes(buf[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    let width = read_u32(&buf, &mut off)?;
    let height = read_u32(&buf, &mut off)?;
    let bands = read_u32(&buf, &mut off)?;
    if width == 0 || height == 0 || bands == 0 {
        return Err(fail(4, "zero dimension"));
    }
    if width > DIM_LIMIT || height > DIM_LIMIT || bands > DIM_LIMIT {
        return Err(fail(4, "dimension overflow"));
    }
    let n = (width as u64)
        .checked_mul(height as u64)
        .and_then(|p| p.checked_mul(bands as u64))
        .filter(|&p| p <= (DIM_LIMIT as u64) * (DIM_LIMIT as u64))
        .ok_or_else(|| fail(4, "dimension overflow"))? as usize;

    let mut roles = Vec::with_capacity(bands as usize);
    for _ in 0..bands {
        if off >= buf.len() {
            return Err(fail(off, "truncated role table"));
        }
        let role = BandRole::from_code(buf[off]).ok_or_else(|| fail(off, "unknown band role code"))?;
        roles.push(role);
        off += 1;
    }

    let read_f64 = |buf: &[u8], off: &mut usize, what: &str| -> Result<f64> {
        if *off + 8 > buf.len() {
            return Err(fail(*off, what));
        }
        let v = f64::from_le_bytes(buf[*off..*off + 8].try_into().unwrap());
        *off += 8;
        Ok(v)
    };
    let min = read_f64(&buf, &mut off, "truncated value range")?;
    let max = read_f64(&buf, &mut off, "truncated value range")?;
    if !(min.is_finite() && max.is_finite() && max > min) {
        return Err(fail(off - 16, "invalid value range"));
    }

    if buf.len() != off + 8 * n {
        let message = if buf.len() < off + 8 * n {
            "truncated sample payload"
        } else {
            "trailing bytes after sample payload"
        };
        return Err(fail(buf.len().min(off + 8 * n), message));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = f64::from_le_bytes(buf[off + 8 * i..off + 8 * i + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(off + 8 * i, "non-finite sample"));
        }
        data.push(v);
    }
    Raster::new(width as usize, height as usize, roles, data, (min, max))
}

fn quantize(v: f64, range: (f64, f64), maxval: f64) -> f64 {
    (((v - range.0) / (range.1 - range.0)) * maxval).round().clamp(0.0, maxval)
}

/// Export one band as an 8-bit binary PGM.
pub fn write_pgm(r: &Raster, band: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if band >= r.bands() {
        return Err(Error::InvalidArgument(format!(
            "band {band} out of range (raster has {})",
            r.bands()
        )));
    }
    let mut buf = format!("P5\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    buf.extend(r.band(band).iter().map(|&v| quantize(v, r.value_range(), 255.0) as u8));
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Export one band as a 16-bit binary PGM (big-endian samples, per PNM).
pub fn write_pgm16(r: &Raster, band: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if band >= r.bands() {
        return Err(Error::InvalidArgument(format!(
            "band {band} out of range (raster has {})",
            r.bands()
        )));
    }
    let mut buf = format!("P5\n{} {}\n65535\n", r.width(), r.height()).into_bytes();
    for &v in r.band(band) {
        let q = quantize(v, r.value_range(), 65535.0) as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read an 8-bit binary PGM back as a single-band raster with the
/// nominal range [0, 255].
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    let fail = |offset: usize, message: &str| Error::Format {
        path: name.clone(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if buf.len() < 2 || &buf[0..2] != b"P5" {
        return Err(fail(0, "bad magic, expected P5"));
    }
    // header: three whitespace-separated fields after the magic
    let mut fields = Vec::new();
    let mut off = 2;
    while fields.len() < 3 {
        while off < buf.len() && buf[off].is_ascii_whitespace() {
            off += 1;
        }
        if off < buf.len() && buf[off] == b'#' {
            while off < buf.len() && buf[off] != b'\n' {
                off += 1;
            }
            continue;
        }
        let start = off;
        while off < buf.len() && !buf[off].is_ascii_whitespace() {
            off += 1;
        }
        if start == off {
            return Err(fail(off, "truncated header"));
        }
        let field: usize = std::str::from_utf8(&buf[start..off])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "malformed header field"))?;
        fields.push(field);
    }
    off += 1; // single whitespace byte after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fail(off, "only 8-bit PGM supported"));
    }
    if buf.len() < off + w * h {
        return Err(fail(buf.len(), "truncated pixel payload"));
    }
    let data: Vec<f64> = buf[off..off + w * h].iter().map(|&b| b as f64).collect();
    Raster::new(w, h, vec![BandRole::Unknown], data, (0.0, 255.0))
}

/// Export an RGB composite as an 8-bit binary PPM. Bands are chosen by
/// role; rasters without R/G/B roles fall back to the first three bands.
pub fn write_ppm(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let picks = match (
        r.band_with_role(BandRole::R),
        r.band_with_role(BandRole::G),
        r.band_with_role(BandRole::B),
    ) {
        (Some(ri), Some(gi), Some(bi)) => [ri, gi, bi],
        _ if r.bands() >= 3 => [0, 1, 2],
        _ => {
            return Err(Error::InvalidArgument(
                "PPM export needs R, G, B roles or at least 3 bands".into(),
            ))
        }
    };
    let mut buf = format!("P6\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    let planes = [r.band(picks[0]), r.band(picks[1]), r.band(picks[2])];
    for i in 0..r.width() * r.height() {
        for plane in &planes {
            buf.push(quantize(plane[i], r.value_range(), 255.0) as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}
