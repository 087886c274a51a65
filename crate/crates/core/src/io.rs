//! Binary field and observation files.
//!
//! Field files (`FNPGRID1`), all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "FNPGRID1"
//! n_lat      u32
//! n_lon      u32
//! channels   u32
//! lat0 dlat  f64 f64   first latitude centre and signed spacing (cell-centred grid)
//! lon0 dlon  f64 f64   first longitude centre and spacing
//! groups     u32 × channels
//! names      (u32 byte length, UTF-8 bytes) × channels
//! payload    f32 × channels × n_lat × n_lon, channel-major then row-major
//! ```
//!
//! Observation files (`FNPOBS01`):
//!
//! ```text
//! magic      8 bytes  "FNPOBS01"
//! n_points   u32
//! channels   u32
//! resolution f64       source resolution in degrees
//! coords     (f64 lat, f64 lon) × n_points
//! values     f32 × n_points × channels (NaN in masked slots)
//! mask       ceil(n_points × channels / 8) bytes, LSB-first bit packing
//! ```
//!
//! Every write also emits a `<path>.meta.json` sidecar describing the header. The sidecar
//! is for humans and is never read back.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{FnpError, Result};
use crate::grid::{ChannelMeta, Field, LatLonGrid, ObservationSet};

pub const FIELD_MAGIC: &[u8; 8] = b"FNPGRID1";
pub const OBS_MAGIC: &[u8; 8] = b"FNPOBS01";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FnpError::Truncated { section })?;
        if end > self.buf.len() {
            return Err(FnpError::Truncated { section });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn f64(&mut self, section: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f32(&mut self, section: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let found = self.take(8, "magic")?;
        if found != expected {
            return Err(FnpError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FnpError::BadHeader(format!("{} trailing bytes after payload", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn encode_field(field: &Field) -> Vec<u8> {
    let grid = field.grid();
    let mut out = Vec::with_capacity(64 + field.values().len() * 4);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(grid.n_lat() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.n_lon() as u32).to_le_bytes());
    out.extend_from_slice(&(field.n_channels() as u32).to_le_bytes());
    for v in [grid.lat0(), grid.dlat(), grid.lon0(), grid.dlon()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for ch in field.channels() {
        out.extend_from_slice(&ch.group.to_le_bytes());
    }
    for ch in field.channels() {
        out.extend_from_slice(&(ch.name.len() as u32).to_le_bytes());
        out.extend_from_slice(ch.name.as_bytes());
    }
    for &v in field.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_field(buf: &[u8]) -> Result<Field> {
    let mut r = Reader::new(buf);
    r.magic(FIELD_MAGIC)?;
    let n_lat = r.u32("header")? as usize;
    let n_lon = r.u32("header")? as usize;
    let n_ch = r.u32("header")? as usize;
    let lat0 = r.f64("header")?;
    let dlat = r.f64("header")?;
    let lon0 = r.f64("header")?;
    let dlon = r.f64("header")?;
    let grid = LatLonGrid::from_header(n_lat, n_lon, lat0, dlat, lon0, dlon)?;
    if n_ch == 0 {
        return Err(FnpError::BadHeader("field has zero channels".into()));
    }
    let mut groups = Vec::with_capacity(n_ch);
    for _ in 0..n_ch {
        groups.push(r.u32("channel groups")?);
    }
    let mut channels = Vec::with_capacity(n_ch);
    for group in groups {
        let len = r.u32("channel names")? as usize;
        let bytes = r.take(len, "channel names")?;
        let name = String::from_utf8(bytes.to_vec())
            .map_err(|_| FnpError::BadHeader("channel name is not UTF-8".into()))?;
        channels.push(ChannelMeta { name, group });
    }
    let n = n_ch * grid.len();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f32("payload")?;
        if !v.is_finite() {
            return Err(FnpError::NonFinite("field payload".into()));
        }
        values.push(v as f64);
    }
    r.finish()?;
    Field::new(grid, channels, values)
}

pub fn encode_obs(obs: &ObservationSet) -> Vec<u8> {
    let n = obs.len();
    let c = obs.n_channels();
    let mut out = Vec::with_capacity(32 + n * (16 + 4 * c) + n * c / 8 + 1);
    out.extend_from_slice(OBS_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&obs.source_resolution().to_le_bytes());
    for &(lat, lon) in obs.coords() {
        out.extend_from_slice(&lat.to_le_bytes());
        out.extend_from_slice(&lon.to_le_bytes());
    }
    for (&v, &m) in obs.raw_values().iter().zip(obs.mask()) {
        let v = if m { v as f32 } else { f32::NAN };
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut packed = vec![0u8; (n * c).div_ceil(8)];
    for (k, &m) in obs.mask().iter().enumerate() {
        if m {
            packed[k / 8] |= 1 << (k % 8);
        }
    }
    out.extend_from_slice(&packed);
    out
}

pub fn decode_obs(buf: &[u8]) -> Result<ObservationSet> {
    let mut r = Reader::new(buf);
    r.magic(OBS_MAGIC)?;
    let n = r.u32("header")? as usize;
    let c = r.u32("header")? as usize;
    let resolution = r.f64("header")?;
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(FnpError::BadHeader(format!("invalid source resolution {resolution}")));
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let lat = r.f64("coordinates")?;
        let lon = r.f64("coordinates")?;
        coords.push((lat, lon));
    }
    let mut raw = Vec::with_capacity(n * c);
    for _ in 0..n * c {
        raw.push(r.f32("values")?);
    }
    let packed = r.take((n * c).div_ceil(8), "mask")?;
    r.finish()?;
    let mask: Vec<bool> = (0..n * c).map(|k| packed[k / 8] & (1 << (k % 8)) != 0).collect();
    let mut values = Vec::with_capacity(n * c);
    for (&v, &m) in raw.iter().zip(&mask) {
        if m && !v.is_finite() {
            return Err(FnpError::NonFinite("observation payload".into()));
        }
        values.push(v as f64);
    }
    ObservationSet::new(coords, c, values, mask, resolution)
}

pub fn write_field(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_field(field))?;
    let grid = field.grid();
    let meta = json!({
        "format": "FNPGRID1",
        "convention": "cell-centred equiangular grid; lat0/lon0 are first cell centres",
        "n_lat": grid.n_lat(),
        "n_lon": grid.n_lon(),
        "lat0": grid.lat0(),
        "dlat": grid.dlat(),
        "lon0": grid.lon0(),
        "dlon": grid.dlon(),
        "channels": field.channels(),
    });
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    decode_field(&fs::read(path)?)
}

pub fn write_obs(obs: &ObservationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_obs(obs))?;
    let meta = json!({
        "format": "FNPOBS01",
        "n_points": obs.len(),
        "channels": obs.n_channels(),
        "source_resolution_deg": obs.source_resolution(),
        "observed_entries": obs.mask().iter().filter(|m| **m).count(),
    });
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_obs(path: impl AsRef<Path>) -> Result<ObservationSet> {
    decode_obs(&fs::read(path)?)
}
