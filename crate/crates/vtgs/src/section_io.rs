//! Frozen-section binary format.
//!
//! Little-endian layout: magic "VTGS", version u32, section id u32, Gaussian
//! count u64, frame count u32, frame indices (u32 each), then one record per
//! Gaussian (5 x f32 attributes, u32 owner, u16 u, u16 v, f32 anchor depth,
//! 3 x f32 baked position), closed by a CRC32 over everything before it.
//!
//! Attributes are stored as f32. `quantize` applies the same rounding to an
//! in-memory section so that a section renders bit-identically before and
//! after a disk round trip.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::types::{Gaussian, Section, SectionState};

pub const MAGIC: [u8; 4] = *b"VTGS";
pub const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Rounds every serialized field through f32, making the section's render
/// invariant under encode/decode.
pub fn quantize(section: &mut Section) {
    for g in &mut section.gaussians {
        for c in &mut g.color {
            *c = *c as f32 as f64;
        }
        g.radius = g.radius as f32 as f64;
        g.opacity = g.opacity as f32 as f64;
        g.anchor_depth = g.anchor_depth as f32 as f64;
    }
    if let Some(baked) = &mut section.baked_positions {
        for p in baked {
            *p = Vector3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64);
        }
    }
}

pub fn encode_section(section: &Section) -> Result<Vec<u8>> {
    if !section.is_frozen() {
        return Err(Error::InvalidState(format!(
            "section {} must be frozen before serialization",
            section.id
        )));
    }
    let baked = section
        .baked_positions
        .as_ref()
        .expect("frozen sections always have baked positions");
    let mut buf = Vec::with_capacity(32 + section.gaussians.len() * 44);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(section.id as u32).to_le_bytes());
    buf.extend_from_slice(&(section.gaussians.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(section.frame_indices.len() as u32).to_le_bytes());
    for &f in &section.frame_indices {
        buf.extend_from_slice(&(f as u32).to_le_bytes());
    }
    for (g, p) in section.gaussians.iter().zip(baked) {
        for c in g.color {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        buf.extend_from_slice(&(g.radius as f32).to_le_bytes());
        buf.extend_from_slice(&(g.opacity as f32).to_le_bytes());
        buf.extend_from_slice(&(g.owner_frame as u32).to_le_bytes());
        buf.extend_from_slice(&g.pixel.0.to_le_bytes());
        buf.extend_from_slice(&g.pixel.1.to_le_bytes());
        buf.extend_from_slice(&(g.anchor_depth as f32).to_le_bytes());
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data("section file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn decode_section(data: &[u8]) -> Result<Section> {
    if data.len() < 4 + 4 + 4 + 8 + 4 + 4 {
        return Err(Error::Data("section file too short".into()));
    }
    let (body, crc_bytes) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::Data("section file CRC mismatch".into()));
    }
    let mut r = Reader { data: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("bad section file magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported section file version {version}")));
    }
    let id = r.u32()? as usize;
    let count = r.u64()? as usize;
    let n_frames = r.u32()? as usize;
    if n_frames == 0 {
        return Err(Error::Data("section file has no frames".into()));
    }
    let mut frame_indices = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        frame_indices.push(r.u32()? as usize);
    }
    let mut gaussians = Vec::with_capacity(count);
    let mut baked = Vec::with_capacity(count);
    for _ in 0..count {
        let color = [r.f32()?, r.f32()?, r.f32()?];
        let radius = r.f32()?;
        let opacity = r.f32()?;
        let owner_frame = r.u32()? as usize;
        let pixel = (r.u16()?, r.u16()?);
        let anchor_depth = r.f32()?;
        let p = Vector3::new(r.f32()?, r.f32()?, r.f32()?);
        gaussians.push(Gaussian {
            color,
            radius,
            opacity,
            owner_frame,
            pixel,
            anchor_depth,
        });
        baked.push(p);
    }
    if r.pos != body.len() {
        return Err(Error::Data("section file has trailing bytes".into()));
    }
    Ok(Section {
        id,
        frame_indices,
        gaussians,
        state: SectionState::Frozen,
        baked_positions: Some(baked),
    })
}

pub fn write_section(section: &Section, path: &Path) -> Result<()> {
    let bytes = encode_section(section)?;
    std::fs::write(path, bytes).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_section(path: &Path) -> Result<Section> {
    let bytes = std::fs::read(path).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    decode_section(&bytes).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
