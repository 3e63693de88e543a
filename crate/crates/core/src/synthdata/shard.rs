//! `FDSH` shard files: `"FDSH" | u16 version | u32 count` followed by
//! records `u16 F, H, W | u8 pixels F×3×H×W | u16 caption length | u16 ids |
//! u16 tracks | f32 trajectory F×tracks×2`, all little-endian.

use std::path::Path;

use super::render::ClipRecord;
use crate::archive::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FDSH";
const VERSION: u16 = 1;

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in u16")))
}

pub fn encode_shard(records: &[ClipRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| Error::Argument("too many records".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        for (v, what) in [(r.frames, "frames"), (r.height, "height"), (r.width, "width")] {
            out.extend_from_slice(&u16_of(v, what)?.to_le_bytes());
        }
        if r.pixels.len() != r.frames * 3 * r.height * r.width {
            return Err(Error::Shape("pixel buffer does not match record dims".into()));
        }
        out.extend_from_slice(&r.pixels);
        out.extend_from_slice(&u16_of(r.caption.len(), "caption length")?.to_le_bytes());
        for &t in &r.caption {
            out.extend_from_slice(&u16_of(t as usize, "token id")?.to_le_bytes());
        }
        out.extend_from_slice(&u16_of(r.tracks, "track count")?.to_le_bytes());
        if r.trajectory.len() != r.frames * r.tracks * 2 {
            return Err(Error::Shape("trajectory does not match record dims".into()));
        }
        for v in &r.trajectory {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<ClipRecord>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a shard".into(),
        });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported shard version {version}"),
        });
    }
    let count = u32::from_le_bytes(c.take(4, "record count")?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let frames = c.u16("frame count")? as usize;
        let height = c.u16("height")? as usize;
        let width = c.u16("width")? as usize;
        let pixels = c.take(frames * 3 * height * width, "pixels")?.to_vec();
        let len = c.u16("caption length")? as usize;
        let caption = c
            .take(2 * len, "caption")?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32)
            .collect();
        let tracks = c.u16("track count")? as usize;
        let trajectory = c
            .take(4 * frames * tracks * 2, "trajectory")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(ClipRecord {
            frames,
            height,
            width,
            pixels,
            caption,
            tracks,
            trajectory,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: "trailing bytes after last record".into(),
        });
    }
    Ok(records)
}

/// Writes atomically: readers never observe a partially written shard.
pub fn write_shard(records: &[ClipRecord], path: &Path) -> Result<()> {
    write_atomic(path, &encode_shard(records)?)
}

pub fn read_shard(path: &Path) -> Result<Vec<ClipRecord>> {
    decode_shard(&std::fs::read(path)?)
}
