//! Binary stream files.
//!
//! Little-endian layout:
//!
//! ```text
//! "PMBS" | u32 version=1 | u32 base_fps | u32 H | u32 W | u32 D
//! u64 frame_count | u32 scene_count
//! scene_count x (u32 id, u64 start_tick, u64 end_tick, D x f32 archetype)
//! frame_count x (u64 tick, H*W*D x f32 row-major)
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::{SceneAnnotation, Stream, StreamFrame};
use crate::types::FeatureGrid;

pub const MAGIC: [u8; 4] = *b"PMBS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 8 + 4;

#[derive(Debug, Error)]
pub enum StreamFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected \"PMBS\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported stream file version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("stream file truncated at byte offset {offset}: needed {needed} more bytes")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("corrupt stream file at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
}

pub fn encode_stream(stream: &Stream) -> Vec<u8> {
    let grid_len = stream.height * stream.width * stream.depth;
    let mut out = Vec::with_capacity(
        HEADER_LEN + stream.scenes.len() * (20 + 4 * stream.depth) + stream.frames.len() * (8 + 4 * grid_len),
    );
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, stream.base_fps, stream.height as u32, stream.width as u32, stream.depth as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(stream.frames.len() as u64).to_le_bytes());
    out.extend_from_slice(&(stream.scenes.len() as u32).to_le_bytes());
    for s in &stream.scenes {
        out.extend_from_slice(&s.scene_id.to_le_bytes());
        out.extend_from_slice(&s.start_tick.to_le_bytes());
        out.extend_from_slice(&s.end_tick.to_le_bytes());
        for v in &s.archetype {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for f in &stream.frames {
        out.extend_from_slice(&f.tick.to_le_bytes());
        for v in f.grid.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_stream(path: &Path, stream: &Stream) -> Result<u64, StreamFileError> {
    let bytes = encode_stream(stream);
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_stream(path: &Path) -> Result<Stream, StreamFileError> {
    decode_stream(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StreamFileError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(StreamFileError::TruncatedFile { offset: self.buf.len(), needed: n - remaining });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, StreamFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StreamFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, StreamFileError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn corrupt(&self, reason: &str) -> StreamFileError {
        StreamFileError::Corrupt { offset: self.pos, reason: reason.to_string() }
    }
}

pub fn decode_stream(bytes: &[u8]) -> Result<Stream, StreamFileError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            if bytes != &MAGIC[..bytes.len()] {
                return Err(StreamFileError::BadMagic { found });
            }
            return Err(StreamFileError::TruncatedFile { offset: bytes.len(), needed: 4 - bytes.len() });
        }
    };
    if magic != MAGIC {
        return Err(StreamFileError::BadMagic { found: magic });
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != VERSION {
        return Err(StreamFileError::VersionMismatch { found: version });
    }
    let base_fps = r.u32()?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let depth = r.u32()? as usize;
    if base_fps == 0 || height == 0 || width == 0 || depth == 0 {
        return Err(StreamFileError::Corrupt { offset: 8, reason: "zero rate or dimension in header".into() });
    }
    let frame_count = r.u64()?;
    let scene_count = r.u32()?;

    let mut scenes = Vec::new();
    for _ in 0..scene_count {
        let scene_id = r.u32()?;
        let start_tick = r.u64()?;
        let end_tick = r.u64()?;
        let archetype = r.f32s(depth)?;
        if start_tick > end_tick {
            return Err(r.corrupt("scene ends before it starts"));
        }
        scenes.push(SceneAnnotation { scene_id, start_tick, end_tick, archetype });
    }

    let grid_len = height.checked_mul(width).and_then(|v| v.checked_mul(depth)).ok_or_else(|| r.corrupt("grid too large"))?;
    let mut frames = Vec::new();
    let mut last_tick: Option<u64> = None;
    for _ in 0..frame_count {
        let tick = r.u64()?;
        if last_tick.is_some_and(|l| tick <= l) {
            return Err(r.corrupt("frame ticks are not strictly increasing"));
        }
        last_tick = Some(tick);
        let offset = r.pos;
        let grid = FeatureGrid::new(height, width, depth, r.f32s(grid_len)?)
            .map_err(|e| StreamFileError::Corrupt { offset, reason: e.to_string() })?;
        frames.push(StreamFrame { tick, grid });
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes after last frame"));
    }
    Ok(Stream { base_fps, height, width, depth, frames, scenes })
}

/// Reads only the fixed header: `(base_fps, H, W, D, frame_count, scene_count)`.
pub fn peek_header(bytes: &[u8]) -> Result<(u32, u32, u32, u32, u64, u32), StreamFileError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(StreamFileError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(StreamFileError::VersionMismatch { found: version });
    }
    Ok((r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u64()?, r.u32()?))
}
