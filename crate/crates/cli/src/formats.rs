//! Little-endian binary formats: JAVL latent streams, JAAF audio features
//! and JADN parameter checkpoints.

use std::io::{self, Read, Write};

use streamdiff_core::denoiser::{DenoiserParams, ModelConfig};
use streamdiff_core::Tensor;

use crate::CliError;

pub const JAVL_MAGIC: &[u8; 4] = b"JAVL";
pub const JAAF_MAGIC: &[u8; 4] = b"JAAF";
pub const JADN_MAGIC: &[u8; 4] = b"JADN";
pub const VERSION: u32 = 1;
pub const JAVL_HEADER_LEN: u64 = 24;
pub const JAAF_HEADER_LEN: u64 = 16;

fn format_err(offset: u64, message: impl Into<String>) -> CliError {
    CliError::Format {
        path: String::new(),
        offset,
        message: message.into(),
    }
}

/// Reader that tracks its byte offset for error reporting.
pub struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), CliError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(format_err(self.offset, format!("truncated while reading {what}")))
            }
            Err(e) => Err(CliError::Io {
                path: String::new(),
                source: e,
            }),
        }
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<(), CliError> {
        let mut m = [0u8; 4];
        self.exact(&mut m, "magic")?;
        if &m != want {
            return Err(format_err(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(want))));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32, CliError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn version(&mut self) -> Result<(), CliError> {
        let at = self.offset;
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(format_err(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, CliError> {
        let mut bytes = vec![0u8; n * 4];
        self.exact(&mut bytes, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn at_eof(&mut self) -> Result<bool, CliError> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    return Err(CliError::Io {
                        path: String::new(),
                        source: e,
                    })
                }
            }
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, CliError> {
    u32::try_from(v).map_err(|_| CliError::Usage(format!("{what} does not fit in u32")))
}

// ---- JAAF -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JaafHeader {
    pub dim: usize,
    pub frames: usize,
}

pub fn write_jaaf(mut w: impl Write, dim: usize, rows: &[f32]) -> Result<(), CliError> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(CliError::Usage(format!("{} values do not form rows of {dim}", rows.len())));
    }
    let mut buf = Vec::with_capacity(16 + rows.len() * 4);
    buf.extend_from_slice(JAAF_MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, to_u32(dim, "dim")?);
    put_u32(&mut buf, to_u32(rows.len() / dim, "frame count")?);
    put_f32s(&mut buf, rows);
    w.write_all(&buf).map_err(|e| CliError::Io {
        path: String::new(),
        source: e,
    })
}

/// Incremental JAAF reader: the header is validated up front, frames are
/// pulled in chunks.
pub struct JaafReader<R> {
    cursor: Cursor<R>,
    header: JaafHeader,
    read: usize,
}

impl<R: Read> JaafReader<R> {
    pub fn new(inner: R) -> Result<Self, CliError> {
        let mut cursor = Cursor::new(inner);
        cursor.magic(JAAF_MAGIC)?;
        cursor.version()?;
        let at = cursor.offset();
        let dim = cursor.u32("dim")? as usize;
        if dim == 0 {
            return Err(format_err(at, "feature dim is zero"));
        }
        let frames = cursor.u32("frame count")? as usize;
        Ok(Self {
            cursor,
            header: JaafHeader { dim, frames },
            read: 0,
        })
    }

    pub fn header(&self) -> JaafHeader {
        self.header
    }

    pub fn remaining(&self) -> usize {
        self.header.frames - self.read
    }

    /// Up to `max` frames, frame-major; empty once every frame is read.
    /// Reading past the last frame checks for trailing bytes.
    pub fn next_frames(&mut self, max: usize) -> Result<Vec<f32>, CliError> {
        let n = max.min(self.remaining());
        if n == 0 {
            if !self.cursor.at_eof()? {
                return Err(format_err(self.cursor.offset(), "trailing bytes after the last frame"));
            }
            return Ok(Vec::new());
        }
        let rows = self.cursor.f32s(n * self.header.dim, "audio frames")?;
        self.read += n;
        Ok(rows)
    }

    pub fn read_all(mut self) -> Result<(JaafHeader, Vec<f32>), CliError> {
        let rows = self.next_frames(self.remaining())?;
        self.next_frames(1)?;
        Ok((self.header, rows))
    }
}

// ---- JAVL -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JavlHeader {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames_per_block: usize,
}

impl JavlHeader {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            channels: cfg.channels,
            height: cfg.grid_h,
            width: cfg.grid_w,
            frames_per_block: cfg.frames_per_block,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Streams emitted frames; every block is flushed as soon as it is written.
pub struct JavlWriter<W: Write> {
    inner: W,
    header: JavlHeader,
    frames: u64,
}

impl<W: Write> JavlWriter<W> {
    pub fn new(mut inner: W, header: JavlHeader) -> Result<Self, CliError> {
        let mut buf = Vec::with_capacity(JAVL_HEADER_LEN as usize);
        buf.extend_from_slice(JAVL_MAGIC);
        put_u32(&mut buf, VERSION);
        for v in [header.channels, header.height, header.width, header.frames_per_block] {
            put_u32(&mut buf, to_u32(v, "header field")?);
        }
        inner.write_all(&buf).and_then(|_| inner.flush()).map_err(io_err)?;
        Ok(Self {
            inner,
            header,
            frames: 0,
        })
    }

    /// Appends whole frames (`latents.len()` a multiple of the frame size).
    pub fn write_block(&mut self, latents: &[f32]) -> Result<(), CliError> {
        let l = self.header.frame_len();
        if latents.len() % l != 0 {
            return Err(CliError::Usage(format!("{} values are not whole frames of {l}", latents.len())));
        }
        let mut buf = Vec::with_capacity(latents.len() * 4);
        put_f32s(&mut buf, latents);
        self.inner.write_all(&buf).and_then(|_| self.inner.flush()).map_err(io_err)?;
        self.frames += (latents.len() / l) as u64;
        Ok(())
    }

    pub fn frames_written(&self) -> u64 {
        self.frames
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

fn io_err(e: io::Error) -> CliError {
    CliError::Io {
        path: String::new(),
        source: e,
    }
}

/// Reads a whole JAVL stream: header plus `[frames, C·H·W]` values.
pub fn read_javl(inner: impl Read) -> Result<(JavlHeader, Vec<f32>), CliError> {
    let mut c = Cursor::new(inner);
    c.magic(JAVL_MAGIC)?;
    c.version()?;
    let at = c.offset();
    let header = JavlHeader {
        channels: c.u32("channels")? as usize,
        height: c.u32("height")? as usize,
        width: c.u32("width")? as usize,
        frames_per_block: c.u32("frames_per_block")? as usize,
    };
    if header.frame_len() == 0 || header.frames_per_block == 0 {
        return Err(format_err(at, "zero-sized frame geometry"));
    }
    let mut rest = Vec::new();
    c.inner.read_to_end(&mut rest).map_err(io_err)?;
    let frame_bytes = header.frame_len() * 4;
    if rest.len() % frame_bytes != 0 {
        let whole = rest.len() / frame_bytes * frame_bytes;
        return Err(format_err(c.offset() + whole as u64, "partial frame at end of stream"));
    }
    let data = rest.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((header, data))
}

// ---- JADN -------------------------------------------------------------------

fn config_fields(cfg: &ModelConfig) -> [usize; 9] {
    [
        cfg.channels,
        cfg.grid_h,
        cfg.grid_w,
        cfg.width,
        cfg.heads,
        cfg.layers,
        cfg.audio_dim,
        cfg.identity_dim,
        cfg.frames_per_block,
    ]
}

pub fn write_checkpoint(mut w: impl Write, cfg: &ModelConfig, params: &DenoiserParams) -> Result<(), CliError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(JADN_MAGIC);
    put_u32(&mut buf, VERSION);
    for f in config_fields(cfg) {
        put_u32(&mut buf, to_u32(f, "config field")?);
    }
    let named = params.named_tensors();
    put_u32(&mut buf, to_u32(named.len(), "tensor count")?);
    for (name, t) in named {
        put_u32(&mut buf, to_u32(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, to_u32(t.shape().len(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut buf, to_u32(d, "extent")?);
        }
        put_f32s(&mut buf, t.data());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(io_err)
}

pub fn read_checkpoint(inner: impl Read) -> Result<(ModelConfig, DenoiserParams), CliError> {
    let mut c = Cursor::new(inner);
    c.magic(JADN_MAGIC)?;
    c.version()?;
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = c.u32("config field")? as usize;
    }
    let cfg = ModelConfig {
        channels: f[0],
        grid_h: f[1],
        grid_w: f[2],
        width: f[3],
        heads: f[4],
        layers: f[5],
        audio_dim: f[6],
        identity_dim: f[7],
        frames_per_block: f[8],
    };
    cfg.validate().map_err(|e| format_err(8, e.to_string()))?;
    let count = c.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = c.offset();
        let len = c.u32("name length")? as usize;
        if len > 4096 {
            return Err(format_err(at, "implausible tensor name length"));
        }
        let mut name = vec![0u8; len];
        c.exact(&mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| format_err(at + 4, "tensor name is not UTF-8"))?;
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(format_err(c.offset() - 4, "implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = c.f32s(n, &name)?;
        named.push((name, Tensor::new(&shape, data)?));
    }
    if !c.at_eof()? {
        return Err(format_err(c.offset(), "trailing bytes after the last tensor"));
    }
    let params = DenoiserParams::from_named(&cfg, named).map_err(|e| format_err(c.offset(), e.to_string()))?;
    Ok((cfg, params))
}
