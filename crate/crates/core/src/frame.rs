//! Frame decoding, grayscale conversion and resizing.
//!
//! Frames are stored as row-major `f64` luminance in `[0, 255]` with a
//! top-left origin. Every video is brought to one fixed working resolution
//! before descriptors are computed, so descriptor dimensionality never
//! depends on the source resolution.
//!
//! Resampling is corner-aligned: destination index `i` samples the source at
//! `i * (src_len - 1) / (dst_len - 1)`, or at the source center when
//! `dst_len == 1`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Default working resolution (width and height).
pub const DEFAULT_WORKING_SIZE: usize = 128;

/// A grayscale raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Frame {
    /// Builds a frame, checking the pixel count and clamping luminance into
    /// `[0, 255]`.
    pub fn new(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} frame needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 255.0) };
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Frame::new(width, height, vec![value; width * height])
    }

    /// Builds a frame from values already known to satisfy the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Frame {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Resizes with corner-aligned bilinear interpolation.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<Frame> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::InvalidParameter(format!(
                "resize target must be positive, got {out_w}x{out_h}"
            )));
        }
        if out_w == self.width && out_h == self.height {
            return Ok(self.clone());
        }
        let pixels = resample_plane(&self.pixels, self.width, self.height, out_w, out_h);
        Ok(Frame::from_raw(out_w, out_h, pixels))
    }

    /// Encodes as binary PGM (`P5`, maxval 255), rounding each pixel.
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&p| p.round().clamp(0.0, 255.0) as u8),
        );
        out
    }
}

/// Source coordinate sampled by destination index `i`.
#[inline]
pub(crate) fn source_coord(i: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len > 1 {
        i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    } else {
        (src_len - 1) as f64 / 2.0
    }
}

/// Bilinear sample of a row-major plane with edge replication.
#[inline]
pub(crate) fn sample_bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Corner-aligned bilinear resampling of an arbitrary real-valued plane.
pub(crate) fn resample_plane(
    plane: &[f64],
    w: usize,
    h: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let xs: Vec<f64> = (0..out_w).map(|i| source_coord(i, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let sy = source_coord(j, h, out_h);
        for &sx in &xs {
            out.push(sample_bilinear(plane, w, h, sx, sy));
        }
    }
    out
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::MalformedHeader(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each numeric field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if n == 0 && pos == 2 {
            return Err(Error::MalformedHeader(
                "missing whitespace after magic".into(),
            ));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!(
                "expected {} at byte {start}",
                ["width", "height", "maxval"][n]
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("number {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::MalformedHeader(
                "expected single whitespace before pixel data".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval == 0 {
        return Err(Error::MalformedHeader("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(Error::UnsupportedDepth(maxval.min(u32::MAX as u64) as u32));
    }
    Ok(PnmHeader {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        payload_offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &PnmHeader, channels: usize) -> Result<&'a [u8]> {
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::MalformedHeader("image dimensions overflow".into()))?;
    let data = &bytes[header.payload_offset..];
    if data.len() < expected {
        return Err(Error::TruncatedPixels {
            expected,
            found: data.len(),
        });
    }
    Ok(&data[..expected])
}

/// Decodes a binary PGM (`P5`) image. Samples are rescaled to `[0, 255]`
/// when maxval is below 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Frame> {
    let header = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &header, 1)?;
    let scale = 255.0 / header.maxval as f64;
    let pixels = data
        .iter()
        .map(|&v| (v as f64 * scale).min(255.0))
        .collect();
    Ok(Frame::from_raw(header.width, header.height, pixels))
}

/// Decodes a binary PPM (`P6`) image to BT.601 luma.
pub fn decode_ppm_to_gray(bytes: &[u8]) -> Result<Frame> {
    let header = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &header, 3)?;
    let scale = 255.0 / header.maxval as f64;
    let pixels = data
        .chunks_exact(3)
        .map(|rgb| {
            let luma = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
            (luma * scale).clamp(0.0, 255.0)
        })
        .collect();
    Ok(Frame::from_raw(header.width, header.height, pixels))
}

/// Decodes a PGM or PPM image based on its magic bytes.
pub fn decode_pnm(bytes: &[u8]) -> Result<Frame> {
    match bytes.get(..2) {
        Some(b"P6") => decode_ppm_to_gray(bytes),
        _ => decode_pgm(bytes),
    }
}

/// The frames of one video at the working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    key: String,
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(key: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let key = key.into();
        if key.is_empty() {
            return Err(Error::InvalidParameter(
                "video key must be non-empty".into(),
            ));
        }
        if frames.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "video {key:?} has {} frame(s), need at least 2",
                frames.len()
            )));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        if let Some(f) = frames.iter().find(|f| f.width != w || f.height != h) {
            return Err(Error::DimensionMismatch(format!(
                "video {key:?} mixes {w}x{h} and {}x{} frames",
                f.width, f.height
            )));
        }
        Ok(FrameSequence { key, frames })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }
}

fn is_frame_file(path: &Path) -> bool {
    path.is_file()
        && matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("pgm" | "ppm")
        )
}

/// Loads every `.pgm`/`.ppm` file of `dir` in ascending filename order,
/// converting to grayscale and resizing to the working resolution.
pub fn load_frame_sequence(
    dir: &Path,
    key: &str,
    working_w: usize,
    working_h: usize,
) -> Result<FrameSequence> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_frame_file(&path) {
            files.push(path);
        }
    }
    if files.len() < 2 {
        return Err(Error::InsufficientFrames {
            dir: dir.to_path_buf(),
            found: files.len(),
        });
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let frames = files
        .iter()
        .map(|file| {
            let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
            decode_pnm(&bytes)
                .and_then(|f| f.resize_bilinear(working_w, working_h))
                .map_err(|e| Error::FrameDecode {
                    file: file.clone(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(key, frames)
}

/// One manifest line: a video key and its frame directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub key: String,
    pub dir: PathBuf,
}

/// Corpus manifest: one `<key>,<frames-directory>` line per video.
///
/// Relative directories resolve against the manifest's own directory. Blank
/// lines are ignored. Entries are kept sorted by key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_entries(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.key.is_empty() || e.key.contains([',', '\n', '\r']) {
                return Err(Error::InvalidParameter(format!(
                    "invalid video key {:?}",
                    e.key
                )));
            }
            if !seen.insert(e.key.as_str()) {
                return Err(Error::DuplicateKey(e.key.clone()));
            }
        }
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(Manifest { entries })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (key, dir) = line.split_once(',').ok_or_else(|| Error::Manifest {
                line: idx + 1,
                msg: "expected `<key>,<frames-directory>`".into(),
            })?;
            let key = key.trim();
            let dir = dir.trim();
            if key.is_empty() || dir.is_empty() {
                return Err(Error::Manifest {
                    line: idx + 1,
                    msg: "empty key or directory".into(),
                });
            }
            let dir = Path::new(dir);
            let dir = if dir.is_absolute() {
                dir.to_path_buf()
            } else {
                base_dir.join(dir)
            };
            entries.push(ManifestEntry {
                key: key.to_string(),
                dir,
            });
        }
        Manifest::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Manifest::parse(&text, base)
    }

    /// Serializes back to manifest text with absolute or as-given paths.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{},{}\n", e.key, e.dir.display()))
            .collect()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
