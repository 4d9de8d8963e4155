//! Raster formats: binary PPM (P6, 8-bit RGB) for color images and binary
//! PGM (P5, 16-bit big-endian) for disparity maps and masks.
//!
//! Disparities are stored as `raw = round(256 * d)` with raw 0 reserved for
//! "no ground truth".

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("wrong magic: expected {expected}, found {found:?}")]
    WrongMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {found}, expected {expected}")]
    UnsupportedMaxval { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("buffer length {found} does not match {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

/// Interleaved 8-bit RGB raster, row-major with top-left origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, FormatError> {
        if width == 0 || height == 0 {
            return Err(FormatError::InvalidDimensions { width, height });
        }
        if data.len() != 3 * width * height {
            return Err(FormatError::LengthMismatch {
                expected: 3 * width * height,
                found: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, FormatError> {
        let data = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

/// Per-pixel disparity in full-resolution pixel units plus a validity mask.
/// Invalid pixels always carry value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    /// Builds a map; values at invalid pixels are forced to 0, valid values
    /// must be finite and non-negative.
    pub fn new(
        width: usize,
        height: usize,
        mut values: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, FormatError> {
        if width == 0 || height == 0 {
            return Err(FormatError::InvalidDimensions { width, height });
        }
        let n = width * height;
        for len in [values.len(), valid.len()] {
            if len != n {
                return Err(FormatError::LengthMismatch { expected: n, found: len });
            }
        }
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            } else if !(v.is_finite() && *v >= 0.0) {
                return Err(FormatError::MalformedHeader(format!(
                    "valid disparity must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(Self { width, height, values, valid })
    }

    /// A map with every pixel valid.
    pub fn dense(width: usize, height: usize, values: Vec<f32>) -> Result<Self, FormatError> {
        let valid = vec![true; values.len()];
        Self::new(width, height, values, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        let mut valid = self.valid.clone();
        for y in 0..self.height {
            let row = y * self.width..(y + 1) * self.width;
            values[row.clone()].reverse();
            valid[row].reverse();
        }
        Self { width: self.width, height: self.height, values, valid }
    }
}

/// Single-channel 16-bit raster as stored in a P5 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(FormatError::WrongMagic { expected: magic, found });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(FormatError::MalformedHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::MalformedHeader(format!(
                "expected a decimal number at byte {start}"
            )));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = token
            .parse()
            .map_err(|_| FormatError::MalformedHeader(format!("number out of range: {token}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(FormatError::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    let (width, height) = (width as usize, height as usize);
    if width == 0 || height == 0 {
        return Err(FormatError::InvalidDimensions { width, height });
    }
    Ok(Header { width, height, maxval, offset: pos })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, bytes_per_px: usize) -> Result<&'a [u8], FormatError> {
    let expected = header.width * header.height * bytes_per_px;
    let found = bytes.len() - header.offset;
    if found < expected {
        return Err(FormatError::Truncated { expected, found });
    }
    Ok(&bytes[header.offset..header.offset + expected])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage, FormatError> {
    let header = parse_header(bytes, "P6")?;
    if header.maxval != 255 {
        return Err(FormatError::UnsupportedMaxval { expected: 255, found: header.maxval });
    }
    let data = payload(bytes, &header, 3)?.to_vec();
    RawImage::new(header.width, header.height, data)
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<Gray16, FormatError> {
    let header = parse_header(bytes, "P5")?;
    if header.maxval != 65535 {
        return Err(FormatError::UnsupportedMaxval { expected: 65535, found: header.maxval });
    }
    let data = payload(bytes, &header, 2)?
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Gray16 { width: header.width, height: header.height, data })
}

pub fn encode_pgm16(img: &Gray16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(2 * img.data.len());
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_disp16(bytes: &[u8]) -> Result<DisparityMap, FormatError> {
    let gray = decode_pgm16(bytes)?;
    let values = gray.data.iter().map(|&r| r as f32 / 256.0).collect();
    let valid = gray.data.iter().map(|&r| r != 0).collect();
    DisparityMap::new(gray.width, gray.height, values, valid)
}

/// Encodes a disparity map; returns the file bytes and the number of valid
/// pixels whose value had to be clamped into `[1, 65535]`.
pub fn encode_disp16(d: &DisparityMap) -> (Vec<u8>, usize) {
    let mut clamped = 0;
    let data = d
        .values
        .iter()
        .zip(&d.valid)
        .map(|(&v, &ok)| {
            if !ok {
                return 0;
            }
            let raw = (v as f64 * 256.0).round();
            if !(1.0..=65535.0).contains(&raw) {
                clamped += 1;
            }
            // NaN maps to 1 via the max
            raw.max(1.0).min(65535.0) as u16
        })
        .collect();
    let bytes = encode_pgm16(&Gray16 { width: d.width, height: d.height, data });
    (bytes, clamped)
}

/// Linear blue→green→red ramp over `[0, max_disp]`; invalid pixels black.
pub fn colorize_disparity(d: &DisparityMap, max_disp: f32) -> RawImage {
    assert!(max_disp > 0.0, "max_disp must be positive");
    let mut data = Vec::with_capacity(3 * d.values.len());
    for (&v, &ok) in d.values.iter().zip(&d.valid) {
        if !ok {
            data.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let t = (v / max_disp).clamp(0.0, 1.0);
        let (r, g, b) = if t < 0.5 {
            (0.0, 2.0 * t, 1.0 - 2.0 * t)
        } else {
            (2.0 * t - 1.0, 2.0 - 2.0 * t, 0.0)
        };
        data.extend([r, g, b].map(|c| (c * 255.0).round() as u8));
    }
    RawImage::new(d.width, d.height, data).expect("dimensions come from a valid map")
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
