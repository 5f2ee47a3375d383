//! Images and binary Netpbm (P5/P6) I/O.
//! <https://netpbm.sourceforge.net/doc/pnm.html>

use std::path::Path;

use crate::error::{Error, Result};

/// An `h x w x c` image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Values are clamped to `[0, 1]`; non-finite values are rejected.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!("image dimensions must be positive: {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::NonFinite("image pixel".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    /// 8-bit quantized pixel values.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

pub(crate) fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A decoded Netpbm header plus raw 8-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

/// Parse binary PGM (P5) or PPM (P6) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format("not a binary PGM/PPM file (expected P5 or P6 magic)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated or malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(format!("degenerate image size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval} (only 8-bit, maxval 255)")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format("missing whitespace after header"));
    }
    pos += 1;
    let n = width * height * channels;
    let samples = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format(format!("pixel data truncated: expected {n} bytes, found {}", bytes.len() - pos)))?
        .to_vec();
    Ok(Pnm {
        width,
        height,
        channels,
        samples,
    })
}

pub fn encode_pnm(width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid(format!("netpbm supports 1 or 3 channels, got {c}"))),
    };
    if samples.len() != width * height * channels {
        return Err(Error::shape("encode_pnm", &[height, width, channels], &[samples.len()]));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let read = || -> Result<Image> {
        let pnm = decode_pnm(&std::fs::read(path)?)?;
        Image::from_bytes(pnm.height, pnm.width, pnm.channels, &pnm.samples)
    };
    read().map_err(|e| e.in_file(path))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_pnm(image.width(), image.height(), image.channels(), &image.to_bytes())?;
    std::fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}
