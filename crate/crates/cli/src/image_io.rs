//! 8-bit RGB rasters in binary PPM (P6) and PNG.

use std::io::Cursor;
use std::path::Path;

use lmii_core::{Error, Result};

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

// -- PPM ----------------------------------------------------------------------

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let end_ok = self
            .bytes
            .get(self.pos)
            .is_some_and(u8::is_ascii_whitespace);
        if start == self.pos || !end_ok {
            return Err(Error::Format(format!(
                "PPM: malformed {field} field at byte offset {start}"
            )));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Format(format!("PPM: {field} out of range at byte offset {start}"))
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format(
            "PPM: missing P6 magic at byte offset 0".into(),
        ));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let max_at = {
        h.skip_space();
        h.pos
    };
    let maxval = h.number("max-value")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "PPM: malformed max-value field at byte offset {max_at}"
        )));
    }
    if maxval != 255 {
        return Err(Error::Format(format!(
            "PPM: unsupported bit depth (max value {maxval} at byte offset {max_at}); only 8-bit (255) is supported"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM: zero image extent".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = h.pos + 1;
    let need = width * height * 3;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(Error::Format(format!(
            "PPM: raster truncated at byte offset {}: need {need} bytes, have {have}",
            bytes.len()
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data: bytes[start..start + need].to_vec(),
    })
}

// -- PNG ----------------------------------------------------------------------

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Format(format!("PNG: {e}")))?;
        w.write_image_data(&img.data)
            .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

/// 8-bit RGB or grayscale (expanded to RGB). Other layouts are rejected.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "PNG: unsupported bit depth {:?}; only 8-bit is supported",
            depth
        )));
    }
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(Error::Format(format!(
                "PNG: unsupported color type {other:?}; expected RGB or grayscale"
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG: image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        let row = &buf[y * frame.line_size..][..width * channels];
        for x in 0..width {
            let rgb = if channels == 3 {
                [row[3 * x], row[3 * x + 1], row[3 * x + 2]]
            } else {
                [row[x]; 3]
            };
            img.put(x, y, rgb);
        }
    }
    Ok(img)
}

// -- files --------------------------------------------------------------------

/// Reads PPM or PNG, chosen by signature.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(Error::Format(format!(
            "{}: neither a P6 PPM nor a PNG",
            path.display()
        )))
    }
}

/// Writes PPM for a `.ppm` extension, PNG otherwise.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => encode_ppm(img),
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}
