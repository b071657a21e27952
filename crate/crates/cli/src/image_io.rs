//! 8-bit PNG in and out. Pixel `p` maps to `2 p / 255 - 1` and back with
//! round-half-even; the effective run configuration rides along in a
//! `tEXt` chunk.

use std::io::Cursor;
use std::path::Path;

use sddm_core::Image;

use crate::error::CliError;

pub const CONFIG_KEYWORD: &str = "sddm-config";

/// Refuse images above this many decoded bytes.
const DECODE_LIMIT: usize = 1 << 28;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct PngError(String);

impl From<png::DecodingError> for PngError {
    fn from(e: png::DecodingError) -> Self {
        PngError(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPng {
    pub image: Image,
    pub config: Option<String>,
}

pub fn byte_to_value(p: u8) -> f64 {
    2.0 * (p as f64 / 255.0) - 1.0
}

pub fn value_to_byte(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Decodes grey, grey+alpha, RGB, RGBA or palette PNGs; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng, PngError> {
    let limits = png::Limits { bytes: DECODE_LIMIT };
    let mut decoder = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PngError("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(PngError("palette image was not expanded".into()))
        }
    };
    let line = info.line_size;
    let image = Image::from_shape_fn((channels, h, w), |(c, y, x)| {
        byte_to_value(buf[y * line + x * stride + c])
    });
    let config = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == CONFIG_KEYWORD)
        .map(|t| t.text.clone());
    Ok(DecodedPng { image, config })
}

pub fn encode_png(image: &Image, config: Option<&str>) -> Result<Vec<u8>, CliError> {
    let (c, h, w) = image.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(CliError::config(format!("cannot write a {c}-channel image as PNG"))),
    };
    if image.iter().any(|v| !v.is_finite()) {
        return Err(CliError::numeric("output image has non-finite pixels"));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data.push(value_to_byte(image[[ch, y, x]]));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(text) = config {
            enc.add_text_chunk(CONFIG_KEYWORD.to_string(), text.to_string())
                .map_err(|e| CliError::config(format!("cannot embed config: {e}")))?;
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| CliError::io(format!("PNG encoding failed: {e}")))?;
        writer
            .write_image_data(&data)
            .map_err(|e| CliError::io(format!("PNG encoding failed: {e}")))?;
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<DecodedPng, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    decode_png(&bytes).map_err(|e| CliError::io(format!("cannot decode {}: {e}", path.display())))
}

pub fn write_png(path: &Path, image: &Image, config: Option<&str>) -> Result<(), CliError> {
    let bytes = encode_png(image, config)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}
