//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::image::GrayImage;

/// A decoded netpbm image; `data` holds raw samples, interleaved for color.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

impl PnmImage {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self { width, height, channels: 1, maxval: 255, data }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self { width, height, channels: 3, maxval: 255, data }
    }

    /// Intensities scaled to `[0, 1]`; color is averaged over channels.
    pub fn to_gray(&self) -> GrayImage {
        let scale = 1.0 / f64::from(self.maxval.max(1));
        let pixels = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().map(|&v| f64::from(v)).sum::<f64>() / self.channels as f64 * scale)
            .collect();
        GrayImage::new(self.height, self.width, pixels).expect("pixel count matches")
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported netpbm magic `{other}`"))),
        };
        let width = parse_num(bytes, &mut pos, "width")?;
        let height = parse_num(bytes, &mut pos, "height")?;
        let maxval = parse_num(bytes, &mut pos, "maxval")?;
        if width == 0 || height == 0 {
            return Err(Error::Format("image has a zero extent".into()));
        }
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("maxval {maxval} is not an 8-bit depth")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("missing raster separator".into()));
        }
        pos += 1;
        let need = width * height * channels;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format(format!("raster truncated: need {need} bytes")))?;
        Ok(Self { width, height, channels, maxval: maxval as u16, data: raster.to_vec() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_num(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse().map_err(|_| Error::Format(format!("bad {what} `{tok}` in header")))
}

/// Quantizes `[0, 1]` intensities to 8 bits (values are clamped first).
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
