//! Binary PPM (P6) and PGM (P5) files, 8 bits per sample.

use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Result, TsnError};

/// A decoded 8-bit image: `channels` is 1 for PGM and 3 for PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn write(path: &Path, data: &[u8], width: usize, height: usize, gray: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| TsnError::io(path, e))?;
    let (subtype, color) = if gray {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|e| TsnError::format(path, e.to_string()))
}

pub fn write_ppm(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    write(path, rgb, width, height, false)
}

pub fn write_pgm(path: &Path, gray: &[u8], width: usize, height: usize) -> Result<()> {
    write(path, gray, width, height, true)
}

pub fn read_pnm(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| TsnError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| TsnError::format(path, e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, data) = match img {
        image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        image::DynamicImage::ImageRgb8(c) => (3, c.into_raw()),
        other => return Err(TsnError::format(path, format!("unsupported sample layout {:?}", other.color()))),
    };
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

/// Reads a graymap, rejecting colour images.
pub fn read_pgm(path: &Path) -> Result<Raster> {
    let r = read_pnm(path)?;
    if r.channels != 1 {
        return Err(TsnError::format(path, "expected a graymap"));
    }
    Ok(r)
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let r = read_pnm(path)?;
    if r.channels != 3 {
        return Err(TsnError::format(path, "expected a pixmap"));
    }
    Ok(r)
}
