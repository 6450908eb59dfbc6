//! 8-bit inspection dumps of encoded windows.

use std::fs;
use std::path::Path;

use magloc_core::imaging::{Image, TransformKind};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DumpFormat {
    Pgm,
    Png,
}

impl DumpFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DumpFormat::Pgm => "pgm",
            DumpFormat::Png => "png",
        }
    }
}

/// Maps the transform's value range linearly onto 0..=255.
pub fn to_gray(image: &Image, kind: TransformKind) -> Vec<u8> {
    let (lo, hi) = kind.range();
    image
        .data
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (P5) bytes.
pub fn pgm_bytes(side: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_image(path: &Path, image: &Image, kind: TransformKind, format: DumpFormat) -> Result<()> {
    let gray = to_gray(image, kind);
    match format {
        DumpFormat::Pgm => fs::write(path, pgm_bytes(image.side, &gray)).map_err(|e| CliError::io(path, e)),
        DumpFormat::Png => {
            let side = image.side as u32;
            let buf = image::GrayImage::from_raw(side, side, gray)
                .ok_or_else(|| CliError::Data(format!("image buffer for {} has the wrong size", path.display())))?;
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| CliError::io(path, std::io::Error::other(e)))
        }
    }
}
