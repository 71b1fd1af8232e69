//! Canvas import/export as 8-bit RGB PNG.
//!
//! Quantization is `byte = round(255 * v)` on write and `v = byte / 255` on
//! read, so the round trip is lossy once and then idempotent. Values are
//! linear RGB; no gamma handling anywhere in the pipeline.

use crate::render::Canvas;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encode error: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode error: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png: {0}")]
    Unsupported(String),
}

pub fn canvas_to_bytes(canvas: &Canvas) -> Vec<u8> {
    canvas.pixels().iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn canvas_from_bytes(height: usize, width: usize, bytes: &[u8]) -> Canvas {
    let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Canvas::from_pixels(height, width, pixels)
}

pub fn write_png(path: &Path, canvas: &Canvas) -> Result<(), PngError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), canvas.width() as u32, canvas.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&canvas_to_bytes(canvas))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Canvas, PngError> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png too large")];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(PngError::Unsupported(format!("bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => {
            let mut out = Vec::with_capacity(w * h * 3);
            for px in buf[..w * h * 4].chunks_exact(4) {
                out.extend_from_slice(&px[..3]);
            }
            out
        }
        png::ColorType::Grayscale => {
            let mut out = Vec::with_capacity(w * h * 3);
            for &g in &buf[..w * h] {
                out.extend_from_slice(&[g, g, g]);
            }
            out
        }
        other => return Err(PngError::Unsupported(format!("color type {other:?}"))),
    };
    Ok(canvas_from_bytes(h, w, &rgb))
}

/// Tiles canvases of equal size into a grid image (row-major), with a 1-px
/// white gutter. Used for periodic sample sheets during training.
pub fn tile_grid(canvases: &[Canvas], cols: usize) -> Canvas {
    assert!(!canvases.is_empty());
    let ch = canvases[0].height();
    let cw = canvases[0].width();
    let rows = canvases.len().div_ceil(cols);
    let mut grid = Canvas::white(rows * (ch + 1) - 1, cols * (cw + 1) - 1);
    for (i, c) in canvases.iter().enumerate() {
        assert_eq!((c.height(), c.width()), (ch, cw), "sample grid expects equal sizes");
        let r0 = (i / cols) * (ch + 1);
        let c0 = (i % cols) * (cw + 1);
        for r in 0..ch {
            for cc in 0..cw {
                grid.set(r0 + r, c0 + cc, c.get(r, cc));
            }
        }
    }
    grid
}
