//! Lossless 8-bit RGB PNG reading and writing.
//!
//! Only 8-bit truecolor images are accepted. Palette images are expanded to
//! RGB on load; grayscale, alpha and 16-bit images are rejected.

use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use thiserror::Error;

use crate::image::{ImageError, ImageTensor};

#[derive(Debug, Error)]
pub enum PngError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode error: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode error: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("unsupported png format {color:?} at {bit_depth:?}; only 8-bit RGB is accepted")]
    Unsupported {
        color: png::ColorType,
        bit_depth: png::BitDepth,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub fn decode(bytes: &[u8]) -> Result<ImageTensor, PngError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(PngError::Unsupported {
            color: info.color_type,
            bit_depth: info.bit_depth,
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let row = w * 3;
    let mut data = Vec::with_capacity(h * row);
    for chunk in buf[..info.buffer_size()].chunks(info.line_size) {
        data.extend_from_slice(&chunk[..row]);
    }
    Ok(ImageTensor::new(h, w, data)?)
}

pub fn encode<W: Write>(image: &ImageTensor, writer: W) -> Result<(), PngError> {
    let mut encoder = png::Encoder::new(writer, image.width() as u32, image.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut w = encoder.write_header()?;
    w.write_image_data(image.as_bytes())?;
    w.finish()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ImageTensor, PngError> {
    decode(&std::fs::read(path)?)
}

pub fn save(image: &ImageTensor, path: impl AsRef<Path>) -> Result<(), PngError> {
    let mut out = BufWriter::new(File::create(path)?);
    encode(image, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn to_bytes(image: &ImageTensor) -> Result<Vec<u8>, PngError> {
    let mut out = Vec::new();
    encode(image, &mut out)?;
    Ok(out)
}
