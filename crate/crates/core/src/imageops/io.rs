use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use super::Image;
use crate::error::{Error, Result};

fn quantize(image: &Image) -> Vec<u8> {
    image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Encodes as 8-bit binary PGM (P5).
pub fn write_pgm(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .encode(
            quantize(image).as_slice(),
            image.width() as u32,
            image.height() as u32,
            ExtendedColorType::L8,
        )?;
    Ok(out)
}

pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::format("PGM", "missing P5 magic"));
    }
    let gray = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?.into_luma8();
    let (w, h) = gray.dimensions();
    Image::new(
        w as usize,
        h as usize,
        gray.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
    )
}

pub fn write_png(image: &Image) -> Result<Vec<u8>> {
    encode_png(&quantize(image), image.width(), image.height(), ExtendedColorType::L8)
}

pub(crate) fn encode_png(
    buf: &[u8],
    width: usize,
    height: usize,
    color: ExtendedColorType,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(buf, width as u32, height as u32, color)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_at_8_bits() {
        let px: Vec<f32> = (0..16 * 20).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Image::new(16, 20, px).unwrap();
        let bytes = write_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(read_pgm(&bytes).unwrap(), img);
        assert!(read_pgm(b"P2 1 1 255 0").is_err());
    }

    #[test]
    fn png_has_signature() {
        let img = Image::blank(16, 16).unwrap();
        assert!(write_png(&img).unwrap().starts_with(&[0x89, b'P', b'N', b'G']));
    }
}
