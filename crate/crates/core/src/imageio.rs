//! Conversions between 8-bit images on disk and `(1, 3, h, w)` tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Extensions accepted by the loaders.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Decodes PNG or JPEG bytes; other formats are rejected.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let format = image::guess_format(bytes)
        .map_err(|e| Error::Input(format!("unrecognized image data: {e}")))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::Input(format!("unsupported image format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Input(format!("cannot decode image: {e}")))?;
    Ok(img.to_rgb8())
}

pub fn resize(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if img.height() as usize == height && img.width() as usize == width {
        return img.clone();
    }
    image::imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
}

/// Planar float copy in [0, 1].
pub fn rgb_to_planar(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + idx] = px[c] as f32 / 255.0;
        }
    }
    out
}

pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_vec(rgb_to_planar(img), (1, 3, h, w), &Device::Cpu)?)
}

/// First image of a batch, clamped to [0, 1] and quantized to 8 bits.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let t = match t.rank() {
        4 => t.get(0)?,
        3 => t.clone(),
        r => return Err(Error::Input(format!("expected a rank 3 or 4 image tensor, got rank {r}"))),
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let idx = y as usize * w + x as usize;
        for ch in 0..3 {
            let v = data[ch * h * w + idx];
            px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Input(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Horizontally tiles a list of equally sized images into one PNG.
pub fn save_grid(path: &Path, images: &[Tensor]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Input("empty sample grid".into()));
    }
    let row = Tensor::cat(&images.iter().map(|t| t.get(0)).collect::<std::result::Result<Vec<_>, _>>()?, 2)?;
    save_png(path, &row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let mut img = RgbImage::new(5, 4);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = image::Rgb([(x * 50) as u8, (y * 60) as u8, ((x + y) * 20) as u8]);
        }
        let t = rgb_to_tensor(&img).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 5]);
        assert_eq!(tensor_to_rgb(&t).unwrap(), img);
        let png = encode_png(&img).unwrap();
        assert_eq!(decode_rgb(&png).unwrap(), img);
    }

    #[test]
    fn rejects_unknown_bytes() {
        assert!(matches!(decode_rgb(b"definitely not an image"), Err(Error::Input(_))));
    }

    #[test]
    fn extension_filter() {
        assert!(is_image_path(Path::new("a/b.PNG")));
        assert!(is_image_path(Path::new("x.jpeg")));
        assert!(!is_image_path(Path::new("x.txt")));
        assert!(!is_image_path(Path::new("x")));
    }
}
