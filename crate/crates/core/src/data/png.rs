use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mask pixels at or above this 8-bit value are crack.
pub const MASK_THRESHOLD: u8 = 128;

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::format(path, other.to_string()),
    })
}

/// 8-bit channels of the file, `(channels, h, w, bytes)`, alpha dropped.
fn read_u8(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Ok((1, h, w, g.into_raw())),
        DynamicImage::ImageLumaA8(_) => Ok((1, h, w, img.to_luma8().into_raw())),
        DynamicImage::ImageRgb8(c) => Ok((3, h, w, c.into_raw())),
        DynamicImage::ImageRgba8(_) => Ok((3, h, w, img.to_rgb8().into_raw())),
        other => Err(Error::format(
            path,
            format!("unsupported pixel format {:?}; only 8-bit grayscale or RGB", other.color()),
        )),
    }
}

/// RGB image as `[3, H, W]` in `[0, 1]`; grayscale is replicated.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let (c, h, w, px) = read_u8(path.as_ref())?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            let src = if c == 1 { px[i] } else { px[i * 3 + ch] };
            data[ch * h * w + i] = src as f64 / 255.0;
        }
    }
    Tensor::new(data, &[3, h, w])
}

/// Binary mask as `[1, H, W]`; RGB masks use their first channel.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let (c, h, w, px) = read_u8(path.as_ref())?;
    let data = (0..h * w).map(|i| if px[i * c] >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::new(data, &[1, h, w])
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[1, H, W]` or `[3, H, W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = match *t.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(Error::Contract(format!("cannot save shape {:?} as PNG", t.shape()))),
    };
    let d = t.data();
    let result = if c == 1 {
        let px = d.iter().map(|&v| quantize(v)).collect();
        GrayImage::from_raw(w as u32, h as u32, px).expect("sized buffer").save(path)
    } else {
        let px = (0..h * w).flat_map(|i| (0..3).map(move |ch| quantize(d[ch * h * w + i]))).collect();
        RgbImage::from_raw(w as u32, h as u32, px).expect("sized buffer").save(path)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::format(path, other.to_string()),
    })
}
