//! 8-bit grayscale images: PGM (P5) I/O and Gaussian filtering.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub use image::GrayImage;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader, Luma};

use crate::error::{Error, Result};

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = reader;
    reader.set_format(ImageFormat::Pnm);
    let img = reader
        .decode()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(img.into_luma8())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Row-major f64 copy of an image.
pub fn to_f64(img: &GrayImage) -> Vec<f64> {
    img.as_raw().iter().map(|&v| f64::from(v)).collect()
}

pub fn from_f64(width: u32, height: u32, data: &[f64]) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        let v = data[(y * width + x) as usize];
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter with replicated borders. `sigma <= 0` copies.
pub fn gaussian_blur_f64(width: usize, height: usize, data: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[clamp(x as i64 + k as i64 - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as i64 + k as i64 - radius, height) * width + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let data = gaussian_blur_f64(img.width() as usize, img.height() as usize, &to_f64(img), sigma);
    from_f64(img.width(), img.height(), &data)
}
