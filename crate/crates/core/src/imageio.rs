//! Float images and 8-bit PNG input/output.

use std::path::Path;

use crate::error::{Error, Result};

/// `height × width × channels` float image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Values clamped to `[0, 1]` and rounded to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(*v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::from_data(width, height, channels, bytes.iter().map(|b| *b as f64 / 255.0).collect())
    }

    /// Round trip through 8 bits, as if saved and reloaded.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| quantize(*v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Writes a 1- or 3-channel image as an 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    write_png_bytes(path, img.width, img.height, img.channels, &img.to_u8())
}

pub fn write_png_bytes(path: &Path, width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<()> {
    let color = match channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    image::save_buffer_with_format(path, bytes, width as u32, height as u32, color, image::ImageFormat::Png).map_err(|e| {
        match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        }
    })
}

/// Reads a PNG as 3-channel RGB, or 1-channel when `gray` is set.
pub fn load_png(path: &Path, gray: bool) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if gray {
        Image::from_u8(w, h, 1, dynimg.to_luma8().as_raw())
    } else {
        Image::from_u8(w, h, 3, dynimg.to_rgb8().as_raw())
    }
}
