//! Planar floating point images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// A `channels x height x width` image stored channel-planar, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_planar(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "image buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    /// Loads an 8-bit grayscale or RGB PNG, dividing pixel values by 255.
    /// An alpha channel, if present, is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        use image::DynamicImage as D;
        let (channels, width, height, raw): (usize, u32, u32, Vec<u8>) = match decoded {
            D::ImageLuma8(buf) => (1, buf.width(), buf.height(), buf.into_raw()),
            D::ImageLumaA8(_) => {
                let buf = decoded.to_luma8();
                (1, buf.width(), buf.height(), buf.into_raw())
            }
            D::ImageRgb8(buf) => (3, buf.width(), buf.height(), buf.into_raw()),
            D::ImageRgba8(_) => {
                let buf = decoded.to_rgb8();
                (3, buf.width(), buf.height(), buf.into_raw())
            }
            other => {
                return Err(Error::Data(format!(
                    "{}: unsupported PNG color type {:?}; expected 8-bit grayscale or RGB",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (width, height) = (width as usize, height as usize);
        let mut img = Image::zeros(channels, height, width);
        for row in 0..height {
            for col in 0..width {
                for ch in 0..channels {
                    let v = raw[(row * width + col) * channels + ch];
                    img.set(ch, row, col, f32::from(v) / 255.0);
                }
            }
        }
        Ok(img)
    }

    /// Writes the image as an 8-bit PNG (grayscale for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let encoded = match self.channels {
            1 => {
                let raw: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::DynamicImage::ImageLuma8(
                    image::GrayImage::from_raw(w, h, raw).expect("buffer size checked"),
                )
            }
            3 => {
                let mut raw = Vec::with_capacity(self.data.len());
                for row in 0..self.height {
                    for col in 0..self.width {
                        for ch in 0..3 {
                            raw.push(quant(self.get(ch, row, col)));
                        }
                    }
                }
                image::DynamicImage::ImageRgb8(
                    image::RgbImage::from_raw(w, h, raw).expect("buffer size checked"),
                )
            }
            c => {
                return Err(Error::invalid(format!(
                    "cannot encode a {c}-channel image as PNG"
                )))
            }
        };
        encoded
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_255_levels() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(3, 4, 5);
        img.set(0, 1, 2, 1.0);
        img.set(1, 3, 4, 0.5);
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.dims(), (3, 4, 5));
        assert_eq!(back.get(0, 1, 2), 1.0);
        assert_eq!(back.get(1, 3, 4), 128.0 / 255.0);
        assert_eq!(back.get(2, 0, 0), 0.0);
    }

    #[test]
    fn grayscale_loads_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_planar(1, 2, 2, vec![0.0, 1.0, 0.2, 0.4]).unwrap();
        let path = dir.path().join("g.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.get(0, 0, 1), 1.0);
    }

    #[test]
    fn rejects_wrong_buffer_length() {
        assert!(Image::from_planar(3, 2, 2, vec![0.0; 11]).is_err());
    }
}
