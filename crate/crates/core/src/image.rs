//! RGB images and single-channel maps in `[0,1]` float, with the on-disk
//! codecs the pipeline needs: 8-bit PNG and binary PPM in, PNG out, and
//! 16-bit PGM for transmission maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// H×W×3 image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// H×W single-channel map (depth, transmission, dark channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(ImageBuffer { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    /// Builds from `f(row, col, channel)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageBuffer { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuffer {
        ImageBuffer {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Top-left aligned crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageBuffer> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(ImageBuffer::from_fn(height, width, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Decodes PNG or binary PPM (format sniffed from content), scaling by 1/255.
    pub fn load(path: impl AsRef<Path>) -> Result<ImageBuffer> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes).map_err(|e| image_err(path, e))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImageBuffer::new(
            h as usize,
            w as usize,
            rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// 8-bit quantization, `round(255·clamp(v))`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| image_err(path, e))
    }

    /// Binary PPM (P6), 8-bit.
    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// `[3,H,W]` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            T::from_f64(self.data[p * 3 + c] as f64)
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<ImageBuffer> {
        let (c, h, w) = t.chw()?;
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        let d = t.data();
        Ok(ImageBuffer::from_fn(h, w, |y, x, ch| {
            d[(ch * h + y) * w + x].as_f64() as f32
        }))
    }

    /// Rec.601 luma, `0.299 R + 0.587 G + 0.114 B`, in 64-bit.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Plane {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Loads any image and averages its channels.
    pub fn load_gray(path: impl AsRef<Path>) -> Result<Plane> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes).map_err(|e| image_err(path, e))?;
        let g = img.to_luma16();
        let (w, h) = g.dimensions();
        Plane::new(
            h as usize,
            w as usize,
            g.as_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        )
    }

    /// 16-bit binary PGM (P5, big-endian samples), `round(65535·clamp(v))`.
    pub fn save_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(5, 7, |y, x, c| ((y * 31 + x * 7 + c * 101) % 256) as f32 / 255.0);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageBuffer::load(&p).unwrap(), img);
        let q = dir.path().join("a.ppm");
        img.save_ppm(&q).unwrap();
        assert_eq!(ImageBuffer::load(&q).unwrap(), img);
    }

    #[test]
    fn pgm16_header_and_big_endian_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        Plane::new(1, 2, vec![1.0, 0.5]).unwrap().save_pgm16(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n2 1\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0xff, 0xff, 0x80, 0x00]);
        let back = Plane::load_gray(&p).unwrap();
        assert_eq!(back.data()[0], 1.0);
        assert!((back.data()[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn tensor_layout_is_planar() {
        let img = ImageBuffer::from_fn(2, 3, |y, x, c| (c * 100 + y * 10 + x) as f32);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.data()[6 + 4], 111.0);
        assert_eq!(ImageBuffer::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn rejects_bad_sizes_and_crops() {
        assert!(ImageBuffer::new(2, 2, vec![0.0; 11]).is_err());
        let img = ImageBuffer::filled(4, 4, [0.1, 0.2, 0.3]);
        assert!(img.crop(2, 0, 3, 2).is_err());
        assert_eq!(img.crop(1, 1, 3, 3).unwrap().pixel(2, 2), [0.1, 0.2, 0.3]);
    }
}
