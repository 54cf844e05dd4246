use std::path::Path;

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, ColorType, ImageReader, RgbImage};

use crate::error::{LocError, Result};

pub const CHANNELS: usize = 3;

/// Square RGB image stored row-major as H×W×C floats in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    size: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * CHANNELS {
            return Err(LocError::Shape(format!(
                "{} values cannot form a {size}x{size}x{CHANNELS} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(LocError::Shape(format!("non-finite pixel value {v}")));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let data = (0..size * size).flat_map(|_| rgb).collect();
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.size + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.size + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Applies `f` to every pixel.
    pub fn map_pixels(&self, f: impl Fn([f32; 3]) -> [f32; 3]) -> Self {
        let data = self
            .data
            .chunks_exact(CHANNELS)
            .flat_map(|p| f([p[0], p[1], p[2]]))
            .collect();
        Self {
            size: self.size,
            data,
        }
    }

    /// Mirror about the vertical axis (column reversal).
    pub fn hflip(&self) -> Self {
        let n = self.size;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..n {
            for x in (0..n).rev() {
                let i = (y * n + x) * CHANNELS;
                data.extend_from_slice(&self.data[i..i + CHANNELS]);
            }
        }
        Self { size: n, data }
    }

    pub fn clamped(&self) -> Self {
        Self {
            size: self.size,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// `(H, W, C)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.size, self.size, CHANNELS),
            device,
        )?)
    }

    /// Accepts `(H, W, C)` or `(1, H, W, C)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        let (h, w, c) = match dims.as_slice() {
            [h, w, c] | [1, h, w, c] => (*h, *w, *c),
            _ => return Err(LocError::Shape(format!("cannot read image from {dims:?}"))),
        };
        if h != w || c != CHANNELS {
            return Err(LocError::Shape(format!("expected square RGB, got {dims:?}")));
        }
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, data)
    }
}

/// Stacks images into a `(B, H, W, C)` tensor.
pub fn stack_images(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
    let size = images
        .first()
        .map(|i| i.size())
        .ok_or_else(|| LocError::Shape("cannot stack zero images".into()))?;
    let mut data = Vec::with_capacity(images.len() * size * size * CHANNELS);
    for img in images {
        if img.size() != size {
            return Err(LocError::Shape(format!(
                "cannot stack {0}x{0} with {size}x{size}",
                img.size()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), size, size, CHANNELS),
        device,
    )?)
}

pub fn unstack_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let b = t.dim(0)?;
    (0..b)
        .map(|i| ImageTensor::from_tensor(&t.get(i)?))
        .collect()
}

pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(LocError::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| LocError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| LocError::io(path, e))?;
    let decoded = reader.decode().map_err(|e| LocError::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if decoded.color() != ColorType::Rgb8 {
        return Err(LocError::NotRgb {
            path: path.to_path_buf(),
            color: format!("{:?}", decoded.color()),
        });
    }
    let mut rgb = decoded.into_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let data = rgb
        .as_raw()
        .iter()
        .map(|&v| from_byte(v))
        .collect();
    ImageTensor::new(size, data)
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

fn from_byte(v: u8) -> f32 {
    f32::from(v) / 255.0 * 2.0 - 1.0
}

impl ImageTensor {
    /// The image as it reads back after a PNG round trip.
    pub fn quantized(&self) -> Self {
        self.map_pixels(|p| p.map(|v| from_byte(to_byte(v))))
    }
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    let n = img.size() as u32;
    let buf = RgbImage::from_raw(n, n, bytes).expect("buffer length matches dimensions");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LocError::io(dir, e))?;
    }
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => LocError::io(path, io),
        other => LocError::io(path, std::io::Error::other(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_gray(path: &Path, v: u8, size: u32) {
        RgbImage::from_pixel(size, size, image::Rgb([v, v, v]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn linear_map_endpoints_and_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        for (v, expect) in [(0u8, -1.0f32), (255, 1.0), (128, 128.0 / 255.0 * 2.0 - 1.0)] {
            let p = dir.path().join(format!("g{v}.png"));
            write_gray(&p, v, 8);
            let img = load_image(&p, 8).unwrap();
            assert!(img.data().iter().all(|x| (x - expect).abs() < 1e-7));
        }
        assert!((128.0f32 / 255.0 * 2.0 - 1.0 - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_image(&dir.path().join("nope.png"), 8).unwrap_err();
        assert!(matches!(missing, LocError::MissingFile(_)));

        let corrupt = dir.path().join("bad.png");
        std::fs::write(&corrupt, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(
            load_image(&corrupt, 8).unwrap_err(),
            LocError::CorruptImage { .. }
        ));

        let rgba = dir.path().join("rgba.png");
        image::RgbaImage::from_pixel(4, 4, image::Rgba([1, 2, 3, 4]))
            .save(&rgba)
            .unwrap();
        assert!(matches!(
            load_image(&rgba, 4).unwrap_err(),
            LocError::NotRgb { .. }
        ));
    }

    #[test]
    fn save_clamps_and_maps_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let mut img = ImageTensor::filled(4, [-1.0, -1.0, -1.0]);
        img.set_pixel(0, 0, [1.5, 1.5, 1.5]);
        save_image(&img, &p).unwrap();
        let raw = image::open(&p).unwrap().into_rgb8();
        assert_eq!(raw.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(raw.get_pixel(1, 1).0, [0, 0, 0]);
    }

    #[test]
    fn byte_round_trip_at_native_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("src.png");
        let q = dir.path().join("dst.png");
        let src = RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x * 13) as u8, (y * 7) as u8, 200]));
        src.save(&p).unwrap();
        save_image(&load_image(&p, 16).unwrap(), &q).unwrap();
        assert_eq!(image::open(&q).unwrap().into_rgb8().as_raw(), src.as_raw());
    }

    #[test]
    fn hflip_is_column_reversal_and_involution() {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| i as f32 / 48.0).collect();
        let img = ImageTensor::new(4, data).unwrap();
        let f = img.hflip();
        assert_eq!(f.pixel(1, 0), img.pixel(1, 3));
        assert_eq!(f.hflip(), img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_load_within_quantization_step(vals in proptest::collection::vec(-1.5f32..1.5, 4 * 4 * 3)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.png");
            let img = ImageTensor::new(4, vals).unwrap();
            save_image(&img, &p).unwrap();
            let back = load_image(&p, 4).unwrap();
            prop_assert!(back.max_abs_diff(&img.clamped()) <= 2.0 / 255.0 + 1e-6);
        }
    }
}
