//! PNG readers and writers for images, label maps and visualizations.

use std::fs;
use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use super::maps::{AnomalyScoreMap, InstanceMap, RgbImage, SemanticMap};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an 8-bit RGB raster, scaling values to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = open(path)?;
    let channels = img.color().channel_count();
    if img.color() != ColorType::Rgb8 {
        return Err(Error::ChannelCount {
            path: path.to_path_buf(),
            found: channels,
        });
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    });
    RgbImage::new(data)
}

pub fn save_image(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let d = image.data();
    let buf = ImageBuffer::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let px = |c| (d[[c, y as usize, x as usize]] * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    save(path.as_ref(), DynamicImage::ImageRgb8(buf))
}

/// Reads a single-channel 8-bit class-id PNG (VOID = 255).
pub fn load_semantic(path: impl AsRef<Path>, num_classes: u8) -> Result<SemanticMap> {
    let path = path.as_ref();
    let img = open(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::ChannelCount {
            path: path.to_path_buf(),
            found: img.color().channel_count(),
        });
    }
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let ids = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| g.get_pixel(x as u32, y as u32)[0]);
    SemanticMap::new(ids, num_classes)
}

pub fn save_semantic(path: impl AsRef<Path>, map: &SemanticMap) -> Result<()> {
    save(path.as_ref(), DynamicImage::ImageLuma8(gray_from(map.ids())))
}

/// Reads a 16-bit instance-id PNG; classes come from the matching semantic map.
pub fn load_instances(path: impl AsRef<Path>, semantic: &SemanticMap) -> Result<InstanceMap> {
    let path = path.as_ref();
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let ids = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]);
    InstanceMap::new(ids, semantic)
}

pub fn save_instances(path: impl AsRef<Path>, map: &InstanceMap) -> Result<()> {
    let ids = map.ids();
    let (h, w) = ids.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([ids[[y as usize, x as usize]]]));
    save(path.as_ref(), DynamicImage::ImageLuma16(buf))
}

/// Grayscale visualization of a map with values in `[0, 1]`.
pub fn save_gray(path: impl AsRef<Path>, values: &Array2<f32>) -> Result<()> {
    let q = values.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    save(path.as_ref(), DynamicImage::ImageLuma8(gray_from(&q)))
}

fn gray_from(a: &Array2<u8>) -> GrayImage {
    let (h, w) = a.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([a[[y as usize, x as usize]]]))
}

/// Blends a red heat layer over `image`, with per-pixel alpha equal to the
/// score. Pixels where `exclude` is true are left untouched.
pub fn overlay(image: &RgbImage, scores: &AnomalyScoreMap, exclude: Option<&Array2<bool>>) -> Result<RgbImage> {
    if (scores.height(), scores.width()) != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "overlay: scores {}x{} vs image {}x{}",
            scores.height(),
            scores.width(),
            image.height(),
            image.width()
        )));
    }
    let heat = [1.0f32, 0.0, 0.0];
    let mut out = image.data().clone();
    for ((y, x), s) in scores.scores().indexed_iter() {
        if exclude.is_some_and(|m| m[[y, x]]) {
            continue;
        }
        let alpha = s.clamp(0.0, 1.0);
        if alpha == 0.0 {
            continue;
        }
        for (c, h) in heat.iter().enumerate() {
            out[[c, y, x]] = (1.0 - alpha) * out[[c, y, x]] + alpha * h;
        }
    }
    RgbImage::new(out)
}
