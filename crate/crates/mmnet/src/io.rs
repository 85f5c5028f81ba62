//! PNG reading and writing and the paired-file dataset layout:
//! `<id>.png` (RGB) next to `<id>_matte.png` (8-bit gray).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use mmnet_core::data::Sample;
use mmnet_core::{AlphaMatte, Shape, Tensor};

use crate::error::{Error, Result};

pub const MATTE_SUFFIX: &str = "_matte";

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    image::open(path).map_err(|e| image_error(path, e))
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An RGB image as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| to_unit(img.get_pixel(x as u32, y as u32)[c]))?)
}

pub fn read_matte(path: &Path) -> Result<AlphaMatte> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| to_unit(img.get_pixel(x as u32, y as u32)[0]))?;
    Ok(AlphaMatte::new(t)?)
}

pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Input(format!("expected a single RGB image, got shape {s}")));
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_byte(image.get(0, c, y as usize, x as usize))))
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_error(path, e))
}

pub fn write_matte(path: &Path, alpha: &AlphaMatte) -> Result<()> {
    let t = alpha.tensor();
    let s = t.shape();
    if s.n != 1 {
        return Err(Error::Input(format!("expected a single matte, got shape {s}")));
    }
    let img = GrayImage::from_fn(s.w as u32, s.h as u32, |x, y| image::Luma([to_byte(t.get(0, 0, y as usize, x as usize))]));
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_error(path, e))
}

/// Samples in lexicographic id order. Every image needs a matte and every
/// matte an image.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut mattes: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in read {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        match stem.strip_suffix(MATTE_SUFFIX) {
            Some(id) => mattes.insert(id.to_string(), path),
            None => images.insert(stem, path),
        };
    }
    if let Some(id) = mattes.keys().find(|id| !images.contains_key(*id)) {
        return Err(Error::Input(format!("{}: matte for `{id}` has no image {id}.png", dir.display())));
    }
    images
        .into_iter()
        .map(|(id, image_path)| {
            let matte_path = mattes
                .get(&id)
                .ok_or_else(|| Error::Input(format!("{}: image `{id}` has no matte {id}{MATTE_SUFFIX}.png", dir.display())))?;
            let image = read_rgb(&image_path)?;
            let alpha = read_matte(matte_path)?;
            if (image.shape().h, image.shape().w) != (alpha.shape().h, alpha.shape().w) {
                return Err(Error::Input(format!(
                    "{}: image `{id}` is {}x{} but its matte is {}x{}",
                    dir.display(),
                    image.shape().w,
                    image.shape().h,
                    alpha.shape().w,
                    alpha.shape().h
                )));
            }
            Ok(Sample::new(image, alpha, id)?)
        })
        .collect()
}

/// Writes samples in the layout [`load_dataset`] reads.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_rgb(&dir.join(format!("{}.png", s.id)), &s.image)?;
        write_matte(&dir.join(format!("{}{MATTE_SUFFIX}.png", s.id)), &s.alpha)?;
    }
    Ok(())
}
