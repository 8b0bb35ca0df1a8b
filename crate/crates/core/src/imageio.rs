//! PNG encoding helpers for images in `[-1, 1]` (HWC, RGB) and scalar heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{LabError, Result};

pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn rgb_image(pixels: &[f32], h: usize, w: usize) -> Result<RgbImage> {
    if pixels.len() != h * w * 3 {
        return Err(LabError::shape(format!("{} values for a {h}x{w}x3 image", pixels.len())));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        Rgb([to_u8(pixels[i]), to_u8(pixels[i + 1]), to_u8(pixels[i + 2])])
    }))
}

pub fn save_rgb(pixels: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    rgb_image(pixels, h, w)?.save(path)?;
    Ok(())
}

/// Tiles square HWC images into a grid with `cols` columns and a 2 px gutter.
pub fn save_grid(images: &[&[f32]], res: usize, cols: usize, path: &Path) -> Result<()> {
    if images.is_empty() {
        return Err(LabError::config("empty image grid"));
    }
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let pad = 2;
    let mut canvas = RgbImage::from_pixel(
        (cols * (res + pad) + pad) as u32,
        (rows * (res + pad) + pad) as u32,
        Rgb([255, 255, 255]),
    );
    for (i, img) in images.iter().enumerate() {
        let tile = rgb_image(img, res, res)?;
        let (ox, oy) = (pad + (i % cols) * (res + pad), pad + (i / cols) * (res + pad));
        image::imageops::replace(&mut canvas, &tile, ox as i64, oy as i64);
    }
    canvas.save(path)?;
    Ok(())
}

/// Diverging blue-white-red heatmap of a signed grid, symmetric around zero.
pub fn save_heatmap(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    if values.len() != h * w {
        return Err(LabError::shape(format!("{} values for a {h}x{w} heatmap", values.len())));
    }
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (values[y as usize * w + x as usize] / scale).clamp(-1.0, 1.0);
        let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
        if v >= 0.0 {
            Rgb([255, fade(v), fade(v)])
        } else {
            Rgb([fade(-v), fade(-v), 255])
        }
    });
    img.save(path)?;
    Ok(())
}

/// Grayscale magnitude map scaled to its own maximum.
pub fn save_magnitude(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    if values.len() != h * w {
        return Err(LabError::shape(format!("{} values for a {h}x{w} map", values.len())));
    }
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(255.0 * values[y as usize * w + x as usize].abs() / scale).round() as u8])
    });
    img.save(path)?;
    Ok(())
}
