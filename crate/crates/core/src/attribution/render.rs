use std::path::Path;

use super::{AttributionMap, SaliencyMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorScale {
    /// Red for positive, blue for negative, white at zero; symmetric in `max |v|`.
    Diverging,
    /// White to red over `[0, max v]`.
    Sequential,
}

/// Blend of the heatmap over a grayscale rendering of the input.
#[derive(Clone, Copy, Debug)]
pub struct Overlay<'a> {
    /// `H x W x C` image in `[0, 1]`.
    pub image: &'a Tensor,
    /// Weight of the heatmap.
    pub alpha: f64,
}

fn channel(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major RGB bytes for an `H x W` map.
pub fn heatmap_rgb(values: &Tensor, scale: ColorScale) -> Result<Vec<u8>> {
    if values.rank() != 2 {
        return Err(Error::shape(
            "heatmap",
            "map",
            format!("expected H x W, got {:?}", values.shape()),
        ));
    }
    let m = match scale {
        ColorScale::Diverging => values.data().iter().fold(0.0_f64, |a, v| a.max(v.abs())),
        ColorScale::Sequential => values.data().iter().fold(0.0_f64, |a, &v| a.max(v)),
    };
    let mut out = Vec::with_capacity(values.len() * 3);
    for &v in values.data() {
        let t = if m > 0.0 { v / m } else { 0.0 };
        let rgb = if t >= 0.0 {
            [1.0, 1.0 - t, 1.0 - t]
        } else {
            [1.0 + t, 1.0 + t, 1.0]
        };
        out.extend(rgb.map(channel));
    }
    Ok(out)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

fn blend(rgb: &mut [u8], overlay: &Overlay<'_>, grid: (usize, usize)) -> Result<()> {
    let s = overlay.image.shape();
    if s.len() != 3 || (s[0], s[1]) != grid {
        return Err(Error::shape(
            "heatmap",
            "overlay",
            format!("image {:?} does not match map {}x{}", s, grid.0, grid.1),
        ));
    }
    let c = s[2];
    let a = overlay.alpha.clamp(0.0, 1.0);
    for (px, pixel) in overlay.image.data().chunks(c).enumerate() {
        let gray = pixel.iter().sum::<f64>() / c as f64 * 255.0;
        for v in &mut rgb[px * 3..px * 3 + 3] {
            *v = (a * f64::from(*v) + (1.0 - a) * gray).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(())
}

/// Writes a heatmap as PNG or binary PPM, chosen by the file extension.
pub fn render_heatmap(values: &Tensor, scale: ColorScale, path: &Path, overlay: Option<Overlay<'_>>) -> Result<()> {
    let mut rgb = heatmap_rgb(values, scale)?;
    let (h, w) = (values.shape()[0], values.shape()[1]);
    if let Some(o) = overlay {
        blend(&mut rgb, &o, (h, w))?;
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => std::fs::write(path, encode_ppm(w, h, &rgb)).map_err(|e| Error::io(path, e)),
        "png" => {
            let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer sized from map");
            img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::io(path, std::io::Error::other(other.to_string())),
            })
        }
        _ => Err(Error::invalid(format!(
            "{}: heatmaps are written as .png or .ppm",
            path.display()
        ))),
    }
}

impl AttributionMap {
    pub fn render(&self, path: &Path, overlay: Option<Overlay<'_>>) -> Result<()> {
        render_heatmap(&self.values, ColorScale::Diverging, path, overlay)
    }
}

impl SaliencyMap {
    pub fn render(&self, path: &Path, overlay: Option<Overlay<'_>>) -> Result<()> {
        render_heatmap(self.values(), ColorScale::Sequential, path, overlay)
    }
}
