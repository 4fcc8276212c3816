use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with channel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, rgb: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || rgb.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                rgb.len()
            )));
        }
        if let Some(p) = rgb.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        Ok(Image { width, height, rgb })
    }

    pub fn gray(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Image::new(width, height, values.iter().map(|&v| [v; 3]).collect())
    }
}

/// `round(v * 255)` with halves rounded away from zero.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (`P6`, maxval 255).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.rgb.len() * 3);
    for px in &img.rgb {
        out.extend(px.iter().map(|&v| quantize(v)));
    }
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Tiles equally sized images into a grid with `cols` columns and a
/// `pad`-pixel white border between tiles.
pub fn tile(images: &[Image], cols: usize, pad: usize) -> Result<Image> {
    let first = images.first().ok_or(Error::Empty("image grid"))?;
    if cols == 0 {
        return Err(Error::InvalidParameter(
            "grid needs at least one column".into(),
        ));
    }
    let (w, h) = (first.width, first.height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::InvalidParameter(
            "grid tiles must share a size".into(),
        ));
    }
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * w + (cols + 1) * pad, rows * h + (rows + 1) * pad);
    let mut rgb = vec![[1.0; 3]; gw * gh];
    for (i, img) in images.iter().enumerate() {
        let (x0, y0) = (pad + (i % cols) * (w + pad), pad + (i / cols) * (h + pad));
        for y in 0..h {
            for x in 0..w {
                rgb[(y0 + y) * gw + x0 + x] = img.rgb[y * w + x];
            }
        }
    }
    Image::new(gw, gh, rgb)
}
