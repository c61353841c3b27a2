//! PNG export and import, and tiling images into grids.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dgae_core::nn::Tensor;

/// Pixels between grid tiles.
pub const SEPARATOR: usize = 2;

/// `[3, H, W]` in `[-1, 1]` to 8-bit RGB, row-major.
pub fn to_rgb8(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!("expected a [3, H, W] image, got {s:?}");
    }
    let (h, w) = (s[1], s[2]);
    let mut out = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            let v = (img.data()[c * h * w + p].clamp(-1.0, 1.0) + 1.0) * 0.5;
            out[p * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    Ok((h, w, out))
}

pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        rgb[p * 3 + c] as f32 / 127.5 - 1.0
    })
}

pub fn write_rgb_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    writer.finish()?;
    Ok(())
}

pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, rgb) = to_rgb8(img)?;
    write_rgb_png(path, w, h, &rgb)
}

/// Reads an 8-bit RGB (or RGBA, alpha dropped) PNG into `[3, H, W]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open image {}", path.display()))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .with_context(|| format!("{} is not a PNG", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        bail!("{}: only 8-bit PNGs are supported", path.display());
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4].chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&v| [v, v, v]).collect(),
        other => bail!("{}: unsupported colour type {other:?}", path.display()),
    };
    Ok(from_rgb8(h, w, &rgb))
}

/// Tiles equally sized images row-major with white separators; `None`
/// cells stay white.
pub fn save_grid(path: &Path, rows: &[Vec<Option<Tensor<f32>>>]) -> Result<()> {
    let first = rows
        .iter()
        .flatten()
        .flatten()
        .next()
        .context("grid has no images")?;
    let (h, w) = (first.dim(1), first.dim(2));
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * w + (cols - 1) * SEPARATOR;
    let gh = rows.len() * h + (rows.len() - 1) * SEPARATOR;
    let mut canvas = vec![255u8; gw * gh * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let Some(img) = cell else { continue };
            let (ih, iw, rgb) = to_rgb8(img)?;
            if (ih, iw) != (h, w) {
                bail!("grid tiles differ in size");
            }
            let (oy, ox) = (r * (h + SEPARATOR), c * (w + SEPARATOR));
            for y in 0..h {
                let dst = ((oy + y) * gw + ox) * 3;
                canvas[dst..dst + w * 3].copy_from_slice(&rgb[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    write_rgb_png(path, gw, gh, &canvas)
}
