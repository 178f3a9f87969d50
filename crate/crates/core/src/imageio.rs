//! File formats: RGB images and masks as PNG (masks at 1 bit per pixel),
//! float score maps as single-channel PFM.

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Provenance, ResolutionSpace};
use ndarray::{Array2, Array3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// RGB pixel grid, `[channel, row, col]`, values in `[0, 1]`.
pub type Image = Array3<f32>;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image as it reads back after an 8-bit round trip.
pub fn quantize(img: &Image) -> Image {
    img.mapv(|v| to_u8(v) as f32 / 255.0)
}

pub fn save_rgb_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                buf.push(to_u8(img[[ch, r, col]]));
            }
        }
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(&buf).map_err(|e| Error::format(path, e))?;
    Ok(())
}

struct Decoded {
    w: usize,
    h: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut data = vec![0u8; size];
    let info = reader.next_frame(&mut data).map_err(|e| Error::format(path, e))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut packed = Vec::with_capacity(w * h * channels);
    for r in 0..h {
        packed.extend_from_slice(&data[r * info.line_size..r * info.line_size + w * channels]);
    }
    Ok(Decoded { w, h, channels, data: packed })
}

pub fn load_rgb_png(path: &Path) -> Result<Image> {
    let d = decode_png(path)?;
    let mut img = Image::zeros((3, d.h, d.w));
    for r in 0..d.h {
        for c in 0..d.w {
            let px = &d.data[(r * d.w + c) * d.channels..];
            for ch in 0..3 {
                let v = if d.channels >= 3 { px[ch] } else { px[0] };
                img[[ch, r, c]] = v as f32 / 255.0;
            }
        }
    }
    Ok(img)
}

/// Writes a 1-bit grayscale PNG (white = foreground).
pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    let stride = w.div_ceil(8);
    let mut buf = vec![0u8; stride * h];
    for ((r, c), &v) in mask.values.indexed_iter() {
        if v {
            buf[r * stride + c / 8] |= 0x80 >> (c % 8);
        }
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(&buf).map_err(|e| Error::format(path, e))?;
    Ok(())
}

/// Reads any grayscale/RGB PNG as a mask; non-zero first channel = foreground.
pub fn load_mask_png(path: &Path, space: ResolutionSpace, provenance: Provenance) -> Result<BinaryMask> {
    let d = decode_png(path)?;
    let values = Array2::from_shape_fn((d.h, d.w), |(r, c)| d.data[(r * d.w + c) * d.channels] > 127);
    Ok(BinaryMask::new(values, space, provenance))
}

/// Single-channel portable float map (`Pf`), little-endian, bottom-to-top rows.
pub fn save_pfm(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    for r in (0..h).rev() {
        for c in 0..w {
            out.write_all(&map[[r, c]].to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Array2<f32>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        header.push(line.trim().to_string());
    }
    if header[0] != "Pf" {
        return Err(Error::format(path, "not a single-channel PFM"));
    }
    let dims: Vec<usize> = header[1].split_whitespace().filter_map(|s| s.parse().ok()).collect();
    let scale: f32 = header[2].parse().map_err(|_| Error::format(path, "bad scale"))?;
    if dims.len() != 2 {
        return Err(Error::format(path, "bad dimensions"));
    }
    let (w, h) = (dims[0], dims[1]);
    let mut bytes = vec![0u8; w * h * 4];
    reader.read_exact(&mut bytes)?;
    let mut map = Array2::zeros((h, w));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (r, c) = (h - 1 - i / w, i % w);
        map[[r, c]] = v;
    }
    Ok(map)
}
