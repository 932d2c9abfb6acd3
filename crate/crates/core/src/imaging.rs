//! Interleaved `f64` images, PNG and PFM I/O, and PSNR.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Row-major, channel-interleaved (`H×W×C`) image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `(1, C, H, W)` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| self.data[(i[2] * w + i[3]) * c + i[1]])
    }

    /// Image `index` of an `(N, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::Shape(format!("cannot take image {index} from tensor {:?}", s)));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let plane = &t.data()[index * c * h * w..(index + 1) * c * h * w];
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = plane[ch * h * w + p];
            }
        }
        Ok(Self { width: w, height: h, channels: c, data })
    }

    /// 8-bit quantized copy (what a PNG round trip would produce).
    pub fn quantized(&self) -> Self {
        Self { data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(), ..self.clone() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Shape(format!("PNG export supports 1 or 3 channels, got {c}"))),
        };
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder = image::codecs::png::PngEncoder::new(std::io::BufWriter::new(file));
        image::ImageEncoder::write_image(encoder, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    /// Loads an 8-bit PNG as RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::new(w as usize, h as usize, 3, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Peak signal-to-noise ratio for unit dynamic range over pixels where `mask` is true
/// (all pixels when `mask` is `None`).
pub fn psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> f64 {
    assert_eq!((a.width, a.height, a.channels), (b.width, b.height, b.channels), "psnr shape mismatch");
    let c = a.channels;
    let mut se = 0.0;
    let mut count = 0usize;
    for p in 0..a.width * a.height {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for ch in 0..c {
            let d = a.data[p * c + ch] - b.data[p * c + ch];
            se += d * d;
        }
        count += c;
    }
    if count == 0 {
        return f64::NAN;
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Writes a single-channel little-endian PFM (`Pf`, scale `-1.0`, rows bottom to top).
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(width * height * 4);
    for y in (0..height).rev() {
        for &v in &values[y * width..(y + 1) * width] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a single-channel PFM written by [`write_pfm`] (either endianness).
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_string());
    }
    pos += 1; // single whitespace byte after the scale
    if fields[0] != "Pf" {
        return Err(bad("only single-channel 'Pf' files are supported"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != width * height * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", width * height * 4, body.len())));
    }
    let mut values = vec![0.0; width * height];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (height - 1 - i / width, i % width);
        values[row * width + col] = v as f64;
    }
    Ok((width, height, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let img = Image::new(3, 2, 3, (0..18).map(|v| v as f64).collect()).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert_eq!(t.at(&[0, 2, 1, 0]), img.at(0, 1, 2));
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn pfm_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let vals: Vec<f64> = (0..12).map(|v| 0.5 + v as f64).collect();
        write_pfm(&p, 4, 3, &vals).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        // First stored row is the bottom image row.
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8.5);
        assert_eq!(read_pfm(&p).unwrap(), (4, 3, vals));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Image::new(5, 4, 3, (0..60).map(|v| (v as f64 * 0.0173) % 1.0).collect()).unwrap();
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = Image::filled(4, 4, 1, 0.3);
        assert_eq!(psnr(&a, &a, None), f64::INFINITY);
        let b = Image::filled(4, 4, 1, 0.4);
        assert!((psnr(&a, &b, None) - 20.0).abs() < 1e-9);
    }
}
