//! Dense raster type plus PNG / PFM readers and writers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major `height x width x channels` buffer of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Bilinear interpolation at continuous pixel coordinates (pixel centers
    /// at integers). Coordinates are clamped to the pixel-center box.
    pub fn bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let v00 = self.get(y0, x0, c);
            let v01 = self.get(y0, x1, c);
            let v10 = self.get(y1, x0, c);
            let v11 = self.get(y1, x1, c);
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            *o = top + (bot - top) * fy;
        }
    }
}

/// Writes a 1- or 3-channel raster with values in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, img: &Raster) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels {
        1 => {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
                    Luma([q(img.get(y as usize, x as usize, 0))])
                });
            buf.save(path)?;
        }
        3 => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
                    let p = img.pixel(y as usize, x as usize);
                    Rgb([q(p[0]), q(p[1]), q(p[2])])
                });
            buf.save(path)?;
        }
        c => {
            return Err(Error::Format(format!("cannot write {c}-channel PNG")));
        }
    }
    Ok(())
}

/// Reads a PNG as RGB in `[0, 1]`.
pub fn read_png_rgb(path: &Path) -> Result<Raster> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_fn(h as usize, w as usize, 3, |y, x, c| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes a depth map in meters as a 16-bit PNG of millimeters.
pub fn write_depth_png_mm(path: &Path, depth: &Raster) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            let mm = (depth.get(y as usize, x as usize, 0) * 1000.0).round();
            Luma([mm.clamp(0.0, u16::MAX as f64) as u16])
        });
    buf.save(path)?;
    Ok(())
}

pub fn read_depth_png_mm(path: &Path) -> Result<Raster> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Raster::from_fn(h as usize, w as usize, 1, |y, x, _| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 1000.0
    }))
}

/// Writes a single-channel little-endian PFM (`Pf`, bottom-to-top rows).
pub fn write_pfm(path: &Path, img: &Raster) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Format("PFM writer expects one channel".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            w.write_all(&(img.get(y, x, 0) as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a one- or three-channel PFM; a three-channel file keeps its first
/// channel.
pub fn read_pfm(path: &Path) -> Result<Raster> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        header.clear();
        if r.read_line(&mut header)? == 0 {
            return Err(Error::Format("truncated PFM header".into()));
        }
        tokens.extend(header.split_whitespace().map(str::to_owned));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Format(format!("bad PFM magic '{t}'"))),
    };
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad PFM header token '{s}'")))
    };
    let width = parse(&tokens[1])? as usize;
    let height = parse(&tokens[2])? as usize;
    let scale = parse(&tokens[3])?;
    let little = scale < 0.0;
    let mut bytes = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut bytes)?;
    let mut out = Raster::new(height, width, 1);
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            let o = ((row * width + x) * channels) * 4;
            let b = [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            out.set(y, x, 0, v as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_affine() {
        let img = Raster::from_fn(6, 7, 1, |y, x, _| 2.0 * x as f64 - 0.5 * y as f64 + 1.0);
        let mut o = [0.0];
        for &(x, y) in &[(0.3, 0.2), (5.9, 4.99), (3.0, 2.5)] {
            img.bilinear(x, y, &mut o);
            assert!((o[0] - (2.0 * x - 0.5 * y + 1.0)).abs() < 1e-12);
        }
        // clamps outside the pixel-center box
        img.bilinear(-0.4, 7.0, &mut o);
        assert!((o[0] - (0.0 - 0.5 * 5.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn pfm_and_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Raster::from_fn(5, 4, 1, |y, x, _| 0.5 + 0.25 * (y * 4 + x) as f64);
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &d).unwrap();
        let back = read_pfm(&p).unwrap();
        for (a, b) in d.data.iter().zip(&back.data) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let p = dir.path().join("d.png");
        write_depth_png_mm(&p, &d).unwrap();
        let back = read_depth_png_mm(&p).unwrap();
        for (a, b) in d.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.0005);
        }
        let rgb = Raster::from_fn(3, 3, 3, |y, x, c| ((y + x + c) % 4) as f64 / 3.0);
        let p = dir.path().join("c.png");
        write_png(&p, &rgb).unwrap();
        let back = read_png_rgb(&p).unwrap();
        for (a, b) in rgb.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
