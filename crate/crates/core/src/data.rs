//! Panoramas, fisheye RGB-D synthesis, distortion groups, manifests and the
//! cubemap undistortion baseline.
//!
//! Camera frame: x right, y up, z along the optical axis. An equirectangular
//! panorama has row 0 at latitude +90° and column 0 at longitude −180°;
//! longitude 0 looks along +z. Depth is ray length.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, Raster};
use crate::lens::LensModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub rgb: Raster,
    /// Ray length in meters; 0 marks invalid.
    pub depth: Raster,
}

impl Panorama {
    pub fn new(rgb: Raster, depth: Raster) -> Result<Self> {
        if rgb.channels != 3 || depth.channels != 1 {
            return Err(Error::InvalidDimension("panorama needs RGB plus one depth channel".into()));
        }
        if rgb.height != depth.height || rgb.width != depth.width {
            return Err(Error::ShapeMismatch(format!(
                "rgb {}x{} vs depth {}x{}",
                rgb.height, rgb.width, depth.height, depth.width
            )));
        }
        if rgb.height < 2 || rgb.width != 2 * rgb.height {
            return Err(Error::InvalidDimension(format!(
                "equirectangular panorama must be 2:1, got {}x{}",
                rgb.width, rgb.height
            )));
        }
        Ok(Self { rgb, depth })
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    /// Continuous pixel coordinates of a direction.
    fn coords(&self, lon: f64, lat: f64) -> (f64, f64) {
        let w = self.width() as f64;
        let h = self.height() as f64;
        ((lon + PI) / TAU * w - 0.5, (FRAC_PI_2 - lat) / PI * h - 0.5)
    }

    /// Bilinear RGB lookup, wrapping in longitude and clamping in latitude.
    pub fn sample_rgb(&self, lon: f64, lat: f64, out: &mut [f64]) {
        let (u, v) = self.coords(lon, lat);
        let (w, h) = (self.width() as i64, self.height() as i64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let u0 = u.floor();
        let v0 = v.floor();
        let (fu, fv) = (u - u0, v - v0);
        let x0 = (u0 as i64).rem_euclid(w) as usize;
        let x1 = (u0 as i64 + 1).rem_euclid(w) as usize;
        let y0 = v0 as usize;
        let y1 = (y0 + 1).min(h as usize - 1);
        for (c, o) in out.iter_mut().enumerate().take(3) {
            let a = self.rgb.get(y0, x0, c);
            let b = self.rgb.get(y0, x1, c);
            let cc = self.rgb.get(y1, x0, c);
            let d = self.rgb.get(y1, x1, c);
            let top = a + (b - a) * fu;
            let bot = cc + (d - cc) * fu;
            *o = top + (bot - top) * fv;
        }
    }

    /// Nearest-pixel depth lookup.
    pub fn sample_depth(&self, lon: f64, lat: f64) -> f64 {
        let (u, v) = self.coords(lon, lat);
        let x = ((u + 0.5).floor() as i64).rem_euclid(self.width() as i64) as usize;
        let y = ((v + 0.5).floor().max(0.0) as usize).min(self.height() - 1);
        self.depth.get(y, x, 0)
    }

    pub fn load(rgb: &Path, depth: &Path, format: DepthFormat) -> Result<Self> {
        let rgb = imageio::read_png_rgb(rgb)?;
        let depth = match format {
            DepthFormat::Pfm => imageio::read_pfm(depth)?,
            DepthFormat::PngMm => imageio::read_depth_png_mm(depth)?,
        };
        Self::new(rgb, depth)
    }

    pub fn save(&self, rgb: &Path, depth: &Path, format: DepthFormat) -> Result<()> {
        imageio::write_png(rgb, &self.rgb)?;
        match format {
            DepthFormat::Pfm => imageio::write_pfm(depth, &self.depth),
            DepthFormat::PngMm => imageio::write_depth_png_mm(depth, &self.depth),
        }
    }
}

/// Longitude / latitude of a panorama pixel center.
pub fn pano_angles(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    let lon = -PI + (col as f64 + 0.5) * TAU / width as f64;
    let lat = FRAC_PI_2 - (row as f64 + 0.5) * PI / height as f64;
    (lon, lat)
}

pub fn direction(lon: f64, lat: f64) -> [f64; 3] {
    [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
}

pub fn angles_of(d: [f64; 3]) -> (f64, f64) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    (d[0].atan2(d[2]), (d[1] / n).clamp(-1.0, 1.0).asin())
}

fn rotate_yaw(d: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [d[0] * c + d[2] * s, d[1], -d[0] * s + d[2] * c]
}

/// Panorama seen from a camera turned by `delta`: `out(lon) = pano(lon + delta)`.
pub fn rotate_pano(pano: &Panorama, delta: f64) -> Panorama {
    let (h, w) = (pano.height(), pano.width());
    let mut rgb = Raster::new(h, w, 3);
    let mut depth = Raster::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let (lon, lat) = pano_angles(y, x, h, w);
            let i = rgb.idx(y, x, 0);
            pano.sample_rgb(lon + delta, lat, &mut rgb.data[i..i + 3]);
            depth.set(y, x, 0, pano.sample_depth(lon + delta, lat));
        }
    }
    Panorama { rgb, depth }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSample {
    pub rgb: Raster,
    pub depth: Raster,
    pub mask: Vec<bool>,
    pub lens: LensModel,
    pub yaw: f64,
}

/// Geometry shared by the fisheye image and its pixel rays.
struct FisheyeFrame {
    cx: f64,
    cy: f64,
    radius_px: f64,
}

impl FisheyeFrame {
    fn new(height: usize, width: usize) -> Self {
        Self {
            cx: (width - 1) as f64 / 2.0,
            cy: (height - 1) as f64 / 2.0,
            radius_px: height.min(width) as f64 / 2.0,
        }
    }

    /// Camera-frame ray through pixel `(x, y)`, or `None` outside the circle.
    fn ray(&self, lens: &LensModel, x: usize, y: usize) -> Result<Option<[f64; 3]>> {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        let r = (dx * dx + dy * dy).sqrt() / self.radius_px;
        if r > 1.0 {
            return Ok(None);
        }
        let theta = lens.unproject(r)?;
        let phi = dy.atan2(dx);
        let (st, ct) = theta.sin_cos();
        Ok(Some([st * phi.cos(), -st * phi.sin(), ct]))
    }

    /// Pixel position of a camera-frame ray, or `None` beyond the lens FOV.
    fn project(&self, lens: &LensModel, d: [f64; 3]) -> Option<(f64, f64)> {
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let theta = (d[2] / n).clamp(-1.0, 1.0).acos();
        if theta > lens.max_theta() {
            return None;
        }
        let rho = lens.project(theta).ok()? * self.radius_px;
        let phi = (-d[1]).atan2(d[0]);
        Some((self.cx + rho * phi.cos(), self.cy + rho * phi.sin()))
    }
}

/// Renders the fisheye RGB-D view of a panorama for a camera with the given
/// yaw. RGB is bilinear, depth nearest-neighbor.
type FisheyeRow = (Vec<f64>, Vec<f64>, Vec<bool>);

pub fn warp_to_fisheye(pano: &Panorama, lens: &LensModel, yaw: f64, out_size: usize) -> Result<DepthSample> {
    if out_size < 8 {
        return Err(Error::InvalidDimension(format!("output size {out_size} below 8")));
    }
    let frame = FisheyeFrame::new(out_size, out_size);
    let rows: Vec<Result<FisheyeRow>> = (0..out_size)
        .into_par_iter()
        .map(|y| {
            let mut rgb = vec![0.0; out_size * 3];
            let mut depth = vec![0.0; out_size];
            let mut mask = vec![false; out_size];
            for x in 0..out_size {
                let Some(ray) = frame.ray(lens, x, y)? else {
                    continue;
                };
                let (lon, lat) = angles_of(rotate_yaw(ray, yaw));
                pano.sample_rgb(lon, lat, &mut rgb[x * 3..x * 3 + 3]);
                let d = pano.sample_depth(lon, lat);
                depth[x] = d;
                mask[x] = d > 0.0;
            }
            Ok((rgb, depth, mask))
        })
        .collect();
    let mut rgb = Vec::with_capacity(out_size * out_size * 3);
    let mut depth = Vec::with_capacity(out_size * out_size);
    let mut mask = Vec::with_capacity(out_size * out_size);
    for row in rows {
        let (r, d, m) = row?;
        rgb.extend(r);
        depth.extend(d);
        mask.extend(m);
    }
    Ok(DepthSample {
        rgb: Raster::from_vec(out_size, out_size, 3, rgb)?,
        depth: Raster::from_vec(out_size, out_size, 1, depth)?,
        mask,
        lens: *lens,
        yaw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cubemap {
    pub image: Raster,
    pub valid: Vec<bool>,
    pub face_size: usize,
    /// Top-left corner of the crop inside the full 4x3 cross.
    pub offset: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    Front,
    Right,
    Back,
    Left,
    Up,
    Down,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::Front, Face::Right, Face::Back, Face::Left, Face::Up, Face::Down];

    /// Ray for face coordinates `a, b` in `[-1, 1]` (`a` right, `b` down).
    pub fn ray(self, a: f64, b: f64) -> [f64; 3] {
        match self {
            Face::Front => [a, -b, 1.0],
            Face::Right => [1.0, -b, -a],
            Face::Back => [-a, -b, -1.0],
            Face::Left => [-1.0, -b, a],
            Face::Up => [a, 1.0, b],
            Face::Down => [a, -1.0, -b],
        }
    }

    /// Cell in the 4-wide, 3-tall cross layout as `(column, row)`.
    pub fn cell(self) -> (usize, usize) {
        match self {
            Face::Left => (0, 1),
            Face::Front => (1, 1),
            Face::Right => (2, 1),
            Face::Back => (3, 1),
            Face::Up => (1, 0),
            Face::Down => (1, 2),
        }
    }
}

/// Renders one 90° perspective face from a fisheye image.
pub fn render_face(sample: &DepthSample, face: Face, face_size: usize) -> (Raster, Vec<bool>) {
    let frame = FisheyeFrame::new(sample.rgb.height, sample.rgb.width);
    let mut img = Raster::new(face_size, face_size, 3);
    let mut valid = vec![false; face_size * face_size];
    let f = face_size as f64;
    for v in 0..face_size {
        for u in 0..face_size {
            let a = 2.0 * (u as f64 + 0.5) / f - 1.0;
            let b = 2.0 * (v as f64 + 0.5) / f - 1.0;
            if let Some((x, y)) = frame.project(&sample.lens, face.ray(a, b)) {
                let i = img.idx(v, u, 0);
                sample.rgb.bilinear(x, y, &mut img.data[i..i + 3]);
                valid[v * face_size + u] = true;
            }
        }
    }
    (img, valid)
}

/// Six perspective faces unrolled into a cross and cropped to the valid box.
pub fn undistort_cubemap(sample: &DepthSample, face_size: usize) -> Result<Cubemap> {
    if face_size == 0 {
        return Err(Error::InvalidDimension("face size must be positive".into()));
    }
    let (fw, fh) = (4 * face_size, 3 * face_size);
    let mut full = Raster::new(fh, fw, 3);
    let mut valid = vec![false; fw * fh];
    for face in Face::ALL {
        let (img, ok) = render_face(sample, face, face_size);
        let (cx, cy) = face.cell();
        for v in 0..face_size {
            for u in 0..face_size {
                if !ok[v * face_size + u] {
                    continue;
                }
                let (x, y) = (cx * face_size + u, cy * face_size + v);
                for c in 0..3 {
                    full.set(y, x, c, img.get(v, u, c));
                }
                valid[y * fw + x] = true;
            }
        }
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..fh {
        for x in 0..fw {
            if valid[y * fw + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::Empty("no valid cubemap pixel".into()));
    }
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let image = Raster::from_fn(ch, cw, 3, |y, x, c| full.get(y + y0, x + x0, c));
    let valid = (0..ch * cw).map(|p| valid[(p / cw + y0) * fw + p % cw + x0]).collect();
    Ok(Cubemap {
        image,
        valid,
        face_size,
        offset: (x0, y0),
    })
}

/// Axis-aligned room `[0, size]` with a camera inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub size: [f64; 3],
    pub camera: [f64; 3],
    pub seed: u64,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.camera[i] > 0.0 && self.camera[i] < self.size[i]) {
                return Err(Error::InvalidValue(format!(
                    "camera {:?} not strictly inside box {:?}",
                    self.camera, self.size
                )));
            }
        }
        Ok(())
    }

    /// Random room from a seed: sides 2 to 8 m, camera away from the walls.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = [
            rng.random_range(3.0..8.0),
            rng.random_range(2.4..3.5),
            rng.random_range(3.0..8.0),
        ];
        let camera = [
            size[0] * rng.random_range(0.3..0.7),
            rng.random_range(1.2..1.8),
            size[2] * rng.random_range(0.3..0.7),
        ];
        Self { size, camera, seed }
    }

    /// Distance to the first wall along a direction, and the axis it hits.
    pub fn ray_hit(&self, d: [f64; 3]) -> (f64, usize, bool) {
        let mut best = (f64::INFINITY, 0, false);
        for (i, &di) in d.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            let positive = di > 0.0;
            let wall = if positive { self.size[i] } else { 0.0 };
            let t = (wall - self.camera[i]) / di;
            if t < best.0 {
                best = (t, i, positive);
            }
        }
        best
    }
}

const LAMP_GAIN: f64 = 1.5;

struct WallTexture {
    base: [f64; 3],
    freq: [f64; 2],
    phase: [f64; 2],
}

/// Procedural room panorama with exact ray-length depth. Walls carry a
/// seeded color pattern under a light placed at the camera.
pub fn synth_panorama(room: &RoomSpec, height: usize) -> Result<Panorama> {
    room.validate()?;
    if height < 2 {
        return Err(Error::InvalidDimension("panorama height below 2".into()));
    }
    let width = 2 * height;
    let mut rng = ChaCha8Rng::seed_from_u64(room.seed);
    let textures: Vec<WallTexture> = (0..6)
        .map(|_| WallTexture {
            base: [
                rng.random_range(0.85..1.0),
                rng.random_range(0.85..1.0),
                rng.random_range(0.85..1.0),
            ],
            freq: [rng.random_range(1.0..4.0), rng.random_range(1.0..4.0)],
            phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
        })
        .collect();
    let mut rgb = Raster::new(height, width, 3);
    let mut depth = Raster::new(height, width, 1);
    for y in 0..height {
        for x in 0..width {
            let (lon, lat) = pano_angles(y, x, height, width);
            let d = direction(lon, lat);
            let (t, axis, positive) = room.ray_hit(d);
            depth.set(y, x, 0, t);
            let hit: Vec<f64> = (0..3).map(|i| room.camera[i] + t * d[i]).collect();
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let tex = &textures[axis * 2 + positive as usize];
            let pattern = 0.5
                + 0.25 * (tex.freq[0] * hit[u] + tex.phase[0]).sin()
                + 0.25 * (tex.freq[1] * hit[v] + tex.phase[1]).sin();
            // lit by a point source at the camera with inverse-square falloff
            let shade = LAMP_GAIN / (t * t);
            for c in 0..3 {
                rgb.set(y, x, c, (tex.base[c] * (0.9 + 0.1 * pattern) * shade).clamp(0.0, 1.0));
            }
        }
    }
    Panorama::new(rgb, depth)
}

/// Sum of low-frequency sinusoids on an `h x w` grid, roughly in `[-1, 1]`.
pub fn smooth_field(height: usize, width: usize, seed: u64, terms: usize) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..terms)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum::<f64>().max(1e-12);
    Raster::from_fn(height, width, 1, |y, x, _| {
        let u = x as f64 / width as f64;
        let v = y as f64 / height as f64;
        waves
            .iter()
            .map(|&(fx, fy, p, a)| a * (TAU * (fx * u + fy * v) + p).sin())
            .sum::<f64>()
            / norm
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionGroup {
    VeryLow,
    Low,
    Medium,
    High,
}

impl DistortionGroup {
    pub const ALL: [DistortionGroup; 4] = [Self::VeryLow, Self::Low, Self::Medium, Self::High];

    pub fn xi_range(self) -> (f64, f64) {
        match self {
            Self::VeryLow => (0.0, 0.05),
            Self::Low => (0.2, 0.35),
            Self::Medium => (0.5, 0.7),
            Self::High => (0.85, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::VeryLow => "very_low",
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown distortion group '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFormat {
    Pfm,
    PngMm,
}

/// Where one panorama lives on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoRef {
    pub pano_path: PathBuf,
    pub depth_path: PathBuf,
    pub depth_format: DepthFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pano_path: PathBuf,
    pub depth_path: PathBuf,
    pub depth_format: DepthFormat,
    pub xi: f64,
    pub yaw_rad: f64,
    pub fov_deg: f64,
    pub out_size: usize,
}

impl ManifestRecord {
    fn new(p: &PanoRef, xi: f64, yaw_rad: f64, fov_deg: f64, out_size: usize) -> Self {
        Self {
            pano_path: p.pano_path.clone(),
            depth_path: p.depth_path.clone(),
            depth_format: p.depth_format,
            xi,
            yaw_rad,
            fov_deg,
            out_size,
        }
    }

    pub fn lens(&self) -> Result<LensModel> {
        LensModel::from_degrees(self.xi, self.fov_deg)
    }
}

/// Training manifest: panoramas cycled in order, `xi` and yaw drawn per sample.
pub fn make_split(
    panos: &[PanoRef],
    group: DistortionGroup,
    seed: u64,
    count: usize,
    fov_deg: f64,
    out_size: usize,
) -> Result<Vec<ManifestRecord>> {
    if panos.is_empty() {
        return Err(Error::Empty("no panoramas for split".into()));
    }
    let (lo, hi) = group.xi_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let xi = rng.random_range(lo..=hi);
            let yaw = rng.random_range(0.0..TAU);
            ManifestRecord::new(&panos[i % panos.len()], xi, yaw, fov_deg, out_size)
        })
        .collect())
}

/// The 20 fixed-distortion test values: `0.00..=0.95`, or `0.05..=1.00` when
/// `include_one` is set.
pub fn test_xis(include_one: bool) -> Vec<f64> {
    let off = include_one as usize;
    (0..20).map(|i| (i + off) as f64 * 0.05).collect()
}

/// One manifest per test distortion value, each covering every panorama.
pub fn make_test_suite(
    panos: &[PanoRef],
    include_one: bool,
    seed: u64,
    fov_deg: f64,
    out_size: usize,
) -> Result<Vec<(f64, Vec<ManifestRecord>)>> {
    if panos.is_empty() {
        return Err(Error::Empty("no panoramas for test suite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaws: Vec<f64> = panos.iter().map(|_| rng.random_range(0.0..TAU)).collect();
    Ok(test_xis(include_one)
        .into_iter()
        .map(|xi| {
            let recs = panos
                .iter()
                .zip(&yaws)
                .map(|(p, &yaw)| ManifestRecord::new(p, xi, yaw, fov_deg, out_size))
                .collect();
            (xi, recs)
        })
        .collect())
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON lines; relative paths resolve against the manifest directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if r.pano_path.is_relative() {
            r.pano_path = base.join(&r.pano_path);
        }
        if r.depth_path.is_relative() {
            r.depth_path = base.join(&r.depth_path);
        }
        out.push(r);
    }
    Ok(out)
}

/// Loads manifest samples, reading each panorama once.
pub fn load_samples(records: &[ManifestRecord]) -> Result<Vec<DepthSample>> {
    let mut cache: HashMap<PathBuf, Panorama> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !cache.contains_key(&r.pano_path) {
            let p = Panorama::load(&r.pano_path, &r.depth_path, r.depth_format)?;
            cache.insert(r.pano_path.clone(), p);
        }
        out.push(warp_to_fisheye(&cache[&r.pano_path], &r.lens()?, r.yaw_rad, r.out_size)?);
    }
    Ok(out)
}
