//! Radial patch partition, per-patch sample points, bilinear tokenization
//! and the fixed k-NN projection from sample points back to pixels.
//!
//! Pixel centers sit at integer coordinates; the image circle is centered at
//! `((W - 1) / 2, (H - 1) / 2)` with radius `min(H, W) / 2`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::Raster;
use crate::lens::LensModel;
use crate::sampling::{self, RadialProfile};

/// Patch and sample counts plus the image size the grid is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub n_r: usize,
    pub n_phi: usize,
    pub s_r: usize,
    pub s_phi: usize,
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn samples_per_patch(&self) -> usize {
        self.s_r * self.s_phi
    }

    pub fn patch_count(&self) -> usize {
        self.n_r * self.n_phi
    }

    pub fn sample_count(&self) -> usize {
        self.patch_count() * self.samples_per_patch()
    }

    fn validate(&self) -> Result<()> {
        if self.n_r == 0 || self.n_phi == 0 || self.s_r == 0 || self.s_phi == 0 {
            return Err(Error::InvalidDimension(format!(
                "patch and sample counts must be >= 1: {self:?}"
            )));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidDimension(format!(
                "image must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Geometry of a radial tokenization for one lens.
#[derive(Debug, Clone)]
pub struct PolarGrid {
    pub spec: GridSpec,
    pub lens: LensModel,
    pub profile: RadialProfile,
    pub center: (f64, f64),
    /// Pixel radius of the unit normalized radius.
    pub radius_px: f64,
    /// `(theta, r)` patch boundaries, `n_r + 1` entries.
    pub radial_bounds: Vec<(f64, f64)>,
    /// Azimuth patch boundaries, `n_phi + 1` entries.
    pub azimuth_bounds: Vec<f64>,
    /// Normalized `(r, phi)` per sample, ordered `[n_r][n_phi][s_r][s_phi]`.
    pub polar: Vec<(f64, f64)>,
    /// Pixel `(x, y)` per sample, same order as `polar`.
    pub points: Vec<(f64, f64)>,
}

impl PolarGrid {
    pub fn build(lens: LensModel, profile: RadialProfile, spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let radial_bounds = sampling::radial_nodes(&lens, &profile, spec.n_r)?;
        let azimuth_bounds = sampling::azimuth_nodes(spec.n_phi)?;
        let top = profile.upper_value();
        let du = top / spec.n_r as f64;

        // Sub-node radii depend only on the radial patch.
        let mut sub_r = Vec::with_capacity(spec.n_r * spec.s_r);
        for i in 0..spec.n_r {
            for k in 0..spec.s_r {
                let u = du * (i as f64 + (k as f64 + 0.5) / spec.s_r as f64);
                sub_r.push(lens.project(profile.inverse(u))?);
            }
        }

        let center = (
            (spec.width - 1) as f64 / 2.0,
            (spec.height - 1) as f64 / 2.0,
        );
        let radius_px = spec.height.min(spec.width) as f64 / 2.0;
        let dphi = std::f64::consts::TAU / spec.n_phi as f64;

        let mut polar = Vec::with_capacity(spec.sample_count());
        let mut points = Vec::with_capacity(spec.sample_count());
        for i in 0..spec.n_r {
            for j in 0..spec.n_phi {
                for k in 0..spec.s_r {
                    let r = sub_r[i * spec.s_r + k];
                    for l in 0..spec.s_phi {
                        let phi = dphi * (j as f64 + (l as f64 + 0.5) / spec.s_phi as f64);
                        polar.push((r, phi));
                        let rho = r * radius_px;
                        points.push((center.0 + rho * phi.cos(), center.1 + rho * phi.sin()));
                    }
                }
            }
        }

        Ok(Self {
            spec,
            lens,
            profile,
            center,
            radius_px,
            radial_bounds,
            azimuth_bounds,
            polar,
            points,
        })
    }

    /// Sample identifier of `(patch_r, patch_phi, k_r, k_phi)`.
    pub fn sample_id(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let s = &self.spec;
        ((i * s.n_phi + j) * s.s_r + k) * s.s_phi + l
    }

    /// Patch `(i, j)` owning a sample identifier.
    pub fn patch_of(&self, sample: usize) -> (usize, usize) {
        let p = sample / self.spec.samples_per_patch();
        (p / self.spec.n_phi, p % self.spec.n_phi)
    }

    /// Whether the pixel center `(x, y)` lies inside the image circle.
    pub fn pixel_valid(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.center.0;
        let dy = y as f64 - self.center.1;
        dx * dx + dy * dy <= self.radius_px * self.radius_px
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        let (h, w) = (self.spec.height, self.spec.width);
        (0..h * w).map(|p| self.pixel_valid(p % w, p / w)).collect()
    }

    /// Bilinear samples arranged `[n_r, n_phi, s_r * s_phi * C]`.
    pub fn sample(&self, image: &Raster) -> Result<Vec<f64>> {
        if image.height != self.spec.height || image.width != self.spec.width {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs grid {}x{}",
                image.height, image.width, self.spec.height, self.spec.width
            )));
        }
        let c = image.channels;
        let mut out = vec![0.0; self.points.len() * c];
        out.par_chunks_mut(c.max(1) * self.spec.samples_per_patch())
            .enumerate()
            .for_each(|(patch, chunk)| {
                let base = patch * self.spec.samples_per_patch();
                for (s, o) in chunk.chunks_mut(c).enumerate() {
                    let (x, y) = self.points[base + s];
                    image.bilinear(x, y, o);
                }
            });
        Ok(out)
    }
}

/// Fixed k-nearest-sample table for every pixel of a grid's image.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub sample_count: usize,
    pub valid: Vec<bool>,
    /// `height * width * k` sample identifiers; invalid pixels hold zeros.
    pub neighbors: Vec<u32>,
}

impl KnnIndex {
    pub fn build(grid: &PolarGrid, k: usize) -> Result<Self> {
        let n = grid.points.len();
        if k == 0 || n < k {
            return Err(Error::InsufficientSamples {
                needed: k.max(1),
                available: n,
            });
        }
        let (h, w) = (grid.spec.height, grid.spec.width);
        let buckets = Buckets::new(&grid.points, w, h);
        let valid = grid.valid_mask();
        let mut neighbors = vec![0u32; h * w * k];
        neighbors
            .par_chunks_mut(k)
            .enumerate()
            .for_each(|(p, slot)| {
                if !valid[p] {
                    return;
                }
                let (px, py) = ((p % w) as f64, (p / w) as f64);
                let best = buckets.nearest(&grid.points, px, py, k);
                for (s, &(_, id)) in slot.iter_mut().zip(&best) {
                    *s = id as u32;
                }
            });
        Ok(Self {
            height: h,
            width: w,
            k,
            sample_count: n,
            valid,
            neighbors,
        })
    }

    pub fn neighbors_of(&self, pixel: usize) -> &[u32] {
        &self.neighbors[pixel * self.k..(pixel + 1) * self.k]
    }

    /// Averages the `k` neighbor features of every valid pixel; invalid pixels
    /// are zero. `features` holds `sample_count * dim` values.
    pub fn project(&self, features: &[f64], dim: usize) -> Result<Raster> {
        if dim == 0 || features.len() != self.sample_count * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                self.sample_count
            )));
        }
        let mut out = Raster::new(self.height, self.width, dim);
        let inv_k = 1.0 / self.k as f64;
        out.data
            .par_chunks_mut(dim)
            .enumerate()
            .for_each(|(p, o)| {
                if !self.valid[p] {
                    return;
                }
                for &id in self.neighbors_of(p) {
                    let f = &features[id as usize * dim..(id as usize + 1) * dim];
                    for (a, b) in o.iter_mut().zip(f) {
                        *a += b;
                    }
                }
                for a in o.iter_mut() {
                    *a *= inv_k;
                }
            });
        Ok(out)
    }
}

/// Samples binned by the pixel cell that contains them.
struct Buckets {
    width: usize,
    height: usize,
    cells: Vec<Vec<u32>>,
}

impl Buckets {
    fn new(points: &[(f64, f64)], width: usize, height: usize) -> Self {
        let mut cells = vec![Vec::new(); width * height];
        for (id, &(x, y)) in points.iter().enumerate() {
            let cx = Self::cell(x, width);
            let cy = Self::cell(y, height);
            cells[cy * width + cx].push(id as u32);
        }
        Self {
            width,
            height,
            cells,
        }
    }

    fn cell(v: f64, n: usize) -> usize {
        let c = (v + 0.5).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(n - 1)
        }
    }

    /// `k` nearest `(squared distance, id)` pairs, ordered by distance then id.
    fn nearest(&self, points: &[(f64, f64)], px: f64, py: f64, k: usize) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let cx = Self::cell(px, self.width) as isize;
        let cy = Self::cell(py, self.height) as isize;
        let max_ring = self.width.max(self.height) as isize;
        let push = |d2: f64, id: usize, best: &mut Vec<(f64, usize)>| {
            if best.len() == k {
                let last = best[k - 1];
                if (d2, id) >= last {
                    return;
                }
            }
            let pos = best
                .binary_search_by(|e| e.0.total_cmp(&d2).then(e.1.cmp(&id)))
                .unwrap_or_else(|e| e);
            best.insert(pos, (d2, id));
            best.truncate(k);
        };
        for ring in 0..=max_ring {
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
                        continue;
                    }
                    for &id in &self.cells[y as usize * self.width + x as usize] {
                        let (sx, sy) = points[id as usize];
                        let d2 = (sx - px) * (sx - px) + (sy - py) * (sy - py);
                        push(d2, id as usize, &mut best);
                    }
                }
            }
            // Anything not yet visited is farther than ring + 0.5.
            if best.len() == k {
                let bound = ring as f64 + 0.5;
                if best[k - 1].0 < bound * bound {
                    break;
                }
            }
        }
        best
    }
}

/// Mean absolute reconstruction error of a scalar field pushed through
/// sampling and k-NN projection, over valid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundtripError {
    pub mae: f64,
    /// Max minus min of the field over valid pixels.
    pub range: f64,
    pub valid: usize,
}

impl RoundtripError {
    pub fn relative(&self) -> f64 {
        if self.range > 0.0 {
            self.mae / self.range
        } else {
            0.0
        }
    }
}

pub fn roundtrip_error(field: &Raster, grid: &PolarGrid, index: &KnnIndex) -> Result<RoundtripError> {
    if field.channels != 1 {
        return Err(Error::ShapeMismatch("roundtrip expects a scalar field".into()));
    }
    let samples = grid.sample(field)?;
    let recon = index.project(&samples, 1)?;
    roundtrip_against(field, &recon, &index.valid)
}

/// Same as [`roundtrip_error`] but only over pixels also set in `mask`.
pub fn roundtrip_error_masked(
    field: &Raster,
    mask: &[bool],
    grid: &PolarGrid,
    index: &KnnIndex,
) -> Result<RoundtripError> {
    let samples = grid.sample(field)?;
    let recon = index.project(&samples, 1)?;
    let both: Vec<bool> = index.valid.iter().zip(mask).map(|(a, b)| *a && *b).collect();
    roundtrip_against(field, &recon, &both)
}

fn roundtrip_against(field: &Raster, recon: &Raster, valid: &[bool]) -> Result<RoundtripError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (p, &v) in valid.iter().enumerate() {
        if v {
            let t = field.data[p];
            sum += (t - recon.data[p]).abs();
            lo = lo.min(t);
            hi = hi.max(t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no valid pixels".into()));
    }
    Ok(RoundtripError {
        mae: sum / n as f64,
        range: hi - lo,
        valid: n,
    })
}
