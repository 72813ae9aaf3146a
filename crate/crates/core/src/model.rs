//! Polar Swin-style encoder-decoder for per-pixel log-depth.
//!
//! Tokens live on the `[n_r, n_phi]` polar patch grid. Stages attend inside
//! `w_r x w_phi` windows, alternating plain and half-window azimuth shifts;
//! encoder stages end with a 4-to-1 azimuth merge, decoder stages start with
//! the matching 1-to-4 expand and a skip fusion. The lens only enters through
//! the sample grid and k-NN table, so parameter shapes never depend on it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Raster;
use crate::lens::LensModel;
use crate::polar_grid::{GridSpec, KnnIndex, PolarGrid};
use crate::sampling::{GFunction, RadialProfile};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
pub const MERGE_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_r: usize,
    pub n_phi: usize,
    pub embed_dim: usize,
    /// Blocks per stage; the last stage is the bottleneck, every earlier one
    /// is mirrored by a decoder stage.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// `[w_r, w_phi]`, clamped to each stage's token grid.
    pub window: [usize; 2],
    pub mlp_ratio: usize,
    pub head_out: usize,
    pub s_r: usize,
    pub s_phi: usize,
    pub image_size: usize,
    pub knn_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_r: 16,
            n_phi: 64,
            embed_dim: 8,
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8],
            window: [4, 4],
            mlp_ratio: 4,
            head_out: 1,
            s_r: 4,
            s_phi: 25,
            image_size: 64,
            knn_k: 4,
        }
    }
}

/// Token grid, width and window of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeom {
    pub r: usize,
    pub phi: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: [usize; 2],
}

impl StageGeom {
    /// Shifted blocks only make sense when a stage holds several windows
    /// along azimuth.
    pub fn shift(&self) -> usize {
        if self.window[1] < self.phi {
            self.window[1] / 2
        } else {
            0
        }
    }
}

impl ModelConfig {
    pub fn stage_count(&self) -> usize {
        self.depths.len()
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            n_r: self.n_r,
            n_phi: self.n_phi,
            s_r: self.s_r,
            s_phi: self.s_phi,
            height: self.image_size,
            width: self.image_size,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.s_r * self.s_phi * 3
    }

    pub fn stage(&self, i: usize) -> StageGeom {
        let phi = self.n_phi / MERGE_FACTOR.pow(i as u32);
        StageGeom {
            r: self.n_r,
            phi,
            dim: self.embed_dim << i,
            heads: self.heads[i],
            window: [self.window[0].min(self.n_r), self.window[1].min(phi)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDimension(m));
        if self.depths.is_empty() || self.heads.len() != self.depths.len() {
            return bad(format!(
                "{} stage depths with {} head counts",
                self.depths.len(),
                self.heads.len()
            ));
        }
        if [self.n_r, self.n_phi, self.embed_dim, self.mlp_ratio, self.head_out]
            .contains(&0)
            || [self.s_r, self.s_phi, self.image_size, self.knn_k, self.window[0], self.window[1]]
                .contains(&0)
        {
            return bad("all sizes must be positive".into());
        }
        let merges = MERGE_FACTOR.pow(self.stage_count() as u32 - 1);
        if !self.n_phi.is_multiple_of(merges) {
            return bad(format!(
                "n_phi {} not divisible by {merges} for {} stages",
                self.n_phi,
                self.stage_count()
            ));
        }
        for i in 0..self.stage_count() {
            let s = self.stage(i);
            if !s.r.is_multiple_of(s.window[0]) || !s.phi.is_multiple_of(s.window[1]) {
                return bad(format!(
                    "stage {i} grid {}x{} not divisible by window {:?}",
                    s.r, s.phi, s.window
                ));
            }
            if s.heads == 0 || !s.dim.is_multiple_of(s.heads) {
                return bad(format!("stage {i} dim {} not divisible by {} heads", s.dim, s.heads));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, p: &str, din: usize, dout: usize) {
    out.push(spec(format!("{p}.w"), &[din, dout], Init::Normal));
    out.push(spec(format!("{p}.b"), &[dout], Init::Zeros));
}

fn norm_specs(out: &mut Vec<ParamSpec>, p: &str, d: usize) {
    out.push(spec(format!("{p}.g"), &[d], Init::Ones));
    out.push(spec(format!("{p}.b"), &[d], Init::Zeros));
}

pub fn attention_specs(out: &mut Vec<ParamSpec>, p: &str, d: usize, heads: usize, window: [usize; 2]) {
    linear_specs(out, &format!("{p}.qkv"), d, 3 * d);
    linear_specs(out, &format!("{p}.proj"), d, d);
    let rel = (2 * window[0] - 1) * (2 * window[1] - 1);
    out.push(spec(format!("{p}.bias_table"), &[rel, heads], Init::Zeros));
}

fn block_specs(out: &mut Vec<ParamSpec>, p: &str, s: &StageGeom, mlp_ratio: usize) {
    norm_specs(out, &format!("{p}.ln1"), s.dim);
    attention_specs(out, &format!("{p}.attn"), s.dim, s.heads, s.window);
    norm_specs(out, &format!("{p}.ln2"), s.dim);
    linear_specs(out, &format!("{p}.fc1"), s.dim, mlp_ratio * s.dim);
    linear_specs(out, &format!("{p}.fc2"), mlp_ratio * s.dim, s.dim);
}

/// Every parameter of a configuration, in checkpoint order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    linear_specs(&mut out, "embed", cfg.input_dim(), cfg.embed_dim);
    norm_specs(&mut out, "embed.ln", cfg.embed_dim);
    let last = cfg.stage_count() - 1;
    for i in 0..=last {
        let s = cfg.stage(i);
        let name = if i == last { "bottleneck".to_string() } else { format!("enc{i}") };
        for b in 0..cfg.depths[i] {
            block_specs(&mut out, &format!("{name}.blk{b}"), &s, cfg.mlp_ratio);
        }
        if i < last {
            linear_specs(&mut out, &format!("{name}.merge"), MERGE_FACTOR * s.dim, 2 * s.dim);
            norm_specs(&mut out, &format!("{name}.merge.ln"), 2 * s.dim);
        }
    }
    for i in (0..last).rev() {
        let s = cfg.stage(i);
        let up = cfg.stage(i + 1).dim;
        linear_specs(&mut out, &format!("dec{i}.expand"), up, 2 * up);
        linear_specs(&mut out, &format!("dec{i}.fuse"), 2 * s.dim, s.dim);
        for b in 0..cfg.depths[i] {
            block_specs(&mut out, &format!("dec{i}.blk{b}"), &s, cfg.mlp_ratio);
        }
    }
    norm_specs(&mut out, "final_ln", cfg.embed_dim);
    linear_specs(&mut out, "head", cfg.embed_dim, cfg.head_out);
    out
}

/// Named parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl Params {
    /// Truncated-normal weights (cut at two deviations), zero biases and
    /// bias tables, unit norm gains.
    pub fn init(specs: Vec<ParamSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let values = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * INIT_STD {
                                break v;
                            }
                        })
                        .collect(),
                }
            })
            .collect();
        Self::from_values(specs, values)
    }

    pub fn from_values(specs: Vec<ParamSpec>, values: Vec<Vec<f64>>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in specs.iter().enumerate() {
            if index.insert(s.name.clone(), i).is_some() {
                return Err(Error::InvalidValue(format!("duplicate parameter '{}'", s.name)));
            }
            let n: usize = s.shape.iter().product();
            if values[i].len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "parameter '{}' has {} values for shape {:?}",
                    s.name,
                    values[i].len(),
                    s.shape
                )));
            }
        }
        Ok(Self { specs, values, index })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.values[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    /// Fresh graph leaves for one forward pass.
    pub fn bind(&self, track: bool) -> Bound {
        let tensors = self
            .specs
            .iter()
            .zip(&self.values)
            .map(|(s, v)| {
                let t = if track {
                    Tensor::param(&s.shape, v.clone())
                } else {
                    Tensor::new(&s.shape, v.clone())
                };
                t.expect("spec shapes match values")
            })
            .collect();
        Bound {
            tensors,
            index: self.index.clone(),
        }
    }
}

/// Parameters as graph leaves.
pub struct Bound {
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidValue(format!("missing parameter '{name}'")))
    }

    /// Gradients in parameter order; untouched parameters get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }
}

fn linear(b: &Bound, p: &str, x: &Tensor) -> Result<Tensor> {
    let w = b.get(&format!("{p}.w"))?;
    let bias = b.get(&format!("{p}.b"))?;
    let shape = x.shape();
    let din = *shape.last().unwrap_or(&0);
    if w.shape()[0] != din {
        return Err(Error::ShapeMismatch(format!(
            "linear '{p}': input {shape:?} vs weight {:?}",
            w.shape()
        )));
    }
    let rows = x.len() / din.max(1);
    let y = x.reshape(&[rows, din])?.matmul(w)?.add_trailing(bias)?;
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = w.shape()[1];
    y.reshape(&out_shape)
}

fn norm(b: &Bound, p: &str, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(LN_EPS)?
        .mul_trailing(b.get(&format!("{p}.g"))?)?
        .add_trailing(b.get(&format!("{p}.b"))?)
}

fn check_rank3(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [r, p, d] => Ok((r, p, d)),
        _ => Err(Error::ShapeMismatch(format!("{what} expects [R, Phi, d], got {:?}", x.shape()))),
    }
}

/// Linear embedding of the flattened per-patch samples followed by layer norm.
pub fn patch_embed(b: &Bound, x: &Tensor) -> Result<Tensor> {
    check_rank3(x, "patch_embed")?;
    norm(b, "embed.ln", &linear(b, "embed", x)?)
}

/// Row order that tiles a `[R, Phi]` token grid into windows after a cyclic
/// azimuth roll by `shift`, and its inverse.
pub fn window_order(r: usize, phi: usize, window: [usize; 2], shift: usize) -> (Vec<usize>, Vec<usize>) {
    let [wr, wp] = window;
    let mut order = Vec::with_capacity(r * phi);
    for wi in 0..r / wr {
        for wj in 0..phi / wp {
            for a in 0..wr {
                for c in 0..wp {
                    let row = wi * wr + a;
                    let col = (wj * wp + c + shift) % phi;
                    order.push(row * phi + col);
                }
            }
        }
    }
    let mut inverse = vec![0; order.len()];
    for (t, &src) in order.iter().enumerate() {
        inverse[src] = t;
    }
    (order, inverse)
}

/// Relative-bias table row for every ordered pair of tokens in a window.
pub fn relative_index(window: [usize; 2]) -> Vec<usize> {
    let [wr, wp] = window;
    let n = wr * wp;
    let mut idx = Vec::with_capacity(n * n);
    for p in 0..n {
        for q in 0..n {
            let dr = (p / wp) as isize - (q / wp) as isize + wr as isize - 1;
            let dp = (p % wp) as isize - (q % wp) as isize + wp as isize - 1;
            idx.push(dr as usize * (2 * wp - 1) + dp as usize);
        }
    }
    idx
}

/// Multi-head self-attention inside windows, with a learned relative bias.
pub fn window_attention(
    b: &Bound,
    p: &str,
    x: &Tensor,
    window: [usize; 2],
    heads: usize,
    shift: usize,
) -> Result<Tensor> {
    let (r, phi, d) = check_rank3(x, "window_attention")?;
    let [wr, wp] = window;
    if wr == 0 || wp == 0 || r % wr != 0 || phi % wp != 0 {
        return Err(Error::InvalidDimension(format!(
            "token grid {r}x{phi} not divisible by window {wr}x{wp}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidDimension(format!("dim {d} not divisible by {heads} heads")));
    }
    let n = wr * wp;
    let nw = r * phi / n;
    let dh = d / heads;
    let (order, inverse) = window_order(r, phi, window, shift);

    let tokens = x.reshape(&[r * phi, d])?.gather_rows(Rc::new(order))?;
    let qkv = linear(b, &format!("{p}.qkv"), &tokens)?
        .reshape(&[nw, n, 3, heads, dh])?
        .permute(&[2, 0, 3, 1, 4])?;
    let parts = qkv.split(0, &[1, 1, 1])?;
    let q = parts[0].reshape(&[nw * heads, n, dh])?.scale(1.0 / (dh as f64).sqrt());
    let k = parts[1].reshape(&[nw * heads, n, dh])?.permute(&[0, 2, 1])?;
    let v = parts[2].reshape(&[nw * heads, n, dh])?;

    let table = b.get(&format!("{p}.bias_table"))?;
    let bias = table
        .gather_rows(Rc::new(relative_index(window)))?
        .reshape(&[n, n, heads])?
        .permute(&[2, 0, 1])?;
    let logits = q.bmm(&k)?.reshape(&[nw, heads, n, n])?.add_trailing(&bias)?;
    let attn = logits.softmax()?.reshape(&[nw * heads, n, n])?;
    let out = attn
        .bmm(&v)?
        .reshape(&[nw, heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw * n, d])?;
    linear(b, &format!("{p}.proj"), &out)?
        .gather_rows(Rc::new(inverse))?
        .reshape(&[r, phi, d])
}

fn block(b: &Bound, p: &str, x: &Tensor, s: &StageGeom, shift: usize) -> Result<Tensor> {
    let h = norm(b, &format!("{p}.ln1"), x)?;
    let x = x.add(&window_attention(b, &format!("{p}.attn"), &h, s.window, s.heads, shift)?)?;
    let h = norm(b, &format!("{p}.ln2"), &x)?;
    let h = linear(b, &format!("{p}.fc1"), &h)?.gelu();
    x.add(&linear(b, &format!("{p}.fc2"), &h)?)
}

fn stage_blocks(b: &Bound, p: &str, x: Tensor, s: &StageGeom, depth: usize) -> Result<Tensor> {
    let mut x = x;
    for i in 0..depth {
        let shift = if i % 2 == 1 { s.shift() } else { 0 };
        x = block(b, &format!("{p}.blk{i}"), &x, s, shift)?;
    }
    Ok(x)
}

/// Four consecutive azimuth tokens concatenated, mapped to `2d`, normalized.
pub fn azimuth_merge(b: &Bound, p: &str, x: &Tensor) -> Result<Tensor> {
    let (r, phi, d) = check_rank3(x, "azimuth_merge")?;
    if phi % MERGE_FACTOR != 0 {
        return Err(Error::InvalidDimension(format!(
            "azimuth count {phi} not divisible by {MERGE_FACTOR}"
        )));
    }
    let grouped = x.reshape(&[r, phi / MERGE_FACTOR, MERGE_FACTOR * d])?;
    norm(b, &format!("{p}.ln"), &linear(b, p, &grouped)?)
}

/// Maps `d` to `2d` and spreads it over four azimuth positions of `d / 2`.
pub fn azimuth_expand(b: &Bound, p: &str, x: &Tensor) -> Result<Tensor> {
    let (r, phi, d) = check_rank3(x, "azimuth_expand")?;
    if d < 2 || d % 2 != 0 {
        return Err(Error::InvalidDimension(format!("cannot expand odd dim {d}")));
    }
    linear(b, p, x)?.reshape(&[r, MERGE_FACTOR * phi, d / 2])
}

/// Concatenates decoder and encoder features and maps back to `d`.
pub fn skip_fuse(b: &Bound, p: &str, dec: &Tensor, enc: &Tensor) -> Result<Tensor> {
    if dec.shape() != enc.shape() {
        return Err(Error::ShapeMismatch(format!(
            "skip_fuse: decoder {:?} vs encoder {:?}",
            dec.shape(),
            enc.shape()
        )));
    }
    check_rank3(dec, "skip_fuse")?;
    linear(b, p, &Tensor::concat(&[dec.clone(), enc.clone()], 2)?)
}

/// Lens-dependent sampling geometry for one distortion value.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub grid: PolarGrid,
    pub knn: KnnIndex,
    /// Pixels inside the image circle, row-major.
    pub valid_pixels: Vec<usize>,
    /// `valid_pixels.len() * k` patch indices feeding each valid pixel.
    pub patch_rows: Vec<u32>,
}

impl Geometry {
    pub fn new(cfg: &ModelConfig, lens: &LensModel) -> Result<Self> {
        let profile = RadialProfile::G(GFunction::reference(lens.fov()));
        let grid = PolarGrid::build(*lens, profile, cfg.grid_spec())?;
        let knn = KnnIndex::build(&grid, cfg.knn_k)?;
        let spp = cfg.grid_spec().samples_per_patch() as u32;
        let valid_pixels: Vec<usize> = (0..knn.valid.len()).filter(|&p| knn.valid[p]).collect();
        let patch_rows = valid_pixels
            .iter()
            .flat_map(|&p| knn.neighbors_of(p).iter().map(move |&s| s / spp))
            .collect();
        Ok(Self {
            grid,
            knn,
            valid_pixels,
            patch_rows,
        })
    }

    /// Polar samples of an RGB image with everything outside the image
    /// circle zeroed first.
    pub fn tokenize(&self, image: &Raster) -> Result<Vec<f64>> {
        if image.channels != 3 {
            return Err(Error::ShapeMismatch(format!("expected RGB, got {} channels", image.channels)));
        }
        let mut masked = image.clone();
        for (p, &v) in self.knn.valid.iter().enumerate() {
            if !v {
                masked.data[p * 3..p * 3 + 3].fill(0.0);
            }
        }
        self.grid.sample(&masked)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarSwinUnet {
    pub config: ModelConfig,
    pub params: Params,
}

/// Intermediate results of one forward pass.
pub struct ForwardPass {
    /// Final `[n_r, n_phi, c]` token map before the k-NN projection.
    pub tokens: Tensor,
    /// `[valid_pixels, head_out]` log-depth at valid pixels.
    pub pixels: Tensor,
}

impl DarSwinUnet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(param_specs(&config), seed)?;
        Ok(Self { config, params })
    }

    pub fn forward_bound(&self, b: &Bound, geom: &Geometry, samples: &[f64]) -> Result<ForwardPass> {
        let cfg = &self.config;
        let x = Tensor::new(&[cfg.n_r, cfg.n_phi, cfg.input_dim()], samples.to_vec())?;
        let mut x = patch_embed(b, &x)?;
        let last = cfg.stage_count() - 1;
        let mut skips = Vec::with_capacity(last);
        for i in 0..last {
            let s = cfg.stage(i);
            x = stage_blocks(b, &format!("enc{i}"), x, &s, cfg.depths[i])?;
            skips.push(x.clone());
            x = azimuth_merge(b, &format!("enc{i}.merge"), &x)?;
        }
        x = stage_blocks(b, "bottleneck", x, &cfg.stage(last), cfg.depths[last])?;
        for i in (0..last).rev() {
            x = azimuth_expand(b, &format!("dec{i}.expand"), &x)?;
            x = skip_fuse(b, &format!("dec{i}.fuse"), &x, &skips[i])?;
            x = stage_blocks(b, &format!("dec{i}"), x, &cfg.stage(i), cfg.depths[i])?;
        }
        let tokens = norm(b, "final_ln", &x)?;
        let flat = tokens.reshape(&[cfg.n_r * cfg.n_phi, cfg.embed_dim])?;
        let pixel_feats = flat.gather_mean(Rc::new(geom.patch_rows.clone()), cfg.knn_k)?;
        let pixels = linear(b, "head", &pixel_feats)?;
        Ok(ForwardPass { tokens, pixels })
    }

    /// Log-depth map (zero outside the image circle) and the validity mask.
    pub fn predict(&self, geom: &Geometry, image: &Raster) -> Result<(Raster, Vec<bool>)> {
        let n = self.config.image_size;
        if image.height != n || image.width != n {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs model input {n}x{n}",
                image.height, image.width
            )));
        }
        let samples = geom.tokenize(image)?;
        let out = self.forward_bound(&self.params.bind(false), geom, &samples)?;
        let c = self.config.head_out;
        let mut map = Raster::new(n, n, c);
        for (i, &p) in geom.valid_pixels.iter().enumerate() {
            map.data[p * c..(p + 1) * c].copy_from_slice(&out.pixels.data()[i * c..(i + 1) * c]);
        }
        Ok((map, geom.knn.valid.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0u64;
        let entries: Vec<HeaderEntry> = self
            .params
            .specs
            .iter()
            .map(|s| {
                let e = HeaderEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    offset,
                };
                offset += 8 * s.shape.iter().product::<usize>() as u64;
                e
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            lens_family: "unified".into(),
            profile: "g".into(),
            params: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.params.values {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 28 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} unsupported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        header.config.validate()?;
        let specs = param_specs(&header.config);
        check_directory(&specs, &header.params)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        let values = header
            .params
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let start = e.offset as usize;
                payload[start..start + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect()
            })
            .collect();
        Ok(Self {
            params: Params::from_values(specs, values)?,
            config: header.config,
        })
    }

    /// Loads a checkpoint and checks it against an expected configuration.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let m = Self::load(path)?;
        let want = param_specs(expected);
        for (w, have) in want.iter().zip(&m.params.specs) {
            if w.name != have.name || w.shape != have.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' expected shape {:?}, checkpoint has '{}' {:?}",
                    w.name, w.shape, have.name, have.shape
                )));
            }
        }
        if want.len() != m.params.len() {
            let name = if want.len() > m.params.len() {
                &want[m.params.len()].name
            } else {
                &m.params.specs[want.len()].name
            };
            return Err(Error::Checkpoint(format!(
                "parameter count {} vs expected {} (first unmatched '{name}')",
                m.params.len(),
                want.len()
            )));
        }
        if &m.config != expected {
            return Err(Error::Checkpoint("configuration differs from the expected one".into()));
        }
        Ok(m)
    }
}

const MAGIC: &[u8; 8] = b"DSWUNET1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    lens_family: String,
    profile: String,
    params: Vec<HeaderEntry>,
}

fn check_directory(specs: &[ParamSpec], entries: &[HeaderEntry]) -> Result<()> {
    if specs.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "directory lists {} parameters, config needs {}",
            entries.len(),
            specs.len()
        )));
    }
    let mut offset = 0u64;
    for (s, e) in specs.iter().zip(entries) {
        if s.name != e.name || s.shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' {:?} does not match config entry '{}' {:?}",
                e.name, e.shape, s.name, s.shape
            )));
        }
        if e.offset != offset {
            return Err(Error::Checkpoint(format!("parameter '{}' at bad offset {}", e.name, e.offset)));
        }
        offset += 8 * s.shape.iter().product::<usize>() as u64;
    }
    Ok(())
}

/// Scale-invariant log loss over selected rows of a `[M, 1]` prediction.
pub fn si_loss(pred: &Tensor, rows: &[usize], gt_log: &[f64], lambda: f64) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Empty("no valid pixels for loss".into()));
    }
    let sel = pred.gather_rows(Rc::new(rows.to_vec()))?;
    let target = Tensor::new(sel.shape(), gt_log.to_vec())?;
    let d = sel.sub(&target)?;
    let m = d.mean();
    d.mul(&d)?.mean().sub(&m.mul(&m)?.scale(lambda))?.sqrt().reshape(&[])
}

/// One tokenized training image with its supervision.
#[derive(Debug, Clone)]
pub struct Example {
    pub geometry: std::sync::Arc<Geometry>,
    pub samples: Vec<f64>,
    /// Rows into the model's valid-pixel output carrying usable depth.
    pub rows: Vec<usize>,
    pub gt_log: Vec<f64>,
}

impl Example {
    pub fn new(geometry: std::sync::Arc<Geometry>, rgb: &Raster, depth: &Raster, mask: &[bool]) -> Result<Self> {
        let samples = geometry.tokenize(rgb)?;
        let mut rows = Vec::new();
        let mut gt_log = Vec::new();
        for (i, &p) in geometry.valid_pixels.iter().enumerate() {
            let d = depth.data[p];
            if mask[p] && d > 0.0 {
                rows.push(i);
                gt_log.push(d.ln());
            }
        }
        if rows.is_empty() {
            return Err(Error::Empty("training image without valid depth".into()));
        }
        Ok(Self {
            geometry,
            samples,
            rows,
            gt_log,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_power: 0.9,
            lambda: crate::metrics::SI_LAMBDA,
            seed: 0,
        }
    }
}

impl DarSwinUnet {
    /// Loss and parameter gradients for one example.
    pub fn loss_and_grads(&self, ex: &Example, lambda: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let b = self.params.bind(true);
        let out = self.forward_bound(&b, &ex.geometry, &ex.samples)?;
        let loss = si_loss(&out.pixels, &ex.rows, &ex.gt_log, lambda)?;
        loss.backward()?;
        Ok((loss.item(), b.grads()))
    }

    pub fn loss(&self, ex: &Example, lambda: f64) -> Result<f64> {
        let b = self.params.bind(false);
        let out = self.forward_bound(&b, &ex.geometry, &ex.samples)?;
        Ok(si_loss(&out.pixels, &ex.rows, &ex.gt_log, lambda)?.item())
    }

    /// Mean loss over a set of examples, evaluated in parallel.
    pub fn mean_loss(&self, examples: &[Example], lambda: f64) -> Result<f64> {
        let losses: Result<Vec<f64>> = examples.par_iter().map(|e| self.loss(e, lambda)).collect();
        let losses = losses?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// SGD with momentum and polynomial learning-rate decay. Returns the mean
    /// batch loss of every step.
    pub fn train(
        &mut self,
        examples: &[Example],
        cfg: &TrainConfig,
        mut log: impl FnMut(usize, f64, f64),
    ) -> Result<Vec<f64>> {
        if examples.is_empty() {
            return Err(Error::Empty("no training examples".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidValue("batch size must be positive".into()));
        }
        let mut velocity: Vec<Vec<f64>> = self.params.values.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cursor = order.len();
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(examples.len()) {
                if cursor == order.len() {
                    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let results: Result<Vec<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .map(|&i| self.loss_and_grads(&examples[i], cfg.lambda))
                .collect();
            let results = results?;
            let scale = 1.0 / results.len() as f64;
            let loss = results.iter().map(|r| r.0).sum::<f64>() * scale;
            let lr = cfg.base_lr * (1.0 - step as f64 / cfg.steps as f64).powf(cfg.lr_power);
            for (pi, (value, vel)) in self.params.values.iter_mut().zip(&mut velocity).enumerate() {
                for j in 0..value.len() {
                    let g: f64 = results.iter().map(|r| r.1[pi][j]).sum::<f64>() * scale
                        + cfg.weight_decay * value[j];
                    vel[j] = cfg.momentum * vel[j] + g;
                    value[j] -= lr * vel[j];
                }
            }
            log(step, loss, lr);
            history.push(loss);
        }
        Ok(history)
    }
}
