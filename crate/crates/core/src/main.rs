use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use darswin::data::{self, DepthFormat, DistortionGroup, ManifestRecord, PanoRef, RoomSpec};
use darswin::imageio::{self, Raster};
use darswin::lens::{LensMeta, LensModel};
use darswin::metrics::{self, DepthEval};
use darswin::model::{DarSwinUnet, Example, Geometry, ModelConfig, TrainConfig};
use darswin::polar_grid::{self, GridSpec, KnnIndex, PolarGrid};
use darswin::sampling::{self, Axis, RadialProfile, SearchGrid};
use darswin::Error;

#[derive(Parser, Debug)]
#[command(name = "darswin", version, about = "Distortion-aware polar tokenization and depth estimation")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true, env = "DARSWIN_THREADS")]
    threads: Option<usize>,
    /// JSON file whose keys mirror flag names; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Grid search for the radial reparameterization.
    OptimizeSampling(OptimizeArgs),
    /// Writes the sample points of a polar grid.
    SampleGrid(GridArgs),
    /// Sample-then-k-NN reconstruction error on synthetic fields.
    TokenizeRoundtrip(RoundtripArgs),
    /// Procedural panoramas plus training and test manifests.
    GenDataset(GenArgs),
    /// Piecewise-perspective cubemap of a fisheye image.
    Cubemap(CubemapArgs),
    /// Trains the depth model on a manifest.
    Train(TrainArgs),
    /// Per-distortion depth metrics.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Serialize)]
struct OptimizeArgs {
    /// Field of view in degrees.
    #[arg(long, default_value_t = 175.0)]
    fov: f64,
    #[arg(long, default_value_t = 512)]
    theta_grid: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda_min: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_max: f64,
    #[arg(long, default_value_t = 10)]
    lambda_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    m_min: f64,
    #[arg(long, default_value_t = 20.0)]
    m_max: f64,
    #[arg(long, default_value_t = 60)]
    m_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    n_min: f64,
    #[arg(long, default_value_t = 5.0)]
    n_max: f64,
    #[arg(long, default_value_t = 20)]
    n_steps: usize,
    #[arg(long, default_value_t = 2.0)]
    b_min: f64,
    #[arg(long, default_value_t = 10.0)]
    b_max: f64,
    #[arg(long, default_value_t = 40)]
    b_steps: usize,
    /// Ranked candidates written to `--out`.
    #[arg(long, default_value_t = 20)]
    top: usize,
    /// CSV of the best candidates.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Profile {
    G,
    Theta,
    Tan,
}

impl Profile {
    fn resolve(self, fov: f64) -> RadialProfile {
        let name = match self {
            Profile::G => "g",
            Profile::Theta => "theta",
            Profile::Tan => "tan",
        };
        RadialProfile::parse(name, fov).expect("known profile")
    }
}

/// `s_phi x s_r`, e.g. `25x4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
struct Samples {
    s_phi: usize,
    s_r: usize,
}

fn parse_samples(s: &str) -> Result<Samples, String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad count '{v}'"));
    let (s_phi, s_r) = (p(a)?, p(b)?);
    if s_phi == 0 || s_r == 0 {
        return Err("sample counts must be positive".into());
    }
    Ok(Samples { s_phi, s_r })
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let v = parse_samples(s)?;
    Ok([v.s_r, v.s_phi])
}

/// Comma-separated counts, e.g. `2,2,2,2`.
#[derive(Clone, Debug, Serialize)]
#[serde(transparent)]
struct List(Vec<usize>);

fn parse_list(s: &str) -> Result<List, String> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| format!("bad list entry '{v}'")))
        .collect::<Result<_, _>>()
        .map(List)
}

#[derive(Args, Debug, Serialize)]
struct LensArgs {
    /// Distortion parameter in [0, 1].
    #[arg(long, default_value_t = 0.25)]
    xi: f64,
    /// Field of view in degrees.
    #[arg(long, default_value_t = 175.0)]
    fov: f64,
}

impl LensArgs {
    fn lens(&self) -> darswin::Result<LensModel> {
        LensModel::from_degrees(self.xi, self.fov)
    }
}

#[derive(Args, Debug, Serialize)]
struct PolarArgs {
    /// Radial reparameterization.
    #[arg(long, value_enum, default_value_t = Profile::G)]
    profile: Profile,
    #[arg(long, default_value_t = 16)]
    n_r: usize,
    #[arg(long, default_value_t = 64)]
    n_phi: usize,
    /// Samples per patch as azimuth x radius.
    #[arg(long, value_parser = parse_samples, default_value = "25x4")]
    samples: Samples,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

impl PolarArgs {
    fn grid(&self, lens: LensModel) -> darswin::Result<PolarGrid> {
        let spec = GridSpec {
            n_r: self.n_r,
            n_phi: self.n_phi,
            s_r: self.samples.s_r,
            s_phi: self.samples.s_phi,
            height: self.size,
            width: self.size,
        };
        PolarGrid::build(lens, self.profile.resolve(lens.fov()), spec)
    }
}

#[derive(Args, Debug, Serialize)]
struct GridArgs {
    #[command(flatten)]
    lens: LensArgs,
    #[command(flatten)]
    polar: PolarArgs,
    /// CSV of sample points.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FieldSource {
    /// Sums of low-frequency sinusoids.
    Smooth,
    /// Log-depth of procedural rooms.
    Room,
}

#[derive(Args, Debug, Serialize)]
struct RoundtripArgs {
    #[command(flatten)]
    lens: LensArgs,
    #[command(flatten)]
    polar: PolarArgs,
    /// Neighbors averaged per pixel.
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, value_enum, default_value_t = FieldSource::Smooth)]
    source: FieldSource,
    /// Number of random fields averaged.
    #[arg(long, default_value_t = 8)]
    fields: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the CSV row here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// Distortion group of the training manifest.
    #[arg(long, default_value = "low", value_parser = ["very_low", "low", "medium", "high"])]
    group: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples.
    #[arg(long, default_value_t = 128)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Procedural panoramas to synthesize when no `--pano-list` is given.
    #[arg(long, default_value_t = 4)]
    panos: usize,
    /// JSON-lines list of existing panoramas ({pano_path, depth_path, depth_format}).
    #[arg(long)]
    pano_list: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pano_height: usize,
    #[arg(long, default_value_t = 175.0)]
    fov: f64,
    /// Fisheye output side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, value_enum, default_value_t = DepthFormatArg::Pfm)]
    depth_format: DepthFormatArg,
    /// Also write the 20 fixed-distortion test manifests.
    #[arg(long)]
    test_suite: bool,
    /// Test distortions 0.05..1.00 instead of 0.00..0.95.
    #[arg(long)]
    include_one: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DepthFormatArg {
    Pfm,
    PngMm,
}

impl From<DepthFormatArg> for DepthFormat {
    fn from(v: DepthFormatArg) -> Self {
        match v {
            DepthFormatArg::Pfm => DepthFormat::Pfm,
            DepthFormatArg::PngMm => DepthFormat::PngMm,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct CubemapArgs {
    /// Fisheye RGB PNG.
    #[arg(long = "in")]
    input: PathBuf,
    /// Lens JSON ({model, xi, fov_deg}).
    #[arg(long)]
    lens: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Face side in pixels (default: half the input width).
    #[arg(long)]
    face_size: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    n_r: usize,
    #[arg(long, default_value_t = 64)]
    n_phi: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    /// Blocks per stage, last entry is the bottleneck.
    #[arg(long, value_parser = parse_list, default_value = "2,2,2,2")]
    depths: List,
    #[arg(long, value_parser = parse_list, default_value = "1,2,4,8")]
    heads: List,
    /// Attention window as azimuth x radius.
    #[arg(long, value_parser = parse_pair, default_value = "4x4")]
    window: [usize; 2],
    /// Samples per patch as azimuth x radius.
    #[arg(long, value_parser = parse_samples, default_value = "25x4")]
    samples: Samples,
    #[arg(long, default_value_t = 4)]
    k: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Polynomial learning-rate decay power.
    #[arg(long, default_value_t = 0.9)]
    lr_power: f64,
    /// Scale-invariance weight of the loss.
    #[arg(long, default_value_t = 0.85)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// One or more manifests.
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
    /// Checkpoint path, or `none` for the identity predictor.
    #[arg(long)]
    ckpt: String,
    /// Predict the ground truth itself (harness check); implied by `--ckpt none`.
    #[arg(long)]
    identity: bool,
    /// Metric CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runtime failure tagged with the module it came from.
struct Failure {
    module: &'static str,
    error: Error,
}

trait Tag<T> {
    fn tag(self, module: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<Error>> Tag<T> for Result<T, E> {
    fn tag(self, module: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            module,
            error: e.into(),
        })
    }
}

fn echo<T: Serialize>(command: &str, args: &T) {
    let json = serde_json::to_string(args).unwrap_or_default();
    eprintln!("[{command}] config {json}");
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).tag("cli")?;
    }
    fs::write(path, text).tag("cli")
}

fn optimize_sampling(a: &OptimizeArgs) -> Result<(), Failure> {
    echo("optimize-sampling", a);
    let grid = SearchGrid {
        lambda: Axis::new(a.lambda_min, a.lambda_max, a.lambda_steps),
        m: Axis::new(a.m_min, a.m_max, a.m_steps),
        n: Axis::new(a.n_min, a.n_max, a.n_steps),
        b: Axis::new(a.b_min, a.b_max, a.b_steps),
        theta_grid: a.theta_grid,
    };
    let fov = a.fov.to_radians();
    let res = sampling::grid_search(&grid, fov).tag("sampling")?;
    let b = res.best;
    let summary = serde_json::json!({
        "lambda": b.g.lambda,
        "m": b.g.m,
        "n": b.g.n,
        "b": b.g.b,
        "cost": b.cost,
        "index": b.index,
        "candidates": res.ranking.len(),
    });
    println!("{summary}");
    if let Some(out) = &a.out {
        let mut csv = String::from("rank,lambda,m,n,b,cost\n");
        for (i, c) in res.ranking.iter().take(a.top).enumerate() {
            csv.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10},{:.12}\n",
                i + 1,
                c.g.lambda,
                c.g.m,
                c.g.n,
                c.g.b,
                c.cost
            ));
        }
        write_text(out, &csv)?;
    }
    Ok(())
}

fn sample_grid(a: &GridArgs) -> Result<(), Failure> {
    echo("sample-grid", a);
    let lens = a.lens.lens().tag("lens")?;
    let grid = a.polar.grid(lens).tag("polar_grid")?;
    let mut csv = String::from("sample_id,i,j,k,l,r,phi,x,y\n");
    let s = grid.spec;
    for i in 0..s.n_r {
        for j in 0..s.n_phi {
            for k in 0..s.s_r {
                for l in 0..s.s_phi {
                    let id = grid.sample_id(i, j, k, l);
                    let (r, phi) = grid.polar[id];
                    let (x, y) = grid.points[id];
                    csv.push_str(&format!("{id},{i},{j},{k},{l},{r:.10},{phi:.10},{x:.6},{y:.6}\n"));
                }
            }
        }
    }
    write_text(&a.out, &csv)?;
    let gap = sampling::max_radial_gap(&lens, &grid.profile, s.n_r + 1).tag("sampling")?;
    let radii: Vec<f64> = grid.radial_bounds.iter().map(|b| b.1).collect();
    println!(
        "{}",
        serde_json::json!({
            "samples": grid.points.len(),
            "max_radial_gap": gap,
            "radial_bounds": radii,
        })
    );
    Ok(())
}

fn room_log_depth(seed: u64, lens: &LensModel, size: usize) -> darswin::Result<Raster> {
    let room = RoomSpec::random(seed);
    let pano = data::synth_panorama(&room, 256)?;
    let s = data::warp_to_fisheye(&pano, lens, (seed as f64 * 0.9).rem_euclid(std::f64::consts::TAU), size)?;
    Ok(Raster::from_fn(size, size, 1, |y, x, _| {
        let d = s.depth.get(y, x, 0);
        if d > 0.0 {
            d.ln()
        } else {
            0.0
        }
    }))
}

fn tokenize_roundtrip(a: &RoundtripArgs) -> Result<(), Failure> {
    echo("tokenize-roundtrip", a);
    if a.fields == 0 {
        return Err(Failure {
            module: "cli",
            error: Error::InvalidValue("--fields must be positive".into()),
        });
    }
    let lens = a.lens.lens().tag("lens")?;
    let grid = a.polar.grid(lens).tag("polar_grid")?;
    let index = KnnIndex::build(&grid, a.k).tag("polar_grid")?;
    let (mut mae, mut rel) = (0.0, 0.0);
    for f in 0..a.fields as u64 {
        let seed = a.seed + f;
        let field = match a.source {
            FieldSource::Smooth => data::smooth_field(a.polar.size, a.polar.size, seed, 6),
            FieldSource::Room => room_log_depth(seed, &lens, a.polar.size).tag("data")?,
        };
        let e = polar_grid::roundtrip_error(&field, &grid, &index).tag("polar_grid")?;
        mae += e.mae;
        rel += e.relative();
    }
    let n = a.fields as f64;
    let row = format!(
        "{:.4},{}x{},{:?},{},{:.8},{:.8}",
        a.lens.xi,
        a.polar.samples.s_phi,
        a.polar.samples.s_r,
        a.polar.profile,
        a.k,
        mae / n,
        rel / n
    )
    .to_lowercase();
    let header = "xi,samples,profile,k,mae,relative_mae";
    match &a.out {
        Some(path) => {
            let exists = path.exists();
            let mut f = fs::OpenOptions::new().create(true).append(true).open(path).tag("cli")?;
            if !exists {
                writeln!(f, "{header}").tag("cli")?;
            }
            writeln!(f, "{row}").tag("cli")?;
        }
        None => println!("{header}\n{row}"),
    }
    Ok(())
}

fn read_pano_list(path: &Path) -> darswin::Result<Vec<PanoRef>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut p: PanoRef = serde_json::from_str(l)?;
            if p.pano_path.is_relative() {
                p.pano_path = base.join(&p.pano_path);
            }
            if p.depth_path.is_relative() {
                p.depth_path = base.join(&p.depth_path);
            }
            Ok(p)
        })
        .collect()
}

fn gen_dataset(a: &GenArgs) -> Result<(), Failure> {
    echo("gen-dataset", a);
    let group = DistortionGroup::parse(&a.group).tag("data")?;
    fs::create_dir_all(&a.out).tag("cli")?;
    let format: DepthFormat = a.depth_format.into();
    let panos = match &a.pano_list {
        Some(list) => read_pano_list(list).tag("data")?,
        None => {
            fs::create_dir_all(a.out.join("panos")).tag("cli")?;
            let ext = match format {
                DepthFormat::Pfm => "pfm",
                DepthFormat::PngMm => "depth.png",
            };
            let mut refs = Vec::new();
            for i in 0..a.panos {
                let room = RoomSpec::random(a.seed.wrapping_mul(1000).wrapping_add(i as u64));
                let pano = data::synth_panorama(&room, a.pano_height).tag("data")?;
                let rel = PanoRef {
                    pano_path: format!("panos/room_{i:03}.png").into(),
                    depth_path: format!("panos/room_{i:03}.{ext}").into(),
                    depth_format: format,
                };
                pano.save(&a.out.join(&rel.pano_path), &a.out.join(&rel.depth_path), format)
                    .tag("data")?;
                refs.push(rel);
            }
            refs
        }
    };
    let train = data::make_split(&panos, group, a.seed, a.count, a.fov, a.size).tag("data")?;
    let train_path = a.out.join(format!("train_{}.jsonl", group.name()));
    data::write_manifest(&train_path, &train).tag("data")?;
    println!("{}", train_path.display());
    if a.test_suite {
        let suite = data::make_test_suite(&panos, a.include_one, a.seed, a.fov, a.size).tag("data")?;
        for (xi, recs) in suite {
            let p = a.out.join(format!("test_xi_{xi:.2}.jsonl"));
            data::write_manifest(&p, &recs).tag("data")?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn cubemap(a: &CubemapArgs) -> Result<(), Failure> {
    echo("cubemap", a);
    let rgb = imageio::read_png_rgb(&a.input).tag("data")?;
    let meta: LensMeta = serde_json::from_str(&fs::read_to_string(&a.lens).tag("cli")?).tag("lens")?;
    let lens = meta.to_lens().tag("lens")?;
    let (h, w) = (rgb.height, rgb.width);
    let sample = data::DepthSample {
        rgb,
        depth: Raster::new(h, w, 1),
        mask: vec![true; h * w],
        lens,
        yaw: 0.0,
    };
    let face = a.face_size.unwrap_or((w / 2).max(1));
    let cube = data::undistort_cubemap(&sample, face).tag("data")?;
    imageio::write_png(&a.out, &cube.image).tag("data")?;
    println!(
        "{}",
        serde_json::json!({"width": cube.image.width, "height": cube.image.height, "face_size": face})
    );
    Ok(())
}

fn model_config(m: &ModelArgs, image_size: usize) -> ModelConfig {
    ModelConfig {
        n_r: m.n_r,
        n_phi: m.n_phi,
        embed_dim: m.embed_dim,
        depths: m.depths.0.clone(),
        heads: m.heads.0.clone(),
        window: m.window,
        mlp_ratio: 4,
        head_out: 1,
        s_r: m.samples.s_r,
        s_phi: m.samples.s_phi,
        image_size,
        knn_k: m.k,
    }
}

/// Geometry per distinct distortion value.
struct GeometryCache {
    config: ModelConfig,
    map: HashMap<(u64, u64), Arc<Geometry>>,
}

impl GeometryCache {
    fn get(&mut self, lens: &LensModel) -> darswin::Result<Arc<Geometry>> {
        let key = (lens.xi().to_bits(), lens.fov().to_bits());
        if let Some(g) = self.map.get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(Geometry::new(&self.config, lens)?);
        self.map.insert(key, g.clone());
        Ok(g)
    }
}

fn common_size(records: &[ManifestRecord]) -> darswin::Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("manifest has no records".into()))?
        .out_size;
    if let Some(r) = records.iter().find(|r| r.out_size != first) {
        return Err(Error::InvalidDimension(format!(
            "mixed image sizes {first} and {} in one manifest",
            r.out_size
        )));
    }
    Ok(first)
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    echo("train", a);
    let records = data::read_manifest(&a.manifest).tag("data")?;
    let size = common_size(&records).tag("data")?;
    let cfg = model_config(&a.model, size);
    let mut model = DarSwinUnet::new(cfg.clone(), a.seed).tag("model")?;
    let samples = data::load_samples(&records).tag("data")?;
    let mut cache = GeometryCache {
        config: cfg,
        map: HashMap::new(),
    };
    let mut examples = Vec::with_capacity(samples.len());
    for s in &samples {
        let geom = cache.get(&s.lens).tag("polar_grid")?;
        examples.push(Example::new(geom, &s.rgb, &s.depth, &s.mask).tag("model")?);
    }
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        base_lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        lr_power: a.lr_power,
        lambda: a.lambda,
        seed: a.seed,
    };
    let mut csv = String::from("step,loss,lr\n");
    let every = (a.steps / 20).max(1);
    let history = model
        .train(&examples, &tc, |step, loss, lr| {
            csv.push_str(&format!("{step},{loss:.10},{lr:.10}\n"));
            if step % every == 0 || step + 1 == a.steps {
                eprintln!("[train] step {step} loss {loss:.6} lr {lr:.6}");
            }
        })
        .tag("model")?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).tag("cli")?;
    }
    model.save(&a.out).tag("model")?;
    if let Some(log) = &a.log {
        write_text(log, &csv)?;
    }
    let final_loss = model.mean_loss(&examples, a.lambda).tag("model")?;
    println!(
        "{}",
        serde_json::json!({
            "steps": history.len(),
            "initial_loss": history.first(),
            "final_loss": final_loss,
            "checkpoint": a.out,
        })
    );
    Ok(())
}

/// Pixels pooled per distortion value: `(xi, pred, gt, mask)`.
type XiGroup = (f64, Vec<f64>, Vec<f64>, Vec<bool>);

fn eval_rows(
    records: &[ManifestRecord],
    model: Option<&DarSwinUnet>,
    cache: &mut Option<GeometryCache>,
) -> darswin::Result<Vec<(f64, DepthEval)>> {
    let samples = data::load_samples(records)?;
    let mut groups: Vec<XiGroup> = Vec::new();
    for s in &samples {
        let (pred, valid) = match (model, cache.as_mut()) {
            (Some(m), Some(c)) => {
                let geom = c.get(&s.lens)?;
                let (log_depth, valid) = m.predict(&geom, &s.rgb)?;
                let pred: Vec<f64> = log_depth
                    .data
                    .iter()
                    .zip(&valid)
                    .map(|(v, ok)| if *ok { v.exp() } else { 0.0 })
                    .collect();
                (pred, valid)
            }
            _ => (s.depth.data.clone(), vec![true; s.mask.len()]),
        };
        let mask: Vec<bool> = s.mask.iter().zip(&valid).map(|(a, b)| *a && *b).collect();
        let xi = s.lens.xi();
        let entry = match groups.iter_mut().find(|g| g.0 == xi) {
            Some(g) => g,
            None => {
                groups.push((xi, Vec::new(), Vec::new(), Vec::new()));
                groups.last_mut().expect("just pushed")
            }
        };
        entry.1.extend(pred);
        entry.2.extend(&s.depth.data);
        entry.3.extend(mask);
    }
    groups
        .into_iter()
        .map(|(xi, p, g, m)| Ok((xi, metrics::evaluate(&p, &g, &m)?)))
        .collect()
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    echo("eval", a);
    let model = if a.ckpt == "none" {
        None
    } else {
        if a.identity {
            return Err(Failure {
                module: "cli",
                error: Error::InvalidValue("--identity takes --ckpt none".into()),
            });
        }
        Some(DarSwinUnet::load(Path::new(&a.ckpt)).tag("model")?)
    };
    let mut cache = model.as_ref().map(|m| GeometryCache {
        config: m.config.clone(),
        map: HashMap::new(),
    });
    let mut csv = format!("{}\n", DepthEval::CSV_HEADER);
    for path in &a.manifest {
        let records = data::read_manifest(path).tag("data")?;
        if let Some(m) = &model {
            let size = common_size(&records).tag("data")?;
            if size != m.config.image_size {
                return Err(Failure {
                    module: "model",
                    error: Error::ShapeMismatch(format!(
                        "manifest images are {size} px, checkpoint expects {}",
                        m.config.image_size
                    )),
                });
            }
        }
        for (xi, e) in eval_rows(&records, model.as_ref(), &mut cache).tag("metrics")? {
            csv.push_str(&e.csv_row(xi));
            csv.push('\n');
        }
    }
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Splices `--config` JSON keys in as flags right after the subcommand so
/// that explicit flags, parsed later, override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].split_once('=') {
        Some((_, p)) => p.to_string(),
        None => args
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| "--config needs a path".to_string())?,
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format!("config {path}: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| format!("config {path} must be a JSON object"))?;
    let mut extra = Vec::new();
    for (k, v) in obj {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => extra.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => extra.extend([flag, s.clone()]),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|i| i.as_str().map(str::to_owned).unwrap_or_else(|| i.to_string()))
                    .collect();
                extra.extend([flag, joined.join(",")]);
            }
            other => extra.extend([flag, other.to_string()]),
        }
    }
    const SUBCOMMANDS: [&str; 7] = [
        "optimize-sampling",
        "sample-grid",
        "tokenize-roundtrip",
        "gen-dataset",
        "cubemap",
        "train",
        "eval",
    ];
    let sub = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .ok_or_else(|| "missing subcommand".to_string())?;
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cli: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::OptimizeSampling(a) => optimize_sampling(a),
        Command::SampleGrid(a) => sample_grid(a),
        Command::TokenizeRoundtrip(a) => tokenize_roundtrip(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::Cubemap(a) => cubemap(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.module, f.error);
            ExitCode::from(1)
        }
    }
}
