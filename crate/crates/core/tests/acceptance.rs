//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use darswin::data::{self, RoomSpec};
use darswin::imageio::Raster;
use darswin::lens::{radius_derivative, LensModel};
use darswin::metrics;
use darswin::model::{DarSwinUnet, Example, Geometry, ModelConfig, TrainConfig};
use darswin::polar_grid::{self, GridSpec, KnnIndex, PolarGrid};
use darswin::sampling::{self, GFunction, RadialProfile, SearchGrid};
use darswin::tensor::{max_relative_error, numeric_gradient, Tensor};

type Outcome = Result<String, String>;

fn fov() -> f64 {
    175f64.to_radians()
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn within(limit: Duration, t: Instant) -> Result<Duration, String> {
    let e = t.elapsed();
    if e < limit {
        Ok(e)
    } else {
        Err(format!("took {e:.1?}, limit {limit:?}"))
    }
}

fn sampling_optimum() -> Outcome {
    let grid = SearchGrid::default();
    let t = Instant::now();
    let res = single_thread(|| sampling::grid_search(&grid, fov())).map_err(|e| e.to_string())?;
    let elapsed = within(Duration::from_secs(300), t)?;
    let g = res.best.g;
    let detail = format!(
        "lambda {:.4} m {:.4} n {:.3} b {:.4} cost {:.6} in {elapsed:.1?}",
        g.lambda, g.m, g.n, g.b, res.best.cost
    );
    let ok = (g.lambda - 7.0 / 9.0).abs() < 1e-9
        && (g.m - 5.5085).abs() <= grid.m.step() + 1e-9
        && (g.n - 5.0).abs() < 1e-9
        && (g.b - 4.105).abs() <= 2.0 * grid.b.step() + 1e-9;
    if ok {
        Ok(detail)
    } else {
        Err(format!("{detail}; expected lambda 0.7778 m 5.5085 n 5.0 b 4.105"))
    }
}

fn lens_roundtrip() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..=20 {
        let lens = LensModel::new(i as f64 / 20.0, fov()).map_err(|e| e.to_string())?;
        for j in 0..1000 {
            let theta = j as f64 / 999.0 * lens.max_theta();
            let r = lens.project(theta).map_err(|e| e.to_string())?;
            let back = lens.unproject(r).map_err(|e| e.to_string())?;
            worst = worst.max((back - theta).abs());
        }
    }
    let persp = LensModel::new(0.0, fov()).unwrap();
    let mut persp_err: f64 = 0.0;
    for j in 0..1000 {
        let theta = j as f64 / 999.0 * persp.max_theta();
        let r = persp.project(theta).unwrap();
        persp_err = persp_err.max((r - persp.focal() * theta.tan()).abs());
    }
    let elapsed = within(Duration::from_secs(1), t)?;
    let detail = format!("roundtrip {worst:.2e}, perspective {persp_err:.2e} in {elapsed:.1?}");
    if worst < 1e-9 && persp_err < 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn endpoint_monotonicity() -> Outcome {
    let a = 0.5 * fov();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let nodes = sampling::theta_nodes(a, 100);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let g = GFunction::new(
            rng.random_range(0.0..=1.0),
            rng.random_range(1.0..=20.0),
            rng.random_range(0.5..=5.0),
            rng.random_range(2.0..=10.0),
            a,
        )
        .map_err(|e| e.to_string())?;
        for &theta in &nodes {
            let gd = g.derivative(theta).map_err(|e| e.to_string())?;
            let ratio = |xi: f64| radius_derivative(xi, 1.0, theta) / gd;
            let ends = ratio(0.0).max(ratio(1.0));
            let dense = (0..=100).map(|i| ratio(i as f64 / 100.0)).fold(f64::MIN, f64::max);
            worst = worst.max((dense - ends).abs() / ends.max(1.0));
        }
    }
    let detail = format!("50 candidates x 100 nodes, worst excess {worst:.2e}");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn grid_for(xi: f64, profile: RadialProfile, s_phi: usize, s_r: usize) -> (PolarGrid, KnnIndex) {
    let lens = LensModel::new(xi, fov()).unwrap();
    let spec = GridSpec {
        n_r: 16,
        n_phi: 64,
        s_r,
        s_phi,
        height: 64,
        width: 64,
    };
    let grid = PolarGrid::build(lens, profile, spec).unwrap();
    let knn = KnnIndex::build(&grid, 4).unwrap();
    (grid, knn)
}

fn mean_roundtrip(fields: &[Raster], grid: &PolarGrid, knn: &KnnIndex) -> (f64, f64) {
    let (mut mae, mut rel) = (0.0, 0.0);
    for f in fields {
        let e = polar_grid::roundtrip_error(f, grid, knn).unwrap();
        mae += e.mae;
        rel += e.relative();
    }
    (mae / fields.len() as f64, rel / fields.len() as f64)
}

fn sparsity_ordering() -> Outcome {
    let a = 0.5 * fov();
    let g = RadialProfile::G(GFunction::reference(fov()));
    let fields: Vec<Raster> = (0..8).map(|s| data::smooth_field(64, 64, s, 6)).collect();
    let mut lines = Vec::new();
    let mut ok = true;
    for (xi, rival, name) in [
        (0.0, RadialProfile::Theta { a }, "theta"),
        (1.0, RadialProfile::Tan { a }, "tan"),
    ] {
        let lens = LensModel::new(xi, fov()).unwrap();
        let gap_g = sampling::max_radial_gap(&lens, &g, 17).unwrap();
        let gap_r = sampling::max_radial_gap(&lens, &rival, 17).unwrap();
        let (gg, gk) = grid_for(xi, g, 25, 4);
        let (rg, rk) = grid_for(xi, rival, 25, 4);
        let mae_g = mean_roundtrip(&fields, &gg, &gk).0;
        let mae_r = mean_roundtrip(&fields, &rg, &rk).0;
        ok &= gap_g <= gap_r && mae_g <= mae_r;
        lines.push(format!(
            "xi {xi}: gap g {gap_g:.4} vs {name} {gap_r:.4}, mae g {mae_g:.5} vs {name} {mae_r:.5}"
        ));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn room_log_depth(seed: u64, lens: &LensModel) -> Raster {
    let pano = data::synth_panorama(&RoomSpec::random(seed), 256).unwrap();
    let s = data::warp_to_fisheye(&pano, lens, seed as f64 * 0.9, 64).unwrap();
    Raster::from_fn(64, 64, 1, |y, x, _| {
        let d = s.depth.get(y, x, 0);
        if d > 0.0 {
            d.ln()
        } else {
            0.0
        }
    })
}

fn knn_ablation() -> Outcome {
    let xi = 0.25;
    let lens = LensModel::new(xi, fov()).unwrap();
    let fields: Vec<Raster> = (0..8).map(|s| room_log_depth(s, &lens)).collect();
    let g = RadialProfile::G(GFunction::reference(fov()));
    let mut maes = Vec::new();
    let mut rel_last = 0.0;
    for s_phi in [4, 8, 16, 25] {
        let (grid, knn) = grid_for(xi, g, s_phi, 4);
        let (mae, rel) = mean_roundtrip(&fields, &grid, &knn);
        maes.push(mae);
        rel_last = rel;
    }
    let decreasing = maes.windows(2).all(|w| w[1] < w[0]);
    let detail = format!(
        "mae 4x4..25x4 {:?}, 25x4 relative {:.3}%",
        maes.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>(),
        100.0 * rel_last
    );
    if decreasing && rel_last < 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn op_gradient_error() -> f64 {
    let x0: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.05 * i as f64).collect();
    let w: Vec<f64> = (0..12).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.2).collect();
    type Op = Box<dyn Fn(&Tensor) -> Tensor>;
    let ops: Vec<Op> = vec![
        Box::new(|x| x.softmax().unwrap()),
        Box::new(|x| x.layer_norm(1e-5).unwrap()),
        Box::new(|x| x.gelu()),
        Box::new(|x| x.mul(x).unwrap().add_scalar(1.0).sqrt()),
        Box::new(|x| x.matmul(&x.permute(&[1, 0]).unwrap()).unwrap()),
        Box::new(|x| x.permute(&[1, 0]).unwrap().reshape(&[4, 3]).unwrap()),
    ];
    let mut worst: f64 = 0.0;
    for op in &ops {
        let loss = |v: &[f64]| {
            let x = Tensor::new(&[3, 4], v.to_vec()).unwrap();
            let y = op(&x);
            let wt = Tensor::new(y.shape(), w[..y.len()].to_vec()).unwrap();
            y.mul(&wt).unwrap().sum().item()
        };
        let x = Tensor::param(&[3, 4], x0.clone()).unwrap();
        let y = op(&x);
        let wt = Tensor::new(y.shape(), w[..y.len()].to_vec()).unwrap();
        y.mul(&wt).unwrap().sum().backward().unwrap();
        let num = numeric_gradient(&x0, 1e-6, loss);
        worst = worst.max(max_relative_error(&x.grad().unwrap(), &num, 1e-3));
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let op_err = op_gradient_error();
    let c = ModelConfig {
        n_r: 4,
        n_phi: 8,
        embed_dim: 4,
        depths: vec![2, 2],
        heads: vec![1, 2],
        window: [4, 4],
        s_r: 2,
        s_phi: 2,
        image_size: 16,
        ..ModelConfig::default()
    };
    let mut m = DarSwinUnet::new(c.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for v in m.params.values.iter_mut().flatten() {
        *v += 0.3 * rng.random_range(-1.0..1.0);
    }
    let lens = LensModel::from_degrees(0.3, 175.0).unwrap();
    let geom = Arc::new(Geometry::new(&c, &lens).unwrap());
    let rgb = Raster::from_fn(16, 16, 3, |y, x, ch| {
        (0.3 * x as f64 + 0.2 * y as f64 + ch as f64).sin() * 0.5 + 0.5
    });
    let depth = Raster::from_fn(16, 16, 1, |y, x, _| 1.0 + 0.1 * (x + y) as f64);
    let ex = Example::new(geom, &rgb, &depth, &[true; 256]).unwrap();
    let (_, grads) = m.loss_and_grads(&ex, metrics::SI_LAMBDA).unwrap();
    let mut model_err: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        let num = numeric_gradient(&m.params.values[i], 1e-5, |v| {
            let mut mm = m.clone();
            mm.params.values[i] = v.to_vec();
            mm.loss(&ex, metrics::SI_LAMBDA).unwrap()
        });
        model_err = model_err.max(max_relative_error(grad, &num, 1e-3));
    }
    let elapsed = within(Duration::from_secs(120), t)?;
    let detail = format!("ops {op_err:.2e}, model {model_err:.2e} in {elapsed:.1?}");
    if op_err < 1e-6 && model_err < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_training() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let lens = LensModel::from_degrees(0.3, 175.0).unwrap();
    let geom = Arc::new(Geometry::new(&cfg, &lens).unwrap());
    let examples: Vec<Example> = (0..8u64)
        .map(|i| {
            let pano = data::synth_panorama(&RoomSpec::random(i / 4), 128).unwrap();
            let s = data::warp_to_fisheye(&pano, &lens, (i % 4) as f64 * 1.57 + 0.3, 64).unwrap();
            Example::new(geom.clone(), &s.rgb, &s.depth, &s.mask).unwrap()
        })
        .collect();
    let mut model = DarSwinUnet::new(cfg, 0).unwrap();
    let initial = model.mean_loss(&examples, metrics::SI_LAMBDA).unwrap();
    let tc = TrainConfig::default();
    model.train(&examples, &tc, |_, _, _| {}).map_err(|e| e.to_string())?;
    let last = model.mean_loss(&examples, metrics::SI_LAMBDA).unwrap();
    let elapsed = within(Duration::from_secs(600), t)?;
    let reduction = 1.0 - last / initial;
    let detail = format!(
        "loss {initial:.4} -> {last:.4} ({:.1}% reduction) after {} steps in {elapsed:.1?}",
        100.0 * reduction,
        tc.steps
    );
    if tc.steps <= 500 && reduction >= 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cli(args: &[&str]) -> Result<(Vec<u8>, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_darswin"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "darswin {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok((out.stdout, out.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn zero_shot() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = dir.path().join("ds");
    cli(&[
        "gen-dataset", "--out", s(&ds), "--group", "low", "--count", "8", "--panos", "2",
        "--pano-height", "128", "--size", "32", "--test-suite", "--seed", "1",
    ])?;
    let ckpt = dir.path().join("low.ckpt");
    let train = ds.join("train_low.jsonl");
    cli(&[
        "train", "--manifest", s(&train), "--out", s(&ckpt), "--steps", "30", "--batch-size", "4",
        "--n-r", "8", "--samples", "8x4",
    ])?;
    let manifests: Vec<PathBuf> = data::test_xis(false)
        .iter()
        .map(|xi| ds.join(format!("test_xi_{xi:.2}.jsonl")))
        .collect();
    let csv = dir.path().join("eval.csv");
    let mut args = vec!["eval", "--ckpt", s(&ckpt), "--out", s(&csv), "--manifest"];
    args.extend(manifests.iter().map(|p| s(p)));
    cli(&args)?;
    let text = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect();
    let xis: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let expected = data::test_xis(false);
    let finite = rows.iter().all(|r| r.len() == 9 && r.iter().all(|v| v.is_finite()));
    let same_xis = xis.len() == 20 && xis.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-9);
    let d1: Vec<String> = rows.iter().map(|r| format!("{:.2}", r[5])).collect();
    let detail = format!("{} rows, delta1 per xi [{}]", rows.len(), d1.join(" "));
    if finite && same_xis {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = root.path().join("w");
    let run = |threads: &str| -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
        if work.exists() {
            std::fs::remove_dir_all(&work).unwrap();
        }
        std::fs::create_dir_all(&work).unwrap();
        let w = |name: &str| work.join(name);
        let mut logs = Vec::new();
        let mut log = |r: (Vec<u8>, Vec<u8>)| {
            logs.extend(r.0);
            logs.extend(r.1);
        };
        log(cli(&["--threads", threads, "optimize-sampling", "--m-steps", "12", "--b-steps", "8", "--out", s(&w("rank.csv"))])?);
        log(cli(&["--threads", threads, "sample-grid", "--xi", "0.7", "--out", s(&w("grid.csv"))])?);
        log(cli(&["--threads", threads, "tokenize-roundtrip", "--source", "room", "--fields", "2", "--seed", "5"])?);
        log(cli(&[
            "--threads", threads, "gen-dataset", "--out", s(&w("ds")), "--count", "4", "--panos", "2",
            "--pano-height", "64", "--size", "32", "--seed", "9", "--test-suite",
        ])?);
        log(cli(&[
            "--threads", threads, "train", "--manifest", s(&w("ds/train_low.jsonl")), "--out", s(&w("m.ckpt")),
            "--steps", "4", "--batch-size", "2", "--n-r", "4", "--n-phi", "16", "--samples", "4x2",
            "--depths", "1,1", "--heads", "1,2",
            "--seed", "9", "--log", s(&w("loss.csv")),
        ])?);
        log(cli(&[
            "--threads", threads, "eval", "--ckpt", s(&w("m.ckpt")), "--out", s(&w("eval.csv")),
            "--manifest", s(&w("ds/test_xi_0.45.jsonl")),
        ])?);
        log(cli(&[
            "--threads", threads, "cubemap", "--in", s(&w("ds/panos/room_000.png")), "--lens",
            s(&write_lens(&work)), "--out", s(&w("cube.png")),
        ])?);
        let mut files = read_tree(&work);
        files.push((PathBuf::from("<stdio>"), logs));
        Ok(files)
    };
    let a = run("1")?;
    let b = run("3")?;
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let detail = format!("{} artifacts compared across 1 and 3 threads", a.len());
    if a.len() == b.len() && differing.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; differing: {differing:?}"))
    }
}

fn write_lens(dir: &Path) -> PathBuf {
    let p = dir.join("lens.json");
    std::fs::write(&p, r#"{"model":"unified","xi":0.4,"fov_deg":175.0}"#).unwrap();
    p
}

fn main() {
    type Check = (&'static str, fn() -> Outcome);
    let criteria: [Check; 9] = [
        ("sampling optimum", sampling_optimum),
        ("lens roundtrip", lens_roundtrip),
        ("endpoint monotonicity", endpoint_monotonicity),
        ("sparsity ordering", sparsity_ordering),
        ("k-NN ablation trend", knn_ablation),
        ("gradient correctness", gradient_correctness),
        ("toy training", toy_training),
        ("zero-shot evaluation", zero_shot),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("criterion {} {name}: PASS {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
