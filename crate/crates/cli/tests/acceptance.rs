//! End-to-end acceptance checks, one line per criterion. Run with
//! `cargo test -p stereosig-cli --test acceptance`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereosig::autodiff::gradcheck::{grad_check, op_suite, GradCheckOptions};
use stereosig::autodiff::{Tape, Tensor};
use stereosig::costvol::{build_volumes, census_transform, chroma_cost_volume, hamming_cost_volume, CostType};
use stereosig::evalmetrics::{avg_abs_error, d1_rate, outlier_rate};
use stereosig::imageio::{encode_ppm, DisparityMap};
use stereosig::network::{
    build_model, load_weights, network_grad_check, predict_disparity, save_weights, trace_shapes, ModelConfig,
    UpsampleMode,
};
use stereosig::preprocess::{downsample2x, rgb_to_yuv, PlanarImage};
use stereosig::synthstereo::{dataset_sample, non_occluded_mask, SceneOptions};
use stereosig::trainer::{
    initial_weights, robust_loss, robust_penalty, train_loop, Checkpoint, Sample, TrainConfig, TrainOutputs,
};

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for seed in 0..5 {
        for (name, e) in op_suite(seed).map_err(err)? {
            if e > worst_op.1 {
                worst_op = (name, e);
            }
        }
    }
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.4, -1.3, 2.2, 0.9]).map_err(err)?;
    let identity = grad_check(&[x], 0, 4, |_: &mut Tape, v| Ok(v[0])).map_err(err)?.worst();
    let cfg = ModelConfig { disparities: 8, ..ModelConfig::three_level() };
    let mut net = 0.0f64;
    for seed in 0..5 {
        let opts = GradCheckOptions { freeze_branches: true, ..GradCheckOptions::new(6) };
        net = net.max(network_grad_check(&cfg, 16, 16, seed, opts).map_err(err)?.worst().1);
    }
    let elapsed = t.elapsed();
    let ok = worst_op.1 <= 1e-2 && net <= 1e-2 && identity <= 1e-6 && elapsed < Duration::from_secs(300);
    Ok((
        ok,
        format!(
            "worst op {} {:.2e}, full network {net:.2e}, identity {identity:.1e}, 5 seeds in {:.0} s",
            worst_op.0,
            worst_op.1,
            elapsed.as_secs_f64()
        ),
    ))
}

fn census_oracle(p: &PlanarImage) -> Vec<u32> {
    let (w, h) = (p.width() as i64, p.height() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = p.at(0, x as usize, y as usize);
            let mut code = 0u32;
            let mut bit = 0;
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    if (dx, dy) == (0, 0) {
                        continue;
                    }
                    let v = p.at(0, (x + dx).clamp(0, w - 1) as usize, (y + dy).clamp(0, h - 1) as usize);
                    code |= ((v < c) as u32) << bit;
                    bit += 1;
                }
            }
            out.push(code);
        }
    }
    out
}

fn columns(x: usize, d: usize, w: usize) -> (usize, usize) {
    match (d >= w, x < d) {
        (true, _) => (w - 1, 0),
        (false, true) => (d, 0),
        (false, false) => (x, x - d),
    }
}

fn cost_volumes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (n, d) = (16, 8);
    let mut fill_checks = 0;
    for _ in 0..20 {
        let mut img = || PlanarImage::from_plane(n, n, (0..n * n).map(|_| rng.random_range(0..10) as f32 * 9.0).collect());
        let (l, r) = (img(), img());
        let (cl, cr) = (census_transform(&l), census_transform(&r));
        let (ol, or) = (census_oracle(&l), census_oracle(&r));
        if cl.codes != ol || cr.codes != or {
            return Ok((false, "census codes differ from the oracle".into()));
        }
        let hv = hamming_cost_volume(&cl, &cr, d).map_err(err)?;
        let cv = chroma_cost_volume(&l, &r, d).map_err(err)?;
        for y in 0..n {
            for x in 0..n {
                for k in 0..d {
                    let (xl, xr) = columns(x, k, n);
                    let ham = (ol[y * n + xl] ^ or[y * n + xr]).count_ones() as f32;
                    let abs = (l.at(0, xl, y) - r.at(0, xr, y)).abs();
                    if hv.at(x, y, k) != ham || cv.at(x, y, k) != abs {
                        return Ok((false, format!("mismatch at x={x} y={y} d={k}")));
                    }
                    if x < k {
                        fill_checks += 1;
                        if hv.at(x, y, k) != hv.at(k, y, k) || cv.at(x, y, k) != cv.at(k, y, k) {
                            return Ok((false, format!("fill rule broken at x={x} d={k}")));
                        }
                    }
                }
            }
        }
    }
    Ok((true, format!("20 random 16x16 pairs at D=8 bit-exact, {fill_checks} fill-rule cells")))
}

fn wta() -> Outcome {
    let opts = SceneOptions::new(128, 96);
    let (mut hits, mut total, mut px_hits, mut px_total) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..20 {
        let s = dataset_sample(5, i, opts).map_err(err)?;
        let noc = non_occluded_mask(&s).map_err(err)?;
        let ly = downsample2x(&rgb_to_yuv(&s.left));
        let ry = downsample2x(&rgb_to_yuv(&s.right));
        let win = hamming_cost_volume(&census_transform(&ly), &census_transform(&ry), 32).map_err(err)?.winner_take_all();
        let (w, hw, hh) = (s.gt.width(), ly.width() as i64, ly.height() as i64);
        let gt = s.gt.values();
        let surface = |x: i64, y: i64, d: f32| {
            if x < 0 || y < 0 || x >= hw || y >= hh {
                return false;
            }
            let (fx, fy) = (2 * x as usize, 2 * y as usize);
            [(fx, fy), (fx + 1, fy), (fx, fy + 1), (fx + 1, fy + 1)].iter().all(|&(a, b)| noc[b * w + a] && gt[b * w + a] == d)
        };
        let yplane = ly.plane(0);
        for hy in 0..hh {
            for hx in 0..hw {
                let d = gt[2 * hy as usize * w + 2 * hx as usize];
                let hit = (win[(hy * hw + hx) as usize] as f32 == d / 2.0) as usize;
                if surface(hx, hy, d) {
                    let vals: Vec<f32> = (0..25)
                        .map(|k| {
                            let y = (hy + k / 5 - 2).clamp(0, hh - 1);
                            let x = (hx + k % 5 - 2).clamp(0, hw - 1);
                            yplane[(y * hw + x) as usize]
                        })
                        .collect();
                    let mean = vals.iter().sum::<f32>() / 25.0;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 25.0;
                    if var >= 1.0 {
                        px_total += 1;
                        px_hits += hit;
                    }
                }
                if (-2..=2).all(|dy| (-2..=2).all(|dx| surface(hx + dx, hy + dy, d))) {
                    total += 1;
                    hits += hit;
                }
            }
        }
    }
    let rate = hits as f64 / total as f64;
    let px_rate = px_hits as f64 / px_total as f64;
    Ok((
        rate >= 0.95,
        format!(
            "{:.2}% of {total} window-interior pixels (textured single-pixel count: {:.2}% of {px_total})",
            100.0 * rate,
            100.0 * px_rate
        ),
    ))
}

fn loss() -> Outcome {
    let anchors = [0.0f32, 0.5, -1.0, 1.0].iter().all(|&e| robust_penalty(e, 1.0) == 1.0)
        && robust_penalty(256.0, 1.0) == 2.0
        && robust_penalty(-256.0, 1.0) == 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut errs: Vec<f32> = (0..1000).map(|_| rng.random_range(-500.0..500.0)).collect();
    errs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let monotone = errs.windows(2).all(|p| robust_penalty(p[0], 1.0) <= robust_penalty(p[1], 1.0));
    let gt = DisparityMap::dense(4, 1, vec![10.0; 4]).map_err(err)?;
    let clipped = robust_loss(&[10.0, 10.5, 9.2, 11.0], &gt, 1.0).map_err(err)?;
    let clipped_zero = clipped.grad.iter().all(|&g| g == 0.0) && clipped.value == 1.0;
    Ok((
        anchors && monotone && clipped_zero,
        format!("anchors {anchors}, monotone over 1000 errors {monotone}, clipped gradient zero {clipped_zero}"),
    ))
}

fn shapes() -> Outcome {
    let get = |cfg: &ModelConfig, name: &str| -> Result<[usize; 4], String> {
        trace_shapes(cfg, 1242, 375)
            .map_err(err)?
            .into_iter()
            .rfind(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| format!("no stage {name}"))
    };
    let full = ModelConfig::default();
    let census = ModelConfig::census_only();
    let half = get(&full, "half_res")?;
    let pad = get(&full, "pad")?;
    let bottleneck = get(&full, &format!("enc.{}.conv{}", full.levels, full.convs_per_scale - 1))?;
    let out = get(&full, "output")?;
    let census_in = get(&census, "half_res")?[1];
    let ok = half == [1, 384, 188, 621]
        && pad[2..] == [192, 640]
        && bottleneck[2..] == [6, 20]
        && out[2..] == [375, 1242]
        && census_in == 128;
    Ok((
        ok,
        format!(
            "1242x375 -> {}x{} ({} ch) -> padded {}x{} -> bottleneck {}x{} -> {}x{}; census-only {census_in} ch",
            half[3], half[2], half[1], pad[3], pad[2], bottleneck[3], bottleneck[2], out[3], out[2]
        ),
    ))
}

fn toy_training() -> Outcome {
    let t = Instant::now();
    let opts = SceneOptions::new(96, 96);
    let data: Vec<Sample> = (0..200).map(|i| dataset_sample(1, i, opts)).collect::<Result<_, _>>().map_err(err)?;
    let held: Vec<Sample> = (200..220).map(|i| dataset_sample(1, i, opts)).collect::<Result<_, _>>().map_err(err)?;
    let cfg = TrainConfig::parse(
        "iterations = 2000\nlr = 1e-4\ntau = 1\nswap_flip = true\nscale_aug = true\n\
         disparities = 32\nlevels = 3\nbase_channels = 16\ncheckpoint_interval = 0\nnorm_samples = 32",
    )
    .map_err(err)?;
    let start = Checkpoint::fresh(initial_weights(&cfg, &data).map_err(err)?, &cfg);
    let none = TrainOutputs { checkpoint_dir: None, log_path: None };
    let out = train_loop(&data, &cfg, start, &none).map_err(err)?;
    let (mut sum, mut n, mut bad) = (0.0f64, 0usize, 0usize);
    for s in &held {
        let p = predict_disparity(&s.left, &s.right, &out.state.weights, &cfg.model, UpsampleMode::DiscontinuityAware)
            .map_err(err)?;
        for ((a, b), &ok) in p.values().iter().zip(s.gt.values()).zip(s.gt.valid()) {
            if ok {
                let e = (a - b).abs() as f64;
                sum += e;
                n += 1;
                bad += (e > 3.0) as usize;
            }
        }
    }
    let (avg, out3) = (sum / n as f64, 100.0 * bad as f64 / n as f64);
    let elapsed = t.elapsed();
    Ok((
        avg < 1.5 && out3 < 15.0 && elapsed < Duration::from_secs(45 * 60),
        format!("held-out avg {avg:.3} px, >3px {out3:.2}%, {:.1} min", elapsed.as_secs_f64() / 60.0),
    ))
}

fn ablations() -> Outcome {
    let data: Vec<Sample> = (0..2).map(|i| dataset_sample(4, i, SceneOptions::new(96, 96))).collect::<Result<_, _>>().map_err(err)?;
    let mut notes = Vec::new();
    for (name, model) in [("census-only", ModelConfig::census_only()), ("3-level", ModelConfig::three_level())] {
        let cfg = TrainConfig { model, ..TrainConfig::parse("iterations = 1\nbatch_size = 1\nnorm_samples = 2").map_err(err)? };
        let start = Checkpoint::fresh(build_model(&cfg.model, 0).map_err(err)?, &cfg);
        let out = train_loop(&data, &cfg, start, &TrainOutputs { checkpoint_dir: None, log_path: None }).map_err(err)?;
        let p = predict_disparity(&data[0].left, &data[0].right, &out.state.weights, &cfg.model, UpsampleMode::DiscontinuityAware)
            .map_err(err)?;
        if (p.width(), p.height()) != (96, 96) {
            return Ok((false, format!("{name}: output is {}x{}", p.width(), p.height())));
        }
        notes.push(format!("{name} loss {:.4}", out.log[0].loss));
    }
    let y = PlanarImage::new(8, 8, 3, vec![1.0; 192]);
    let volumes = build_volumes(&y, &y, 4, &[CostType::Census]).map_err(err)?.len();
    Ok((volumes == 1, format!("{}; census-only builds {volumes} volume", notes.join(", "))))
}

fn determinism() -> Outcome {
    let data: Vec<Sample> = (0..8).map(|i| dataset_sample(6, i, SceneOptions::new(96, 96))).collect::<Result<_, _>>().map_err(err)?;
    let cfg = TrainConfig::parse(
        "iterations = 50\nlr = 1e-3\nbatch_size = 2\ndisparities = 16\nlevels = 3\nbase_channels = 8\n\
         signature_dims = 16,8\nstem_channels = 8\ncheckpoint_interval = 0\nnorm_samples = 8",
    )
    .map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let mut logs = Vec::new();
    let mut weights = None;
    for run in 0..2 {
        let log_path = dir.path().join(format!("run{run}.csv"));
        let start = Checkpoint::fresh(build_model(&cfg.model, 0).map_err(err)?, &cfg);
        let out = TrainOutputs { checkpoint_dir: None, log_path: Some(log_path.clone()) };
        weights = Some(train_loop(&data, &cfg, start, &out).map_err(err)?.state.weights);
        logs.push(std::fs::read(&log_path).map_err(err)?);
    }
    let w = weights.expect("two runs");
    let path = dir.path().join("model.fdsc");
    save_weights(&w, &path).map_err(err)?;
    let loaded = load_weights(&path).map_err(err)?;
    let s = &data[0];
    let bits = |w| -> Result<Vec<u32>, String> {
        let p = predict_disparity(&s.left, &s.right, w, &cfg.model, UpsampleMode::DiscontinuityAware).map_err(err)?;
        Ok(p.values().iter().map(|v| v.to_bits()).collect())
    };
    let same_log = logs[0] == logs[1];
    let same_infer = bits(&w)? == bits(&loaded)?;
    Ok((
        same_log && same_infer,
        format!("50-iteration loss logs identical {same_log}, reloaded inference bit-identical {same_infer}"),
    ))
}

fn metrics() -> Outcome {
    // (pred, gt, valid, avg, >3px %, D1 %)
    let cases: [([f32; 4], [f32; 4], [bool; 4], f64, f64, f64); 5] = [
        ([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0], [true; 4], 0.0, 0.0, 0.0),
        ([11.0, 13.0, 13.5, 20.0], [10.0; 4], [true; 4], 4.375, 50.0, 50.0),
        ([104.0, 106.0, 100.0, 100.0], [100.0; 4], [true; 4], 2.5, 50.0, 25.0),
        ([95.0, 200.0, 180.0, 1.0], [100.0, 200.0, 190.0, 1.0], [true; 4], 3.75, 50.0, 25.0),
        ([50.0, 0.0, 14.0, 2.0], [1.0, 5.0, 10.0, 2.0], [false, true, true, false], 4.5, 100.0, 100.0),
    ];
    for (i, (p, g, v, avg, o3, d1)) in cases.iter().enumerate() {
        let pred = DisparityMap::dense(2, 2, p.to_vec()).map_err(err)?;
        let gt = DisparityMap::new(2, 2, g.to_vec(), v.to_vec()).map_err(err)?;
        let got = (
            avg_abs_error(&pred, &gt).map_err(err)?,
            outlier_rate(&pred, &gt, 3.0, None).map_err(err)?,
            d1_rate(&pred, &gt, None).map_err(err)?,
        );
        if got != (*avg, *o3, *d1) {
            return Ok((false, format!("case {i}: got {got:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let p: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..100.0)).collect();
        let g: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..100.0)).collect();
        let (pred, gt) = (DisparityMap::dense(8, 8, p).map_err(err)?, DisparityMap::dense(8, 8, g).map_err(err)?);
        let rates: Vec<f64> = [0.5f32, 1.0, 2.0, 3.0, 5.0, 10.0, 30.0]
            .iter()
            .map(|&t| outlier_rate(&pred, &gt, t, None))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        if rates.windows(2).any(|r| r[0] < r[1]) {
            return Ok((false, format!("outlier rate not monotone: {rates:?}")));
        }
    }
    Ok((true, "5 crafted cases exact, outlier rate monotone over 200 random maps".into()))
}

fn cost_volume_ms(bin: &Path, left: &Path, right: &Path, threads: usize) -> Result<f64, String> {
    let out = Command::new(bin)
        .args(["bench", "--reps", "3", "--threads", &threads.to_string(), "--left"])
        .arg(left)
        .arg("--right")
        .arg(right)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    text.lines()
        .find_map(|l| l.strip_prefix("cost_volumes"))
        .and_then(|rest| rest.split_whitespace().nth(1))
        .and_then(|min| min.parse().ok())
        .ok_or_else(|| format!("no cost_volumes line in bench output:\n{text}"))
}

/// Returns whether the outcome gates the exit status, plus the outcome.
fn benchmark() -> (bool, Outcome) {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let gating = cores >= 4;
    let run = || -> Outcome {
        let dir = tempfile::tempdir().map_err(err)?;
        let s = dataset_sample(8, 0, SceneOptions::new(1242, 375)).map_err(err)?;
        let (l, r) = (dir.path().join("l.ppm"), dir.path().join("r.ppm"));
        std::fs::write(&l, encode_ppm(&s.left)).map_err(err)?;
        std::fs::write(&r, encode_ppm(&s.right)).map_err(err)?;
        let bin = Path::new(env!("CARGO_BIN_EXE_stereosig"));
        let one = cost_volume_ms(bin, &l, &r, 1)?;
        let four = cost_volume_ms(bin, &l, &r, 4)?;
        let speedup = one / four;
        let note = if gating { String::new() } else { format!("; only {cores} core(s), not gating") };
        Ok((speedup >= 2.0, format!("cost volumes {one:.1} ms at 1 thread, {four:.1} ms at 4, speedup {speedup:.2}x{note}")))
    };
    (gating, run())
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradients),
        ("cost-volume oracle", cost_volumes),
        ("census WTA on synthetic scenes", wta),
        ("loss anchors", loss),
        ("shape chain", shapes),
        ("toy end-to-end training", toy_training),
        ("ablation parity", ablations),
        ("determinism and serialization", determinism),
        ("metrics oracle", metrics),
    ];
    let mut failed = 0;
    let mut report = |name: &str, gating: bool, o: Outcome| {
        let (pass, detail) = o.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        failed += (!pass && gating) as usize;
    };
    for (name, f) in checks {
        report(name, true, f());
    }
    let (gating, o) = benchmark();
    report("benchmark thread scaling", gating, o);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} gating criteria failed");
        ExitCode::FAILURE
    }
}
