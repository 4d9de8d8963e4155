//! Command-line entry point for the stereo pipeline.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use stereosig::autodiff::gradcheck::{op_suite, GradCheckOptions};
use stereosig::costvol::{build_volumes, CostType};
use stereosig::evalmetrics::{eval_report, write_csv, Variant};
use stereosig::imageio::{colorize_disparity, decode_ppm, encode_disp16, encode_ppm, write_atomic, RawImage};
use stereosig::network::{
    build_model, load_weights, network_grad_check, predict_disparity_timed, save_weights, ModelConfig, StageTimes,
    UpsampleMode,
};
use stereosig::preprocess::{downsample2x, rgb_to_yuv};
use stereosig::synthstereo::{generate_dataset, SceneOptions};
use stereosig::trainer::{
    initial_weights, train_loop, Checkpoint, DirectorySource, SampleSource, TrainConfig, TrainOutputs,
};
use stereosig::{Error, Result};

#[derive(Parser)]
#[command(name = "stereosig", version, about = "Fast learned stereo disparity estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Nearest-neighbor upsampling, as used in training.
    Train,
    /// Discontinuity-aware bilinear upsampling.
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Predict a disparity map for a rectified pair.
    Infer {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Output 16-bit PGM disparity map.
        #[arg(long)]
        out: PathBuf,
        /// Optional color-coded visualization (PPM).
        #[arg(long)]
        vis: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        mode: Mode,
    },
    /// Train from a config file on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with left/, right/, disp_left/ and optional disp_right/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// CSV loss log (default: <out-weights>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Directory for periodic checkpoints (default: next to the weights).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Score predicted disparity maps against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Non-occluded masks (PGM16, nonzero = inside).
        #[arg(long)]
        noc_dir: Option<PathBuf>,
        /// Object masks (PGM16, nonzero = foreground).
        #[arg(long)]
        obj_dir: Option<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Dump the raw half-resolution cost volumes of a pair.
    Costvol {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        census_only: bool,
        #[arg(long, default_value_t = 128)]
        disparities: usize,
    },
    /// Generate a synthetic stereo dataset.
    Synth {
        #[arg(long)]
        count: usize,
        /// Image size as WIDTHxHEIGHT.
        #[arg(long, default_value = "96x96", value_parser = parse_dims)]
        dims: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Time the pipeline stages on one pair.
    Bench {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Trained weights; a default-config model is built when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid dimension {v:?}"));
    Ok((p(w)?, p(h)?))
}

fn read_ppm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).map_err(|e| Error::io(path, e))
}

fn infer(left: &Path, right: &Path, weights: &Path, out: &Path, vis: Option<&Path>, mode: Mode) -> Result<()> {
    let (l, r) = (read_ppm(left)?, read_ppm(right)?);
    let w = load_weights(weights)?;
    let cfg = ModelConfig::infer_from(&w)?;
    let mode = match mode {
        Mode::Train => UpsampleMode::Nearest,
        Mode::Test => UpsampleMode::DiscontinuityAware,
    };
    let (map, _) = predict_disparity_timed(&l, &r, &w, &cfg, mode)?;
    let (bytes, clamped) = encode_disp16(&map);
    if clamped > 0 {
        eprintln!("warning: {clamped} pixels clamped to the PGM16 disparity range");
    }
    let vis_bytes = vis.map(|_| encode_ppm(&colorize_disparity(&map, (2 * cfg.disparities) as f32)));
    write(out, &bytes)?;
    if let (Some(p), Some(b)) = (vis, vis_bytes) {
        write(p, &b)?;
    }
    Ok(())
}

fn train(
    config: &Path,
    data: &Path,
    out_weights: &Path,
    resume: Option<&Path>,
    log: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let source = DirectorySource::open(data)?;
    let state = match resume {
        Some(p) => Checkpoint::load(p, &cfg)?,
        None => Checkpoint::fresh(initial_weights(&cfg, &source)?, &cfg),
    };
    let default_dir = out_weights.parent().map(|p| p.join("checkpoints")).unwrap_or_else(|| "checkpoints".into());
    let outputs = TrainOutputs {
        checkpoint_dir: Some(checkpoint_dir.unwrap_or(default_dir)),
        log_path: Some(log.unwrap_or_else(|| {
            let mut p = out_weights.as_os_str().to_owned();
            p.push(".log.csv");
            p.into()
        })),
    };
    let start = state.adam.step;
    let outcome = train_loop(&source, &cfg, state, &outputs)?;
    save_weights(&outcome.state.weights, out_weights)?;
    match outcome.log.last() {
        Some(last) => println!(
            "trained iterations {}..{} on {} pairs, final loss {:.6}",
            start + 1,
            last.iter,
            source.len(),
            last.loss
        ),
        None => println!("nothing to do: checkpoint already at iteration {start}"),
    }
    Ok(())
}

fn eval(pred: &Path, gt: &Path, noc: Option<&Path>, obj: Option<&Path>, csv: &Path) -> Result<()> {
    let report = eval_report(pred, gt, noc, obj)?;
    write_csv(&report, csv)?;
    for (v, m) in &report.aggregates {
        let name = match v {
            Variant::All => "all",
            Variant::Noc => "noc",
            Variant::Fg => "fg",
            Variant::Bg => "bg",
        };
        println!(
            "{name:>4}: avg {:.4} px  >2px {:.3}%  >3px {:.3}%  >4px {:.3}%  >5px {:.3}%  D1 {:.3}%  ({} px)",
            m.avg_err, m.outliers[0], m.outliers[1], m.outliers[2], m.outliers[3], m.d1, m.valid_px
        );
    }
    Ok(())
}

fn costvol(left: &Path, right: &Path, out: &Path, census_only: bool, disparities: usize) -> Result<()> {
    let (l, r) = (read_ppm(left)?, read_ppm(right)?);
    if (l.width(), l.height()) != (r.width(), r.height()) {
        return Err(Error::Dimensions("left and right images differ in size".into()));
    }
    let costs: &[CostType] = if census_only { &[CostType::Census] } else { &CostType::ALL };
    let ly = downsample2x(&rgb_to_yuv(&l));
    let ry = downsample2x(&rgb_to_yuv(&r));
    let mut bytes = Vec::new();
    for v in build_volumes(&ly, &ry, disparities, costs)? {
        v.write_fvol(&mut bytes).map_err(|e| Error::io(out, e))?;
    }
    write(out, &bytes)
}

fn synth(count: usize, dims: (usize, usize), seed: u64, out: &Path) -> Result<()> {
    generate_dataset(count, SceneOptions::new(dims.0, dims.1), seed, out)?;
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

const OP_TOLERANCE: f64 = 1e-2;
const IDENTITY_TOLERANCE: f64 = 1e-6;

fn gradcheck(seed: u64, seeds: u64) -> Result<bool> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name.to_string(), err)),
    };
    let net_cfg = ModelConfig { disparities: 8, ..ModelConfig::three_level() };
    let opts = GradCheckOptions { max_checks: 8, freeze_branches: true, ..GradCheckOptions::new(0) };
    for s in seed..seed + seeds {
        for (name, err) in op_suite(s)? {
            record(name, err);
        }
        let net = network_grad_check(&net_cfg, 16, 16, s, opts)?;
        record("full_network", net.worst().1);
    }
    let mut ok = true;
    for (name, err) in &worst {
        let tol = if name == "identity" { IDENTITY_TOLERANCE } else { OP_TOLERANCE };
        let pass = *err <= tol;
        ok &= pass;
        println!("{:<20} max rel err {err:.3e}  (tol {tol:.0e})  {}", name, if pass { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn bench(left: &Path, right: &Path, weights: Option<&Path>, threads: Option<usize>, reps: usize) -> Result<()> {
    let (l, r) = (read_ppm(left)?, read_ppm(right)?);
    let w = match weights {
        Some(p) => load_weights(p)?,
        None => build_model(&ModelConfig::default(), 0)?,
    };
    let cfg = ModelConfig::infer_from(&w)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let reps = reps.max(1);
    let runs = pool.install(|| {
        (0..reps)
            .map(|_| predict_disparity_timed(&l, &r, &w, &cfg, UpsampleMode::DiscontinuityAware).map(|x| x.1))
            .collect::<Result<Vec<StageTimes>>>()
    })?;
    println!("{}x{} pair, D={}, {} threads, {reps} repetitions", l.width(), l.height(), cfg.disparities, pool.current_num_threads());
    println!("{:<14} {:>10} {:>10}", "stage", "mean ms", "min ms");
    let stages: [(&str, fn(&StageTimes) -> Duration); 4] = [
        ("cost_volumes", |t| t.cost_volumes),
        ("signature", |t| t.signature),
        ("spatial", |t| t.spatial),
        ("upsampling", |t| t.upsampling),
    ];
    let mut total = 0.0;
    for (name, get) in stages {
        let v: Vec<f64> = runs.iter().map(|t| ms(get(t))).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        total += mean;
        println!("{name:<14} {mean:>10.2} {:>10.2}", v.iter().copied().fold(f64::INFINITY, f64::min));
    }
    println!("{:<14} {total:>10.2}", "total");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Infer { left, right, weights, out, vis, mode } => {
            infer(&left, &right, &weights, &out, vis.as_deref(), mode)?
        }
        Command::Train { config, data, out_weights, resume, log, checkpoint_dir } => {
            train(&config, &data, &out_weights, resume.as_deref(), log, checkpoint_dir)?
        }
        Command::Eval { pred_dir, gt_dir, noc_dir, obj_dir, csv } => {
            eval(&pred_dir, &gt_dir, noc_dir.as_deref(), obj_dir.as_deref(), &csv)?
        }
        Command::Costvol { left, right, out, census_only, disparities } => {
            costvol(&left, &right, &out, census_only, disparities)?
        }
        Command::Synth { count, dims, seed, out } => synth(count, dims, seed, &out)?,
        Command::Gradcheck { seed, seeds } => return gradcheck(seed, seeds),
        Command::Bench { left, right, weights, threads, reps } => bench(&left, &right, weights.as_deref(), threads, reps)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
