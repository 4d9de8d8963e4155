use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereosig::imageio::DisparityMap;
use stereosig::network::{build_model, is_trainable, ModelConfig};
use stereosig::synthstereo::{dataset_sample, non_occluded_mask, SceneOptions};
use stereosig::trainer::{
    augment_scale, augment_swap_flip, checkpoint_file_name, initial_weights, parse_loss_log, robust_loss, robust_loss_batch,
    robust_penalty, train_loop, write_samples, Checkpoint, DirectorySource, Sample, SampleSource, TrainConfig,
    TrainOutputs,
};

#[test]
fn loss_anchors() {
    for e in [0.0f32, 0.25, -0.5, 1.0, -1.0] {
        assert_eq!(robust_penalty(e, 1.0), 1.0);
    }
    assert_eq!(robust_penalty(256.0, 1.0), 2.0);
    assert_eq!(robust_penalty(-256.0, 1.0), 2.0);
    assert_eq!(robust_penalty(16.0, 1.0), 2f64.sqrt());
}

#[test]
fn loss_is_monotone_in_absolute_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut errs: Vec<f32> = (0..1000).map(|_| rng.random_range(-300.0..300.0)).collect();
    errs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    for pair in errs.windows(2) {
        assert!(robust_penalty(pair[0], 1.0) <= robust_penalty(pair[1], 1.0), "{pair:?}");
    }
}

#[test]
fn gradient_is_zero_on_clipped_branch_and_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 64;
    let gt_values: Vec<f32> = (0..n).map(|_| rng.random_range(1.0..50.0)).collect();
    let valid: Vec<bool> = (0..n).map(|i| i % 9 != 0).collect();
    let gt = DisparityMap::new(8, 8, gt_values.clone(), valid.clone()).unwrap();
    let pred: Vec<f32> = gt_values
        .iter()
        .map(|g| {
            let e = if rng.random::<bool>() { rng.random_range(-0.9..0.9) } else { rng.random_range(1.5..20.0f32) * [-1.0, 1.0][rng.random_range(0..2)] };
            g + e
        })
        .collect();
    let out = robust_loss(&pred, &gt, 1.0).unwrap();
    assert_eq!(out.valid, valid.iter().filter(|v| **v).count());
    let h = 1e-2f32;
    for i in 0..n {
        let e = pred[i] - gt.values()[i];
        if !valid[i] || e.abs() <= 1.0 {
            assert_eq!(out.grad[i], 0.0, "pixel {i}");
            continue;
        }
        let eval = |delta: f32| {
            let mut p = pred.clone();
            p[i] += delta;
            robust_loss(&p, &gt, 1.0).unwrap().value
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
        let analytic = out.grad[i] as f64;
        assert!((numeric - analytic).abs() <= 1e-3 * analytic.abs().max(1e-4) + 1e-7, "pixel {i}: {analytic} vs {numeric}");
        assert_eq!(analytic.signum(), e.signum() as f64);
    }
}

#[test]
fn batch_loss_pools_over_valid_pixels() {
    let a = DisparityMap::new(2, 1, vec![10.0, 0.0], vec![true, false]).unwrap();
    let b = DisparityMap::dense(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
    let pred = [10.0 + 256.0, 99.0, 1.0, 2.0, 3.0];
    let out = robust_loss_batch(&pred, &[&a, &b], 1.0).unwrap();
    assert_eq!(out.valid, 4);
    assert_eq!(out.value, (2.0 + 3.0) / 4.0);
    assert_eq!(out.grad[1], 0.0);
}

#[test]
fn swap_flip_keeps_correspondence() {
    let opts = SceneOptions::new(96, 64);
    for i in 0..10 {
        let s = dataset_sample(21, i, opts).unwrap();
        let t = augment_swap_flip(&s).unwrap();
        for sample in [&s, &t] {
            let noc = non_occluded_mask(sample).unwrap();
            let (mut same, mut total) = (0, 0);
            for y in 0..64 {
                for x in 0..96 {
                    if !noc[y * 96 + x] {
                        continue;
                    }
                    let d = sample.gt.get(x, y).unwrap() as usize;
                    total += 1;
                    same += (sample.left.pixel(x, y) == sample.right.pixel(x - d, y)) as usize;
                }
            }
            assert!(total > 0);
            assert_eq!(same, total, "sample {i}");
        }
        assert_eq!(augment_swap_flip(&t).unwrap(), s);
    }
}

#[test]
fn scale_preserves_valid_fraction() {
    let opts = SceneOptions::new(96, 96);
    let mut ratios = Vec::new();
    for i in 0..20 {
        let mut s = dataset_sample(2, i, opts).unwrap();
        // sparse ground truth, as in real datasets
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let valid: Vec<bool> = (0..96 * 96).map(|_| rng.random_bool(0.4)).collect();
        s.gt = DisparityMap::new(96, 96, s.gt.values().to_vec(), valid).unwrap();
        let t = augment_scale(&s, 1.5).unwrap();
        assert_eq!((t.width(), t.height()), (64, 64));
        let before = s.gt.valid_count() as f64 / (96.0 * 96.0);
        let after = t.gt.valid_count() as f64 / (64.0 * 64.0);
        ratios.push(after / before);
        let max_before = s.gt.values().iter().cloned().fold(0.0, f32::max);
        assert!(t.gt.values().iter().all(|&v| v <= max_before / 1.5 + 1e-4));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
}

fn tiny_config(extra: &str) -> TrainConfig {
    TrainConfig::parse(&format!(
        "disparities = 8\nsignature_dims = 8,4\nstem_channels = 4\nbase_channels = 4\nchannel_increment = 4\n\
         levels = 3\nbatch_size = 2\ncheckpoint_interval = 0\nnorm_samples = 4\n{extra}"
    ))
    .unwrap()
}

fn tiny_data(n: usize) -> Vec<Sample> {
    (0..n).map(|i| dataset_sample(11, i, SceneOptions::new(96, 96)).unwrap()).collect()
}

fn fresh(cfg: &TrainConfig) -> Checkpoint {
    Checkpoint::fresh(build_model(&cfg.model, cfg.init_seed).unwrap(), cfg)
}

fn no_outputs() -> TrainOutputs {
    TrainOutputs { checkpoint_dir: None, log_path: None }
}

#[test]
fn fixed_seed_runs_give_identical_loss_logs() {
    let cfg = tiny_config("iterations = 50\nlr = 1e-3");
    let data = tiny_data(8);
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for run in 0..2 {
        let log_path = dir.path().join(format!("log{run}.csv"));
        let out = TrainOutputs { checkpoint_dir: None, log_path: Some(log_path.clone()) };
        let r = train_loop(&data, &cfg, fresh(&cfg), &out).unwrap();
        assert_eq!(r.log.len(), 50);
        logs.push((std::fs::read(&log_path).unwrap(), r.state.to_weights().to_bytes()));
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(parse_loss_log(std::str::from_utf8(&logs[0].0).unwrap()).unwrap().len(), 50);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = tiny_config("iterations = 3\nlr = 0");
    let start = fresh(&cfg);
    let r = train_loop(&tiny_data(4), &cfg, start.clone(), &no_outputs()).unwrap();
    for (name, t) in start.weights.iter().filter(|(n, _)| is_trainable(n)) {
        assert_eq!(r.state.weights.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = tiny_config("iterations = 6\nlr = 1e-3\ncheckpoint_interval = 3");
    let data = tiny_data(6);
    let dir = tempfile::tempdir().unwrap();
    let full = train_loop(
        &data,
        &cfg,
        fresh(&cfg),
        &TrainOutputs { checkpoint_dir: Some(dir.path().to_path_buf()), log_path: None },
    )
    .unwrap();
    let mid = Checkpoint::load(&dir.path().join(checkpoint_file_name(3)), &cfg).unwrap();
    assert_eq!(mid.adam.step, 3);
    let resumed = train_loop(&data, &cfg, mid, &no_outputs()).unwrap();
    assert_eq!(resumed.state.to_weights().to_bytes(), full.state.to_weights().to_bytes());
    let bits = |l: &[stereosig::trainer::LogEntry]| l.iter().map(|e| (e.iter, e.loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.log[resumed.log.len() - 3..]), bits(&full.log[3..]));
}

#[test]
fn overfits_a_single_sample() {
    let cfg = tiny_config("iterations = 200\nlr = 1e-4\nbatch_size = 1\nswap_flip = false\nscale_aug = false\nnorm_samples = 1");
    let data = tiny_data(1);
    let r = train_loop(&data, &cfg, fresh(&cfg), &no_outputs()).unwrap();
    let initial = r.log[0].loss;
    let last = r.log[190..].iter().map(|e| e.loss).sum::<f64>() / 10.0;
    assert!(r.log.last().unwrap().loss < initial && last < initial, "{initial} -> {last}");
}

#[test]
fn random_init_sets_head_bias_to_mean_disparity() {
    let cfg = tiny_config("norm_samples = 3");
    let data = tiny_data(5);
    let w = initial_weights(&cfg, &data).unwrap();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for s in &data[..3] {
        for (v, ok) in s.gt.values().iter().zip(s.gt.valid()) {
            if *ok {
                sum += *v as f64;
                n += 1;
            }
        }
    }
    let bias = w.get("head.bias").unwrap().data()[0] as f64;
    assert!((bias - sum / n as f64).abs() < 1e-4, "{bias}");
    let plain = build_model(&cfg.model, cfg.init_seed).unwrap();
    for (name, t) in plain.iter().filter(|(n, _)| n.as_str() != "head.bias") {
        assert_eq!(w.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn ablation_configs_take_a_training_step() {
    let data: Vec<Sample> = (0..2).map(|i| dataset_sample(5, i, SceneOptions::new(96, 96)).unwrap()).collect();
    for model in [ModelConfig::census_only(), ModelConfig::three_level()] {
        let cfg = TrainConfig { model, ..tiny_config("iterations = 1\nnorm_samples = 2") };
        let r = train_loop(&data, &cfg, fresh(&cfg), &no_outputs()).unwrap();
        assert_eq!(r.log.len(), 1);
        assert!(r.log[0].loss.is_finite());
    }
}

#[test]
fn directory_source_round_trip() {
    let data = tiny_data(3);
    let dir = tempfile::tempdir().unwrap();
    write_samples(&data, dir.path()).unwrap();
    let src = DirectorySource::open(dir.path()).unwrap();
    assert_eq!(src.len(), 3);
    for (i, s) in data.iter().enumerate() {
        assert_eq!(&src.get(i).unwrap(), s);
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(TrainConfig::parse("bogus = 1").is_err());
    assert!(TrainConfig::parse("lr = -1").is_err());
    assert!(TrainConfig::parse("tau = 0").is_err());
    assert!(TrainConfig::parse("levels = 4").is_err());
    let c = TrainConfig::parse("# comment\nlr_schedule = 10:1e-3, 5:1e-4\ncosts = census").unwrap();
    assert_eq!(c.total_iterations(), 15);
    assert_eq!((c.lr_at(9), c.lr_at(10)), (1e-3, 1e-4));
    assert_eq!(c.model.signature_input_channels(), 128);
}
