use std::fs;
use std::path::Path;

use colanet::checkpoint::Checkpoint;
use colanet::image_io::{load_image, save_image};
use colanet::network::{ModelConfig, ModelWeights};
use colanet::training::fixtures;
use colanet::Tensor;
use colanet_cli::run;
use tempfile::TempDir;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("colanet").chain(args.iter().copied()))
}

fn small_model() -> ModelConfig {
    ModelConfig { num_cab: 2, channels: 8, fem_depth: 2, tile: 24, tile_overlap: 8, ..ModelConfig::basic() }
}

fn write_checkpoint(dir: &Path, zero_tail: bool) -> String {
    let mut w = ModelWeights::<f32>::init(&small_model(), 5).unwrap();
    if zero_tail {
        for name in ["tail.weight", "tail.bias"] {
            w.param_mut(name).unwrap().value.data_mut().fill(0.0);
        }
    }
    let path = dir.join("m.bin");
    Checkpoint { weights: w, optimizer: None }.save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

fn noisy_image(dir: &Path, name: &str, size: usize) -> String {
    let img = Tensor::<f32>::from_fn(&[1, 1, size, size], |i| ((i * 7919) % 251) as f32);
    let path = dir.join(name);
    save_image(&img, &path).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn zero_tail_denoise_is_identity() {
    let dir = TempDir::new().unwrap();
    let ckpt = write_checkpoint(dir.path(), true);
    let input = noisy_image(dir.path(), "noisy.pgm", 40);
    let out = dir.path().join("rec.pgm");
    assert_eq!(cli(&["denoise", "--ckpt", &ckpt, "--in", &input, "--out", &s(&out)]), 0);
    assert_eq!(fs::read(&input).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn self_comparison_scores_infinite_psnr() {
    let dir = TempDir::new().unwrap();
    let a = noisy_image(dir.path(), "a.pgm", 16);
    let csv = dir.path().join("eval.csv");
    assert_eq!(cli(&["eval", "--ref", &a, "--test", &a, "--out", &s(&csv)]), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text, "file,psnr_db,ssim\na.pgm,inf,1.0000\nmean,inf,1.0000\n");
}

#[test]
fn eval_matches_directories_by_name() {
    let dir = TempDir::new().unwrap();
    let (r, t) = (dir.path().join("ref"), dir.path().join("test"));
    fs::create_dir_all(&r).unwrap();
    fs::create_dir_all(&t).unwrap();
    for name in ["x.pgm", "y.pgm"] {
        let img = Tensor::<f32>::from_fn(&[1, 1, 12, 12], |i| (i % 200) as f32);
        save_image(&img, r.join(name)).unwrap();
        save_image(&img.map(|v| v + 1.0), t.join(name)).unwrap();
    }
    let csv = dir.path().join("e.csv");
    assert_eq!(cli(&["eval", "--ref", &s(&r), "--test", &s(&t), "--out", &s(&csv)]), 0);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("x.pgm,48.1308,"), "{text}");
    assert!(lines[3].starts_with("mean,48.1308,"), "{text}");
}

#[test]
fn eval_with_a_model_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let ckpt = write_checkpoint(dir.path(), false);
    let img = fixtures::stripes(32, 6, 0, 1);
    let r = dir.path().join("clean.pgm");
    save_image(&img, &r).unwrap();
    let outs: Vec<String> = (0..2)
        .map(|i| {
            let csv = dir.path().join(format!("r{i}.csv"));
            let args = ["eval", "--ref", &s(&r), "--ckpt", &ckpt, "--sigma", "15", "--seed", "4", "--out", &s(&csv)];
            assert_eq!(cli(&args), 0);
            fs::read_to_string(&csv).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn census_of_default_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cola_b.cfg");
    fs::write(&cfg, "model.variant = basic\n").unwrap();
    assert_eq!(cli(&["census", "--config", &s(&cfg)]), 0);
    assert_eq!(cli(&["census"]), 0);
}

#[test]
fn attnmap_writes_heat_maps_in_range_and_distances() {
    let dir = TempDir::new().unwrap();
    let ckpt = write_checkpoint(dir.path(), false);
    let input = noisy_image(dir.path(), "in.pgm", 40);
    let out = dir.path().join("maps");
    assert_eq!(cli(&["attnmap", "--ckpt", &ckpt, "--in", &input, "--out", &s(&out), "--cab", "1"]), 0);
    for i in 0..2 {
        let map = load_image(out.join(format!("heat_cab{i}.pgm"))).unwrap();
        assert_eq!(map.shape(), &[1, 1, 40, 40]);
        assert!(map.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }
    let csv = fs::read_to_string(out.join("distance_cab1.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    let p = rows.len();
    for row in rows {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), p);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 5e-4 * p as f64);
    }
    assert_eq!(cli(&["attnmap", "--ckpt", &ckpt, "--in", &input, "--out", &s(&out), "--cab", "2"]), 2);
}

#[test]
fn train_writes_checkpoints_and_curve_deterministically() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    for (i, img) in fixtures::texture_set(3, 24).iter().enumerate() {
        save_image(img, data.join(format!("t{i}.pgm"))).unwrap();
    }
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "model.num_cab = 1\nmodel.channels = 8\nmodel.fem_depth = 2\nmodel.tile = 16\nmodel.tile_overlap = 4\n\
         train.crop = 16\ntrain.batch_size = 2\ntrain.steps_per_epoch = 3\ntrain.total_epochs = 2\n\
         train.checkpoint_every = 3\n",
    )
    .unwrap();
    let mut bytes = Vec::new();
    for run_id in 0..2 {
        let out = dir.path().join(format!("out{run_id}"));
        let args = ["train", "--config", &s(&cfg), "--in", &s(&data), "--out", &s(&out), "--seed", "9"];
        assert_eq!(cli(&args), 0);
        let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("step,lr,loss\n1,"));
        assert!(out.join("checkpoint_000003.bin").exists());
        assert!(out.join("checkpoint_000006.bin").exists());
        bytes.push(fs::read(out.join("checkpoint.bin")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);

    // resuming from the mid-run checkpoint reproduces the final weights
    let out = dir.path().join("resumed");
    let mid = dir.path().join("out0").join("checkpoint_000003.bin");
    let args = ["train", "--config", &s(&cfg), "--in", &s(&data), "--out", &s(&out), "--seed", "9", "--ckpt", &s(&mid)];
    assert_eq!(cli(&args), 0);
    assert_eq!(fs::read(out.join("checkpoint.bin")).unwrap(), bytes[0]);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["denoise", "--in", "x.pgm"]), 2);
    assert_eq!(cli(&["--help"]), 0);

    let missing = dir.path().join("nope.bin");
    let img = noisy_image(dir.path(), "a.pgm", 16);
    assert_eq!(cli(&["denoise", "--ckpt", &s(&missing), "--in", &img, "--out", "o.pgm"]), 3);

    let garbage = dir.path().join("bad.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(cli(&["denoise", "--ckpt", &s(&garbage), "--in", &img, "--out", "o.pgm"]), 3);

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.wings = 2\n").unwrap();
    assert_eq!(cli(&["census", "--config", &s(&cfg)]), 2);

    let other = dir.path().join("b.pgm");
    save_image(&Tensor::<f32>::zeros(&[1, 1, 12, 12]), &other).unwrap();
    assert_eq!(cli(&["eval", "--ref", &img, "--test", &s(&other)]), 2);
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    save_image(&fixtures::checker(16, 4, 0), data.join("c.pgm")).unwrap();
    let cfg = dir.path().join("hot.cfg");
    fs::write(
        &cfg,
        "model.num_cab = 1\nmodel.channels = 8\nmodel.fem_depth = 1\nmodel.tile = 16\nmodel.tile_overlap = 4\n\
         train.crop = 16\ntrain.batch_size = 2\ntrain.steps_per_epoch = 40\ntrain.base_lr = 1e30\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&["train", "--config", &s(&cfg), "--in", &s(&data), "--out", &s(&out)]), 4);
}
