//! Command-line front end: `train`, `denoise`, `eval`, `attnmap`, `census`.
//!
//! [`run`] takes the full argument vector and returns the process exit code:
//! 0 on success, 2 for usage, config and shape errors, 3 for I/O and file
//! format problems, 4 for numeric failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use colanet::checkpoint::Checkpoint;
use colanet::config::RunConfig;
use colanet::degradation::{Degradation, Rng};
use colanet::image_io::{is_netpbm, load_image, save_image};
use colanet::metrics::{psnr, ssim, MetricReport};
use colanet::network::{heat_maps, param_census, restore, ModelWeights};
use colanet::training::{loss_csv, Trainer};
use colanet::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "colanet", version, about = "Collaborative attention network for image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a directory of PGM/PPM images.
    Train(TrainArgs),
    /// Restore one image, or every image in a directory.
    Denoise(DenoiseArgs),
    /// Score test images against references (PSNR/SSIM CSV).
    Eval(EvalArgs),
    /// Export per-block heat maps and optionally one block's patch affinities.
    Attnmap(AttnArgs),
    /// Print the trainable parameter breakdown of a configuration.
    Census(CensusArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training image directory (overrides paths.train).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory (overrides paths.output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from a checkpoint that carries optimizer state.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// AWGN level on the 0–255 scale.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Inference tile side (defaults to the checkpoint's).
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Clean reference image or directory.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Images to score, matched to references by file name.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Degrade the references and score the restorations of this model instead.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write this block's distance matrix (first tile) as CSV.
    #[arg(long)]
    cab: Option<usize>,
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args, Debug)]
struct CensusArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Count the tensors of a checkpoint instead.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape(_) | Error::Config(_) | Error::Contract(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Unsupported(_) | Error::Corrupt(_) => 3,
        Error::Numeric(_) | Error::DegenerateStatistics(_) => 4,
    }
}

/// Parse `argv` (including the program name) and execute.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Attnmap(a) => attnmap(a),
        Command::Census(a) => census(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("colanet: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set_sigma(cfg: &mut RunConfig, sigma: Option<f64>) -> Result<()> {
    if let Some(s) = sigma {
        if !matches!(cfg.degrade.kind, Degradation::Awgn { .. }) {
            return Err(Error::Config("--sigma only applies to degrade.kind = awgn".into()));
        }
        cfg.degrade.kind = Degradation::Awgn { sigma: s };
        cfg.degrade.validate()?;
    }
    Ok(())
}

/// Image files in a directory, sorted by name; a file path is returned as is.
fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_netpbm(p));
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .pgm/.ppm images in {}", path.display())));
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn load_model(path: &Path, tile: Option<usize>) -> Result<ModelWeights<f32>> {
    let mut weights = Checkpoint::load(path)?.weights;
    if let Some(t) = tile {
        weights.config.tile = t;
        weights.config.validate()?;
    }
    Ok(weights)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    set_sigma(&mut cfg, a.sigma)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data_dir = a.input.or_else(|| non_empty(&cfg.paths.train)).ok_or_else(|| {
        Error::Config("no training images: pass --in or set paths.train".into())
    })?;
    let out = a.out.or_else(|| non_empty(&cfg.paths.output)).ok_or_else(|| {
        Error::Config("no output directory: pass --out or set paths.output".into())
    })?;
    let dataset = image_files(&data_dir)?.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&out)?;

    let mut trainer = match &a.ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.weights.config != cfg.model {
                return Err(Error::Config("checkpoint model does not match the configured model".into()));
            }
            Trainer::resume(&dataset, cfg.degrade, cfg.train.clone(), ck)?
        }
        None => Trainer::new(&dataset, cfg.degrade, &cfg.model, cfg.train.clone())?,
    };
    let curve = trainer.run(|ck| ck.save(out.join(format!("checkpoint_{:06}.bin", step_of(ck)))))?;
    trainer.checkpoint().save(out.join("checkpoint.bin"))?;
    fs::write(out.join("loss.csv"), loss_csv(&curve))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    if let Some(last) = curve.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    Ok(())
}

fn step_of(ck: &Checkpoint) -> u64 {
    ck.optimizer.as_ref().map_or(0, |o| o.step)
}

fn non_empty(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    let weights = load_model(&a.ckpt, a.tile)?;
    if a.input.is_dir() {
        fs::create_dir_all(&a.out)?;
        for f in image_files(&a.input)? {
            let img = load_image(&f)?;
            save_image(&restore(&weights, &img)?.image, a.out.join(file_name(&f)))?;
        }
    } else {
        let img = load_image(&a.input)?;
        save_image(&restore(&weights, &img)?.image, &a.out)?;
    }
    Ok(())
}

fn score(report: &mut MetricReport, name: String, reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<()> {
    report.push(name, psnr(reference, test, 255.0)?, ssim(reference, test, 255.0)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let refs = image_files(&a.reference)?;
    let mut report = MetricReport::default();
    match (&a.test, &a.ckpt) {
        (Some(test), None) => {
            let single = !a.reference.is_dir();
            for r in &refs {
                let t = if single && !test.is_dir() { test.clone() } else { test.join(file_name(r)) };
                score(&mut report, file_name(r), &load_image(r)?, &load_image(&t)?)?;
            }
        }
        (None, Some(ck)) => {
            let mut cfg = load_config(&a.config)?;
            set_sigma(&mut cfg, a.sigma)?;
            if let Some(s) = a.seed {
                cfg.degrade.seed = s;
            }
            let weights = load_model(ck, a.tile)?;
            for (i, r) in refs.iter().enumerate() {
                let clean = load_image(r)?;
                let mut rng = Rng::new(cfg.degrade.seed, i as u64);
                let degraded = cfg.degrade.apply(&clean, &mut rng)?;
                let restored = restore(&weights, &degraded)?.image;
                score(&mut report, file_name(r), &clean, &restored)?;
            }
        }
        _ => return Err(Error::Config("eval needs exactly one of --test or --ckpt".into())),
    }
    let csv = report.to_csv();
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn attnmap(a: AttnArgs) -> Result<()> {
    let weights = load_model(&a.ckpt, a.tile)?;
    if let Some(c) = a.cab {
        if c >= weights.config.num_cab {
            return Err(Error::Config(format!("--cab {c} out of range for {} blocks", weights.config.num_cab)));
        }
    }
    let img = load_image(&a.input)?;
    let restoration = restore(&weights, &img)?;
    fs::create_dir_all(&a.out)?;
    for (i, map) in heat_maps(&restoration)?.iter().enumerate() {
        save_image(&map.map(|h| h * 255.0), a.out.join(format!("heat_cab{i}.pgm")))?;
    }
    if let Some(c) = a.cab {
        let d = &restoration.tiles[0].traces[c].distance;
        let p = d.shape()[1];
        let mut csv = String::with_capacity(p * p * 7);
        for row in d.data()[..p * p].chunks(p) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        fs::write(a.out.join(format!("distance_cab{c}.csv")), csv)?;
    }
    Ok(())
}

fn census(a: CensusArgs) -> Result<()> {
    let census = match &a.ckpt {
        Some(p) => param_census(Checkpoint::load(p)?.weights.params()),
        None => {
            let cfg = load_config(&a.config)?;
            param_census(ModelWeights::<f32>::init(&cfg.model, 0)?.params())
        }
    };
    print!("{}", census.render());
    Ok(())
}
