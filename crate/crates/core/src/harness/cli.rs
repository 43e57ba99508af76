//! Command-line interface. Exit codes: 0 success, 2 usage or configuration
//! error, 3 data or format error, 4 numerical failure.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::density::{make_density, HeadAnnotations};
use crate::data::io::{decode_ppm, parse_annotations, parse_heights, read_f32m, write_f32m, Checkpoint};
use crate::data::synth::synth_dataset;
use crate::error::{Error, Result};
use crate::harness::bench::{bench_op, BenchOp, BenchSpec, CSV_HEADER};
use crate::harness::config::RunConfig;
use crate::harness::dataset::{from_scenes, read_dataset, write_dataset};
use crate::harness::gradcheck;
use crate::harness::train::{evaluate, penet_data, score_maps, train_penet, train_pfdnet, PenetOptions, TrainOptions};
use crate::penet::{Penet, Phase};
use crate::perspective::{fit_perspective_map, PerspectiveMap};
use crate::pfdnet::{PerspSource, Pfdnet};
use crate::tensor::Rng;

#[derive(Parser, Debug)]
#[command(name = "pfdnet", version, about = "Perspective-guided fractional-dilation crowd counting")]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// File of key=value lines applied before command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// PENet width multiplier, e.g. 1/8.
    #[arg(long, global = true)]
    width_mult: Option<String>,
    /// Perspective fed to the counting network: ground truth, PENet, or
    /// each map's spatial mean.
    #[arg(long, global = true, value_parser = ["gt", "penet", "mean"])]
    persp_source: Option<String>,
    /// Weight of the PENet loss in supervised joint training.
    #[arg(long, global = true)]
    lambda_persp: Option<f32>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra config override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference gradient checks of every differentiable component.
    Gradcheck,
    /// Time an operator; prints CSV.
    Bench {
        /// fdconv, dilated_ref or pgc.
        #[arg(long)]
        op: String,
        /// Comma-separated constant rates (fdconv, dilated_ref).
        #[arg(long, default_value = "1")]
        rates: String,
        /// Comma-separated constant sigmas (pgc).
        #[arg(long, default_value = "1")]
        sigmas: String,
        /// Input shape `N,C,H,W`.
        #[arg(long, default_value = "1,256,96,128")]
        shape: String,
        /// Comma-separated kernel sizes.
        #[arg(long, default_value = "3")]
        kernel: String,
        /// Timed calls per row; defaults to the `bench_repeats` config key.
        #[arg(long)]
        repeats: Option<usize>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Density target from an `x,y` annotation CSV.
    MakeDensity {
        /// Annotation CSV with header `x,y`, one head per line.
        #[arg(long)]
        annotations: PathBuf,
        /// `H,W`.
        #[arg(long)]
        shape: String,
        /// Output density map (`.f32m`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset directory.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes; defaults to the `scenes` config key.
        #[arg(long)]
        scenes: Option<usize>,
        /// `H,W`.
        #[arg(long)]
        size: Option<String>,
        /// `MIN,MAX` heads per scene.
        #[arg(long)]
        heads: Option<String>,
    },
    /// Perspective map from a `y_h,h_px` CSV of labeled person heights.
    FitPersp {
        /// Heights CSV with header `y_h,h_px`.
        #[arg(long)]
        heights: PathBuf,
        /// `H,W`.
        #[arg(long)]
        shape: String,
        /// Output perspective map (`.f32m`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train PENet, phase 1 (map to map) or 2 (image to map).
    TrainPenet {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint, log and config.
        #[arg(long)]
        out: PathBuf,
        /// Phase-1 checkpoint, required for phase 2.
        #[arg(long)]
        phase1: Option<PathBuf>,
    },
    /// Train the counting network.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint, log and config.
        #[arg(long)]
        out: PathBuf,
        /// Phase-2 PENet checkpoint, required with --persp-source penet.
        #[arg(long)]
        penet: Option<PathBuf>,
    },
    /// MAE, RMSE and GAME(0..3), from density map directories or a model.
    Eval {
        /// Directory of predicted `.f32m` maps, paired with --gt by file name.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth `.f32m` maps.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Counting-network checkpoint to evaluate on --data.
        #[arg(long, requires = "data", conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict a density map for one image.
    Predict {
        /// Counting-network checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM image.
        #[arg(long)]
        image: PathBuf,
        /// Perspective map (`.f32m`), needed unless the model uses PENet.
        #[arg(long)]
        persp: Option<PathBuf>,
        /// Also write the density map here (`.f32m`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli, out)),
            Err(e) => Err(Error::Usage(format!("thread pool: {e}"))),
        },
        None => execute(&cli, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(w) = &cli.width_mult {
        cfg.set("width_mult", w)?;
    }
    if let Some(p) = &cli.persp_source {
        cfg.set("persp_source", p)?;
    }
    if let Some(l) = cli.lambda_persp {
        cfg.set("lambda_persp", &l.to_string())?;
    }
    Ok(cfg)
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidState(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn sibling_config(file: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = file.as_os_str().to_owned();
    name.push(".config.txt");
    fs::write(PathBuf::from(name), cfg.to_text())?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{what}: bad entry {v:?}")))
        })
        .collect()
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(s, "shape")?.as_slice() {
        &[h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::Usage(format!("shape must be H,W, got {s:?}"))),
    }
}

fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let seed: u64 = cfg.get("seed")?;
    match &cli.command {
        Command::Gradcheck => {
            let report = gradcheck::run_all(seed)?;
            writeln!(out, "{}", gradcheck::CSV_HEADER)?;
            for r in &report.results {
                writeln!(out, "{r}")?;
            }
            let failed = report.results.iter().filter(|r| !r.passed()).count();
            writeln!(
                out,
                "gradcheck,checks={},failed={failed},worst_rel={:.3e},step={},kink_margin={}",
                report.results.len(),
                report.worst(),
                gradcheck::STEP,
                gradcheck::KINK_MARGIN
            )?;
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} gradient checks exceeded tolerance")));
            }
        }
        Command::Bench {
            op,
            rates,
            sigmas,
            shape,
            kernel,
            repeats,
            out: path,
        } => {
            let op: BenchOp = op.parse()?;
            let dims = parse_list::<usize>(shape, "shape")?;
            let shape: [usize; 4] = dims
                .try_into()
                .map_err(|_| Error::Usage("shape must be N,C,H,W".into()))?;
            let values = parse_list::<f32>(if op == BenchOp::Pgc { sigmas } else { rates }, "values")?;
            let kernels = parse_list::<usize>(kernel, "kernel")?;
            let repeats = match repeats {
                Some(r) => *r,
                None => cfg.get("bench_repeats")?,
            };
            let mut text = format!("{CSV_HEADER}\n");
            for &k in &kernels {
                for &value in &values {
                    let row = bench_op(&BenchSpec {
                        op,
                        shape,
                        value,
                        kernel: k,
                        repeats,
                        seed,
                    })?;
                    text.push_str(&format!("{row}\n"));
                }
            }
            out.write_all(text.as_bytes())?;
            if let Some(p) = path {
                fs::write(p, &text)?;
                sibling_config(p, &cfg)?;
            }
        }
        Command::MakeDensity {
            annotations,
            shape,
            out: path,
        } => {
            let (h, w) = parse_shape(shape)?;
            let text = fs::read_to_string(annotations).map_err(|e| Error::Usage(format!("{}: {e}", annotations.display())))?;
            let id = annotations.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let heads = HeadAnnotations::new(id, parse_annotations(&text)?);
            let d = make_density(&heads, (h, w))?;
            write_f32m(path, d.grid())?;
            sibling_config(path, &cfg)?;
            writeln!(out, "make-density,heads={},count={:.6}", heads.len(), d.count())?;
        }
        Command::Synth {
            out: dir,
            scenes,
            size,
            heads,
        } => {
            let mut cfg = cfg.clone();
            if let Some(n) = scenes {
                cfg.set("scenes", &n.to_string())?;
            }
            if let Some(s) = size {
                cfg.set("image_size", s)?;
            }
            if let Some(h) = heads {
                cfg.set("heads", h)?;
            }
            let _lock = DirLock::acquire(dir)?;
            let scenes = synth_dataset(cfg.get("scenes")?, cfg.pair("image_size")?, cfg.pair("heads")?, seed)?;
            let samples = from_scenes(&scenes);
            write_dataset(dir, &samples)?;
            fs::write(dir.join("config.txt"), cfg.to_text())?;
            let total: usize = samples.iter().map(|s| s.heads.len()).sum();
            writeln!(out, "synth,scenes={},heads={total}", samples.len())?;
        }
        Command::FitPersp {
            heights,
            shape,
            out: path,
        } => {
            let shape = parse_shape(shape)?;
            let text = fs::read_to_string(heights).map_err(|e| Error::Usage(format!("{}: {e}", heights.display())))?;
            let fit = fit_perspective_map(&parse_heights(&text)?, cfg.get("person_height")?, shape)?;
            write_f32m(path, fit.map.grid())?;
            sibling_config(path, &cfg)?;
            writeln!(
                out,
                "fit-persp,slope={:.6},intercept={:.6},clamped_rows={}",
                fit.slope,
                fit.intercept,
                fit.clamped_rows.len()
            )?;
        }
        Command::TrainPenet {
            phase,
            data,
            out: dir,
            phase1,
        } => {
            let samples = read_dataset(data)?;
            let ds: usize = cfg.get("penet_downsample")?;
            let opts = PenetOptions {
                epochs: cfg.get("penet_epochs")?,
                batch: cfg.get("penet_batch")?,
                lr: cfg.get("penet_lr")?,
                seed,
            };
            let (mut penet, scale, phase) = if *phase == 1 {
                (Penet::new(cfg.fraction("width_mult")?, &mut Rng::new(seed))?, None, Phase::Reconstruct)
            } else {
                let p = phase1
                    .as_ref()
                    .ok_or_else(|| Error::Usage("phase 2 needs --phase1 <checkpoint>".into()))?;
                let ck = Checkpoint::load(p)?;
                let penet = Penet::load(&ck, "penet")?;
                if penet.phase != Phase::Reconstruct {
                    return Err(Error::Usage(format!("{} is not a phase-1 checkpoint", p.display())));
                }
                (penet, Some(ck.require("penet.scale")?.data[0]), Phase::ImageToMap)
            };
            let pdata = penet_data(&samples, ds, scale)?;
            let _lock = DirLock::acquire(dir)?;
            fs::write(dir.join("config.txt"), cfg.to_text())?;
            let mut log = BufWriter::new(File::create(dir.join("log.csv"))?);
            let report = train_penet(&mut penet, phase, &pdata, &opts, &mut log)?;
            log.flush()?;
            let mut ck = Checkpoint::new();
            penet.save(&mut ck, "penet");
            ck.push("penet.scale", &[1], &[pdata.scale]);
            ck.push("meta.phase", &[1], &[phase.code() as f32]);
            ck.push_u64("meta.seed", seed);
            ck.push_text("meta.config", &cfg.to_text());
            ck.save(dir.join("penet.pfdc"))?;
            writeln!(
                out,
                "train-penet,phase={},epochs={},final_psnr={:.4},scale={}",
                phase.code(),
                opts.epochs,
                report.final_psnr,
                pdata.scale
            )?;
        }
        Command::Train { data, out: dir, penet } => {
            let samples = read_dataset(data)?;
            let mut net = Pfdnet::new(cfg.pfdnet_config()?, &mut Rng::new(seed))?;
            if net.config.persp_source == PerspSource::Penet {
                let p = penet
                    .as_ref()
                    .ok_or_else(|| Error::Usage("--persp-source penet needs --penet <checkpoint>".into()))?;
                let ck = Checkpoint::load(p)?;
                let pe = Penet::load(&ck, "penet")?;
                if pe.phase == Phase::Reconstruct {
                    return Err(Error::Usage(format!("{} is a phase-1 checkpoint; run phase 2 first", p.display())));
                }
                let supervised = match cfg.raw("penet_joint") {
                    "supervised" => true,
                    "weak" => false,
                    s => return Err(Error::Config(format!("penet_joint must be supervised or weak, got {s:?}"))),
                };
                net.attach_penet(pe, ck.require("penet.scale")?.data[0], supervised);
            }
            let opts = TrainOptions {
                iterations: cfg.get("iterations")?,
                batch: cfg.get("batch")?,
                lr: cfg.get("lr")?,
                penet_lr: cfg.get("lr")?,
                flip_prob: cfg.get("flip_prob")?,
                lambda_persp: cfg.get("lambda_persp")?,
                seed,
            };
            let _lock = DirLock::acquire(dir)?;
            fs::write(dir.join("config.txt"), cfg.to_text())?;
            let mut log = BufWriter::new(File::create(dir.join("log.csv"))?);
            let report = train_pfdnet(&mut net, &samples, &opts, &mut log)?;
            log.flush()?;
            let mut ck = Checkpoint::new();
            net.save(&mut ck);
            ck.push_u64("meta.seed", seed);
            ck.push_u64("meta.step", opts.iterations as u64);
            ck.push_text("meta.config", &cfg.to_text());
            ck.save(dir.join("checkpoint.pfdc"))?;
            writeln!(
                out,
                "train,steps={},first_loss={:.6e},initial_mae={:.4},final_mae={:.4}",
                opts.iterations, report.first_loss, report.initial_mae, report.final_mae
            )?;
        }
        Command::Eval {
            pred,
            gt,
            checkpoint,
            data,
        } => {
            let report = match (pred, gt, checkpoint, data) {
                (Some(p), Some(g), None, _) => {
                    let (preds, gts) = read_map_pairs(p, g)?;
                    let counts: Vec<f64> = gts.iter().map(|m| m.sum()).collect();
                    score_maps(&preds, &gts, &counts)?
                }
                (None, _, Some(c), Some(d)) => {
                    let net = Pfdnet::load(&Checkpoint::load(c)?)?;
                    evaluate(&net, &read_dataset(d)?)?
                }
                _ => return Err(Error::Usage("eval needs --pred and --gt, or --checkpoint and --data".into())),
            };
            writeln!(
                out,
                "eval,n={},mae={:.6},rmse={:.6},game0={:.6},game1={:.6},game2={:.6},game3={:.6}",
                report.pred_counts.len(),
                report.mae,
                report.rmse,
                report.game[0],
                report.game[1],
                report.game[2],
                report.game[3]
            )?;
        }
        Command::Predict {
            checkpoint,
            image,
            persp,
            out: path,
        } => {
            let net = Pfdnet::load(&Checkpoint::load(checkpoint)?)?;
            let img = decode_ppm(&fs::read(image)?)?;
            let maps = match persp {
                Some(p) => vec![PerspectiveMap::new(read_f32m(p)?)?],
                None => Vec::new(),
            };
            let pm = (!maps.is_empty()).then_some(maps.as_slice());
            let density = net.predict(&img, pm)?.remove(0);
            if let Some(p) = path {
                write_f32m(p, &density)?;
                sibling_config(p, &cfg)?;
            }
            writeln!(out, "predict,count={:.6}", density.sum())?;
        }
    }
    Ok(())
}

/// Density maps with the same file name in both directories, by name.
fn read_map_pairs(pred: &Path, gt: &Path) -> Result<(Vec<crate::tensor::Grid2>, Vec<crate::tensor::Grid2>)> {
    let mut names: Vec<String> = fs::read_dir(gt)
        .map_err(|e| Error::Usage(format!("{}: {e}", gt.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".f32m"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no .f32m maps in {}", gt.display())));
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for n in &names {
        let p = pred.join(n);
        if !p.exists() {
            return Err(Error::Data(format!("missing prediction {}", p.display())));
        }
        preds.push(read_f32m(&p)?);
        gts.push(read_f32m(gt.join(n))?);
    }
    Ok((preds, gts))
}
