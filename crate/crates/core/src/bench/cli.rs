//! Command-line front end. Exit codes: 0 on success, 1 on usage errors,
//! 2 on data errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::BenchConfig;
use super::run::{run_ablation, run_table, scenarios, Zoo};
use super::{toy_scenario, zoo_model};
use crate::attack::{run_attack, Mode, Scale};
use crate::channelsim::project_capture;
use crate::colormap::{CalibrationSamples, IntervalFit};
use crate::embedder::{cosine, Variant};
use crate::error::{Error, Result};
use crate::imaging::{g2c, load_image, load_mask, save_image, save_mask, Image};
use crate::rng::RngStream;

#[derive(Debug, Parser)]
#[command(name = "optical-adv", version, about = "Optical adversarial masks for face embedders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an adversarial mask for one scenario.
    Attack(RunArgs),
    /// Pass a composite image through the channel simulator.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Composite image to project.
        #[arg(long)]
        image: PathBuf,
        /// Projection region; the whole image when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output image path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Score images against a target under every zoo model.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Target face; defaults to `paths.target`.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score table over substitutes, eval models and scales.
    Table(RunArgs),
    /// Compare baseline, res-aware, color-aware and full modes.
    Ablate(RunArgs),
    /// Fit a channel profile from calibration measurements.
    Calibrate {
        /// CSV of channel,input_level,measured_level.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        tau: f64,
        /// Profile output; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic scenario: views/, target.png and mask.png.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory; defaults to `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Optimize a one-channel mask.
    #[arg(long, conflicts_with = "color")]
    gray: bool,
    /// Optimize an RGB mask.
    #[arg(long)]
    color: bool,
    #[arg(long, value_parser = parse_variant)]
    substitute: Option<Variant>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(common: &CommonArgs) -> Result<BenchConfig> {
    let mut cfg = match &common.config {
        Some(path) => BenchConfig::load(path)?,
        None => BenchConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.bench.seed = seed;
    }
    Ok(cfg)
}

impl RunArgs {
    fn config(&self) -> Result<BenchConfig> {
        let mut cfg = load_config(&self.common)?;
        if let Some(mode) = self.mode {
            cfg.attack.mode = mode;
        }
        let scale = if self.gray {
            Some(Scale::Gray)
        } else if self.color {
            Some(Scale::Color)
        } else {
            None
        };
        if let Some(scale) = scale {
            cfg.attack.scale = scale;
            cfg.bench.scales = vec![scale];
        }
        if let Some(v) = self.substitute {
            if !cfg.zoo.variants.contains(&v) {
                cfg.zoo.variants.push(v);
                cfg.zoo.thresholds.clear();
            }
            cfg.zoo.substitutes = vec![v];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &BenchConfig) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.paths.out.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.out".into()))?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn attack(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let dir = args.out_dir(&cfg)?;
    let (seed, scenario) = match cfg.paths.inputs()? {
        Some(_) => scenarios(&BenchConfig {
            bench: super::config::RunSpec {
                n_seeds: 1,
                ..cfg.bench.clone()
            },
            ..cfg.clone()
        })?
        .remove(0),
        None => (cfg.bench.seed, toy_scenario(cfg.bench.seed, cfg.bench.views, cfg.bench.size)?),
    };
    let model = zoo_model(cfg.zoo.seed, cfg.zoo.substitutes[0])?;
    let mut acfg = cfg.attack.clone();
    acfg.seed = acfg.seed.wrapping_add(seed);
    let result = run_attack(&scenario.views, &scenario.target, &scenario.mask, &[model], &acfg)?;
    save_image(&result.mask, dir.join("mask.png"))?;
    write(&dir.join("trace.csv"), &result.trace_csv())?;
    write(&dir.join("config.toml"), &cfg.echo())?;
    println!(
        "substitute {} mode {} scale {}: top similarity {:.4} -> {:.4}",
        cfg.zoo.substitutes[0],
        acfg.mode,
        acfg.scale,
        result.initial_top(),
        result.final_top()
    );
    Ok(())
}

fn simulate(common: &CommonArgs, image: &Path, mask: Option<&Path>, output: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let img = load_image(image)?;
    let img = if img.channels() == 1 { g2c(&img)? } else { img };
    let mask = mask.map(load_mask).transpose()?;
    let mut rng = RngStream::new(cfg.channel.seed).fork(cfg.bench.seed);
    let captured = project_capture(&img, mask.as_ref(), &cfg.channel, &mut rng)?;
    save_image(&captured, output)
}

fn evaluate(common: &CommonArgs, target: Option<&Path>, paths: &[PathBuf]) -> Result<()> {
    let cfg = load_config(common)?;
    let target_path = target
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.target.clone())
        .ok_or_else(|| Error::Config("no target: pass --target or set paths.target".into()))?;
    let target = load_image(&target_path)?;
    let images = paths.iter().map(load_image).collect::<Result<Vec<Image>>>()?;
    println!("image,model,similarity");
    for &v in &cfg.zoo.variants {
        let model = zoo_model(cfg.zoo.seed, v)?;
        let t = model.embed(&target)?;
        for (path, img) in paths.iter().zip(&images) {
            println!("{},{v},{:.6}", path.display(), cosine(&model.embed(img)?, &t)?);
        }
    }
    Ok(())
}

fn table(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let dir = args.out_dir(&cfg)?;
    let zoo = Zoo::build(&cfg)?;
    let (report, failure) = match run_table(&cfg, &zoo) {
        Ok(r) => (r, None),
        Err(aborted) => (aborted.partial, Some(aborted.source)),
    };
    write(&dir.join("table.csv"), &report.to_csv())?;
    write(&dir.join("table.md"), &report.to_markdown())?;
    match failure {
        Some(e) => Err(e),
        None => {
            print!("{}", report.to_markdown());
            Ok(())
        }
    }
}

fn ablate(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let dir = args.out_dir(&cfg)?;
    let zoo = Zoo::build(&cfg)?;
    let report = run_ablation(&cfg, &zoo)?;
    write(&dir.join("ablation.csv"), &report.summary.to_csv())?;
    write(&dir.join("ablation_seeds.csv"), &report.seeds_csv())?;
    write(&dir.join("ablation.md"), &report.to_markdown())?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn calibrate(samples: &Path, tau: f64, out: Option<&Path>) -> Result<()> {
    let profile = CalibrationSamples::load(samples)?
        .estimate_profile(tau, &IntervalFit::default())
        .map_err(|e| Error::format(samples, e.to_string()))?;
    match out {
        Some(path) => profile.save(path),
        None => {
            print!("{}", profile.to_text());
            Ok(())
        }
    }
}

fn synth_cmd(out: &Path, seed: u64, views: usize, size: usize) -> Result<()> {
    if views == 0 || size < 8 {
        return Err(Error::InvalidArgument("need at least one view and size at least 8".into()));
    }
    let scenario = toy_scenario(seed, views, size)?;
    let dir = out.join("views");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, v) in scenario.views.iter().enumerate() {
        save_image(v, dir.join(format!("view_{i}.png")))?;
    }
    save_image(&scenario.target, out.join("target.png"))?;
    save_mask(&scenario.mask, out.join("mask.png"))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack(args) => attack(&args),
        Command::Simulate {
            common,
            image,
            mask,
            output,
        } => simulate(&common, &image, mask.as_deref(), &output),
        Command::Evaluate { common, target, images } => evaluate(&common, target.as_deref(), &images),
        Command::Table(args) => table(&args),
        Command::Ablate(args) => ablate(&args),
        Command::Calibrate { samples, tau, out } => calibrate(&samples, tau, out.as_deref()),
        Command::Synth { out, seed, views, size } => synth_cmd(&out, seed, views, size),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
