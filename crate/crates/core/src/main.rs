use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ddep::config::Config;
use ddep::data::{self, DatasetSpec};
use ddep::eval::{self, MaskOracle};
use ddep::harness::{self, Sweep};
use ddep::pipelines::{run_stage, Checkpoint, StageConfig};
use ddep::{Error, Result, Tensor};

/// Decoder denoising pretraining for semantic segmentation.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Flat `section.key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key (repeatable); wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed of the stage being run (the seed list for `sweep`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, env = "DDEP_OUT", default_value = "ddep-out", global = true)]
    out: PathBuf,

    /// Sweep arms to run in parallel.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic pretraining, fine-tuning and validation sets as PNGs.
    GenData,
    /// Supervised classification pretraining of the encoder.
    PretrainEncoder,
    /// Denoising pretraining (DeP or DDeP, per `denoise.mode`).
    PretrainDenoise,
    /// Segmentation fine-tuning with per-epoch validation.
    Finetune,
    /// Score a segmentation checkpoint on the validation split or a manifest.
    Evaluate {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Dataset manifest to score instead of the synthetic validation split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score the ground-truth masks themselves (a perfect predictor).
        #[arg(long)]
        oracle: bool,
    },
    /// Run every arm of the sweep described by the config.
    Sweep {
        /// Pretraining cache shared between sweeps; defaults to `<out>/cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Turn a sweep CSV into per-regime series files.
    PlotData {
        /// Defaults to `<out>/sweep.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        let key = match cli.command {
            Command::PretrainEncoder => "encoder.seed",
            Command::PretrainDenoise => "denoise.seed",
            Command::Finetune => "finetune.seed",
            Command::Sweep { .. } => "sweep.seeds",
            _ => return Err(Error::invalid("--seed applies only to training subcommands and sweep")),
        };
        cfg.set(key, &seed.to_string())?;
    }
    Ok(cfg)
}

fn run_training(sc: &StageConfig, out: &Path) -> Result<()> {
    let result = run_stage(sc)?;
    let path = result.write(out)?;
    println!("checkpoint {}", path.display());
    println!("config_hash {}", result.checkpoint.config_hash);
    if let Some(loss) = result.log.steps.last() {
        println!("final_loss {}", loss.loss);
    }
    if let (Some(best), Some(last)) = (result.best_miou(), result.final_miou) {
        println!("best_miou {best}\nfinal_miou {last}\nlr {}", result.lr);
    }
    Ok(())
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let ft = StageConfig::finetune(cfg)?;
    let pre = StageConfig::encoder(cfg)?;
    let pool = ft.data.num_samples;
    let all = DatasetSpec { num_samples: pool + ft.val_samples, ..ft.data.clone() };
    let splits = [
        ("pretrain", pre.data.clone(), 0..pre.data.num_samples),
        ("finetune", all.clone(), 0..pool),
        ("val", all, pool..pool + ft.val_samples),
    ];
    for (name, spec, range) in splits {
        let samples = range.map(|i| data::gen_sample(&spec, i)).collect::<Result<Vec<_>>>()?;
        let manifest = data::write_dataset(&out.join(name), &samples)?;
        println!("{name} {} samples -> {}", samples.len(), manifest.display());
    }
    Ok(())
}

fn evaluate(cfg: &Config, out: &Path, checkpoint: Option<&Path>, manifest: Option<&Path>, oracle: bool) -> Result<()> {
    let sc = StageConfig::finetune(cfg)?;
    let classes = sc.model.num_classes;
    let samples = match manifest {
        Some(m) => data::load_dataset(m, classes)?,
        None => {
            let pool = sc.data.num_samples;
            let all = DatasetSpec { num_samples: pool + sc.val_samples, ..sc.data.clone() };
            (pool..pool + sc.val_samples).map(|i| data::gen_sample(&all, i)).collect::<Result<_>>()?
        }
    };
    let masks: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();
    let report = if oracle {
        let images = samples
            .iter()
            .map(|s| {
                let (h, w) = s.extents();
                MaskOracle::input(&[&s.mask], h, w)
            })
            .collect::<Result<Vec<Tensor>>>()?;
        eval::evaluate(&MaskOracle { num_classes: classes }, &images, &masks, classes, &sc.protocol, sc.eval_batch)?
    } else {
        let path = checkpoint.ok_or_else(|| Error::invalid("--checkpoint is required without --oracle"))?;
        if !path.exists() {
            return Err(Error::BadValue { key: "--checkpoint".into(), reason: format!("no checkpoint at {}", path.display()) });
        }
        let ck = Checkpoint::load(path)?;
        let images = samples.iter().map(|s| ck.norm.normalize(&s.image)).collect::<Result<Vec<_>>>()?;
        let model = ck.into_model();
        eval::evaluate(&model, &images, &masks, classes, &sc.protocol, sc.eval_batch)?
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("eval.csv");
    report.write_csv(&path)?;
    println!("miou {}\nreport {}", report.miou, path.display());
    Ok(())
}

fn sweep(cfg: &Config, out: &Path, cache: Option<&Path>, jobs: usize) -> Result<()> {
    let sweep = Sweep::from_config(cfg)?;
    let cache = cache.map_or_else(|| out.join("cache"), Path::to_path_buf);
    let result = harness::run_sweep_cached(&sweep, out, &cache, jobs)?;
    let failed = result.rows.iter().filter(|r| r.status != "ok").count();
    let axes: Vec<&str> = sweep.axes.iter().map(|(k, _)| k.as_str()).collect();
    println!("{} | n | mean best_miou | std", axes.join(" | "));
    for (values, n, mean, std) in result.aggregate() {
        println!("{} | {n} | {mean:.4} | {std:.4}", values.join(" | "));
    }
    println!("rows {} failed {failed} csv {}", result.rows.len(), out.join(harness::SWEEP_CSV).display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::PretrainEncoder => run_training(&StageConfig::encoder(&cfg)?, out),
        Command::PretrainDenoise => run_training(&StageConfig::denoise(&cfg)?, out),
        Command::Finetune => run_training(&StageConfig::finetune(&cfg)?, out),
        Command::Evaluate { checkpoint, manifest, oracle } => {
            evaluate(&cfg, out, checkpoint.as_deref(), manifest.as_deref(), *oracle)
        }
        Command::Sweep { cache } => sweep(&cfg, out, cache.as_deref(), cli.jobs),
        Command::PlotData { csv } => {
            let csv = csv.clone().unwrap_or_else(|| out.join(harness::SWEEP_CSV));
            for f in harness::plot_data(&csv, &out.join("plots"))? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
