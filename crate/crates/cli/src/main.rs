use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cascade_unet::augment::{bspline_deform, derive_seed};
use cascade_unet::cascade::CascadeModel;
use cascade_unet::checkpoint;
use cascade_unet::config::{Config, Profile};
use cascade_unet::evaluate::{evaluate_dirs, summary_table, write_evaluation};
use cascade_unet::infer::predict_with_checkpoint;
use cascade_unet::metrics::HausdorffMode;
use cascade_unet::preprocess::preprocess_case;
use cascade_unet::train::{train, TrainOutput};
use cascade_unet::volume::{list_case_dirs, load_case, save_case, write_labels, MultiModalCase};
use cascade_unet::{Error, Result};

mod manifest;

/// Cascaded multi-encoder 3D UNet for brain tumor segmentation.
///
/// Every hyperparameter lives in the configuration: profile defaults, then
/// the `--config` TOML file, then `CASCADE_UNET__<SECTION>__<KEY>`
/// environment variables, then `--seed`.
#[derive(Parser, Debug)]
#[command(name = "cascade-unet", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the root `seed` of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Default set the configuration is layered over.
    #[arg(long, global = true, value_parser = ["desk", "full"])]
    profile: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes synthetic cases in the BraTS directory layout.
    Phantom {
        #[arg(long)]
        output: PathBuf,
    },
    /// Normalises and resamples every case under --input.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Writes b-spline deformed copies `<id>_aug<k>` next to the original cases.
    AugmentOffline {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to --input.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Preprocesses the raw cases under --input and trains a cascade on them.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segments every case under --input, writing `<id>.nii.gz` label maps.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Scores predictions against ground truth and writes per-case and summary tables.
    Evaluate {
        /// Predictions: `<id>.nii.gz` files or `<id>/<id>_seg.nii.gz` directories.
        #[arg(long)]
        input: PathBuf,
        /// Ground truth in the BraTS layout.
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Report the 95th percentile of surface distances instead of the maximum.
        #[arg(long)]
        hd95: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::Preprocess { .. } => "preprocess",
            Command::AugmentOffline { .. } => "augment-offline",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_cases(root: &Path) -> Result<Vec<MultiModalCase>> {
    let dirs = list_case_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dirs.iter().map(|d| load_case(d)).collect()
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let profile = cli.global.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let config = Config::resolve(cli.global.config.as_deref(), profile, cli.global.seed)?;
    log::debug!("resolved configuration:\n{}", config.to_toml());
    let name = cli.command.name();
    let output = match cli.command {
        Command::Phantom { output } => {
            create_dir(&output)?;
            for p in config.phantom.generate(config.seed)? {
                save_case(&p.case, &output)?;
            }
            log::info!("wrote {} phantoms to {}", config.phantom.count, output.display());
            output
        }
        Command::Preprocess { input, output } => {
            create_dir(&output)?;
            for dir in list_case_dirs(&input)? {
                let case = load_case(&dir)?;
                save_case(&preprocess_case(&case, &config.preprocess)?, &output)?;
                log::info!("preprocessed {}", case.case_id);
            }
            output
        }
        Command::AugmentOffline { input, output } => {
            let output = output.unwrap_or_else(|| input.clone());
            create_dir(&output)?;
            for case in load_cases(&input)? {
                if output != input {
                    save_case(&case, &output)?;
                }
                for k in 0..config.augment.copies {
                    let seed = derive_seed(config.augment.rng_seed, &case.case_id, k as u64);
                    let mut deformed = bspline_deform(&case, &config.augment, seed)?.case;
                    deformed.case_id = format!("{}_aug{k}", case.case_id);
                    save_case(&deformed, &output)?;
                }
                log::info!("augmented {}", case.case_id);
            }
            output
        }
        Command::Train { input, output } => {
            create_dir(&output)?;
            let cases = load_cases(&input)?
                .iter()
                .map(|c| preprocess_case(c, &config.preprocess))
                .collect::<Result<Vec<_>>>()?;
            let mut model = CascadeModel::<f32>::new(&config.cascade, config.preprocess.target_grid, config.seed)?;
            log::info!(
                "training on {} cases, {} parameters",
                cases.len(),
                model.parameter_count()
            );
            let out = TrainOutput {
                dir: output.clone(),
                preprocess: config.preprocess.clone(),
            };
            let report = train(&mut model, &cases, &config.train, &config.augment, Some(&out))?;
            if let (Some(epoch), Some(loss)) = (report.best_epoch, report.best_loss) {
                log::info!("best epoch {epoch}, loss {loss:.6}");
            }
            output
        }
        Command::Predict {
            input,
            output,
            checkpoint: path,
        } => {
            let ck = checkpoint::load(&path)?;
            create_dir(&output)?;
            for case in load_cases(&input)? {
                let labels = predict_with_checkpoint(&ck, &case)?;
                write_labels(&output.join(format!("{}.nii.gz", case.case_id)), labels.view(), &case.grid)?;
                log::info!("segmented {}", case.case_id);
            }
            output
        }
        Command::Evaluate {
            input,
            ground_truth,
            output,
            hd95,
        } => {
            let mode = if hd95 {
                HausdorffMode::Percentile95
            } else {
                HausdorffMode::Max
            };
            let eval = evaluate_dirs(&input, &ground_truth, mode)?;
            for (id, missing) in &eval.unmatched {
                log::warn!("case {id}: no {missing}");
            }
            write_evaluation(&output, &eval)?;
            print!("{}", summary_table(&eval.summary));
            output
        }
    };
    std::fs::write(output.join("config.toml"), config.to_toml()).map_err(|e| Error::io(&output, e))?;
    manifest::write(&output, name, argv, &config)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error[usage]: {}", message.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
