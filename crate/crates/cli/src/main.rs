use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seldkit::models::{SeldModel, Variant};
use seldkit::scene::generate_dataset;
use seldkit::train::{
    evaluate, prepare_data, prepare_from_manifest, run_comparison, run_variant, sweep_tau,
    ComparisonTable, ExperimentConfig, PreparedData, RunRecord,
};
use seldkit::Error;

// Training allocates and frees large buffers every step; the system
// allocator returns them to the kernel each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "seldkit",
    version,
    about = "Synthetic SELD experiments: data, training, evaluation, comparison"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replica seed; selects the dataset draw and the initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the configured model variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Overrides whether directional interference is rendered.
    #[arg(long, value_enum)]
    interference: Option<Toggle>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Read clips from a directory written by `gen-data` instead of
    /// rendering them in memory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset to WAV and CSV files.
    GenData(Common),
    /// Train one variant and score it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Score a trained model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Decoding threshold; defaults to the one stored with the run.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Sweep the decoding threshold on the validation split.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train all variants over all configured seeds, with and without interference.
    Compare(Common),
    /// Print a comparison written by `compare`.
    Report(Common),
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(t) = self.interference {
            cfg.dataset.scene.interference_enabled = matches!(t, Toggle::On);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> anyhow::Result<&Path> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }

    fn run_name(&self, cfg: &ExperimentConfig) -> String {
        let on = if cfg.dataset.scene.interference_enabled {
            "on"
        } else {
            "off"
        };
        format!(
            "{}_interference-{on}_seed{}",
            cfg.model.variant.as_str(),
            self.seed
        )
    }
}

fn load_data(cfg: &ExperimentConfig, seed: u64, data: &DataArg) -> seldkit::Result<PreparedData> {
    match &data.data {
        Some(dir) => prepare_from_manifest(dir, &cfg.features, &cfg.model),
        None => prepare_data(&cfg.dataset_for_seed(seed), &cfg.features, &cfg.model),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.config()?;
            let manifest = generate_dataset(&cfg.dataset_for_seed(c.seed), c.out_dir()?)?;
            println!(
                "wrote {} clips to {} ({} same-class collisions)",
                manifest.train.len() + manifest.validation.len() + manifest.test.len(),
                c.out.display(),
                manifest.collisions
            );
        }
        Command::Train { common: c, data } => {
            let cfg = c.config()?;
            let out = c.out_dir()?;
            let prepared = load_data(&cfg, c.seed, &data)?;
            let (model, record) = run_variant(&cfg, &prepared, c.seed)?;
            let name = c.run_name(&cfg);
            model.save(out.join(format!("{name}.ckpt")))?;
            write(&out.join(format!("{name}.toml")), &record.to_toml()?)?;
            record.write_loss_csv(out.join(format!("{name}_loss.csv")))?;
            println!("{}", record.test.to_table());
            println!(
                "tau {} (validation SELD {:.4})",
                record.best_tau, record.validation.seld_score
            );
        }
        Command::Eval {
            common: c,
            data,
            tau,
        } => {
            let cfg = c.config()?;
            let name = c.run_name(&cfg);
            let mut model = SeldModel::load(c.out.join(format!("{name}.ckpt")))?;
            let tau = match tau {
                Some(t) => t,
                None => {
                    let path = c.out.join(format!("{name}.toml"));
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    RunRecord::from_toml(&text)?.best_tau
                }
            };
            if !(0.0..1.0).contains(&tau) {
                bail!(Error::InvalidArgument(format!("tau {tau} outside [0, 1)")));
            }
            let prepared = load_data(&cfg, c.seed, &data)?;
            let report = evaluate(&mut model, &prepared.test, tau, cfg.train.batch_size)?;
            write(
                &c.out_dir()?.join(format!("{name}_test.toml")),
                &report.to_toml()?,
            )?;
            println!("{}", report.to_table());
        }
        Command::SweepTau { common: c, data } => {
            let cfg = c.config()?;
            let name = c.run_name(&cfg);
            let mut model = SeldModel::load(c.out.join(format!("{name}.ckpt")))?;
            let prepared = load_data(&cfg, c.seed, &data)?;
            let sweep = sweep_tau(
                &mut model,
                &prepared.validation,
                &cfg.train.tau_grid,
                cfg.train.batch_size,
            )?;
            println!("{:>5} {:>8} {:>7}", "tau", "events", "SELD");
            for e in &sweep.entries {
                println!(
                    "{:>5.2} {:>8} {:>7.4}",
                    e.tau, e.decoded_events, e.report.seld_score
                );
            }
            println!("best tau {} (spread {:.4})", sweep.best_tau, sweep.spread());
            write(
                &c.out_dir()?.join(format!("{name}_sweep.toml")),
                &toml::to_string(&sweep)?,
            )?;
        }
        Command::Compare(c) => {
            let cfg = c.config()?;
            let out = c.out_dir()?;
            let table = run_comparison(&cfg)?;
            write(&out.join("comparison.toml"), &table.to_toml()?)?;
            table.write_csvs(out)?;
            print!("{}", table.to_text());
        }
        Command::Report(c) => {
            let path = c.out.join("comparison.toml");
            let text =
                fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let table = ComparisonTable::from_toml(&text)?;
            print!("{}", table.to_text());
            for r in &table.rows {
                let sdi: Vec<String> = r
                    .per_class_sdi
                    .iter()
                    .enumerate()
                    .map(|(k, [s, d, i])| format!("{k}:{s}/{d}/{i}"))
                    .collect();
                println!(
                    "interference {} {:<18} S/D/I per class {}",
                    if r.interference { "on " } else { "off" },
                    r.variant.as_str(),
                    sdi.join(" ")
                );
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Diverged { .. }) => EXIT_DIVERGED,
        Some(
            Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) | Error::TomlDecode(_),
        ) => EXIT_INVALID,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
