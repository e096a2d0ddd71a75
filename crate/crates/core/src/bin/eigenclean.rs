use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use eigenclean::gen::MethodMix;
use eigenclean::harness::{self, DatasetManifest};
use eigenclean::net::{self, MlpModel, Optimizer, TrainConfig, Variant};
use eigenclean::rie::{rie_clean, Broadening, RieConfig};
use eigenclean::sampling::NoiseRatio;
use eigenclean::{Error, Result};

#[derive(Parser)]
#[command(name = "eigenclean", version, about = "Correlation-matrix eigenvalue cleaning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BroadeningArg {
    Fixed,
    Relative,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of (sample spectrum, true spectrum) records.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t_min: usize,
        #[arg(long)]
        t_max: usize,
        /// Draw T only from t_min, t_min + step, …
        #[arg(long, default_value_t = 1)]
        t_step: usize,
        #[arg(long)]
        count: usize,
        /// Weights of spectrum-sketch, unit-sphere, constant-block and Toeplitz-block generators.
        #[arg(long, default_value = "0.5,0.1,0.2,0.2")]
        mix: MethodMix,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an autoencoder on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "300,200", value_delimiter = ',')]
        hidden: Vec<usize>,
        /// Dropout probability on the second hidden layer.
        #[arg(long, default_value_t = 0.25)]
        dropout: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train without q as an input.
        #[arg(long)]
        plain: bool,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
        optimizer: OptimizerArg,
        #[arg(long)]
        out_model: PathBuf,
        /// Defaults to the model path with `.loss.csv` appended.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Clean a sample spectrum with a trained model.
    Clean {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spectrum_file: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        no_rescale: bool,
    },
    /// Clean a sample spectrum with the rotational invariant estimator.
    Rie {
        #[arg(long)]
        spectrum_file: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        no_rescale: bool,
        #[arg(long, value_enum, default_value_t = BroadeningArg::Relative)]
        broadening: BroadeningArg,
    },
    /// Per-T MSE of sample, RIE and model against the truth.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `lo:hi:step` or a comma list; defaults to every T in the data.
        #[arg(long)]
        t_grid: Option<String>,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Spectra and L2 distances for one record.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record_index: usize,
        #[arg(long)]
        data: PathBuf,
    },
}

fn read_spectrum(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| Error::precondition(format!("bad spectrum value {s:?}: {e}"))))
        .collect()
}

fn print_spectrum(values: &[f64]) {
    for v in values {
        println!("{v:?}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { n, t_min, t_max, t_step, count, mix, seed, out } => {
            let manifest = DatasetManifest::new(n, t_min, t_max, mix, count, seed)?.with_step(t_step)?;
            let s = harness::generate_dataset(&manifest, &out)?;
            log::info!("wrote {} records to {} ({} already present)", s.written, out.display(), s.resumed_from);
        }
        Command::Train {
            data,
            n,
            hidden,
            dropout,
            epochs,
            lr,
            batch,
            seed,
            plain,
            optimizer,
            out_model,
            loss_csv,
        } => {
            let records = harness::read_dataset(&data)?;
            let variant = if plain { Variant::Plain } else { Variant::Adjusted };
            let model = MlpModel::autoencoder(n, &hidden, dropout, variant, seed)?;
            let cfg = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                epochs,
                seed,
                optimizer: match optimizer {
                    OptimizerArg::Adam => Optimizer::AdaptiveMoment,
                    OptimizerArg::Sgd => Optimizer::Sgd,
                },
                dropout: true,
            };
            log::info!("training on {} records", records.len());
            let outcome = net::train(model, &records, &cfg)?;
            outcome.model.save(&out_model)?;
            let loss_path = loss_csv.unwrap_or_else(|| {
                let mut p = out_model.clone().into_os_string();
                p.push(".loss.csv");
                p.into()
            });
            std::fs::write(&loss_path, harness::loss_history_csv(&outcome.history))?;
            log::info!(
                "final epoch loss {:e}; model {}, history {}",
                outcome.history.last().copied().unwrap_or(f64::NAN),
                out_model.display(),
                loss_path.display()
            );
        }
        Command::Clean { model, spectrum_file, t, no_rescale } => {
            let model = MlpModel::load(&model)?;
            let spectrum = read_spectrum(&spectrum_file)?;
            let q = NoiseRatio::new(spectrum.len(), t)?.q();
            let out = model.clean(&spectrum, q, !no_rescale)?;
            if out.inversions > 0 {
                log::info!("{} inversions in raw model output", out.inversions);
            }
            print_spectrum(&out.values);
        }
        Command::Rie { spectrum_file, n, t, no_rescale, broadening } => {
            let spectrum = read_spectrum(&spectrum_file)?;
            if spectrum.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: spectrum.len() });
            }
            let cfg = RieConfig {
                rescale: !no_rescale,
                broadening: match broadening {
                    BroadeningArg::Fixed => Broadening::Fixed,
                    BroadeningArg::Relative => Broadening::Relative,
                },
                ..Default::default()
            };
            let out = rie_clean(&spectrum, NoiseRatio::new(n, t)?.q(), &cfg)?;
            if out.inversions > 0 {
                log::info!("{} inversions before sorting", out.inversions);
            }
            print_spectrum(&out.values);
        }
        Command::Eval { model, data, t_grid, out_csv } => {
            let model = MlpModel::load(&model)?;
            let records = harness::read_dataset(&data)?;
            let grid = match t_grid {
                Some(g) => harness::parse_t_grid(&g)?,
                None => harness::distinct_t(&records),
            };
            let report = harness::evaluate(&model, &records, &grid, &RieConfig::default())?;
            std::fs::write(&out_csv, report.to_csv())?;
            log::info!(
                "mean MSE sample {:.4e} ± {:.1e}, rie {:.4e} ± {:.1e}, model {:.4e} ± {:.1e}; model beats rie on {:.0}% of rows",
                report.sample.mean,
                report.sample.se,
                report.rie.mean,
                report.rie.se,
                report.model.mean,
                report.model.se,
                100.0 * report.model_beats_rie_fraction()
            );
        }
        Command::Compare { model, record_index, data } => {
            let model = MlpModel::load(&model)?;
            let records = harness::read_dataset(&data)?;
            let record = records.get(record_index).ok_or_else(|| {
                Error::precondition(format!("record index {record_index} out of range ({} records)", records.len()))
            })?;
            let c = harness::compare_single(record, &model, &RieConfig::default())?;
            print!("{}", c.to_csv());
            eprintln!("l2 sample {:.6} rie {:.6} model {:.6}", c.l2_sample, c.l2_rie, c.l2_model);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
