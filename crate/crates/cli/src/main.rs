use std::path::PathBuf;
use std::sync::Arc;

use advcomp_cli::{commands, server};
use advcomp_core::data::AttackMethod;
use advcomp_core::harness::AnnotationStore;
use advcomp_core::zoo::ZooTrainOptions;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "advcomp",
    version,
    about = "Unrestricted adversarial attack competition toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model zoo on synthetic shapes and write weights plus zoo.csv.
    TrainZoo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2021)]
        seed: u64,
        #[arg(long, default_value_t = 4000)]
        train_images: usize,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        learning_rate: f64,
        /// Train only these members (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Write synthetic images that the target model classifies correctly.
    MakeDataset {
        #[arg(long, default_value = "zoo")]
        zoo: PathBuf,
        #[arg(long, default_value = "t0")]
        target: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack a dataset, store the adversarial images and score them.
    Attack {
        /// tdmi, eps-search, perceptual, rdti, rotation or frequency.
        #[arg(long)]
        method: Option<AttackMethod>,
        /// TOML run config; command line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        zoo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Machine score of a directory of adversarial images.
    Score {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        adv: PathBuf,
        #[arg(long, default_value = "t0")]
        target: String,
        #[arg(long, default_value = "zoo")]
        zoo: PathBuf,
    },
    /// Serve annotation tasks for a run directory.
    ServeAnnotations {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Run directory written by `attack`.
        #[arg(long)]
        store: PathBuf,
    },
    /// Aggregate a JSON-lines annotation log into the human score.
    Aggregate {
        #[arg(long)]
        annotations: PathBuf,
        /// Run directory supplying success flags and ASR.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Machine and human scores of a run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::TrainZoo {
            out,
            seed,
            train_images,
            epochs,
            learning_rate,
            only,
        } => {
            let mut opts = ZooTrainOptions {
                seed,
                train_images,
                ..Default::default()
            };
            opts.train.epochs = epochs;
            opts.train.learning_rate = learning_rate;
            commands::train_zoo_command(&out, &opts, &only)
        }
        Command::MakeDataset {
            zoo,
            target,
            n,
            seed,
            out,
        } => commands::make_dataset_command(&zoo, &target, n, seed, &out),
        Command::Attack {
            method,
            config,
            data,
            zoo,
            out,
        } => {
            let cfg = commands::resolve_run_config(
                method,
                config.as_deref(),
                data.as_deref(),
                zoo.as_deref(),
            )?;
            commands::print_json(&commands::attack_command(&cfg, &out)?)
        }
        Command::Score {
            clean,
            adv,
            target,
            zoo,
        } => commands::print_json(&commands::score_command(&clean, &adv, &target, &zoo)?),
        Command::ServeAnnotations { port, store } => {
            let store = Arc::new(AnnotationStore::open(&store)?);
            tokio::runtime::Runtime::new()?.block_on(server::serve(store, port))?;
            Ok(())
        }
        Command::Aggregate { annotations, run } => {
            commands::print_json(&commands::aggregate_command(&annotations, run.as_deref())?)
        }
        Command::Report { run } => commands::print_json(&commands::report_command(&run)?),
    }
}
