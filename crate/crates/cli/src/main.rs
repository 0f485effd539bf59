mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "splitq", version, about = "Channel-split quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic activation batch and weight.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokens_text: Option<usize>,
        #[arg(long)]
        tokens_vision: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        d_out: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        vision_outliers: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        text_outliers: Option<Vec<usize>>,
        #[arg(long)]
        vision_scale: Option<f64>,
        #[arg(long)]
        instability: Option<f64>,
    },
    /// Select outlier channels and write the partition and channel maxima.
    Select {
        #[command(flatten)]
        common: Common,
    },
    /// Build and calibrate a layer, writing its manifest and loss trace.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Report reconstruction error and weight-error deciles of a layer.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also calibrate and evaluate every toggle combination.
        #[arg(long)]
        ablation: bool,
    },
    /// Jaccard similarity of selections on token subsets.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        subset_sizes: Option<Vec<usize>>,
        #[arg(long)]
        reference_size: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    wbits: Option<u8>,
    #[arg(long)]
    abits: Option<u8>,
    /// Use the identity quantizer everywhere.
    #[arg(long)]
    identity_quant: bool,
    #[arg(long)]
    no_mocd: bool,
    #[arg(long)]
    no_cws: bool,
    #[arg(long)]
    no_mac: bool,
    #[arg(long)]
    ratio_vision: Option<f64>,
    #[arg(long)]
    ratio_text: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    rank_cws: Option<f64>,
    #[arg(long)]
    rank_mac: Option<f64>,
    /// Calibration steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Calibration learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    activations: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    layer: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set(&mut c.out, self.out);
        set(&mut c.wbits, self.wbits);
        set(&mut c.abits, self.abits);
        set(&mut c.ratio_vision, self.ratio_vision);
        set(&mut c.ratio_text, self.ratio_text);
        set(&mut c.clusters, self.clusters);
        set(&mut c.rank_cws, self.rank_cws);
        set(&mut c.rank_mac, self.rank_mac);
        set(&mut c.calib.steps, self.steps);
        set(&mut c.calib.learning_rate, self.lr);
        c.identity_quant |= self.identity_quant;
        c.mocd &= !self.no_mocd;
        c.cws &= !self.no_cws;
        c.mac &= !self.no_mac;
        if self.activations.is_some() {
            c.activations = self.activations;
        }
        if self.weights.is_some() {
            c.weights = self.weights;
        }
        if self.layer.is_some() {
            c.layer = self.layer;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            common,
            tokens_text,
            tokens_vision,
            dim,
            d_out,
            vision_outliers,
            text_outliers,
            vision_scale,
            instability,
        } => {
            let mut c = common.resolve()?;
            let s = &mut c.synth;
            set(&mut s.tokens_text, tokens_text);
            set(&mut s.tokens_vision, tokens_vision);
            set(&mut s.dim, dim);
            set(&mut s.d_out, d_out);
            set(&mut s.vision_outlier_channels, vision_outliers);
            set(&mut s.text_outlier_channels, text_outliers);
            set(&mut s.vision_outlier_scale, vision_scale);
            set(&mut s.text_instability, instability);
            commands::gen(&c)
        }
        Command::Select { common } => commands::select(&common.resolve()?),
        Command::Calibrate { common } => commands::calibrate(&common.resolve()?),
        Command::Eval { common, ablation } => {
            let mut c = common.resolve()?;
            c.ablation |= ablation;
            commands::eval(&c)
        }
        Command::Stability {
            common,
            subset_sizes,
            reference_size,
            trials,
        } => {
            let mut c = common.resolve()?;
            set(&mut c.stability.subset_sizes, subset_sizes);
            if reference_size.is_some() {
                c.stability.reference_size = reference_size;
            }
            set(&mut c.stability.trials, trials);
            commands::stability(&c)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
