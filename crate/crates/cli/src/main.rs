use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use distgate::commands;
use distgate::{GatingConfig, Mode, RunConfig};
use distgate_core::gating::GatingParams;

#[derive(Parser)]
#[command(name = "distgate", version, about = "Distance-gated lymph node detection toolkit")]
struct Cli {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 forces fully serial execution).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateKind {
    Binary,
    Soft,
}

/// Gating thresholds in centimetres.
#[derive(clap::Args)]
struct Thresholds {
    #[arg(long)]
    d0_cm: Option<f64>,
    #[arg(long)]
    d_prox_cm: Option<f64>,
    #[arg(long)]
    d_dist_cm: Option<f64>,
}

impl Thresholds {
    fn apply(&self, g: &mut GatingConfig) {
        if let Some(v) = self.d0_cm {
            g.d0_mm = v * 10.0;
        }
        if let Some(v) = self.d_prox_cm {
            g.d_prox_mm = v * 10.0;
        }
        if let Some(v) = self.d_dist_cm {
            g.d_dist_mm = v * 10.0;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a split manifest.
    PhantomGen {
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tumour distance map from a binary mask volume.
    Edt {
        #[arg(long)]
        tumor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the brute-force reference (small volumes only).
        #[arg(long)]
        oracle: bool,
    },
    /// Per-branch gating weights from a distance map.
    Gate {
        #[arg(long)]
        distance: PathBuf,
        #[arg(long, value_enum)]
        mode: GateKind,
        #[command(flatten)]
        thresholds: Thresholds,
        /// Output stem; `_prox` and `_dist` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        thresholds: Thresholds,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Fused probability volume for one case.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[command(flatten)]
        thresholds: Thresholds,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detection metrics for a directory of probability volumes.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the precision/recall curve.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the matched instance list.
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Train and evaluate single, bg and sg on one dataset.
    EndToEnd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training seeds; defaults to the root seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Feed the ground truth back as the prediction.
        #[arg(long)]
        oracle: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::PhantomGen { cases, out } => {
            if let Some(n) = cases {
                cfg.n_cases = n;
            }
            commands::cmd_phantom_gen(&cfg, &out)?;
        }
        Command::Edt { tumor, out, oracle } => {
            commands::cmd_edt(&tumor, &out, oracle)?;
        }
        Command::Gate { distance, mode, thresholds, out } => {
            thresholds.apply(&mut cfg.gating);
            let g = match mode {
                GateKind::Binary => GatingParams::binary(cfg.gating.d0_mm)?,
                GateKind::Soft => GatingParams::soft(cfg.gating.d_prox_mm, cfg.gating.d_dist_mm)?,
            };
            commands::cmd_gate(&distance, g, &out)?;
        }
        Command::Train { data, mode, steps, thresholds, out, loss_csv } => {
            thresholds.apply(&mut cfg.gating);
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            commands::cmd_train(&cfg, &data, mode, &out, loss_csv.as_deref())?;
        }
        Command::Infer { checkpoint, case, mode, thresholds, out } => {
            thresholds.apply(&mut cfg.gating);
            commands::cmd_infer(&cfg, &checkpoint, &case, mode, &out)?;
        }
        Command::Eval { pred_dir, gt_dir, out, csv, instances } => {
            let r = commands::cmd_eval(&cfg, &pred_dir, &gt_dir, &out, csv.as_deref(), instances.as_deref())?;
            println!("mRecall {:.4} Recall_max {:.4} mFROC {:.4}", r.m_recall, r.recall_max, r.m_froc);
        }
        Command::EndToEnd { data, out, seeds, steps, oracle } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let c = commands::cmd_end_to_end(&cfg, &data, &out, &seeds, oracle)?;
            println!("mode,mRecall,Recall_max,mFROC,FROC@4,FROC@6");
            for r in &c.table {
                println!("{},{},{},{},{},{}", r.mode.name(), r.m_recall, r.recall_max, r.m_froc, r.froc_4, r.froc_6);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "status": "error", "error": chain[0], "causes": &chain[1..] }));
            ExitCode::FAILURE
        }
    }
}
