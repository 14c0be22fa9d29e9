//! Command-line driver: dataset generation, the phase schedule, metric
//! evaluation, and artifact inspection.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocrt::config::RunConfig;
use ocrt::io;
use ocrt::scene::{save_dataset, SceneSpec};
use ocrt::train::{run_eval, run_inspect, run_train, Phase};
use ocrt::Result;

#[derive(Parser)]
#[command(name = "ocrt", about = "Object-concept-relation pipeline at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (scenes, masks, manifest).
    Gen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Run one training phase against a dataset.
    Train {
        /// Phase: ocl, relation, sam or clip.
        #[arg(long)]
        phase: String,
        /// Dataset directory from `ocrt gen`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory; the checkpoint lands in <out>/<phase>/.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Score a checkpoint on a dataset and write JSON metrics.
    Eval {
        /// Phase checkpoint directory (e.g. <run>/ocl).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics file; written in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground-truth segments against themselves
        /// (validates the matching path; slot_iou becomes 1).
        #[arg(long = "debug_gt")]
        debug_gt: bool,
    },
    /// Dump per-slot masks, attention maps, importance, adjacency and
    /// relation tokens for one scene.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scene index within the dataset.
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Every RunConfig key doubles as a CLI flag; flags override the
/// config file (last writer wins).
#[derive(Args)]
struct ConfigFlags {
    /// key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long = "k_tilde")]
    k_tilde: Option<String>,
    #[arg(long = "d_o")]
    d_o: Option<String>,
    #[arg(long = "d_z")]
    d_z: Option<String>,
    #[arg(long)]
    t: Option<String>,
    #[arg(long = "n_r")]
    n_r: Option<String>,
    #[arg(long = "d_r")]
    d_r: Option<String>,
    #[arg(long = "graph_layers")]
    graph_layers: Option<String>,
    #[arg(long = "max_degree")]
    max_degree: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "weight_decay")]
    weight_decay: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long = "epochs_ocl")]
    epochs_ocl: Option<String>,
    #[arg(long = "epochs_relation")]
    epochs_relation: Option<String>,
    #[arg(long = "steps_sam")]
    steps_sam: Option<String>,
    #[arg(long = "steps_clip")]
    steps_clip: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long = "pgd_steps")]
    pgd_steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    count: Option<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::parse(&io::read_text(path)?)?,
            None => RunConfig::default(),
        };
        let overrides: [(&str, &Option<String>); 21] = [
            ("k", &self.k),
            ("k_tilde", &self.k_tilde),
            ("d_o", &self.d_o),
            ("d_z", &self.d_z),
            ("t", &self.t),
            ("n_r", &self.n_r),
            ("d_r", &self.d_r),
            ("graph_layers", &self.graph_layers),
            ("max_degree", &self.max_degree),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("batch", &self.batch),
            ("epochs_ocl", &self.epochs_ocl),
            ("epochs_relation", &self.epochs_relation),
            ("steps_sam", &self.steps_sam),
            ("steps_clip", &self.steps_clip),
            ("eps", &self.eps),
            ("pgd_steps", &self.pgd_steps),
            ("seed", &self.seed),
            ("size", &self.size),
            ("count", &self.count),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { out, config } => {
            let cfg = config.resolve()?;
            let spec = SceneSpec {
                size: cfg.size,
                ..SceneSpec::default()
            };
            save_dataset(&out, &spec, cfg.count, cfg.seed)?;
            io::write_text(&out.join("config.txt"), &cfg.serialize())?;
            println!("wrote {} scenes to {}", cfg.count, out.display());
            Ok(())
        }
        Cmd::Train {
            phase,
            data,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let phase = Phase::parse(&phase)?;
            let mut stdout = std::io::stdout().lock();
            run_train(&cfg, &data, phase, &out, &mut stdout)?;
            println!("checkpoint: {}", out.join(phase.name()).display());
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            debug_gt,
        } => {
            let metrics = run_eval(&checkpoint, &data, debug_gt)?;
            if let Some(path) = out {
                io::write_text(&path, &metrics)?;
            }
            print!("{metrics}");
            Ok(())
        }
        Cmd::Inspect {
            checkpoint,
            data,
            scene,
            out,
        } => run_inspect(&checkpoint, &data, scene, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
