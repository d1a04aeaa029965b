use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marnet_core::data::write_embeddings;
use marnet_core::pipeline::{
    self, ablate_to_dir, evaluate, export_embeddings, format_ablation, load_models, prepare_data,
    retrain_fusion_in_dir, synthetic_set, train_to_dir, write_report, ExportKind, Variant,
};
use marnet_core::{Error, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "marnet", version, about = "Train, evaluate and ablate MARNet models on paired embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic embedding set (MREB) to --out.
    GenData(Common),
    /// Train all stages (or only the fusion head) into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// `all`, or `fusion` to retrain only the fusion head from existing checkpoints.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Evaluate trained checkpoints in --out on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// baseline, ema, mlp, cdr, fusion or all.
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// Train everything and evaluate all five variants.
    Ablate(Common),
    /// Export one representation of every row as an MREX file.
    Export {
        #[command(flatten)]
        common: Common,
        /// raw_visual, ema, cdr or fused.
        #[arg(long)]
        which: String,
        /// Output file; defaults to <out>/export_<which>.mrex.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding file (MREB); synthetic data when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (gen-data: output file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// concat, add, sum, mul or hm.
    #[arg(long)]
    fusion: Option<String>,
    /// Optimize the contrastive temperature.
    #[arg(long)]
    train_temp: bool,
    /// Reverse chains averaged per x_CDR.
    #[arg(long)]
    num_samples: Option<usize>,
    /// Sets every stage's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// parallel or sequential.
    #[arg(long)]
    exec: Option<String>,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    /// Defaults, then `base` (a previous run's config), then --config, then flags.
    fn resolve(&self, base: Option<&Path>) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = base.filter(|p| p.exists()) {
            cfg = RunConfig::from_file(path)?;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.fusion {
            cfg.set("fusion", v)?;
        }
        if self.train_temp {
            cfg.train_temp = true;
        }
        if let Some(v) = self.num_samples {
            cfg.num_samples = v;
        }
        if let Some(v) = self.epochs {
            cfg.set("epochs", &v.to_string())?;
        }
        if let Some(v) = &self.exec {
            cfg.set("exec", v)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Config for commands that read an existing run directory.
    fn resolve_for_run(&self) -> Result<RunConfig, Error> {
        let out = self.out.clone().unwrap_or_else(|| RunConfig::default().out);
        self.resolve(Some(&out.join("config.txt")))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.resolve(None).map_err(|e| e.at_stage(Stage::Data))?;
            let set = synthetic_set(&cfg).map_err(|e| e.at_stage(Stage::Data))?;
            let path = common.out.clone().unwrap_or_else(|| PathBuf::from("data.mreb"));
            write_embeddings(&set, &path).map_err(|e| e.at_stage(Stage::Data))?;
            println!(
                "wrote {} rows ({} classes, d_v={}, d_s={}) to {}",
                set.len(),
                set.classes(),
                set.visual_dim(),
                set.semantic_dim(),
                path.display()
            );
        }
        Command::Train { common, stage } => match stage.as_str() {
            "all" => {
                let cfg = common.resolve(None).map_err(|e| e.at_stage(Stage::Data))?;
                let outcome = train_to_dir(&cfg)?;
                for log in &outcome.logs {
                    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
                        println!(
                            "{}\tepochs={}\tloss {:.6} -> {:.6}",
                            log.stage, last.epoch, first.report.total, last.report.total
                        );
                    }
                }
                println!("checkpoints in {}", cfg.out.display());
            }
            "fusion" => {
                let cfg = common.resolve_for_run().map_err(|e| e.at_stage(Stage::Fusion))?;
                retrain_fusion_in_dir(&cfg)?;
                println!("fusion head retrained in {}", cfg.out.display());
            }
            other => {
                return Err(Error::Config(format!("--stage must be all or fusion, got {other:?}")).at_stage(Stage::Data))
            }
        },
        Command::Eval { common, variant } => {
            let cfg = common.resolve_for_run().map_err(|e| e.at_stage(Stage::Eval))?;
            let variants: Vec<Variant> = if variant == "all" {
                Variant::ALL.to_vec()
            } else {
                vec![variant.parse().map_err(|e: Error| e.at_stage(Stage::Eval))?]
            };
            let data = prepare_data(&cfg)?;
            let models = load_models(&cfg.out)?;
            let features = if variants.iter().any(|v| matches!(v, Variant::Cdr | Variant::Fusion)) {
                Some(pipeline::branch_features(&cfg, &models, &data.set).map_err(|e| e.at_stage(Stage::Eval))?)
            } else {
                None
            };
            let mut rows = Vec::new();
            for v in variants {
                let report = evaluate(&cfg, &models, &data, v, features.as_ref())?;
                write_report(&cfg.out, v, &report).map_err(|e| e.at_stage(Stage::Eval))?;
                rows.push(pipeline::AblationRow {
                    variant: v.name(),
                    top1: report.top1,
                    top5: report.top5,
                    confidence_mean: report.confidence_mean,
                    report,
                });
            }
            print!("{}", format_ablation(&rows));
        }
        Command::Ablate(common) => {
            let cfg = common.resolve(None).map_err(|e| e.at_stage(Stage::Data))?;
            let rows = ablate_to_dir(&cfg)?;
            print!("{}", format_ablation(&rows));
        }
        Command::Export { common, which, file } => {
            let cfg = common.resolve_for_run().map_err(|e| e.at_stage(Stage::Export))?;
            let kind: ExportKind = which.parse().map_err(|e: Error| e.at_stage(Stage::Export))?;
            let data = prepare_data(&cfg)?;
            let models = load_models(&cfg.out)?;
            let path = file.unwrap_or_else(|| cfg.out.join(format!("export_{which}.mrex")));
            let out = export_embeddings(&cfg, &models, &data.set, kind, &path)?;
            println!("wrote {} rows of dim {} to {}", out.len(), out.dim, path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("marnet: {e}");
            let mut source = std::error::Error::source(e.root());
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
