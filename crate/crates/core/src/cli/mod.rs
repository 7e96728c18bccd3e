//! Command-line front end.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::finetune::Topology;
use crate::model::Protocol;
use crate::numerics::OpKind;
use commands::*;
use config::{Axis, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "point-rae", version, about = "Regress-before-reconstruct masked point modeling")]
pub struct Cli {
    /// Profile name (`desk`, `paper`) or TOML file.
    #[arg(long, global = true, default_value = "desk")]
    pub config: String,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Dotted override such as `pretrain.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pretraining.
    Pretrain {
        /// Decoder over visible tokens and mask queries, no regressor.
        #[arg(long)]
        no_regressor: bool,
        /// Also train without the regressor and plot both curves.
        #[arg(long, conflicts_with = "no_regressor")]
        compare: bool,
    },
    /// Train a classifier on a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// FULL, LINEAR, MLP3 or `all`; defaults to the config.
        #[arg(long)]
        protocol: Option<String>,
        /// a, b, c, d or `all`; defaults to the config.
        #[arg(long)]
        topology: Option<String>,
        /// Also run N-way few-shot episodes.
        #[arg(long)]
        way: Option<usize>,
        #[arg(long, default_value_t = 10)]
        shot: usize,
        #[arg(long, default_value_t = 20)]
        query: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Test accuracy of a classifier or reconstruction loss of a backbone.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep one or more axes over their configured values.
    Ablate {
        /// reg_depth, dec_depth, mask_ratio, align_target, regress_construct, topology.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Finite-difference check of every op, block, loss and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Flip the backward sign of this op to exercise the checker.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Mask a cloud and export the reconstruction as xyz files.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Write the synthetic corpus as xyz files with a manifest.
    GenData,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?.with_overrides(&cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn parse_list<T: Copy>(raw: &str, all: &[T], parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<Vec<T>> {
    if raw.eq_ignore_ascii_case("all") {
        return Ok(all.to_vec());
    }
    raw.split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| Error::config(what, format!("unknown value `{s}`"))))
        .collect()
}

/// Runs the parsed command. `Ok(false)` means the command ran but reported
/// a failure (a gradient check row failed).
pub fn execute(cli: &Cli) -> Result<bool> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Pretrain { no_regressor, compare } => {
            let o = cmd_pretrain(&cfg, PretrainOptions { no_regressor: *no_regressor, compare: *compare })?;
            println!("run dir      {}", o.run_dir.display());
            println!("checkpoint   {} (sha256 {})", o.checkpoint.display(), o.checksum);
            println!("final L_rec  {:.6}", o.final_l_rec);
            if let Some((_, l)) = o.baseline {
                println!("without regressor L_rec  {l:.6}");
            }
        }
        Command::Finetune { checkpoint, protocol, topology, way, shot, query, episodes } => {
            let protocols = match protocol {
                Some(p) => parse_list(p, &Protocol::ALL, Protocol::parse, "protocol")?,
                None => vec![cfg.finetune.protocol],
            };
            let topologies = match topology {
                Some(t) => parse_list(t, &Topology::ALL, Topology::parse, "topology")?,
                None => vec![cfg.finetune.topology.variant],
            };
            let fs = way.map(|n_way| FewShotOptions { n_way, k_shot: *shot, n_query: *query, episodes: *episodes });
            let o = cmd_finetune(&cfg, checkpoint, &protocols, &topologies, fs.as_ref())?;
            println!("run dir  {}", o.run_dir.display());
            println!("{:<8} {:<8} {:>6} {:>10} {:>10} {:>6}", "protocol", "topology", "dim", "train_acc", "test_acc", "drift");
            for s in &o.summary {
                println!(
                    "{:<8} {:<8} {:>6} {:>10.4} {:>10.4} {:>6}",
                    s.protocol, s.topology, s.feature_dim, s.final_train_acc, s.final_test_acc, s.backbone_drift
                );
            }
            for (name, s) in &o.few_shot {
                println!("few-shot {name} {}-way {}-shot: {:.4} ± {:.4}", s.n_way, s.k_shot, s.mean, s.std);
            }
        }
        Command::Eval { checkpoint } => {
            let o = cmd_eval(&cfg, checkpoint)?;
            println!("{} {:.6}", o.metric, o.value);
        }
        Command::Ablate { axes } => {
            let axes = axes
                .iter()
                .map(|a| Axis::parse(a).ok_or_else(|| Error::config("axis", format!("unknown axis `{a}`"))))
                .collect::<Result<Vec<_>>>()?;
            let o = cmd_ablate(&cfg, &axes)?;
            println!("run dir  {}", o.run_dir.display());
            println!("{}", o.header.join("\t"));
            for r in &o.rows {
                let acc: Vec<String> = r.accuracy.iter().map(|a| format!("{a:.4}")).collect();
                println!("{}\t{}\t{:.5}", r.values.join("\t"), acc.join("\t"), r.l_rec);
            }
            for n in &o.notes {
                println!("{n}");
            }
        }
        Command::Gradcheck { eps, inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::config("inject-fault", format!("unknown op `{name}`")))?),
                None => None,
            };
            let o = cmd_gradcheck(&cfg, *eps, fault)?;
            println!("{:<28} {:<6} {:>12} {:>7}  result", "name", "kind", "max_rel_err", "coords");
            for r in &o.rows {
                println!(
                    "{:<28} {:<6} {:>12.3e} {:>7}  {}",
                    r.name,
                    r.kind,
                    r.max_rel_err,
                    r.coords,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            let failed = o.rows.iter().filter(|r| !r.passed).count();
            println!("{} rows, {failed} failed; csv in {}", o.rows.len(), o.run_dir.display());
            return Ok(o.passed());
        }
        Command::Reconstruct { checkpoint, input, mask_ratio } => {
            let o = cmd_reconstruct(&cfg, checkpoint, input, *mask_ratio)?;
            println!("run dir         {}", o.run_dir.display());
            println!("masked patches  {}", o.masked_patches);
            println!("chamfer         {:.6}", o.chamfer);
        }
        Command::GenData => {
            let o = cmd_gen_data(&cfg)?;
            println!("wrote {} clouds; manifest {}", o.count, o.manifest.display());
        }
    }
    Ok(true)
}

pub fn run() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
