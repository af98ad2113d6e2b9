use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use cnsnet_core::config::Config;
use cnsnet_core::data::{load_istd, materialize, IstdIndex, Split, TripletSource};
use cnsnet_core::eval::{evaluate, evaluate_baseline, infer_files, Baseline};
use cnsnet_core::metrics::{EvalProtocol, LabMaeConvention, MetricReport, RegionConvention};
use cnsnet_core::model::{param_count, Ablation};
use cnsnet_core::selftest::run_selftest;
use cnsnet_core::train::{load_model, synthetic_splits, Trainer};

#[derive(Parser)]
#[command(name = "cnsnet", version, about = "Shadow removal with region-aware normalisation and mask-guided attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Structural variant: full, no-soan, no-saat, soan-bn, soan-in, saat-hard-mask.
    #[arg(long)]
    ablation: Option<String>,
    /// 256x256 crops, batch 8 and 200 epochs instead of the desk-scale defaults.
    #[arg(long)]
    paper_scale: bool,
}

impl Common {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.ablation {
            cfg.ablation = Ablation::parse(a).with_context(|| format!("unknown ablation {a:?}"))?;
        }
        if self.paper_scale {
            cfg = cfg.paper_scale();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum LabArg {
    Sum,
    Mean,
}

#[derive(Copy, Clone, ValueEnum)]
enum RegionArg {
    MaskedImage,
    Restricted,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset with train/ and test/ splits.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Training triplets (defaults to the configured count).
        #[arg(long)]
        train: Option<usize>,
        /// Test triplets (defaults to the configured validation count).
        #[arg(long)]
        test: Option<usize>,
    },
    /// Trains a model and writes best.ckpt and last.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root in ISTD layout; synthetic data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/cnsnet")]
        out: PathBuf,
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured number of steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Scores a checkpoint, the input images (--identity) or the ground truth (--oracle).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["checkpoint", "oracle"])]
        identity: bool,
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Split to read from --data.
        #[arg(long, default_value = "test")]
        split: String,
        /// Resize to 256x256 before scoring.
        #[arg(long)]
        resize256: bool,
        #[arg(long, value_enum, default_value = "sum")]
        lab: LabArg,
        #[arg(long, value_enum, default_value = "masked-image")]
        region: RegionArg,
        /// Score outputs without 8-bit rounding.
        #[arg(long)]
        no_quantize: bool,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Removes the shadow from one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Runs the invariant battery and prints a table.
    Selftest {
        /// Random seeds per gradient check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn open_split(root: &Path, split: Split) -> Result<IstdIndex> {
    let idx = load_istd(root, split)?;
    for w in &idx.warnings {
        warn!("{w}");
    }
    info!("{} {} triplets under {}", idx.entries.len(), split.name(), root.display());
    Ok(idx)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => bail!("split must be train or test, got {s:?}"),
    }
}

fn synth(cfg: &Config, out: &Path, train: Option<usize>, test: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.train_count = train.unwrap_or(cfg.train_count);
    cfg.val_count = test.unwrap_or(cfg.val_count);
    let (tr, te) = synthetic_splits(&cfg)?;
    materialize(out.join("train"), &tr)?;
    materialize(out.join("test"), &te)?;
    println!("wrote {} train and {} test triplets to {}", tr.len(), te.len(), out.display());
    Ok(())
}

fn train(cfg: &Config, data: Option<&Path>, out: &Path, resume: Option<&Path>, steps: Option<u64>) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::<f32>::load(p)?;
            info!("resuming from {} at step {}", p.display(), t.state.step);
            t
        }
        None => Trainer::<f32>::new(cfg)?,
    };
    if let Some(s) = steps {
        trainer.cfg.steps = s;
    }
    info!(
        "model {}: {} parameters",
        trainer.cfg.ablation.name(),
        param_count(&trainer.vs)
    );
    std::fs::create_dir_all(out)?;
    trainer.cfg.save(out.join("config.toml"))?;
    let summary = match data {
        Some(root) => {
            let tr = open_split(root, Split::Train)?;
            let val = open_split(root, Split::Test)?;
            let mut val_entries = val.clone();
            val_entries.entries.truncate(trainer.cfg.val_count);
            trainer.fit(&tr, &val_entries, Some(out))?
        }
        None => {
            let (tr, val) = synthetic_splits(&trainer.cfg)?;
            trainer.fit(&tr, &val, Some(out))?
        }
    };
    if let Some((step, r)) = summary.validations.last() {
        println!("final validation at step {step}:\n{}", r.table());
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn print_report(r: &MetricReport, json: bool, path: Option<&Path>) -> Result<()> {
    if json {
        println!("{}", r.to_json());
    } else {
        print!("{}", r.table());
    }
    if let Some(p) = path {
        std::fs::write(p, r.to_json())?;
    }
    Ok(())
}

enum Target<'a> {
    Baseline(Baseline),
    Model(&'a Path, Option<&'a Config>),
}

fn score(source: &dyn TripletSource, target: &Target, protocol: EvalProtocol) -> Result<MetricReport> {
    Ok(match target {
        Target::Baseline(b) => evaluate_baseline(source, *b, protocol)?,
        Target::Model(ck, given) => {
            let (_, net, vs) = load_model::<f32>(ck, *given)?;
            evaluate(&net, &vs, source, protocol)?
        }
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, train, test } => synth(&common.resolve()?, &out, train, test),
        Command::Train {
            common,
            data,
            out,
            resume,
            steps,
        } => train(&common.resolve()?, data.as_deref(), &out, resume.as_deref(), steps),
        Command::Eval {
            common,
            data,
            checkpoint,
            identity,
            oracle,
            split,
            resize256,
            lab,
            region,
            no_quantize,
            json,
            report,
        } => {
            let protocol = EvalProtocol {
                resize: resize256.then_some((256, 256)),
                quantize: !no_quantize,
                lab: match lab {
                    LabArg::Sum => LabMaeConvention::ChannelSum,
                    LabArg::Mean => LabMaeConvention::ChannelMean,
                },
                region: match region {
                    RegionArg::MaskedImage => RegionConvention::MaskedImage,
                    RegionArg::Restricted => RegionConvention::Restricted,
                },
            };
            let given = common.config.is_some().then(|| common.resolve()).transpose()?;
            let baseline = match (identity, oracle) {
                (true, _) => Some(Baseline::Identity),
                (_, true) => Some(Baseline::Oracle),
                _ => None,
            };
            let target = match baseline {
                Some(b) => Target::Baseline(b),
                None => {
                    let ck = checkpoint.as_deref().context("eval needs --checkpoint, --identity or --oracle")?;
                    Target::Model(ck, given.as_ref())
                }
            };
            let r = match &data {
                Some(root) => score(&open_split(root, parse_split(&split)?)?, &target, protocol)?,
                None => {
                    let cfg = match &given {
                        Some(c) => c.clone(),
                        None => common.resolve()?,
                    };
                    let (_, val) = synthetic_splits(&cfg)?;
                    score(&val, &target, protocol)?
                }
            };
            print_report(&r, json, report.as_deref())
        }
        Command::Infer {
            checkpoint,
            image,
            mask,
            out,
        } => {
            let (_, net, vs) = load_model::<f32>(&checkpoint, None)?;
            let (o, s) = infer_files(&net, &vs, &image, &mask, &out)?;
            println!("wrote {} and {}", o.display(), s.display());
            Ok(())
        }
        Command::Selftest { seeds } => {
            let r = run_selftest(seeds);
            print!("{}", r.table());
            if !r.all_passed() {
                bail!("self-test failed");
            }
            println!("all checks passed");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
