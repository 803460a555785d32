use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use outlier_sponge::attack::{run_attack, AttackScope, Perturbation, Variant};
use outlier_sponge::harness::{
    batch_contamination, countermeasure_sweep, evaluate_baselines, generate_toy_dataset, load_dataset,
    save_dataset, transfer_eval, write_report, EvalOptions, ExperimentConfig, ReportFormat,
};
use outlier_sponge::quantlinear::OutlierPolicy;
use outlier_sponge::vit::{accuracy, load_weights, save_weights, train_toy, Dataset, VisionTransformer};
use outlier_sponge::{Result, Tensor};

#[derive(Parser)]
#[command(version, about = "Outlier-inducing perturbations against int8/f16 mixed-precision inference")]
struct Cli {
    /// JSON file with `vit`, `attack`, `cost`, `dataset` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a toy model on the first 80% of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a perturbation.
    Attack {
        #[arg(long)]
        weights: Vec<PathBuf>,
        #[command(flatten)]
        images: ImageArgs,
        /// single, universal or class-universal.
        #[arg(long, default_value = "single")]
        variant: String,
        /// Target class of the class-universal variant.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-iteration history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Clean, random-noise and adversarial conditions.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        perturbation: PathBuf,
        #[command(flatten)]
        images: ImageArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// One adversarial image inside clean batches of several sizes.
    BatchExp {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        perturbation: PathBuf,
        #[command(flatten)]
        images: ImageArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        batch_sizes: Vec<usize>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Evaluate a perturbation on a model it was not crafted on.
    Transfer {
        #[arg(long)]
        target_weights: PathBuf,
        #[arg(long)]
        perturbation: PathBuf,
        #[command(flatten)]
        images: ImageArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Cost and fidelity under capped outlier policies.
    SweepCap {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        perturbation: PathBuf,
        #[command(flatten)]
        images: ImageArgs,
        /// Column caps; `unlimited` for no cap.
        #[arg(long, value_delimiter = ',', default_value = "0,4,8,16,32,unlimited")]
        caps: Vec<String>,
        #[command(flatten)]
        report: ReportArgs,
    },
}

/// Which held-out images an operation runs on.
#[derive(Args)]
struct ImageArgs {
    #[arg(long)]
    data: PathBuf,
    /// A single held-out image.
    #[arg(long, conflicts_with = "count")]
    index: Option<usize>,
    /// The first `count` held-out images.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// json or csv.
    #[arg(long, default_value = "json", value_parser = parse_format)]
    format: ReportFormat,
    /// Record wall-clock time per condition.
    #[arg(long)]
    timing: bool,
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: outlier_sponge::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<OutlierPolicy> {
    if s == "unlimited" {
        return Ok(OutlierPolicy::Unlimited);
    }
    s.parse()
        .map(OutlierPolicy::Capped)
        .map_err(|_| outlier_sponge::Error::Param(format!("bad cap {s:?}")))
}

fn held_out(data: &Dataset) -> Dataset {
    data.split(0.8).1
}

fn select(args: &ImageArgs) -> Result<(Dataset, Tensor)> {
    let test = held_out(&load_dataset(&args.data)?);
    let idx: Vec<usize> = match (args.index, args.count) {
        (Some(i), _) => vec![i],
        (None, Some(n)) => (0..n).collect(),
        (None, None) => (0..test.len()).collect(),
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= test.len()) {
        return Err(outlier_sponge::Error::Param(format!(
            "image {bad} out of range for {} held-out images",
            test.len()
        )));
    }
    let sub = test.subset(&idx);
    let images = sub.images().clone();
    Ok((sub, images))
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<VisionTransformer> {
    let mut m = load_weights(path)?;
    m.set_tau(cfg.vit.tau)?;
    Ok(m)
}

fn options(cfg: &ExperimentConfig, report: &ReportArgs) -> EvalOptions {
    EvalOptions {
        cost: cfg.cost,
        noise_epsilon: cfg.attack.epsilon,
        noise_seed: cfg.attack.seed,
        timing: report.timing,
        ..EvalOptions::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.dataset.seed = s;
        cfg.train.seed = s;
        cfg.attack.seed = s;
    }
    match cli.command {
        Command::GenData { out } => {
            let data = generate_toy_dataset(&cfg.dataset)?;
            save_dataset(&data, &out)?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
        Command::Train { data, out } => {
            let data = load_dataset(&data)?;
            let (train, test) = data.split(0.8);
            let mut model = VisionTransformer::init_random(&cfg.vit, cfg.train.seed)?;
            let report = train_toy(&mut model, &train, &cfg.train)?;
            save_weights(&model, &out)?;
            println!(
                "final loss {:.4}, train accuracy {:.3}, held-out accuracy {:.3}",
                report.epoch_losses.last().copied().unwrap_or(f32::NAN),
                accuracy(&model, &train)?,
                accuracy(&model, &test)?
            );
        }
        Command::Attack {
            weights,
            images,
            variant,
            class,
            out,
            history,
        } => {
            let models = weights.iter().map(|w| load_model(w, &cfg)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&VisionTransformer> = models.iter().collect();
            let (sub, _) = select(&images)?;
            let variant = match (variant.as_str(), class) {
                ("single", _) => Variant::Single,
                ("universal", _) => Variant::Universal,
                ("class-universal", Some(m)) => Variant::ClassUniversal(m),
                (other, _) => {
                    return Err(outlier_sponge::Error::Param(format!(
                        "unknown variant {other:?} (class-universal needs --class)"
                    )))
                }
            };
            let mut acfg = cfg.attack.clone();
            if variant != Variant::Single && acfg.variant == Variant::Single {
                acfg.iterations = outlier_sponge::attack::AttackConfig::universal().iterations;
            }
            acfg.variant = variant;
            let (imgs, labels): (Vec<Tensor>, Vec<usize>) = match variant {
                Variant::ClassUniversal(m) => {
                    let preds = refs[0].predict(sub.images())?;
                    (0..sub.len()).filter(|&i| preds[i] == m).map(|i| (sub.image(i), m)).unzip()
                }
                _ => ((0..sub.len()).map(|i| sub.image(i)).collect(), vec![0; sub.len()]),
            };
            let scope = AttackScope::new(variant, imgs, Some(&labels))?;
            let outcome = run_attack(&refs, &scope, &acfg)?;
            outcome.perturbation.save(&out)?;
            if let Some(h) = history {
                let text = serde_json::to_string_pretty(&outcome.history)?;
                std::fs::write(&h, text).map_err(|e| outlier_sponge::Error::Io { path: h, source: e })?;
            }
            let last = outcome.history.last();
            println!(
                "wrote perturbation (L∞ {:.3}) to {}; final outlier count {}",
                outcome.perturbation.linf(),
                out.display(),
                last.map_or(0, |r| r.outliers)
            );
        }
        Command::Eval {
            weights,
            perturbation,
            images,
            report,
        } => {
            let model = load_model(&weights, &cfg)?;
            let (_, imgs) = select(&images)?;
            let delta = Perturbation::load(&perturbation)?;
            let r = evaluate_baselines(&model, &imgs, &delta.delta, &options(&cfg, &report))?;
            write_report(&r, &report.out, report.format)?;
        }
        Command::BatchExp {
            weights,
            perturbation,
            images,
            batch_sizes,
            report,
        } => {
            let model = load_model(&weights, &cfg)?;
            let test = held_out(&load_dataset(&images.data)?);
            let target = images.index.unwrap_or(0);
            let pool = images.count.unwrap_or(test.len()).min(test.len());
            if target >= test.len() {
                return Err(outlier_sponge::Error::Param(format!("image {target} out of range")));
            }
            // The attacked image's clean version occupies slot 0.
            let order: Vec<usize> = std::iter::once(target).chain((0..pool).filter(|&i| i != target)).collect();
            let clean = test.subset(&order);
            let adv = Perturbation::load(&perturbation)?.apply(&test.image(target))?;
            let r = batch_contamination(&model, clean.images(), &adv, &batch_sizes, &options(&cfg, &report))?;
            write_report(&r, &report.out, report.format)?;
        }
        Command::Transfer {
            target_weights,
            perturbation,
            images,
            report,
        } => {
            let model = load_model(&target_weights, &cfg)?;
            let (_, imgs) = select(&images)?;
            let delta = Perturbation::load(&perturbation)?;
            let r = transfer_eval(&delta.delta, &model, &imgs, &options(&cfg, &report))?;
            write_report(&r, &report.out, report.format)?;
        }
        Command::SweepCap {
            weights,
            perturbation,
            images,
            caps,
            report,
        } => {
            let model = load_model(&weights, &cfg)?;
            let (_, imgs) = select(&images)?;
            let delta = Perturbation::load(&perturbation)?;
            let policies = caps.iter().map(|c| parse_policy(c)).collect::<Result<Vec<_>>>()?;
            let r = countermeasure_sweep(&model, &imgs, &delta.delta, &policies, &options(&cfg, &report))?;
            write_report(&r, &report.out, report.format)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
