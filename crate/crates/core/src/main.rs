use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use risfuse::checks::{run_suite, CheckModule};
use risfuse::data::{load_dataset, make_toy_split, split_regions, write_dataset, Connectivity, ToyOptions, ToyVariant};
use risfuse::imaging::{overlay_mask, read_image, read_mask, write_image, write_mask};
use risfuse::metrics::{evaluate, MetricsReport};
use risfuse::model::Model;
use risfuse::report::{ablation_run, ablation_table, report_table, RunSummary, TableFormat};
use risfuse::ris::{binarize, DEFAULT_THRESHOLD};
use risfuse::text::{load_embedding, toy_embed};
use risfuse::train::{train, TrainConfig};
use risfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "risfuse", version, about = "Text-gated IR/visible fusion with referring segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Ops,
    Lga,
    Losses,
    Pipeline,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Single,
    Two,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse one IR/visible pair and write the fused RGB image.
    Fuse {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        /// TEB embedding file.
        #[arg(long, conflicts_with = "text", required_unless_present = "text")]
        emb: Option<PathBuf>,
        /// Expression embedded with the built-in toy embedder.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the fused image with the predicted mask overlaid.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Train from a dataset manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML or JSON; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// JSON-lines loss log, one record per step.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset manifest.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
    },
    /// Write a synthetic dataset (train manifest, plus a test manifest with --test-n).
    MakeToyData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        test_n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value = "single")]
        variant: VariantArg,
        #[arg(long, default_value_t = risfuse::text::DEFAULT_DIM)]
        text_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a binary mask into its connected components.
    SplitRegions {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// 4 or 8.
        #[arg(long, default_value_t = 8)]
        connectivity: u8,
    },
    /// Tabulate metric reports given as LABEL=PATH (eval reports or run summaries).
    Report {
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
    /// Train and evaluate the four gating/joint-optimization arms.
    Ablation {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
        /// Also write the per-arm summaries as JSON.
        #[arg(long)]
        summaries: Option<PathBuf>,
    },
}

fn table_format(f: FormatArg) -> TableFormat {
    match f {
        FormatArg::Text => TableFormat::Text,
        FormatArg::Csv => TableFormat::Csv,
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)?;
    if let Ok(summary) = serde_json::from_str::<RunSummary>(&text) {
        return Ok(summary.metrics);
    }
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fuse {
            ir,
            vis,
            emb,
            text,
            ckpt,
            out,
            overlay,
        } => {
            let model = Model::load(&ckpt)?;
            let emb = match (emb, text) {
                (Some(p), _) => load_embedding(p)?,
                (None, Some(t)) => toy_embed(&t, model.config().text_dim)?,
                (None, None) => unreachable!("clap requires one of --emb/--text"),
            };
            let inference = model.infer(&read_image(&vis)?, &read_image(&ir)?, &emb)?;
            write_image(&inference.fused, &out)?;
            if let Some(path) = overlay {
                let mask = binarize(&inference.prob, DEFAULT_THRESHOLD)?;
                write_image(&overlay_mask(&inference.fused, &mask, 0.5)?, path)?;
            }
        }
        Command::Train {
            data,
            config,
            out_ckpt,
            log,
        } => {
            let config = load_config(config.as_deref())?;
            let samples = load_dataset(&data)?;
            let mut writer = log.map(|p| fs::File::create(p).map(BufWriter::new)).transpose()?;
            let outcome = train(&config, &samples, writer.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            outcome.model.save(&out_ckpt)?;
            let last = outcome.log.last().expect("at least one step");
            println!(
                "trained {} steps in {:.1}s: L_seg {:.4}, L_fuse {:.4}, L_total {:.4}",
                outcome.log.len(),
                outcome.seconds,
                last.l_seg,
                last.l_fuse,
                last.l_total
            );
        }
        Command::Eval {
            data,
            ckpt,
            report,
            threshold,
        } => {
            let model = Model::load(&ckpt)?;
            let samples = load_dataset(&data)?;
            let metrics = evaluate(&model, &samples, threshold)?;
            fs::write(&report, serde_json::to_string_pretty(&metrics)?)?;
            print!("{}", report_table(&[(ckpt.display().to_string(), metrics)], TableFormat::Text)?);
        }
        Command::Gradcheck { module } => {
            let module = match module {
                ModuleArg::All => CheckModule::All,
                ModuleArg::Ops => CheckModule::Ops,
                ModuleArg::Lga => CheckModule::Lga,
                ModuleArg::Losses => CheckModule::Losses,
                ModuleArg::Pipeline => CheckModule::Pipeline,
            };
            let cases = run_suite(module)?;
            let mut failed = 0;
            for c in &cases {
                let status = if c.passed() { "ok  " } else { "FAIL" };
                failed += !c.passed() as usize;
                println!(
                    "{status} {:<8} {:<28} max rel err {:.3e}  refined {}",
                    format!("{:?}", c.module),
                    c.case,
                    c.report.max_rel_error(),
                    c.report.refined()
                );
            }
            println!("{} cases, {failed} failed", cases.len());
            if failed > 0 {
                return Err(Error::GradcheckFailed(format!("{failed} of {} cases exceeded tolerance", cases.len())));
            }
        }
        Command::MakeToyData {
            n,
            test_n,
            size,
            seed,
            variant,
            text_dim,
            out,
        } => {
            let opts = ToyOptions {
                variant: match variant {
                    VariantArg::Single => ToyVariant::SingleTarget,
                    VariantArg::Two => ToyVariant::TwoTargets,
                },
                text_dim,
            };
            let (train_set, test_set) = make_toy_split(n, test_n, size, seed, &opts)?;
            let manifest = write_dataset(&train_set, &out, "train.jsonl")?;
            println!("wrote {} samples to {}", train_set.len(), manifest.display());
            if !test_set.is_empty() {
                let manifest = write_dataset(&test_set, &out, "test.jsonl")?;
                println!("wrote {} samples to {}", test_set.len(), manifest.display());
            }
        }
        Command::SplitRegions {
            mask,
            out_dir,
            connectivity,
        } => {
            let conn = match connectivity {
                4 => Connectivity::Four,
                8 => Connectivity::Eight,
                other => return Err(Error::Invalid(format!("connectivity must be 4 or 8, got {other}"))),
            };
            let regions = split_regions(&read_mask(&mask)?, conn);
            fs::create_dir_all(&out_dir)?;
            for (i, r) in regions.iter().enumerate() {
                write_mask(r, out_dir.join(format!("region_{i:03}.png")))?;
            }
            println!("{} regions", regions.len());
        }
        Command::Report { inputs, format } => {
            let reports = inputs
                .iter()
                .map(|arg| {
                    let (label, path) = arg
                        .split_once('=')
                        .ok_or_else(|| Error::Invalid(format!("expected LABEL=PATH, got {arg:?}")))?;
                    Ok((label.to_string(), read_report(Path::new(path))?))
                })
                .collect::<Result<Vec<_>>>()?;
            print!("{}", report_table(&reports, table_format(format))?);
        }
        Command::Ablation {
            train,
            test,
            config,
            format,
            summaries,
        } => {
            let config = load_config(config.as_deref())?;
            let rows = ablation_run(&config, &load_dataset(&train)?, &load_dataset(&test)?)?;
            if let Some(path) = summaries {
                fs::write(path, serde_json::to_string_pretty(&rows)?)?;
            }
            print!("{}", ablation_table(&rows, table_format(format))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
