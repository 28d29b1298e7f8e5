use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use duoformer::ablate::{run_suite, toy_base, Suite, SEEDS};
use duoformer::backbone::FeaturePyramid;
use duoformer::config::{DuoFormerConfig, RunConfig};
use duoformer::data::{gen_synthetic, load_dir, Splits, SyntheticSpec};
use duoformer::format::Record;
use duoformer::model::{DuoFormer, Input};
use duoformer::trainer::{evaluate, train, EvalResult, TrainOptions};
use duoformer::verify::{model_grad_check, CheckOptions, DEFAULT_STEP};
use duoformer::{DType, Error, Float, Result, Tensor};

/// Hierarchical CNN-transformer classifier with scale and patch attention.
///
/// Exit codes: 0 success, 2 configuration or shape error, 3 I/O or format
/// error, 4 numeric failure (including a failed gradient check).
#[derive(Parser, Debug)]
#[command(name = "duoformer", version)]
struct Cli {
    /// Single-threaded execution for bitwise-reproducible results.
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    /// Overrides the model and training seeds (data seed for gen-synthetic).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic shape/texture dataset.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Validation samples, taken after the training split.
        #[arg(long, default_value_t = 32)]
        val: usize,
        /// Test samples, taken last.
        #[arg(long, default_value_t = 32)]
        test: usize,
    },
    /// Train a model and keep the best validation checkpoint.
    Train {
        /// key=value run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for run.jsonl, best.dfc, last.dfc and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Precomputed pyramid container; skips the toy backbone.
        #[arg(long)]
        pyramid: Option<PathBuf>,
        /// Print one JSON line per epoch to stderr.
        #[arg(long, default_value_t = false)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on the test split and write metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pyramid: Option<PathBuf>,
        /// Directory for metrics.json [default: the checkpoint's directory]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group in f64.
    Gradcheck {
        /// key=value configuration [default: the toy configuration]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Central-difference step.
        #[arg(long, default_value_t = DEFAULT_STEP)]
        eps: f64,
        /// Coordinates checked per tensor.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_backward: Option<f64>,
    },
    /// Run an ablation suite over seeds 0, 1 and 2.
    Ablate {
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        data: PathBuf,
        /// Directory for ablation.txt and ablation.json.
        #[arg(long)]
        out: PathBuf,
        /// Base configuration [default: toy model, 30 epochs, patience 10, lr 1e-3, batch 16]
        #[arg(long)]
        config: Option<PathBuf>,
        /// One thread per configuration; ignored with --deterministic.
        #[arg(long, default_value_t = false)]
        parallel: bool,
    },
    /// Write the multi-scale tokens of one image as an [S, N, D] tensor.
    Tokenize {
        /// DFT1 image, [H, H, 3] or [1, H, H, 3].
        #[arg(long, required_unless_present = "pyramid")]
        image: Option<PathBuf>,
        /// Pyramid container with batch 1, used instead of the image.
        #[arg(long)]
        pyramid: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Take weights from this checkpoint instead of the seeded init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    read_config_over(path, RunConfig::default(), seed)
}

fn read_config_over(path: &Path, base: RunConfig, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse_over(&text, base)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_geometry<T: Float>(cfg: &DuoFormerConfig, splits: &Splits<T>) -> Result<()> {
    let size = splits.train.inputs.input_size();
    if size != cfg.input_size {
        return Err(Error::Config(format!(
            "data has input size {size} but the model expects {}",
            cfg.input_size
        )));
    }
    let classes = splits.class_names.len();
    if classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "data has {classes} classes but the model has num_classes={}",
            cfg.num_classes
        )));
    }
    Ok(())
}

fn print_eval(label: &str, r: &EvalResult, names: &[String]) {
    println!("{label} balanced accuracy: {:.6}", r.balanced_accuracy);
    for (c, recall) in r.recalls.iter().enumerate() {
        let name = names.get(c).map(String::as_str).unwrap_or("?");
        match recall {
            Some(v) => println!("  recall {c} ({name}): {v:.6}"),
            None => println!("  recall {c} ({name}): absent"),
        }
    }
}

fn run_train<T: Float>(
    cfg: RunConfig,
    data: &Path,
    out: &Path,
    pyramid: Option<&Path>,
    verbose: bool,
) -> Result<()> {
    let splits = load_dir::<T>(data, pyramid)?;
    check_geometry(&cfg.model, &splits)?;
    let mut model = match pyramid {
        Some(_) => DuoFormer::<T>::for_pyramids(cfg.model.clone())?,
        None => DuoFormer::<T>::new(cfg.model.clone())?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.serialize())?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        verbose,
        ..Default::default()
    };
    let rec = train(&mut model, &splits, &cfg.train, &opts)?;
    println!(
        "epochs {} (best {}, val balanced accuracy {:.6})",
        rec.epochs.len(),
        rec.best_epoch,
        rec.best_val_balanced_acc
    );
    print_eval("test", &rec.test, &splits.class_names);
    Ok(())
}

#[derive(Serialize)]
struct Metrics<'a> {
    checkpoint: String,
    samples: usize,
    #[serde(flatten)]
    result: &'a EvalResult,
    class_names: &'a [String],
}

fn run_eval<T: Float>(
    checkpoint: &Path,
    data: &Path,
    pyramid: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let model = DuoFormer::<T>::load(checkpoint)?;
    let splits = load_dir::<T>(data, pyramid)?;
    check_geometry(&model.cfg, &splits)?;
    let r = evaluate(&model, &splits.test)?;
    print_eval("test", &r, &splits.class_names);
    let metrics = Metrics {
        checkpoint: checkpoint.display().to_string(),
        samples: splits.test.len(),
        result: &r,
        class_names: &splits.class_names,
    };
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(out.join("metrics.json"), json)?;
    Ok(())
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let c = duoformer::format::Container::load(path)?;
    let cfg = DuoFormerConfig::from_text(&c.require("config")?.as_text()?)?;
    Ok(cfg.dtype)
}

fn run_tokenize<T: Float>(
    cfg: DuoFormerConfig,
    image: Option<&Path>,
    pyramid: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let model = match checkpoint {
        Some(p) => {
            let m = DuoFormer::<T>::load(p)?;
            if m.cfg != cfg {
                return Err(Error::Config(
                    "checkpoint configuration differs from --config".into(),
                ));
            }
            m
        }
        None if pyramid.is_some() => DuoFormer::<T>::for_pyramids(cfg)?,
        None => DuoFormer::<T>::new(cfg)?,
    };
    let (tokens, maps) = match (pyramid, image) {
        (Some(p), _) => {
            let p = FeaturePyramid::<T>::load(p)?;
            if p.batch() != Some(1) {
                return Err(Error::Shape(format!(
                    "tokenize takes one sample, the pyramid has batch {:?}",
                    p.batch()
                )));
            }
            model.tokens(Input::Pyramid(&p))?
        }
        (None, Some(path)) => {
            let img: Tensor<T> = Record::load(path)?.to_float()?;
            let s = img.shape().to_vec();
            let img = match s.len() {
                3 => Tensor::new(&[1, s[0], s[1], s[2]], img.into_data())?,
                4 if s[0] == 1 => img,
                _ => {
                    return Err(Error::Shape(format!(
                        "image must be [H, H, 3] or [1, H, H, 3], got {s:?}"
                    )))
                }
            };
            model.tokens(Input::Images(&img))?
        }
        (None, None) => unreachable!("clap requires --image or --pyramid"),
    };
    let s = tokens.shape()[1..].to_vec();
    let tokens = Tensor::new(&s, tokens.into_data())?;
    Record::from_float(&tokens).save(out)?;
    let mut layout = format!("S={} N={} D={}\n", s[0], s[1], s[2]);
    let mut start = 0;
    for m in &maps {
        let n = m.tokens_per_patch();
        layout.push_str(&format!(
            "stage={} side={} tokens={} start={start}\n",
            m.stage, m.block, n
        ));
        start += n;
    }
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".layout.txt");
    fs::write(PathBuf::from(sidecar), layout)?;
    println!("tokens {s:?} written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic {
            out,
            classes,
            samples,
            size,
            val,
            test,
        } => {
            let spec = SyntheticSpec {
                classes,
                samples,
                size,
                seed: cli.seed.unwrap_or(0),
                val,
                test,
            };
            gen_synthetic(&spec, &out)?;
            println!(
                "{samples} samples ({} train, {val} val, {test} test) written to {}",
                spec.train(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            pyramid,
            verbose,
        } => {
            let cfg = read_config(&config, cli.seed)?;
            match cfg.model.dtype {
                DType::F64 => run_train::<f64>(cfg, &data, &out, pyramid.as_deref(), verbose),
                _ => run_train::<f32>(cfg, &data, &out, pyramid.as_deref(), verbose),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            pyramid,
            out,
        } => {
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            match checkpoint_dtype(&checkpoint)? {
                DType::F64 => run_eval::<f64>(&checkpoint, &data, pyramid.as_deref(), &out),
                _ => run_eval::<f32>(&checkpoint, &data, pyramid.as_deref(), &out),
            }
        }
        Command::Gradcheck {
            config,
            eps,
            samples,
            out,
            corrupt_backward,
        } => {
            let base = RunConfig {
                model: DuoFormerConfig::toy(),
                ..RunConfig::default()
            };
            let cfg = match config {
                Some(p) => read_config_over(&p, base, cli.seed)?.model,
                None => base.model,
            };
            let opts = CheckOptions {
                step: eps,
                samples,
                seed: cli.seed.unwrap_or(0),
                corrupt_scale: corrupt_backward,
            };
            let report = model_grad_check(&cfg, &opts)?;
            print!("{}", report.to_text());
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                fs::write(p, json)?;
            }
            if report.passes() {
                println!("all groups below {:e}", report.tolerance);
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "max relative error {:.3e} exceeds {:e}",
                    report.max_rel_error(),
                    report.tolerance
                )))
            }
        }
        Command::Ablate {
            suite,
            data,
            out,
            config,
            parallel,
        } => {
            let base = match config {
                Some(p) => read_config_over(&p, toy_base(), cli.seed)?,
                None => toy_base(),
            };
            let splits = load_dir::<f32>(&data, None)?;
            check_geometry(&base.model, &splits)?;
            let report = run_suite(
                suite,
                &base,
                &splits,
                &SEEDS,
                parallel && !cli.deterministic,
                true,
            )?;
            let text = report.to_text();
            print!("{text}");
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.txt"), &text)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            fs::write(out.join("ablation.json"), json)?;
            Ok(())
        }
        Command::Tokenize {
            image,
            pyramid,
            config,
            checkpoint,
            out,
        } => {
            let cfg = read_config(&config, cli.seed)?.model;
            let args = (image.as_deref(), pyramid.as_deref(), checkpoint.as_deref());
            match cfg.dtype {
                DType::F64 => run_tokenize::<f64>(cfg, args.0, args.1, args.2, &out),
                _ => run_tokenize::<f32>(cfg, args.0, args.1, args.2, &out),
            }
        }
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
