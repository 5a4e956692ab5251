use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stairseg::data::{load_checkpoint, load_image, save_checkpoint, save_png, synth_crack_dataset, Dataset, RunConfig, SynthParams};
use stairseg::gradsuite::{run_suite, suite_options, SuiteModule};
use stairseg::lrds::ConvKind;
use stairseg::model::Model;
use stairseg::profiler::{compare_variants, profile, variants_table, CostOptions};
use stairseg::train::{evaluate_model, fit, predict_probs};
use stairseg::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "stairseg", version, about = "Lightweight crack segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint, resolved config and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Report P, R, F1, mIoU, ODS and OIS of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Write a binary crack mask for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Analytical parameter and FLOP counts.
    Profile {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured convolution variant.
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Input size as HxW; defaults to the configured size.
        #[arg(long, value_parser = parse_hw)]
        input: Option<(usize, usize)>,
        /// Tab-separated per-layer records instead of the table.
        #[arg(long)]
        records: bool,
        /// Also compare all four variants.
        #[arg(long)]
        compare: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradModule::All)]
        module: GradModule,
    },
    /// Generate a synthetic crack dataset directory.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Original,
    Ds,
    Lr,
    Lrds,
}

impl From<Variant> for ConvKind {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Original => ConvKind::Original,
            Variant::Ds => ConvKind::Ds,
            Variant::Lr => ConvKind::Lr,
            Variant::Lrds => ConvKind::Lrds,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModule {
    All,
    Tensor,
    Nn,
    Lrds,
    Lde,
    Scfm,
    Loss,
}

impl GradModule {
    fn modules(self) -> Vec<SuiteModule> {
        match self {
            GradModule::All => SuiteModule::ALL.to_vec(),
            GradModule::Tensor => vec![SuiteModule::Tensor],
            GradModule::Nn => vec![SuiteModule::Nn],
            GradModule::Lrds => vec![SuiteModule::Lrds],
            GradModule::Lde => vec![SuiteModule::Lde],
            GradModule::Scfm => vec![SuiteModule::Scfm],
            GradModule::Loss => vec![SuiteModule::Loss],
        }
    }
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn train(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = cfg.data.load()?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    create_dir(out)?;
    let resolved = out.join("config.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(|e| io_error(&resolved, e))?;

    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut write_err = None;
    let report = fit(&mut model, &data.train, &data.val, &cfg.train, &cfg.loss, cfg.seed, &mut |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_error(&log_path, e));
    }
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, cfg.seed, &ckpt)?;
    eprintln!(
        "trained {} steps; kept epoch {} (val F1 {:.4}); wrote {}",
        report.steps,
        report.best_epoch,
        report.best_val_f1,
        ckpt.display()
    );
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path, data: &Path, split: Split) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(data)?;
    let samples = match split {
        Split::Train => ds.train,
        Split::Val => ds.val,
        Split::Test => ds.test,
        Split::All => ds.all(),
    };
    if samples.is_empty() {
        return Err(Error::Contract(format!("no samples in the selected split of {}", data.display())));
    }
    let e = &cfg.eval;
    let r = evaluate_model(&model, &samples, e.threshold, &e.thresholds, e.ods_mode)?;
    println!("{}", serde_json::to_string(&r).expect("report serializes"));
    eprintln!(
        "{} images  P {:.4}  R {:.4}  F1 {:.4}  mIoU {:.4}  ODS {:.4} (t={:.2})  OIS {:.4}",
        samples.len(),
        r.precision,
        r.recall,
        r.f1,
        r.miou,
        r.ods,
        r.ods_threshold,
        r.ois
    );
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, out: &Path, threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let img = load_image(image)?;
    let probs = predict_probs(&model, &img)?;
    let mask: Vec<f64> = probs.iter().map(|&p| f64::from(p >= threshold)).collect();
    let crack = mask.iter().sum::<f64>();
    save_png(out, &Tensor::new(mask, &[1, img.dim(1), img.dim(2)])?)?;
    eprintln!("{} crack pixels written to {}", crack, out.display());
    Ok(())
}

fn profile_cmd(config: &Path, variant: Option<Variant>, input: Option<(usize, usize)>, records: bool, compare: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config)?.model;
    if let Some(v) = variant {
        cfg.conv = v.into();
    }
    let [h, w] = cfg.backbone.input_size;
    let hw = input.unwrap_or((h, w));
    let opts = CostOptions::default();
    let report = profile(&cfg, hw, opts)?;
    if records {
        print!("{}", report.to_records());
    } else {
        print!("{}", report.to_table());
    }
    if compare {
        println!();
        print!("{}", variants_table(&compare_variants(&cfg, hw, opts)?));
    }
    Ok(())
}

/// Returns whether every case passed.
fn gradcheck(module: GradModule) -> Result<bool> {
    let results = run_suite(&module.modules(), &suite_options())?;
    let mut passed = 0;
    for r in &results {
        let pass = r.report.checked > 0 && r.report.max_rel_error < GRAD_TOLERANCE;
        passed += usize::from(pass);
        println!(
            "{:<4} {}/{:<22} max_rel_err {:.3e}  checked {:>4}  kinks {:>2}  {:.2}s",
            if pass { "PASS" } else { "FAIL" },
            r.module,
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            r.report.skipped_kinks,
            r.elapsed.as_secs_f64()
        );
    }
    println!("{passed} of {} cases passed (tolerance {GRAD_TOLERANCE:e})", results.len());
    Ok(passed == results.len())
}

fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = synth_crack_dataset(n, size, seed, &SynthParams::default())?;
    ds.save(out)?;
    eprintln!(
        "wrote {} samples ({}/{}/{}) to {}",
        ds.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, &out)?,
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
        } => eval(&config, &checkpoint, &data, split)?,
        Command::Predict {
            checkpoint,
            image,
            out,
            threshold,
        } => predict(&checkpoint, &image, &out, threshold)?,
        Command::Profile {
            config,
            variant,
            input,
            records,
            compare,
        } => profile_cmd(&config, variant, input, records, compare)?,
        Command::Gradcheck { module } => {
            if !gradcheck(module)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Synth { n, size, seed, out } => synth(n, size, seed, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
