//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, I/O or
//! checkpoint error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, AblationAxis};
use crate::config::{RunConfig, KEYS};
use crate::data::{self, load_manifest, split, synth_generate, DatasetManifest, RgbImage};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ScorePairs};
use crate::model::{model_grad_check, Model, ModelConfig, ScoreScale};
use crate::trainer::{self, load_checkpoint, LoadedSet, TrainOutputs};

/// Relative error above which `gradcheck` fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "nriqa", version, about = "No-reference image quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults the config file and overrides start from.
    #[arg(long, default_value = "paper", value_parser = ["paper", "toy"])]
    preset: String,
    /// Override one key, e.g. `--set loss.lambda3=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic distortion dataset.
    ///
    /// Writes PPM images, manifest.csv, and the reference-disjoint split as
    /// train.csv and test.csv into --out.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    ///
    /// Writes train_log.csv, eval_log.csv, resolved.cfg and checkpoint/ into
    /// --out. With --val the checkpoint holds the best-SROCC model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest with a checkpoint.
    ///
    /// Prints one CSV row: dataset,n,srocc,plcc,beta1,beta2,beta3,beta4.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the row (with header) to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict quality scores.
    ///
    /// Prints CSV rows path,score for every manifest image.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prediction change under horizontal flipping.
    ///
    /// Prints CSV rows path,q,q_flipped,abs_delta; aggregates go to stderr
    /// and, with --out, to flip_summary.txt beside flip_report.csv.
    FlipReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest neighbors of a query image in latent space.
    ///
    /// Prints CSV rows query,rank,path,distance,score.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Query PPM image.
        #[arg(long)]
        query: PathBuf,
        /// Gallery manifest.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spatial quality map of one image.
    ///
    /// Writes qmap.ppm (bright = high activation) and overlay.ppm into --out.
    Qmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one model per combination of component settings.
    ///
    /// Prints the table as CSV: label,transformer,positional_encoding,
    /// ranking_loss,consistency_loss,consistency_transform,seeds,srocc_median,
    /// plcc_median.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// `name=v1,v2`; names: transformer, positional_encoding,
        /// ranking_loss, consistency_loss (on/off), consistency_transform_kind.
        /// Repeatable.
        #[arg(long = "axis", value_name = "NAME=VALUES")]
        axes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter plot of predictions against subjective scores.
    ///
    /// Writes an SVG with the fitted logistic curve.
    Plot {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Finite-difference check of every model parameter gradient.
    ///
    /// Uses the tiny architecture in 64-bit on 16x16 inputs and prints CSV
    /// rows param,max_rel_error. Fails when any error exceeds 1e-4.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entries probed per parameter.
        #[arg(long, default_value_t = 10)]
        entries: usize,
    },
}

fn keys_help() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        let mut s = String::from("Config keys (file lines `key = value`, or --set key=value):\n");
        for (k, d) in KEYS {
            s.push_str(&format!("  {k:<32} {d}\n"));
        }
        s
    })
}

fn command() -> clap::Command {
    use clap::CommandFactory;
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(keys_help()));
    }
    cmd
}

/// Help text of one subcommand (or the top level for `None`).
pub fn help_text(subcommand: Option<&str>) -> String {
    let mut cmd = command();
    match subcommand {
        None => cmd.render_long_help().to_string(),
        Some(name) => cmd
            .find_subcommand_mut(name)
            .map(|s| s.render_long_help().to_string())
            .unwrap_or_default(),
    }
}

/// Names of all subcommands.
pub fn subcommands() -> Vec<String> {
    command().get_subcommands().map(|s| s.get_name().to_string()).collect()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Shape { .. } => 1,
        Error::Io { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::UndefinedCorrelation(_) => 2,
        Error::NonFinite(_) => 3,
    }
}

/// Runs the CLI on `args` (including the program name).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::FromArgMatches;
    let parsed = command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut c = if args.preset == "toy" { RunConfig::toy() } else { RunConfig::paper() };
    if let Some(path) = &args.config {
        c.apply_file(path)?;
    }
    c.apply_overrides(&args.set)?;
    c.validate()?;
    eprintln!("# resolved config");
    eprint!("{}", c.to_text());
    let _ = rayon::ThreadPoolBuilder::new().num_threads(c.workers).build_global();
    Ok(c)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Prints `text` and writes it to `out` when given.
fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    match out {
        Some(p) => write_file(p, text),
        None => Ok(()),
    }
}

fn names(m: &DatasetManifest) -> Vec<String> {
    m.records.iter().map(|r| r.path.clone()).collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { cfg, out } => {
            let c = resolve(&cfg)?;
            let m = synth_generate(&c.synth, &out, c.workers)?;
            let (tr, te) = split(&m, c.split_seed, c.split_ratio)?;
            tr.write(out.join("train.csv"))?;
            te.write(out.join("test.csv"))?;
            log::info!("wrote {} images, split {}/{}", m.len(), tr.len(), te.len());
            Ok(())
        }
        Command::Train { cfg, manifest, val, out } => {
            let c = resolve(&cfg)?;
            let train_m = load_manifest(&manifest)?;
            let train_set = LoadedSet::load(&train_m)?;
            let val_set = match &val {
                Some(v) => Some(LoadedSet::load(&load_manifest(v)?)?),
                None => None,
            };
            let scale = ScoreScale::new(train_m.score_range.0, train_m.score_range.1);
            write_file(&out.join("resolved.cfg"), &c.to_text())?;
            let model = Model::new(&c.model)?;
            let echo: Vec<(String, String)> = c
                .semantic_pairs()
                .into_iter()
                .filter(|(k, _)| !crate::config::is_model_key(k))
                .collect();
            let outputs = TrainOutputs { dir: Some(out.clone()) };
            let outcome = trainer::train_with_outputs(&c.train, model, &train_set, val_set.as_ref(), scale, &outputs, &echo)?;
            log::info!("trained {} steps; checkpoint from step {}", outcome.steps, outcome.model_step);
            Ok(())
        }
        Command::Eval { cfg, ckpt, manifest, out } => {
            let c = resolve(&cfg)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let m = load_manifest(&manifest)?;
            let set = LoadedSet::load(&m)?;
            let report = trainer::evaluate_set(&model, &set, c.analysis.n_patches, c.train.patch_size, c.analysis.seed)?;
            let row = format!("{}\n", report.csv_row(&m.name));
            print!("{row}");
            if let Some(p) = out {
                write_file(&p, &format!("{}\n{row}", crate::metrics::MetricReport::CSV_HEADER))?;
            }
            Ok(())
        }
        Command::Predict { cfg, ckpt, manifest, out } => {
            let c = resolve(&cfg)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let m = load_manifest(&manifest)?;
            let images = data::load_images(&m)?;
            let q = analysis::predict_images(&model, &images, c.analysis.n_patches, c.train.patch_size, c.analysis.seed)?;
            let mut s = String::from("path,score\n");
            for (r, v) in m.records.iter().zip(q) {
                s.push_str(&format!("{},{v}\n", r.path));
            }
            emit(&s, out.as_deref())
        }
        Command::FlipReport { cfg, ckpt, manifest, out } => {
            let c = resolve(&cfg)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let m = load_manifest(&manifest)?;
            let images = data::load_images(&m)?;
            let tag = ckpt.display().to_string();
            let report = analysis::flip_report(&model, &names(&m), &images, c.analysis.n_patches, c.train.patch_size, c.analysis.seed, &tag)?;
            eprint!("{}", report.summary());
            print!("{}", report.to_csv());
            if let Some(dir) = out {
                write_file(&dir.join("flip_report.csv"), &report.to_csv())?;
                write_file(&dir.join("flip_summary.txt"), &report.summary())?;
            }
            Ok(())
        }
        Command::Retrieve { cfg, ckpt, query, gallery, out } => {
            let c = resolve(&cfg)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let g = load_manifest(&gallery)?;
            let images = data::load_images(&g)?;
            let img = RgbImage::read_ppm(&query)?;
            let q = crate::tensor::Tensor::from_vec(&[3, img.height(), img.width()], img.to_planes())?;
            let result = analysis::nearest_neighbors(
                &model,
                &query.display().to_string(),
                &q,
                &names(&g),
                &images,
                &g.scores(),
                c.analysis.k,
                c.analysis.n_patches,
                c.train.patch_size,
                c.analysis.seed,
            )?;
            emit(&result.to_csv(), out.as_deref())
        }
        Command::Qmap { cfg, ckpt, image, out } => {
            let c = resolve(&cfg)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let img = RgbImage::read_ppm(&image)?;
            let map = analysis::quality_map(&model, &img, c.analysis.qmap_source)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            map.heat_image().write_ppm(out.join("qmap.ppm"))?;
            map.overlay(&img)?.write_ppm(out.join("overlay.ppm"))?;
            Ok(())
        }
        Command::Ablate { cfg, manifest, test, axes, out } => {
            let c = resolve(&cfg)?;
            let axes: Vec<AblationAxis> = axes.iter().map(|a| a.parse()).collect::<Result<_>>()?;
            let train_m = load_manifest(&manifest)?;
            let train_set = LoadedSet::load(&train_m)?;
            let test_set = LoadedSet::load(&load_manifest(&test)?)?;
            let scale = ScoreScale::new(train_m.score_range.0, train_m.score_range.1);
            let table = analysis::ablate(&c, &axes, c.analysis.ablation_seeds, &train_set, &test_set, scale)?;
            emit(&table.to_csv(), out.as_deref())
        }
        Command::Plot { cfg, ckpt, manifest, out, title } => {
            let c = resolve(&cfg)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let m = load_manifest(&manifest)?;
            let images = data::load_images(&m)?;
            let q = analysis::predict_images(&model, &images, c.analysis.n_patches, c.train.patch_size, c.analysis.seed)?;
            let pairs = ScorePairs::new(q, m.scores())?;
            if let Ok(r) = evaluate(&pairs) {
                log::info!("srocc {:.4} plcc {:.4}", r.srocc, r.plcc);
            }
            analysis::scatter_plot(&pairs, title.as_deref().unwrap_or(&m.name), &out)
        }
        Command::Gradcheck { cfg, seed, entries } => {
            resolve(&cfg)?;
            let rows = model_grad_check(&ModelConfig::tiny(), 2, 16, seed, entries)?;
            let mut s = String::from("param,max_rel_error\n");
            let mut worst = 0.0f64;
            for (name, err) in &rows {
                s.push_str(&format!("{name},{err:e}\n"));
                worst = worst.max(*err);
            }
            print!("{s}");
            if worst > GRADCHECK_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "worst relative gradient error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"
                )));
            }
            Ok(())
        }
    }
}
