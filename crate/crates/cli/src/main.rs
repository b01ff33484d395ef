use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use instantchar::checkpoint::{load_checkpoint, CheckpointArchive};
use instantchar::config::RunConfig;
use instantchar::dataset::{generate_dataset, DatasetManifest};
use instantchar::eval::{evaluate, gradient_check, novel_pose_cases, sample_grid, EvalOptions, GradComponent};
use instantchar::image::ImageTensor;
use instantchar::params::Partition;
use instantchar::pipeline::{InstantCharacter, CONFIG_ATTRIBUTE};
use instantchar::pretrain::prepare_model;
use instantchar::rng::seeded_rng;
use instantchar::training::{DataCache, TrainState, Trainer};
use instantchar::Error;

#[derive(Debug, Parser)]
#[command(name = "ichar", version, about = "Character-conditioned toy diffusion: data, training, inference, evaluation")]
struct Cli {
    /// Run configuration (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or output file for `infer`, `eval` and `grad-check`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic character dataset and write its manifest.
    DatasetGen {
        #[arg(long)]
        characters: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        unpaired_fraction: Option<f64>,
        #[arg(long)]
        heldout: Option<usize>,
        /// Side length of the written images.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train the adapter through one stage or the whole curriculum.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Continue from a training checkpoint.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Start from an already prepared checkpoint instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generate one image of the reference character following a caption.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f32>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Score a checkpoint on held-out characters and write sample grids.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        generations: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f32>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of a component.
    GradCheck {
        #[arg(long, value_parser = parse_component)]
        component: GradComponent,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Summarize a checkpoint: partitions, tensor names, shapes and checksums.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_component(s: &str) -> Result<GradComponent, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure { code: DATA, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Checkpoint(_) | Error::Dataset(_) | Error::Image(_) => DATA,
            Error::Numerical(_) => NUMERICAL,
            Error::Config(_) | Error::InvalidInput(_) | Error::Shape(_) | Error::UnknownWord { .. } => USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<instantchar::checkpoint::CheckpointError> for Failure {
    fn from(e: instantchar::checkpoint::CheckpointError) -> Self {
        Failure::data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
struct Stamp {
    version: &'static str,
    command: Vec<String>,
    config_hash: String,
    seed: u64,
    config: String,
}

fn write_stamp(path: &Path, cfg: &RunConfig) -> CliResult<()> {
    let stamp = Stamp {
        version: env!("CARGO_PKG_VERSION"),
        command: std::env::args().collect(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.to_toml_string(),
    };
    write_json(path, &stamp)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

/// `report.json` gets `report.stamp.json` next to it.
fn stamp_beside(file: &Path) -> PathBuf {
    file.with_extension("stamp.json")
}

fn ensure_parent(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e).into()),
        _ => Ok(()),
    }
}

fn require_out(out: &Option<PathBuf>, verb: &str) -> CliResult<PathBuf> {
    out.clone().ok_or_else(|| Failure::usage(format!("{verb} needs --out")))
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> CliResult<(InstantCharacter<f32>, CheckpointArchive)> {
    let archive = load_checkpoint(path)?;
    let model = InstantCharacter::<f32>::from_archive(&archive)?;
    Ok((model, archive))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::DatasetGen { characters, views, unpaired_fraction, heldout, resolution } => {
            let mut cfg = load_config(cli)?;
            let d = &mut cfg.dataset;
            d.characters = characters.unwrap_or(d.characters);
            d.views = views.unwrap_or(d.views);
            d.unpaired_fraction = unpaired_fraction.unwrap_or(d.unpaired_fraction);
            d.heldout = heldout.unwrap_or(d.heldout);
            let out = require_out(&cli.out, "dataset-gen")?;
            let d = &cfg.dataset;
            let manifest = generate_dataset(d.characters, d.views, d.unpaired_fraction, d.heldout, &mut seeded_rng(cfg.seed, "dataset"))
                .map_err(|e| match e {
                    Error::Dataset(m) => Failure::usage(m),
                    other => other.into(),
                })?;
            let path = manifest.write_to_dir(&out, resolution.unwrap_or(cfg.toy_high_resolution))?;
            write_stamp(&out.join("stamp.json"), &cfg)?;
            println!("wrote {} records to {}", manifest.records.len(), path.display());
            Ok(())
        }
        Command::Train { manifest, stage, resume, init } => train(cli, manifest, *stage, resume.as_deref(), init.as_deref()),
        Command::Infer { ckpt, reference, caption, steps, scale, resolution } => {
            let (mut model, _) = load_model(ckpt)?;
            if let Some(seed) = cli.seed {
                model.config.seed = seed;
            }
            let cfg = model.config.clone();
            let out = require_out(&cli.out, "infer")?;
            let reference_image = ImageTensor::load_png(reference)?;
            let steps = steps.unwrap_or(cfg.sampling.steps);
            let scale = scale.unwrap_or(cfg.sampling.scale as f32);
            let resolution = resolution.unwrap_or(cfg.toy_high_resolution);
            let result = model.infer(&reference_image, caption, resolution, steps, scale, cfg.seed)?;
            ensure_parent(&out)?;
            result.image.save_png(&out)?;
            let meta = serde_json::json!({
                "checkpoint": ckpt,
                "reference": reference,
                "caption": caption,
                "caption_tokens": result.caption,
                "steps": steps,
                "scale": scale,
                "seed": cfg.seed,
                "resolution": resolution,
                "identity_similarity": result.identity_similarity,
                "image": out,
            });
            write_json(&out.with_extension("json"), &meta)?;
            write_stamp(&stamp_beside(&out), &cfg)?;
            println!("wrote {} (identity similarity {:.4})", out.display(), result.identity_similarity);
            Ok(())
        }
        Command::Eval { ckpt, manifest, cases, generations, steps, scale, resolution } => {
            let (mut model, _) = load_model(ckpt)?;
            if let Some(seed) = cli.seed {
                model.config.seed = seed;
            }
            let cfg = model.config.clone();
            let out = require_out(&cli.out, "eval")?;
            let manifest = DatasetManifest::read_jsonl(manifest)?;
            let cases = novel_pose_cases(&manifest, cfg.seed, *cases)?;
            let defaults = EvalOptions::from_config(&cfg);
            let opts = EvalOptions {
                steps: steps.unwrap_or(defaults.steps),
                scale: scale.unwrap_or(defaults.scale),
                resolution: resolution.unwrap_or(defaults.resolution),
                generations: *generations,
                seed: cfg.seed,
            };
            let output = evaluate(&model, &cases, &opts)?;
            ensure_parent(&out)?;
            write_json(&out, &output.report)?;
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let grid_path = out.with_file_name(format!("{stem}_grid.png"));
            sample_grid(&output, &cases, 64)?.save_png(&grid_path)?;
            write_stamp(&stamp_beside(&out), &cfg)?;
            let r = &output.report;
            println!(
                "identity ranking {:.3}, mean similarity {:.3}, prompt adherence {:.3}, background adherence {:.3}, copy-paste {:.3}",
                r.identity_ranking_accuracy, r.mean_identity_similarity, r.prompt_adherence_rate, r.background_adherence_rate, r.copy_paste_score
            );
            Ok(())
        }
        Command::GradCheck { component, tol } => {
            let cfg = load_config(cli)?;
            let report = gradient_check(&cfg, *component, *tol, cfg.seed)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::data(e.to_string()))?;
            println!("{text}");
            if let Some(out) = &cli.out {
                ensure_parent(out)?;
                write_json(out, &report)?;
                write_stamp(&stamp_beside(out), &cfg)?;
            }
            if !report.passed {
                return Err(Failure {
                    code: NUMERICAL,
                    message: format!(
                        "{component}: max relative error {:.3e} at {} exceeds {tol:e}",
                        report.max_relative_error, report.worst_parameter
                    ),
                });
            }
            Ok(())
        }
        Command::InspectCkpt { ckpt } => {
            let archive = load_checkpoint(ckpt)?;
            let text = inspect(&archive);
            print!("{text}");
            if let Some(out) = &cli.out {
                ensure_parent(out)?;
                std::fs::write(out, &text).map_err(|e| Error::io(out, e))?;
            }
            Ok(())
        }
    }
}

fn inspect(archive: &CheckpointArchive) -> String {
    let mut s = format!("format version {}\n", archive.version);
    for (k, v) in &archive.attributes {
        if k == CONFIG_ATTRIBUTE {
            let hash = RunConfig::from_toml_str(v).map(|c| c.hash()).unwrap_or_else(|_| "unparseable".into());
            s += &format!("attribute {k}: <run config, hash {hash}>\n");
        } else {
            s += &format!("attribute {k}: {v}\n");
        }
    }
    for partition in [Partition::BaseFrozen, Partition::AdapterTrainable] {
        let names = archive.names_in(partition);
        let params: usize = names.iter().map(|n| archive.entries[*n].shape.iter().product::<usize>()).sum();
        s += &format!("partition {}: {} tensors, {} parameters\n", partition.as_str(), names.len(), params);
    }
    for (name, entry) in &archive.entries {
        let partition = archive.partitions.get(name).map(|p| p.as_str()).unwrap_or("-");
        s += &format!("{name}\t{partition}\t{}\t{:?}\t{}\n", entry.dtype.as_str(), entry.shape, entry.checksum());
    }
    s
}

fn train(cli: &Cli, manifest_path: &Path, stage: StageArg, resume: Option<&Path>, init: Option<&Path>) -> CliResult<()> {
    let out = require_out(&cli.out, "train")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = DatasetManifest::read_jsonl(manifest_path)?;
    let (model, state) = match resume {
        Some(path) => {
            let (model, archive) = load_model(path)?;
            if cli.config.is_some() || cli.seed.is_some() {
                let requested = load_config(cli)?;
                if requested.hash() != model.config.hash() {
                    return Err(Failure::usage(format!(
                        "--config/--seed differ from the run config stored in {}; resume uses the stored config",
                        path.display()
                    )));
                }
            }
            let state = TrainState::from_archive(&model, &archive)?;
            (model, state)
        }
        None => {
            let cfg = load_config(cli)?;
            let model = match init {
                Some(path) => {
                    let archive = load_checkpoint(path)?;
                    let mut model = InstantCharacter::<f32>::new(&cfg)?;
                    archive.load_into(&mut model.store)?;
                    model
                }
                None => {
                    let (model, report) = prepare_model(&cfg, &manifest)?;
                    println!("semantic encoder factor accuracy {:?}", report.semantic.accuracy);
                    model
                }
            };
            instantchar::checkpoint::save_checkpoint(&model.to_archive(), &out.join("prepared.icpt"))?;
            let state = TrainState::new(&model);
            (model, state)
        }
    };
    let cfg = model.config.clone();
    write_stamp(&out.join("stamp.json"), &cfg)?;
    let mut trainer = Trainer::new(model, state, DataCache::from_env()).with_output_dir(&out)?;
    let reports = match stage {
        StageArg::All => trainer.run_curriculum(&manifest)?,
        one => {
            let id = match one {
                StageArg::One => 1,
                StageArg::Two => 2,
                _ => 3,
            };
            let stage_cfg = cfg.stage(id).ok_or_else(|| Failure::usage(format!("stage {id} is not configured")))?.clone();
            vec![trainer.run_stage(&stage_cfg, &manifest)?]
        }
    };
    for r in &reports {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
        let last = r.losses.last().copied().unwrap_or(f64::NAN);
        println!("stage {}: {} steps, final loss {last:.5}", r.stage, r.losses.len());
    }
    Ok(())
}
