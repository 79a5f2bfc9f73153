//! The `nucleus-ssl` command line.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 usage error (unknown
//! subcommand or flag), 3 invalid configuration, 4 missing or unreadable
//! file, 5 invalid data or checkpoint contents, 6 training diverged.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataio::{
    load_checkpoint, load_dataset, read_gray8, save_checkpoint, write_image, write_label_map, DatasetIndex, Split,
};
use crate::embedder::ArchitectureId;
use crate::metrics::evaluate_dataset;
use crate::postprocess::ternary_to_instances;
use crate::pretrain::{pretrain_with, PretrainConfig};
use crate::segmenter::{finetune_with, load_labeled_split, SegModel, TernaryMask};
use crate::synth::{generate_triplet_pool, write_dataset};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_DIVERGED: i32 = 6;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Parser)]
#[command(name = "nucleus-ssl", about = "Self-supervised pretraining and evaluation for nuclei instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset (and optionally sample triplets).
    Synth(SynthArgs),
    /// Self-supervised pretraining of the encoder.
    Pretrain(PretrainArgs),
    /// Train the three-class segmenter on labeled images.
    Finetune(FinetuneArgs),
    /// Score a trained segmenter with AJI and Dice.
    Eval(EvalArgs),
    /// Turn a ternary mask image into an instance label map.
    Postprocess(PostprocessArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
    /// Also write this many sampled triplets to `<out>/triplets`.
    #[arg(long, default_value_t = 0)]
    triplets: usize,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
    /// Dataset root; overrides `data.root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
    /// Dataset root; overrides `data.root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pretrained encoder checkpoint.
    #[arg(long, required_unless_present_any = ["from_scratch", "dump_config"], conflicts_with = "from_scratch")]
    encoder_ckpt: Option<PathBuf>,
    /// Start from randomly initialised encoder weights.
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Overrides the configuration stored in the model checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Dataset root; overrides `data.root`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PostprocessArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Single-channel image with pixel values 0 (background), 1 (body), 2 (boundary).
    #[arg(long, required_unless_present = "dump_config")]
    input: Option<PathBuf>,
    /// Instance label map to write.
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
}

/// Reproduction record written next to every output.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: Vec<String>,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    config: &'a RunConfig,
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Io { .. } | Error::Encode { .. }) => EXIT_IO,
        Some(
            Error::Decode { .. }
            | Error::UnsupportedFormat { .. }
            | Error::Dataset(_)
            | Error::SchemaMismatch { .. }
            | Error::ImageTooSmall { .. }
            | Error::Shape(_)
            | Error::ArchitectureMismatch(_)
            | Error::Placement(_),
        ) => EXIT_DATA,
        Some(Error::Diverged { .. }) => EXIT_DIVERGED,
        None => EXIT_FAILURE,
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let msg = match e.downcast_ref::<Error>() {
                Some(inner) => inner.to_string(),
                None => format!("{e:#}"),
            };
            eprintln!("error: {}", msg.replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<Option<RunConfig>> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if args.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(None);
    }
    cfg.validate()?;
    Ok(Some(cfg))
}

fn write_manifest(
    path: &Path,
    command: &str,
    args: &[String],
    inputs: BTreeMap<String, String>,
    cfg: &RunConfig,
) -> Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        args: args.to_vec(),
        inputs,
        seeds: cfg.seeds().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        config: cfg,
    };
    let text = toml::to_string(&manifest).context("serializing manifest")?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Manifest path for commands whose output is a single file.
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.toml");
    out.with_file_name(name)
}

fn open_dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<DatasetIndex> {
    let root = data.unwrap_or(&cfg.data.root);
    Ok(load_dataset(root, cfg.data.split_ratio, cfg.data.split_seed)?)
}

fn path_inputs<const N: usize>(items: [(&str, Option<&Path>); N]) -> BTreeMap<String, String> {
    items
        .into_iter()
        .filter_map(|(k, v)| v.map(|p| (k.to_string(), p.display().to_string())))
        .collect()
}

fn run(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::Version => {
            println!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
            Ok(())
        }
        Command::Synth(a) => run_synth(a, args),
        Command::Pretrain(a) => run_pretrain(a, args),
        Command::Finetune(a) => run_finetune(a, args),
        Command::Eval(a) => run_eval(a, args),
        Command::Postprocess(a) => run_postprocess(a, args),
    }
}

/// Sidecar line describing one sampled triplet.
#[derive(Debug, Serialize)]
struct TripletRecord<'a> {
    index: usize,
    seed: u64,
    spec: &'a crate::sampler::TripletSpec,
    positive_count: usize,
    negative_count: usize,
}

fn run_synth(a: SynthArgs, args: &[String]) -> Result<()> {
    let Some(cfg) = load_config(&a.cfg)? else { return Ok(()) };
    let out = a.out.expect("required by clap");
    create_dir(&out)?;
    write_manifest(&out.join(MANIFEST_FILE), "synth", args, BTreeMap::new(), &cfg)?;
    write_dataset(&cfg.synth, &out)?;
    if a.triplets > 0 {
        let dir = out.join("triplets");
        create_dir(&dir)?;
        let pool = generate_triplet_pool(&cfg.synth, &cfg.sampler, a.triplets)?;
        let mut lines = String::new();
        for (i, entry) in pool.iter().enumerate() {
            let t = &entry.triplet;
            for (role, img) in [("anchor", &t.anchor), ("positive", &t.positive), ("negative", &t.negative)] {
                write_image(img, dir.join(format!("triplet_{i:04}_{role}.png")))?;
            }
            let record = TripletRecord {
                index: i,
                seed: t.seed,
                spec: &t.spec,
                positive_count: entry.positive_count,
                negative_count: entry.negative_count,
            };
            lines.push_str(&serde_json::to_string(&record)?);
            lines.push('\n');
        }
        let path = dir.join("triplets.jsonl");
        std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    }
    eprintln!(
        "wrote {} training and {} test images to {}",
        cfg.synth.num_images,
        cfg.synth.num_test_images,
        out.display()
    );
    Ok(())
}

fn run_pretrain(a: PretrainArgs, args: &[String]) -> Result<()> {
    let Some(cfg) = load_config(&a.cfg)? else { return Ok(()) };
    let out = a.out.expect("required by clap");
    let dataset = open_dataset(&cfg, a.data.as_deref())?;
    create_dir(&out)?;
    let inputs = path_inputs([
        ("data", Some(dataset.root.as_path())),
        ("resume", a.resume.as_deref()),
    ]);
    write_manifest(&out.join(MANIFEST_FILE), "pretrain", args, inputs, &cfg)?;
    let every = cfg.pretrain.log_every;
    let outcome = pretrain_with(&dataset, &cfg.pretrain_config(), Some(&out), a.resume.as_deref(), |r| {
        match r.msr {
            Some(msr) => eprintln!("step {:>6}  loss {:.6}  msr {:.4}", r.step, r.l_total, msr),
            None if r.step % every == 0 => eprintln!("step {:>6}  loss {:.6}", r.step, r.l_total),
            None => {}
        }
    })?;
    outcome.report.write_csv(out.join("pretrain.csv"))?;
    Ok(())
}

fn run_finetune(a: FinetuneArgs, args: &[String]) -> Result<()> {
    let Some(cfg) = load_config(&a.cfg)? else { return Ok(()) };
    let out = a.out.expect("required by clap");
    let dataset = open_dataset(&cfg, a.data.as_deref())?;
    let model = SegModel::new(&cfg.seg_model_config())?;
    let params = match &a.encoder_ckpt {
        None => model.init_params(),
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if let Ok(pcfg) = toml::from_str::<PretrainConfig>(&ckpt.config_snapshot) {
                let (found, expected): (ArchitectureId, ArchitectureId) =
                    (pcfg.encoder.architecture_id, cfg.encoder.architecture_id);
                if found != expected {
                    return Err(Error::ArchitectureMismatch(format!(
                        "{} holds a {found} encoder but the configuration asks for {expected}",
                        path.display()
                    ))
                    .into());
                }
            }
            let encoder = model.encoder_arch().params_from_flat(&ckpt.encoder_params)?;
            model.transfer_encoder(&encoder)?
        }
    };
    let train = load_labeled_split(&dataset, Split::Train)?;
    let val = load_labeled_split(&dataset, Split::Val)?;
    create_dir(&out)?;
    let inputs = path_inputs([
        ("data", Some(dataset.root.as_path())),
        ("encoder_ckpt", a.encoder_ckpt.as_deref()),
    ]);
    write_manifest(&out.join(MANIFEST_FILE), "finetune", args, inputs, &cfg)?;
    let ft = cfg.finetune_config();
    let (params, report) = finetune_with(&model, params, &train, &val, &ft, &cfg.postprocess, |r| match r.val_aji {
        Some(v) => eprintln!("epoch {:>4}  loss {:.6}  val_aji {:.4}", r.epoch, r.loss, v),
        None => eprintln!("epoch {:>4}  loss {:.6}", r.epoch, r.loss),
    })?;
    let ckpt = model.to_checkpoint(&params, cfg.to_toml()?, ft.epochs as u64);
    save_checkpoint(&ckpt, out.join("model.ckpt"))?;
    report.write_csv(out.join("finetune.csv"))?;
    Ok(())
}

fn run_eval(a: EvalArgs, args: &[String]) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml(&ckpt.config_snapshot)?,
    };
    cfg.validate()?;
    let model = SegModel::new(&cfg.seg_model_config())?;
    let params = model.params_from_checkpoint(&ckpt)?;
    let dataset = open_dataset(&cfg, a.data.as_deref())?;
    let report = evaluate_dataset(&model, &params, &dataset, a.split, &cfg.postprocess)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write_csv(&a.out)?;
    let inputs = path_inputs([
        ("model", Some(a.model.as_path())),
        ("data", Some(dataset.root.as_path())),
    ]);
    write_manifest(&sibling_manifest(&a.out), "eval", args, inputs, &cfg)?;
    println!(
        "{} images ({} split): mean AJI {:.4}, mean Dice {:.4}",
        report.rows.len(),
        a.split,
        report.mean_aji,
        report.mean_dice
    );
    Ok(())
}

fn run_postprocess(a: PostprocessArgs, args: &[String]) -> Result<()> {
    let Some(cfg) = load_config(&a.cfg)? else { return Ok(()) };
    let (input, out) = (a.input.expect("required by clap"), a.out.expect("required by clap"));
    let (h, w, values) = read_gray8(&input)?;
    let mask = TernaryMask::new(h, w, values)?;
    let labels = ternary_to_instances(&mask, &cfg.postprocess);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_label_map(&labels, &out)?;
    let inputs = path_inputs([("input", Some(input.as_path()))]);
    write_manifest(&sibling_manifest(&out), "postprocess", args, inputs, &cfg)?;
    eprintln!("{} instances", labels.instance_count());
    Ok(())
}
