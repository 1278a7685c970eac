//! `reid` command-line tool.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0    | success |
//! | 1    | any other failure (bad config, corrupt file, ...) |
//! | 2    | a required input is missing or empty |
//! | 3    | training diverged; the last good checkpoint is kept |
//! | 4    | checkpoint incompatible with the data or this build |
//! | 5    | evaluation protocol violated |
//! | 64   | command-line usage error |

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use reid_core::checkpoint::Checkpoint;
use reid_core::config::{Branches, KeyValues, ModelConfig};
use reid_core::data::synth::{generate_dataset, SynthSpec};
use reid_core::data::{pnm, Dataset};
use reid_core::error::{Error, Result};
use reid_core::eval::{self, EvalOptions};
use reid_core::manifest::RunManifest;
use reid_core::model::Model;
use reid_core::trainer::{TrainConfig, Trainer};

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const LOG_FILE: &str = "trainlog.tsv";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(
    name = "reid",
    version,
    about = "Attribute-attention person re-identification on synthetic data",
    after_help = "synth and train also accept any spec/config key as `--key value`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's query/gallery split.
    Eval(EvalArgs),
    /// Export attention graymaps for one image.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset spec file (key = value); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config file (key = value); model and training keys share one file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk | paper-faithful | tiny
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_RANKS)]
    ranks: Vec<usize>,
    /// Drop gallery images of the query's identity taken by the query's camera.
    #[arg(long)]
    same_camera_filter: bool,
    /// L2-normalize the appearance and attribute blocks separately.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let (argv, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 64 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, &overrides),
        Command::Train(a) => train(a, &overrides),
        Command::Eval(a) => evaluate(a),
        Command::Visualize(a) => visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::EmptyDataset(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Incompatible(_) | Error::Version { .. } => 4,
        Error::Protocol(_) => 5,
        Error::Usage(_) => 64,
        _ => 1,
    }
}

/// Separates `--key value` pairs that are not flags of the `synth` or
/// `train` subcommand so clap never sees them.
fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<String>) {
    let cmd = Cli::command();
    let Some(sub) = argv.get(1).and_then(|name| cmd.find_subcommand(name)) else {
        return (argv, Vec::new());
    };
    if !matches!(sub.get_name(), "synth" | "train") {
        return (argv, Vec::new());
    }
    let known: Vec<(String, bool)> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .chain([("help".to_string(), false)])
        .collect();
    let (mut kept, mut rest) = (argv[..2].to_vec(), Vec::new());
    let mut it = argv.into_iter().skip(2);
    while let Some(tok) = it.next() {
        let name = tok.strip_prefix("--").map(|n| n.split_once('=').map_or(n, |(k, _)| k));
        let flag = name.and_then(|n| known.iter().find(|(k, _)| k == n));
        let target = if flag.is_some() || name.is_none() { &mut kept } else { &mut rest };
        let takes_value = flag.map_or(name.is_some(), |(_, v)| *v) && !tok.contains('=');
        target.push(tok);
        if takes_value {
            if let Some(v) = it.next() {
                target.push(v);
            }
        }
    }
    (kept, rest)
}

/// Turns `--key value` pairs into key/values. Dashes inside keys are kept
/// as underscores so `--early-stop-window 2` and `--early_stop_window 2`
/// mean the same.
fn parse_overrides(args: &[String]) -> Result<KeyValues> {
    let mut kv = KeyValues::default();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::Usage(format!("expected --key value, found {flag:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Usage(format!("--{key} needs a value")))?;
                (key, v.clone())
            }
        };
        kv.set(key.replace('-', "_"), value);
    }
    Ok(kv)
}

fn reject_unknown(kv: &KeyValues, known: &BTreeSet<String>, what: &str) -> Result<()> {
    let unknown: Vec<&str> = kv.keys().filter(|k| !known.contains(*k)).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown {what} keys: {}", unknown.join(", "))))
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn synth(a: SynthArgs, overrides: &[String]) -> Result<()> {
    let mut kv = match &a.spec {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.merge(&parse_overrides(overrides)?);
    let known = SynthSpec::default().to_kv().keys().map(String::from).collect();
    reject_unknown(&kv, &known, "spec")?;
    let mut spec = SynthSpec::default();
    spec.apply(&kv)?;
    spec.validate()?;
    let ds = generate_dataset(&spec, a.seed)?;
    create_out(&a.out)?;
    ds.save(&a.out)?;

    let mut m = RunManifest::new("synth");
    m.seed = Some(a.seed);
    m.config = spec.to_kv();
    if let Some(p) = &a.spec {
        m.inputs.push(("spec".into(), path_str(p)));
    }
    m.artifacts.push(reid_core::data::SCHEMA_FILE.into());
    m.artifacts.push(reid_core::data::LABELS_FILE.into());
    for s in &ds.samples {
        m.artifacts.push(format!("{}/{}", reid_core::data::IMAGES_DIR, s.filename));
    }
    m.write(&a.out)?;
    println!("wrote {} images to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn train_keys() -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = ModelConfig::desk().to_kv().keys().map(String::from).collect();
    keys.extend(TrainConfig::default().to_kv().keys().map(String::from));
    keys.insert("preset".into());
    keys.insert("augment".into());
    for i in 1..=3 {
        keys.insert(format!("stage{i}.losses"));
        keys.insert(format!("stage{i}.trainable"));
    }
    keys
}

/// Config file, then `--key value` overrides, then the named flags.
fn resolve_train_kv(a: &TrainArgs, overrides: &[String]) -> Result<KeyValues> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.merge(&parse_overrides(overrides)?);
    if let Some(p) = &a.preset {
        kv.set("preset", p.clone());
    }
    if let Some(s) = a.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(l) = a.lambda {
        kv.set("lambda", l.to_string());
    }
    if let Some(s) = a.stages {
        kv.set("stages", s.to_string());
    }
    reject_unknown(&kv, &train_keys(), "config")?;
    Ok(kv)
}

fn train(a: TrainArgs, overrides: &[String]) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mut m = RunManifest::new("train");
    m.inputs.push(("data".into(), path_str(&a.data)));
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || a.preset.is_some() || a.seed.is_some() || a.lambda.is_some() || !overrides.is_empty() {
                return Err(Error::Usage("--resume takes its configuration from the checkpoint".into()));
            }
            let ck = Checkpoint::load(path)?;
            m.inputs.push(("resume".into(), path_str(path)));
            let mut t = Trainer::resume(ck, &ds)?;
            if let Some(s) = a.stages {
                t.cfg.stages = s;
                t.cfg.validate()?;
            }
            t
        }
        None => {
            let kv = resolve_train_kv(&a, overrides)?;
            if let Some(p) = &a.config {
                m.inputs.push(("config".into(), path_str(p)));
            }
            let mut model_cfg = ModelConfig::from_kv(&kv)?;
            let train_cfg = TrainConfig::from_kv(&kv)?;
            // Without the attribute loss the attribute branch would stay at its
            // initialisation, so drop it from the model unless asked for.
            if train_cfg.lambda == 0.0 && kv.get_str("branches").is_none() {
                model_cfg.branches = Branches::AppearanceOnly;
            }
            let num_ids = ds.train_classes().len();
            let model = Model::new(model_cfg, ds.schema.clone(), num_ids, train_cfg.seed)?;
            Trainer::new(model, train_cfg, &ds)?
        }
    };

    create_out(&a.out)?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let outcome = trainer.run(|t, s| {
        eprintln!(
            "stage {} epoch {}: mean loss {:.6}{}",
            s.stage,
            s.epoch,
            s.mean_loss,
            if s.early_stopped { " (early stop)" } else { "" }
        );
        t.checkpoint().save(&ck_path)
    });
    if let Err(Error::Divergence { .. }) = &outcome {
        eprintln!("keeping the checkpoint of the last completed epoch");
    }
    if !ck_path.exists() {
        // Nothing completed (or resumed at the end); still leave a checkpoint.
        trainer.checkpoint().save(&ck_path)?;
    }

    write_file(&a.out.join(LOG_FILE), &trainer.log.render())?;
    m.artifacts.push(CHECKPOINT_FILE.into());
    m.artifacts.push(LOG_FILE.into());
    let stages: BTreeSet<usize> = trainer.log.rows.iter().map(|r| r.stage).collect();
    for s in stages {
        let name = format!("trainlog_stage{s}.tsv");
        write_file(&a.out.join(&name), &trainer.log.render_stage(s))?;
        m.artifacts.push(name);
    }
    let mut resolved = trainer.model.cfg.to_kv();
    resolved.merge(&trainer.cfg.to_kv());
    write_file(&a.out.join(CONFIG_FILE), &resolved.render())?;
    m.artifacts.push(CONFIG_FILE.into());
    m.seed = Some(trainer.cfg.seed);
    m.config = resolved;
    m.write(&a.out)?;
    outcome
}

fn load_model(path: &Path) -> Result<Model> {
    let mut model = Checkpoint::load(path)?.model;
    model.set_mode(reid_core::params::Mode::Eval);
    Ok(model)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let mut model = load_model(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    eval::check_images(&model, &ds)?;
    let opts = EvalOptions {
        ranks: a.ranks.clone(),
        exclude_same_camera: a.same_camera_filter,
        normalize: a.normalize,
    };
    let report = eval::evaluate(&mut model, &ds, &opts)?;
    create_out(&a.out)?;
    write_file(&a.out.join("report.tsv"), &report.render())?;
    write_file(&a.out.join("queries.tsv"), &report.render_queries())?;
    write_file(&a.out.join("summary.txt"), &report.summary())?;
    print!("{}", report.summary());

    let mut m = RunManifest::new("eval");
    m.inputs.push(("checkpoint".into(), path_str(&a.checkpoint)));
    m.inputs.push(("data".into(), path_str(&a.data)));
    m.config.set("ranks", a.ranks.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    m.config.set("same_camera_filter", a.same_camera_filter.to_string());
    m.config.set("normalize", a.normalize.to_string());
    m.artifacts = vec!["report.tsv".into(), "queries.tsv".into(), "summary.txt".into()];
    m.write(&a.out)
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let image = pnm::read_ppm(&a.image)?;
    let mut model = load_model(&a.checkpoint)?;
    let paths = eval::export_attention(&mut model, &image, &a.out)?;
    let mut m = RunManifest::new("visualize");
    m.inputs.push(("checkpoint".into(), path_str(&a.checkpoint)));
    m.inputs.push(("image".into(), path_str(&a.image)));
    for p in &paths {
        m.artifacts.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
        println!("{}", p.display());
    }
    m.write(&a.out)
}
