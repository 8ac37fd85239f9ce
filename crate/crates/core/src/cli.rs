//! Command-line front end.
//!
//! Results go to `out` as JSON or tables; progress lines go to `err`. Any
//! failure is reported as a single JSON line `{"error":{"kind":…,"message":…}}`
//! on `err`, with exit status 2 for usage errors and 1 otherwise.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::pipeline::{
    ablation_table, evaluate_with_cache, generate_novel_prompts, load_checkpoint, new_prompt_cache, pretrain, run_ablation,
    save_checkpoint, train, AblationAxis, Model, PretrainedBackbone, RunDir, TrainConfig, Variant,
};
use crate::promptgen::{clear_cache_dir, PromptCache, PromptGenerator};
use crate::synthdata::{generate_corpus_to, Corpus};

#[derive(Parser, Debug)]
#[command(name = "vicp", version, about = "Visual in-context prompting for object re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML (or .json) configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides VICP_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the backbone on the base categories and write a frozen checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the configured variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint whose backbone is reused instead of pretraining a new one.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the novel categories.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Support pairs per category.
        #[arg(long = "K")]
        k: Option<usize>,
    },
    /// Train and evaluate one cell per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// components, K or N.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Manage persisted prompt caches.
    PromptCache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand, Debug)]
enum CacheAction {
    /// Generate the evaluation prompts of every novel category.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "K")]
        k: Option<usize>,
    },
    /// List the entries of a cache directory.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Delete every entry of a cache directory.
    Clear {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report_error(err, "usage", first);
            return 2;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            report_error(err, e.kind(), &e.to_string());
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn report_error(err: &mut dyn Write, kind: &str, message: &str) {
    let line = json!({ "error": { "kind": kind, "message": message } });
    let _ = writeln!(err, "{line}");
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

/// File config, then `VICP_SEED`, then `--seed`.
fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let path = require(&common.config, "config")?;
    let config = TrainConfig::from_file(path)?.apply_env()?;
    let config = match common.seed {
        Some(s) => config.with_seed(s),
        None => config,
    };
    config.validate()?;
    init_threads(config.threads);
    Ok(config)
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Loads a corpus and adopts its generation settings into `config`.
fn load_corpus(dir: &Path, config: &mut TrainConfig, err: &mut dyn Write) -> Result<Corpus> {
    let corpus = Corpus::load(dir)?;
    if corpus.manifest.config != config.data {
        let _ = writeln!(err, "using the generation settings recorded in {}", dir.display());
        config.data = corpus.manifest.config.clone();
    }
    config.validate()?;
    Ok(corpus)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| Error::io("<stdout>", e))
}

fn backbone_for(config: &TrainConfig, corpus: &Corpus, pretrained: Option<&Path>, err: &mut dyn Write) -> Result<PretrainedBackbone> {
    match pretrained {
        Some(dir) => {
            let model = load_checkpoint(dir)?;
            if model.config.backbone != config.backbone {
                return Err(Error::Config(format!("{} holds a backbone with a different configuration", dir.display())));
            }
            PretrainedBackbone::from_model(&model)
        }
        None => {
            let _ = writeln!(err, "pretraining backbone for {} steps", config.pretrain.steps);
            pretrain(config, corpus)
        }
    }
}

fn eval_overrides(model: &mut Model, common: &Common, k: Option<usize>) -> Result<()> {
    if let Some(path) = &common.config {
        let c = TrainConfig::from_file(path)?;
        model.config.eval = c.eval;
        init_threads(c.threads);
    }
    if let Some(k) = k {
        model.config.eval.k = k;
    }
    let seed = match std::env::var(crate::pipeline::SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{}={v:?} is not an unsigned integer", crate::pipeline::SEED_ENV)))?,
        ),
        Err(_) => None,
    };
    if let Some(s) = common.seed.or(seed) {
        model.config.eval.support_seed = s;
        model.config.eval.verification_seed = s;
    }
    model.config.validate()
}

/// The checkpoint's persisted cache when its weights match, otherwise an empty one.
fn checkpoint_cache(model: &Model, checkpoint: &Path) -> Result<PromptCache> {
    let dir = checkpoint.join("prompts_cache");
    let fp = PromptGenerator::fingerprint(&model.store);
    if model.generator.is_some() && dir.is_dir() {
        PromptCache::load(&dir, &fp)
    } else {
        Ok(new_prompt_cache(model))
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Gen { common } => {
            let config = resolve_config(&common)?;
            let dir = require(&common.out, "out")?;
            let corpus = generate_corpus_to(&config.data, dir)?;
            emit(
                out,
                &json!({
                    "corpus": dir,
                    "fingerprint": corpus.manifest.fingerprint(),
                    "images": corpus.records.len(),
                    "base": corpus.manifest.splits.base,
                    "novel": corpus.manifest.splits.novel,
                }),
            )
        }
        Command::Pretrain { common, data } => {
            let mut config = resolve_config(&common)?;
            let dir = require(&common.out, "out")?.to_path_buf();
            let corpus = load_corpus(&data, &mut config, err)?;
            let pre = backbone_for(&config, &corpus, None, err)?;
            config.variant = Variant::Frozen;
            let model = Model::new(config, &pre)?;
            save_checkpoint(&model, &dir, None)?;
            let report = serde_json::to_value(&pre.report)?;
            write_json(&dir.join("pretrain_report.json"), &report)?;
            emit(out, &json!({ "checkpoint": dir, "pretrain": report }))
        }
        Command::Train { common, data, pretrained } => {
            let mut config = resolve_config(&common)?;
            let dir = require(&common.out, "out")?.to_path_buf();
            let corpus = load_corpus(&data, &mut config, err)?;
            let pre = backbone_for(&config, &corpus, pretrained.as_deref(), err)?;
            let mut model = Model::new(config, &pre)?;
            let _ = writeln!(err, "training {}", model.config.variant.label());
            let outcome = train(&mut model, &corpus, &RunDir::at(&dir))?;
            let last = outcome.log.last();
            emit(
                out,
                &json!({
                    "variant": model.config.variant,
                    "steps": outcome.steps,
                    "checkpoint": outcome.checkpoint,
                    "final": last,
                }),
            )
        }
        Command::Eval { common, checkpoint, data, k } => {
            let mut model = load_checkpoint(&checkpoint)?;
            eval_overrides(&mut model, &common, k)?;
            let mut data_config = model.config.clone();
            let corpus = load_corpus(&data, &mut data_config, err)?;
            let cache = checkpoint_cache(&model, &checkpoint)?;
            let report = evaluate_with_cache(&model, &corpus, &model.config.eval, &cache)?;
            let _ = write!(err, "{}", report.table());
            if let Some(path) = &common.out {
                fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))?;
            }
            writeln!(out, "{}", report.to_json()).map_err(|e| Error::io("<stdout>", e))
        }
        Command::Ablate {
            common,
            data,
            axis,
            pretrained,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let mut config = resolve_config(&common)?;
            let corpus = load_corpus(&data, &mut config, err)?;
            let pre = backbone_for(&config, &corpus, pretrained.as_deref(), err)?;
            let cells = run_ablation(&config, &corpus, &pre, axis)?;
            let table = ablation_table(&cells);
            if let Some(dir) = &common.out {
                write_json(&dir.join("ablation.json"), &serde_json::to_value(&cells)?)?;
                let tp = dir.join("ablation.txt");
                fs::write(&tp, &table).map_err(|e| Error::io(&tp, e))?;
            }
            write!(out, "{table}").map_err(|e| Error::io("<stdout>", e))
        }
        Command::PromptCache { action } => match action {
            CacheAction::Generate {
                common,
                checkpoint,
                data,
                k,
            } => {
                let mut model = load_checkpoint(&checkpoint)?;
                eval_overrides(&mut model, &common, k)?;
                let mut data_config = model.config.clone();
                let corpus = load_corpus(&data, &mut data_config, err)?;
                let dir = common.out.clone().unwrap_or_else(|| checkpoint.join("prompts_cache"));
                let cache = if dir.is_dir() {
                    PromptCache::load(&dir, &PromptGenerator::fingerprint(&model.store))?
                } else {
                    new_prompt_cache(&model)
                };
                let generated = generate_novel_prompts(&model, &corpus, &model.config.eval, &cache)?;
                cache.persist(&dir)?;
                emit(out, &json!({ "cache": dir, "entries": cache.len(), "generated": generated }))
            }
            CacheAction::Inspect { dir, .. } => {
                let fp = cache_fingerprint(&dir)?;
                let cache = PromptCache::load(&dir, &fp)?;
                let entries: Vec<_> = cache
                    .summary()
                    .into_iter()
                    .map(|(c, checksum, m, d)| json!({ "category_id": c, "checksum": checksum, "m": m, "d_vision": d }))
                    .collect();
                emit(out, &json!({ "cache": dir, "model_fingerprint": fp, "entries": entries }))
            }
            CacheAction::Clear { dir, .. } => {
                let removed = clear_cache_dir(&dir)?;
                emit(out, &json!({ "cache": dir, "removed": removed }))
            }
        },
    }
}

/// Model fingerprint recorded by the first entry of a cache directory.
fn cache_fingerprint(dir: &Path) -> Result<String> {
    let mut keys: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".key.json"))
        .collect();
    keys.sort();
    let Some(first) = keys.first() else {
        return Ok(String::new());
    };
    let v: serde_json::Value = serde_json::from_slice(&fs::read(first).map_err(|e| Error::io(first, e))?)?;
    v.get("model_fingerprint")
        .and_then(|f| f.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Integrity(format!("{} has no model fingerprint", first.display())))
}
