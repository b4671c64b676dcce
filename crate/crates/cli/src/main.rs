use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cofact::config::RunConfig;
use cofact::data::{synthesize, DatasetManifest, SynthConfig};
use cofact::embedding::AdapterScope;
use cofact::ensemble::{self, EnsembleSpec, ProbMatrix, TuneOptions, Variant};
use cofact::features::{raw_features_batch, FeatureExtractor, FeatureScaler, FIELD_NAMES, STAT_NAMES};
use cofact::fusion::{Aggregation, FusionLayout};
use cofact::metrics::{confusion, f1_csv, text_report, weighted_f1};
use cofact::model::Model;
use cofact::tensor_io::{load_named, save_named};
use cofact::train::{evaluate, train_on_manifests, Split, TrainOptions};
use cofact::{Error, Parallelism, Result};

#[derive(Parser)]
#[command(name = "cofact", version, about = "Multi-modal fact verification with co-attention fusion")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset (train and val splits).
    Synth(SynthArgs),
    /// Compute the 32 explicit text features of a manifest as CSV.
    ExtractFeatures(FeatureArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Evaluate(EvalArgs),
    /// Blend or tune ensembles of probability files.
    #[command(subcommand)]
    Ensemble(EnsembleCommand),
    /// Print the effective run configuration as TOML.
    PrintConfig(ConfigArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for the manifests and embedding files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    val_per_class: usize,
    /// Width of every embedding stream.
    #[arg(long, default_value_t = 32)]
    backbone_dim: usize,
    /// Seed of the train split; val uses the next one.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct FeatureArgs {
    /// Manifest whose samples are featurized.
    #[arg(long)]
    manifest: PathBuf,
    /// Fit the scaler on this manifest instead of emitting raw counts.
    #[arg(long, conflicts_with = "scaler")]
    fit_on: Option<PathBuf>,
    /// Scale with a saved scaler (a checkpoint or scaler file).
    #[arg(long)]
    scaler: Option<PathBuf>,
    /// Write the fitted scaler here.
    #[arg(long, requires = "fit_on")]
    save_scaler: Option<PathBuf>,
    /// CSV file to write; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the single-core synthetic-data preset instead of the defaults.
    #[arg(long)]
    desk: bool,
    /// Model width.
    #[arg(long)]
    d: Option<usize>,
    /// Inner width of the co-attention feed-forward layer.
    #[arg(long)]
    ff_inner: Option<usize>,
    /// Attention heads; must divide the model width.
    #[arg(long)]
    heads: Option<usize>,
    /// Hidden width of the classifier head.
    #[arg(long)]
    d_m: Option<usize>,
    /// Dropout probability during training.
    #[arg(long)]
    dropout: Option<f64>,
    /// Rows kept per embedding sequence.
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate for newly initialized modules.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Learning rate for the backbone tail and adapter.
    #[arg(long)]
    backbone_learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of cross-entropy in the joint loss; 1 disables the contrastive term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Pooling of fused sequences: mean or mean_max_last.
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    /// Trainable backbone parameters: frozen, adapter_only or all.
    #[arg(long, value_parser = parse_scope)]
    adapter_scope: Option<AdapterScope>,
    /// Also pass text streams through the backbone adapter.
    #[arg(long)]
    adapter_on_text: Option<bool>,
    /// Streams to fuse: full or text_only.
    #[arg(long, value_parser = parse_layout)]
    layout: Option<FusionLayout>,
    /// Feed the explicit text features to the classifier.
    #[arg(long)]
    use_features: Option<bool>,
    /// Scale attention scores by the model width instead of the head width.
    #[arg(long)]
    scale_by_model_dim: Option<bool>,
    /// Width of hashed text embeddings for samples that lack them.
    #[arg(long)]
    fallback_text_dim: Option<usize>,
    /// Training manifest.
    #[arg(long = "train")]
    train_manifest: Option<PathBuf>,
    /// Validation manifest.
    #[arg(long = "val")]
    val_manifest: Option<PathBuf>,
    /// Directory for the checkpoint, probabilities and logs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "mean_max_last" => Ok(Aggregation::MeanMaxLast),
        _ => Err(format!("unknown aggregation {s:?} (mean, mean_max_last)")),
    }
}

fn parse_scope(s: &str) -> std::result::Result<AdapterScope, String> {
    match s {
        "frozen" => Ok(AdapterScope::Frozen),
        "adapter_only" => Ok(AdapterScope::AdapterOnly),
        "all" => Ok(AdapterScope::All),
        _ => Err(format!("unknown adapter scope {s:?} (frozen, adapter_only, all)")),
    }
}

fn parse_layout(s: &str) -> std::result::Result<FusionLayout, String> {
    match s {
        "full" => Ok(FusionLayout::Full),
        "text_only" => Ok(FusionLayout::TextOnly),
        _ => Err(format!("unknown layout {s:?} (full, text_only)")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.desk => RunConfig::desk(),
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(d, ff_inner, heads, d_m, dropout, max_seq_len, batch_size, learning_rate, backbone_learning_rate, epochs, seed);
        set!(alpha, tau, aggregation, adapter_scope, adapter_on_text, layout, use_features, scale_by_model_dim);
        set!(fallback_text_dim);
        if let Some(v) = &self.train_manifest {
            c.train_manifest = Some(v.clone());
        }
        if let Some(v) = &self.val_manifest {
            c.val_manifest = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            c.out_dir = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to predict; labels, when present, produce a metrics report.
    #[arg(long)]
    manifest: PathBuf,
    /// Probability file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Header label of the probability file.
    #[arg(long, default_value = "model")]
    model_id: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand)]
enum EnsembleCommand {
    /// Apply a spec to aligned probability files.
    Blend {
        /// Probability files written by train or evaluate, in model order.
        #[arg(long, num_args = 1.., required = true)]
        probs: Vec<PathBuf>,
        /// Spec written by ensemble tune.
        #[arg(long)]
        spec: PathBuf,
        /// Labeled manifest for a metrics report.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Blended scores as CSV; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search weights and powers on labeled validation probabilities.
    Tune {
        /// Probability files written by train or evaluate, in model order.
        #[arg(long, num_args = 1.., required = true)]
        probs: Vec<PathBuf>,
        /// Labeled manifest listing the samples in the same order.
        #[arg(long)]
        manifest: PathBuf,
        /// average, weighted, power or unified.
        #[arg(long, default_value = "unified", value_parser = parse_variant)]
        variant: Variant,
        /// Random refinement steps after the grid search.
        #[arg(long, default_value_t = 200)]
        budget: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Spec file to write as TOML; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn mode(cli: &Cli) -> Parallelism {
    if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(a.backbone_dim);
    let train = synthesize("train", a.train_per_class, &cfg, a.seed)?;
    let val = synthesize("val", a.val_per_class, &cfg, a.seed + 1)?;
    let tp = train.write(&a.out)?;
    let vp = val.write(&a.out)?;
    println!("{}\n{}", tp.display(), vp.display());
    Ok(())
}

fn load_scaler(path: &Path) -> Result<FeatureScaler> {
    let entries = load_named(path)?;
    let (_, t) = entries
        .iter()
        .find(|(n, _)| n == cofact::model::SCALER_ENTRY)
        .ok_or_else(|| Error::Format(format!("{} has no {} entry", path.display(), cofact::model::SCALER_ENTRY)))?;
    FeatureScaler::from_tensor(t)
}

fn extract_features(a: &FeatureArgs, mode: Parallelism) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let scaler = match (&a.fit_on, &a.scaler) {
        (Some(p), _) => Some(FeatureExtractor::fit(&DatasetManifest::load(p)?.records).scaler),
        (None, Some(p)) => Some(load_scaler(p)?),
        (None, None) => None,
    };
    if let (Some(path), Some(s)) = (&a.save_scaler, &scaler) {
        save_named(path, &[(cofact::model::SCALER_ENTRY.to_string(), s.to_tensor())])?;
    }
    let mut out = String::from("id");
    for f in FIELD_NAMES {
        for s in STAT_NAMES {
            out.push_str(&format!(",{f}.{s}"));
        }
    }
    out.push('\n');
    let raw = raw_features_batch(&manifest.records, mode);
    for (rec, r) in manifest.records.iter().zip(raw) {
        let v = scaler.as_ref().map_or(r, |s| s.transform(&r));
        out.push_str(&rec.id);
        for x in v {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    match &a.out {
        Some(p) => write_file(p, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn train_cmd(a: &TrainArgs, mode: Parallelism) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| Error::Config(format!("missing --{what}")));
    let train_m = DatasetManifest::load(&need(&cfg.train_manifest, "train")?)?;
    let val_m = DatasetManifest::load(&need(&cfg.val_manifest, "val")?)?;
    let out = need(&cfg.out_dir, "out-dir")?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    cfg.save(&out.join("config.toml"))?;
    let log_path = out.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let (outcome, _, val) = train_on_manifests(&cfg, &train_m, &val_m, TrainOptions { parallelism: mode }, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    for e in &outcome.epochs {
        eprintln!("epoch {:>3}  loss {:.4}  val_f1 {:.4}", e.epoch, e.mean_loss, e.val_f1);
    }
    outcome.model.save_checkpoint(&out.join("checkpoint.pcfc"), &outcome.scaler)?;
    outcome.val_probs.save(&out.join("val_probs.csv"))?;
    let cm = confusion(&outcome.val_probs.predictions(), &val.labels)?;
    let report = weighted_f1(&cm)?;
    write_file(&out.join("confusion.csv"), &cm.to_csv())?;
    write_file(&out.join("f1.csv"), &f1_csv(&report))?;
    println!("best epoch {} (val weighted F1 {:.4})", outcome.best_epoch, outcome.best_f1);
    print!("{}", text_report(&cm, &report));
    Ok(())
}

fn evaluate_cmd(a: &EvalArgs, mode: Parallelism) -> Result<()> {
    if !a.checkpoint.is_file() {
        return Err(Error::io(&a.checkpoint, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    let beside = a.checkpoint.parent().map(|d| d.join("config.toml")).filter(|p| p.is_file());
    let cfg = match (&a.cfg.config, beside) {
        (None, Some(p)) => ConfigArgs { config: Some(p), ..a.cfg.clone() }.resolve()?,
        _ => a.cfg.resolve()?,
    };
    let manifest = DatasetManifest::load(&a.manifest)?;
    let scaler = load_scaler(&a.checkpoint)?;
    let extractor = FeatureExtractor { scaler };
    let split = Split::load(&manifest, &cfg, &extractor, mode)?;
    let (model, _) = Model::load_checkpoint(&a.checkpoint, &cfg, split.dims()?)?;
    let ev = evaluate(&model, &split, &a.model_id, mode)?;
    if let Some(p) = &a.out {
        ev.probs.save(p)?;
    }
    match (&ev.confusion, &ev.f1) {
        (Some(cm), Some(f1)) => print!("{}", text_report(cm, f1)),
        _ => println!("{} samples scored (unlabeled manifest)", ev.probs.len()),
    }
    Ok(())
}

fn load_probs(paths: &[PathBuf]) -> Result<Vec<ProbMatrix>> {
    paths.iter().map(|p| ProbMatrix::load(p)).collect()
}

fn manifest_labels(path: &Path, sample_ids: &[String]) -> Result<Vec<usize>> {
    let m = DatasetManifest::load(path)?;
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    if ids.len() != sample_ids.len() || ids.iter().zip(sample_ids).any(|(a, b)| *a != b) {
        return Err(Error::Ensemble(format!("manifest {} does not list the probability samples in the same order", path.display())));
    }
    Ok(m.labels()?.into_iter().map(|l| l.index()).collect())
}

fn ensemble_cmd(c: &EnsembleCommand, mode: Parallelism) -> Result<()> {
    match c {
        EnsembleCommand::Blend { probs, spec, manifest, out } => {
            let mats = load_probs(probs)?;
            let spec = EnsembleSpec::load(spec)?;
            let scores = ensemble::blend(&mats, &spec)?;
            let mut text = String::from("sample_id,s0,s1,s2,s3,s4,pred\n");
            let mut preds = Vec::with_capacity(scores.len());
            for (id, row) in mats[0].sample_ids.iter().zip(&scores) {
                let p = cofact::tensor::argmax(row);
                preds.push(p);
                text.push_str(id);
                for v in row {
                    text.push_str(&format!(",{v:e}"));
                }
                text.push_str(&format!(",{p}\n"));
            }
            match out {
                Some(p) => write_file(p, &text)?,
                None => print!("{text}"),
            }
            if let Some(m) = manifest {
                let labels = manifest_labels(m, &mats[0].sample_ids)?;
                let cm = confusion(&preds, &labels)?;
                eprint!("{}", text_report(&cm, &weighted_f1(&cm)?));
            }
            Ok(())
        }
        EnsembleCommand::Tune { probs, manifest, variant, budget, seed, out } => {
            let mats = load_probs(probs)?;
            let labels = manifest_labels(manifest, &mats[0].sample_ids)?;
            let opts = TuneOptions { budget: *budget, seed: *seed, parallelism: mode };
            let spec = ensemble::tune(&mats, &labels, *variant, &opts)?;
            match out {
                Some(p) => spec.save(p)?,
                None => print!("{}", spec.to_toml()),
            }
            eprintln!("{} ensemble: weighted F1 {:.4}", spec.variant, spec.f1.unwrap_or(0.0));
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let m = mode(cli);
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::ExtractFeatures(a) => extract_features(a, m),
        Command::Train(a) => train_cmd(a, m),
        Command::Evaluate(a) => evaluate_cmd(a, m),
        Command::Ensemble(c) => ensemble_cmd(c, m),
        Command::PrintConfig(a) => {
            print!("{}", a.resolve()?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error kind=usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
