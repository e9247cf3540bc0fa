//! `llmood` command-line interface.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or model errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use llmood::config::{Regime, RunConfig, Shots};
use llmood::detectors::{read_scores, score_dump, write_scores, ScoreRow, SplitView, SCORE_HEADER};
use llmood::metrics::anisotropy;
use llmood::protocol::{
    base_model, compare_tuning_modes, extract_task, run_protocol, train_seed, write_curves, write_embeddings,
    write_paired, SeedData,
};
use llmood::synth::few_shot_dump;
use llmood::toylm::{quantize_sim, save_checkpoint, AdapterKind, Precision, TuningMode};
use llmood::{
    read_dump, write_dump, DatasetManifest, DetectionMetrics, DetectorKind, DetectorParams, Error, FittedDetector,
    MspMode, Result,
};

#[derive(Parser, Debug)]
#[command(name = "llmood", version, about = "OOD detection for generative LLM classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the header summary of an EDF1 dump.
    Inspect { dump: PathBuf },
    /// Fit a detector on the manifest's fit split and save it as JSON.
    Fit(FitArgs),
    /// Score the ID test split and every OOD set of a manifest.
    Score(ScoreArgs),
    /// AUROC, FAR@95 and AUPR from two score files.
    Metrics {
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        ood: PathBuf,
    },
    /// Sentence-level anisotropy of the embeddings in a dump.
    Anisotropy { dump: PathBuf },
    /// Fine-tune the toy model on one seed of a synthetic task and export
    /// its checkpoint, curves and embeddings.
    Train(TrainArgs),
    /// Run the zero-grad and fine-tuned protocol over every seed.
    Bench(RunArgs),
    /// Paired generative vs discriminative fine-tuning curves.
    CompareTuning(RunArgs),
    /// Simulate reduced precision on a dump.
    Quantize {
        dump: PathBuf,
        #[arg(long)]
        precision: Precision,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DetectorArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    detector: DetectorKind,
    #[arg(long, default_value = "full_vocab")]
    msp_mode: MspMode,
    /// Relative covariance ridge for Maha.
    #[arg(long, default_value_t = llmood::detectors::DEFAULT_SHRINKAGE)]
    shrinkage: f64,
}

impl DetectorArgs {
    fn params(&self) -> DetectorParams {
        DetectorParams {
            msp_mode: self.msp_mode,
            shrinkage: self.shrinkage,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// Examples per class taken from the fit split: 1, 5, 10 or full.
    #[arg(long, default_value = "full")]
    shots: Shots,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    detector: DetectorArgs,
    /// A detector saved by `fit`; the manifest's fit split is used otherwise.
    #[arg(long)]
    fitted: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    shots: Option<Shots>,
    /// Comma-separated seeds, overriding the configuration.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    msp_mode: Option<MspMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    mode: Option<TuningMode>,
    #[arg(long)]
    adapter: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(r) = self.regime {
            cfg.regime = r;
        }
        if let Some(s) = self.shots {
            cfg.shots = s;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = self.msp_mode {
            cfg.msp_mode = m;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn inspect(path: &Path) -> Result<()> {
    let dump = read_dump(path)?;
    let labeled = dump.records.iter().filter(|r| r.label.is_some()).count();
    println!("n = {}", dump.len());
    println!("d = {}", dump.dim);
    println!("K = {}", dump.num_classes());
    println!("classes = {}", dump.class_names.join(", "));
    println!("labeled = {labeled}");
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.detector.manifest)?;
    let path = match manifest.fit_split {
        llmood::FitSplit::Train => &manifest.id_train,
        llmood::FitSplit::Val => &manifest.id_val,
    };
    let split = few_shot_dump(&read_dump(path)?, args.shots, args.seed)?;
    let fitted = FittedDetector::fit(args.detector.detector, &split, &args.detector.params())?;
    create_dir(&args.out_dir)?;
    let out = args.out_dir.join(format!("{}.json", args.detector.detector));
    let json = serde_json::to_string_pretty(&fitted).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&out, &json)?;
    println!(
        "fitted {} on {} records -> {}",
        args.detector.detector,
        split.len(),
        out.display()
    );
    Ok(())
}

fn load_fitted(path: &Path) -> Result<FittedDetector> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut fitted: FittedDetector =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let FittedDetector::Maha(bank) = &mut fitted {
        bank.refactor()?;
    }
    Ok(fitted)
}

fn score(args: &ScoreArgs) -> Result<()> {
    let kind = args.detector.detector;
    let manifest = DatasetManifest::load(&args.detector.manifest)?;
    let (id_scores, ood_scores, rows) = match &args.fitted {
        None => {
            let s = score_dump(&manifest, kind, &args.detector.params())?;
            let ood = s
                .ood
                .iter()
                .map(|o| (o.name.clone(), o.scores.clone()))
                .collect::<Vec<_>>();
            (s.id_test.scores.clone(), ood, s.rows())
        }
        Some(path) => {
            let fitted = load_fitted(path)?;
            if fitted.kind() != kind {
                return Err(Error::Config(format!(
                    "{} holds a {} detector",
                    path.display(),
                    fitted.kind()
                )));
            }
            let mut rows = Vec::new();
            let mut run = |name: &str, dump_path: &Path| -> Result<Vec<f64>> {
                let dump = read_dump(dump_path)?;
                let scores = fitted.score_split(SplitView::new(&dump))?;
                rows.extend(dump.records.iter().zip(&scores).map(|(r, s)| ScoreRow {
                    id: r.id.clone(),
                    split: name.to_string(),
                    detector: kind.to_string(),
                    score: *s,
                }));
                Ok(scores)
            };
            let id = run("id_test", &manifest.id_test)?;
            let ood = manifest
                .ood
                .iter()
                .map(|o| Ok((o.name.clone(), run(&o.name, &o.path)?)))
                .collect::<Result<Vec<_>>>()?;
            (id, ood, rows)
        }
    };
    create_dir(&args.out_dir)?;
    write_scores(args.out_dir.join(format!("scores_{kind}.tsv")), &rows)?;
    let mut table = String::from("ood_set\tauroc\tfar95\taupr\n");
    for (name, scores) in &ood_scores {
        let m = DetectionMetrics::compute(&id_scores, scores)?;
        println!(
            "{name}: AUROC {:.4}  FAR@95 {:.4}  AUPR {:.4}",
            m.auroc, m.far95, m.aupr
        );
        table.push_str(&format!("{name}\t{}\t{}\t{}\n", m.auroc, m.far95, m.aupr));
    }
    write_text(&args.out_dir.join(format!("metrics_{kind}.tsv")), &table)
}

/// Reads scores from a score table (as written by `score`) or from a file
/// with one number per line.
fn read_score_file(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.lines().next() == Some(SCORE_HEADER) {
        return Ok(read_scores(path)?.into_iter().map(|r| r.score).collect());
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: line {} is not a number: {l:?}", path.display(), i + 1)))
        })
        .collect()
}

fn metrics(id: &Path, ood: &Path) -> Result<()> {
    let m = DetectionMetrics::compute(&read_score_file(id)?, &read_score_file(ood)?)?;
    println!("AUROC {}", m.auroc);
    println!("FAR@95 {}", m.far95);
    println!("AUPR {}", m.aupr);
    Ok(())
}

fn dump_anisotropy(path: &Path) -> Result<()> {
    let dump = read_dump(path)?;
    let vecs: Vec<Vec<f64>> = dump
        .records
        .iter()
        .map(|r| r.embedding.iter().map(|&x| x as f64).collect())
        .collect();
    println!("anisotropy {}", anisotropy(&vecs)?);
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.run.config()?;
    if let Some(mode) = args.mode {
        cfg.train.mode = mode;
    }
    match args.adapter.as_deref() {
        None => {}
        Some("lora") => cfg.train.adapter = AdapterKind::Lora,
        Some("full") => cfg.train.adapter = AdapterKind::Full,
        Some(other) => return Err(Error::Config(format!("adapter must be lora or full, got {other:?}"))),
    }
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let base = base_model(&cfg)?;
    let trained = train_seed(&cfg, &base, SeedData::new(&cfg, args.seed)?)?;
    save_checkpoint(&trained.model, out.join("model.tlm"))?;
    write_curves(&out.join("curves.tsv"), &trained.outcome.curves)?;
    let d = &trained.data;
    let dumps = extract_task(&trained.model, &d.task, &d.train, &d.val)?;
    write_embeddings(&out.join("embeddings"), &dumps, cfg.fine_tuned_fit)?;
    println!(
        "trained {} epochs (best epoch {}, val accuracy {:.4}) -> {}",
        trained.outcome.epochs_run,
        trained.outcome.best_epoch,
        trained.outcome.best_val,
        out.display()
    );
    Ok(())
}

fn bench(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let result = run_protocol(&cfg)?;
    create_dir(&cfg.out_dir)?;
    result.write(&cfg.out_dir)?;
    print!("{}", result.report.to_table());
    Ok(())
}

fn compare(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let points = compare_tuning_modes(&cfg)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("compare_tuning.tsv");
    write_paired(&path, &points)?;
    println!("{} points -> {}", points.len(), path.display());
    Ok(())
}

fn quantize(path: &Path, precision: Precision, out_dir: &Path) -> Result<()> {
    let dump = quantize_sim(&read_dump(path)?, precision);
    create_dir(out_dir)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dump");
    let out = out_dir.join(format!("{stem}.{precision}.edf"));
    write_dump(&dump, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { dump } => inspect(&dump),
        Command::Fit(a) => fit(&a),
        Command::Score(a) => score(&a),
        Command::Metrics { id, ood } => metrics(&id, &ood),
        Command::Anisotropy { dump } => dump_anisotropy(&dump),
        Command::Train(a) => train_cmd(&a),
        Command::Bench(a) => bench(&a),
        Command::CompareTuning(a) => compare(&a),
        Command::Quantize {
            dump,
            precision,
            out_dir,
        } => quantize(&dump, precision, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
