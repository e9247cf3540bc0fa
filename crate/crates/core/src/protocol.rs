//! End-to-end evaluation on synthetic tasks: zero-grad and fine-tuned
//! settings per seed, detector fitting, scoring, metrics and artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{DatasetManifest, FitSplit, OodEntry, RunConfig};
use crate::detectors::{
    byte_tokenize, score_splits, ClassTokenMap, DetectorKind, DetectorParams, ScoreRow, ScoredSplits, SplitView,
};
use crate::dump::{write_dump, EmbeddingDump};
use crate::error::{Error, Result};
use crate::metrics::{anisotropy, DetectionMetrics, MetricRow, MetricsReport, SeedSeries};
use crate::synth::{few_shot, generate_task_with, pretraining_corpus, PretrainDoc, SyntheticTask};
use crate::toylm::{
    build_prompt, classify_generative, extract_dump, label_tokens, predict_class, pretrain_lm, train, CurvePoint,
    Example, ExtractInput, Extraction, ToyLm, TrainConfig, TrainOutcome, TuningMode, BOS,
};

pub const ZERO_GRAD: &str = "zero_grad";
pub const FINE_TUNED: &str = "fine_tuned";

/// Extracted dumps of every split of a task.
#[derive(Debug, Clone)]
pub struct TaskDumps {
    pub train: Extraction,
    pub val: Extraction,
    pub test: Extraction,
    pub ood: Vec<(String, Extraction)>,
}

impl TaskDumps {
    pub fn fit_dump(&self, split: FitSplit) -> &EmbeddingDump {
        match split {
            FitSplit::Train => &self.train.dump,
            FitSplit::Val => &self.val.dump,
        }
    }

    /// `(split name, dump)` for every split, ID first.
    pub fn named(&self) -> Vec<(&str, &EmbeddingDump)> {
        let mut v = vec![
            ("id_train", &self.train.dump),
            ("id_val", &self.val.dump),
            ("id_test", &self.test.dump),
        ];
        v.extend(self.ood.iter().map(|(n, e)| (n.as_str(), &e.dump)));
        v
    }
}

fn labeled_inputs(examples: &[Example]) -> Vec<ExtractInput<'_>> {
    examples
        .iter()
        .map(|e| ExtractInput {
            id: &e.id,
            text: &e.text,
            label: Some(e.label as u32),
        })
        .collect()
}

pub fn class_map_for(task: &SyntheticTask) -> Result<ClassTokenMap> {
    ClassTokenMap::build(&task.class_names, byte_tokenize, &[])
}

pub fn extract_task(model: &ToyLm, task: &SyntheticTask, train: &[Example], val: &[Example]) -> Result<TaskDumps> {
    let map = class_map_for(task)?;
    let ood = task
        .ood
        .iter()
        .map(|set| {
            let inputs: Vec<ExtractInput<'_>> = set
                .sentences
                .iter()
                .map(|(id, text)| ExtractInput { id, text, label: None })
                .collect();
            Ok((set.name.clone(), extract_dump(model, &inputs, &map)?))
        })
        .collect::<Result<_>>()?;
    Ok(TaskDumps {
        train: extract_dump(model, &labeled_inputs(train), &map)?,
        val: extract_dump(model, &labeled_inputs(val), &map)?,
        test: extract_dump(model, &labeled_inputs(&task.test), &map)?,
        ood,
    })
}

/// Outcome of one detector in one setting: scores, or a degenerate fit.
#[derive(Debug, Clone)]
pub enum DetectorOutcome {
    Scored(ScoredSplits),
    Degenerate,
}

/// Fits and scores one detector; a degenerate Gaussian fit is reported
/// rather than propagated.
pub fn evaluate_detector(
    kind: DetectorKind,
    params: &DetectorParams,
    dumps: &TaskDumps,
    fit: FitSplit,
) -> Result<DetectorOutcome> {
    let ood: Vec<(String, SplitView<'_>)> = dumps
        .ood
        .iter()
        .map(|(n, e)| (n.clone(), SplitView::with_partition(&e.dump, &e.log_partition)))
        .collect();
    let test = SplitView::with_partition(&dumps.test.dump, &dumps.test.log_partition);
    match score_splits(kind, params, dumps.fit_dump(fit), test, &ood) {
        Ok(s) => Ok(DetectorOutcome::Scored(s)),
        Err(Error::DegenerateFit) => Ok(DetectorOutcome::Degenerate),
        Err(e) => Err(e),
    }
}

/// Metrics per OOD set, in `dumps.ood` order.
pub fn outcome_metrics(outcome: &DetectorOutcome, dumps: &TaskDumps) -> Result<Vec<(String, DetectionMetrics, bool)>> {
    match outcome {
        DetectorOutcome::Degenerate => Ok(dumps
            .ood
            .iter()
            .map(|(n, e)| {
                (
                    n.clone(),
                    DetectionMetrics::degenerate(dumps.test.dump.len(), e.dump.len()),
                    true,
                )
            })
            .collect()),
        DetectorOutcome::Scored(s) => s
            .ood
            .iter()
            .map(|o| {
                Ok((
                    o.name.clone(),
                    DetectionMetrics::compute(&s.id_test.scores, &o.scores)?,
                    false,
                ))
            })
            .collect(),
    }
}

/// Accuracy of the model on `examples`: strict-match greedy decoding, or the
/// classifier head when one is attached.
pub fn id_accuracy(model: &ToyLm, examples: &[Example], class_names: &[String]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("accuracy examples"));
    }
    let max_len = class_names.iter().map(|c| c.len()).max().unwrap_or(0) + 2;
    let mut hits = 0;
    for e in examples {
        let ok = match &model.head {
            Some(_) => predict_class(model, &e.text)? == e.label,
            None => crate::metrics::strict_match(&classify_generative(model, &e.text, max_len)?, &class_names[e.label]),
        };
        hits += ok as usize;
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn embeddings_f64(dump: &EmbeddingDump) -> Vec<Vec<f64>> {
    dump.records
        .iter()
        .map(|r| r.embedding.iter().map(|&x| x as f64).collect())
        .collect()
}

/// Histogram rows `(bin_lo, bin_hi, split, count)` over a shared range.
pub fn density_table(scored: &ScoredSplits, bins: usize) -> Vec<(f64, f64, String, usize)> {
    let splits: Vec<(&str, &[f64])> = std::iter::once((scored.id_test.name.as_str(), &scored.id_test.scores[..]))
        .chain(scored.ood.iter().map(|o| (o.name.as_str(), &o.scores[..])))
        .collect();
    let all = splits.iter().flat_map(|(_, s)| s.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out = Vec::new();
    for (name, scores) in splits {
        let mut counts = vec![0usize; bins];
        for &s in scores {
            let b = (((s - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.into_iter().enumerate() {
            out.push((lo + b as f64 * width, lo + (b + 1) as f64 * width, name.to_string(), c));
        }
    }
    out
}

/// Everything produced for one (seed, setting).
#[derive(Debug, Clone)]
pub struct SettingRun {
    pub setting: String,
    pub seed: u64,
    /// Split the distance detectors were fitted on.
    pub fit: FitSplit,
    pub dumps: TaskDumps,
    pub outcomes: Vec<(DetectorKind, DetectorOutcome)>,
    pub metrics: Vec<(DetectorKind, Vec<(String, DetectionMetrics, bool)>)>,
    pub id_accuracy: f64,
    pub anisotropy: f64,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub task: SyntheticTask,
    pub zero_grad: SettingRun,
    pub fine_tuned: SettingRun,
    pub curves: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub report: MetricsReport,
    pub seeds: Vec<SeedRun>,
}

fn evaluate_setting(
    setting: &str,
    seed: u64,
    model: &ToyLm,
    task: &SyntheticTask,
    train: &[Example],
    val: &[Example],
    fit: FitSplit,
    cfg: &RunConfig,
) -> Result<SettingRun> {
    let dumps = extract_task(model, task, train, val)?;
    let params = DetectorParams {
        msp_mode: cfg.msp_mode,
        shrinkage: cfg.shrinkage,
    };
    let mut outcomes = Vec::new();
    let mut metrics = Vec::new();
    for &kind in &cfg.detectors {
        let outcome = evaluate_detector(kind, &params, &dumps, fit)?;
        metrics.push((kind, outcome_metrics(&outcome, &dumps)?));
        outcomes.push((kind, outcome));
    }
    Ok(SettingRun {
        setting: setting.to_string(),
        seed,
        fit,
        id_accuracy: id_accuracy(model, &task.test, &task.class_names)?,
        anisotropy: anisotropy(&embeddings_f64(&dumps.test.dump))?,
        dumps,
        outcomes,
        metrics,
    })
}

/// The shared base model: random init from `pretrain.seed`, then language
/// model pretraining on a general corpus when `pretrain.epochs > 0`.
pub fn base_model(cfg: &RunConfig) -> Result<ToyLm> {
    let p = &cfg.pretrain;
    let mut model = ToyLm::new(cfg.model.clone(), p.seed)?;
    if p.epochs > 0 {
        let seqs = pretraining_corpus(p.corpus_size, p.templated, p.seed)
            .iter()
            .map(|doc| pretrain_tokens(doc, cfg.model.context))
            .collect::<Result<Vec<_>>>()?;
        pretrain_lm(&mut model, &seqs, p.epochs, p.lr, p.batch_size, p.seed)?;
    }
    Ok(model)
}

fn pretrain_tokens(doc: &PretrainDoc, context: usize) -> Result<Vec<u32>> {
    let mut t = match doc.domain {
        Some(domain) => {
            let mut t = build_prompt(&doc.text, context)?;
            t.extend(label_tokens(domain));
            t
        }
        None => {
            let mut t = vec![BOS];
            t.extend(label_tokens(&doc.text));
            t
        }
    };
    t.truncate(context);
    Ok(t)
}

/// Per-epoch OOD metrics of the distance detectors (mean AUROC over OOD sets).
fn epoch_ood_curves(
    epoch: usize,
    model: &ToyLm,
    task: &SyntheticTask,
    train: &[Example],
    val: &[Example],
    fit: FitSplit,
    params: &DetectorParams,
) -> Result<Vec<CurvePoint>> {
    let dumps = extract_task(model, task, train, val)?;
    let mut out = Vec::new();
    for kind in [DetectorKind::Maha, DetectorKind::Cosine] {
        let outcome = evaluate_detector(kind, params, &dumps, fit)?;
        let m = outcome_metrics(&outcome, &dumps)?;
        let mean = m.iter().map(|x| x.1.auroc).sum::<f64>() / m.len() as f64;
        out.push(CurvePoint::new(epoch, "ood", format!("{kind}_auroc"), mean));
    }
    Ok(out)
}

pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    run_seed_from(cfg, &base_model(cfg)?, seed)
}

/// One seed starting from an already built base model.
pub fn run_seed_from(cfg: &RunConfig, base: &ToyLm, seed: u64) -> Result<SeedRun> {
    let data = SeedData::new(cfg, seed)?;
    let zero_grad = evaluate_setting(
        ZERO_GRAD,
        seed,
        base,
        &data.task,
        &data.train,
        &data.val,
        cfg.zero_grad_fit,
        cfg,
    )?;
    let trained = train_seed(cfg, base, data)?;
    let fine_tuned = evaluate_setting(
        FINE_TUNED,
        seed,
        &trained.model,
        &trained.data.task,
        &trained.data.train,
        &trained.data.val,
        cfg.fine_tuned_fit,
        cfg,
    )?;
    Ok(SeedRun {
        seed,
        task: trained.data.task,
        zero_grad,
        fine_tuned,
        curves: trained.outcome.curves,
    })
}

/// The synthetic task of one seed with its few-shot train and val splits.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub task: SyntheticTask,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl SeedData {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let task = generate_task_with(cfg.regime, seed, &cfg.split_sizes());
        let k = task.class_names.len();
        let train = few_shot(&task.train, k, cfg.shots, seed)?;
        let val = few_shot(&task.val, k, cfg.shots, seed.wrapping_add(1))?;
        Ok(SeedData { seed, task, train, val })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSeed {
    pub data: SeedData,
    pub model: ToyLm,
    pub outcome: TrainOutcome,
}

/// Fine-tunes a copy of `base` on one seed's data.
pub fn train_seed(cfg: &RunConfig, base: &ToyLm, data: SeedData) -> Result<TrainedSeed> {
    let mut model = base.clone();
    let tcfg = TrainConfig {
        seed: data.seed,
        ..cfg.train.clone()
    };
    let params = DetectorParams {
        msp_mode: cfg.msp_mode,
        shrinkage: cfg.shrinkage,
    };
    let mut hook = |epoch: usize, m: &ToyLm| -> Result<Vec<CurvePoint>> {
        if cfg.epoch_curves {
            epoch_ood_curves(
                epoch,
                m,
                &data.task,
                &data.train,
                &data.val,
                cfg.fine_tuned_fit,
                &params,
            )
        } else {
            Ok(Vec::new())
        }
    };
    let outcome = train(
        &mut model,
        &data.train,
        &data.val,
        &data.task.class_names,
        &tcfg,
        &mut hook,
    )?;
    Ok(TrainedSeed { data, model, outcome })
}

pub fn aggregate(cfg: &RunConfig, seeds: &[SeedRun]) -> MetricsReport {
    let mut rows = Vec::new();
    let mut accuracy = Vec::new();
    let mut aniso = Vec::new();
    for setting in [ZERO_GRAD, FINE_TUNED] {
        let runs: Vec<&SettingRun> = seeds
            .iter()
            .map(|s| {
                if setting == ZERO_GRAD {
                    &s.zero_grad
                } else {
                    &s.fine_tuned
                }
            })
            .collect();
        let Some(first) = runs.first() else { continue };
        for (d, (kind, per_ood)) in first.metrics.iter().enumerate() {
            for (o, (ood_name, _, _)) in per_ood.iter().enumerate() {
                let cells: Vec<(DetectionMetrics, bool)> = runs
                    .iter()
                    .map(|r| (r.metrics[d].1[o].1, r.metrics[d].1[o].2))
                    .collect();
                rows.push(MetricRow::new(
                    setting,
                    kind.as_str(),
                    ood_name.as_str(),
                    cells.iter().any(|c| c.1),
                    cells.into_iter().map(|c| c.0).collect(),
                ));
            }
        }
        accuracy.push(SeedSeries::new(setting, runs.iter().map(|r| r.id_accuracy).collect()));
        aniso.push(SeedSeries::new(setting, runs.iter().map(|r| r.anisotropy).collect()));
    }
    MetricsReport {
        regime: cfg.regime.as_str().to_string(),
        shots: cfg.shots.to_string(),
        msp_mode: cfg.msp_mode.as_str().to_string(),
        seeds: seeds.iter().map(|s| s.seed).collect(),
        rows,
        id_accuracy: accuracy,
        anisotropy: aniso,
    }
}

/// Runs every seed of `cfg` and aggregates the report.
pub fn run_protocol(cfg: &RunConfig) -> Result<ProtocolResult> {
    cfg.validate()?;
    let base = base_model(cfg)?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed_from(cfg, &base, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolResult {
        report: aggregate(cfg, &seeds),
        seeds,
    })
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `curves` as an `epoch split metric value` table.
pub fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("epoch\tsplit\tmetric\tvalue\n");
    for c in curves {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", c.epoch, c.split, c.metric, c.value);
    }
    write_text(path, &s)
}

/// Writes every split of `dumps` as EDF1 into `dir`, plus a
/// `manifest.toml` that points at them with the given fit split.
pub fn write_embeddings(dir: &Path, dumps: &TaskDumps, fit: FitSplit) -> Result<()> {
    create_dir(dir)?;
    let mut ood = Vec::new();
    for (name, dump) in dumps.named() {
        let file = format!("{name}.edf");
        write_dump(dump, dir.join(&file))?;
        if !name.starts_with("id_") {
            ood.push(OodEntry {
                name: name.to_string(),
                path: file.into(),
            });
        }
    }
    let manifest = DatasetManifest {
        id_train: "id_train.edf".into(),
        id_val: "id_val.edf".into(),
        id_test: "id_test.edf".into(),
        fit_split: fit,
        ood,
    };
    manifest.save(dir.join("manifest.toml"))
}

fn write_setting(dir: &Path, run: &SettingRun) -> Result<()> {
    let tag = format!("{}_seed{}", run.setting, run.seed);
    write_embeddings(&dir.join("embeddings").join(&tag), &run.dumps, run.fit)?;

    for (kind, outcome) in &run.outcomes {
        let DetectorOutcome::Scored(scored) = outcome else {
            let path = dir.join("scores").join(format!("{tag}_{kind}.tsv"));
            write_text(&path, &format!("{}\n", crate::detectors::SCORE_HEADER))?;
            continue;
        };
        let rows: Vec<ScoreRow> = scored.rows();
        crate::detectors::write_scores(dir.join("scores").join(format!("{tag}_{kind}.tsv")), &rows)?;
        let mut s = String::from("bin_lo\tbin_hi\tsplit\tcount\n");
        for (lo, hi, split, count) in density_table(scored, 30) {
            let _ = writeln!(s, "{lo}\t{hi}\t{split}\t{count}");
        }
        write_text(&dir.join("density").join(format!("{tag}_{kind}.tsv")), &s)?;
    }
    Ok(())
}

impl ProtocolResult {
    /// Writes the report, per-cell score tables, density tables, training
    /// curves and EDF1 embedding exports (with a manifest per setting).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["scores", "density", "curves", "embeddings"] {
            create_dir(&dir.join(sub))?;
        }
        self.report.write(dir)?;
        for seed in &self.seeds {
            write_setting(dir, &seed.zero_grad)?;
            write_setting(dir, &seed.fine_tuned)?;
            write_curves(&dir.join("curves").join(format!("seed{}.tsv", seed.seed)), &seed.curves)?;
        }
        Ok(())
    }
}

/// One per-epoch value of a paired generative/discriminative comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedPoint {
    pub seed: u64,
    pub mode: TuningMode,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

/// Trains both objectives from the same base model on the same data with the
/// same seed, recording per-epoch validation accuracy and distance-detector
/// AUROC for each.
pub fn compare_tuning_modes(cfg: &RunConfig) -> Result<Vec<PairedPoint>> {
    cfg.validate()?;
    let params = DetectorParams {
        msp_mode: cfg.msp_mode,
        shrinkage: cfg.shrinkage,
    };
    let base = base_model(cfg)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let SeedData {
            task,
            train: train_set,
            val: val_set,
            ..
        } = SeedData::new(cfg, seed)?;
        for mode in [TuningMode::Generative, TuningMode::Discriminative] {
            let mut model = base.clone();
            let tcfg = TrainConfig {
                seed,
                mode,
                ..cfg.train.clone()
            };
            let mut hook = |epoch: usize, m: &ToyLm| {
                epoch_ood_curves(epoch, m, &task, &train_set, &val_set, cfg.fine_tuned_fit, &params)
            };
            let outcome = train(&mut model, &train_set, &val_set, &task.class_names, &tcfg, &mut hook)?;
            out.extend(outcome.curves.into_iter().map(|c| PairedPoint {
                seed,
                mode,
                epoch: c.epoch,
                metric: format!("{}_{}", c.split, c.metric),
                value: c.value,
            }));
        }
    }
    Ok(out)
}

pub fn write_paired(path: &Path, points: &[PairedPoint]) -> Result<()> {
    let mut s = String::from("seed\tmode\tepoch\tmetric\tvalue\n");
    for p in points {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", p.seed, p.mode, p.epoch, p.metric, p.value);
    }
    write_text(path, &s)
}
