use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ohd_core::corpus::{
    load_annotations, load_benchmark, persist_benchmark, save_annotations, write_atomic, AnnotationFormat,
    BenchmarkSample, BenchmarkSet, ImageIndex, ImageRecord,
};
use ohd_core::countergen::{
    generate_benchmark, BuildOptions, CorpusStats, GenerationOptions, LlmClient, Provenance as Origin, RetryPolicy,
};
use ohd_core::encoder::{DualEncoder, ToyEncoderParams};
use ohd_core::evalhall::{
    benchmark_accuracy, build_pope_questions, chair, gold_sets, load_captions, pope_metrics, CoverFormula,
    EncoderScorer, Lexicon, PopeLabel, PopeQuestion, PopeSampler, PrecomputedScores, RandomScorer, SelectionReport,
};
use ohd_core::hashing::{derive_seed, fingerprint};
use ohd_core::objective::{data_volume_sweep, train, LossConfig, SweepPoint};
use ohd_core::report::{render_plotdata, sweep_series, ReportFormat, ResultTable};
use ohd_core::synth::{synthetic_corpus, SynthConfig};
use ohd_core::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::config::{config_hash, EncoderMode, FileConfig, LlmMode};
use crate::http::HttpLlmClient;
use crate::output::{provenance, with_suffix, write_json, write_jsonl, write_sidecar};
use crate::{
    BuildArgs, ChairArgs, Cli, Command, EvalArgs, EvalEncoder, LossFlags, MetricsCommand, PopeArgs,
    PopeQuestionsArgs, ReportArgs, SelectArgs, SweepArgs, SynthArgs, TrainArgs,
};

/// Seed and worker count resolved from flags over the config file.
struct Ctx {
    /// Seed given by flag or config top level, if any.
    explicit_seed: Option<u64>,
    jobs: usize,
    file: FileConfig,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.explicit_seed.unwrap_or(0)
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        explicit_seed: cli.common.seed.or(file.seed),
        jobs: cli.common.jobs.or(file.jobs).unwrap_or(1).max(1),
        file,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Build(a) => build(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Metrics(MetricsCommand::Chair(a)) => metrics_chair(&ctx, a),
        Command::Metrics(MetricsCommand::Pope(a)) => metrics_pope(&ctx, a),
        Command::Metrics(MetricsCommand::PopeQuestions(a)) => pope_questions(&ctx, a),
        Command::Metrics(MetricsCommand::Select(a)) => metrics_select(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "benchmark".into())
}

// ---------------------------------------------------------------------------
// synth, build

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    if a.images == 0 {
        return Err(invalid("--images must be positive"));
    }
    if !(0.0..=1.0).contains(&a.sparse_fraction) {
        return Err(invalid(format!("--sparse-fraction must be in [0, 1], got {}", a.sparse_fraction)));
    }
    let cfg = SynthConfig {
        images: a.images,
        seed: ctx.seed(),
        sparse_fraction: a.sparse_fraction,
        id_prefix: a.id_prefix.clone(),
        ..SynthConfig::default()
    };
    let records = synthetic_corpus(&cfg);
    let hash = config_hash(
        "synth",
        &json!({ "images": a.images, "sparse_fraction": a.sparse_fraction, "id_prefix": a.id_prefix }),
    );
    save_annotations(&records, &a.out)?;
    write_sidecar(&a.out, &provenance(ctx.seed(), &hash), "annotations")?;
    eprintln!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn build(ctx: &Ctx, a: BuildArgs) -> Result<()> {
    let records = load_annotations(&a.annotations, AnnotationFormat::Jsonl)?;
    if records.is_empty() {
        return Err(invalid(format!("{} has no records", a.annotations.display())));
    }
    let mode = a.llm.or(ctx.file.llm_mode).unwrap_or_default();
    let llm_cfg = ctx.file.llm.clone().unwrap_or_default();
    let client = match mode {
        LlmMode::Api => Some(HttpLlmClient::from_env(&llm_cfg)?),
        LlmMode::Template => None,
    };
    let name = a.name.clone().unwrap_or_else(|| stem(&a.annotations));
    let settings = json!({
        "name": name,
        "caption_index": a.caption_index,
        "skip_failures": a.skip_failures,
        "allow_fallback": !a.no_fallback,
        "llm_mode": mode,
        "llm": if mode == LlmMode::Api { serde_json::to_value(&llm_cfg).expect("llm config serializes") } else { json!(null) },
    });
    let opts = BuildOptions {
        name,
        source_corpus: a.annotations.display().to_string(),
        seed: ctx.seed(),
        caption_index: a.caption_index,
        skip_failures: a.skip_failures,
        jobs: ctx.jobs,
        config_hash: Some(config_hash("build", &settings)),
        generation: GenerationOptions {
            retry: RetryPolicy {
                max_retries: llm_cfg.max_retries,
                ..RetryPolicy::default()
            },
            allow_fallback: !a.no_fallback,
        },
    };
    let stats = CorpusStats::from_records(&records);
    let outcome = generate_benchmark(&records, &stats, client.as_ref().map(|c| c as &dyn LlmClient), &opts)?;
    for (id, e) in &outcome.skipped {
        eprintln!("skipped {id}: {e}");
    }
    persist_benchmark(&outcome.set, &a.out)?;
    let from_llm = outcome
        .set
        .samples
        .iter()
        .flat_map(|s| &s.negatives)
        .filter(|n| n.provenance == Origin::Llm)
        .count();
    eprintln!(
        "wrote {} samples to {} ({} negatives from the model, {} skipped images)",
        outcome.set.samples.len(),
        a.out.display(),
        from_llm,
        outcome.skipped.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train, sweep

/// Path of the annotation file behind `bench`: the flag, else the recorded
/// source corpus, tried as given and then next to the benchmark file.
fn resolve_annotations(bench: &BenchmarkSet, bench_path: &Path, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_owned());
    }
    if bench.source_corpus.is_empty() {
        return Err(invalid(format!(
            "{} names no source corpus; pass --annotations",
            bench_path.display()
        )));
    }
    let direct = PathBuf::from(&bench.source_corpus);
    if direct.exists() {
        return Ok(direct);
    }
    if let Some(beside) = bench_path.parent().map(|d| d.join(&direct)).filter(|p| p.exists()) {
        return Ok(beside);
    }
    Err(invalid(format!(
        "source corpus {} of {} not found; pass --annotations",
        bench.source_corpus,
        bench_path.display()
    )))
}

/// Records from every distinct file; the first record of an id wins.
fn load_records(paths: &[PathBuf]) -> Result<Vec<ImageRecord>> {
    let mut seen_paths = HashSet::new();
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for p in paths {
        if !seen_paths.insert(p.clone()) {
            continue;
        }
        for r in load_annotations(p, AnnotationFormat::Jsonl)? {
            if ids.insert(r.image_id.clone()) {
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Toy defaults, then the config's `[loss]`, then flags, then the run seed.
fn resolve_loss(ctx: &Ctx, flags: &LossFlags) -> Result<LossConfig> {
    if ctx.file.encoder_mode == Some(EncoderMode::Adapter) {
        return Err(invalid(
            "the command line trains only the toy encoder; fine-tune adapters through the library",
        ));
    }
    let mut cfg = flags.apply(ctx.file.loss_over(LossConfig::toy())?)?;
    if let Some(seed) = ctx.explicit_seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn fresh_encoder(ctx: &Ctx, flags: &LossFlags, seed: u64) -> Result<(ToyEncoderParams, serde_json::Value)> {
    let shape = flags.shape(ctx.file.toy.unwrap_or_default());
    let enc = ToyEncoderParams::random(shape.vocab_hash_size, shape.embed_dim, shape.init_std, derive_seed(seed, &[1]))?;
    Ok((enc, serde_json::to_value(shape).expect("shape serializes")))
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let cfg = resolve_loss(ctx, &a.loss)?;
    let bench = load_benchmark(&a.benchmark)?;
    let dev = a.dev.as_deref().map(load_benchmark).transpose()?;
    let mut paths = vec![resolve_annotations(&bench, &a.benchmark, a.annotations.as_deref())?];
    if let (Some(d), Some(p)) = (&dev, &a.dev) {
        paths.push(resolve_annotations(d, p, a.annotations.as_deref())?);
    }
    let records = load_records(&paths)?;
    let index = ImageIndex::new(&records);

    let (mut enc, init) = match &a.init {
        Some(p) => {
            let bytes = read_bytes(p)?;
            (ToyEncoderParams::from_bytes(&bytes)?, json!({ "checkpoint": fingerprint(&bytes) }))
        }
        None => fresh_encoder(ctx, &a.loss, cfg.seed)?,
    };
    let hash = config_hash("train", &json!({ "loss": cfg, "init": init, "dev": a.dev.is_some() }));
    let log = train(&mut enc, &bench.samples, &index, &cfg, dev.as_ref().map(|d| d.samples.as_slice()), None)?;
    for e in &log.epochs {
        let dev = e.selection_accuracy_dev.map(|v| format!(" dev {:.1}%", 100.0 * v)).unwrap_or_default();
        eprintln!("epoch {:>3}  steps {:>5}  total {:.4}{dev}", e.epoch, e.steps, e.total);
    }
    let prov = provenance(cfg.seed, &hash);
    enc.save(&a.out)?;
    write_sidecar(&a.out, &prov, "toy_checkpoint")?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.jsonl"));
    write_jsonl(&log_path, &prov, &log.epochs)?;
    eprintln!("wrote {} after {} steps; loss log {}", a.out.display(), log.steps(), log_path.display());
    Ok(())
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let cfg = resolve_loss(ctx, &a.loss)?;
    if a.fractions.is_empty() || a.seeds.is_empty() {
        return Err(invalid("--fractions and --seeds must be nonempty"));
    }
    let bench = load_benchmark(&a.benchmark)?;
    let dev = load_benchmark(&a.dev)?;
    let paths = [
        resolve_annotations(&bench, &a.benchmark, a.annotations.as_deref())?,
        resolve_annotations(&dev, &a.dev, a.annotations.as_deref())?,
    ];
    let records = load_records(&paths)?;
    let index = ImageIndex::new(&records);
    let (init, shape) = fresh_encoder(ctx, &a.loss, cfg.seed)?;
    let points = data_volume_sweep(&init, &bench.samples, &dev.samples, &index, &a.fractions, &a.seeds, &cfg)?;
    for (x, y) in sweep_series(&a.label, &points).points {
        eprintln!("fraction {x:>6}  mean dev accuracy {:.1}%", 100.0 * y);
    }
    let hash = config_hash(
        "sweep",
        &json!({ "loss": cfg, "init": shape, "fractions": a.fractions, "seeds": a.seeds, "label": a.label }),
    );
    write_json(&a.out, &provenance(cfg.seed, &hash), json!({ "label": a.label, "points": points }))
}

// ---------------------------------------------------------------------------
// eval, metrics

/// Score disjoint chunks of `samples` on `jobs` threads and merge.
fn encoder_accuracy<E: DualEncoder + Sync>(
    samples: &[BenchmarkSample],
    index: &ImageIndex<'_>,
    encoder: &E,
    jobs: usize,
) -> Result<SelectionReport> {
    if jobs <= 1 || samples.len() < 2 {
        return benchmark_accuracy(samples, Some(index), &mut EncoderScorer(encoder));
    }
    let chunk = samples.len().div_ceil(jobs);
    let parts: Vec<Result<SelectionReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| s.spawn(move || benchmark_accuracy(c, Some(index), &mut EncoderScorer(encoder))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SelectionReport::merge(&parts))
}

fn print_selection(model: &str, dataset: &str, r: &SelectionReport) {
    eprintln!("{model} on {dataset}: {:.1}% ({} of {}, {} ties)", 100.0 * r.accuracy, r.wins, r.n, r.ties);
    for (kind, count) in &r.confusion {
        eprintln!("  lost to {:<20} {count:>6}", kind.to_string());
    }
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let bench = load_benchmark(&a.benchmark)?;
    let encoder = a.encoder.unwrap_or(match ctx.file.encoder_mode {
        Some(EncoderMode::Adapter) => EvalEncoder::Adapter,
        _ => EvalEncoder::Toy,
    });
    let (report, settings, default_model) = match encoder {
        EvalEncoder::Toy => {
            let path = a.params.as_ref().ok_or_else(|| invalid("--encoder toy needs --params"))?;
            let bytes = read_bytes(path)?;
            let enc = ToyEncoderParams::from_bytes(&bytes)?;
            let records = load_records(&[resolve_annotations(&bench, &a.benchmark, a.annotations.as_deref())?])?;
            let index = ImageIndex::new(&records);
            let report = encoder_accuracy(&bench.samples, &index, &enc, ctx.jobs)?;
            (report, json!({ "encoder": "toy", "params": fingerprint(&bytes) }), "toy")
        }
        EvalEncoder::Adapter => {
            let path = a.scores.as_ref().ok_or_else(|| invalid("--encoder adapter needs --scores"))?;
            let mut scores = PrecomputedScores::load(path)?;
            let report = benchmark_accuracy(&bench.samples, None, &mut scores)?;
            (report, json!({ "encoder": "adapter", "scores": fingerprint(&read_bytes(path)?) }), "adapter")
        }
        EvalEncoder::Random => {
            let report = benchmark_accuracy(&bench.samples, None, &mut RandomScorer::new(ctx.seed()))?;
            (report, json!({ "encoder": "random" }), "random")
        }
    };
    let model = a.model.clone().unwrap_or_else(|| default_model.to_owned());
    let dataset = a.dataset.clone().unwrap_or_else(|| bench.name.clone());
    let hash = config_hash("eval", &json!({ "scorer": settings, "model": model, "dataset": dataset }));
    let out = a.out.clone().unwrap_or_else(|| a.benchmark.with_extension("eval.json"));
    write_json(
        &out,
        &provenance(ctx.seed(), &hash),
        json!({ "model": model, "dataset": dataset, "report": report }),
    )?;
    print_selection(&model, &dataset, &report);
    Ok(())
}

fn metrics_chair(ctx: &Ctx, a: ChairArgs) -> Result<()> {
    let formula: CoverFormula = a.cover_formula.parse()?;
    let captions = load_captions(&a.captions)?;
    let gold = gold_sets(&load_annotations(&a.gold, AnnotationFormat::Jsonl)?);
    let (lexicon, lexicon_id) = match &a.lexicon {
        Some(p) => (Lexicon::load(p)?, fingerprint(&read_bytes(p)?)),
        None => (Lexicon::bundled(), "bundled".to_owned()),
    };
    let report = chair(&captions, &gold, &lexicon, formula)?;
    let hash = config_hash("metrics chair", &json!({ "formula": formula, "lexicon": lexicon_id }));
    write_json(
        &a.out,
        &provenance(ctx.seed(), &hash),
        json!({ "formula": formula, "report": report }),
    )?;
    eprintln!(
        "CHAIR_S {:.4}  CHAIR_I {:.4}  Cover {:.4}  ({} captions)",
        report.c_s, report.c_i, report.cover, report.total_captions
    );
    Ok(())
}

#[derive(Deserialize)]
struct QuestionsFile {
    questions: Vec<PopeQuestion>,
}

fn metrics_pope(ctx: &Ctx, a: PopeArgs) -> Result<()> {
    let questions: QuestionsFile = read_json(&a.questions)?;
    let mut answers = Vec::new();
    for (i, line) in read_text(&a.answers)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        answers.push(line.parse::<PopeLabel>().map_err(|e| Error::Parse {
            path: a.answers.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    let report = pope_metrics(&questions.questions, &answers)?;
    let hash = config_hash("metrics pope", &json!({}));
    write_json(&a.out, &provenance(ctx.seed(), &hash), json!({ "report": report }))?;
    eprintln!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}  yes {:.4}",
        report.accuracy, report.precision, report.recall, report.f1, report.yes_ratio
    );
    Ok(())
}

fn pope_questions(ctx: &Ctx, a: PopeQuestionsArgs) -> Result<()> {
    let sampler: PopeSampler = a.sampler.parse()?;
    let records = load_annotations(&a.annotations, AnnotationFormat::Jsonl)?;
    let stats = CorpusStats::from_records(&records);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    let set = build_pope_questions(&records, a.per_image, sampler, &stats.freq, &stats.cooc, &mut rng)?;
    eprintln!("{} questions, {} images skipped", set.questions.len(), set.skipped);
    let hash = config_hash("metrics pope-questions", &json!({ "sampler": sampler, "per_image": a.per_image }));
    write_json(
        &a.out,
        &provenance(ctx.seed(), &hash),
        json!({ "sampler": sampler, "per_image": a.per_image, "skipped": set.skipped, "questions": set.questions }),
    )
}

fn metrics_select(ctx: &Ctx, a: SelectArgs) -> Result<()> {
    let bench = load_benchmark(&a.benchmark)?;
    let mut scores = PrecomputedScores::load(&a.scores)?;
    let report = benchmark_accuracy(&bench.samples, None, &mut scores)?;
    let hash = config_hash("metrics select", &json!({}));
    write_json(&a.out, &provenance(ctx.seed(), &hash), json!({ "report": report }))?;
    print_selection("scores", &bench.name, &report);
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Deserialize)]
struct EvalFile {
    model: String,
    dataset: String,
    report: SelectionReport,
}

#[derive(Deserialize)]
struct SweepFile {
    label: String,
    points: Vec<SweepPoint>,
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let prov = provenance(ctx.seed(), &config_hash("report", &json!({ "format": a.format })));
    let text = match format {
        ReportFormat::Table | ReportFormat::Csv => {
            let mut models: Vec<String> = Vec::new();
            let mut datasets: Vec<String> = Vec::new();
            let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
            for path in &a.inputs {
                let f: EvalFile = read_json(path)?;
                for (list, v) in [(&mut models, &f.model), (&mut datasets, &f.dataset)] {
                    if !list.contains(v) {
                        list.push(v.clone());
                    }
                }
                if cells.insert((f.model.clone(), f.dataset.clone()), f.report.accuracy).is_some() {
                    return Err(invalid(format!("two results for {} on {}", f.model, f.dataset)));
                }
            }
            let mut table = ResultTable::new(datasets.clone());
            for m in &models {
                let values = datasets
                    .iter()
                    .map(|d| {
                        cells
                            .get(&(m.clone(), d.clone()))
                            .copied()
                            .ok_or_else(|| invalid(format!("no result for {m} on {d}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                table.push(m.clone(), values)?;
            }
            if format == ReportFormat::Table {
                table.render_table(&prov)
            } else {
                table.to_csv(&prov)?
            }
        }
        ReportFormat::PlotData => {
            let series = a
                .inputs
                .iter()
                .map(|p| read_json::<SweepFile>(p).map(|f| sweep_series(&f.label, &f.points)))
                .collect::<Result<Vec<_>>>()?;
            render_plotdata(&series, &prov)?
        }
    };
    write_atomic(&a.out, text.as_bytes())
}
