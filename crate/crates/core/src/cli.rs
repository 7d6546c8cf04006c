//! Command-line entry point: `gen`, `train-ste`, `train-coarse`,
//! `train-fine`, `eval`, `query` and `report`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset::{build_dataset, export_dataset, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::fine::{localize_batch, Candidate};
use crate::retrieval::{
    emit_report, evaluate, robustness_sweep, DescriptorIndex, Evaluation, MetricRow, MetricsTable, Pipeline,
    ReportFormat, WorldIndex,
};
use crate::scenegen::{Palette, PerturbMode};
use crate::text_encoder::{grammar_sentences, FeatureCache};
use crate::training::{
    mean_teacher_cosine, new_text_encoder, train_coarse, train_fine, train_ste_stage1, Phase, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const THREADS_ENV: &str = "DESPOS_THREADS";

const COARSE_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Parser)]
#[command(name = "despos", version, about = "Text-to-point-cloud localization on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world, its submaps and text queries.
    Gen(GenArgs),
    /// Distill the text prior head against the teacher.
    TrainSte(TrainArgs),
    /// Train the point-cloud encoder and alignment head contrastively.
    TrainCoarse(TrainArgs),
    /// Train the fine localizer on frozen encoders.
    TrainFine(TrainArgs),
    /// Retrieval and localization recall on the held-out queries.
    Eval(EvalArgs),
    /// Localize one free-text description.
    Query(QueryArgs),
    /// Re-render a CSV report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// `key = value` file with seed, extent, instances, queries, test_queries, hints.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    extent: Option<Vec<f64>>,
    #[arg(long)]
    instances: Option<usize>,
    /// Training queries.
    #[arg(long)]
    queries: Option<usize>,
    /// Held-out queries, generated after the training ones.
    #[arg(long)]
    test_queries: Option<usize>,
    #[arg(long)]
    hints: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; required for the coarse and fine phases.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt_coarse: PathBuf,
    #[arg(long)]
    ckpt_fine: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    topk: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    thresholds: Vec<f64>,
    /// Also evaluate save75, save50 and swap_one perturbations.
    #[arg(long)]
    robustness: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    ckpt_coarse: PathBuf,
    #[arg(long)]
    ckpt_fine: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Hints separated by `;`.
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 5)]
    topk: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// CSV written by `eval`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Written as `<out>.run.json` next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

pub fn run_manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    if s.to_string_lossy().ends_with('/') {
        s = PathBuf::from(s).components().as_path().as_os_str().to_owned();
    }
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    let path = run_manifest_path(out);
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other),
        }
    }
}

/// Runs one command line (`argv[0]` is the program name) and returns the
/// process exit code: 0 success, 1 usage, 2 data or invariant error,
/// 3 internal error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(code)) => code,
        Ok(Err(Failure::Usage(msg))) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Ok(Err(Failure::Run(e))) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(_) => EXIT_INTERNAL,
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<i32, Failure> {
    let start = Instant::now();
    match cli.command {
        Command::Gen(a) => cmd_gen(a, start),
        Command::TrainSte(a) => cmd_train(a, Phase::Ste1, start),
        Command::TrainCoarse(a) => cmd_train(a, Phase::Coarse, start),
        Command::TrainFine(a) => cmd_train(a, Phase::Fine, start),
        Command::Eval(a) => cmd_eval(a, start),
        Command::Query(a) => cmd_query(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Generator parameters; `key = value` files use the field names, with
/// `extent = W H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub extent: [f64; 2],
    pub instances: usize,
    pub queries: usize,
    pub test_queries: usize,
    pub hints: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: [60.0, 60.0],
            instances: 40,
            queries: 200,
            test_queries: 50,
            hints: 6,
        }
    }
}

impl GenConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("line {}: {what}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let v = v.trim();
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad(&format!("{v:?} is not a count")));
            match k.trim() {
                "seed" => cfg.seed = v.parse().map_err(|_| bad(&format!("{v:?} is not a seed")))?,
                "extent" => {
                    let parts: Vec<f64> = v
                        .split_whitespace()
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("extent needs two numbers"))?;
                    if parts.len() != 2 {
                        return Err(bad("extent needs two numbers"));
                    }
                    cfg.extent = [parts[0], parts[1]];
                }
                "instances" => cfg.instances = int(v)?,
                "queries" => cfg.queries = int(v)?,
                "test_queries" => cfg.test_queries = int(v)?,
                "hints" => cfg.hints = int(v)?,
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }
}

fn cmd_gen(a: GenArgs, start: Instant) -> std::result::Result<i32, Failure> {
    let mut cfg = match &a.config {
        Some(p) => GenConfig::parse(&read_text(p)?)?,
        None => GenConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = &a.extent {
        cfg.extent = [e[0], e[1]];
    }
    if let Some(n) = a.instances {
        cfg.instances = n;
    }
    if let Some(n) = a.queries {
        cfg.queries = n;
    }
    if let Some(n) = a.test_queries {
        cfg.test_queries = n;
    }
    if let Some(n) = a.hints {
        cfg.hints = n;
    }
    let palette = Palette::default();
    let ds = build_dataset(cfg.seed, cfg.extent, cfg.instances, cfg.queries, cfg.test_queries, cfg.hints, &palette)?;
    export_dataset(&ds, &a.out)?;
    log::info!(
        "wrote {} submaps, {} train and {} test queries to {}",
        ds.world.submaps.len(),
        ds.train().len(),
        ds.test().len(),
        a.out.display()
    );
    write_manifest(
        &a.out,
        &RunManifest {
            command: "gen".into(),
            config: serde_json::to_value(&cfg).expect("serializes"),
            seeds: BTreeMap::from([("world".into(), cfg.seed), ("queries".into(), ds.manifest.query_seed)]),
            inputs: a.config.into_iter().collect(),
            outputs: vec![a.out.clone()],
            version: env!("CARGO_PKG_VERSION").into(),
            duration_s: start.elapsed().as_secs_f64(),
            summary: None,
        },
    )?;
    Ok(EXIT_OK)
}

fn load_train_config(a: &TrainArgs, phase: Phase) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&read_text(p)?, phase)?,
        None => TrainConfig::for_phase(phase),
    };
    if cfg.phase != phase {
        return Err(Error::Config(format!("config is for phase {}, command trains {phase}", cfg.phase)));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, phase: Phase, start: Instant) -> std::result::Result<i32, Failure> {
    let cfg = load_train_config(&a, phase)?;
    if a.resume.as_deref() == Some(a.out.as_path()) {
        return Err(Failure::Usage("--out must differ from --resume".into()));
    }
    if phase != Phase::Ste1 && a.resume.is_none() {
        return Err(Failure::Usage(format!("train-{phase} needs --resume with the previous phase's checkpoint")));
    }
    let dataset = load_dataset(&a.data)?;
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut summary = serde_json::Map::new();
    let ckpt = match phase {
        Phase::Ste1 => {
            let text = match resumed {
                Some(c) => c.text,
                None => new_text_encoder(&cfg, &dataset.manifest.palette),
            };
            let teacher = text.default_teacher();
            let sentences = grammar_sentences(&dataset.manifest.palette);
            let mut out = train_ste_stage1(&cfg, text, &sentences, &teacher)?;
            let cos = mean_teacher_cosine(&out.text, &sentences, &teacher);
            log::info!("mean teacher cosine {cos:.6}");
            summary.insert("mean_teacher_cosine".into(), json!(cos));
            out.history.retain(|h| h.phase == Phase::Ste1);
            out
        }
        Phase::Coarse | Phase::Fine => {
            let input = resumed.ok_or_else(|| {
                Failure::Usage(format!("train-{phase} needs --resume with the previous phase's checkpoint"))
            })?;
            if phase == Phase::Coarse {
                train_coarse(&cfg, &dataset, input)?
            } else {
                train_fine(&cfg, &dataset, input)?
            }
        }
    };
    if let Some(h) = ckpt.history.last() {
        summary.insert("final_loss".into(), json!(h.losses.last()));
        summary.insert("flagged".into(), json!(h.flagged));
    }
    ckpt.save(&a.out)?;
    log::info!("saved {phase} checkpoint to {}", a.out.display());
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.clone());
    inputs.extend(a.resume.clone());
    write_manifest(
        &a.out,
        &RunManifest {
            command: format!("train-{}", if phase == Phase::Ste1 { "ste" } else { phase.as_str() }),
            config: serde_json::to_value(&cfg).expect("serializes"),
            seeds: BTreeMap::from([("train".into(), cfg.seed), ("dataset".into(), dataset.manifest.seed)]),
            inputs,
            outputs: vec![a.out.clone()],
            version: env!("CARGO_PKG_VERSION").into(),
            duration_s: start.elapsed().as_secs_f64(),
            summary: Some(summary.into()),
        },
    )?;
    Ok(EXIT_OK)
}

fn check_lists(topk: &[usize], thresholds: &[f64]) -> std::result::Result<(), Failure> {
    if topk.is_empty() || topk.contains(&0) {
        return Err(Failure::Usage("--topk needs positive values".into()));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Failure::Usage("--thresholds needs positive values".into()));
    }
    Ok(())
}

fn sorted<T: PartialOrd + Copy>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v.dedup();
    v
}

fn load_models(coarse: &Path, fine: &Path) -> Result<(Checkpoint, Checkpoint)> {
    Ok((Checkpoint::load(coarse)?, Checkpoint::load(fine)?))
}

fn eval_summary(e: &Evaluation) -> serde_json::Value {
    json!({
        "correct_top1": e.correct_top1,
        "fine_error_on_correct_m": e.fine_error_on_correct,
        "center_error_on_correct_m": e.center_error_on_correct,
    })
}

fn cmd_eval(a: EvalArgs, start: Instant) -> std::result::Result<i32, Failure> {
    check_lists(&a.topk, &a.thresholds)?;
    let topk = sorted(&a.topk);
    let thresholds = sorted(&a.thresholds);
    let (coarse, fine) = load_models(&a.ckpt_coarse, &a.ckpt_fine)?;
    let pipeline = Pipeline::from_checkpoints(&coarse, &fine)?;
    let dataset = load_dataset(&a.data)?;
    let world = WorldIndex::build(&pipeline, &dataset)?;
    let queries = dataset.test();
    if queries.is_empty() {
        return Err(Failure::Run(Error::Invalid("dataset has no held-out queries".into())));
    }
    let seed = a.seed.unwrap_or(dataset.manifest.query_seed);
    let runs: Vec<(String, Evaluation)> = if a.robustness {
        robustness_sweep(&pipeline, &dataset, &world, queries, &PerturbMode::ALL, &COARSE_KS, &topk, &thresholds, seed)?
            .into_iter()
            .map(|(m, e)| (m.as_str().to_string(), e))
            .collect()
    } else {
        vec![(
            "test".to_string(),
            evaluate(&pipeline, &dataset, &world, queries, &COARSE_KS, &topk, &thresholds, "test")?,
        )]
    };
    let mut tables = Vec::new();
    let mut summary = serde_json::Map::new();
    for (label, e) in &runs {
        log::info!(
            "{label}: coarse R@1 {:.3}, fine error {:.3} m vs center {:.3} m on {} correct",
            e.coarse.recall(1, None).unwrap_or(0.0),
            e.fine_error_on_correct,
            e.center_error_on_correct,
            e.correct_top1
        );
        summary.insert(label.clone(), eval_summary(e));
        tables.push(e.coarse.clone());
        tables.push(e.localization.clone());
    }
    let report = emit_report(&tables, ReportFormat::for_path(&a.out));
    fs::write(&a.out, report).map_err(|e| Error::io(&a.out, e))?;
    let violations: Vec<String> = tables
        .iter()
        .filter_map(|t| t.check_monotone().err().map(|e| e.to_string()))
        .collect();
    for v in &violations {
        log::error!("{v}");
    }
    write_manifest(
        &a.out,
        &RunManifest {
            command: "eval".into(),
            config: json!({
                "topk": topk,
                "thresholds": thresholds,
                "coarse_ks": COARSE_KS,
                "robustness": a.robustness,
            }),
            seeds: BTreeMap::from([("perturbation".into(), seed)]),
            inputs: vec![a.ckpt_coarse.clone(), a.ckpt_fine.clone(), a.data.clone()],
            outputs: vec![a.out.clone()],
            version: env!("CARGO_PKG_VERSION").into(),
            duration_s: start.elapsed().as_secs_f64(),
            summary: Some(summary.into()),
        },
    )?;
    Ok(if violations.is_empty() { EXIT_OK } else { EXIT_DATA })
}

/// Splits `a; b; c` into hint sentences, adding a final period where
/// missing.
pub fn split_hints(text: &str) -> Vec<String> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| if s.ends_with('.') { s.to_string() } else { format!("{s}.") })
        .collect()
}

fn cmd_query(a: QueryArgs) -> std::result::Result<i32, Failure> {
    if a.topk == 0 {
        return Err(Failure::Usage("--topk must be positive".into()));
    }
    let hints = split_hints(&a.text);
    if hints.is_empty() {
        return Err(Failure::Usage("--text has no hints".into()));
    }
    let (coarse, fine) = load_models(&a.ckpt_coarse, &a.ckpt_fine)?;
    let pipeline = Pipeline::from_checkpoints(&coarse, &fine)?;
    let dataset = load_dataset(&a.data)?;
    let lines = query_lines(&pipeline, &dataset, &hints, a.topk)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for l in lines {
        writeln!(out, "{l}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(EXIT_OK)
}

/// Tab-separated `rank, submap_id, x, y, similarity` lines for one query.
pub fn query_lines(pipeline: &Pipeline, dataset: &Dataset, hints: &[String], topk: usize) -> Result<Vec<String>> {
    let submaps: Vec<_> = dataset.world.submaps.iter().collect();
    let descriptors: Vec<Vec<f64>> = pipeline.pc.encode_many(&submaps)?.into_iter().map(|d| d.0).collect();
    let index = DescriptorIndex::build(submaps.iter().map(|s| s.id).collect(), &descriptors)?;
    let cache = FeatureCache::build(pipeline.text, hints.iter().map(|s| s.as_str()));
    let desc = pipeline.text.encode_cached(&cache, &[hints])?.remove(0);
    let ranked = index.topk(&desc.0, topk);
    let candidates: Vec<Candidate> = ranked
        .iter()
        .map(|&(id, similarity)| Candidate {
            hints,
            submap: &dataset.world.submaps[id],
            similarity,
        })
        .collect();
    let chosen: Vec<_> = ranked.iter().map(|&(id, _)| &dataset.world.submaps[id]).collect();
    let rows = crate::fine::instance_features(pipeline.pc, &chosen)?;
    let by_id: BTreeMap<usize, usize> = ranked.iter().enumerate().map(|(i, &(id, _))| (id, i)).collect();
    let lookup = |id: usize| rows[by_id[&id]].clone();
    let preds = localize_batch(pipeline.fine, &cache, &lookup, &candidates)?;
    Ok(preds
        .iter()
        .enumerate()
        .map(|(r, p)| {
            format!(
                "{}\t{}\t{:.3}\t{:.3}\t{:.6}",
                r + 1,
                p.submap_id,
                p.position[0],
                p.position[1],
                p.similarity
            )
        })
        .collect())
}

/// Reads back a CSV written by [`emit_report`].
pub fn parse_csv_report(text: &str, path: &Path) -> Result<Vec<MetricsTable>> {
    let err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines();
    match lines.next() {
        Some("table,k,threshold_m,recall,n") => {}
        _ => return Err(err(1, "expected header table,k,threshold_m,recall,n".into())),
    }
    let mut tables: Vec<MetricsTable> = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(n, format!("expected 5 fields, found {}", f.len())));
        }
        let row = MetricRow {
            k: f[1].parse().map_err(|_| err(n, format!("bad k {:?}", f[1])))?,
            threshold_m: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| err(n, format!("bad threshold {:?}", f[2])))?)
            },
            recall: f[3].parse().map_err(|_| err(n, format!("bad recall {:?}", f[3])))?,
            n: f[4].parse().map_err(|_| err(n, format!("bad count {:?}", f[4])))?,
        };
        match tables.last_mut() {
            Some(t) if t.name == f[0] => t.rows.push(row),
            _ => tables.push(MetricsTable {
                name: f[0].to_string(),
                rows: vec![row],
            }),
        }
    }
    Ok(tables)
}

fn cmd_report(a: ReportArgs) -> std::result::Result<i32, Failure> {
    let format: ReportFormat = a.format.parse()?;
    let tables = parse_csv_report(&read_text(&a.input)?, &a.input)?;
    let text = emit_report(&tables, format);
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    let bad = tables.iter().any(|t| t.check_monotone().is_err());
    Ok(if bad { EXIT_DATA } else { EXIT_OK })
}
