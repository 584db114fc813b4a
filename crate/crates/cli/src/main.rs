//! `xfersel`: source-task selection from the command line.
//!
//! Exit codes: 0 success, 2 validation or I/O failure, 3 no compatible source.
//! Failures print a single `ERROR <code>: <detail>` line on stderr.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use xfersel_core::bundle::{load_bundle, load_pool, write_bundle};
use xfersel_core::pipeline::{
    score_pair, select, ComputedScores, Metric, NoMatchPolicy, PooledLabelSim, RoiSimProvider, RoiSimTable,
    ScoreProvider, ScoreTable, SelectionConfig, SelectionPath,
};
use xfersel_core::ranking::{
    csv_headers, footrule_full, footrule_topk, read_keyed_csv, read_ranking_csv, read_scores_csv, write_ranking_csv,
};
use xfersel_core::synth::{evaluate_family, generate_tasks, EvalSettings, SynthSpec};
use xfersel_core::{
    roi_sim, CostNormalization, Error, HScoreParams, PairingMode, Result, RoiSimOptions, SinkhornParams,
    SubsampleSpec, TaskBundle, TaskDescriptor,
};

#[derive(Parser, Debug)]
#[command(name = "xfersel", version, about = "Select source tasks for segmentation transfer learning")]
struct Cli {
    /// Seed for every random choice (pixel subsamples, mask pairs, synthetic data).
    #[arg(long, global = true, env = "XFERSEL_SEED", default_value_t = 42)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the command output here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// RoI shape similarity between the label sets of two bundles.
    RoiSim(RoiSimArgs),
    /// Transferability score of one source bundle for one target bundle.
    Score(ScoreArgs),
    /// Rank a pool of sources for a target, with or without prior-knowledge filters.
    Select(SelectArgs),
    /// Spearman's footrule between two ranking CSV files.
    Footrule(FootruleArgs),
    /// Generate a synthetic task family as bundle directories.
    Synth(SynthArgs),
    /// Compare metric and linear-probe rankings on a synthetic family.
    SynthEval(SynthEvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Paired,
    Mean,
}

impl From<ModeArg> for PairingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Paired => PairingMode::PairedSample,
            ModeArg::Mean => PairingMode::MeanMask,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Hscore,
    Otce,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Hscore => Metric::HScore,
            MetricArg::Otce => Metric::Otce,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PathArg {
    Guided,
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormalizeArg {
    None,
    Max,
}

#[derive(Args, Debug)]
struct RoiArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Paired)]
    mode: ModeArg,
    /// Cap on mask pairs in paired mode.
    #[arg(long, default_value_t = 256)]
    pairs: usize,
    #[arg(long, default_value_t = 0.01)]
    k1: f64,
    #[arg(long, default_value_t = 0.03)]
    k2: f64,
    /// Dynamic range of the mask values.
    #[arg(long = "dynamic-range", default_value_t = 1.0)]
    dynamic_range: f64,
}

impl RoiArgs {
    fn options(&self, seed: u64) -> RoiSimOptions {
        let mut o = RoiSimOptions {
            mode: self.mode.into(),
            max_pairs: self.pairs,
            seed,
            ..Default::default()
        };
        o.params.k1 = self.k1;
        o.params.k2 = self.k2;
        o.params.dynamic_range = self.dynamic_range;
        o
    }
}

#[derive(Args, Debug)]
struct MetricArgs {
    /// Pixels drawn per task for OTCE.
    #[arg(long = "max-pixels", default_value_t = 4096)]
    max_pixels: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long = "max-iters", default_value_t = 1000)]
    max_iters: usize,
    #[arg(long = "marginal-tol", default_value_t = 1e-9)]
    marginal_tol: f64,
    #[arg(long = "normalize-cost", value_enum, default_value_t = NormalizeArg::None)]
    normalize_cost: NormalizeArg,
    /// Ridge added to the H-score feature covariance.
    #[arg(long, default_value_t = 1e-8)]
    ridge: f64,
}

impl MetricArgs {
    fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams {
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            marginal_tol: self.marginal_tol,
            log_domain: true,
        }
    }

    fn hscore(&self) -> HScoreParams {
        HScoreParams {
            ridge: self.ridge,
            ..Default::default()
        }
    }

    fn normalization(&self) -> CostNormalization {
        match self.normalize_cost {
            NormalizeArg::None => CostNormalization::None,
            NormalizeArg::Max => CostNormalization::Max,
        }
    }
}

#[derive(Args, Debug)]
struct RoiSimArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    roi: RoiArgs,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    params: MetricArgs,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Target bundle directory, or a task name such as ET-22-T2 when scores are injected.
    #[arg(long)]
    target: String,
    /// Directory whose subdirectories are source bundles.
    #[arg(long)]
    sources: Option<PathBuf>,
    #[arg(long, value_enum)]
    path: PathArg,
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long = "top-k", default_value_t = 1)]
    top_k: usize,
    /// Number of RoI classes kept by the RoI filter.
    #[arg(long = "roi-keep", default_value_t = 1)]
    roi_keep: usize,
    /// Keep the whole pool when no source matches the target modality.
    #[arg(long = "fallback-all")]
    fallback_all: bool,
    /// CSV with a task_id column and a column named after the metric (or `score`);
    /// replaces metric computation.
    #[arg(long = "scores-file")]
    scores_file: Option<PathBuf>,
    /// CSV with roi_class,roi_sim columns; replaces RoI-Sim computation.
    #[arg(long = "roi-sim-file")]
    roi_sim_file: Option<PathBuf>,
    /// Directory receiving selection.json and ranking.csv.
    #[arg(long = "out-dir", default_value = ".")]
    out_dir: PathBuf,
    #[command(flatten)]
    params: MetricArgs,
    #[command(flatten)]
    roi: RoiArgs,
}

#[derive(Args, Debug)]
struct FootruleArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Charge only the k best predicted tasks against the full ground truth.
    #[arg(long = "top-k")]
    top_k: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON spec; missing fields take defaults. Without a file the default spec
    /// is used with `--seed`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthEvalArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long = "max-pixels", default_value_t = 512)]
    max_pixels: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-8)]
    ridge: f64,
}

/// Accumulates `name,value` lines (csv) or a JSON object, headed by the config echo.
struct Output {
    format: Format,
    config: Value,
    lines: String,
    json: serde_json::Map<String, Value>,
}

impl Output {
    fn new(format: Format, command: &str, config: Value) -> Self {
        let config = json!({ "command": command, "settings": config });
        Self {
            format,
            config,
            lines: String::new(),
            json: serde_json::Map::new(),
        }
    }

    fn float(&mut self, name: &str, v: f64) {
        let _ = writeln!(self.lines, "{name},{v:.6}");
        self.json.insert(name.into(), json!(v));
    }

    fn int(&mut self, name: &str, v: u64) {
        let _ = writeln!(self.lines, "{name},{v}");
        self.json.insert(name.into(), json!(v));
    }

    fn text(&mut self, name: &str, v: &str) {
        let _ = writeln!(self.lines, "{name},{v}");
        self.json.insert(name.into(), json!(v));
    }

    /// Raw block for csv output; `value` stands in for it in json output.
    fn block(&mut self, csv: &str, name: &str, value: Value) {
        self.lines.push_str(csv);
        self.json.insert(name.into(), value);
    }

    fn render(self) -> String {
        match self.format {
            Format::Csv => format!("# config {}\n{}", self.config, self.lines),
            Format::Json => {
                let mut doc = serde_json::Map::new();
                doc.insert("config".into(), self.config);
                doc.insert("result".into(), Value::Object(self.json));
                let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("json values serialize");
                s.push('\n');
                s
            }
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_roi_sim(cli: &Cli, args: &RoiSimArgs) -> Result<Output> {
    let source = load_bundle(&args.source)?;
    let target = load_bundle(&args.target)?;
    let opts = args.roi.options(cli.seed);
    let rep = roi_sim(&source.labels, &target.labels, &opts)?;
    let mut out = Output::new(
        cli.format,
        "roi-sim",
        json!({
            "seed": cli.seed,
            "source": args.source,
            "target": args.target,
            "options": opts,
        }),
    );
    out.text("source_id", &rep.source_id);
    out.text("target_id", &rep.target_id);
    out.float("roi_sim", rep.score);
    out.int("n_pairs", rep.n_pairs as u64);
    out.float("pair_min", rep.pair_range.0);
    out.float("pair_max", rep.pair_range.1);
    Ok(out)
}

fn cmd_score(cli: &Cli, args: &ScoreArgs) -> Result<Output> {
    let source = load_bundle(&args.source)?;
    let target = load_bundle(&args.target)?;
    let metric: Metric = args.metric.into();
    let sinkhorn = args.params.sinkhorn();
    let hscore = args.params.hscore();
    let sampler = SubsampleSpec::new(args.params.max_pixels, cli.seed);
    let normalization = args.params.normalization();
    let s = score_pair(&source, &target, metric, &hscore, &sinkhorn, normalization, sampler)?;

    let mut out = Output::new(
        cli.format,
        "score",
        json!({
            "seed": cli.seed,
            "metric": metric,
            "source": args.source,
            "target": args.target,
            "hscore": hscore,
            "sinkhorn": sinkhorn,
            "cost_normalization": normalization,
            "sampler": sampler,
        }),
    );
    out.text("source_id", source.task_id());
    out.text("target_id", target.task_id());
    out.float(metric.name(), s.score);
    if let Some(k) = s.skipped_pixels {
        out.int("skipped_pixels", k as u64);
        out.int("n_pixels", (target.labels.height() * target.labels.width()) as u64);
    }
    if let Some(it) = s.iterations_used {
        out.int("iterations_used", it as u64);
    }
    if let Some(e) = s.final_marginal_error {
        out.float("final_marginal_error", e);
    }
    if let Some(c) = s.converged {
        out.text("converged", if c { "true" } else { "false" });
    }
    if let Some(o) = s.target_features {
        out.text("target_features", to_value(&o).as_str().unwrap_or_default());
    }
    Ok(out)
}

fn load_scores(path: &Path, metric: Metric) -> Result<Vec<(String, f64)>> {
    let headers = csv_headers(path)?;
    let column = if headers.iter().any(|h| h.eq_ignore_ascii_case(metric.name())) {
        metric.name()
    } else {
        "score"
    };
    read_scores_csv(path, column)
}

fn cmd_select(cli: &Cli, args: &SelectArgs) -> Result<Output> {
    let metric: Metric = args.metric.into();
    let mut cfg = SelectionConfig::new(
        match args.path {
            PathArg::Guided => SelectionPath::Guided,
            PathArg::Baseline => SelectionPath::Baseline,
        },
        metric,
    );
    cfg.top_k = args.top_k;
    cfg.roi_keep_classes = args.roi_keep;
    cfg.no_modality_match_policy = if args.fallback_all {
        NoMatchPolicy::FallbackAll
    } else {
        NoMatchPolicy::Error
    };
    cfg.hscore = args.params.hscore();
    cfg.sinkhorn = args.params.sinkhorn();
    cfg.cost_normalization = args.params.normalization();
    cfg.sampler = SubsampleSpec::new(args.params.max_pixels, cli.seed);
    cfg.roi = args.roi.options(cli.seed);

    let injected = match &args.scores_file {
        Some(p) => Some(load_scores(p, metric)?),
        None => None,
    };

    let target_path = Path::new(&args.target);
    let target_bundle = if target_path.is_dir() || injected.is_none() {
        Some(load_bundle(target_path)?)
    } else {
        None
    };
    let target: TaskDescriptor = match &target_bundle {
        Some(b) => b.descriptor.clone(),
        None => TaskDescriptor::from_task_name(&args.target, "external")?,
    };

    let bundles: Vec<TaskBundle> = match &args.sources {
        Some(dir) => load_pool(dir)?,
        None => Vec::new(),
    };
    let pool: Vec<TaskDescriptor> = match (&args.sources, &injected) {
        (Some(_), _) => bundles.iter().map(|b| b.descriptor.clone()).collect(),
        (None, Some(rows)) => rows
            .iter()
            .map(|(id, _)| TaskDescriptor::from_task_name(id, "external"))
            .collect::<Result<_>>()?,
        (None, None) => {
            return Err(Error::InvalidParams("--sources is required without --scores-file".into()));
        }
    };

    let table;
    let pooled;
    let roi: &dyn RoiSimProvider = match (&args.roi_sim_file, &target_bundle) {
        (Some(p), _) => {
            table = RoiSimTable(read_keyed_csv(p, "roi_class", "roi_sim")?.into_iter().collect::<BTreeMap<_, _>>());
            &table
        }
        (None, Some(t)) => {
            pooled = PooledLabelSim::new(&bundles, t, cfg.roi);
            &pooled
        }
        (None, None) => {
            table = RoiSimTable::default();
            &table
        }
    };
    let score_table;
    let computed;
    let scores: &dyn ScoreProvider = match (&injected, &target_bundle) {
        (Some(rows), _) => {
            score_table = ScoreTable::from_rows(rows)?;
            &score_table
        }
        (None, Some(t)) => {
            computed = ComputedScores::new(&bundles, t, &cfg);
            &computed
        }
        (None, None) => unreachable!("a target bundle is loaded whenever scores are not injected"),
    };

    let report = select(&pool, &target, &cfg, roi, scores)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::IoFailure {
        path: args.out_dir.clone(),
        source: e,
    })?;
    let mut doc = serde_json::to_string_pretty(&report).expect("report serializes");
    doc.push('\n');
    write_file(&args.out_dir.join("selection.json"), doc.as_bytes())?;
    let mut csv = Vec::new();
    write_ranking_csv(&report.final_ranking, &mut csv).map_err(|e| Error::IoFailure {
        path: args.out_dir.join("ranking.csv"),
        source: e,
    })?;
    write_file(&args.out_dir.join("ranking.csv"), &csv)?;

    let mut out = Output::new(
        cli.format,
        "select",
        json!({
            "seed": cli.seed,
            "target": args.target,
            "sources": args.sources,
            "scores_file": args.scores_file,
            "roi_sim_file": args.roi_sim_file,
            "selection": report.config,
        }),
    );
    out.text("target_id", &report.target_id);
    out.int("subset1_size", report.subset1.len() as u64);
    out.int("subset2_size", report.subset2.len() as u64);
    if report.modality_fallback {
        out.text("warning", "no source matches the target modality; using the whole pool");
    }
    for (class, s) in &report.roi_sim_by_class {
        out.float(&format!("roi_sim.{class}"), *s);
    }
    for (i, id) in report.top_k.iter().enumerate() {
        out.text(&format!("top_{}", i + 1), id);
    }
    Ok(out)
}

fn cmd_footrule(cli: &Cli, args: &FootruleArgs) -> Result<Output> {
    let pred = read_ranking_csv(&args.pred)?;
    let truth = read_ranking_csv(&args.truth)?;
    let rep = match args.top_k {
        Some(k) => footrule_topk(&pred, &truth, k)?,
        None => footrule_full(&pred, &truth)?,
    };
    let mut out = Output::new(
        cli.format,
        "footrule",
        json!({ "pred": args.pred, "truth": args.truth, "top_k": args.top_k }),
    );
    out.int("footrule", rep.distance);
    out.text(
        "k",
        &args.top_k.map_or_else(|| "full".to_string(), |k| k.to_string()),
    );
    Ok(out)
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<Output> {
    let spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::IoFailure {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?
        }
        None => SynthSpec {
            seed: cli.seed,
            ..Default::default()
        },
    };
    let bundles = generate_tasks(&spec)?;
    for b in &bundles {
        write_bundle(b, args.out.join(b.task_id()))?;
    }
    let mut doc = serde_json::to_string_pretty(&spec).expect("spec serializes");
    doc.push('\n');
    write_file(&args.out.join("spec.json"), doc.as_bytes())?;

    let mut out = Output::new(cli.format, "synth", json!({ "spec": spec, "out": args.out }));
    out.int("tasks", bundles.len() as u64);
    for (b, s) in bundles.iter().zip(&spec.signal_strengths) {
        out.float(&format!("strength.{}", b.task_id()), *s);
    }
    Ok(out)
}

fn cmd_synth_eval(cli: &Cli, args: &SynthEvalArgs) -> Result<Output> {
    let pool = load_pool(&args.dir)?;
    let metric: Metric = args.metric.into();
    let mut settings = EvalSettings::new(metric, cli.seed);
    settings.hscore.ridge = args.ridge;
    settings.sinkhorn.epsilon = args.epsilon;
    settings.sampler = SubsampleSpec::new(args.max_pixels, cli.seed);
    let eval = evaluate_family(&pool, &args.target, &settings)?;

    let mut out = Output::new(
        cli.format,
        "synth-eval",
        json!({
            "seed": cli.seed,
            "dir": args.dir,
            "target": args.target,
            "evaluation": settings,
        }),
    );
    let name = metric.name();
    let mut table = format!("task_id,{name},probe_accuracy,{name}_rank,probe_rank\n");
    for s in &eval.sources {
        let _ = writeln!(
            table,
            "{},{:.6},{:.6},{},{}",
            s.task_id, s.score, s.probe_accuracy, s.metric_rank, s.probe_rank
        );
    }
    out.block(&table, "sources", to_value(&eval.sources));
    out.int("footrule", eval.footrule);
    out.int("footrule_top1", eval.footrule_top1);
    Ok(out)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParams("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParams(e.to_string()))?;
    }
    let out = match &cli.command {
        Command::RoiSim(a) => cmd_roi_sim(cli, a)?,
        Command::Score(a) => cmd_score(cli, a)?,
        Command::Select(a) => cmd_select(cli, a)?,
        Command::Footrule(a) => cmd_footrule(cli, a)?,
        Command::Synth(a) => cmd_synth(cli, a)?,
        Command::SynthEval(a) => cmd_synth_eval(cli, a)?,
    };
    let text = out.render();
    match &cli.output {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
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
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR Usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {e}", e.code());
            ExitCode::from(if matches!(e, Error::NoCompatibleSource(_)) { 3 } else { 2 })
        }
    }
}
