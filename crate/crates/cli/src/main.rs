//! `slice-forecast`: one subcommand per pipeline stage.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 runtime error.

mod plot;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use slice_forecast::anova::{factorial_experiment, render_table, three_way_anova, write_observations_csv, write_table_csv};
use slice_forecast::config::{ExperimentConfig, Profile};
use slice_forecast::datasetgen::{export_csv, import_csv};
use slice_forecast::evaluation::{compare, evaluate, render_ranking, write_plot_csv, write_ranking_csv, write_reports_csv, EvalReport};
use slice_forecast::learners::{load_model, save_model, ModelKind};
use slice_forecast::manifest::Manifest;
use slice_forecast::pipeline::{generate, prepare, repeat_evaluate, test_windows_for, train, tune};
use slice_forecast::telemetry::TimeSeriesTable;
use slice_forecast::tuning::write_study_csv;
use slice_forecast::{Error, Result};
use slice_forecast_service::AppState;

#[derive(Parser)]
#[command(name = "slice-forecast", version, about = "Latency forecasting for sliced distributed applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every (profile, operation) pair and write dataset CSVs.
    Generate {
        /// Restrict to these profiles.
        #[arg(long)]
        profile: Vec<String>,
    },
    /// Fit one model on a dataset's training split.
    Train {
        /// Dataset CSV; defaults to the first profile's first operation.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Model kind; defaults to model.kind.
        #[arg(long)]
        kind: Option<ModelKind>,
    },
    /// TPE hyperparameter search on the training split.
    Tune {
        /// Dataset CSV; defaults to the first profile's first operation.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Model kind; defaults to model.kind.
        #[arg(long)]
        kind: Option<ModelKind>,
    },
    /// Score models on the test split and rank them.
    Eval {
        /// Dataset CSV; defaults to the first profile's first operation.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Persisted models to score; otherwise fits the configured kinds.
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Factorial simulation and three-way ANOVA.
    Anova,
    /// Run the predictor API.
    Serve {
        /// Model files to load in addition to service.model_dir.
        #[arg(long)]
        model: Vec<PathBuf>,
        /// Overrides service.listen.
        #[arg(long)]
        listen: Option<String>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    config_path: Option<PathBuf>,
    seed: u64,
    jobs: Option<usize>,
    out: PathBuf,
    format: Format,
}

impl Ctx {
    fn manifest(&self, command: &str) -> Result<Manifest> {
        let mut m = Manifest::new(command, &self.cfg, self.seed, self.jobs);
        if let Some(p) = &self.config_path {
            m.input(p)?;
        }
        Ok(m)
    }

    fn finish(&self, m: &Manifest) -> Result<()> {
        let path = m.write(&self.out)?;
        eprintln!("manifest: {}", path.display());
        Ok(())
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// `--dataset`, or the first profile's first operation under `<out>/datasets`.
    fn dataset(&self, arg: &Option<PathBuf>) -> Result<(PathBuf, TimeSeriesTable)> {
        let path = match arg {
            Some(p) => p.clone(),
            None => {
                let profile = &self.cfg.simulator.profiles[0].name;
                let op = self.cfg.workload.op_types[0];
                self.out.join("datasets").join(format!("{profile}-{op}.csv"))
            }
        };
        let table = import_csv(&path)?;
        Ok((path, table))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_generate(ctx: &Ctx, only: &[String]) -> Result<()> {
    let profiles: Vec<&Profile> = if only.is_empty() {
        ctx.cfg.simulator.profiles.iter().collect()
    } else {
        only.iter()
            .map(|n| {
                ctx.cfg.profile(n).ok_or_else(|| Error::Config {
                    path: "--profile".into(),
                    message: format!("unknown profile `{n}`"),
                })
            })
            .collect::<Result<_>>()?
    };
    let pairs: Vec<_> = profiles
        .iter()
        .flat_map(|p| ctx.cfg.workload.op_types.iter().map(move |&op| (*p, op)))
        .collect();
    let generated: Vec<_> = pairs
        .par_iter()
        .map(|&(p, op)| generate(p, op, &ctx.cfg, ctx.seed))
        .collect::<Result<_>>()?;

    let dir = ctx.subdir("datasets")?;
    let mut m = ctx.manifest("generate")?;
    let w = ctx.cfg.dataset.window;
    if ctx.format == Format::Csv {
        println!("dataset,rows,dropped_columns,path");
    }
    for g in &generated {
        let name = g.name();
        let csv = dir.join(format!("{name}.csv"));
        export_csv(&g.table, &csv)?;
        let trace = dir.join(format!("{name}.trace.csv"));
        write_with(&trace, |f| g.trace.write_csv(f).map_err(|e| Error::io(&trace, e)))?;
        m.output(&csv)?;
        m.output(&trace)?;
        let rows = g.table.len();
        m.record(&format!("{name}.rows"), rows);
        if rows < 2 * w {
            eprintln!("warning: marginal dataset {name}: {rows} rows, fewer than 2 x window ({})", 2 * w);
        }
        match ctx.format {
            Format::Csv => println!("{name},{rows},{},{}", g.report.dropped_columns.len(), csv.display()),
            Format::Table => println!("{name:<16} {rows:>8} rows  -> {}", csv.display()),
        }
    }
    ctx.finish(&m)
}

fn cmd_train(ctx: &Ctx, dataset: &Option<PathBuf>, kind: Option<ModelKind>) -> Result<()> {
    let (path, table) = ctx.dataset(dataset)?;
    let kind = kind.unwrap_or(ctx.cfg.model.kind);
    let prepared = prepare(&table, &ctx.cfg, None)?;
    let model = train(&prepared, kind, &ctx.cfg.model.hyperparams, ctx.seed)?;
    let out = ctx.subdir("models")?.join(format!("{}-{kind}.model", stem(&path)));
    save_model(&model, &out)?;
    let id = model.content_id();

    let mut m = ctx.manifest("train")?;
    m.input(&path)?;
    m.output(&out)?;
    m.record("model_id", &id);
    m.record("kind", kind);
    m.record("dataset_id", &prepared.dataset_id);
    m.record("n_train", model.meta.n_train);
    match ctx.format {
        Format::Csv => println!("kind,model_id,epochs_run,path\n{kind},{id},{},{}", model.meta.epochs_run, out.display()),
        Format::Table => println!(
            "trained {kind} on {} windows ({:.2} s), id {id} -> {}",
            model.meta.n_train,
            model.meta.train_time_s,
            out.display()
        ),
    }
    ctx.finish(&m)
}

fn cmd_tune(ctx: &Ctx, dataset: &Option<PathBuf>, kind: Option<ModelKind>) -> Result<()> {
    let (path, table) = ctx.dataset(dataset)?;
    let kind = kind.unwrap_or(ctx.cfg.model.kind);
    let prepared = prepare(&table, &ctx.cfg, None)?;
    let study = tune(&prepared, kind, &ctx.cfg.model.hyperparams, &ctx.cfg, ctx.seed)?;
    let dir = ctx.subdir("tuning")?;
    let base = format!("{}-{kind}", stem(&path));
    let csv = dir.join(format!("{base}.study.csv"));
    write_with(&csv, |f| write_study_csv(&study, f))?;

    // A complete config with the winning hyperparameters, usable as --config.
    let best = study.best_trial();
    let mut tuned = ctx.cfg.clone();
    tuned.model.kind = kind;
    tuned.model.hyperparams = best.hyperparams.clone();
    let toml_path = dir.join(format!("{base}.best.toml"));
    fs::write(&toml_path, tuned.to_toml()).map_err(|e| Error::io(&toml_path, e))?;

    let objective = best.objective.expect("best trial succeeded");
    let mut m = ctx.manifest("tune")?;
    m.input(&path)?;
    m.output(&csv)?;
    m.output(&toml_path)?;
    m.record("best_trial", best.trial);
    m.record("best_objective", slice_forecast::numfmt::fmt_f64(objective));
    match ctx.format {
        Format::Csv => print!("{}", fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?),
        Format::Table => println!(
            "{} trials, best #{} objective {objective:.6} -> {}",
            study.trials.len(),
            best.trial,
            toml_path.display()
        ),
    }
    ctx.finish(&m)
}

fn cmd_eval(ctx: &Ctx, dataset: &Option<PathBuf>, models: &[PathBuf]) -> Result<()> {
    let (path, table) = ctx.dataset(dataset)?;
    let mut m = ctx.manifest("eval")?;
    m.input(&path)?;
    let policy = ctx.cfg.evaluation.zero_policy;
    let reports: Vec<EvalReport> = if models.is_empty() {
        let prepared = prepare(&table, &ctx.cfg, None)?;
        let ev = &ctx.cfg.evaluation;
        repeat_evaluate(&prepared, &ev.models, &ctx.cfg.model.hyperparams, ctx.seed, ev.repeats, &ctx.cfg)?
    } else {
        let mut out = Vec::new();
        for p in models {
            m.input(p)?;
            let model = load_model(p)?;
            let test = test_windows_for(&model, &table, &ctx.cfg)?;
            out.push(evaluate(&model, &test, policy)?);
        }
        out
    };
    let ranking = compare(&reports)?;

    let dir = ctx.subdir("eval")?;
    let reports_csv = dir.join("reports.csv");
    write_with(&reports_csv, |f| write_reports_csv(&reports, f))?;
    let ranking_csv = dir.join("ranking.csv");
    write_with(&ranking_csv, |f| write_ranking_csv(&ranking, f))?;
    m.output(&reports_csv)?;
    m.output(&ranking_csv)?;

    let plots = ctx.subdir("eval/plots")?;
    for row in &ranking {
        let r = reports.iter().find(|r| r.model_kind == row.model_kind).expect("ranked kind has a report");
        let csv = plots.join(format!("{}.csv", r.model_kind));
        write_with(&csv, |f| write_plot_csv(r, f))?;
        let svg = plots.join(format!("{}.svg", r.model_kind));
        let chart = plot::line_chart(
            &format!("{} on {}: MAPE {:.2}%", r.model_kind, stem(&path), 100.0 * r.mape),
            "latency (ms)",
            &[
                plot::Series { label: "actual", color: "#222222", values: &r.actual_ms },
                plot::Series { label: "predicted", color: "#d62728", values: &r.predicted_ms },
            ],
        );
        fs::write(&svg, chart).map_err(|e| Error::io(&svg, e))?;
        m.output(&csv)?;
        m.output(&svg)?;
        m.record(&format!("{}.mape_mean", row.model_kind), slice_forecast::numfmt::fmt_f64(row.mape_mean));
    }
    match ctx.format {
        Format::Csv => write_ranking_csv(&ranking, std::io::stdout().lock())?,
        Format::Table => print!("{}", render_ranking(&ranking)),
    }
    ctx.finish(&m)
}

fn cmd_anova(ctx: &Ctx) -> Result<()> {
    let obs = factorial_experiment(&ctx.cfg.factorial(), ctx.seed)?;
    let table = three_way_anova(&obs)?;
    let dir = ctx.subdir("anova")?;
    let obs_csv = dir.join("observations.csv");
    write_with(&obs_csv, |f| write_observations_csv(&obs, f))?;
    let table_csv = dir.join("anova.csv");
    write_with(&table_csv, |f| write_table_csv(&table, f))?;

    let mut m = ctx.manifest("anova")?;
    m.output(&obs_csv)?;
    m.output(&table_csv)?;
    for row in &table.rows {
        if let (Some(f), Some(p)) = (row.f, row.p) {
            m.record(&format!("{}.F", row.source), slice_forecast::numfmt::fmt_f64(f));
            m.record(&format!("{}.p", row.source), slice_forecast::numfmt::fmt_f64(p));
        }
    }
    match ctx.format {
        Format::Csv => write_table_csv(&table, std::io::stdout().lock())?,
        Format::Table => print!("{}", render_table(&table)),
    }
    ctx.finish(&m)
}

fn cmd_serve(ctx: &Ctx, models: &[PathBuf], listen: &Option<String>) -> Result<()> {
    let svc = &ctx.cfg.service;
    let listen = listen.as_deref().unwrap_or(&svc.listen);
    let addr: SocketAddr = listen.parse().map_err(|_| Error::Config {
        path: "service.listen".into(),
        message: format!("not a socket address: `{listen}`"),
    })?;
    let api = |e: slice_forecast_service::ApiError| Error::InvalidArgument(e.message);
    let state = AppState::new();
    let mut m = ctx.manifest("serve")?;
    if let Some(dir) = &svc.model_dir {
        state.load_dir(dir).map_err(api)?;
    }
    for p in models {
        state.load_file(p).map_err(api)?;
        m.input(p)?;
    }
    for info in state.list() {
        m.record(&format!("model.{}", info.id), info.kind);
        eprintln!("loaded {} ({})", info.id, info.kind);
    }
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    ctx.finish(&m)?;

    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(j) = ctx.jobs {
        rt.worker_threads(j.max(1));
    }
    let rt = rt.enable_all().build().map_err(|e| Error::io("tokio runtime", e))?;
    eprintln!("listening on {addr}");
    rt.block_on(slice_forecast_service::serve(addr, state, svc.max_body_bytes))
        .map_err(|e| Error::io(addr.to_string(), e))
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::Config {
                path: "--config".into(),
                message: e.to_string(),
            },
            e => e,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(j) = c.jobs {
        if j == 0 {
            return Err(Error::Config {
                path: "--jobs".into(),
                message: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let ctx = Ctx {
        seed: cfg.seed,
        out: cfg.out_dir.clone(),
        cfg,
        config_path: c.config,
        jobs: c.jobs,
        format: c.format,
    };
    match &cli.command {
        Command::Generate { profile } => cmd_generate(&ctx, profile),
        Command::Train { dataset, kind } => cmd_train(&ctx, dataset, *kind),
        Command::Tune { dataset, kind } => cmd_tune(&ctx, dataset, *kind),
        Command::Eval { dataset, model } => cmd_eval(&ctx, dataset, model),
        Command::Anova => cmd_anova(&ctx),
        Command::Serve { model, listen } => cmd_serve(&ctx, model, listen),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
