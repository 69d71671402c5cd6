use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hisp::appearance::AppearanceMode;
use hisp::io::{read_detections, read_tracks, write_detections, write_tracks};
use hisp::metrics::evaluate;
use hisp::pipeline::{run_from_files, run_tracker_with, sweep, RunConfig};
use hisp::simulator::{simulate, Preset, ScenarioSpec};
use tracing_subscriber::EnvFilter;

const LOG_ENV: &str = "HISP_LOG";

/// Online multi-target tracking with the HISP filter.
#[derive(Debug, Parser)]
#[command(name = "hisp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track a MOT detection file and write a result file.
    Track(TrackArgs),
    /// Generate a synthetic scenario: detections, ground truth and features.
    Simulate(SimulateArgs),
    /// Score a result file against ground truth.
    Evaluate(EvaluateArgs),
    /// Run a grid of simulations over detection probability and clutter, as CSV.
    Sweep(SweepArgs),
    /// Dump the hypothesis set after every frame as JSON lines.
    Inspect(InspectArgs),
}

/// Settings shared by every command that runs the tracker.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file whose keys mirror the run configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set clutter_mean=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Detection file in MOT format.
    #[arg(long)]
    det: Option<PathBuf>,
    #[arg(long, value_enum)]
    appearance: Option<AppearanceArg>,
    /// Feature CSV for precomputed appearance.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Directory of frame images for histogram appearance.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    detection_prob: Option<f64>,
    #[arg(long)]
    clutter_mean: Option<f64>,
    #[arg(long)]
    sigma_v: Option<f64>,
    #[arg(long)]
    sigma_r: Option<f64>,
    #[arg(long)]
    gate_threshold: Option<f64>,
    #[arg(long)]
    solver_timeout_ms: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AppearanceArg {
    Off,
    Precomputed,
    Histogram,
}

impl From<AppearanceArg> for AppearanceMode {
    fn from(a: AppearanceArg) -> Self {
        match a {
            AppearanceArg::Off => Self::Off,
            AppearanceArg::Precomputed => Self::Precomputed,
            AppearanceArg::Histogram => Self::Histogram,
        }
    }
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Result file in MOT format.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-frame diagnostics as JSON lines.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "easy")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for det.txt, gt.txt, features.csv and run.toml.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    frames: Option<u32>,
    #[arg(long)]
    detection_prob: Option<f64>,
    #[arg(long)]
    clutter_mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Easy,
    Hard,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Easy => Self::Easy,
            PresetArg::Hard => Self::Hard,
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Tracker result file.
    #[arg(long)]
    res: PathBuf,
    /// Ground-truth file.
    #[arg(long)]
    gt: PathBuf,
    /// Minimum IoU for a match.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Inclusive frame range `FIRST:LAST`; defaults to the ground-truth span.
    #[arg(long, value_parser = parse_range)]
    frames: Option<(u32, u32)>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "easy")]
    preset: PresetArg,
    /// Seeds to run for every grid cell.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.9,0.95")]
    detection_probs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2,10")]
    clutter_means: Vec<f64>,
    /// Tracker configuration file; its detection and clutter settings are replaced per cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Only print this frame.
    #[arg(long)]
    frame: Option<u32>,
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(':').ok_or("expected FIRST:LAST")?;
    let a = a.parse().map_err(|e| format!("{e}"))?;
    let b = b.parse().map_err(|e| format!("{e}"))?;
    if a > b {
        return Err("FIRST must not exceed LAST".into());
    }
    Ok((a, b))
}

/// Makes relative paths in a config file relative to the file's directory.
fn rebase_paths(table: &mut toml::Table, dir: &Path) {
    for key in ["det", "features", "images", "out", "diagnostics"] {
        if let Some(toml::Value::String(s)) = table.get_mut(key) {
            if Path::new(s.as_str()).is_relative() {
                *s = dir.join(&*s).to_string_lossy().into_owned();
            }
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut t = text
                .parse::<toml::Table>()
                .with_context(|| format!("parsing {}", p.display()))?;
            rebase_paths(&mut t, p.parent().unwrap_or(Path::new("")));
            t
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        let key = key.trim();
        // Bare words are taken as strings so `--set appearance=off` works.
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
    }
    let config: RunConfig = table.try_into().context("invalid configuration")?;
    Ok(config)
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = load_config(self.config.as_deref(), &self.overrides)?;
        if let Some(v) = &self.det {
            c.det = Some(v.clone());
        }
        if let Some(v) = self.appearance {
            c.appearance = v.into();
        }
        if let Some(v) = &self.features {
            c.features = Some(v.clone());
            if self.appearance.is_none() {
                c.appearance = AppearanceMode::Precomputed;
            }
        }
        if let Some(v) = &self.images {
            c.images = Some(v.clone());
            if self.appearance.is_none() {
                c.appearance = AppearanceMode::Histogram;
            }
        }
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.detection_prob, self.detection_prob);
        set(&mut c.clutter_mean, self.clutter_mean);
        set(&mut c.sigma_v, self.sigma_v);
        set(&mut c.sigma_r, self.sigma_r);
        if self.gate_threshold.is_some() {
            c.gate_threshold = self.gate_threshold;
        }
        if let Some(v) = self.solver_timeout_ms {
            c.solver_timeout_ms = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn track(args: TrackArgs) -> anyhow::Result<()> {
    let mut run = args.run.resolve()?;
    if args.out.is_some() {
        run.out = args.out;
    }
    if args.diagnostics.is_some() {
        run.diagnostics = args.diagnostics;
    }
    if run.out.is_none() {
        bail!("no output file: pass --out or set `out` in the config");
    }
    let output = run_from_files(&run)?;
    tracing::info!(
        tracks = output.tracks.num_tracks(),
        boxes = output.tracks.len(),
        frames = output.diagnostics.len(),
        "tracking finished"
    );
    Ok(())
}

fn simulate_cmd(args: SimulateArgs) -> anyhow::Result<()> {
    let mut spec = ScenarioSpec::preset(args.preset.into(), args.seed);
    if let Some(f) = args.frames {
        spec.frames = f;
    }
    if let Some(p) = args.detection_prob {
        spec.detection_prob = p;
    }
    if let Some(c) = args.clutter_mean {
        spec.clutter_mean = c;
    }
    let scenario = simulate(&spec)?;
    fs::create_dir_all(&args.out_dir)?;
    let det = args.out_dir.join("det.txt");
    write_detections(&scenario.detections, &det)?;
    write_tracks(&scenario.truth, &args.out_dir.join("gt.txt"))?;
    let mut run = RunConfig::for_scenario(&spec);
    run.det = Some(PathBuf::from("det.txt"));
    if let Some(features) = &scenario.features {
        features.write(&args.out_dir.join("features.csv"))?;
        run.appearance = AppearanceMode::Precomputed;
        run.features = Some(PathBuf::from("features.csv"));
    }
    // Paths in run.toml are relative to the output directory.
    let text = toml::to_string(&run).context("serialising run.toml")?;
    fs::write(args.out_dir.join("run.toml"), text)?;
    println!("{}", det.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> anyhow::Result<()> {
    let res = read_tracks(&args.res)?;
    let gt = read_tracks(&args.gt)?;
    let report = evaluate(&res, &gt, args.iou, args.frames)?;
    match args.format {
        Format::Json => println!("{}", report.to_json()),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> anyhow::Result<()> {
    let base = load_config(args.config.as_deref(), &[])?;
    let rows = sweep(
        &base,
        args.preset.into(),
        &args.seeds,
        &args.detection_probs,
        &args.clutter_means,
    )?;
    let mut csv = String::from("detection_prob,clutter_mean,seed,mota,motp,idf1,idsw,fp,fn\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{},{}\n",
            r.detection_prob, r.clutter_mean, r.seed, r.mota, r.motp, r.idf1, r.idsw, r.fp, r.fn_
        ));
    }
    match &args.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> anyhow::Result<()> {
    let run = args.run.resolve()?;
    let det = run.det.as_ref().context("a detection file is required")?;
    let detections = read_detections(det)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    run_tracker_with(&run, &detections, run.appearance_provider()?, |tracker| {
        let frame = tracker.configuration().frame;
        if args.frame.is_none_or(|f| f == frame) {
            writeln!(out, "{}", tracker.snapshot())?;
        }
        Ok(())
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Track(a) => track(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
