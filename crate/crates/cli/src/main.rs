//! `pal`: generate datasets, run training experiments, evaluate mask
//! directories and plot run reports.
//!
//! Exit codes: 0 valid run, 2 invalid run (false-alarm gate), 3 aborted,
//! 4 bad configuration or usage. Failures print a one-line JSON object to
//! stderr.

mod config;
mod dataset;
mod plot;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use pal_core::epg::{Difficulty, EpgOutcome};
use pal_core::io::{read_mask, write_gray, write_mask, BitDepth};
use pal_core::metrics::evaluate;
use pal_core::model::{Predictor, TinySegNet};
use pal_core::par::Exec;
use pal_core::scheduler::{run_experiment, Dataset, EpochRow, Mode, RunReport, RunSink};
use pal_core::types::SampleId;
use pal_core::{PalError, PointKind, SampleRecord};
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{file_name, png_files, read_dataset, write_dataset};

#[derive(Parser)]
#[command(name = "pal", version, about = "Point-supervised small-target segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    Coarse,
    Centroid,
}

impl From<Labels> for PointKind {
    fn from(l: Labels) -> Self {
        match l {
            Labels::Coarse => PointKind::Coarse,
            Labels::Centroid => PointKind::Centroid,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write the run report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; generated in memory from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pal", value_parser = parse_mode)]
        mode: Mode,
        #[arg(long, value_enum, default_value = "coarse")]
        labels: Labels,
        #[arg(long)]
        seed: Option<u64>,
        /// Write every EPG pseudo-label to `<out>/epg/`.
        #[arg(long)]
        dump_epg: bool,
        /// Snapshot every N-th training sample at each update epoch; 0 disables.
        #[arg(long, default_value_t = 20)]
        snapshot_every: usize,
    },
    /// Score predicted masks against ground-truth masks with matching names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Reads `pd_deviation` from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render IoU, pool-size and label-quality curves from a report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

const EXIT_INVALID: u8 = 2;
const EXIT_ABORTED: u8 = 3;
const EXIT_CONFIG: u8 = 4;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_CONFIG,
            error,
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_CONFIG => "config",
            _ => "aborted",
        }
    }
}

/// Parameter errors from the core are configuration problems; everything
/// else aborts.
impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<PalError>() {
            Some(PalError::Parameter(_)) => EXIT_CONFIG,
            _ => EXIT_ABORTED,
        };
        Self { code, error }
    }
}

impl From<PalError> for Failure {
    fn from(e: PalError) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<u8, Failure>;

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Timestamps live only here so every other output is reproducible.
fn write_meta(dir: &Path, started: u128, clock: Instant) -> std::io::Result<()> {
    let meta = json!({
        "command": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix_ms": started as u64,
        "finished_unix_ms": unix_ms() as u64,
        "elapsed_secs": clock.elapsed().as_secs_f64(),
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap() + "\n")
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let (started, clock) = (unix_ms(), Instant::now());
    let cfg = RunConfig::load(config).map_err(Failure::config)?.with_seed(seed);
    let ds = Dataset::synthetic(&cfg.data, Exec::default())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(out, &ds)?;
    write_meta(out, started, clock)?;

    let easy = ds.records.iter().filter(|r| r.scene_class == pal_core::types::SceneClass::Easy).count();
    let areas: Vec<usize> = ds.records.iter().filter_map(|r| ds.truth.mask(r.id)).map(|m| m.count()).collect();
    let targets: usize = ds.records.iter().map(|r| r.annotation.len()).sum();
    let summary = json!({
        "train": ds.records.len(),
        "test": ds.test_images.len(),
        "easy": easy,
        "hard": ds.records.len() - easy,
        "targets": targets,
        "mean_target_pixels_per_image": areas.iter().sum::<usize>() as f64 / areas.len().max(1) as f64,
        "mean_targets_per_image": targets as f64 / ds.records.len().max(1) as f64,
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(0)
}

struct FileSink {
    out: PathBuf,
    dump_epg: bool,
    snapshot_every: usize,
}

impl FileSink {
    fn snapshot_ids(&self, records: &[SampleRecord]) -> Vec<usize> {
        if self.snapshot_every == 0 {
            return vec![];
        }
        (0..records.len()).step_by(self.snapshot_every).collect()
    }
}

fn core_io(e: std::io::Error) -> PalError {
    PalError::Io(e)
}

impl RunSink for FileSink {
    fn epg(&mut self, records: &[SampleRecord], outcomes: &[EpgOutcome]) -> pal_core::Result<()> {
        if !self.dump_epg {
            return Ok(());
        }
        let dir = self.out.join("epg");
        fs::create_dir_all(&dir).map_err(core_io)?;
        let mut summary = Vec::with_capacity(records.len());
        for (rec, o) in records.iter().zip(outcomes) {
            write_gray(dir.join(file_name(rec.id)), o.pseudo_label.grid(), BitDepth::Eight)?;
            summary.push(json!({
                "id": rec.id,
                "easy": o.difficulty == Difficulty::Easy,
                "recall": o.recall,
            }));
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n").map_err(core_io)?;
        Ok(())
    }

    fn firing(&mut self, epoch: usize, records: &[SampleRecord]) -> pal_core::Result<()> {
        let picks = self.snapshot_ids(records);
        if picks.is_empty() {
            return Ok(());
        }
        let dir = self.out.join("snapshots").join(format!("epoch_{epoch:03}"));
        fs::create_dir_all(&dir).map_err(core_io)?;
        for i in picks {
            let rec = &records[i];
            write_gray(dir.join(file_name(rec.id)), rec.pseudo_label.grid(), BitDepth::Eight)?;
        }
        Ok(())
    }

    fn epoch(&mut self, row: &EpochRow) -> pal_core::Result<()> {
        eprintln!(
            "epoch {:>3} {:<11} loss {:.4} iou {:.3} pd {:.3} fa {:.2e} pools {}/{}",
            row.epoch, row.phase, row.train_loss, row.iou, row.pd, row.fa, row.pool_train, row.pool_prep
        );
        Ok(())
    }
}

struct TrainArgs {
    config: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: PathBuf,
    mode: Mode,
    labels: PointKind,
    seed: Option<u64>,
    dump_epg: bool,
    snapshot_every: usize,
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (started, clock) = (unix_ms(), Instant::now());
    let cfg = RunConfig::load(a.config.as_deref()).map_err(Failure::config)?.with_seed(a.seed);
    let exec = Exec::default();
    let data = match &a.dataset {
        Some(dir) => read_dataset(dir, a.labels)?,
        None => Dataset::synthetic(&cfg.data, exec)?.with_labels(a.labels),
    };
    if data.test_images.is_empty() {
        return Err(anyhow::anyhow!("dataset has no test split").into());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let hp = cfg.hp;
    let mut net = TinySegNet::<f32>::new(hp.seed, hp.learning_rate, hp.weight_decay).with_exec(exec);
    let mut sink = FileSink {
        out: a.out.clone(),
        dump_epg: a.dump_epg,
        snapshot_every: a.snapshot_every,
    };
    let report = run_experiment(&data, &hp, a.mode, &mut net, &mut sink, exec)?;

    fs::write(a.out.join("report.json"), report.to_json())?;
    fs::write(a.out.join("metrics.csv"), report.to_csv())?;
    fs::write(a.out.join("model.palw"), net.save_params())?;
    let pred_dir = a.out.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let first = data.records.len() as SampleId;
    for (i, p) in net.predict(&data.test_images).iter().enumerate() {
        write_mask(pred_dir.join(file_name(first + i as SampleId)), &p.above(hp.pred_threshold))?;
    }
    write_meta(&a.out, started, clock)?;
    print_final(&report);
    Ok(if report.final_metrics.valid { 0 } else { EXIT_INVALID })
}

fn print_final(report: &RunReport) {
    let m = report.final_metrics;
    println!(
        "{} ({:?} labels): iou {:.4} niou {:.4} pd {:.4} fa {:.3e} {}",
        report.mode.name(),
        report.labels,
        m.iou,
        m.niou,
        m.pd,
        m.fa,
        if m.valid { "valid" } else { "INVALID" }
    );
}

fn names(files: &[PathBuf]) -> BTreeSet<String> {
    files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

fn cmd_eval(pred: &Path, gt: &Path, config: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let cfg = RunConfig::load(config).map_err(Failure::config)?;
    let (pf, gf) = (png_files(pred)?, png_files(gt)?);
    let (pn, gn) = (names(&pf), names(&gf));
    if pn != gn {
        let only_pred: Vec<_> = pn.difference(&gn).cloned().collect();
        let only_gt: Vec<_> = gn.difference(&pn).cloned().collect();
        bail_failure(format!(
            "file sets differ; only in predictions: [{}]; only in ground truth: [{}]",
            only_pred.join(", "),
            only_gt.join(", ")
        ))?;
    }
    if pf.is_empty() {
        bail_failure("no PNG masks found".into())?;
    }
    let preds = pf.iter().map(read_mask).collect::<pal_core::Result<Vec<_>>>()?;
    let gts = gf.iter().map(read_mask).collect::<pal_core::Result<Vec<_>>>()?;
    let m = evaluate(&preds, &gts, cfg.hp.pd_deviation)?;
    let text = serde_json::to_string_pretty(&m).unwrap() + "\n";
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text)?;
    }
    Ok(if m.valid { 0 } else { EXIT_INVALID })
}

fn bail_failure(msg: String) -> Result<(), Failure> {
    Err(Failure {
        code: EXIT_ABORTED,
        error: anyhow::anyhow!(msg),
    })
}

fn cmd_plot(report: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let report: RunReport = serde_json::from_str(&text).context("parsing report")?;
    fs::create_dir_all(out)?;
    for (name, chart) in plot::report_charts(&report) {
        fs::write(out.join(name), chart.to_svg())?;
    }
    Ok(0)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Train {
            config,
            dataset,
            out,
            mode,
            labels,
            seed,
            dump_epg,
            snapshot_every,
        } => cmd_train(TrainArgs {
            config,
            dataset,
            out,
            mode,
            labels: labels.into(),
            seed,
            dump_epg,
            snapshot_every,
        }),
        Command::Eval { pred, gt, config, out } => cmd_eval(&pred, &gt, config.as_deref(), out.as_deref()),
        Command::Plot { report, out } => cmd_plot(&report, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let body = json!({
                "error": f.kind(),
                "exit_code": f.code,
                "message": format!("{:#}", f.error),
            });
            eprintln!("{body}");
            ExitCode::from(f.code)
        }
    }
}
