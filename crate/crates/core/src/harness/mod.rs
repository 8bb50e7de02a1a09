//! Experiment specs, the content-addressed stage cache, result tables,
//! and the commands behind the CLI.

mod cache;
mod experiments;
mod models;
mod plot;
mod spec;
mod table;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{load_json, save_json, StageCache, StageRecord};
pub use experiments::{ExperimentOutput, Runner};
pub use models::{balanced_samples, export_models, load_world, AttributeModels, Models};
pub use plot::{line_chart_svg, series_from, Series};
pub use spec::{
    content_hash, hash_of, AblationSpec, DownstreamSpec, EvaluatorSpec, ExperimentSpec, GuidanceSpec, HSpaceSpec,
    MetricSpec, MultiSpec, SPEC_VERSION,
};
pub use table::{fmt_num, ResultRow, ResultTable, SummaryRow};

use crate::error::{Error, Result};
use crate::hspace::{accuracy_table_csv, HDataset};
use crate::numkit::Matrix;
use crate::synthdata::{dataset_from_csv, dataset_to_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    World,
    TrainDenoiser,
    Invert,
    TrainBanks,
    Sample,
    Evaluate,
    Pipeline,
    AblateGamma,
    AblateBatch,
    Multi,
    Downstream,
    DataEfficiency,
    Plot,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::World => "world",
            Command::TrainDenoiser => "train-denoiser",
            Command::Invert => "invert",
            Command::TrainBanks => "train-banks",
            Command::Sample => "sample",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
            Command::AblateGamma => "ablate-gamma",
            Command::AblateBatch => "ablate-batch",
            Command::Multi => "multi",
            Command::Downstream => "downstream",
            Command::DataEfficiency => "data-efficiency",
            Command::Plot => "plot",
        }
    }
}

/// What `sample` ran with; paths are relative to the manifest.
#[derive(Debug, Serialize)]
struct SampleManifest {
    seeds: Vec<u64>,
    samples_per_seed: usize,
    checkpoint: PathBuf,
    schedule: crate::diffcore::ScheduleConfig,
    guidance: GuidanceSpec,
}

/// Per-invocation settings that are not part of the spec.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `spec.seeds`.
    pub seeds: Option<Vec<u64>>,
    /// Overrides `spec.output`.
    pub out: Option<PathBuf>,
    /// Points file for `evaluate`.
    pub input: Option<PathBuf>,
    pub no_cache: bool,
}

/// What one command did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub spec_hash: String,
    pub seeds: Vec<u64>,
    pub stages: Vec<StageRecord>,
    pub rows: Vec<ResultRow>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn table(&self) -> ResultTable {
        ResultTable::new(self.rows.clone())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn points_csv(m: &Matrix) -> String {
    let mut out: String = (1..=m.cols()).map(|i| format!("x_{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in m.row_iter() {
        let f: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&f.join(","));
        out.push('\n');
    }
    out
}

/// `sample_id,t,<labels>,h_1..h_w`, ordered by level then sample id.
pub fn hdataset_csv(hd: &HDataset, attributes: &[String]) -> String {
    let mut out = String::from("sample_id,t");
    for a in attributes {
        write!(out, ",{a}").unwrap();
    }
    for i in 1..=hd.h_width() {
        write!(out, ",h_{i}").unwrap();
    }
    out.push('\n');
    let mut entries: Vec<_> = hd.entries().iter().collect();
    entries.sort_by_key(|e| (e.t, e.sample_id));
    for e in entries {
        write!(out, "{},{}", e.sample_id, e.t).unwrap();
        for a in attributes {
            write!(out, ",{}", e.labels.get(a).map_or(String::new(), u8::to_string)).unwrap();
        }
        for v in &e.h {
            write!(out, ",{v:.17e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes `results.csv`, `summary.csv`, `metrics.jsonl`, `run.json` and
/// any kept diagnostics or samples under `dir`.
pub fn write_outputs(dir: &Path, record: &RunRecord, output: &ExperimentOutput, n: usize) -> Result<()> {
    write(&dir.join("results.csv"), &output.table.to_csv())?;
    write(&dir.join("summary.csv"), &output.table.summary_csv())?;
    let lines: String = output
        .table
        .records(n)
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.run_id = format!("{}:{}", record.run_id, r.run_id);
            r.to_json_line() + "\n"
        })
        .collect();
    write(&dir.join("metrics.jsonl"), &lines)?;
    write(
        &dir.join("run.json"),
        &serde_json::to_string_pretty(record).expect("record serializes"),
    )?;
    for (name, text) in &output.diagnostics {
        write(&dir.join("diagnostics").join(format!("{name}.jsonl")), text)?;
    }
    for (name, m) in &output.samples {
        write(&dir.join("samples").join(format!("{name}.csv")), &points_csv(m))?;
    }
    Ok(())
}

/// Runs `command` and writes its outputs under `<out>/<command>`; stage
/// artifacts go to `<out>/cache`.
pub fn run_command(command: Command, spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunRecord> {
    let start = Instant::now();
    let seeds = opts.seeds.clone().unwrap_or_else(|| spec.seeds.clone());
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("seed list is empty".into()));
    }
    let root = opts.out.clone().unwrap_or_else(|| spec.output.clone());
    let dir = root.join(command.name());
    let cache = if opts.no_cache {
        StageCache::disabled()
    } else {
        StageCache::new(root.join("cache"))
    };
    let spec_hash = spec.hash();
    let run_id = format!("{}-{}", command.name(), &spec_hash[..12]);
    let mut output = ExperimentOutput::default();

    let stages = match command {
        Command::Plot => {
            plot_outputs(&root, &dir)?;
            Vec::new()
        }
        Command::World => {
            let world = load_world(spec)?;
            write(&dir.join("world.toml"), &world.to_toml())?;
            let data = world.sample_dataset(
                spec.denoiser.train_samples,
                &mut crate::numkit::RngStream::new(spec.denoiser.seed),
            );
            write(&dir.join("dataset.csv"), &dataset_to_csv(&data, world.attributes()))?;
            Vec::new()
        }
        Command::TrainDenoiser => {
            let models = Models::prepare_denoiser(spec, &cache)?;
            write(&dir.join("denoiser.json"), &models.denoiser.to_json())?;
            let mut curve = String::from("epoch,loss\n");
            for (i, l) in models.loss_curve.iter().enumerate() {
                writeln!(curve, "{},{}", i + 1, fmt_num(*l)).unwrap();
            }
            write(&dir.join("loss_curve.csv"), &curve)?;
            models.stages
        }
        Command::Invert => {
            let models = Models::prepare_denoiser(spec, &cache)?;
            for attr in &spec.hspace.attributes {
                let data = models
                    .hspace_samples(spec, attr)
                    .map_err(|e| Error::stage("invert", e))?;
                let hd = models
                    .hdataset_from(&data, spec.hspace.refinements)
                    .map_err(|e| Error::stage("invert", e))?;
                write(
                    &dir.join(format!("hdataset_{attr}.csv")),
                    &hdataset_csv(&hd, models.world.attributes()),
                )?;
            }
            models.stages
        }
        Command::TrainBanks => {
            let models = Models::prepare(spec, &cache)?;
            export_models(&models, &dir)?;
            for (a, m) in &models.attributes {
                write(
                    &dir.join(format!("accuracy_{a}.csv")),
                    &accuracy_table_csv(&m.bank.meta.accuracy),
                )?;
            }
            models.stages
        }
        _ => {
            let models = Models::prepare(spec, &cache)?;
            let mut runner = Runner::new(spec, &models);
            let tag = |e| Error::stage(command.name(), e);
            output = match command {
                Command::Sample => {
                    runner.keep_diagnostics = true;
                    runner.keep_samples = true;
                    write(&dir.join("denoiser.json"), &models.denoiser.to_json())?;
                    let manifest = SampleManifest {
                        seeds: seeds.clone(),
                        samples_per_seed: spec.eval_samples,
                        checkpoint: "denoiser.json".into(),
                        schedule: spec.schedule,
                        guidance: spec.guidance.clone(),
                    };
                    write(
                        &dir.join("manifest.toml"),
                        &toml::to_string(&manifest).expect("manifest serializes"),
                    )?;
                    runner.pipeline(&seeds)
                }
                Command::Pipeline => {
                    runner.keep_diagnostics = true;
                    runner.pipeline(&seeds)
                }
                Command::Evaluate => {
                    let path = opts
                        .input
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument("evaluate needs a points file".into()))?;
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let (data, _) = dataset_from_csv(&text).map_err(|e| Error::format(path, e))?;
                    let m = Matrix::from_rows(&data.into_iter().map(|s| s.x0).collect::<Vec<_>>())?;
                    let label = path
                        .file_name()
                        .map_or_else(String::new, |f| f.to_string_lossy().into_owned());
                    runner.evaluate_points(&m, &label, &seeds)
                }
                Command::AblateGamma => runner.ablate_gamma(&seeds),
                Command::AblateBatch => runner.ablate_batch(&seeds),
                Command::Multi => runner.multi(&seeds),
                Command::Downstream => runner.downstream(&seeds),
                Command::DataEfficiency => runner.data_efficiency(&seeds),
                _ => unreachable!("handled above"),
            }
            .map_err(|e| match e {
                e @ Error::Stage { .. } => e,
                e => tag(e),
            })?;
            models.stages
        }
    };
    let record = RunRecord {
        run_id,
        command: command.name().into(),
        spec_hash,
        seeds,
        stages,
        rows: output.table.rows.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if command != Command::Plot {
        write_outputs(&dir, &record, &output, spec.eval_samples)?;
    }
    Ok(record)
}

/// Charts for whichever sweep tables exist under `root`.
fn plot_outputs(root: &Path, dir: &Path) -> Result<()> {
    type XOf = fn(&ResultRow) -> Option<f64>;
    let jobs: [(&str, &str, XOf, &[&str]); 3] = [
        (
            "ablate-gamma",
            "guidance strength γ",
            |r| Some(r.gamma),
            &["fd", "log_density", "mmd2"],
        ),
        (
            "ablate-batch",
            "batch size N",
            |r| Some(r.batch_size as f64),
            &["fd", "log_density", "mmd2"],
        ),
        (
            "data-efficiency",
            "training samples",
            |r| r.setting.strip_prefix("size=").and_then(|s| s.parse().ok()),
            &["acc_early", "acc_mean"],
        ),
    ];
    let mut any = false;
    for (exp, x_label, x_of, metrics) in jobs {
        let path = root.join(exp).join("results.csv");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let table = ResultTable::from_csv(&text).map_err(|e| Error::format(&path, e))?;
        for metric in metrics {
            let series = series_from(&table, metric, x_of);
            if series.is_empty() {
                continue;
            }
            let svg = line_chart_svg(&format!("{exp}: {metric}"), x_label, metric, &series);
            write(&dir.join(format!("{exp}_{metric}.svg")), &svg)?;
            any = true;
        }
    }
    if !any {
        return Err(Error::InvalidArgument(format!(
            "no sweep tables under {}; run ablate-gamma, ablate-batch or data-efficiency first",
            root.display()
        )));
    }
    Ok(())
}
