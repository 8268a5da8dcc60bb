//! Command-line front end: dataset synthesis, training, inference,
//! evaluation, mesh export and the expert-count ablation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{RunConfig, Task};
use crate::dcc::DccLog;
use crate::error::{Error, Result};
use crate::eval::{completion_rows, generation_rows, occlusion_sweep, routing_consistency};
use crate::gan::{load_checkpoint, save_checkpoint, MoeModel, StepReport, Trainer};
use crate::mesh::{marching_cubes, write_obj};
use crate::metrics::{category_table, evaluate, markdown_table, write_csv, MetricRow, TableEntry};
use crate::tensor::Real;
use crate::voxel::{read_vox, write_vox, Dataset, OcclusionMode, Split, VoxelGrid};

#[derive(Parser, Debug)]
#[command(name = "moe-cgan", version, about = "Mixture-of-experts 3D GAN for voxel shape generation and completion")]
pub struct Cli {
    /// JSON config file; keys it omits keep the profile defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Built-in profile (desk or paper) when no config file is given.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Override one setting, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural dataset (VOX1 files plus manifest.json).
    Synth(SynthArgs),
    /// Train a model; writes checkpoints and CSV logs to the run directory.
    Train(TrainArgs),
    /// Sample shapes from a generation checkpoint.
    Generate(GenerateArgs),
    /// Complete partial shapes with a completion checkpoint.
    Complete(CompleteArgs),
    /// Score a checkpoint on the test split, or explicit file pairs.
    Eval(EvalArgs),
    /// Extract an OBJ surface from a VOX1 grid.
    Mesh(MeshArgs),
    /// Train and evaluate one model per expert count.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory (default: paths.data_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (default: paths.data_dir).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory (default: paths.run_dir).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config replaces the current one.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
    /// Stop after this many iterations (the run can be resumed later).
    #[arg(long)]
    pub max_iterations: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: <run_dir>/generated).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a marching-cubes OBJ per sample.
    #[arg(long)]
    pub obj: bool,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Partial VOX1 grids to complete.
    #[arg(long, required = true, num_args = 1..)]
    pub partial: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: next to each input).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub obj: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model to evaluate on the dataset's test split.
    #[arg(long, conflicts_with = "pairs")]
    pub checkpoint: Option<PathBuf>,
    /// CSV with columns id,truth,prediction[,partial]; paths are relative to
    /// the CSV file.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Occlusion ratio in (0, 0.95] (default: eval.occlusion_ratio).
    #[arg(long)]
    pub occlusion: Option<Real>,
    /// Percent range, e.g. `10..90 step 10` or `10..90:10`.
    #[arg(long, value_name = "RANGE")]
    pub occlusion_sweep: Option<String>,
    /// random-cells, half-space or spherical-blob (default: eval.occlusion_mode).
    #[arg(long)]
    pub mode: Option<String>,
    /// Output directory (default: <run_dir>/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MeshArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iso: Real,
    /// Output OBJ (default: input with an .obj extension).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 4, 8])]
    pub experts: Vec<usize>,
    /// Tasks to train: completion, generation or both.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["completion".to_string(), "generation".to_string()])]
    pub tasks: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default: <run_dir>/ablation).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// 0 success, 1 validation error, 2 missing input, 3 numeric abort.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingInput(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.profile) {
        (Some(_), Some(_)) => {
            return Err(Error::Config {
                key: "profile".into(),
                reason: "give either --config or --profile, not both".into(),
            })
        }
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::profile(p)?,
        (None, None) => RunConfig::desk(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Generate(a) => cmd_generate(&cfg, a),
        Command::Complete(a) => cmd_complete(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Mesh(a) => cmd_mesh(a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
    }
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let ds = Dataset::synthesize(cfg.data.count, cfg.data.resolution, cfg.data.seed)?;
    ds.write_dir(&out, Some(cfg.data.seed))?;
    println!(
        "wrote {} shapes ({} train, {} test) at {}³ to {}",
        ds.len(),
        ds.split(Split::Train).count(),
        ds.split(Split::Test).count(),
        cfg.data.resolution,
        out.display()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::read_dir(dir)?;
    if let Some(bad) = ds.items.iter().find(|i| i.grid.resolution() != cfg.data.resolution) {
        return Err(Error::Config {
            key: "data.resolution".into(),
            reason: format!(
                "dataset at {} is {}³ but the config says {}³",
                dir.display(),
                bad.grid.resolution(),
                cfg.data.resolution
            ),
        });
    }
    Ok(ds)
}

fn training_grids(ds: &Dataset) -> Vec<VoxelGrid> {
    ds.split(Split::Train).map(|i| i.grid.clone()).collect()
}

/// CSV writer that appends when resuming.
fn open_log(path: &Path, append: bool) -> Result<File> {
    Ok(OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?)
}

const LOSS_HEADER: &str = "iteration,epoch,d_loss,g_loss,geom,total,gate_loss,tau,overflow,loads";

fn loss_line(r: &StepReport) -> String {
    let loads: Vec<String> = r.loads.iter().map(usize::to_string).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.iteration,
        r.epoch,
        r.losses.d_loss,
        r.losses.g_loss,
        r.losses.geom,
        r.losses.total,
        r.gate_loss,
        r.tau,
        r.overflow,
        loads.join(";")
    )
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let run_dir = args.run_dir.clone().unwrap_or_else(|| cfg.paths.run_dir.clone());
    std::fs::create_dir_all(&run_dir)?;
    let resuming = args.resume.is_some();
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let data_dir = args.data.clone().unwrap_or_else(|| ck.manifest.config.paths.data_dir.clone());
            let ds = load_dataset(&ck.manifest.config, &data_dir)?;
            info!("resuming from {} at epoch {}", path.display(), ck.manifest.epoch);
            ck.into_trainer(training_grids(&ds))?
        }
        None => {
            let data_dir = args.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let ds = load_dataset(cfg, &data_dir)?;
            Trainer::new(cfg, training_grids(&ds))?
        }
    };
    write_resolved(trainer.config(), &run_dir)?;

    let mut loss_log = open_log(&run_dir.join("loss.csv"), resuming)?;
    if !resuming {
        writeln!(loss_log, "{LOSS_HEADER}")?;
    }
    let dcc_file = open_log(&run_dir.join("dcc.csv"), resuming)?;
    let mut dcc_log = if resuming {
        DccLog::resume(dcc_file)
    } else {
        DccLog::new(dcc_file, trainer.model.n_experts())?
    };

    let every = trainer.config().train.checkpoint_every.max(1);
    let mut steps = 0u64;
    while !trainer.is_done() && args.max_iterations.is_none_or(|m| steps < m) {
        let epoch = trainer.epoch;
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                save_checkpoint(&trainer, run_dir.join("abort.mckp"))?;
                let dump = serde_json::json!({
                    "error": e.to_string(),
                    "epoch": trainer.epoch,
                    "batch_index": trainer.batch_index,
                    "dcc": trainer.model.dcc,
                });
                std::fs::write(run_dir.join("abort.json"), serde_json::to_string_pretty(&dump)?)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        steps += 1;
        writeln!(loss_log, "{}", loss_line(&report))?;
        if report.dcc_updated {
            dcc_log.record(&trainer.model.dcc)?;
        }
        if trainer.epoch != epoch {
            info!(
                "epoch {} done: d={:.4} g={:.4} geom={:.4} tau={:.3}",
                epoch, report.losses.d_loss, report.losses.g_loss, report.losses.geom, report.tau
            );
            if trainer.epoch % every == 0 {
                save_checkpoint(&trainer, run_dir.join(format!("checkpoint_epoch{:04}.mckp", trainer.epoch)))?;
            }
        }
    }
    loss_log.flush()?;
    let final_path = run_dir.join("checkpoint.mckp");
    save_checkpoint(&trainer, &final_path)?;
    println!(
        "trained to epoch {}/{} ({} iterations this run); checkpoint at {}",
        trainer.epoch,
        trainer.config().train.epochs,
        steps,
        final_path.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<MoeModel> {
    load_checkpoint(path)?.into_model()
}

fn write_shape(grid: &VoxelGrid, path: &Path, obj: bool) -> Result<()> {
    write_vox(grid, path)?;
    if obj {
        write_obj(&marching_cubes(grid, 0.5), path.with_extension("obj"))?;
    }
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let mut model = load_model(&args.checkpoint)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.run_dir.join("generated"));
    std::fs::create_dir_all(&out)?;
    let samples = model.generate(args.count, args.seed)?;
    for (i, s) in samples.iter().enumerate() {
        write_shape(&s.binarize(0.5), &out.join(format!("sample_{i:04}.vox")), args.obj)?;
    }
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn cmd_complete(_cfg: &RunConfig, args: &CompleteArgs) -> Result<()> {
    let mut model = load_model(&args.checkpoint)?;
    let partials = args.partial.iter().map(read_vox).collect::<Result<Vec<_>>>()?;
    let outputs = model.complete(&partials, args.seed)?;
    for (path, grid) in args.partial.iter().zip(&outputs) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("shape");
        let name = format!("{stem}_completed.vox");
        let target = match &args.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                dir.join(name)
            }
            None => path.with_file_name(name),
        };
        write_shape(&grid.binarize(0.5), &target, args.obj)?;
        println!("{} -> {}", path.display(), target.display());
    }
    Ok(())
}

/// Parses `A..B`, `A..B:S` or `A..B step S` (percent) into ratios.
pub fn parse_sweep(spec: &str) -> Result<Vec<Real>> {
    let bad = || Error::invalid(format!("bad sweep `{spec}`; expected e.g. `10..90 step 10`"));
    let (range, step) = match spec.split_once("step").or_else(|| spec.split_once(':')) {
        Some((r, s)) => (r.trim(), s.trim().parse::<u32>().map_err(|_| bad())?),
        None => (spec.trim(), 10),
    };
    let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
    let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
    if step == 0 || lo == 0 || lo > hi || hi > 95 {
        return Err(bad());
    }
    Ok((lo..=hi).step_by(step as usize).map(|p| p as Real / 100.0).collect())
}

fn parse_mode(name: &str) -> Result<OcclusionMode> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| Error::invalid(format!("unknown occlusion mode `{name}` (random-cells, half-space, spherical-blob)")))
}

#[derive(serde::Deserialize)]
struct PairRecord {
    id: String,
    truth: PathBuf,
    prediction: PathBuf,
    #[serde(default)]
    partial: Option<PathBuf>,
}

fn pair_rows(cfg: &RunConfig, path: &Path) -> Result<Vec<MetricRow>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let settings = cfg.eval.settings();
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(file).deserialize() {
        let rec: PairRecord = rec?;
        let truth = read_vox(base.join(&rec.truth))?;
        let pred = read_vox(base.join(&rec.prediction))?;
        let partial = rec
            .partial
            .filter(|p| !p.as_os_str().is_empty())
            .map(|p| read_vox(base.join(p)))
            .transpose()?;
        let report = evaluate(&truth, &pred, partial.as_ref(), &settings)?;
        rows.push(MetricRow::new(rec.id, &report, None, "pairs"));
    }
    Ok(rows)
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.run_dir.join("eval"));
    let (label, rows) = match (&args.pairs, &args.checkpoint) {
        (Some(p), _) => ("pairs".to_string(), pair_rows(cfg, p)?),
        (None, Some(ck)) => {
            let mut model = load_model(ck)?;
            let data_dir = args.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let ds = load_dataset(&model.config, &data_dir)?;
            let test = ds.grids(Split::Test);
            let settings = cfg.eval.settings();
            let mode = match &args.mode {
                Some(m) => parse_mode(m)?,
                None => cfg.eval.occlusion_mode,
            };
            let label = format!("n={}", model.n_experts());
            let rows = if model.config.task == Task::Generation {
                generation_rows(&mut model, &test, &settings)?
            } else if let Some(sweep) = &args.occlusion_sweep {
                occlusion_sweep(&mut model, &test, &parse_sweep(sweep)?, mode, &settings)?
            } else {
                let ratio = args.occlusion.unwrap_or(cfg.eval.occlusion_ratio);
                completion_rows(&mut model, &test, ratio, mode, &settings)?
            };
            (label, rows)
        }
        (None, None) => return Err(Error::invalid("eval needs --checkpoint or --pairs")),
    };
    std::fs::create_dir_all(&out)?;
    write_csv(&rows, File::create(out.join("metrics.csv"))?)?;
    let table = markdown_table("Evaluation", &[(label, rows)]);
    std::fs::write(out.join("metrics.md"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_mesh(args: &MeshArgs) -> Result<()> {
    let grid = read_vox(&args.input)?;
    let mesh = marching_cubes(&grid, args.iso);
    let out = args.out.clone().unwrap_or_else(|| args.input.with_extension("obj"));
    write_obj(&mesh, &out)?;
    println!(
        "{} vertices, {} triangles -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

/// `(family:id, grid)` pairs so results can be grouped by category.
fn categorized(ds: &Dataset, which: Split) -> Vec<(String, VoxelGrid)> {
    ds.split(which)
        .map(|i| {
            let family = i.spec.map_or("imported", |s| s.family.name());
            (format!("{family}:{}", i.id), i.grid.clone())
        })
        .collect()
}

fn category_of(id: &str) -> String {
    let reference = id.rsplit('~').next().unwrap_or(id);
    reference.split(':').next().unwrap_or(reference).to_string()
}

/// Per-task Markdown report of the expert-count sweep.
#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub markdown: String,
    pub rows: Vec<MetricRow>,
}

/// Trains and evaluates one model per expert count and task.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset, experts: &[usize], tasks: &[Task]) -> Result<AblationReport> {
    let train = training_grids(ds);
    let test = categorized(ds, Split::Test);
    let settings = cfg.eval.settings();
    let mut report = AblationReport::default();
    report.markdown.push_str("## Expert-count ablation (desk scale)\n\n");
    report.markdown.push_str(&format!(
        "Desk-scale values: {}³ procedural shapes, {} epochs, width multiplier {}, seed {}. \
         They are not comparable to full-scale results.\n\n",
        cfg.data.resolution, cfg.train.epochs, cfg.model.width, cfg.seed
    ));
    for &task in tasks {
        let mut by_cat: BTreeMap<String, Vec<TableEntry>> = BTreeMap::new();
        let mut consistency = Vec::new();
        for &n in experts {
            let mut c = cfg.clone();
            c.task = task;
            c.model.n_experts = n;
            c.routing.k = c.routing.k.min(n);
            c.routing.k_max = c.routing.k_max.min(n);
            c.routing.k_min = c.routing.k_min.min(c.routing.k_max);
            c.validate()?;
            info!("ablation: {task:?} with n={n}");
            let mut trainer = Trainer::new(&c, train.clone())?;
            trainer.train(|_, _| Ok(()))?;
            let mut rows = match task {
                Task::Completion => completion_rows(
                    &mut trainer.model,
                    &test,
                    c.eval.occlusion_ratio,
                    c.eval.occlusion_mode,
                    &settings,
                )?,
                Task::Generation => generation_rows(&mut trainer.model, &test, &settings)?,
            };
            if task == Task::Completion {
                let rc = routing_consistency(
                    &mut trainer.model,
                    &test,
                    c.eval.occlusion_ratio,
                    c.eval.occlusion_mode,
                    &settings,
                )?;
                consistency.push(format!("n={n}: {:.1}%", rc * 100.0));
            }
            let mut groups: BTreeMap<String, Vec<MetricRow>> = BTreeMap::new();
            for r in &rows {
                groups.entry(category_of(&r.id)).or_default().push(r.clone());
            }
            for (cat, rs) in groups {
                by_cat.entry(cat.clone()).or_default().push(TableEntry {
                    category: cat,
                    config: format!("n={n}"),
                    rows: rs,
                });
            }
            for r in &mut rows {
                r.id = format!("n={n}/{}", r.id);
            }
            report.rows.extend(rows);
        }
        let entries: Vec<TableEntry> = by_cat.into_values().flatten().collect();
        let (title, note) = match task {
            Task::Generation => (
                "Generation (desk scale)",
                "Each sample is scored against its nearest test shape by Chamfer distance.".to_string(),
            ),
            Task::Completion => (
                "Completion (desk scale)",
                format!(
                    "Test shapes with {:.0}% of occupied cells removed ({}).",
                    cfg.eval.occlusion_ratio * 100.0,
                    cfg.eval.occlusion_mode.name()
                ),
            ),
        };
        report.markdown.push_str(&category_table(title, &note, &entries));
        report.markdown.push('\n');
        if !consistency.is_empty() {
            report.markdown.push_str(&format!(
                "Routing consistency (share of test shapes whose top expert is the most common one \
                 for their family; uncalibrated diagnostic): {}.\n\n",
                consistency.join(", ")
            ));
        }
    }
    Ok(report)
}

pub fn cmd_ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<()> {
    let data_dir = args.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let ds = if data_dir.join(crate::voxel::MANIFEST_FILE).exists() {
        load_dataset(cfg, &data_dir)?
    } else {
        info!("no dataset at {}; synthesizing in memory", data_dir.display());
        Dataset::synthesize(cfg.data.count, cfg.data.resolution, cfg.data.seed)?
    };
    let tasks = args
        .tasks
        .iter()
        .map(|t| match t.as_str() {
            "completion" => Ok(Task::Completion),
            "generation" => Ok(Task::Generation),
            other => Err(Error::invalid(format!("unknown task `{other}` (completion, generation)"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if args.experts.is_empty() || args.experts.contains(&0) {
        return Err(Error::invalid("expert counts must be positive"));
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.run_dir.join("ablation"));
    write_resolved(cfg, &out)?;
    let report = run_ablation(cfg, &ds, &args.experts, &tasks)?;
    write_csv(&report.rows, File::create(out.join("ablation.csv"))?)?;
    std::fs::write(out.join("ablation.md"), &report.markdown)?;
    print!("{}", report.markdown);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_syntax() {
        let r = parse_sweep("10..90 step 10").unwrap();
        assert_eq!(r.len(), 9);
        assert_eq!(r[0], 0.1);
        assert_eq!(r[8], 0.9);
        assert_eq!(parse_sweep("10..90:20").unwrap(), vec![0.1, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(parse_sweep("50..50").unwrap(), vec![0.5]);
        for bad in ["", "90..10", "0..50", "10..99", "10..90 step 0", "a..b"] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::MissingInput("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite("nan".into())), 3);
        assert_eq!(
            exit_code(&Error::Config {
                key: "k".into(),
                reason: "r".into()
            }),
            1
        );
    }

    #[test]
    fn categories_from_ids() {
        assert_eq!(category_of("box:12"), "box");
        assert_eq!(category_of("sample3~ellipsoid:7"), "ellipsoid");
    }

    #[test]
    fn modes_parse_by_name() {
        assert_eq!(parse_mode("half-space").unwrap(), OcclusionMode::HalfSpace);
        assert!(parse_mode("cube").is_err());
    }
}
