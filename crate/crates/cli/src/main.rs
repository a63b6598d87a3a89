use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use seqspace::checkpoint::{load_checkpoint, save_checkpoint};
use seqspace::geometry::{barrier_height, find_basins, line_profile, FlowConfig};
use seqspace::io::{
    from_json, read_json, read_text, read_voxel_table, sha256_hex, to_json_pretty, write_bytes,
    write_plotdata, write_profile, write_report, write_voxel_table, Manifest,
};
use seqspace::longitudinal::{
    roi_centroid, run_longitudinal, LongitudinalConfig, LongitudinalOutput, Membership, NormPolicy,
    RoiFile, RoiSelector,
};
use seqspace::phantom::{build_scenario, ScenarioSpec, ScenarioTruth};
use seqspace::{EnergyModel, NormMethod, TrainConfig, VoxelTable, Want};

#[derive(Parser)]
#[command(
    name = "seqspace",
    version,
    about = "Energy landscapes over MRI sequence space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-tissue scenario (baseline, follow-ups, ROIs).
    Synth(SynthArgs),
    /// Fit an energy model to a baseline voxel table.
    Train(TrainArgs),
    /// Energy, score and Laplacian for every row of a table.
    Eval(EvalArgs),
    /// Detect energy minima by gradient descent from sampled voxels.
    Basins(BasinsArgs),
    /// Energy profile along a segment in sequence space.
    Profile(ProfileArgs),
    /// Compare follow-up scans against the frozen baseline landscape.
    Longitudinal(LongitudinalArgs),
    /// Per-voxel projection/energy/gradient tables for plotting.
    Plotdata(PlotdataArgs),
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice made by the command.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Contents of a `--config` file. Sections a command does not use are
/// ignored by it.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: Option<u64>,
    train: TrainConfig,
    flow: FlowConfig,
    longitudinal: LongitudinalConfig,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json::<RunConfig>(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        Ok(cfg)
    }
}

fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_hex(
        serde_json::to_string(value)
            .expect("serializable")
            .as_bytes(),
    )
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    Stable,
    Recurrence,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioKind,
    /// Voxels per scan.
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Serialize)]
struct ScenarioFile<'a> {
    version: u32,
    spec: &'a ScenarioSpec,
    truth: &'a ScenarioTruth,
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let seed = cfg.seed.unwrap_or(0);
    let spec = match args.scenario {
        ScenarioKind::Stable => ScenarioSpec::stable(args.n, seed),
        ScenarioKind::Recurrence => ScenarioSpec::recurrence(args.n, seed),
    };
    let scenario = build_scenario(&spec)?;
    let out = &args.out;
    let mut outputs = Vec::new();
    let t0 = out.join("t0.csv");
    write_voxel_table(&t0, &scenario.baseline.table)?;
    outputs.push(t0);
    for (k, (_, followup)) in scenario.followups.iter().enumerate() {
        let path = out.join(format!("t{}.csv", k + 1));
        write_voxel_table(&path, &followup.table)?;
        outputs.push(path);
    }
    let rois = RoiFile {
        version: 1,
        healthy: RoiSelector::Rows(scenario.healthy_rows.clone()),
        tumour: RoiSelector::Rows(scenario.tumour_rows.clone()),
    };
    let rois_path = out.join("rois.json");
    write_bytes(&rois_path, to_json_pretty(&rois).as_bytes())?;
    outputs.push(rois_path);
    let scenario_path = out.join("scenario.json");
    let file = ScenarioFile {
        version: 1,
        spec: &spec,
        truth: &scenario.truth,
    };
    write_bytes(&scenario_path, to_json_pretty(&file).as_bytes())?;
    outputs.push(scenario_path);
    Manifest::record(out, "synth", &digest_of(&spec), seed, &[], &outputs)?;
    eprintln!("wrote {} files to {}", outputs.len(), out.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Baseline voxel table (CSV).
    #[arg(long = "in")]
    input: PathBuf,
    /// Checkpoint to write (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Noise level in normalized units.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Per-channel normalization: robust, zscore or none.
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormMethod>,
    /// Also write the per-epoch loss trace (JSON).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn parse_norm(s: &str) -> Result<NormMethod, String> {
    s.parse().map_err(|e: seqspace::Error| e.to_string())
}

fn train(args: TrainArgs) -> Result<()> {
    let run = args.common.load()?;
    let mut cfg = run.train;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.norm {
        cfg.norm = v;
    }
    cfg.validate()?;
    let table = read_voxel_table(&args.input)?;
    let (model, trace) = seqspace::train::train_with_progress(&table, &cfg, |epoch, loss| {
        eprintln!("epoch {epoch:>4}  loss {loss:.6}");
    })?;
    save_checkpoint(&model, &args.out)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(path) = &args.trace {
        write_bytes(path, to_json_pretty(&trace).as_bytes())?;
        outputs.push(path.clone());
    }
    Manifest::record(
        &dir_of(&args.out),
        "train",
        &digest_of(&cfg),
        cfg.seed,
        std::slice::from_ref(&args.input),
        &outputs,
    )?;
    eprintln!(
        "trained in {:.1}s, wrote {}",
        trace.seconds,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Voxel table in raw intensities.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV: energy, grad_norm, laplacian and one score column per
    /// channel, in raw intensity units.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn eval(args: EvalArgs) -> Result<()> {
    let run = args.common.load()?;
    let model = load_checkpoint(&args.model)?;
    let table = read_voxel_table(&args.input)?;
    table.check_dim(model.d())?;
    let mut text = String::from("energy,grad_norm,laplacian");
    for c in table.channels() {
        text.push_str(&format!(",score_{c}"));
    }
    text.push('\n');
    for u in table.rows() {
        let ev = model.evaluate_raw(u, Want::ALL)?;
        let score = ev.score.unwrap_or_default();
        let g = score.iter().map(|s| s * s).sum::<f64>().sqrt();
        text.push_str(&format!(
            "{},{},{}",
            ev.energy,
            g,
            ev.laplacian.unwrap_or_default()
        ));
        for s in &score {
            text.push_str(&format!(",{s}"));
        }
        text.push('\n');
    }
    write_bytes(&args.out, text.as_bytes())?;
    Manifest::record(
        &dir_of(&args.out),
        "eval",
        &digest_of(&()),
        run.seed.unwrap_or(0),
        &[args.model.clone(), args.input.clone()],
        std::slice::from_ref(&args.out),
    )?;
    Ok(())
}

#[derive(Args)]
struct BasinsArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Voxel table whose masked rows seed the descent.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output JSON with the detected minima.
    #[arg(long)]
    out: PathBuf,
    /// Number of seed voxels drawn from the table.
    #[arg(long, default_value_t = 2000)]
    seeds: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Serialize)]
struct BasinRecord {
    location: Vec<f64>,
    location_raw: Vec<f64>,
    energy: f64,
    seeds: usize,
}

#[derive(Serialize)]
struct BasinsFile {
    version: u32,
    n_seeds: usize,
    n_converged: usize,
    minima: Vec<BasinRecord>,
}

fn basins(args: BasinsArgs) -> Result<()> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let run = args.common.load()?;
    let seed = run.seed.unwrap_or(0);
    let model = load_checkpoint(&args.model)?;
    let table = read_voxel_table(&args.input)?;
    table.check_dim(model.d())?;
    let mut rows = table.masked_indices();
    rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    rows.truncate(args.seeds.max(1));
    let seeds = model.meta.norm.normalize_table(&table.select(&rows)?)?;
    let map = find_basins(&model, &seeds, &run.flow)?;
    let counts =
        (0..map.minima.len()).map(|i| map.assignment.iter().filter(|a| **a == Some(i)).count());
    let file = BasinsFile {
        version: 1,
        n_seeds: rows.len(),
        n_converged: map.converged.iter().filter(|c| **c).count(),
        minima: map
            .minima
            .iter()
            .zip(counts)
            .map(|(m, seeds)| BasinRecord {
                location_raw: model.meta.norm.denormalize(&m.location),
                location: m.location.clone(),
                energy: m.energy,
                seeds,
            })
            .collect(),
    };
    write_bytes(&args.out, to_json_pretty(&file).as_bytes())?;
    Manifest::record(
        &dir_of(&args.out),
        "basins",
        &digest_of(&(&run.flow, args.seeds)),
        seed,
        &[args.model.clone(), args.input.clone()],
        std::slice::from_ref(&args.out),
    )?;
    eprintln!("{} minima from {} seeds", file.minima.len(), file.n_seeds);
    Ok(())
}

#[derive(Args)]
struct ProfileArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Start point in raw intensities, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    from: Option<Vec<f64>>,
    /// End point in raw intensities, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    to: Option<Vec<f64>>,
    /// ROI file; with --baseline, profiles the healthy→tumour axis.
    #[arg(long, requires = "baseline", conflicts_with_all = ["from", "to"])]
    roi: Option<PathBuf>,
    /// Baseline voxel table the ROIs refer to.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Points along the segment.
    #[arg(long, default_value_t = seqspace::geometry::PROFILE_SAMPLES)]
    samples: usize,
    /// Extension beyond each endpoint, as a fraction of the segment.
    #[arg(long, default_value_t = seqspace::geometry::PROFILE_MARGIN)]
    margin: f64,
    /// Output CSV: t, energy, grad_norm, laplacian.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn axis_endpoints(
    model: &EnergyModel,
    roi: &Path,
    baseline: &Path,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rois: RoiFile = read_json(roi)?;
    let table = read_voxel_table(baseline)?;
    table.check_dim(model.d())?;
    let normalized = model.meta.norm.normalize_table(&table)?;
    let (h, t) = rois.rois();
    Ok((
        roi_centroid(&normalized, &h)?,
        roi_centroid(&normalized, &t)?,
    ))
}

fn profile(args: ProfileArgs) -> Result<()> {
    let run = args.common.load()?;
    let model = load_checkpoint(&args.model)?;
    let mut inputs = vec![args.model.clone()];
    let (p0, p1) = match (&args.roi, &args.baseline, &args.from, &args.to) {
        (Some(roi), Some(baseline), _, _) => {
            inputs.extend([roi.clone(), baseline.clone()]);
            axis_endpoints(&model, roi, baseline)?
        }
        (None, _, Some(a), Some(b)) => {
            let norm = &model.meta.norm;
            if a.len() != model.d() || b.len() != model.d() {
                bail!(seqspace::Error::Input(format!(
                    "endpoints need {} components",
                    model.d()
                )));
            }
            (norm.normalize(a), norm.normalize(b))
        }
        _ => bail!(seqspace::Error::Config(
            "give either --from and --to, or --roi and --baseline".into()
        )),
    };
    let prof = line_profile(&model, &p0, &p1, args.samples, args.margin)?;
    write_profile(&args.out, &prof)?;
    let barrier = barrier_height(&prof);
    println!(
        "{}",
        serde_json::json!({
            "segment_length": prof.segment_length(),
            "barrier_height": barrier.map(|b| b.height),
            "ridge_t": barrier.map(|b| prof.t[b.ridge_index]),
        })
    );
    Manifest::record(
        &dir_of(&args.out),
        "profile",
        &digest_of(&(args.samples, args.margin)),
        run.seed.unwrap_or(0),
        &inputs,
        std::slice::from_ref(&args.out),
    )?;
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Baseline,
    PerScan,
}

#[derive(Clone, Copy, ValueEnum)]
enum MembershipArg {
    Descent,
    NearestMinimum,
}

#[derive(Args)]
struct StudyArgs {
    /// Frozen baseline checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Baseline voxel table the ROIs refer to.
    #[arg(long)]
    baseline: PathBuf,
    /// ROI file (JSON) with healthy and tumour selectors.
    #[arg(long)]
    roi: PathBuf,
    /// Follow-up tables in time order; labels are the file stems.
    #[arg(long, num_args = 0..)]
    followups: Vec<PathBuf>,
    /// Label shuffles for the permutation test.
    #[arg(long)]
    n_perm: Option<usize>,
    /// Seeds for basin detection.
    #[arg(long)]
    basin_seeds: Option<usize>,
    /// Normalization of follow-up scans.
    #[arg(long, value_enum)]
    norm_policy: Option<PolicyArg>,
    /// How voxels are assigned to the healthy basin.
    #[arg(long, value_enum)]
    membership: Option<MembershipArg>,
    #[command(flatten)]
    common: Common,
}

struct Study {
    config: LongitudinalConfig,
    output: LongitudinalOutput,
    inputs: Vec<PathBuf>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_study(args: &StudyArgs) -> Result<Study> {
    let run = args.common.load()?;
    let mut cfg = run.longitudinal;
    cfg.flow = run.flow;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(v) = args.n_perm {
        cfg.n_perm = v;
    }
    if let Some(v) = args.basin_seeds {
        cfg.basin_seeds = v;
    }
    if let Some(v) = args.norm_policy {
        cfg.norm_policy = match v {
            PolicyArg::Baseline => NormPolicy::Baseline,
            PolicyArg::PerScan => NormPolicy::PerScan,
        };
    }
    if let Some(v) = args.membership {
        cfg.membership = match v {
            MembershipArg::Descent => Membership::Descent,
            MembershipArg::NearestMinimum => Membership::NearestMinimum,
        };
    }
    cfg.validate()?;
    let model = load_checkpoint(&args.model)?;
    let baseline = read_voxel_table(&args.baseline)?;
    let rois: RoiFile = from_json(&read_text(&args.roi)?)?;
    let (healthy, tumour) = rois.rois();
    let followups: Vec<(String, VoxelTable)> = args
        .followups
        .iter()
        .map(|p| Ok((stem(p), read_voxel_table(p)?)))
        .collect::<Result<_>>()?;
    let output = run_longitudinal(&model, &baseline, &healthy, &tumour, &followups, &cfg)?;
    let mut inputs = vec![args.model.clone(), args.baseline.clone(), args.roi.clone()];
    inputs.extend(args.followups.iter().cloned());
    Ok(Study {
        config: cfg,
        output,
        inputs,
    })
}

#[derive(Args)]
struct LongitudinalArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Report to write (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn longitudinal(args: LongitudinalArgs) -> Result<()> {
    let study = run_study(&args.study)?;
    let report = &study.output.report;
    write_report(&args.out, report)?;
    for t in &report.timepoints {
        eprintln!(
            "{:>8}  δE {:+.4} ± {:.4}  drift {:+.4} ± {:.4}  p_perm {:.2e}",
            t.label, t.delta_e, t.se_delta_e, t.drift, t.se_drift, t.p_perm
        );
    }
    Manifest::record(
        &dir_of(&args.out),
        "longitudinal",
        &report.digests.config,
        study.config.seed,
        &study.inputs,
        std::slice::from_ref(&args.out),
    )?;
    Ok(())
}

#[derive(Args)]
struct PlotdataArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Output directory: one `<label>.csv` per scan plus `axis_profile.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn plotdata(args: PlotdataArgs) -> Result<()> {
    let study = run_study(&args.study)?;
    let mut outputs = Vec::new();
    for plot in &study.output.plots {
        let path = args.out.join(format!("{}.csv", plot.label));
        write_plotdata(&path, plot)?;
        outputs.push(path);
    }
    let path = args.out.join("axis_profile.csv");
    write_profile(&path, &study.output.profile)?;
    outputs.push(path);
    Manifest::record(
        &args.out,
        "plotdata",
        &study.output.report.digests.config,
        study.config.seed,
        &study.inputs,
        &outputs,
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Basins(a) => basins(a),
        Command::Profile(a) => profile(a),
        Command::Longitudinal(a) => longitudinal(a),
        Command::Plotdata(a) => plotdata(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("command failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let lib = err
                .chain()
                .find_map(|e| e.downcast_ref::<seqspace::Error>());
            let (category, code) = match lib {
                Some(e) => (e.category(), e.exit_code()),
                None => ("runtime", 1),
            };
            let message = match lib {
                Some(e) => e.to_string(),
                None => format!("{err:#}"),
            };
            eprintln!("error[{category}]: {message}");
            ExitCode::from(code as u8)
        }
    }
}
