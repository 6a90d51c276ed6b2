//! Command-line front end. Every command reads its inputs from files, derives
//! its randomness from the root seed and refuses to overwrite existing outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pns::arrayio::{self, Dtype};
use pns::baselines::{bo_fit, bo_predict, segment_partition, BoConfig, CalibrationObjective, PnsPersonalizer};
use pns::epsim::{simulate, stimulus_at, Observation, Stimulus, SubjectBank};
use pns::error::{Error, Result};
use pns::eval::{
    choose_contexts, context_sweep, evaluate, write_metrics, ContextChoice, MetaPersonalizer, Personalizer, Split,
};
use pns::geometry::{build_hierarchy, GraphHierarchy, MeshGeometry};
use pns::metainfer::{posterior, ContextSet, SetEmbedding};
use pns::pipeline::{self, ExperimentConfig, Stage};
use pns::seed;
use pns::surrogate::{predict_from, StimulusEncoding};
use pns::training::{self, Checkpoint, TrainMode, TrainState};

#[derive(Parser)]
#[command(name = "pns", version, about = "Personalized neural surrogates for cardiac electrophysiology")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads of the shared pool (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mesh files and graph hierarchies.
    #[command(subcommand)]
    Mesh(MeshCmd),
    /// Simulations and datasets.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Meta-trains the surrogate on a dataset.
    Train(TrainArgs),
    /// Surrogate inference.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Scores a checkpoint on a dataset.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Comparison methods.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Runs pipeline stages of the configuration.
    Pipeline(PipelineArgs),
    /// Renders figures and tables of a pipeline run directory.
    Report {
        /// Run directory (default: `out_dir` of the configuration).
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MeshCmd {
    /// Prints counts and degree statistics of a mesh file.
    Info { file: PathBuf },
    /// Writes a triangulated nx × ny sheet.
    Grid {
        #[arg(long)]
        nx: usize,
        #[arg(long)]
        ny: usize,
        #[arg(long, default_value_t = 1.0)]
        spacing: f64,
    },
    /// Writes a subdivided icosahedron.
    Icosphere {
        #[arg(long)]
        subdivisions: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
    },
    /// Coarsens a mesh into a graph hierarchy (JSON).
    Hierarchy {
        file: PathBuf,
        #[arg(long, default_value_t = pns::geometry::DEFAULT_LEVELS)]
        levels: usize,
        #[arg(long, default_value_t = pns::geometry::DEFAULT_RATIO)]
        ratio: f64,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Simulates one stimulation of one configured subject into a `frames × N` array.
    Run {
        #[arg(long)]
        subject: String,
        #[arg(long)]
        origin: usize,
    },
    /// Generates the configured dataset.
    Dataset,
    /// Summarizes a dataset directory.
    Inspect { dir: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-sequence conditioning instead of set conditioning.
    #[arg(long)]
    pns: bool,
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Predicts the mean potential sequence of a stimulus given context observations.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        /// Stimulated node, optionally `node:onset:duration:amplitude`.
        #[arg(long)]
        stim: String,
        /// Observation arrays (`frames × sensors`) on the sensor layout of `--data`.
        #[arg(long, num_args = 0..)]
        context: Vec<PathBuf>,
        /// Dataset whose sensor layout the context arrays use.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short = 'T', long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `size` or `size:sets`; defaults to the configuration.
    #[arg(long)]
    contexts: Option<String>,
    /// Scores the checkpoint with per-sequence conditioning.
    #[arg(long)]
    pns: bool,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Context and target scores of every subject.
    Run(EvalArgs),
    /// Target scores at every configured context size.
    Sweep(EvalArgs),
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// Calibrates segment excitabilities of one subject against its context.
    Bo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subject: String,
        /// Comma-separated record indices.
        #[arg(long)]
        context: String,
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long, default_value_t = 7)]
        segments: usize,
    },
    /// Trains the per-sequence baseline.
    PnsTrain(TrainArgs),
    /// Scores the per-sequence baseline.
    PnsEval(EvalArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Comma-separated subset of dataset,train,eval,sweep,baselines,plots (default: all).
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--workers: {e}")))?;
    }
    let ctx = Ctx { config: cli.config, seed: cli.seed, out: cli.out, force: cli.force };
    match cli.command {
        Command::Mesh(cmd) => mesh(&ctx, cmd),
        Command::Sim(cmd) => sim(&ctx, cmd),
        Command::Train(args) => train(&ctx, &args, false),
        Command::Model(ModelCmd::Rollout { ckpt, stim, context, data, frames, samples }) => {
            rollout(&ctx, &ckpt, &stim, &context, data.as_deref(), frames, samples)
        }
        Command::Eval(EvalCmd::Run(args)) => eval(&ctx, &args, false),
        Command::Eval(EvalCmd::Sweep(args)) => eval(&ctx, &args, true),
        Command::Baseline(BaselineCmd::Bo { data, subject, context, budget, segments }) => {
            bo(&ctx, &data, &subject, &context, budget, segments)
        }
        Command::Baseline(BaselineCmd::PnsTrain(args)) => train(&ctx, &args, true),
        Command::Baseline(BaselineCmd::PnsEval(args)) => eval(&ctx, &EvalArgs { pns: true, ..args }, false),
        Command::Pipeline(args) => run_pipeline(&ctx, &args),
        Command::Report { dir } => {
            let dir = match dir {
                Some(d) => d,
                None => ctx.experiment()?.out_dir,
            };
            for path in pns::report::render_reports(&dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
}

impl Ctx {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        let mut config = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        Ok(config)
    }

    fn root_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The `--out` path, which must not exist yet unless `--force`.
    fn output(&self) -> Result<PathBuf> {
        let out = self.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
        if out.exists() && !self.force {
            return Err(Error::Config(format!("{} exists; pass --force to replace it", out.display())));
        }
        Ok(out)
    }
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value).map_err(format_err)?)?;
    Ok(())
}

fn mesh(ctx: &Ctx, cmd: MeshCmd) -> Result<()> {
    match cmd {
        MeshCmd::Info { file } => {
            let mesh = MeshGeometry::read(&file)?;
            mesh.validate()?;
            let graph = pns::geometry::build_graph(&mesh)?;
            let degrees = graph.degrees();
            let mean = degrees.iter().sum::<usize>() as f64 / degrees.len() as f64;
            println!("name      {}", mesh.name);
            println!("vertices  {}", mesh.vertex_count());
            println!("faces     {}", mesh.faces.len());
            println!("edges     {}", graph.edges.len());
            println!("degree    min {} mean {mean:.2} max {}", degrees.iter().min().unwrap(), graph.max_degree());
            Ok(())
        }
        MeshCmd::Grid { nx, ny, spacing } => write_mesh(ctx, MeshGeometry::grid(nx, ny, spacing)),
        MeshCmd::Icosphere { subdivisions, radius } => write_mesh(ctx, MeshGeometry::icosphere(subdivisions, radius)),
        MeshCmd::Hierarchy { file, levels, ratio } => {
            let out = ctx.output()?;
            let mesh = MeshGeometry::read(&file)?;
            let hier = build_hierarchy(&mesh, levels, ratio, seed::derive(ctx.root_seed(), "hierarchy"))?;
            println!("levels {:?}", hier.node_counts());
            write_json(&out, &hier)
        }
    }
}

fn write_mesh(ctx: &Ctx, mesh: MeshGeometry) -> Result<()> {
    let out = ctx.output()?;
    mesh.validate()?;
    mesh.write(&out)?;
    println!("{} vertices, {} faces → {}", mesh.vertex_count(), mesh.faces.len(), out.display());
    Ok(())
}

fn sim(ctx: &Ctx, cmd: SimCmd) -> Result<()> {
    match cmd {
        SimCmd::Run { subject, origin } => {
            let config = ctx.experiment()?;
            let out = ctx.output()?;
            let hier = config.hierarchy()?;
            let scar = config
                .dataset
                .subjects
                .iter()
                .find(|s| s.name == subject)
                .ok_or_else(|| Error::Config(format!("no subject `{subject}` in the configuration")))?;
            let tissue = scar.tissue(hier.finest(), config.dataset.sim.ap.a_healthy)?;
            let st = config.dataset.stimulus;
            if origin >= hier.finest().node_count {
                return Err(Error::Config(format!("origin {origin} outside the mesh")));
            }
            let stim = stimulus_at(&hier, origin, st.onset, st.duration, st.amplitude);
            let rec = simulate(&hier, &tissue, &stim, &config.dataset.sim, &subject)?;
            arrayio::save(&out, &rec.x, Dtype::F32)?;
            println!("{} × {} → {}", rec.frames(), rec.nodes(), out.display());
            Ok(())
        }
        SimCmd::Dataset => {
            let config = ctx.experiment()?;
            let out = ctx.output()?;
            let (bank, hier) = pipeline::build_dataset(&config)?;
            bank.save(&out, &hier)?;
            println!("{} subjects, {} records → {}", bank.subjects.len(), bank.record_count(), out.display());
            Ok(())
        }
        SimCmd::Inspect { dir } => {
            let (bank, hier) = SubjectBank::load(&dir)?;
            println!("mesh      {} ({:?} nodes per level)", bank.mesh_id, hier.node_counts());
            println!("sim       dt {} × {} substeps, {} frames", bank.sim.dt, bank.sim.substeps, bank.sim.frames);
            println!("sensors   {}", bank.sensor_nodes.len());
            for s in &bank.subjects {
                let scar = s.tissue.scar_mask.iter().filter(|&&m| m).count();
                println!("subject   {:<16} {} records, {scar} scar nodes", s.key, s.len());
            }
            Ok(())
        }
    }
}

fn train(ctx: &Ctx, args: &TrainArgs, pns_mode: bool) -> Result<()> {
    let config = ctx.experiment()?;
    let out = ctx.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    if args.resume.is_none() {
        ctx.output()?;
    }
    let (bank, hier) = SubjectBank::load(&args.data)?;
    let mode = if pns_mode || args.pns { TrainMode::Pns } else { TrainMode::Meta };
    let train_config = match mode {
        TrainMode::Meta => pipeline::meta_train_config(&config, 0),
        TrainMode::Pns => pipeline::pns_train_config(&config),
    };
    let state = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.train != train_config {
                return Err(Error::Config(format!("{} was trained with different settings", path.display())));
            }
            TrainState::from_checkpoint(ckpt)
        }
        None => TrainState::fresh(&config.arch, &hier, &train_config)?,
    };
    let start = state.episode;
    let (state, log) = training::train(&bank, &hier, state, &train_config, Some(&out))?;
    if let (Some(first), Some(last)) = (log.iter().find(|r| r.step == start), log.last()) {
        println!("episodes {start}..{}: total {:.4} → {:.4}", state.episode, first.total, last.total);
    }
    println!("{}", out.join(training::FINAL_CHECKPOINT).display());
    Ok(())
}

fn parse_stimulus(spec: &str, hier: &GraphHierarchy) -> Result<Stimulus> {
    let bad = || Error::Config(format!("--stim `{spec}`: expected node[:onset:duration:amplitude]"));
    let parts: Vec<&str> = spec.split(':').collect();
    let node: usize = parts[0].parse().map_err(|_| bad())?;
    let (onset, duration, amplitude) = match parts.len() {
        1 => (0.0, 1.0, 0.5),
        4 => {
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            (f(parts[1])?, f(parts[2])?, f(parts[3])?)
        }
        _ => return Err(bad()),
    };
    if node >= hier.finest().node_count {
        return Err(Error::Config(format!("stimulus node {node} outside the mesh")));
    }
    Ok(stimulus_at(hier, node, onset, duration, amplitude))
}

fn rollout(
    ctx: &Ctx,
    ckpt: &Path,
    stim: &str,
    context: &[PathBuf],
    data: Option<&Path>,
    frames: Option<usize>,
    samples: usize,
) -> Result<()> {
    let out = ctx.output()?;
    let ckpt = Checkpoint::load(ckpt)?;
    let hier = &ckpt.hierarchy;
    let ops = ckpt.model.graph_ops(hier);
    let stimulus = parse_stimulus(stim, hier)?;
    let embedding = if context.is_empty() {
        SetEmbedding::standard(ckpt.model.arch.cond_dim)
    } else {
        let data = data.ok_or_else(|| Error::Config("--context needs --data for the sensor layout".into()))?;
        let (bank, _) = SubjectBank::load(data)?;
        let items = context
            .iter()
            .map(|p| Ok(Observation { y: arrayio::load(p)?, sensor_nodes: bank.sensor_nodes.clone(), noise_std: 0.0 }))
            .collect::<Result<Vec<_>>>()?;
        posterior(&ckpt.model, &ops, &ContextSet::new("cli", items)?, None)?
    };
    let s = StimulusEncoding::new(&stimulus, ops.finest_nodes(), ckpt.model.arch.stimulus_timing)?;
    let frames = frames.unwrap_or(ckpt.model.arch.frames);
    let pred = predict_from(&ckpt.model, &ops, &s, &embedding, samples, frames, seed::derive(ctx.root_seed(), "rollout"))?;
    arrayio::save(&out, &pred.mean, Dtype::F32)?;
    println!("{} × {} mean of {samples} samples → {}", pred.mean.nrows(), pred.mean.ncols(), out.display());
    Ok(())
}

fn context_choices(config: &ExperimentConfig, bank: &SubjectBank, spec: Option<&str>) -> Result<Vec<ContextChoice>> {
    let (size, sets) = match spec {
        None => (config.eval.context_size, config.eval.sets_per_subject),
        Some(s) => {
            let bad = || Error::Config(format!("--contexts `{s}`: expected size or size:sets"));
            let mut it = s.split(':').map(|p| p.parse::<usize>().map_err(|_| bad()));
            let size = it.next().ok_or_else(bad)??;
            let sets = it.next().transpose()?.unwrap_or(1);
            if it.next().is_some() {
                return Err(bad());
            }
            (size, sets)
        }
    };
    choose_contexts(bank, size, sets, seed::derive(config.seed, "contexts"))
}

fn eval(ctx: &Ctx, args: &EvalArgs, sweep: bool) -> Result<()> {
    let config = ctx.experiment()?;
    let out = ctx.output()?;
    let (bank, hier) = SubjectBank::load(&args.data)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let ops = ckpt.model.graph_ops(&hier);
    let samples = config.eval.samples;
    let meta = MetaPersonalizer { name: pipeline::META_MODEL.into(), model: &ckpt.model, ops: &ops, samples };
    let single = PnsPersonalizer { name: pipeline::PNS_MODEL.into(), model: &ckpt.model, ops: &ops, samples };
    let method: &dyn Personalizer = if args.pns { &single } else { &meta };
    let choices = context_choices(&config, &bank, args.contexts.as_deref())?;
    let eval_seed = seed::derive(config.seed, "eval");
    let rows = if sweep {
        let sizes: Vec<usize> = config.eval.sweep.iter().copied().filter(|&nu| nu <= choices[0].context.len()).collect();
        context_sweep(method, &bank, &choices, &sizes, eval_seed)?
    } else {
        evaluate(method, &bank, &choices, &[Split::Context, Split::Target], eval_seed)?.rows
    };
    write_metrics(&out, &rows)?;
    for r in rows.iter().filter(|r| r.subject == "all") {
        println!("{} {} ν={} mse {:.4} cc {:.3} dc {:.3}", r.model, r.split, r.nu, r.mse_mean, r.cc_mean, r.dc_mean);
    }
    Ok(())
}

fn bo(ctx: &Ctx, data: &Path, subject: &str, context: &str, budget: usize, segments: usize) -> Result<()> {
    let out = ctx.output()?;
    let (bank, hier) = SubjectBank::load(data)?;
    let si = bank
        .subjects
        .iter()
        .position(|s| s.key == subject)
        .ok_or_else(|| Error::Config(format!("no subject `{subject}` in {}", data.display())))?;
    let subj = &bank.subjects[si];
    let indices = context
        .split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(i) if i < subj.len() => Ok(i),
            _ => Err(Error::Config(format!("--context entry `{s}` is not a record of `{subject}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let set = ContextSet::new(subject, indices.iter().map(|&i| subj.observations[i].clone()).collect())?;
    let stimuli: Vec<Stimulus> = indices.iter().map(|&i| subj.records[i].stimulus.clone()).collect();
    let root = ctx.root_seed();
    let partition = segment_partition(&hier, segments, seed::derive(root, "segments"))?;
    let healthy = bank.sim.ap.a_healthy;
    let objective = CalibrationObjective::new(&hier, &bank.sim, &partition, healthy, &set, &stimuli)?;
    let config = BoConfig { budget, seed: seed::derive_index(seed::derive(root, "bo"), si as u64), ..BoConfig::default() };
    let fit = bo_fit(&objective, &config)?;
    fs::create_dir_all(&out)?;
    write_json(
        &out.join("fit.json"),
        &serde_json::json!({
            "subject": subject,
            "context": indices,
            "theta": fit.theta,
            "objective": fit.objective,
            "calls": fit.calls,
            "points": fit.state.points,
            "values": fit.state.values,
            "unstable": fit.state.unstable,
            "segments": partition.segment,
        }),
    )?;
    for (r, rec) in subj.records.iter().enumerate().filter(|(r, _)| !indices.contains(r)) {
        let pred = bo_predict(&fit.theta, &rec.stimulus, &hier, &partition, &bank.sim, healthy)?;
        arrayio::save(&out.join(format!("target_r{r:03}.pnsa")), &pred.x, Dtype::F32)?;
    }
    println!("θ̂ {:?}, objective {:.5}, {} evaluations", fit.theta, fit.objective, fit.calls);
    Ok(())
}

fn run_pipeline(ctx: &Ctx, args: &PipelineArgs) -> Result<()> {
    let config = ctx.experiment()?;
    let stages = match &args.stages {
        None => Stage::ALL.to_vec(),
        Some(names) => names.iter().filter(|s| !s.is_empty()).map(|s| s.parse()).collect::<Result<Vec<Stage>>>()?,
    };
    let run = pipeline::run_pipeline(&config, &stages, ctx.force)?;
    for stage in &run.ran {
        println!("ran      {stage:<10} {:.1}s", run.manifest.stages[stage].seconds);
    }
    for stage in &run.skipped {
        println!("skipped  {stage}");
    }
    println!("{}", config.out_dir.join(pipeline::MANIFEST_FILE).display());
    Ok(())
}
