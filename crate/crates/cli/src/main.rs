//! `bunker`: simulate, train, generate collision data, fit the collision
//! model, evaluate and sweep override thresholds.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error.

mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bunker_core::collision_data::{generate_dataset, read_dataset};
use bunker_core::collision_model::{train_cm, BoostedEnsemble};
use bunker_core::curriculum::{train_curriculum, train_naive};
use bunker_core::env::write_trajectory_jsonl;
use bunker_core::eval::{
    evaluate_method, run_episode_with, threshold_sweep, Controller, Method, MethodArtifacts, NoopController,
    RandomController, ScriptedController,
};
use bunker_core::experiment::{run_experiment, summary, write_experiment, write_plot_csv, ExperimentConfig};
use bunker_core::inference::OverridePolicy;
use bunker_core::ppo::PolicyParams;
use bunker_core::reward::Phase;
use clap::{Args, Parser, Subcommand, ValueEnum};

use manifest::{file_hash, RunManifest};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bunker_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use bunker_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Format(_)
                | E::Version { .. }
                | E::MissingArtifact { .. }
                | E::Json(_)
                | E::TomlDe(_)
                | E::Dimension { .. }
                | E::DegenerateLabels(_) => 2,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(name = "bunker", version, about = "Container scheduling with curriculum PPO and collision-model overrides")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "BUNKER_OUT", default_value = "bunker-out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use the default facility with this many containers.
    #[arg(long, global = true)]
    containers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one episode and dump its trajectory as JSON lines.
    Simulate(SimulateArgs),
    /// Train naive or curriculum PPO agents.
    Train(TrainArgs),
    /// Generate the pairwise collision dataset.
    GenData(GenDataArgs),
    /// Fit the collision model on a generated dataset.
    TrainCm(TrainCmArgs),
    /// Evaluate trained agents, with or without overrides.
    Evaluate(EvaluateArgs),
    /// Evaluate the override rule over a grid of thresholds.
    Sweep(SweepArgs),
    /// Train, fit, sweep and evaluate in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// `random`, `scripted`, `noop` or the path of a policy weight file.
    #[arg(long, default_value = "random")]
    policy: String,
    /// Collision model; with a trained policy, enables overrides.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reward phase used to score actions (1, 2 or 3).
    #[arg(long, default_value_t = 3)]
    phase: u8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Naive,
    Curriculum,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "curriculum")]
    mode: Mode,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Total environment steps (curriculum budget).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainCmArgs {
    /// Dataset file (default: `<out>/pairs.jsonl`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ArtifactArgs {
    /// Directory holding `policy_<naive|cl>_<seed>.json` (default: `<out>`).
    #[arg(long)]
    policies: Option<PathBuf>,
    /// Collision model file (default: `<policies>/collision_model.json`).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Allow overrides while the PU is busy.
    #[arg(long)]
    no_pu_guard: bool,
    /// Evaluation master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    art: ArtifactArgs,
    /// Methods to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "naive,cl,cl_cm")]
    methods: Vec<String>,
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    art: ArtifactArgs,
    /// Threshold grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    thetas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
}

struct Ctx {
    cfg: ExperimentConfig,
    config_path: Option<PathBuf>,
    out: PathBuf,
}

impl Ctx {
    fn load(g: &Global) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                ExperimentConfig::from_toml_str(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(n) = g.containers {
            if n == 0 {
                return Err(CliError::Usage("--containers must be at least 1".into()));
            }
            cfg.containers = n;
            cfg.facility = None;
        }
        Ok(Self {
            cfg,
            config_path: g.config.clone(),
            out: g.out.clone(),
        })
    }

    fn manifest(&self, command: &str, inputs: BTreeMap<String, String>) -> Result<RunManifest> {
        self.cfg.validate()?;
        let json = serde_json::to_string(&self.cfg).map_err(bunker_core::Error::from)?;
        Ok(RunManifest::new(
            command,
            self.config_path.as_deref(),
            &json,
            self.cfg.seeds.clone(),
            self.cfg.schedule().phase_budgets,
            self.cfg.theta,
            self.cfg.delta,
            inputs,
            &self.out,
        ))
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        Ok(&self.out)
    }

    fn create(&self, name: &str) -> Result<BufWriter<std::fs::File>> {
        let path = self.out_dir()?.join(name);
        Ok(BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?))
    }
}

fn record_input(inputs: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
    let hash = file_hash(path).map_err(io_err(path))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    inputs.insert(name, hash);
    Ok(())
}

fn policy_path(dir: &Path, method: Method, seed: u64) -> PathBuf {
    let kind = if method == Method::Naive { "naive" } else { "cl" };
    dir.join(format!("policy_{kind}_{seed}.json"))
}

fn load_policies(dir: &Path, method: Method, seeds: &[u64], inputs: &mut BTreeMap<String, String>) -> Result<BTreeMap<u64, PolicyParams>> {
    let mut out = BTreeMap::new();
    for &s in seeds {
        let path = policy_path(dir, method, s);
        if !path.exists() {
            return Err(bunker_core::Error::MissingArtifact {
                seed: s,
                what: format!("{} not found", path.display()),
            }
            .into());
        }
        record_input(inputs, &path)?;
        out.insert(s, PolicyParams::load(&path)?);
    }
    Ok(out)
}

fn load_model(path: &Path, inputs: &mut BTreeMap<String, String>) -> Result<BoostedEnsemble> {
    record_input(inputs, path)?;
    Ok(BoostedEnsemble::load(path)?)
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> Result<()> {
    if let Some(t) = a.theta {
        ctx.cfg.theta = Some(t);
    }
    if let Some(d) = a.delta {
        ctx.cfg.delta = d;
    }
    let phase = match a.phase {
        1 => Phase::One,
        2 => Phase::Two,
        3 => Phase::Three,
        p => return Err(CliError::Usage(format!("--phase must be 1, 2 or 3, got {p}"))),
    };
    let facility = ctx.cfg.facility();
    let mut inputs = BTreeMap::new();
    let policy = match a.policy.as_str() {
        "random" | "scripted" | "noop" => None,
        path => Some(PolicyParams::load(Path::new(path)).inspect(|_| {
            let _ = record_input(&mut inputs, Path::new(path));
        })?),
    };
    let model = a.model.as_deref().map(|p| load_model(p, &mut inputs)).transpose()?;
    ctx.cfg.seeds = vec![a.seed];
    let manifest = ctx.manifest("simulate", inputs)?;
    let oc = ctx.cfg.override_config(ctx.cfg.theta.unwrap_or(0.5));
    let over;
    let ctl: &dyn Controller = match (a.policy.as_str(), &policy, &model) {
        ("random", ..) => &RandomController,
        ("scripted", ..) => &ScriptedController,
        ("noop", ..) => &NoopController,
        (_, Some(p), Some(m)) => {
            over = OverridePolicy {
                policy: p,
                ensemble: m,
                config: oc,
            };
            &over
        }
        (_, Some(p), None) => p,
        _ => unreachable!("policy loaded above"),
    };
    let run = run_episode_with(&facility, &facility.reward_params(phase), ctl, a.seed, true)?;

    let mut w = ctx.create(&format!("trajectory_{}.jsonl", a.seed))?;
    let header = serde_json::json!({
        "format": "bunker-trajectory",
        "version": 1,
        "manifest": manifest.hash,
        "seed": a.seed,
        "policy": a.policy,
    });
    let write = |w: &mut BufWriter<std::fs::File>| -> bunker_core::Result<()> {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        write_trajectory_jsonl(&run.trajectory, &mut *w)?;
        w.flush()?;
        Ok(())
    };
    write(&mut w)?;
    let metrics = serde_json::json!({ "manifest": manifest.hash, "metrics": run.metrics });
    let path = ctx.out.join(format!("metrics_{}.json", a.seed));
    std::fs::write(&path, serde_json::to_string_pretty(&metrics).map_err(bunker_core::Error::from)?)
        .map_err(io_err(&path))?;
    manifest.write(&ctx.out).map_err(io_err(&ctx.out))?;
    eprintln!(
        "simulated {} steps, {} empties, {:.1} volume processed{}",
        run.metrics.steps,
        run.metrics.empties,
        run.metrics.total_volume_processed,
        if run.metrics.terminated_early { ", overflowed" } else { "" }
    );
    Ok(())
}

fn cmd_train(ctx: &mut Ctx, a: &TrainArgs) -> Result<()> {
    if let Some(s) = &a.seeds {
        ctx.cfg.seeds = s.clone();
    }
    if let Some(n) = a.steps {
        ctx.cfg.total_steps = n;
    }
    let manifest = ctx.manifest("train", BTreeMap::new())?;
    let facility = ctx.cfg.facility();
    let schedule = ctx.cfg.schedule();
    let tag = manifest.tag();
    let kind = match a.mode {
        Mode::Naive => "naive",
        Mode::Curriculum => "cl",
    };
    for &seed in &ctx.cfg.seeds {
        let ppo = ctx.cfg.ppo_for(seed);
        let out = match a.mode {
            Mode::Curriculum => train_curriculum(&ppo, &facility, &schedule)?,
            Mode::Naive => train_naive(&ppo, &facility, schedule.effective_total(ppo.rollout_steps))?,
        };
        let path = ctx.out_dir()?.join(format!("policy_{kind}_{seed}.json"));
        out.params.save(&path, Some(&manifest.hash))?;
        let w = ctx.create(&format!("train_log_{kind}_{seed}.csv"))?;
        out.log.write_csv(w, Some(&tag))?;
        eprintln!("trained {kind} seed {seed}: {}", path.display());
    }
    manifest.write(&ctx.out).map_err(io_err(&ctx.out))?;
    Ok(())
}

fn cmd_gen_data(ctx: &mut Ctx, a: &GenDataArgs) -> Result<()> {
    if let Some(r) = a.reps {
        ctx.cfg.pair_data.repetitions = r;
    }
    if let Some(s) = a.seed {
        ctx.cfg.pair_data.seed = s;
    }
    let manifest = ctx.manifest("gen-data", BTreeMap::new())?;
    let path = ctx.out_dir()?.join("pairs.jsonl");
    let summary = generate_dataset(&ctx.cfg.pair_data, &path, Some(&manifest.hash))?;
    manifest.write(&ctx.out).map_err(io_err(&ctx.out))?;
    eprintln!(
        "{} samples ({} positive, rate {:.4}) in {}",
        summary.n_samples,
        summary.n_positive,
        summary.positive_rate,
        path.display()
    );
    Ok(())
}

fn cmd_train_cm(ctx: &mut Ctx, a: &TrainCmArgs) -> Result<()> {
    if let Some(s) = a.seed {
        ctx.cfg.cm.seed = s;
    }
    let data = a.data.clone().unwrap_or_else(|| ctx.out.join("pairs.jsonl"));
    if !data.exists() {
        return Err(CliError::Usage(format!("dataset {} not found", data.display())));
    }
    let mut inputs = BTreeMap::new();
    record_input(&mut inputs, &data)?;
    let manifest = ctx.manifest("train-cm", inputs)?;
    let samples = read_dataset(&data)?;
    let (ens, report) = train_cm(&samples, &ctx.cfg.cm)?;
    let out = ctx.out_dir()?.to_path_buf();
    ens.save(out.join("collision_model.json"), Some(&manifest.hash))?;
    let rep = serde_json::json!({ "manifest": manifest.hash, "report": report });
    let path = out.join("cm_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rep).map_err(bunker_core::Error::from)?)
        .map_err(io_err(&path))?;
    manifest.write(&out).map_err(io_err(&out))?;
    eprintln!("collision model: auc {:.4}, logloss {:.4}", report.auc, report.logloss);
    Ok(())
}

fn apply_artifact_args(ctx: &mut Ctx, a: &ArtifactArgs) -> (PathBuf, PathBuf) {
    if let Some(s) = &a.seeds {
        ctx.cfg.seeds = s.clone();
    }
    if let Some(r) = a.rollouts {
        ctx.cfg.n_rollouts = r;
        ctx.cfg.sweep_rollouts = r;
    }
    if let Some(d) = a.delta {
        ctx.cfg.delta = d;
    }
    if a.no_pu_guard {
        ctx.cfg.require_pu_free = false;
    }
    if let Some(s) = a.seed {
        ctx.cfg.eval_seed = s;
    }
    let dir = a.policies.clone().unwrap_or_else(|| ctx.out.clone());
    let model = a.model.clone().unwrap_or_else(|| dir.join("collision_model.json"));
    (dir, model)
}

fn cmd_evaluate(ctx: &mut Ctx, a: &EvaluateArgs) -> Result<()> {
    let (dir, model_path) = apply_artifact_args(ctx, &a.art);
    if let Some(t) = a.theta {
        ctx.cfg.theta = Some(t);
    }
    let methods: BTreeSet<Method> = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<bunker_core::Result<_>>()?;
    let mut inputs = BTreeMap::new();
    let mut policies = BTreeMap::new();
    for &m in &methods {
        let key = if m == Method::Naive { Method::Naive } else { Method::Cl };
        if !policies.contains_key(&key) {
            policies.insert(key, load_policies(&dir, key, &ctx.cfg.seeds, &mut inputs)?);
        }
    }
    let model = if methods.contains(&Method::ClCm) {
        if !model_path.exists() {
            return Err(CliError::Usage(format!("collision model {} not found", model_path.display())));
        }
        Some(load_model(&model_path, &mut inputs)?)
    } else {
        None
    };
    let manifest = ctx.manifest("evaluate", inputs)?;
    let facility = ctx.cfg.facility();
    let tag = manifest.tag();
    let mut reports = Vec::new();
    for &m in &methods {
        let key = if m == Method::Naive { Method::Naive } else { Method::Cl };
        let arts = MethodArtifacts {
            policies: &policies[&key],
            ensemble: model.as_ref(),
            override_config: ctx.cfg.override_config(ctx.cfg.theta.unwrap_or(0.5)),
        };
        let report = evaluate_method(m, &facility, &ctx.cfg.seeds, &arts, ctx.cfg.n_rollouts, ctx.cfg.eval_seed)?;
        report.write_csv(ctx.create(&format!("eval_{}.csv", m.label()))?, Some(&tag))?;
        eprintln!(
            "{:6} collisions {:.1}, volume {:.1}, idle {:.1}",
            m.label(),
            report.overall_mean("collision_timesteps").unwrap_or(f64::NAN),
            report.overall_mean("total_volume_processed").unwrap_or(f64::NAN),
            report.overall_mean("press_idle_time").unwrap_or(f64::NAN)
        );
        reports.push(report);
    }
    let refs: Vec<_> = reports.iter().collect();
    write_plot_csv(&refs, ctx.create("plot_metrics.csv")?, Some(&tag))?;
    let path = ctx.out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary(&refs, Some(&manifest.hash))).map_err(bunker_core::Error::from)?;
    std::fs::write(&path, json).map_err(io_err(&path))?;
    manifest.write(&ctx.out).map_err(io_err(&ctx.out))?;
    Ok(())
}

fn cmd_sweep(ctx: &mut Ctx, a: &SweepArgs) -> Result<()> {
    let (dir, model_path) = apply_artifact_args(ctx, &a.art);
    if let Some(t) = &a.thetas {
        ctx.cfg.theta_grid = t.clone();
    }
    if !model_path.exists() {
        return Err(CliError::Usage(format!("collision model {} not found", model_path.display())));
    }
    let mut inputs = BTreeMap::new();
    let policies = load_policies(&dir, Method::Cl, &ctx.cfg.seeds, &mut inputs)?;
    let model = load_model(&model_path, &mut inputs)?;
    let manifest = ctx.manifest("sweep", inputs)?;
    let facility = ctx.cfg.facility();
    let pairs: Vec<(u64, &PolicyParams)> = policies.iter().map(|(&s, p)| (s, p)).collect();
    let res = threshold_sweep(
        &facility,
        &pairs,
        &model,
        ctx.cfg.override_config(0.5),
        &ctx.cfg.theta_grid,
        ctx.cfg.sweep_rollouts,
        ctx.cfg.eval_seed,
    )?;
    res.write_csv(ctx.create("sweep.csv")?, Some(&manifest.tag()))?;
    let path = ctx.out.join("sweep.json");
    let json = serde_json::json!({ "manifest": manifest.hash, "sweep": res });
    std::fs::write(&path, serde_json::to_string_pretty(&json).map_err(bunker_core::Error::from)?)
        .map_err(io_err(&path))?;
    manifest.write(&ctx.out).map_err(io_err(&ctx.out))?;
    eprintln!("lowest collision CV% at theta = {}", res.best_theta);
    Ok(())
}

fn cmd_pipeline(ctx: &mut Ctx, a: &PipelineArgs) -> Result<()> {
    if let Some(s) = &a.seeds {
        ctx.cfg.seeds = s.clone();
    }
    if let Some(n) = a.steps {
        ctx.cfg.total_steps = n;
    }
    if let Some(r) = a.rollouts {
        ctx.cfg.n_rollouts = r;
        ctx.cfg.sweep_rollouts = r;
    }
    if let Some(r) = a.reps {
        ctx.cfg.pair_data.repetitions = r;
    }
    if let Some(t) = a.theta {
        ctx.cfg.theta = Some(t);
    }
    let manifest = ctx.manifest("pipeline", BTreeMap::new())?;
    let res = run_experiment(&ctx.cfg)?;
    let out = ctx.out_dir()?.to_path_buf();
    write_experiment(&res, &out, Some(&manifest.tag()))?;
    manifest.write(&out).map_err(io_err(&out))?;
    for r in res.reports() {
        eprintln!(
            "{:6} collisions {:.1}, volume {:.1}, peak ratio {:.2}, safety {:.2}%",
            r.method.label(),
            r.overall_mean("collision_timesteps").unwrap_or(f64::NAN),
            r.overall_mean("total_volume_processed").unwrap_or(f64::NAN),
            r.overall_mean("higher_lower_peak_ratio").unwrap_or(f64::NAN),
            r.overall_mean("safety_violations_pct").unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut ctx = Ctx::load(&cli.global)?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::GenData(a) => cmd_gen_data(&mut ctx, a),
        Command::TrainCm(a) => cmd_train_cm(&mut ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&mut ctx, a),
        Command::Sweep(a) => cmd_sweep(&mut ctx, a),
        Command::Pipeline(a) => cmd_pipeline(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
