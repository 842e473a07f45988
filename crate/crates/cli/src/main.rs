use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use geoflow::checkpoint::Checkpoint;
use geoflow::config::{load_config, parse_config, Experiment, RunConfig, SYNTHETIC4_MEAN_A};
use geoflow::eval::{eval_distributions, evaluate};
use geoflow::oracles::{bures_w2, HarmonicOracle};
use geoflow::rng::{SeededRng, Stream};
use geoflow::train::{
    init_phase1_nets, init_velocity_net, write_metrics_csv, GeodesicTrainer, MetricsRecord, VelocityTrainer,
    METRICS_HEADER,
};
use geoflow::{Error, LagrangianSpec, Matrix};

#[derive(Parser)]
#[command(name = "geoflow", version, about = "Learn Wasserstein geodesics and velocity fields from samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1: adversarial geodesic training. Writes checkpoint.json and metrics.csv.
    Train(TrainArgs),
    /// Phase 2: fit the velocity field to a trained geodesic.
    TrainVelocity(VelocityArgs),
    /// Exact-oracle diagnostics of a checkpoint. Writes eval.json.
    Eval(EvalArgs),
    /// Particle positions at chosen times. Writes trajectories.csv.
    Export(ExportArgs),
    /// Print analytic reference quantities for a preset.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "experiment")]
    config: Option<PathBuf>,
    /// Preset name, as an alternative to --config.
    #[arg(long)]
    experiment: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.experiment) {
            (Some(p), _) => load_config(p).with_context(|| format!("loading {}", p.display())),
            (None, Some(e)) => Ok(parse_config(&format!(r#"{{"experiment":{}}}"#, serde_json::to_string(e)?))?),
            (None, None) => bail!("one of --config or --experiment is required"),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Output directory (default: the config's output_dir, else the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VelocityArgs {
    /// Run directory holding checkpoint.json and metrics.csv.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Samples per law.
    #[arg(long, default_value_t = 2000)]
    n: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Comma-separated times in [0, 1].
    #[arg(long, value_delimiter = ',', required = true)]
    times: Vec<f64>,
    /// Number of particles.
    #[arg(long, default_value_t = 100)]
    n: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    source: ConfigSource,
}

/// Writes through a temporary file in the same directory, then renames.
fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn metrics_bytes(records: &[MetricsRecord], header: bool) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records, header)?;
    Ok(buf)
}

fn progress(r: &MetricsRecord, every: usize) {
    if r.iteration.is_multiple_of(every) {
        let gap = r.critic_gap.map_or(String::new(), |g| format!(" critic_gap {g:.4}"));
        let mse = r.phase2_mse.map_or(String::new(), |m| format!(" mse {m:.5}"));
        eprintln!("[{:>7}] cost {:.4}{gap}{mse}", r.iteration, r.cost_estimate);
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.source.load()?;
    let out = args.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    let (source, target) = cfg.distributions()?;
    let (g, c) = init_phase1_nets(&cfg.train, source.dim(), &cfg.widths)?;
    let mut trainer = GeodesicTrainer::new(cfg.train.clone(), source, target, cfg.lagrangian, g, c)?;
    let mut records = Vec::with_capacity(cfg.train.iters_phase1);
    let mut failure = None;
    for _ in 0..cfg.train.iters_phase1 {
        match trainer.round() {
            Ok(r) => {
                progress(&r, 1000);
                records.push(r);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let ck = Checkpoint::new(cfg, &trainer.geodesic, &trainer.critic, trainer.iteration());
    atomic_write(&out.join("checkpoint.json"), ck.to_json()?.as_bytes())?;
    atomic_write(&out.join("metrics.csv"), &metrics_bytes(&records, true)?)?;
    if let Some(e) = failure {
        bail!("{e}; checkpoint holds the state after iteration {}", trainer.iteration());
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("checkpoint.json");
    Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train_velocity(args: &VelocityArgs) -> Result<()> {
    let ck = load_checkpoint(&args.dir)?;
    let cfg = &ck.config;
    let (source, _) = cfg.distributions()?;
    let g = ck.geodesic_net()?;
    if g.dim() != source.dim() {
        return Err(
            Error::DimensionMismatch { context: "checkpoint vs config", expected: source.dim(), got: g.dim() }.into()
        );
    }
    let vn = init_velocity_net(&cfg.train, source.dim(), &cfg.widths)?;
    let first = ck.velocity_iteration.unwrap_or(ck.iteration);
    let mut trainer = VelocityTrainer::new(cfg.train.clone(), g, vn, source, cfg.lagrangian, first)?;
    let mut records = Vec::with_capacity(cfg.train.iters_phase2);
    let mut failure = None;
    for _ in 0..cfg.train.iters_phase2 {
        match trainer.round() {
            Ok(r) => {
                progress(&r, 1000);
                records.push(r);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let metrics_path = args.dir.join("metrics.csv");
    let mut metrics = match fs::read(&metrics_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{METRICS_HEADER}\n").into_bytes(),
        Err(e) => return Err(e.into()),
    };
    metrics.extend(metrics_bytes(&records, false)?);
    let ck = ck.clone().with_velocity(&trainer.velocity, trainer.iteration());
    atomic_write(&args.dir.join("checkpoint.json"), ck.to_json()?.as_bytes())?;
    atomic_write(&metrics_path, &metrics)?;
    if let Some(e) = failure {
        bail!("{e}; checkpoint holds the state after iteration {}", trainer.iteration());
    }
    Ok(())
}

fn matrix_csv(m: &Matrix) -> String {
    let header: Vec<String> = (0..m.cols()).map(|k| format!("x_{k}")).collect();
    let mut s = header.join(",") + "\n";
    for r in m.iter_rows() {
        s += &r.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        s.push('\n');
    }
    s
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.dir)?;
    let cfg = &ck.config;
    let (source, target) = eval_distributions(cfg, args.n)?;
    let g = ck.geodesic_net()?;
    let vn = ck.velocity_net()?;
    let mut rng = SeededRng::new(cfg.train.seed).substream(Stream::Eval);
    let (report, samples) =
        evaluate(&g, vn.as_ref(), &source, &target, &cfg.lagrangian, &cfg.train.grid_times(), args.n, &mut rng)?;
    let json = serde_json::to_string_pretty(&report)?;
    if json.contains("null") {
        bail!("evaluation produced a non-finite value: {json}");
    }
    atomic_write(&args.dir.join("eval.json"), json.as_bytes())?;
    let sdir = args.dir.join("eval_samples");
    atomic_write(&sdir.join("source.csv"), matrix_csv(&samples.source).as_bytes())?;
    atomic_write(&sdir.join("pushforward.csv"), matrix_csv(&samples.pushforward).as_bytes())?;
    atomic_write(&sdir.join("target.csv"), matrix_csv(&samples.target).as_bytes())?;
    println!("{json}");
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    if let Some(t) = args.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        bail!("time {t} outside [0, 1]");
    }
    let ck = load_checkpoint(&args.dir)?;
    let (source, _) = eval_distributions(&ck.config, args.n)?;
    let g = ck.geodesic_net()?;
    let mut rng = SeededRng::new(ck.config.train.seed).substream(Stream::Eval).derive(1);
    let z = source.sample(args.n, &mut rng)?;
    let d = g.dim();
    let cols: Vec<String> = (0..d).map(|k| format!("x_{k}")).collect();
    let mut out = format!("particle_id,t,{}\n", cols.join(","));
    let paths: Vec<Matrix> = args.times.iter().map(|&t| g.eval_at(&z, t)).collect::<geoflow::Result<_>>()?;
    for i in 0..args.n {
        for (t, x) in args.times.iter().zip(&paths) {
            let xs: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
            out += &format!("{i},{t},{}\n", xs.join(","));
        }
    }
    atomic_write(&args.dir.join("trajectories.csv"), out.as_bytes())?;
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let cfg = args.source.load()?;
    if cfg.experiment == Experiment::Mnist {
        bail!("no analytic reference for image experiments");
    }
    let (a, b) = cfg.distributions()?;
    match (&cfg.lagrangian, a.as_gaussian(), b.as_gaussian()) {
        (LagrangianSpec::Quadratic, Some(ga), Some(gb)) => {
            println!("bures_w2_sq {:.6}", bures_w2(ga, gb)?);
        }
        (LagrangianSpec::Harmonic { potential }, Some(ga), Some(gb)) => {
            let (ma, mb) = (ga.mean(), gb.mean());
            let o = HarmonicOracle::new(*potential, [ma[0], ma[1]], [mb[0], mb[1]])?;
            let x = if cfg.experiment == Experiment::Synthetic4 { SYNTHETIC4_MEAN_A } else { [ma[0], ma[1]] };
            println!("t,x_0,x_1,v_0,v_1");
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let (p, v) = o.trajectory(x, t);
                println!("{t},{:.6},{:.6},{:.6},{:.6}", p[0], p[1], v[0], v[1]);
            }
        }
        _ => bail!("no analytic reference for this configuration"),
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GEOFLOW_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("GEOFLOW_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("GEOFLOW_THREADS must be at least 1");
        }
        geoflow::linalg::set_threads(n);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::TrainVelocity(a) => cmd_train_velocity(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
