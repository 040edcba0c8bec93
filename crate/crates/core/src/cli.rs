//! Command-line front end.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cost::{
    profile_model, CostProfile, DeviceProfile, LinkModel, PowerStates, ProfileMode, Role,
    DEMO_ROBOT_FLOPS, DEMO_SERVER_SPEEDUP,
};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, DEMO_MODEL};
use crate::netsim::{synth_trace, BandwidthTrace, EwmaPredictor, TraceKind};
use crate::report::Report;
use crate::runtime::live::{self, Robot, RobotConfig, ServerConfig, ServerProfile};
use crate::runtime::sim::{demo_input, simulate_session, SessionConfig};
use crate::sched::{build_planbook, DeConfig, PlanBook, Problem};
use crate::tensor::blob::{read_tensor, write_tensor};

pub const SEED_ENV: &str = "HP_SEED";
const DEFAULT_BUCKETS: &str = "10,30,50,70,90Mbps";

#[derive(Debug, Parser)]
#[command(
    name = "hybridpar",
    version,
    about = "Hybrid parallel DNN inference between a robot and an edge server"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time every layer of a model on this device
    Profile(ProfileArgs),
    /// Build a plan book: one schedule per bandwidth bucket
    Plan(PlanArgs),
    /// Replay inferences over a bandwidth trace on the simulated link
    Simulate(SimulateArgs),
    /// Run one endpoint of a live robot/server session over TCP
    Run(RunArgs),
    /// Bandwidth trace utilities
    Trace {
        #[command(subcommand)]
        cmd: TraceCmd,
    },
    /// Single-device reference inference
    Infer(InferArgs),
    /// Write the built-in demo model
    Demo {
        #[arg(long, default_value = "demo.hpm")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rows merged into one operator (overrides the model file)
    #[arg(long)]
    group: Option<usize>,
    #[arg(long, default_value = "robot")]
    role: Role,
    /// Timed runs per layer; the median is kept
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// FLOP-proportional times instead of measurements
    #[arg(long)]
    synthetic: bool,
    /// Robot FLOP rate of the synthetic profile
    #[arg(long, default_value_t = DEMO_ROBOT_FLOPS)]
    flops: f64,
    /// Server speedup of the synthetic profile
    #[arg(long, default_value_t = DEMO_SERVER_SPEEDUP)]
    speedup: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LinkArgs {
    /// One-way latency per message, seconds
    #[arg(long, default_value_t = LinkModel::default().latency)]
    latency: f64,
    /// Framing bytes per message
    #[arg(long, default_value_t = LinkModel::default().header_bytes)]
    header_bytes: u64,
}

impl LinkArgs {
    fn link(&self) -> Result<LinkModel> {
        if !(self.latency >= 0.0) || !self.latency.is_finite() {
            return Err(Error::Invalid(format!(
                "latency must be >= 0, got {}",
                self.latency
            )));
        }
        Ok(LinkModel {
            latency: self.latency,
            header_bytes: self.header_bytes,
        })
    }
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Bandwidth buckets, e.g. "10,50,100Mbps"
    #[arg(long, default_value = DEFAULT_BUCKETS)]
    buckets: String,
    #[arg(long, default_value_t = DeConfig::default().population)]
    population: usize,
    #[arg(long, default_value_t = DeConfig::default().generations)]
    generations: usize,
    #[arg(long, default_value_t = DeConfig::default().crossover)]
    crossover: f64,
    #[arg(long, default_value_t = DeConfig::default().weight)]
    weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enumerate every plan instead of searching (small models only)
    #[arg(long)]
    exhaustive: bool,
}

impl SolverArgs {
    fn config(&self) -> Result<DeConfig> {
        let c = DeConfig {
            population: self.population,
            generations: self.generations,
            crossover: self.crossover,
            weight: self.weight,
            seed: seed(self.seed)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rows merged into one operator (overrides the model file)
    #[arg(long)]
    group: Option<usize>,
    /// Robot profile; a synthetic FLOP-rate profile when omitted
    #[arg(long)]
    robot_profile: Option<PathBuf>,
    /// Server profile; otherwise the robot profile divided by --speedup
    #[arg(long, conflicts_with = "speedup")]
    server_profile: Option<PathBuf>,
    #[arg(long)]
    speedup: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    link: LinkArgs,
    /// TOML file overriding the robot power states
    #[arg(long)]
    power: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    Constant,
    Indoor,
    Outdoor,
}

#[derive(Debug, Args)]
struct TraceSource {
    /// Trace file with "time_s bandwidth_bps" lines
    #[arg(long, conflicts_with = "synth")]
    trace: Option<PathBuf>,
    /// Synthesize a trace instead of loading one
    #[arg(long)]
    synth: Option<SynthKind>,
    /// Rate of a constant synthetic trace
    #[arg(long)]
    bandwidth: Option<String>,
    /// Length of a synthetic trace, seconds
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
}

impl TraceSource {
    fn load(&self, seed: u64) -> Result<BandwidthTrace> {
        match (&self.trace, self.synth) {
            (Some(p), _) => BandwidthTrace::load(p),
            (None, Some(k)) => synth(k, self.bandwidth.as_deref(), self.duration, seed),
            (None, None) => Err(Error::Invalid(
                "one of --trace or --synth is required".into(),
            )),
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rows merged into one operator (overrides the model file)
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    planbook: PathBuf,
    #[command(flatten)]
    source: TraceSource,
    /// Number of inferences; by default the whole trace is used
    #[arg(long)]
    reps: Option<usize>,
    /// Run real tensors and check outputs against local inference
    #[arg(long)]
    tensors: bool,
    /// Smoothing factor of the bandwidth predictor
    #[arg(long, default_value_t = EwmaPredictor::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    power: Option<PathBuf>,
    /// Per-inference rows for plotting
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Event log of the simulated endpoints
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    role: Role,
    /// Server: address to accept one robot on
    #[arg(long, required_if_eq("role", "server"))]
    listen: Option<String>,
    /// Robot: server address
    #[arg(long, required_if_eq("role", "robot"))]
    connect: Option<String>,
    /// Required on the robot; on the server it avoids receiving the model
    #[arg(long, required_if_eq("role", "robot"))]
    model: Option<PathBuf>,
    /// Rows merged into one operator (overrides the model file)
    #[arg(long)]
    group: Option<usize>,
    /// Plan book cache kept across sessions
    #[arg(long)]
    planbook: Option<PathBuf>,
    /// Robot: device profile to send; measured at startup when omitted
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Robot: use the synthetic FLOP-rate profile
    #[arg(long)]
    synthetic: bool,
    /// Server: derive the server profile from the robot's instead of measuring
    #[arg(long)]
    speedup: Option<f64>,
    /// Timed runs per layer when profiling
    #[arg(long, default_value_t = 3)]
    profile_reps: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    link: LinkArgs,
    /// Robot: bandwidth trace feeding the predictor
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Robot: fixed bandwidth prediction when there is no trace
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long, default_value_t = EwmaPredictor::DEFAULT_ALPHA)]
    alpha: f64,
    /// Robot: input tensor blob; a seeded pseudo-random input otherwise
    #[arg(long)]
    input: Option<PathBuf>,
    /// Robot: where to write the last result tensor
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Seconds to wait for the peer
    #[arg(long, default_value_t = live::DEFAULT_TIMEOUT.as_secs_f64())]
    timeout: f64,
    #[arg(long)]
    power: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum TraceCmd {
    /// Generate a synthetic trace
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        bandwidth: Option<String>,
        #[arg(long, default_value_t = 300.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean and standard deviation of a trace
    Stats { path: PathBuf },
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rows merged into one operator (overrides the model file)
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// `HP_SEED` when set, otherwise `v`.
pub fn seed(v: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("{} must be an integer, got '{}'", SEED_ENV, s))),
        Err(_) => Ok(v),
    }
}

/// Parses a rate such as `80Mbps`, `1.5G`, `500kbps` or `8e7` into bits per second.
pub fn parse_rate(s: &str) -> Result<f64> {
    let (num, mult) = split_unit(s)?;
    let v: f64 = num
        .parse()
        .map_err(|_| Error::Invalid(format!("bad rate '{}'", s)))?;
    let v = v * mult.unwrap_or(1.0);
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Invalid(format!("bad rate '{}'", s)));
    }
    Ok(v)
}

fn split_unit(s: &str) -> Result<(&str, Option<f64>)> {
    let s = s.trim();
    let lower = s.to_ascii_lowercase();
    let body = lower
        .strip_suffix("bps")
        .or_else(|| lower.strip_suffix("bit/s"))
        .unwrap_or(&lower);
    let mult = match body.chars().last() {
        Some('k') => Some(1e3),
        Some('m') => Some(1e6),
        Some('g') => Some(1e9),
        _ if body.len() < lower.len() => Some(1.0),
        _ => None,
    };
    let digits = if mult.is_some_and(|m| m != 1.0) {
        body.len() - 1
    } else {
        body.len()
    };
    if digits == 0 {
        return Err(Error::Invalid(format!("bad rate '{}'", s)));
    }
    Ok((&s[..digits], mult))
}

/// Comma-separated rates; a unit on the last entry applies to bare numbers,
/// so "10,50,100Mbps" is three rates in Mbps.
pub fn parse_rates(s: &str) -> Result<Vec<f64>> {
    let items: Vec<&str> = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .collect();
    let tail = match items.last() {
        Some(last) => split_unit(last)?.1,
        None => return Err(Error::Invalid("empty bucket list".into())),
    };
    items
        .iter()
        .map(|it| {
            let (num, mult) = split_unit(it)?;
            let v: f64 = num
                .parse()
                .map_err(|_| Error::Invalid(format!("bad rate '{}'", it)))?;
            Ok(v * mult.or(tail).unwrap_or(1.0))
        })
        .collect()
}

fn synth(
    kind: SynthKind,
    bandwidth: Option<&str>,
    duration: f64,
    seed: u64,
) -> Result<BandwidthTrace> {
    let kind = match kind {
        SynthKind::Constant => {
            let bw = bandwidth
                .ok_or_else(|| Error::Invalid("a constant trace needs --bandwidth".into()))?;
            TraceKind::Constant(parse_rate(bw)?)
        }
        SynthKind::Indoor => TraceKind::IndoorLike,
        SynthKind::Outdoor => TraceKind::OutdoorLike,
    };
    synth_trace(kind, duration, seed)
}

fn power(path: &Option<PathBuf>) -> Result<PowerStates> {
    match path {
        Some(p) => PowerStates::load(p),
        None => Ok(PowerStates::default()),
    }
}

fn load_model(path: &Path, group: Option<usize>) -> Result<ModelGraph> {
    let g = ModelGraph::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Invalid(format!("cannot read model {}: {}", path.display(), io)),
        e => e,
    })?;
    match group {
        Some(0) => Err(Error::Invalid("--group must be at least 1".into())),
        Some(k) if k != g.group() => g.regrouped(k),
        _ => Ok(g),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {}", path.display(), e)))
}

fn mbps(bps: f64) -> String {
    format!("{:.1} Mbps", bps / 1e6)
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let g = load_model(&a.model, a.group)?;
    let mode = if a.synthetic {
        let rate = match a.role {
            Role::Robot => a.flops,
            Role::Server => a.flops * a.speedup,
        };
        ProfileMode::FlopRate(rate)
    } else {
        ProfileMode::Measured {
            reps: a.reps,
            seed: seed(a.seed)?,
        }
    };
    let p = profile_model(&g, a.role, mode)?;
    println!(
        "{:<5} {:<16} {:>8} {:>14} {:>14}",
        "layer", "name", "ops", "op time (s)", "layer (s)"
    );
    for (l, t) in g.layers().iter().zip(&p.layers) {
        println!(
            "{:<5} {:<16} {:>8} {:>14.6e} {:>14.6e}",
            l.id,
            l.name,
            l.operator_count,
            t.op_time,
            t.op_time * l.operator_count as f64
        );
    }
    p.save(&a.out)?;
    eprintln!("wrote {} profile to {}", a.role, a.out.display());
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let g = load_model(&a.model, a.group)?;
    let buckets = parse_rates(&a.solver.buckets)?;
    let link = a.link.link()?;
    let robot = match &a.robot_profile {
        Some(p) => DeviceProfile::load(p)?,
        None => profile_model(&g, Role::Robot, ProfileMode::FlopRate(DEMO_ROBOT_FLOPS))?,
    };
    if robot.model != g.checksum() {
        return Err(Error::Checksum(
            "robot profile was made for a different model".into(),
        ));
    }
    let server = match (&a.server_profile, a.speedup) {
        (Some(p), _) => DeviceProfile::load(p)?,
        (None, s) => robot.scaled(Role::Server, s.unwrap_or(DEMO_SERVER_SPEEDUP)),
    };
    let profile = CostProfile::from_devices(&robot, &server, link)?.for_graph(&g)?;
    let cfg = a.solver.config()?;
    let book = build_planbook(
        &g,
        &profile,
        &buckets,
        &cfg,
        a.solver.exhaustive,
        power(&a.power)?,
    )?;
    println!(
        "{:<8} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "bucket", "bandwidth", "objective", "local", "best PP", "energy J"
    );
    for (k, b) in book.buckets.iter().enumerate() {
        let problem = Problem::new(&g, &profile, b.bandwidth_bps)?;
        let local = problem.plan(&problem.all_local())?.objective;
        let pp = problem.best_pp()?.objective;
        let tag = if b.plan.flags.exhaustive {
            " exhaustive"
        } else {
            ""
        };
        println!(
            "{:<8} {:>12} {:>12.6} {:>12.6} {:>12.6} {:>10.4}{}",
            k,
            mbps(b.bandwidth_bps),
            b.plan.objective,
            local,
            pp,
            b.plan.energy,
            tag
        );
    }
    book.save(&a.out)?;
    eprintln!("wrote plan book {} to {}", book.checksum(), a.out.display());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let g = load_model(&a.model, a.group)?;
    let book = PlanBook::load(&a.planbook)?;
    let s = seed(a.seed)?;
    let trace = a.source.load(s)?;
    let power = power(&a.power)?;
    let cfg = SessionConfig {
        reps: a.reps,
        alpha: a.alpha,
        tensors: a.tensors,
        seed: s,
    };
    let result = simulate_session(&g, &book, &trace, &cfg)?;
    let report = Report::from_session(&result, &trace, &power)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.csv {
        write_file(p, &report.to_csv())?;
    }
    if let Some(p) = &a.log {
        write_file(p, &result.log.to_text())?;
    }
    if report.rows.iter().any(|r| r.output_ok == Some(false)) {
        return Err(Error::Invariant(
            "distributed output differs from local inference".into(),
        ));
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let timeout = Duration::from_secs_f64(a.timeout.max(0.001));
    match a.role {
        Role::Server => {
            let addr = a.listen.as_deref().expect("required by clap");
            let model = a
                .model
                .as_deref()
                .map(|m| load_model(m, a.group))
                .transpose()?;
            let profile = match a.speedup {
                Some(f) => ServerProfile::RobotScaled(f),
                None => ServerProfile::Measure(ProfileMode::Measured {
                    reps: a.profile_reps,
                    seed: seed(a.solver.seed)?,
                }),
            };
            let listener = TcpListener::bind(addr).map_err(Error::Network)?;
            eprintln!(
                "listening on {}",
                listener.local_addr().map_err(Error::Network)?
            );
            let cfg = ServerConfig {
                timeout,
                profile,
                power: power(&a.power)?,
                model,
                planbook_cache: a.planbook.clone(),
            };
            let s = live::listen_once(&listener, cfg)?;
            println!(
                "served {} inferences, plan book {}{}",
                s.inferences,
                s.handshake.planbook_checksum,
                if s.handshake.profiled {
                    " (profiled)"
                } else {
                    " (cached)"
                }
            );
            Ok(())
        }
        Role::Robot => {
            let g = load_model(a.model.as_deref().expect("required by clap"), a.group)?;
            let s = seed(a.solver.seed)?;
            let profile = match &a.profile {
                Some(p) => DeviceProfile::load(p)?,
                None if a.synthetic => {
                    profile_model(&g, Role::Robot, ProfileMode::FlopRate(DEMO_ROBOT_FLOPS))?
                }
                None => profile_model(
                    &g,
                    Role::Robot,
                    ProfileMode::Measured {
                        reps: a.profile_reps,
                        seed: s,
                    },
                )?,
            };
            let input = match &a.input {
                Some(p) => read_tensor(p)?,
                None => demo_input(&g, s),
            };
            let trace = a.trace.as_deref().map(BandwidthTrace::load).transpose()?;
            let fixed = a.bandwidth.as_deref().map(parse_rate).transpose()?;
            let cfg = RobotConfig {
                timeout,
                buckets: parse_rates(&a.solver.buckets)?,
                solver: a.solver.config()?,
                exhaustive: a.solver.exhaustive,
                link: a.link.link()?,
                profile,
                planbook_cache: a.planbook.clone(),
            };
            let addr = a.connect.as_deref().expect("required by clap");
            let mut robot = Robot::connect(addr, g, cfg)?;
            eprintln!(
                "connected, plan book {}{}",
                robot.handshake.planbook_checksum,
                if robot.handshake.profiled {
                    " (new)"
                } else {
                    " (cached)"
                }
            );
            let mut ewma = EwmaPredictor::new(a.alpha);
            let t0 = Instant::now();
            let mut last = None;
            println!(
                "{:<6} {:>8} {:>12} {:>12}",
                "id", "bucket", "predicted", "wall (s)"
            );
            for _ in 0..a.reps {
                let predicted = match (&trace, fixed) {
                    (Some(t), _) => ewma.predict(t, t0.elapsed().as_secs_f64()),
                    (None, Some(bw)) => bw,
                    (None, None) => 0.0,
                };
                let r = robot.infer_predicted(&input, predicted)?;
                println!(
                    "{:<6} {:>8} {:>12} {:>12.6}",
                    r.id,
                    r.bucket,
                    mbps(predicted),
                    r.wall
                );
                last = Some(r.output);
            }
            robot.close()?;
            if let (Some(p), Some(t)) = (&a.output, &last) {
                write_tensor(p, "output", t)?;
            }
            Ok(())
        }
    }
}

fn cmd_trace(c: TraceCmd) -> Result<()> {
    match c {
        TraceCmd::Synth {
            kind,
            bandwidth,
            duration,
            seed: s,
            out,
        } => {
            let t = synth(kind, bandwidth.as_deref(), duration, seed(s)?)?;
            t.save(&out)?;
            let (m, sd) = t.stats(0.0, t.duration());
            eprintln!(
                "wrote {} ({} samples, mean {}, std {})",
                out.display(),
                t.samples().len(),
                mbps(m),
                mbps(sd)
            );
            Ok(())
        }
        TraceCmd::Stats { path } => {
            let t = BandwidthTrace::load(&path)?;
            let (m, sd) = t.stats(0.0, t.duration());
            println!(
                "samples {}  duration {:.1} s  mean {}  std {}",
                t.samples().len(),
                t.duration(),
                mbps(m),
                mbps(sd)
            );
            Ok(())
        }
    }
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let g = load_model(&a.model, a.group)?;
    let input = match &a.input {
        Some(p) => read_tensor(p)?,
        None => demo_input(&g, seed(a.seed)?),
    };
    let t0 = Instant::now();
    let y = g.infer_local(&input)?;
    println!("output {} in {:.6} s", y.spec(), t0.elapsed().as_secs_f64());
    if let Some(p) = &a.output {
        write_tensor(p, "output", &y)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Profile(a) => cmd_profile(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Run(a) => cmd_run(a),
        Command::Trace { cmd } => cmd_trace(cmd),
        Command::Infer(a) => cmd_infer(a),
        Command::Demo { out } => write_file(&out, DEMO_MODEL),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates() {
        assert_eq!(parse_rate("80Mbps").unwrap(), 80e6);
        assert_eq!(parse_rate("1.5G").unwrap(), 1.5e9);
        assert_eq!(parse_rate("500kbps").unwrap(), 5e5);
        assert_eq!(parse_rate("8e7").unwrap(), 8e7);
        assert_eq!(parse_rate("64bps").unwrap(), 64.0);
        assert!(parse_rate("Mbps").is_err());
        assert!(parse_rate("fast").is_err());
        assert_eq!(
            parse_rates("10,50,100Mbps").unwrap(),
            vec![10e6, 50e6, 100e6]
        );
        assert_eq!(parse_rates("500k, 2M").unwrap(), vec![5e5, 2e6]);
    }

    #[test]
    fn parses_commands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
