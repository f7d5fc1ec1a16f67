//! `delaysync`: synthesize a protocol from an agent model, simulate it on a
//! network, scan its frequency-domain stability conditions and sweep delays.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 infeasible reference,
//! 3 model assumption failure, 4 not converged, 5 unrooted graph,
//! 6 divergence, 7 verification failure.

mod manifest;

use clap::{Parser, Subcommand, ValueEnum};
use delaysync::exec::Execution;
use delaysync::graph::{self, DelayMatrix, NetworkSpec};
use delaysync::numerics::{NumericsError, RankTolerance, Vector};
use delaysync::plant::{synthesize, AgentModel, PlantError, SynthesisResult, Tolerances};
use delaysync::sim::{self, BufferInit, SimConfig, SimError};
use delaysync::verify::{self, VerifyError};
use manifest::{digest, InputDigest, RunManifest};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const TOLERANCE_ENV: &str = "DELAYSYNC_TOLERANCE";

#[derive(Parser)]
#[command(name = "delaysync", version, about = "Delay-tolerant synchronization protocols for identical discrete-time agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build protocol.json from an agent model and a constant reference.
    Synthesize {
        model: PathBuf,
        /// Reference output, comma-separated (one entry per output).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        yr: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the closed loop on a network and write traj.csv.
    Simulate {
        protocol: PathBuf,
        graph: PathBuf,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = delaysync::fixtures::EXAMPLE_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write plot.svg.
        #[arg(long)]
        plot: bool,
        #[arg(long, value_enum, default_value_t = BufferArg::HoldInitial)]
        buffer_init: BufferArg,
        /// Record every n-th tick.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1e-2)]
        eps_sync: f64,
        #[arg(long, default_value_t = 1e-2)]
        eps_reg: f64,
    },
    /// Delay-free eigenvalues, frequency scan and network bound; writes report.json.
    Verify {
        protocol: PathBuf,
        graph: PathBuf,
        /// Number of ω points on [−π, π].
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// `default` (graph delays plus sampled tuples), `graph` (graph delays
        /// only) or a comma-separated list of delays applied to every edge.
        #[arg(long, default_value = "default")]
        delays: String,
        /// Maximum number of sampled delay assignments for `default`.
        #[arg(long, default_value_t = verify::DEFAULT_DELAY_BUDGET)]
        budget: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Repeat the simulation with random per-edge delays; writes sweep.csv.
    Sweep {
        protocol: PathBuf,
        graph: PathBuf,
        #[arg(long)]
        delay_max: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BufferArg {
    HoldInitial,
    ZeroFill,
}

impl From<BufferArg> for BufferInit {
    fn from(b: BufferArg) -> Self {
        match b {
            BufferArg::HoldInitial => BufferInit::HoldInitial,
            BufferArg::ZeroFill => BufferInit::ZeroFill,
        }
    }
}

/// Failure with its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Infeasible(String),
    Model(String),
    NotConverged(String),
    Unrooted(String),
    Diverged(String),
    VerifyFailed(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Infeasible(_) => 2,
            Failure::Model(_) => 3,
            Failure::NotConverged(_) => 4,
            Failure::Unrooted(_) => 5,
            Failure::Diverged(_) => 6,
            Failure::VerifyFailed(_) => 7,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::Infeasible(m)
            | Failure::Model(m)
            | Failure::NotConverged(m)
            | Failure::Unrooted(m)
            | Failure::Diverged(m)
            | Failure::VerifyFailed(m) => m,
        }
    }
}

impl From<PlantError> for Failure {
    fn from(e: PlantError) -> Self {
        let msg = e.to_string();
        match e {
            PlantError::InfeasibleReference { .. } => Failure::Infeasible(msg),
            PlantError::Numerics(NumericsError::RiccatiNotConverged { .. }) => Failure::NotConverged(msg),
            ref e if e.is_model_assumption() => Failure::Model(msg),
            _ => Failure::Usage(msg),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Unrooted => Failure::Unrooted(e.to_string()),
            SimError::Diverged { .. } => Failure::Diverged(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<VerifyError> for Failure {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Unrooted => Failure::Unrooted(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn tolerances_from_env() -> Result<Tolerances, Failure> {
    match std::env::var(TOLERANCE_ENV) {
        Ok(raw) => {
            let eps: f64 = raw
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("{TOLERANCE_ENV}={raw:?} is not a number")))?;
            let rank = RankTolerance::new(eps).map_err(|e| Failure::Usage(format!("{TOLERANCE_ENV}: {e}")))?;
            Ok(Tolerances::with_rank(rank))
        }
        Err(_) => Ok(Tolerances::default()),
    }
}

/// Reads inputs and collects their digests.
struct Inputs {
    digests: Vec<InputDigest>,
}

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<String, Failure> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        self.digests.push(digest(path, &bytes));
        String::from_utf8(bytes).map_err(|_| Failure::Usage(format!("{}: not UTF-8", path.display())))
    }

    fn protocol(&mut self, path: &Path) -> Result<SynthesisResult, Failure> {
        let text = self.read(path)?;
        SynthesisResult::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }

    fn network(&mut self, path: &Path) -> Result<NetworkSpec, Failure> {
        let text = self.read(path)?;
        let net = NetworkSpec::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        if !net.is_rooted() {
            return Err(Failure::Unrooted(format!(
                "{}: some agent is not reachable from the root set",
                path.display()
            )));
        }
        Ok(net)
    }
}

/// Writes outputs into one directory and finishes with the manifest.
struct Outputs {
    dir: PathBuf,
    written: Vec<InputDigest>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.written.push(digest(Path::new(name), bytes));
        Ok(path)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        command: &str,
        inputs: Inputs,
        seed: Option<u64>,
        tolerances: Tolerances,
        parameters: serde_json::Value,
        started_at: String,
    ) -> Result<(), Failure> {
        let m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            inputs: inputs.digests,
            outputs: self.written,
            seed,
            tolerances,
            parameters,
            started_at,
            finished_at: manifest::now(),
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).expect("manifest is serializable") + "\n";
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

fn cmd_synthesize(model: &Path, yr: &[f64], out: &Path) -> Result<(), Failure> {
    let started = manifest::now();
    let tol = tolerances_from_env()?;
    let mut inputs = Inputs { digests: Vec::new() };
    let text = inputs.read(model)?;
    let model_value = AgentModel::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", model.display())))?;
    let y_r = Vector::from_column_slice(yr);
    let result = synthesize(&model_value, &y_r, &tol)?;
    let mut outputs = Outputs::new(out)?;
    let json = result.to_json()? + "\n";
    let path = outputs.write("protocol.json", json.as_bytes())?;
    println!(
        "protocol written to {} (v = {}, rho(Abar - Bbar K) = {:.4}, rho(Abar - F Cbar) = {:.4})",
        path.display(),
        result.v(),
        result.checks.state_feedback_radius,
        result.checks.observer_radius
    );
    outputs.finish("synthesize", inputs, None, tol, serde_json::json!({ "yr": yr }), started)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    protocol: &Path,
    graph_path: &Path,
    steps: usize,
    seed: u64,
    out: &Path,
    plot: bool,
    buffer: BufferArg,
    stride: usize,
    eps: (f64, f64),
) -> Result<(), Failure> {
    let started = manifest::now();
    let tol = tolerances_from_env()?;
    let mut inputs = Inputs { digests: Vec::new() };
    let synth = inputs.protocol(protocol)?;
    let net = inputs.network(graph_path)?;
    let mut cfg = SimConfig::new(steps, synth.y_r.clone(), seed);
    cfg.buffer_init = buffer.into();
    cfg.record_stride = stride;
    cfg.eps_sync = eps.0;
    cfg.eps_reg = eps.1;
    let traj = sim::simulate(&synth, &net, &cfg)?;

    let mut outputs = Outputs::new(out)?;
    let mut csv_bytes = Vec::new();
    traj.write_csv(&mut csv_bytes)?;
    outputs.write("traj.csv", &csv_bytes)?;
    if plot {
        outputs.write("plot.svg", traj.to_svg().as_bytes())?;
    }
    let summary = format!(
        "ticks={} sync_error={:.3e} reg_error={:.3e} converged={} convergence_tick={}",
        traj.final_tick,
        traj.final_sync_error,
        traj.final_reg_error,
        traj.converged,
        traj.converged_at.map_or("none".to_string(), |k| k.to_string())
    );
    println!("{summary}");
    let params = serde_json::json!({
        "steps": steps,
        "buffer_init": cfg.buffer_init,
        "record_stride": stride,
        "eps_sync": cfg.eps_sync,
        "eps_reg": cfg.eps_reg,
        "window": cfg.window,
    });
    outputs.finish("simulate", inputs, Some(seed), tol, params, started)?;
    if traj.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!("did not converge within {steps} ticks: {summary}")))
    }
}

fn delay_samples(spec: &str, net: &NetworkSpec, budget: usize) -> Result<Vec<DelayMatrix>, Failure> {
    match spec.trim() {
        "default" => Ok(verify::default_network_delay_samples(net, budget)),
        "graph" => Ok(vec![net.delays.clone()]),
        list => {
            let mut out = vec![net.delays.clone()];
            for item in list.split(',') {
                let k: usize = item
                    .trim()
                    .parse()
                    .map_err(|_| Failure::Usage(format!("--delays: {item:?} is not a nonnegative integer")))?;
                out.push(DelayMatrix::uniform(&net.graph, k));
            }
            Ok(out)
        }
    }
}

fn cmd_verify(protocol: &Path, graph_path: &Path, grid: usize, delays: &str, budget: usize, out: &Path) -> Result<(), Failure> {
    let started = manifest::now();
    let tol = tolerances_from_env()?;
    if grid == 0 {
        return Err(Failure::Usage("--grid must be at least 1".into()));
    }
    let mut inputs = Inputs { digests: Vec::new() };
    let synth = inputs.protocol(protocol)?;
    let net = inputs.network(graph_path)?;
    let samples = delay_samples(delays, &net, budget)?;
    let omegas = graph::omega_grid(grid);
    let report = verify::verify_network(&synth, &net, &omegas, &samples, Execution::default())?;

    let mut outputs = Outputs::new(out)?;
    outputs.write("report.json", (report.to_json() + "\n").as_bytes())?;
    println!(
        "passed={} delay_free_radius={:.6} scan_min_margin={:.3e} lemma2_max_modulus={:.6} samples={} grid={}",
        report.passed,
        report.delay_free.spectral_radius,
        report.frequency_scan.min_margin,
        report.lemma2.max_modulus,
        report.frequency_scan.samples,
        grid
    );
    outputs.finish("verify", inputs, None, tol, serde_json::json!({ "grid": grid, "delays": delays, "budget": budget }), started)?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::VerifyFailed(format!(
            "verification failed (delay-free stable: {}, frequency scan margin {:.3e}, network bound holds: {})",
            report.delay_free.stable, report.frequency_scan.min_margin, report.lemma2.holds
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    protocol: &Path,
    graph_path: &Path,
    delay_max: usize,
    trials: usize,
    seed: u64,
    steps: usize,
    out: &Path,
) -> Result<(), Failure> {
    let started = manifest::now();
    let tol = tolerances_from_env()?;
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let mut inputs = Inputs { digests: Vec::new() };
    let synth = inputs.protocol(protocol)?;
    let net = inputs.network(graph_path)?;
    let cfg = SimConfig::new(steps, synth.y_r.clone(), seed);
    cfg.validate()?;
    let rows = sim::delay_sweep(&synth, &net, &cfg, delay_max, trials, seed, Execution::default());

    let mut outputs = Outputs::new(out)?;
    let mut bytes = Vec::new();
    sim::write_sweep_csv(&rows, &mut bytes)?;
    outputs.write("sweep.csv", &bytes)?;
    let converged = rows.iter().filter(|r| r.converged).count();
    println!("trials={trials} converged={converged} delay_max={delay_max}");
    let params = serde_json::json!({ "delay_max": delay_max, "trials": trials, "steps": steps });
    outputs.finish("sweep", inputs, Some(seed), tol, params, started)?;
    if converged == trials {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!("{} of {trials} trials did not converge", trials - converged)))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synthesize { model, yr, out } => cmd_synthesize(&model, &yr, &out),
        Command::Simulate { protocol, graph, steps, seed, out, plot, buffer_init, stride, eps_sync, eps_reg } => {
            cmd_simulate(&protocol, &graph, steps, seed, &out, plot, buffer_init, stride, (eps_sync, eps_reg))
        }
        Command::Verify { protocol, graph, grid, delays, budget, out } => {
            cmd_verify(&protocol, &graph, grid, &delays, budget, &out)
        }
        Command::Sweep { protocol, graph, delay_max, trials, seed, steps, out } => {
            cmd_sweep(&protocol, &graph, delay_max, trials, seed, steps, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
