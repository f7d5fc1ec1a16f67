//! Closed-loop simulation: every agent runs plant, precompensator, observer
//! and protocol state; neighbours exchange `y` and `χ` over per-channel
//! FIFO delay lines.
//!
//! One tick reads the delayed values at the channel heads, forms `ζ̄ᵢ` and
//! `ζ̂ᵢ`, updates all agents from the same snapshot, then pushes the
//! tick-`k` values into the channels.

use crate::exec::Execution;
use crate::graph::{DelayMatrix, NetworkSpec};
use crate::numerics::{Mat, Vector};
use crate::plant::SynthesisResult;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("graph is not rooted: some agent cannot be reached from the root set")]
    Unrooted,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state diverged (non-finite value) at tick {tick}")]
    Diverged { tick: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How channel histories are filled for ticks before zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferInit {
    /// Repeat the source's tick-0 value.
    #[default]
    HoldInitial,
    ZeroFill,
}

/// Per-agent dynamic state.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentRuntime {
    /// Plant state.
    pub x: Vector,
    /// Precompensator (integrator) state.
    pub p: Vector,
    /// Observer state.
    pub xhat: Vector,
    /// Protocol state, also the transmitted `ξ`.
    pub chi: Vector,
}

impl AgentRuntime {
    pub fn zeros(n: usize, v: usize) -> Self {
        Self { x: Vector::zeros(n), p: Vector::zeros(v), xhat: Vector::zeros(n + v), chi: Vector::zeros(n + v) }
    }

    fn is_finite(&self) -> bool {
        [&self.x, &self.p, &self.xhat, &self.chi].iter().all(|v| v.iter().all(|s| s.is_finite()))
    }

    /// `[x; p; x̂; χ]`.
    pub fn stacked(&self) -> Vector {
        let parts = [&self.x, &self.p, &self.xhat, &self.chi];
        Vector::from_iterator(parts.iter().map(|v| v.len()).sum(), parts.iter().flat_map(|v| v.iter().copied()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialCondition {
    /// Plant states uniform in `[−half_width, half_width]`, everything else zero.
    Seeded { seed: u64, half_width: f64 },
    Explicit(Vec<AgentRuntime>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub steps: usize,
    pub y_r: Vector,
    pub initial: InitialCondition,
    pub buffer_init: BufferInit,
    pub eps_sync: f64,
    pub eps_reg: f64,
    /// Consecutive ticks under both thresholds that count as converged.
    pub window: usize,
    /// Stop as soon as the window is filled.
    pub early_stop: bool,
    pub record_stride: usize,
    /// Keep the sent/received sequences of every channel.
    pub log_channels: bool,
}

impl SimConfig {
    pub fn new(steps: usize, y_r: Vector, seed: u64) -> Self {
        Self {
            steps,
            y_r,
            initial: InitialCondition::Seeded { seed, half_width: 5.0 },
            buffer_init: BufferInit::HoldInitial,
            eps_sync: 1e-2,
            eps_reg: 1e-2,
            window: 50,
            early_stop: true,
            record_stride: 1,
            log_channels: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.steps == 0 {
            return Err(SimError::Config("steps must be at least 1".into()));
        }
        if !(self.eps_sync > 0.0 && self.eps_reg > 0.0) {
            return Err(SimError::Config("convergence thresholds must be positive".into()));
        }
        if self.record_stride == 0 {
            return Err(SimError::Config("record stride must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(SimError::Config("convergence window must be at least 1".into()));
        }
        if self.y_r.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Config("reference must be finite".into()));
        }
        if let InitialCondition::Seeded { half_width, .. } = self.initial {
            if !(half_width.is_finite() && half_width >= 0.0) {
                return Err(SimError::Config("initial range must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Delay line for the channel `source → sink`. Holds exactly `delay`
/// entries of each signal; the head is the value sent `delay` ticks ago.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayedChannel {
    pub source: usize,
    pub sink: usize,
    pub delay: usize,
    buffer_y: VecDeque<Vector>,
    buffer_xi: VecDeque<Vector>,
}

impl DelayedChannel {
    fn new(source: usize, sink: usize, delay: usize, y0: &Vector, xi0: &Vector) -> Self {
        Self {
            source,
            sink,
            delay,
            buffer_y: std::iter::repeat_n(y0.clone(), delay).collect(),
            buffer_xi: std::iter::repeat_n(xi0.clone(), delay).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.buffer_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer_y.is_empty()
    }

    /// Delayed `(y, ξ)` given the source's current values.
    fn head<'a>(&'a self, y_now: &'a Vector, xi_now: &'a Vector) -> (&'a Vector, &'a Vector) {
        match (self.buffer_y.front(), self.buffer_xi.front()) {
            (Some(y), Some(xi)) => (y, xi),
            _ => (y_now, xi_now),
        }
    }

    fn advance(&mut self, y_now: &Vector, xi_now: &Vector) {
        if self.delay > 0 {
            self.buffer_y.pop_front();
            self.buffer_xi.pop_front();
            self.buffer_y.push_back(y_now.clone());
            self.buffer_xi.push_back(xi_now.clone());
        }
    }
}

/// Sent and received `y` sequences of one channel, tick by tick.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChannelLog {
    pub source: usize,
    pub sink: usize,
    pub delay: usize,
    pub sent: Vec<Vector>,
    pub received: Vec<Vector>,
}

/// Matrices used every tick, copied out of the synthesis result.
#[derive(Clone, Debug)]
struct Protocol {
    a: Mat,
    b: Mat,
    c: Mat,
    abar: Mat,
    bbar: Mat,
    cbar: Mat,
    k: Mat,
    f: Mat,
    bbar_k: Mat,
    gamma1: Mat,
    gamma2: Mat,
}

impl Protocol {
    fn from_synthesis(s: &SynthesisResult) -> Self {
        let c = &s.compensated;
        Self {
            a: s.model.a().clone(),
            b: s.model.b().clone(),
            c: s.model.c().clone(),
            abar: c.abar.clone(),
            bbar: c.bbar.clone(),
            cbar: c.cbar.clone(),
            k: s.gains.k.clone(),
            f: s.gains.f.clone(),
            bbar_k: &c.bbar * &s.gains.k,
            gamma1: s.precompensator.gamma1.clone(),
            gamma2: s.precompensator.gamma2.clone(),
        }
    }
}

/// Neighbour `j` of agent `i` with `ℓ̄_ij` and the channel index.
#[derive(Clone, Copy, Debug)]
struct Link {
    source: usize,
    lbar: f64,
    channel: usize,
}

/// Full simulator state at tick `k`.
#[derive(Clone, Debug)]
pub struct SimState {
    pub k: usize,
    pub agents: Vec<AgentRuntime>,
    pub channels: Vec<DelayedChannel>,
    pub logs: Option<Vec<ChannelLog>>,
    y_r: Vector,
    protocol: Protocol,
    lbar_diag: Vec<f64>,
    inv_weight: Vec<f64>,
    links: Vec<Vec<Link>>,
}

/// Seeded plant states, uniform per component.
pub fn seeded_agents(n_agents: usize, n: usize, v: usize, seed: u64, half_width: f64) -> Vec<AgentRuntime> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_agents)
        .map(|_| {
            let mut a = AgentRuntime::zeros(n, v);
            for s in a.x.iter_mut() {
                *s = if half_width > 0.0 { rng.random_range(-half_width..=half_width) } else { 0.0 };
            }
            a
        })
        .collect()
}

pub fn init(synth: &SynthesisResult, net: &NetworkSpec, cfg: &SimConfig) -> Result<SimState, SimError> {
    cfg.validate()?;
    if !net.is_rooted() {
        return Err(SimError::Unrooted);
    }
    let (n, v, p) = (synth.model.n(), synth.v(), synth.model.p());
    if cfg.y_r.len() != p {
        return Err(SimError::Dimension(format!("y_r has {} entries, protocol has p = {p}", cfg.y_r.len())));
    }
    let n_agents = net.node_count();
    let agents = match &cfg.initial {
        InitialCondition::Seeded { seed, half_width } => seeded_agents(n_agents, n, v, *seed, *half_width),
        InitialCondition::Explicit(list) => {
            if list.len() != n_agents {
                return Err(SimError::Dimension(format!("{} initial states for {n_agents} agents", list.len())));
            }
            for a in list {
                if a.x.len() != n || a.p.len() != v || a.xhat.len() != n + v || a.chi.len() != n + v {
                    return Err(SimError::Dimension("initial agent state does not match the protocol".into()));
                }
            }
            list.clone()
        }
    };
    let protocol = Protocol::from_synthesis(synth);

    let lbar = &net.matrices.lbar;
    let mut channels = Vec::new();
    let mut links = vec![Vec::new(); n_agents];
    for (i, agent_links) in links.iter_mut().enumerate() {
        for j in net.graph.in_neighbors(i) {
            let delay = net.delays.get(i, j);
            let (y0, xi0) = match cfg.buffer_init {
                BufferInit::HoldInitial => (&protocol.c * &agents[j].x, agents[j].chi.clone()),
                BufferInit::ZeroFill => (Vector::zeros(p), Vector::zeros(n + v)),
            };
            agent_links.push(Link { source: j, lbar: lbar[(i, j)], channel: channels.len() });
            channels.push(DelayedChannel::new(j, i, delay, &y0, &xi0));
        }
    }
    let logs = cfg.log_channels.then(|| {
        channels
            .iter()
            .map(|c| ChannelLog { source: c.source, sink: c.sink, delay: c.delay, ..Default::default() })
            .collect()
    });

    Ok(SimState {
        k: 0,
        agents,
        channels,
        logs,
        y_r: cfg.y_r.clone(),
        protocol,
        lbar_diag: (0..n_agents).map(|i| lbar[(i, i)]).collect(),
        inv_weight: (0..n_agents).map(|i| 1.0 / (2.0 + net.matrices.din[i])).collect(),
        links,
    })
}

impl SimState {
    pub fn outputs(&self) -> Vec<Vector> {
        self.agents.iter().map(|a| &self.protocol.c * &a.x).collect()
    }

    pub fn y_r(&self) -> &Vector {
        &self.y_r
    }

    fn zeta_bar_with(&self, i: usize, ys: &[Vector]) -> Vector {
        let mut acc = (&ys[i] - &self.y_r) * self.lbar_diag[i];
        for link in &self.links[i] {
            let (y, _) = self.channels[link.channel].head(&ys[link.source], &self.agents[link.source].chi);
            acc += (y - &self.y_r) * link.lbar;
        }
        acc * self.inv_weight[i]
    }

    fn zeta_hat_with(&self, i: usize, ys: &[Vector]) -> Vector {
        let mut acc = &self.agents[i].chi * self.lbar_diag[i];
        for link in &self.links[i] {
            let (_, xi) = self.channels[link.channel].head(&ys[link.source], &self.agents[link.source].chi);
            acc += xi * link.lbar;
        }
        acc * self.inv_weight[i]
    }
}

/// `ζ̄ᵢ = (1/(2 + d_in(i))) Σⱼ ℓ̄ᵢⱼ (yⱼ(k − κᵢⱼ) − y_r)`.
pub fn compute_zeta_bar(i: usize, state: &SimState) -> Vector {
    state.zeta_bar_with(i, &state.outputs())
}

/// `ζ̂ᵢ = (1/(2 + d_in(i))) Σⱼ ℓ̄ᵢⱼ χⱼ(k − κᵢⱼ)`.
pub fn compute_zeta_hat(i: usize, state: &SimState) -> Vector {
    state.zeta_hat_with(i, &state.outputs())
}

/// Advance every agent by one tick.
pub fn step(state: &mut SimState) -> Result<(), SimError> {
    let ys = state.outputs();
    let zetas: Vec<(Vector, Vector)> =
        (0..state.agents.len()).map(|i| (state.zeta_bar_with(i, &ys), state.zeta_hat_with(i, &ys))).collect();

    if let Some(logs) = state.logs.as_mut() {
        for (log, ch) in logs.iter_mut().zip(&state.channels) {
            let (y, _) = ch.head(&ys[ch.source], &state.agents[ch.source].chi);
            log.sent.push(ys[ch.source].clone());
            log.received.push(y.clone());
        }
    }

    let pr = &state.protocol;
    let v_dim = pr.gamma1.ncols();
    let free = pr.gamma2.ncols();
    let next: Vec<AgentRuntime> = state
        .agents
        .iter()
        .zip(&zetas)
        .map(|(a, (zbar, zhat))| {
            let v = -(&pr.k * &a.chi);
            let u = &pr.gamma1 * &a.p + &pr.gamma2 * v.rows(0, free);
            let xhat = &pr.abar * &a.xhat - &pr.bbar_k * zhat + &pr.f * (zbar - &pr.cbar * &a.xhat);
            let chi = &pr.abar * (&a.chi + &a.xhat - zhat) + &pr.bbar * &v;
            let p = &a.p + v.rows(free, v_dim);
            let x = &pr.a * &a.x + &pr.b * u;
            AgentRuntime { x, p, xhat, chi }
        })
        .collect();

    for ch in state.channels.iter_mut() {
        ch.advance(&ys[ch.source], &state.agents[ch.source].chi);
    }
    state.agents = next;
    state.k += 1;
    if state.agents.iter().any(|a| !a.is_finite()) {
        return Err(SimError::Diverged { tick: state.k });
    }
    Ok(())
}

/// `(max_{i,j} ‖xᵢ − xⱼ‖∞, maxᵢ ‖yᵢ − y_r‖∞)`.
pub fn metrics(state: &SimState) -> (f64, f64) {
    let n = state.protocol.a.nrows();
    let mut sync: f64 = 0.0;
    for c in 0..n {
        let (lo, hi) = state
            .agents
            .iter()
            .map(|a| a.x[c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        sync = sync.max(hi - lo);
    }
    let reg = state.outputs().iter().map(|y| (y - &state.y_r).amax()).fold(0.0, f64::max);
    (sync, reg)
}

/// One recorded tick.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub k: usize,
    pub agents: Vec<AgentRuntime>,
    pub outputs: Vec<Vector>,
    pub sync_error: f64,
    pub reg_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<Record>,
    /// Last simulated tick.
    pub final_tick: usize,
    pub final_sync_error: f64,
    pub final_reg_error: f64,
    /// Start of the run of ticks (lasting to the end) with both metrics under threshold.
    pub converged_at: Option<usize>,
    /// Whether that run reached the configured window length.
    pub converged: bool,
    pub early_stopped: bool,
    pub channel_logs: Option<Vec<ChannelLog>>,
    pub n: usize,
    pub v: usize,
    pub p: usize,
}

/// Iterate up to `cfg.steps` ticks, recording every `record_stride`-th tick
/// and always the last one.
pub fn run(state: &mut SimState, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let record = |s: &SimState, m: (f64, f64)| Record {
        k: s.k,
        agents: s.agents.clone(),
        outputs: s.outputs(),
        sync_error: m.0,
        reg_error: m.1,
    };
    let under = |m: (f64, f64)| m.0 < cfg.eps_sync && m.1 < cfg.eps_reg;

    let mut records = Vec::new();
    let mut m = metrics(state);
    let mut streak_start = under(m).then_some(state.k);
    let start = state.k;
    let mut early_stopped = false;
    let mut last_recorded = None;
    loop {
        if (state.k - start).is_multiple_of(cfg.record_stride) {
            records.push(record(state, m));
            last_recorded = Some(state.k);
        }
        let streak = streak_start.map_or(0, |s| state.k - s + 1);
        if cfg.early_stop && streak >= cfg.window {
            early_stopped = true;
            break;
        }
        if state.k - start >= cfg.steps {
            break;
        }
        step(state)?;
        m = metrics(state);
        streak_start = if under(m) { streak_start.or(Some(state.k)) } else { None };
    }
    if last_recorded != Some(state.k) {
        records.push(record(state, m));
    }
    let streak = streak_start.map_or(0, |s| state.k - s + 1);
    Ok(Trajectory {
        records,
        final_tick: state.k,
        final_sync_error: m.0,
        final_reg_error: m.1,
        converged_at: streak_start,
        converged: streak >= cfg.window.min(state.k - start + 1),
        early_stopped,
        channel_logs: state.logs.clone(),
        n: state.protocol.a.nrows(),
        v: state.protocol.gamma1.ncols(),
        p: state.protocol.c.nrows(),
    })
}

/// `init` followed by `run`.
pub fn simulate(synth: &SynthesisResult, net: &NetworkSpec, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    let mut state = init(synth, net, cfg)?;
    run(&mut state, cfg)
}

impl Trajectory {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["k".to_string(), "agent".to_string()];
        h.extend((1..=self.n).map(|i| format!("x{i}")));
        h.extend((1..=self.v).map(|i| format!("p{i}")));
        h.extend((1..=self.p).map(|i| format!("y{i}")));
        h.push("sync_error".into());
        h.push("reg_error".into());
        h
    }

    /// One row per (tick, agent); agents are numbered from 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.csv_header())?;
        for r in &self.records {
            for (i, (a, y)) in r.agents.iter().zip(&r.outputs).enumerate() {
                let mut row = vec![r.k.to_string(), (i + 1).to_string()];
                row.extend(a.x.iter().chain(a.p.iter()).chain(y.iter()).map(|v| v.to_string()));
                row.push(r.sync_error.to_string());
                row.push(r.reg_error.to_string());
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Line plot of every output component per agent (top) and
    /// `log10(sync_error)` (bottom).
    pub fn to_svg(&self) -> String {
        const W: f64 = 800.0;
        const H: f64 = 260.0;
        const PAD: f64 = 40.0;
        const COLORS: [&str; 10] =
            ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];
        let k_max = self.records.last().map_or(1, |r| r.k.max(1)) as f64;
        let sx = |k: usize| PAD + (W - 2.0 * PAD) * k as f64 / k_max;

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &self.records {
            for y in &r.outputs {
                for &v in y.iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        if hi.is_nan() || lo.is_nan() || hi <= lo {
            hi = lo + 1.0;
        }
        let sy = |v: f64, top: f64| top + H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            2.0 * H
        );
        out += &format!("<text x=\"{PAD}\" y=\"20\">outputs y_i(k), range [{lo:.3}, {hi:.3}]</text>\n");
        let n_agents = self.records.first().map_or(0, |r| r.outputs.len());
        for i in 0..n_agents {
            for c in 0..self.p {
                let pts: Vec<String> = self
                    .records
                    .iter()
                    .map(|r| format!("{:.2},{:.2}", sx(r.k), sy(r.outputs[i][c], 0.0)))
                    .collect();
                out += &format!(
                    "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>\n",
                    COLORS[i % COLORS.len()],
                    pts.join(" ")
                );
            }
        }

        let logs: Vec<f64> = self.records.iter().map(|r| r.sync_error.max(1e-300).log10().max(-16.0)).collect();
        let llo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let lhi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(llo + 1.0);
        let sl = |v: f64| H + H - PAD - (H - 2.0 * PAD) * (v - llo) / (lhi - llo);
        out += &format!("<text x=\"{PAD}\" y=\"{}\">log10 sync_error, range [{llo:.1}, {lhi:.1}]</text>\n", H + 20.0);
        let pts: Vec<String> =
            self.records.iter().zip(&logs).map(|(r, &l)| format!("{:.2},{:.2}", sx(r.k), sl(l))).collect();
        out += &format!("<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"{}\"/>\n", pts.join(" "));
        out += "</svg>\n";
        out
    }

    /// Worst sync error over the first and last quarter of the records.
    pub fn quarter_sync_errors(&self) -> (f64, f64) {
        let n = self.records.len();
        let q = (n / 4).max(1);
        let max_of = |rs: &[Record]| rs.iter().map(|r| r.sync_error).fold(0.0, f64::max);
        (max_of(&self.records[..q.min(n)]), max_of(&self.records[n.saturating_sub(q)..]))
    }
}

/// Dense delay-free closed loop: the stacked state `[x; p; x̂; χ]` of all
/// agents evolves as `s(k+1) = M s(k) + c`. Assembled directly from the
/// compensated model and `(2I + D_in)⁻¹ L̄`, independent of the message passing.
pub fn delay_free_dense_system(synth: &SynthesisResult, net: &NetworkSpec, y_r: &Vector) -> (Mat, Vector) {
    let (n, v) = (synth.model.n(), synth.v());
    let q = n + v;
    let d = n + v + 2 * q;
    let big_n = net.node_count();
    let comp = &synth.compensated;
    let (k, f) = (&synth.gains.k, &synth.gains.f);
    let (a, b, c) = (synth.model.a(), synth.model.b(), synth.model.c());
    let free = synth.precompensator.gamma2.ncols();
    let gamma1 = &synth.precompensator.gamma1;
    // [Γ₂ 0] and [0 I] selectors on v
    let mut sel_u = Mat::zeros(synth.model.m(), synth.model.m());
    sel_u.view_mut((0, 0), (synth.model.m(), free)).copy_from(&synth.precompensator.gamma2);
    let mut sel_p = Mat::zeros(v, synth.model.m());
    sel_p.view_mut((0, free), (v, v)).copy_from(&Mat::identity(v, v));

    let g = {
        let mut g = net.matrices.lbar.clone();
        for i in 0..big_n {
            let w = 1.0 / (2.0 + net.matrices.din[i]);
            g.row_mut(i).scale_mut(w);
        }
        g
    };

    let bk = &comp.bbar * k;
    let (ox, op, oh, oc) = (0, n, n + v, n + v + q);
    let mut m = Mat::zeros(big_n * d, big_n * d);
    let mut cst = Vector::zeros(big_n * d);
    let put = |m: &mut Mat, i: usize, j: usize, r0: usize, c0: usize, blk: &Mat| {
        let mut view = m.view_mut((i * d + r0, j * d + c0), blk.shape());
        view += blk;
    };
    for i in 0..big_n {
        // x⁺ = A x + B Γ₁ p − B [Γ₂ 0] K χ
        put(&mut m, i, i, ox, ox, a);
        put(&mut m, i, i, ox, op, &(b * gamma1));
        put(&mut m, i, i, ox, oc, &(-(b * &sel_u * k)));
        // p⁺ = p − [0 I] K χ
        put(&mut m, i, i, op, op, &Mat::identity(v, v));
        put(&mut m, i, i, op, oc, &(-(&sel_p * k)));
        // x̂⁺ = (Ā − F C̄) x̂ − B̄K ζ̂ + F ζ̄
        put(&mut m, i, i, oh, oh, &(&comp.abar - f * &comp.cbar));
        // χ⁺ = (Ā − B̄K) χ + Ā x̂ − Ā ζ̂
        put(&mut m, i, i, oc, oc, &(&comp.abar - &bk));
        put(&mut m, i, i, oc, oh, &comp.abar);
        let mut row_sum = 0.0;
        for j in 0..big_n {
            let gij = g[(i, j)];
            if gij == 0.0 {
                continue;
            }
            row_sum += gij;
            put(&mut m, i, j, oh, oc, &(&bk * (-gij)));
            put(&mut m, i, j, oh, ox, &(f * c * gij));
            put(&mut m, i, j, oc, oc, &(&comp.abar * (-gij)));
        }
        let offset = -(f * y_r) * row_sum;
        cst.rows_mut(i * d + oh, q).copy_from(&offset);
    }
    (m, cst)
}

/// One row of a delay sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub trial: usize,
    pub seed: u64,
    /// `from->to:delay` (1-based) for every edge, `;`-separated.
    pub delays: String,
    pub max_delay: usize,
    pub converged: bool,
    pub convergence_tick: Option<usize>,
    pub final_tick: usize,
    pub sync_error: f64,
    pub reg_error: f64,
    pub status: String,
}

/// Seed of the delay draw for one trial.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Independent runs with delays drawn uniformly from `0..=delay_max` per edge.
/// Initial states come from `cfg` and are the same in every trial.
/// Divergence is reported in the row instead of aborting.
pub fn delay_sweep(
    synth: &SynthesisResult,
    net: &NetworkSpec,
    cfg: &SimConfig,
    delay_max: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Vec<SweepRow> {
    exec.map_range(trials, |trial| {
        let tseed = trial_seed(seed, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(tseed);
        let mut delays = DelayMatrix::zeros(net.node_count());
        let edges = net.graph.edges();
        for &(from, to) in &edges {
            delays.set(to, from, rng.random_range(0..=delay_max));
        }
        let label = edges
            .iter()
            .map(|&(from, to)| format!("{}->{}:{}", from + 1, to + 1, delays.get(to, from)))
            .collect::<Vec<_>>()
            .join(";");
        let max_delay = delays.max_delay();
        let base = SweepRow {
            trial,
            seed: tseed,
            delays: label,
            max_delay,
            converged: false,
            convergence_tick: None,
            final_tick: 0,
            sync_error: f64::NAN,
            reg_error: f64::NAN,
            status: String::new(),
        };
        let outcome = net
            .with_delays(delays)
            .map_err(|e| e.to_string())
            .and_then(|spec| simulate(synth, &spec, cfg).map_err(|e| e.to_string()));
        match outcome {
            Ok(t) => SweepRow {
                converged: t.converged,
                convergence_tick: t.converged_at,
                final_tick: t.final_tick,
                sync_error: t.final_sync_error,
                reg_error: t.final_reg_error,
                status: if t.converged { "converged".into() } else { "not-converged".into() },
                ..base
            },
            Err(e) => SweepRow { status: format!("error: {e}"), ..base },
        }
    })
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "trial",
        "seed",
        "delays",
        "max_delay",
        "converged",
        "convergence_tick",
        "final_tick",
        "sync_error",
        "reg_error",
        "status",
    ])?;
    for r in rows {
        wr.write_record([
            r.trial.to_string(),
            r.seed.to_string(),
            r.delays.clone(),
            r.max_delay.to_string(),
            r.converged.to_string(),
            r.convergence_tick.map_or(String::new(), |k| k.to_string()),
            r.final_tick.to_string(),
            r.sync_error.to_string(),
            r.reg_error.to_string(),
            r.status.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::graph::{RootSet, WeightedDigraph};
    use crate::plant::{synthesize, AgentModel, Tolerances};

    fn example_synth() -> SynthesisResult {
        synthesize(&fixtures::example_model(), &Vector::from_element(1, fixtures::EXAMPLE_YR), &Tolerances::default())
            .unwrap()
    }

    fn scalar_synth(y_r: f64) -> SynthesisResult {
        let half = Mat::from_element(1, 1, 0.5);
        let one = Mat::from_element(1, 1, 1.0);
        let model = AgentModel::new(half, one.clone(), one).unwrap();
        synthesize(&model, &Vector::from_element(1, y_r), &Tolerances::default()).unwrap()
    }

    fn single_root() -> NetworkSpec {
        NetworkSpec::new(WeightedDigraph::empty(1), RootSet::new(1, [0]).unwrap(), DelayMatrix::zeros(1)).unwrap()
    }

    fn chain2() -> NetworkSpec {
        let g = WeightedDigraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let mut d = DelayMatrix::zeros(2);
        d.set(1, 0, 3);
        NetworkSpec::new(g, RootSet::new(2, [0]).unwrap(), d).unwrap()
    }

    fn explicit(agents: Vec<AgentRuntime>, steps: usize, y_r: f64) -> SimConfig {
        let mut cfg = SimConfig::new(steps, Vector::from_element(1, y_r), 0);
        cfg.initial = InitialCondition::Explicit(agents);
        cfg
    }

    #[test]
    fn zeta_bar_examples() {
        let s = scalar_synth(1.0);
        // y₁ = 2 now, y₂ history 0: ζ̄₂ = (1/3)(−(2 − 1) + (0 − 1)) with the delayed y₁.
        let mut a1 = AgentRuntime::zeros(1, s.v());
        a1.x[0] = 2.0;
        let a2 = AgentRuntime::zeros(1, s.v());
        let net = NetworkSpec::new(
            WeightedDigraph::from_edges(2, &[(0, 1, 1.0)]).unwrap(),
            RootSet::new(2, [0]).unwrap(),
            DelayMatrix::zeros(2),
        )
        .unwrap();
        let st = init(&s, &net, &explicit(vec![a1, a2], 1, 1.0)).unwrap();
        assert!((compute_zeta_bar(1, &st)[0] + 2.0 / 3.0).abs() < 1e-15);
        assert!((compute_zeta_bar(0, &st)[0] - 0.5).abs() < 1e-15);

        // at the reference everywhere: zero
        let mut b = AgentRuntime::zeros(1, s.v());
        b.x[0] = 1.0;
        let st = init(&s, &net, &explicit(vec![b.clone(), b], 1, 1.0)).unwrap();
        assert_eq!(compute_zeta_bar(0, &st)[0], 0.0);
        assert_eq!(compute_zeta_bar(1, &st)[0], 0.0);
    }

    #[test]
    fn zeta_hat_examples() {
        let s = example_synth();
        let q = s.order();
        let mut a1 = AgentRuntime::zeros(3, s.v());
        a1.chi = Vector::from_element(q, 1.5);
        let a2 = AgentRuntime::zeros(3, s.v());
        let net = chain2();
        let st = init(&s, &net, &explicit(vec![a1.clone(), a2], 1, 5.0)).unwrap();
        // held history of χ₁ ≡ c
        assert!((compute_zeta_hat(1, &st) - Vector::from_element(q, -0.5)).amax() < 1e-15);
        let st = init(&s, &single_root(), &explicit(vec![a1.clone()], 1, 5.0)).unwrap();
        assert!((compute_zeta_hat(0, &st) - &a1.chi * 0.5).amax() < 1e-15);
        let st = init(&s, &net, &explicit(vec![AgentRuntime::zeros(3, 1); 2], 1, 5.0)).unwrap();
        assert_eq!(compute_zeta_hat(1, &st).amax(), 0.0);
    }

    #[test]
    fn buffers_hold_exactly_kappa() {
        let s = example_synth();
        let net = fixtures::five_node_network();
        let st = init(&s, &net, &SimConfig::new(10, Vector::from_element(1, 5.0), 1)).unwrap();
        for ch in &st.channels {
            assert_eq!(ch.len(), net.delays.get(ch.sink, ch.source));
        }
        let ch = st.channels.iter().find(|c| c.source == 2 && c.sink == 3).unwrap();
        assert_eq!(ch.len(), 1);
        let mut st = st;
        for _ in 0..5 {
            step(&mut st).unwrap();
            assert!(st.channels.iter().all(|c| c.len() == c.delay));
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let s = synthesize(&fixtures::example_model(), &Vector::zeros(1), &Tolerances::default()).unwrap();
        let net = fixtures::chain3_network();
        let mut cfg = SimConfig::new(100, Vector::zeros(1), 0);
        cfg.initial = InitialCondition::Seeded { seed: 0, half_width: 0.0 };
        cfg.early_stop = false;
        let t = simulate(&s, &net, &cfg).unwrap();
        for r in &t.records {
            assert!(r.agents.iter().all(|a| a.stacked().amax() == 0.0));
        }
    }

    #[test]
    fn scalar_agent_decays() {
        let s = scalar_synth(0.0);
        let mut a = AgentRuntime::zeros(1, s.v());
        a.x[0] = 1.0;
        let mut cfg = explicit(vec![a], 200, 0.0);
        cfg.early_stop = false;
        let t = simulate(&s, &single_root(), &cfg).unwrap();
        let norms: Vec<f64> = t.records.iter().map(|r| r.agents[0].stacked().norm()).collect();
        assert!(norms[200] < 1e-12 * norms[0]);
        // after the transient, geometric decay
        for w in norms[20..100].windows(10) {
            assert!(w[9] < w[0]);
        }
    }

    #[test]
    fn metrics_examples() {
        let s = example_synth();
        let net = chain2();
        let mut a1 = AgentRuntime::zeros(3, 1);
        a1.x[0] = 1.0;
        let st = init(&s, &net, &explicit(vec![a1, AgentRuntime::zeros(3, 1)], 1, 5.0)).unwrap();
        assert_eq!(metrics(&st).0, 1.0);

        // y = x₁ + x₃ = 5 on both agents
        let mut b = AgentRuntime::zeros(3, 1);
        b.x[0] = 2.0;
        b.x[2] = 3.0;
        let st = init(&s, &net, &explicit(vec![b.clone(), b], 1, 5.0)).unwrap();
        assert_eq!(metrics(&st), (0.0, 0.0));
    }

    #[test]
    fn config_validation() {
        let s = example_synth();
        let net = fixtures::chain3_network();
        assert!(matches!(init(&s, &net, &SimConfig::new(0, Vector::from_element(1, 5.0), 0)), Err(SimError::Config(_))));
        let mut cfg = SimConfig::new(10, Vector::from_element(1, 5.0), 0);
        cfg.eps_sync = 0.0;
        assert!(init(&s, &net, &cfg).is_err());
        let cfg = SimConfig::new(10, Vector::from_element(2, 5.0), 0);
        assert!(matches!(init(&s, &net, &cfg), Err(SimError::Dimension(_))));
    }

    #[test]
    fn unrooted_rejected() {
        let s = example_synth();
        let net = NetworkSpec::from_json(fixtures::GRAPH_N5_UNROOTED_JSON).unwrap();
        let cfg = SimConfig::new(10, Vector::from_element(1, 5.0), 0);
        assert!(matches!(init(&s, &net, &cfg), Err(SimError::Unrooted)));
    }

    #[test]
    fn divergence_reported() {
        let mut s = example_synth();
        s.gains.k *= -40.0;
        let net = fixtures::chain3_network();
        let mut cfg = SimConfig::new(20_000, Vector::from_element(1, 5.0), 1);
        cfg.early_stop = false;
        match simulate(&s, &net, &cfg) {
            Err(SimError::Diverged { tick }) => assert!(tick > 0),
            other => panic!("expected divergence, got {:?}", other.map(|t| t.final_sync_error)),
        }
    }

    #[test]
    fn csv_layout() {
        let s = example_synth();
        let net = fixtures::chain3_network();
        let mut cfg = SimConfig::new(4, Vector::from_element(1, 5.0), 3);
        cfg.early_stop = false;
        let t = simulate(&s, &net, &cfg).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k,agent,x1,x2,x3,p1,y1,sync_error,reg_error");
        assert_eq!(text.lines().count(), 1 + 5 * 3);
        assert!(t.to_svg().starts_with("<svg"));
    }

    #[test]
    fn record_stride_keeps_last_tick() {
        let s = example_synth();
        let net = fixtures::chain3_network();
        let mut cfg = SimConfig::new(10, Vector::from_element(1, 5.0), 3);
        cfg.early_stop = false;
        cfg.record_stride = 4;
        let t = simulate(&s, &net, &cfg).unwrap();
        let ks: Vec<usize> = t.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 4, 8, 10]);
    }

    #[test]
    fn channel_logs_shift_by_delay() {
        let s = example_synth();
        let net = fixtures::ring10_network();
        let mut cfg = SimConfig::new(60, Vector::from_element(1, 5.0), 9);
        cfg.early_stop = false;
        cfg.log_channels = true;
        let t = simulate(&s, &net, &cfg).unwrap();
        let logs = t.channel_logs.unwrap();
        assert!(logs.iter().any(|l| l.delay == 5));
        for log in logs {
            let d = log.delay;
            for k in d..log.sent.len() {
                assert_eq!(log.received[k], log.sent[k - d]);
            }
            // hold-initial prefill
            for k in 0..d {
                assert_eq!(log.received[k], log.sent[0]);
            }
        }
    }

    #[test]
    fn zero_fill_prefill() {
        let s = example_synth();
        let net = fixtures::chain3_network();
        let mut cfg = SimConfig::new(5, Vector::from_element(1, 5.0), 9);
        cfg.buffer_init = BufferInit::ZeroFill;
        cfg.log_channels = true;
        cfg.early_stop = false;
        let t = simulate(&s, &net, &cfg).unwrap();
        for log in t.channel_logs.unwrap() {
            assert_eq!(log.received[0][0], 0.0);
        }
    }

    #[test]
    fn sweep_rows_in_trial_order() {
        let s = example_synth();
        let net = fixtures::chain3_network();
        let cfg = SimConfig::new(3000, Vector::from_element(1, 5.0), 4);
        let rows = delay_sweep(&s, &net, &cfg, 0, 3, 17, Execution::default());
        assert_eq!(rows.iter().map(|r| r.trial).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(rows.iter().all(|r| r.converged && r.max_delay == 0));
        assert_eq!(rows[0].final_tick, rows[2].final_tick);
        assert_eq!(rows[0].sync_error, rows[1].sync_error);
        let seq = delay_sweep(&s, &net, &cfg, 4, 4, 17, Execution::Sequential);
        let par = delay_sweep(&s, &net, &cfg, 4, 4, 17, Execution::default());
        assert_eq!(seq, par);
    }
}
