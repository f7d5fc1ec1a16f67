//! Frequency-domain stability scans.
//!
//! These are sampled checks over an ω grid and a finite set of delay
//! assignments. A failing scan is a counterexample; a passing one is evidence,
//! not a proof.

use crate::exec::Execution;
use crate::graph::{self, DelayMatrix, GraphError, Lemma2Report, NetworkSpec};
use crate::numerics::{self, CMat, Mat, NumericsError};
use crate::plant::SynthesisResult;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pencil margin (smallest singular value) that counts as nonsingular.
pub const PENCIL_MARGIN: f64 = 1e-8;
/// Required distance of closed-loop eigenvalues from the unit circle.
pub const RADIUS_MARGIN: f64 = 1e-9;
/// Delay values combined per channel by the default sampler.
pub const DEFAULT_DELAY_VALUES: [usize; 7] = [0, 1, 2, 3, 5, 10, 50];
/// Maximum number of sampled delay assignments.
pub const DEFAULT_DELAY_BUDGET: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("graph is not rooted")]
    Unrooted,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `x(k+1) = A₀ x(k) + Σᵢ Aᵢ x(k − κᵢ)`; each term carries a default delay.
#[derive(Clone, Debug, PartialEq)]
pub struct DelaySystem {
    pub a0: Mat,
    pub terms: Vec<(Mat, usize)>,
}

impl DelaySystem {
    pub fn new(a0: Mat, terms: Vec<(Mat, usize)>) -> Result<Self, VerifyError> {
        let d = a0.nrows();
        if !a0.is_square() {
            return Err(VerifyError::Dimension(format!("A0 is {:?}", a0.shape())));
        }
        if let Some((i, _)) = terms.iter().enumerate().find(|(_, (a, _))| a.shape() != (d, d)) {
            return Err(VerifyError::Dimension(format!("A{} is {:?}, expected {d}x{d}", i + 1, terms[i].0.shape())));
        }
        Ok(Self { a0, terms })
    }

    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    /// `A₀ + Σ Aᵢ`, the system with all delays zero.
    pub fn undelayed(&self) -> Mat {
        self.terms.iter().fold(self.a0.clone(), |acc, (a, _)| acc + a)
    }

    /// `e^{jω} I − A₀ − Σ e^{−jωκᵢ} Aᵢ`.
    pub fn pencil(&self, omega: f64, delays: &[usize]) -> CMat {
        let d = self.dim();
        let mut m = CMat::identity(d, d) * Complex64::from_polar(1.0, omega) - numerics::to_complex(&self.a0);
        for ((a, _), &k) in self.terms.iter().zip(delays) {
            let phase = Complex64::from_polar(1.0, -omega * k as f64);
            m -= numerics::to_complex(a) * phase;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub omega: f64,
    /// Index into the delay samples.
    pub sample: usize,
    /// Delays of that sample (per term, or per edge in graph edge order).
    pub delays: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub passed: bool,
    #[serde(rename = "grid")]
    pub omega_grid_size: usize,
    pub samples: usize,
    /// Smallest margin seen; positive means inside the stable region.
    pub min_margin: f64,
    /// Margin the scan has to exceed.
    pub threshold: f64,
    pub worst_point: Option<WorstPoint>,
    /// Set when the scan stopped at a precondition.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl ScanReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Reduce `(margin, omega_index, sample_index)` to the smallest margin.
fn reduce_min(values: impl Iterator<Item = (f64, usize, usize)>) -> Option<(f64, usize, usize)> {
    values.fold(None, |best, v| match best {
        Some(b) if b.0 <= v.0 => Some(b),
        _ => Some(v),
    })
}

/// All tuples over [`DEFAULT_DELAY_VALUES`] when there are at most `budget`
/// of them; otherwise the uniform tuples plus seeded random ones up to `budget`.
pub fn default_delay_tuples(len: usize, budget: usize) -> Vec<Vec<usize>> {
    let vals = &DEFAULT_DELAY_VALUES;
    let total = (vals.len() as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if total <= budget as u128 {
        let mut out = Vec::with_capacity(total as usize);
        for mut idx in 0..total as usize {
            let mut t = Vec::with_capacity(len);
            for _ in 0..len {
                t.push(vals[idx % vals.len()]);
                idx /= vals.len();
            }
            out.push(t);
        }
        return out;
    }
    let mut out: Vec<Vec<usize>> = vals.iter().map(|&v| vec![v; len]).take(budget).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + len as u64);
    while out.len() < budget {
        out.push((0..len).map(|_| vals[rng.random_range(0..vals.len())]).collect());
    }
    out
}

/// Smallest singular value of the delay pencil over the grid and delay samples.
/// Fails immediately if the undelayed system `A₀ + Σ Aᵢ` is not Schur stable.
/// An empty `delay_samples` uses the delays stored in `sys`.
pub fn lemma1_scan(
    sys: &DelaySystem,
    omegas: &[f64],
    delay_samples: &[Vec<usize>],
    exec: Execution,
) -> Result<ScanReport, VerifyError> {
    let own = [sys.terms.iter().map(|(_, k)| *k).collect::<Vec<_>>()];
    let samples: &[Vec<usize>] = if delay_samples.is_empty() { &own } else { delay_samples };
    if let Some(s) = samples.iter().find(|s| s.len() != sys.terms.len()) {
        return Err(VerifyError::Dimension(format!("delay sample of length {} for {} terms", s.len(), sys.terms.len())));
    }
    let rho = numerics::spectral_radius(&sys.undelayed())?;
    if rho >= 1.0 {
        return Ok(ScanReport {
            passed: false,
            omega_grid_size: omegas.len(),
            samples: samples.len(),
            min_margin: 1.0 - rho,
            threshold: PENCIL_MARGIN,
            worst_point: None,
            note: Some(format!("undelayed system A0 + sum Ai is not Schur stable (spectral radius {rho})")),
        });
    }
    let per_omega = samples.len();
    let margins = exec.map_range(omegas.len() * per_omega, |idx| {
        let (w, s) = (idx / per_omega, idx % per_omega);
        (numerics::min_singular_value_complex(&sys.pencil(omegas[w], &samples[s])), w, s)
    });
    Ok(finish(reduce_min(margins.into_iter()), omegas, samples.len(), PENCIL_MARGIN, |s| samples[s].clone()))
}

fn finish(
    worst: Option<(f64, usize, usize)>,
    omegas: &[f64],
    n_samples: usize,
    threshold: f64,
    delays_of: impl Fn(usize) -> Vec<usize>,
) -> ScanReport {
    match worst {
        Some((margin, w, s)) => ScanReport {
            passed: margin > threshold,
            omega_grid_size: omegas.len(),
            samples: n_samples,
            min_margin: margin,
            threshold,
            worst_point: Some(WorstPoint { omega: omegas[w], sample: s, delays: delays_of(s) }),
            note: None,
        },
        None => ScanReport {
            passed: false,
            omega_grid_size: omegas.len(),
            samples: n_samples,
            min_margin: f64::NAN,
            threshold,
            worst_point: None,
            note: Some("empty scan".into()),
        },
    }
}

/// Per-edge delays in graph edge order.
pub fn edge_delays(net: &NetworkSpec, kappa: &DelayMatrix) -> Vec<usize> {
    net.graph.edges().into_iter().map(|(from, to)| kappa.get(to, from)).collect()
}

/// Delay matrix from per-edge delays in graph edge order.
pub fn delays_from_edges(net: &NetworkSpec, values: &[usize]) -> DelayMatrix {
    let mut d = DelayMatrix::zeros(net.node_count());
    for ((from, to), &k) in net.graph.edges().into_iter().zip(values) {
        d.set(to, from, k);
    }
    d
}

/// The network's own delays followed by [`default_delay_tuples`] over its edges
/// (`budget` assignments in total at most, plus the network's own).
pub fn default_network_delay_samples(net: &NetworkSpec, budget: usize) -> Vec<DelayMatrix> {
    let edges = net.graph.edges().len();
    let mut out = vec![net.delays.clone()];
    for t in default_delay_tuples(edges, budget) {
        let d = delays_from_edges(net, &t);
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

fn require_rooted(net: &NetworkSpec) -> Result<(), VerifyError> {
    if net.is_rooted() {
        Ok(())
    } else {
        Err(VerifyError::Unrooted)
    }
}

fn check_order(synth: &SynthesisResult, net: &NetworkSpec, samples: &[DelayMatrix]) -> Result<(), VerifyError> {
    if let Some(d) = samples.iter().find(|d| d.size() != net.node_count()) {
        return Err(VerifyError::Dimension(format!("delay sample for {} nodes, graph has {}", d.size(), net.node_count())));
    }
    let q = synth.order();
    if synth.gains.k.ncols() != q || synth.compensated.bbar.nrows() != q {
        return Err(VerifyError::Dimension("protocol matrices do not match the compensated order".into()));
    }
    Ok(())
}

/// Closed loop in the frequency domain,
/// `[[I ⊗ (Ā − B̄K), I ⊗ B̄K], [0, D̄_jω(κ) ⊗ Ā]]`.
/// Block triangularity gives the spectral radius
/// `max(ρ(Ā − B̄K), ρ(D̄_jω(κ)) · ρ(Ā))`; margin is `1 − ρ`.
pub fn closed_loop_frequency_scan(
    synth: &SynthesisResult,
    net: &NetworkSpec,
    omegas: &[f64],
    delay_samples: &[DelayMatrix],
    exec: Execution,
) -> Result<ScanReport, VerifyError> {
    require_rooted(net)?;
    check_order(synth, net, delay_samples)?;
    let radii = network_radii(net, omegas, delay_samples, exec)?;
    scan_from_radii(synth, net, omegas, delay_samples, &radii)
}

/// `ρ(D̄_jω(κ))` for every `(ω, κ)` pair, ω-major.
fn network_radii(
    net: &NetworkSpec,
    omegas: &[f64],
    delay_samples: &[DelayMatrix],
    exec: Execution,
) -> Result<Vec<f64>, VerifyError> {
    let dbar = &net.matrices.dbar;
    let per_omega = delay_samples.len();
    let radii = exec.map_range(omegas.len() * per_omega, |idx| {
        let (w, s) = (idx / per_omega, idx % per_omega);
        let eigs = numerics::eigenvalues_complex(&graph::dbar_jomega(dbar, &delay_samples[s], omegas[w]))?;
        Ok::<_, NumericsError>(numerics::spectral_radius_clustered(&eigs))
    });
    Ok(radii.into_iter().collect::<Result<Vec<_>, _>>()?)
}

fn scan_from_radii(
    synth: &SynthesisResult,
    net: &NetworkSpec,
    omegas: &[f64],
    delay_samples: &[DelayMatrix],
    radii: &[f64],
) -> Result<ScanReport, VerifyError> {
    let comp = &synth.compensated;
    let rho_k = numerics::spectral_radius(&(&comp.abar - &comp.bbar * &synth.gains.k))?;
    let rho_a = numerics::spectral_radius(&comp.abar)?;
    let per_omega = delay_samples.len();
    let margins = radii.iter().enumerate().map(|(idx, &rho_d)| (1.0 - rho_k.max(rho_d * rho_a), idx / per_omega, idx % per_omega));
    Ok(finish(reduce_min(margins), omegas, per_omega, RADIUS_MARGIN, |s| edge_delays(net, &delay_samples[s])))
}

/// Network bound over every sampled `(ω, κ)`: the largest `ρ(D̄_jω(κ))`
/// must stay below one and below the row-sum bound β.
fn lemma2_from_radii(net: &NetworkSpec, omegas: &[f64], per_omega: usize, radii: &[f64]) -> Lemma2Report {
    let beta = graph::beta_bound(&net.matrices.dbar);
    let mut max_modulus = 0.0;
    let mut worst_omega = omegas.first().copied().unwrap_or(0.0);
    for (idx, &rho) in radii.iter().enumerate() {
        if rho > max_modulus {
            max_modulus = rho;
            worst_omega = omegas[idx / per_omega];
        }
    }
    Lemma2Report { holds: max_modulus <= beta + 1e-9 && max_modulus < 1.0, beta, max_modulus, worst_omega }
}

/// The same closed-loop matrix assembled densely (for cross-checking the
/// block shortcut on small networks).
pub fn dense_frequency_matrix(synth: &SynthesisResult, dbar_jw: &CMat) -> CMat {
    let comp = &synth.compensated;
    let n_agents = dbar_jw.nrows();
    let eye = CMat::identity(n_agents, n_agents);
    let bk = &comp.bbar * &synth.gains.k;
    let top_left = numerics::kron_complex_real(&eye, &(&comp.abar - &bk));
    let top_right = numerics::kron_complex_real(&eye, &bk);
    let bottom_right = numerics::kron_complex_real(dbar_jw, &comp.abar);
    let d = top_left.nrows();
    let mut m = CMat::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&top_left);
    m.view_mut((0, d), (d, d)).copy_from(&top_right);
    m.view_mut((d, d), (d, d)).copy_from(&bottom_right);
    m
}

/// Spectral radius of [`dense_frequency_matrix`] at one `(ω, κ)`.
pub fn dense_frequency_radius(
    synth: &SynthesisResult,
    net: &NetworkSpec,
    kappa: &DelayMatrix,
    omega: f64,
) -> Result<f64, VerifyError> {
    let m = dense_frequency_matrix(synth, &graph::dbar_jomega(&net.matrices.dbar, kappa, omega));
    Ok(numerics::spectral_radius_clustered(&numerics::eigenvalues_complex(&m)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayFreeReport {
    /// Spectral radius of the full block matrix.
    pub spectral_radius: f64,
    /// `ρ(Ā − B̄K)`.
    pub feedback_radius: f64,
    /// `ρ(D̄ ⊗ Ā)`.
    pub network_radius: f64,
    pub dimension: usize,
    pub stable: bool,
}

/// Delay-free closed loop `[[I ⊗ (Ā − B̄K), I ⊗ B̄K], [0, D̄ ⊗ Ā]]`, built
/// densely and reduced to its spectral radius. Unrooted networks are
/// reported, not rejected (their radius is 1).
pub fn delay_free_closed_loop(synth: &SynthesisResult, net: &NetworkSpec) -> Result<DelayFreeReport, VerifyError> {
    let comp = &synth.compensated;
    let dbar = numerics::to_complex(&net.matrices.dbar);
    let m = dense_frequency_matrix(synth, &dbar);
    let d = m.nrows() / 2;
    let full = numerics::spectral_radius_clustered(&numerics::eigenvalues_complex(&m)?);
    let feedback_radius = numerics::spectral_radius(&(&comp.abar - &comp.bbar * &synth.gains.k))?;
    let lower = m.view((d, d), (d, d)).clone_owned();
    let network_radius = numerics::spectral_radius_clustered(&numerics::eigenvalues_complex(&lower)?);
    Ok(DelayFreeReport {
        spectral_radius: full,
        feedback_radius,
        network_radius,
        dimension: m.nrows(),
        stable: full < 1.0 - RADIUS_MARGIN,
    })
}

/// Combined outcome of the three network-level checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub delay_free: DelayFreeReport,
    pub frequency_scan: ScanReport,
    pub lemma2: Lemma2Report,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Delay-free eigenvalues, the closed-loop frequency scan and the `D̄_jω(κ)` bound.
pub fn verify_network(
    synth: &SynthesisResult,
    net: &NetworkSpec,
    omegas: &[f64],
    delay_samples: &[DelayMatrix],
    exec: Execution,
) -> Result<VerifyReport, VerifyError> {
    require_rooted(net)?;
    let delay_free = delay_free_closed_loop(synth, net)?;
    let own = [net.delays.clone()];
    let samples = if delay_samples.is_empty() { &own[..] } else { delay_samples };
    check_order(synth, net, samples)?;
    let radii = network_radii(net, omegas, samples, exec)?;
    let frequency_scan = scan_from_radii(synth, net, omegas, samples, &radii)?;
    let lemma2 = lemma2_from_radii(net, omegas, samples.len(), &radii);
    Ok(VerifyReport { passed: delay_free.stable && frequency_scan.passed && lemma2.holds, delay_free, frequency_scan, lemma2 })
}
