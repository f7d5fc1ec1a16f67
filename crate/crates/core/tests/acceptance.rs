//! Acceptance criteria. Runs as a plain binary so each criterion prints one
//! PASS/FAIL line with its runtime; exits non-zero if any criterion fails.

use delaysync::exec::Execution;
use delaysync::fixtures;
use delaysync::graph::{self, omega_grid, DelayMatrix, NetworkSpec};
use delaysync::numerics::{Mat, Vector};
use delaysync::plant::{
    compensate, rank_condition_holds, regulator_residuals, solve_regulator, synthesize, PlantError,
    SynthesisResult, Tolerances,
};
use delaysync::sim::{self, AgentRuntime, SimConfig};
use delaysync::verify;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::process::ExitCode;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn yr() -> Vector {
    Vector::from_element(1, fixtures::EXAMPLE_YR)
}

fn tol() -> Tolerances {
    Tolerances::default()
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn synth() -> Result<SynthesisResult, String> {
    synthesize(&fixtures::example_model(), &yr(), &tol()).map_err(|e| format!("synthesis failed: {e}"))
}

/// The synthesized protocol with its regulator, precompensator and gains
/// swapped for the hand-derived example values.
fn example_protocol() -> Result<SynthesisResult, String> {
    let mut s = synth()?;
    s.regulator = fixtures::example_regulator();
    s.precompensator = fixtures::example_precompensator();
    s.compensated = compensate(&s.model, &s.precompensator, &s.regulator, &tol()).map_err(|e| e.to_string())?;
    s.gains = fixtures::example_gains();
    Ok(s)
}

fn c1_regulator() -> Outcome {
    let model = fixtures::example_model();
    let r = Mat::from_element(1, 1, 1.0);
    let (state, output) = regulator_residuals(&model, &r, &fixtures::example_pi(), &fixtures::example_gamma());
    ensure(state <= 1e-12 && output <= 1e-12, format!("fixture residuals {state:e}, {output:e}"))?;
    ensure(rank_condition_holds(&model, &fixtures::example_gamma(), &tol()), "rank condition fails for fixture Gamma")?;
    let own = solve_regulator(&model, &r, &tol()).map_err(|e| e.to_string())?;
    let (s2, o2) = regulator_residuals(&model, &r, &own.pi, &own.gamma);
    ensure(s2 <= 1e-12 && o2 <= 1e-12, format!("solver residuals {s2:e}, {o2:e}"))?;
    ensure(rank_condition_holds(&model, &own.gamma, &tol()), "rank condition fails for solved Gamma")?;
    Ok(format!("fixture residuals {state:.1e}/{output:.1e}, solver {s2:.1e}/{o2:.1e}"))
}

fn c2_protocol_matrices() -> Outcome {
    let s = example_protocol()?;
    let c = &s.compensated;
    let (k, f) = (&s.gains.k, &s.gains.f);
    let r = |rows: usize, cols: usize, v: &[f64]| Mat::from_row_slice(rows, cols, v);
    let printed = [
        (
            "Abar - F Cbar",
            &c.abar - f * &c.cbar,
            r(4, 4, &[-0.54, 0., 0.45, -1., 0.19, 0.5, 1.05, -1.73, -1.05, -0.86, -0.55, 0., -0.34, 0., -0.34, 1.]),
        ),
        (
            "Bbar K",
            &c.bbar * k,
            r(4, 4, &[0., 0., 0., 0., 0.54, 0.87, 0.62, -1.12, 0., 0., 0., 0., -0.89, -0.35, 0.15, 0.12]),
        ),
        ("F", f.clone(), r(4, 1, &[-0.45, -0.19, 1.05, 0.34])),
        (
            "Abar - Bbar K",
            &c.abar - &c.bbar * k,
            r(4, 4, &[-1., 0., 0., -1., -0.54, -0.37, 0.24, -0.61, 0., -0.86, 0.5, 0., 0.89, 0.35, -0.15, 0.87]),
        ),
        (
            "Abar",
            c.abar.clone(),
            r(4, 4, &[-1., 0., 0., -1., 0., 0.5, 0.86, -1.73, 0., -0.86, 0.5, 0., 0., 0., 0., 1.]),
        ),
        ("v = -K chi", -k, -fixtures::example_k()),
    ];
    let mut worst: f64 = 0.0;
    for (name, got, want) in &printed {
        let d = max_abs(&(got - want));
        ensure(d <= 0.02, format!("{name}: max deviation {d:.4}"))?;
        worst = worst.max(d);
    }
    Ok(format!("{} matrices, max deviation {worst:.4}", printed.len()))
}

fn c3_schur() -> Outcome {
    let s = example_protocol()?;
    let (rk, rf) = s.gains.closed_loop_radii(&s.compensated).map_err(|e| e.to_string())?;
    ensure(rk < 1.0 && rf < 1.0, format!("rho(Abar-BbarK) = {rk}, rho(Abar-FCbar) = {rf}"))?;
    Ok(format!("rho(Abar-BbarK) = {rk:.4}, rho(Abar-FCbar) = {rf:.4}"))
}

fn converge(s: &SynthesisResult, net: &NetworkSpec, y_r: Vector, steps: usize) -> Result<sim::Trajectory, String> {
    let cfg = SimConfig::new(steps, y_r, fixtures::EXAMPLE_SEED);
    let t = sim::simulate(s, net, &cfg).map_err(|e| e.to_string())?;
    ensure(
        t.converged && t.final_sync_error < 1e-2 && t.final_reg_error < 1e-2,
        format!("not converged in {steps} ticks: sync {:e}, reg {:e}", t.final_sync_error, t.final_reg_error),
    )?;
    Ok(t)
}

fn c4_scale_free() -> Outcome {
    let s = synth()?;
    let json = s.to_json().map_err(|e| e.to_string())?;
    let s = SynthesisResult::from_json(&json).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for (name, net) in fixtures::example_networks() {
        let t = converge(&s, &net, yr(), 5000).map_err(|e| format!("{name}: {e}"))?;
        parts.push(format!("{name} at tick {}", t.converged_at.unwrap_or(t.final_tick)));
    }
    Ok(parts.join(", "))
}

fn c5_large_delay() -> Outcome {
    let s = synth()?;
    let base = fixtures::chain3_network();
    let net = base.with_delays(DelayMatrix::uniform(&base.graph, 50)).map_err(|e| e.to_string())?;
    let t = converge(&s, &net, yr(), 20000)?;
    Ok(format!("delay 50 on every channel, converged at tick {}", t.converged_at.unwrap_or(t.final_tick)))
}

fn stack(agents: &[AgentRuntime]) -> Vector {
    let parts: Vec<Vector> = agents.iter().map(|a| a.stacked()).collect();
    Vector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

fn c6_dense_oracle() -> Outcome {
    let s = synth()?;
    let net = fixtures::chain3_network().with_delays(DelayMatrix::zeros(3)).map_err(|e| e.to_string())?;
    let mut cfg = SimConfig::new(200, yr(), fixtures::EXAMPLE_SEED);
    cfg.early_stop = false;
    let mut state = sim::init(&s, &net, &cfg).map_err(|e| e.to_string())?;
    let (m, c) = sim::delay_free_dense_system(&s, &net, &yr());
    let mut dense = stack(&state.agents);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        sim::step(&mut state).map_err(|e| e.to_string())?;
        dense = &m * dense + &c;
        worst = worst.max((stack(&state.agents) - &dense).amax());
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("200 ticks, max deviation {worst:.1e}"))
}

fn random_networks() -> Vec<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    (0..500).map(|_| fixtures::random_rooted_network(&mut rng, 12, 20)).collect()
}

fn c7_lemma2(nets: &[NetworkSpec]) -> Outcome {
    let grid = omega_grid(128);
    let mut worst: f64 = 0.0;
    for (i, net) in nets.iter().enumerate() {
        let r = graph::lemma2_check(&net.matrices.dbar, &net.delays, &grid, true, Execution::default())
            .map_err(|e| format!("graph {i}: {e}"))?;
        ensure(r.holds, format!("graph {i}: max modulus {} vs beta {}", r.max_modulus, r.beta))?;
        worst = worst.max(r.max_modulus);
    }
    Ok(format!("{} graphs, largest modulus {worst:.4}", nets.len()))
}

fn c8_dbar(nets: &[NetworkSpec]) -> Outcome {
    for (i, net) in nets.iter().enumerate() {
        let (d, din) = (&net.matrices.dbar, &net.matrices.din);
        ensure(d.iter().all(|&v| v >= 0.0), format!("graph {i}: negative entry"))?;
        for r in 0..d.nrows() {
            let sum: f64 = d.row(r).iter().sum();
            let want = if net.roots.contains(r) { 1.0 - 1.0 / (2.0 + din[r]) } else { 1.0 };
            ensure(sum <= 1.0 + 1e-12, format!("graph {i} row {r}: sum {sum}"))?;
            ensure((sum - want).abs() <= 1e-12, format!("graph {i} row {r}: sum {sum}, expected {want}"))?;
        }
    }
    Ok(format!("{} graphs", nets.len()))
}

fn c9_reference_set() -> Outcome {
    let model = fixtures::non_right_invertible_model();
    let good = Vector::from_column_slice(&[1.0, 1.0]);
    let s = synthesize(&model, &good, &tol()).map_err(|e| format!("y_r = (1,1): {e}"))?;
    match synthesize(&model, &Vector::from_column_slice(&[1.0, 0.0]), &tol()) {
        Err(PlantError::InfeasibleReference { .. }) => {}
        other => return Err(format!("y_r = (1,0) not rejected: {:?}", other.map(|_| ()))),
    }
    let t = converge(&s, &fixtures::chain3_network(), good, 5000)?;
    Ok(format!("(1,0) rejected, (1,1) converged at tick {}", t.converged_at.unwrap_or(t.final_tick)))
}

fn c10_frequency_scan() -> Outcome {
    let grid = omega_grid(256);
    let protocols = [("synthesized", synth()?), ("example gains", example_protocol()?)];
    let mut parts = Vec::new();
    for (label, s) in &protocols {
        let mut min_margin = f64::INFINITY;
        for (name, net) in fixtures::example_networks() {
            let samples = verify::default_network_delay_samples(&net, 64);
            let r = verify::closed_loop_frequency_scan(s, &net, &grid, &samples, Execution::default())
                .map_err(|e| e.to_string())?;
            ensure(r.passed, format!("{label}, {name}: margin {:e}", r.min_margin))?;
            min_margin = min_margin.min(r.min_margin);
        }
        parts.push(format!("{label} margin {min_margin:.3}"));
    }

    let s = &protocols[0].1;
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut nets = vec![fixtures::chain3_network()];
    nets.extend((0..20).map(|_| fixtures::random_rooted_network(&mut rng, 4, 10)));
    let coarse = omega_grid(33);
    let mut worst: f64 = 0.0;
    for net in &nets {
        for &w in &coarse {
            let r = verify::closed_loop_frequency_scan(s, net, &[w], std::slice::from_ref(&net.delays), Execution::Sequential)
                .map_err(|e| e.to_string())?;
            let dense = verify::dense_frequency_radius(s, net, &net.delays, w).map_err(|e| e.to_string())?;
            worst = worst.max(((1.0 - r.min_margin) - dense).abs());
        }
    }
    ensure(worst <= 1e-8, format!("block vs dense radius differs by {worst:e}"))?;
    parts.push(format!("dense agreement {worst:.1e}"));

    let mut zeroed = s.clone();
    zeroed.gains.k.fill(0.0);
    for (name, net) in fixtures::example_networks() {
        let r = verify::closed_loop_frequency_scan(&zeroed, &net, &grid, std::slice::from_ref(&net.delays), Execution::default())
            .map_err(|e| e.to_string())?;
        ensure(!r.passed, format!("{name}: scan passes with K = 0"))?;
    }
    parts.push("K = 0 rejected".into());
    Ok(parts.join(", "))
}

fn main() -> ExitCode {
    let nets = random_networks();
    let criteria: Vec<Criterion> = vec![
        ("regulator fixture", Duration::from_secs(1), Box::new(c1_regulator)),
        ("protocol matrices", Duration::from_secs(1), Box::new(c2_protocol_matrices)),
        ("Schur checks", Duration::from_secs(1), Box::new(c3_schur)),
        ("scale-free convergence", Duration::from_secs(10), Box::new(c4_scale_free)),
        ("large-delay robustness", Duration::from_secs(10), Box::new(c5_large_delay)),
        ("delay-free dense oracle", Duration::from_secs(5), Box::new(c6_dense_oracle)),
        ("delayed D-bar spectral bound", Duration::from_secs(60), Box::new(|| c7_lemma2(&nets))),
        ("D-bar invariants", Duration::from_secs(5), Box::new(|| c8_dbar(&nets))),
        ("reference-set necessity", Duration::from_secs(5), Box::new(c9_reference_set)),
        ("frequency-scan consistency", Duration::from_secs(30), Box::new(c10_frequency_scan)),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > *budget => Err(format!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({:.3} s): {detail}", i + 1, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({:.3} s): {why}", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
