//! Reference data: the three-state example agent with its hand-derived
//! design values, the example networks and random rooted networks for
//! property tests.

use crate::graph::{DelayMatrix, NetworkSpec, RootSet, WeightedDigraph};
use crate::numerics::Mat;
use crate::plant::{AgentModel, GainPair, Precompensator, RegulatorSolution};
use rand::Rng;
use std::collections::VecDeque;

pub const EXAMPLE_MODEL_JSON: &str = include_str!("../fixtures/example_model.json");
pub const DOUBLE_INTEGRATOR_MODEL_JSON: &str = include_str!("../fixtures/double_integrator_model.json");
pub const GRAPH_N3_JSON: &str = include_str!("../fixtures/graph_n3.json");
pub const GRAPH_N5_JSON: &str = include_str!("../fixtures/graph_n5.json");
pub const GRAPH_N10_JSON: &str = include_str!("../fixtures/graph_n10.json");
pub const GRAPH_N5_UNROOTED_JSON: &str = include_str!("../fixtures/graph_n5_unrooted.json");

/// Seed for the initial agent states in the example runs.
pub const EXAMPLE_SEED: u64 = 2024;

/// Reference output used by all example runs.
pub const EXAMPLE_YR: f64 = 5.0;

const S3: f64 = 0.866_025_403_784_438_6;

pub fn example_model() -> AgentModel {
    AgentModel::new(
        Mat::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, 0.5, S3, 0.0, -S3, 0.5]),
        Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        Mat::from_row_slice(1, 3, &[1.0, 0.0, 1.0]),
    )
    .expect("example model is well formed")
}

pub fn example_pi() -> Mat {
    Mat::from_column_slice(3, 1, &[-0.5, -S3, 1.5])
}

pub fn example_gamma() -> Mat {
    Mat::from_column_slice(2, 1, &[-1.0, -2.0 * S3])
}

pub fn example_regulator() -> RegulatorSolution {
    RegulatorSolution { r: Mat::from_element(1, 1, 1.0), pi: example_pi(), gamma: example_gamma() }
}

pub fn example_precompensator() -> Precompensator {
    Precompensator { gamma1: example_gamma(), gamma2: Mat::from_column_slice(2, 1, &[0.0, 1.0]) }
}

/// Printed (two-decimal) state-feedback gain.
pub fn example_k() -> Mat {
    Mat::from_row_slice(2, 4, &[0.54, 0.87, 0.62, -1.12, -0.89, -0.35, 0.15, 0.12])
}

/// Printed (two-decimal) observer gain.
pub fn example_f() -> Mat {
    Mat::from_column_slice(4, 1, &[-0.45, -0.19, 1.05, 0.34])
}

pub fn example_gains() -> GainPair {
    GainPair { k: example_k(), f: example_f() }
}

/// Discrete double integrator with both states measured: not right-invertible,
/// feasible references are the multiples of `(1, 1)`.
pub fn non_right_invertible_model() -> AgentModel {
    AgentModel::new(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        Mat::from_column_slice(2, 1, &[0.0, 1.0]),
        Mat::identity(2, 2),
    )
    .expect("double integrator is well formed")
}

fn parse_network(s: &str) -> NetworkSpec {
    NetworkSpec::from_json(s).expect("bundled graph fixture parses")
}

/// Chain 1 → 2 → 3 rooted at 1, unit delay on both channels.
pub fn chain3_network() -> NetworkSpec {
    parse_network(GRAPH_N3_JSON)
}

/// Five agents, one delayed channel 3 → 4.
pub fn five_node_network() -> NetworkSpec {
    parse_network(GRAPH_N5_JSON)
}

/// Ten-agent ring with chords and delays up to 5.
pub fn ring10_network() -> NetworkSpec {
    parse_network(GRAPH_N10_JSON)
}

pub fn example_networks() -> Vec<(&'static str, NetworkSpec)> {
    vec![("N=3", chain3_network()), ("N=5", five_node_network()), ("N=10", ring10_network())]
}

/// Random rooted network with `1..=max_n` nodes, weights in `[0.2, 3]`,
/// one to three roots and integer delays `0..=max_delay` on every edge.
/// Unreached nodes are attached to a random reached node until the graph is rooted.
pub fn random_rooted_network<R: Rng>(rng: &mut R, max_n: usize, max_delay: usize) -> NetworkSpec {
    let n = rng.random_range(1..=max_n.max(1));
    let density = rng.random_range(0.0..0.5);
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(density) {
                a[(i, j)] = random_weight(rng);
            }
        }
    }
    let k = rng.random_range(1..=n.min(3));
    let roots: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();

    let mut reached = vec![false; n];
    let mut queue: VecDeque<usize> = roots.iter().copied().collect();
    for &r in &roots {
        reached[r] = true;
    }
    loop {
        while let Some(j) = queue.pop_front() {
            for i in 0..n {
                if !reached[i] && a[(i, j)] > 0.0 {
                    reached[i] = true;
                    queue.push_back(i);
                }
            }
        }
        let unreached: Vec<usize> = (0..n).filter(|&i| !reached[i]).collect();
        if unreached.is_empty() {
            break;
        }
        let inside: Vec<usize> = (0..n).filter(|&i| reached[i]).collect();
        let i = unreached[rng.random_range(0..unreached.len())];
        let j = inside[rng.random_range(0..inside.len())];
        a[(i, j)] = random_weight(rng);
        reached[i] = true;
        queue.push_back(i);
    }

    let graph = WeightedDigraph::new(a).expect("generated weights are valid");
    let mut delays = DelayMatrix::zeros(n);
    for (from, to) in graph.edges() {
        delays.set(to, from, rng.random_range(0..=max_delay));
    }
    let roots = RootSet::new(n, roots).expect("roots in range");
    NetworkSpec::new(graph, roots, delays).expect("generated network is valid")
}

fn random_weight<R: Rng>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        rng.random_range(0.2..3.0)
    }
}
