// Scratch diagnostics: feasibility trend and certification restarts.
use polymin::extract::certify_and_restart;
use polymin::poly::{family1, family2};
use polymin::saddle::{solve, SolverConfig};

fn main() {
    for (name, poly, config) in [
        ("f1 D=1", family1(1), SolverConfig::family1_preset()),
        ("f1 D=2", family1(2), SolverConfig::family1_preset()),
        ("f1 D=3", family1(3), SolverConfig::family1_preset()),
        ("f2 D=1", family2(1), SolverConfig::family2_preset()),
        ("f2 D=2", family2(2), SolverConfig::family2_preset()),
    ] {
        let (problem, state, dual, stats) = solve(&poly, &config).unwrap();
        let l2: Vec<f64> = stats.trace.iter().map(|t| t.feasibility_l2).collect();
        let pairs = l2.len().saturating_sub(1);
        let ok = l2.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
        let (solution, _) = certify_and_restart(&problem, state, dual, &config).unwrap();
        println!(
            "{}: outers={} converged={} obj={:+.5} trend={}/{} certified={} restarts={} value={:+.5} loc={:?}",
            name,
            stats.outer_iterations,
            stats.converged,
            stats.final_objective,
            ok,
            pairs,
            solution.certified_global,
            solution.restarts_used,
            solution.value,
            &solution.location,
        );
    }
}
