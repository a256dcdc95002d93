// Scratch diagnostics for solver behavior; not part of the deliverable API.
use polymin::bm::{LagrangianOracle, MomentState, Problem};
use polymin::lbfgs;
use polymin::poly::family1;
use polymin::saddle::{dual_update, initialize, SolverConfig};

fn main() {
    let poly = family1(1);
    let config = SolverConfig::family1_preset();
    let problem = Problem::new(&poly, &config).unwrap();
    let layout = problem.layout();
    println!("vars={} cons={}", layout.num_vars(), layout.num_constraints());
    let (mut state, mut dual) = initialize(&problem, &config);
    let ls = lbfgs::LineSearchParams {
        beta: config.wolfe_beta,
        max_backtracks: config.max_backtracks,
        shrink: 0.5,
    };
    let inner = lbfgs::InnerStop {
        tol_rel_grad: config.tol_inner_rel_grad,
        tol_abs_val: config.tol_inner_abs_val,
        max_iters: config.max_inner_iters,
    };
    let mut memory = lbfgs::LbfgsMemory::new(config.lbfgs_order);
    for outer in 0..220 {
        let result = {
            let mut oracle = LagrangianOracle::new(&problem, &dual);
            lbfgs::minimize_with_memory(&mut oracle, state.as_flat(), &mut memory, &ls, &inner)
                .unwrap()
        };
        state = MomentState::from_flat(layout, result.x).unwrap();
        let res = problem.residuals(&state);
        let obj = problem.objective(&state);
        let lag = problem.lagrangian(&state, &dual).unwrap();
        let grad = problem.lagrangian_gradient(&state, &dual).unwrap();
        let rel_grad = grad.iter().map(|g| g * g).sum::<f64>().sqrt() / (1.0 + lag.abs());
        println!(
            "outer={:3} obj={:+.6} lag={:+.6} feas_inf={:.3e} relg={:.3e} inner={:4} stop={:?} fallbacks={}",
            outer,
            obj,
            lag,
            res.max_abs(),
            rel_grad,
            result.stats.iterations,
            result.stats.stop,
            result.stats.fallbacks,
        );
        dual = dual_update(&dual, &res).unwrap();
    }
}
