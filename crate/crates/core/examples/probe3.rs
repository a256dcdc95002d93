// Scratch diagnostics: long-run alternation on family 2, D = 1.
use polymin::bm::{LagrangianOracle, MomentState, Problem};
use polymin::lbfgs;
use polymin::poly::family2;
use polymin::saddle::{dual_update, initialize, SolverConfig};

fn main() {
    let poly = family2(1);
    let config = SolverConfig::family2_preset();
    let problem = Problem::new(&poly, &config).unwrap();
    let layout = problem.layout();
    let (mut state, mut dual) = initialize(&problem, &config);
    let ls = lbfgs::LineSearchParams {
        beta: config.wolfe_beta,
        max_backtracks: config.max_backtracks,
        shrink: 0.5,
    };
    let tight = std::env::args().any(|a| a == "tight");
    let inner = lbfgs::InnerStop {
        tol_rel_grad: if tight { 1e-9 } else { config.tol_inner_rel_grad },
        tol_abs_val: if tight { 1e-13 } else { config.tol_inner_abs_val },
        max_iters: config.max_inner_iters,
    };
    let mut memory = lbfgs::LbfgsMemory::new(config.lbfgs_order);
    for outer in 0..300 {
        let result = {
            let mut oracle = LagrangianOracle::new(&problem, &dual);
            lbfgs::minimize_with_memory(&mut oracle, state.as_flat(), &mut memory, &ls, &inner)
                .unwrap()
        };
        state = MomentState::from_flat(layout, result.x).unwrap();
        let res = problem.residuals(&state);
        let obj = problem.objective(&state);
        let lag = problem.lagrangian(&state, &dual).unwrap();
        if outer < 30 || outer % 10 == 0 {
            println!(
                "outer={:3} obj={:+.6} lag={:+.6} feas_inf={:.3e} inner={:4}",
                outer,
                obj,
                lag,
                res.max_abs(),
                result.stats.iterations,
            );
        }
        dual = dual_update(&dual, &res).unwrap();
    }
    let masses = state.block_masses(layout);
    println!("masses: {:?}", masses);
}
