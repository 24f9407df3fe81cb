//! Scratch diagnostics for sweep-cell budgeting. Not shipped.

use dcrl_core::dcrl::{run_dcrl_discrete, DcrlConfig, InnerSolver};
use dcrl_core::envs::{delivery_cost, make_express_delivery};
use dcrl_core::mdp::rollout_batch;
use std::time::Instant;

fn main() {
    for (n_points, rho_min) in [(100usize, 0.5f64), (100, 0.1), (20, 0.5), (10, 0.3)] {
        let bundle = make_express_delivery(n_points, rho_min, 21).unwrap();
        let config = DcrlConfig {
            max_iters: 220,
            alpha: 0.02,
            tol_feas: 5e-2,
            tol_cs: 5e-2,
            episodes_per_iter: 1500,
            density_ema: 0.9,
            inner: InnerSolver::ExactVi {
                tol: 1e-5,
                temperature: 0.0,
                regularization: Some(dcrl_core::dcrl::Regularization { mu: 0.05, fw_iters: 25 }),
            },
            seed: 11,
            ..Default::default()
        };
        let t0 = Instant::now();
        let res = run_dcrl_discrete(&bundle.mdp, &bundle.constraint, &config).unwrap();
        let dcrl_s = t0.elapsed().as_secs_f64();
        let last = res.iterations.last().unwrap();
        let horizon = bundle.mdp.horizon_for_tail(1e-3);
        let eval = rollout_batch(&bundle.mdp, &res.policy, 400, horizon, 777);
        let bonus = bundle.meta.constant("goal_bonus").unwrap();
        println!(
            "({n_points:>3}, {rho_min}): {:?} k={} in {dcrl_s:.1}s, last viol {:.4}, sm {:.3}, cost {:.3}",
            res.termination,
            res.iterations.len(),
            last.feas_violation,
            last.sigma_minus_max,
            delivery_cost(&eval, bonus),
        );
    }
}
