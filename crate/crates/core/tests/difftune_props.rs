use diffmpc::difftune::{fd_loss_gradient, loss_gradient, open_loop_loss, rollout, update_params, QuadCostParams};
use diffmpc::experiments::{ExperimentConfig, Mode, SystemKind};
use nalgebra::DVector;
use proptest::prelude::*;

fn di_config(u_bd: Option<f64>, steps: usize, trials: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(SystemKind::DoubleIntegrator, 10, steps, 0.01, trials, 0.1);
    cfg.u_bd = u_bd;
    cfg
}

#[test]
fn identical_configs_give_bitwise_identical_histories() {
    let mut cfg = di_config(Some(2.0), 60, 3);
    cfg.noise_std = Some(0.01);
    cfg.seed = 7;
    let a = cfg.run().unwrap();
    let b = cfg.run().unwrap();
    assert_eq!(a, b);
    cfg.seed = 8;
    let c = cfg.run().unwrap();
    assert_ne!(a.tune_result().history[0].rmse, c.tune_result().history[0].rmse);
}

#[test]
fn first_trial_uses_the_initial_parameters() {
    let mut cfg = di_config(None, 40, 2);
    cfg.q_init = Some(vec![3.0, 0.5]);
    let res = cfg.run().unwrap();
    let h = &res.tune_result().history;
    assert_eq!(h[0].params, cfg.initial_params());
    assert_eq!(h[1].params, update_params(&h[0].params, &h[0].gradient, cfg.alpha));
}

#[test]
fn closed_loop_gradient_matches_finite_differences_on_the_unicycle() {
    let cfg = ExperimentConfig::new(SystemKind::Unicycle, 8, 20, 0.05, 1, 0.01);
    let mut setup = cfg.build().unwrap();
    let params = QuadCostParams::new(DVector::from_vec(vec![2.0, 1.0, 0.5]), DVector::from_vec(vec![0.5, 0.2]), (0.01, 1000.0));
    let log = rollout(&setup.experiment, setup.controller.as_mut(), &params, true).unwrap();
    assert_eq!(log.reused_jacobians(), 0);
    let analytic = loss_gradient(&log, &setup.experiment.loss).unwrap();
    let fd = fd_loss_gradient(&setup.experiment, setup.controller.as_mut(), &params, 1e-5).unwrap();
    assert!((&analytic - &fd).amax() <= 1e-3 * (1.0 + fd.amax()), "{analytic} vs {fd}");
}

#[test]
fn open_loop_gradient_matches_finite_differences() {
    let mut cfg = di_config(None, 10, 1);
    cfg.mode = Mode::OpenLoop;
    cfg.x0 = Some(vec![0.5, 0.0]);
    let mut setup = cfg.build().unwrap();
    let ol = setup.open_loop.take().unwrap();
    let params = QuadCostParams::new(DVector::from_vec(vec![2.0, 0.5]), DVector::from_vec(vec![0.3]), (0.01, 1000.0));
    let (_, grad) = open_loop_loss(&ol, setup.controller.as_mut(), &params).unwrap();
    let h = 1e-6;
    for i in 0..params.dim() {
        let mut up = params.theta();
        up[i] += h;
        let mut dn = params.theta();
        dn[i] -= h;
        let lp = open_loop_loss(&ol, setup.controller.as_mut(), &params.with_theta(&up)).unwrap().0;
        let lm = open_loop_loss(&ol, setup.controller.as_mut(), &params.with_theta(&dn)).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        assert!((grad[i] - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn open_and_closed_loop_gradients_differ() {
    // the plan predicts from x0 only, the rollout feeds the executed states back
    let mut cfg = di_config(Some(1.0), 10, 1);
    cfg.mode = Mode::OpenLoop;
    let mut setup = cfg.build().unwrap();
    let ol = setup.open_loop.take().unwrap();
    let params = cfg.initial_params();
    let (_, open) = open_loop_loss(&ol, setup.controller.as_mut(), &params).unwrap();
    let log = rollout(&setup.experiment, setup.controller.as_mut(), &params, true).unwrap();
    let closed = loss_gradient(&log, &setup.experiment.loss).unwrap();
    assert!((&open - &closed).amax() > 1e-6 * (1.0 + closed.amax()), "{open} vs {closed}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn updates_stay_within_bounds(
        theta in proptest::collection::vec(0.01f64..1000.0, 3),
        grad in proptest::collection::vec(-1e6f64..1e6, 3),
        alpha in 0.0f64..10.0,
    ) {
        let p = QuadCostParams::new(DVector::from_vec(theta[..2].to_vec()), DVector::from_vec(vec![theta[2]]), (0.01, 1000.0));
        let next = update_params(&p, &DVector::from_vec(grad), alpha);
        prop_assert!(next.theta().iter().all(|v| (0.01..=1000.0).contains(v)));
        // projection is idempotent
        prop_assert_eq!(update_params(&next, &DVector::zeros(3), alpha), next);
    }
}
