use proptest::prelude::*;
use tapkinn::data_pipeline::{observe_pulses, Mode, NoiseSpec, ThinZone};
use tapkinn::evaluation::{energy_scale_mae, hessian_std, ln_ratios, rebuild_ode, BOLTZMANN_EV};
use tapkinn::reaction_model::{RateConstants, ReactionNetwork};
use tapkinn::reactor_sim::{simulate_pulse_train, PulseRecord, PulseSpec, ReactorConfig};

fn single_pulse() -> (ReactorConfig, PulseRecord) {
    let reactor = ReactorConfig::default();
    let net = ReactionNetwork::co_oxidation();
    let k = RateConstants::co_oxidation_reference();
    let pulse = PulseSpec { intensities: vec![1.0, 1.0, 0.0], injection_width: None };
    let rec = simulate_pulse_train(&reactor, &net, &k, &pulse, 1).unwrap().remove(0);
    (reactor, rec)
}

fn peak(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

#[test]
fn rebuild_with_true_constants_tracks_simulated_thin_zone() {
    let (reactor, rec) = single_pulse();
    let net = ReactionNetwork::co_oxidation();
    let zone = ThinZone::from_reactor(&reactor);
    let obs = observe_pulses(std::slice::from_ref(&rec), &net, &zone, Mode::Ideal, &NoiseSpec::none()).unwrap();
    let c0: Vec<f64> = (0..6).map(|i| rec.thin_zone_conc[i][0]).collect();
    let k = RateConstants::co_oxidation_reference();
    let curves = rebuild_ode(k.as_slice(), &net, &rec.times, &obs[0].net_flux, &c0, zone.voidage, &rec.times).unwrap();
    for (i, name) in [(0, "CO"), (1, "O2")] {
        let truth = &rec.thin_zone_conc[i];
        let rel = (peak(&curves[i]) - peak(truth)).abs() / peak(truth);
        assert!(rel <= 0.05, "{name} peak differs by {rel}");
    }
    let sites: Vec<f64> = (0..rec.times.len()).map(|t| curves[3][t] + curves[4][t] + curves[5][t]).collect();
    let total = zone.site_density;
    assert!(sites.iter().all(|s| (s - total).abs() <= 1e-6 * total), "site total drifted");
}

#[test]
fn rebuild_without_flux_or_kinetics_is_stationary() {
    let net = ReactionNetwork::co_oxidation();
    let times = [0.0, 1.0];
    let g = vec![vec![0.0, 0.0]; 3];
    let c0 = [0.3, 0.2, 0.1, 5.0, 4.0, 21.0];
    let grid: Vec<f64> = (0..11).map(|i| 0.1 * i as f64).collect();
    let out = rebuild_ode(&[0.0; 6], &net, &times, &g, &c0, 0.4, &grid).unwrap();
    for (row, c) in out.iter().zip(c0) {
        assert!(row.iter().all(|v| *v == c));
    }
    assert!(rebuild_ode(&[0.0; 5], &net, &times, &g, &c0, 0.4, &grid).is_err());
}

#[test]
fn table_two_single_pulse_column_mean_log_ratio() {
    let truth: [f64; 6] = [15.0, 0.70, 0.33, 0.40, 0.02, 15.2];
    let fitted: [f64; 6] = [11.5, 0.53, 0.25, 0.37, 0.04, 12.8];
    let mut independent = 0.0;
    for i in 0..6 {
        independent += (fitted[i] / truth[i]).ln().abs();
    }
    independent /= 6.0;
    let e = energy_scale_mae(&fitted, &truth, 800.0).unwrap();
    assert!((e.mean_abs_ln - independent).abs() < 1e-14);
    assert!((e.mean_abs_ln - 0.294).abs() < 5e-4, "{}", e.mean_abs_ln);
    assert!((e.mae_ev - BOLTZMANN_EV * 800.0 * independent).abs() < 1e-15);
}

fn quadratic_gradient(a: Vec<f64>, scale: f64) -> impl FnMut(&[f64]) -> tapkinn::Result<Vec<f64>> {
    move |k: &[f64]| Ok(k.iter().zip(&a).map(|(k, a)| 2.0 * scale * a * k).collect())
}

#[test]
fn scaling_the_loss_divides_sigma_by_its_root() {
    let k = [0.5, 1.5, 3.0];
    let base = hessian_std(&k, quadratic_gradient(vec![1.0, 2.0, 4.0], 1.0)).unwrap();
    let tenfold = hessian_std(&k, quadratic_gradient(vec![1.0, 2.0, 4.0], 10.0)).unwrap();
    for (a, b) in base.sigma.iter().zip(&tenfold.sigma) {
        assert!((a / 10f64.sqrt() - b).abs() < 1e-10);
    }
}

#[test]
fn sigma_is_permutation_equivariant_with_coupled_curvature() {
    let h = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
    let k = [0.7, 1.1, 2.3];
    let grad = |h: [[f64; 3]; 3]| {
        move |k: &[f64]| -> tapkinn::Result<Vec<f64>> {
            Ok((0..3).map(|i| (0..3).map(|j| h[i][j] * k[j]).sum()).collect())
        }
    };
    let base = hessian_std(&k, grad(h)).unwrap();
    let perm = [2, 0, 1];
    let hp: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| h[perm[i]][perm[j]]));
    let kp: Vec<f64> = perm.iter().map(|&p| k[p]).collect();
    let permuted = hessian_std(&kp, grad(hp)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert!((permuted.sigma[i] - base.sigma[p]).abs() < 1e-10);
    }
    for i in 0..3 {
        for j in 0..3 {
            assert!((base.covariance[i][j] - base.covariance[j][i]).abs() < 1e-8);
        }
    }
}

proptest! {
    #[test]
    fn energy_error_symmetric_and_scale_free(
        pairs in prop::collection::vec((1e-3f64..1e3, 1e-3f64..1e3), 1..8),
        a in 1e-2f64..1e2,
        t in 200.0f64..1200.0,
    ) {
        let fit: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let e = energy_scale_mae(&fit, &truth, t).unwrap();
        let swapped = energy_scale_mae(&truth, &fit, t).unwrap();
        prop_assert!((e.mae_ev - swapped.mae_ev).abs() <= 1e-12 * e.mae_ev.max(1e-12));
        let sf: Vec<f64> = fit.iter().map(|v| v * a).collect();
        let st: Vec<f64> = truth.iter().map(|v| v * a).collect();
        let scaled = energy_scale_mae(&sf, &st, t).unwrap();
        prop_assert!((e.mean_abs_ln - scaled.mean_abs_ln).abs() <= 1e-12);
        prop_assert!(e.mae_ev >= 0.0);
        prop_assert!(ln_ratios(&fit, &truth).iter().all(Option::is_some));
    }
}
