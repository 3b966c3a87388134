use jmflex::estimation::{
    gibbs_variance, initial_state, posterior_mean, posterior_mode, slice_variance, McmcConfig,
    ModeFitConfig,
};
use jmflex::io::{load_config, load_dataset, read_chain, write_chain, write_dataset, FitStatus, GridSpec, RunManifest};
use jmflex::likelihood::ThetaState;
use jmflex::model::{JointModel, Predictor};
use jmflex::simulation::{simulate, simulation_spec, SimSetting};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, InverseGamma};
use statrs::statistics::Distribution;
use std::path::Path;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn simulated_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for setting in [1, 3] {
        let sim = simulate(&SimSetting::new(setting, 40, 0.2, 12)).unwrap();
        let (s, l) = (dir.path().join("s.csv"), dir.path().join("l.csv"));
        write_dataset(&sim.data, &s, &l).unwrap();
        assert_eq!(load_dataset(&s, &l).unwrap(), sim.data, "setting {setting}");
    }
}

#[test]
fn default_config_basis_sizes() {
    let cfg = load_config(&configs().join("default.toml")).unwrap();
    let sim = simulate(&SimSetting::new(2, 60, 0.2, 1)).unwrap();
    let m = JointModel::<f64>::build(&cfg.model, &sim.data).unwrap();
    let lam: Vec<usize> = m.blocks_of(Predictor::Lambda).collect();
    assert_eq!(lam.len(), 1);
    assert_eq!(m.blocks[lam[0]].width, 9);
    assert_eq!(m.blocks[m.assoc_block].width, 5);
    for name in ["linear.toml", "grouped.toml"] {
        let cfg = load_config(&configs().join(name)).unwrap();
        assert_eq!(cfg.model.association().unwrap().is_nonlinear(), name == "grouped.toml");
    }
}

#[test]
fn chain_file_round_trips() {
    let sim = simulate(&SimSetting::new(1, 30, 0.3, 2)).unwrap();
    let m = JointModel::<f64>::build(&simulation_spec(1), &sim.data).unwrap();
    let cfg = McmcConfig {
        n_iter: 30,
        burnin: 10,
        thin: 4,
        rng_seed: 3,
        ..McmcConfig::default()
    };
    let chain = posterior_mean(&m, initial_state(&m, None), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.csv");
    write_chain(&path, &chain, &m, "abc", false).unwrap();
    let table = read_chain(&path).unwrap();
    assert_eq!(table.config_hash, "abc");
    assert_eq!(table.iterations, chain.iterations);
    for (b, l) in chain.layout.iter().enumerate() {
        let draws = table.block(&l.name).unwrap();
        for d in 0..chain.len() {
            assert_eq!(draws[d].as_slice(), chain.beta(d, b));
        }
    }
    assert_eq!(table.block("loglik").unwrap()[0][0], chain.loglik[0]);
}

#[test]
fn mode_then_chain_on_small_data() {
    let sim = simulate(&SimSetting::new(1, 60, 0.2, 8)).unwrap();
    let m = JointModel::<f64>::build(&simulation_spec(1), &sim.data).unwrap();
    let fit = posterior_mode(&m, initial_state(&m, None), &ModeFitConfig::default()).unwrap();
    assert!(fit.log_posterior.is_finite());
    assert!(fit.newton_steps.iter().all(|(before, after)| after >= before));
    let chain = posterior_mean(
        &m,
        fit.state,
        &McmcConfig {
            n_iter: 200,
            burnin: 50,
            thin: 1,
            ..McmcConfig::default()
        },
    )
    .unwrap();
    assert_eq!(chain.len(), 150);
    assert!(chain.acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
}

fn isotropic_fixture() -> (JointModel<f64>, ThetaState<f64>, usize) {
    let sim = simulate(&SimSetting::new(1, 12, 0.3, 4)).unwrap();
    let m = JointModel::<f64>::build(&simulation_spec(1), &sim.data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut st = ThetaState::zeros(&m);
    let b = m.block_index("mu.s(time)").unwrap();
    let w = m.blocks[b].width;
    st.set_block(&m, b, DVector::from_fn(w, |_, _| rng.random_range(-1.0..1.0)));
    (m, st, b)
}

#[test]
fn gibbs_draws_have_inverse_gamma_mean() {
    let (m, st, b) = isotropic_fixture();
    let q = m.blocks[b].quad_forms(&st.beta[b])[0];
    let ig = InverseGamma::new(0.001 + m.blocks[b].prior_rank() as f64 / 2.0, 0.001 + q / 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let draws: Vec<f64> = (0..n).map(|_| gibbs_variance(&m, &st, b, &mut rng).unwrap()).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = ig.std_dev().unwrap();
    assert!((mean - ig.mean().unwrap()).abs() < 5.0 * sd / (n as f64).sqrt(), "{mean}");
}

#[test]
fn slice_sampler_matches_inverse_gamma_conditional() {
    let (m, mut st, b) = isotropic_fixture();
    let q = m.blocks[b].quad_forms(&st.beta[b])[0];
    let ig = InverseGamma::new(0.001 + m.blocks[b].prior_rank() as f64 / 2.0, 0.001 + q / 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut draws = Vec::new();
    for k in 0..20_000 {
        let v = slice_variance(&m, &st, b, 0, &mut rng).unwrap();
        st.set_variances(b, vec![v]);
        if k % 4 == 0 {
            draws.push(v);
        }
    }
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ig.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value of the Kolmogorov distribution
    assert!(d < 1.63 / n.sqrt(), "D = {d}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_points_are_ordered_and_complete(lower in -10.0f64..10.0, width in 0.0f64..20.0, n in 1usize..300) {
        let g = GridSpec { lower, upper: lower + width, n };
        let p = g.points();
        prop_assert_eq!(p.len(), n);
        prop_assert_eq!(p[0], lower);
        prop_assert!(p.windows(2).all(|w| w[1] >= w[0]));
        let parsed: GridSpec = format!("{},{},{}", g.lower, g.upper, g.n).parse().unwrap();
        prop_assert_eq!(parsed, g);
    }

    #[test]
    fn manifest_status_never_moves_back(steps in proptest::collection::vec(0u8..4, 1..8)) {
        let mut m = RunManifest::new("h".into(), 1, "s".into(), "l".into());
        let rank = |s: &FitStatus| match s {
            FitStatus::Running => 0,
            FitStatus::Restarted { .. } => 1,
            _ => 2,
        };
        for s in steps {
            let status = match s {
                0 => FitStatus::Running,
                1 => FitStatus::Restarted { restarts: 1 },
                2 => FitStatus::Converged,
                _ => FitStatus::Failed { restarts: 0, error: "x".into() },
            };
            let before = m.status.clone();
            if m.advance(status).is_err() {
                prop_assert_eq!(&m.status, &before);
            }
            prop_assert!(rank(&m.status) >= rank(&before));
        }
    }
}
