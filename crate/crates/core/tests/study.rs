//! Replicated-study and equivalence-report behaviour on simulated walks.

use mssf::bcrw::simulate_trajectory;
use mssf::em::EmConfig;
use mssf::rng::stream_rng;
use mssf::sampler::SamplingScheme;
use mssf::study::{bias_and_sd, equivalence_report, run_study, Estimator, StudyConfig, DIRECT_SCHEME};
use mssf::BcrwScenario;

const UNIFORM: SamplingScheme<f64> = SamplingScheme::Uniform { max_distance: 15.0 };

fn config(n_replicates: usize, n_controls: usize, estimators: Vec<Estimator>) -> StudyConfig<f64> {
    StudyConfig {
        scenario: BcrwScenario::table1(),
        n_replicates,
        n_controls,
        schemes: vec![UNIFORM],
        estimators,
        seed: 77,
        em: EmConfig::default(),
    }
}

#[test]
fn ssf_and_direct_estimates_agree_on_the_same_walks() {
    let report = run_study(&config(2, 500, vec![Estimator::Ssf, Estimator::BcrwDirect])).unwrap();
    let ssf = report.cell("uniform", Estimator::Ssf).unwrap();
    let direct = report.cell(DIRECT_SCHEME, Estimator::BcrwDirect).unwrap();
    for (a, b) in ssf.replicates.iter().zip(&direct.replicates) {
        let (a, b) = (a.estimates.as_ref().unwrap(), b.estimates.as_ref().unwrap());
        for (i, name) in report.parameters.iter().enumerate() {
            assert!(
                (a[i] - b[i]).abs() <= 0.1 * b[i].abs().max(1.0),
                "{name}: {} vs {}",
                a[i],
                b[i]
            );
        }
    }
}

#[test]
fn few_controls_widen_the_gap_to_the_direct_fit() {
    let scenario = BcrwScenario::table1();
    let path = simulate_trajectory(&mut stream_rng(78, "simulate", 0), &scenario).unwrap();
    let em = EmConfig::default();
    let gap = |j: usize| {
        let eq = equivalence_report(&path.trajectory, &scenario.targets, j, &[UNIFORM], &em, 79).unwrap();
        let (ssf, direct) = (eq.column("ssf_uniform").unwrap(), eq.column("bcrw_direct").unwrap());
        ssf.estimates
            .iter()
            .zip(&direct.estimates)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    };
    let (small, large) = (gap(20), gap(500));
    assert!(small > large, "J=20 gap {small}, J=500 gap {large}");
}

#[test]
fn equivalence_report_is_reproducible() {
    let scenario = BcrwScenario::table1();
    let path = simulate_trajectory(&mut stream_rng(80, "simulate", 0), &scenario).unwrap();
    let run = || {
        equivalence_report(
            &path.trajectory,
            &scenario.targets,
            20,
            &[UNIFORM],
            &EmConfig::default(),
            81,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert!(String::from_utf8(ca)
        .unwrap()
        .starts_with("parameter,bcrw_direct,bcrw_direct_se,ssf_uniform,ssf_uniform_se"));
}

#[test]
fn summaries_match_replicates_and_shrink_with_more_replicates() {
    let small = run_study(&config(20, 1, vec![Estimator::BcrwDirect])).unwrap();
    let large = run_study(&config(40, 1, vec![Estimator::BcrwDirect])).unwrap();
    let mut ratios = Vec::new();
    for report in [&small, &large] {
        let cell = report.cell(DIRECT_SCHEME, Estimator::BcrwDirect).unwrap();
        let (bias, sd) = bias_and_sd(&cell.estimates(), &report.truth);
        assert_eq!(bias, cell.bias);
        assert_eq!(sd, cell.sd);
        assert_eq!(cell.n_ok + cell.n_failed, report.n_replicates);
    }
    // the first 20 replicates of both studies share their random streams
    let (a, b) = (
        small.cells[0].replicates.clone(),
        large.cells[0].replicates[..20].to_vec(),
    );
    assert_eq!(a, b);
    let (c20, c40) = (&small.cells[0], &large.cells[0]);
    for i in 0..small.parameters.len() {
        ratios.push((c40.sd[i] / 40f64.sqrt()) / (c20.sd[i] / 20f64.sqrt()));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let expected = 0.5f64.sqrt();
    assert!(
        mean > 0.8 * expected && mean < 1.25 * expected,
        "mean ratio {mean}, per parameter {ratios:?}"
    );
}
