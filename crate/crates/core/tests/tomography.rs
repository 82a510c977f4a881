use pptlab::correlate::{dense_expectation, expectation, Insertion, MultiTimeObservable};
use pptlab::oqe::random_haar_unitary;
use pptlab::ppt::build_ppt;
use pptlab::tomography::{
    disentangle_reconstruct, window_size, DisentangleOptions, MeasurementOracle, OracleMode, Query,
    SamplingConfig,
};
use pptlab::OqeModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn haar(env: usize, steps: usize, seed: u64) -> OqeModel {
    OqeModel::random_haar(2, env, false, steps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn exact_reconstruction_over_sizes_and_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for env in [1usize, 2, 4] {
        for n in [4usize, 5, 6] {
            let r = window_size(2, env, 1);
            for seed in 0..10u64 {
                let truth = haar(env, n, 31 * seed + 7 * env as u64 + n as u64);
                let mut oracle = MeasurementOracle::exact(truth.clone(), n).unwrap();
                let rep =
                    disentangle_reconstruct(&mut oracle, n, env, &DisentangleOptions::default())
                        .unwrap();
                assert!(rep.converged);
                assert!(
                    rep.state_fidelity > 1.0 - 1e-8,
                    "D={env} N={n} seed={seed}: {}",
                    rep.state_fidelity
                );
                let f = n + 1 - r;
                assert_eq!(rep.query_count, f + 1);
                let reduced = oracle
                    .query_log()
                    .iter()
                    .filter(|q| matches!(q, Query::Reduced { .. }))
                    .count();
                assert_eq!(reduced, f + 1);

                let rec = build_ppt(rep.recovered_model.as_ref().unwrap(), n).unwrap();
                for _ in 0..5 {
                    let step = rng.random_range(1..=n);
                    let obs = MultiTimeObservable::new(vec![Insertion {
                        step,
                        matrix: random_haar_unitary(4, &mut rng),
                    }])
                    .unwrap();
                    let a = expectation(&rec, &obs).unwrap();
                    let b = dense_expectation(&truth, n, &obs).unwrap();
                    assert!(
                        (a - b).norm() < 1e-8,
                        "D={env} N={n} seed={seed}: {a} vs {b}"
                    );
                }
            }
        }
    }
}

#[test]
fn larger_bound_than_needed_still_reconstructs() {
    let truth = haar(2, 5, 99);
    let mut oracle = MeasurementOracle::exact(truth, 5).unwrap();
    let rep = disentangle_reconstruct(&mut oracle, 5, 4, &DisentangleOptions::default()).unwrap();
    assert!(rep.state_fidelity > 1.0 - 1e-8, "{}", rep.state_fidelity);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[test]
fn sampled_deficit_shrinks_with_shots() {
    let n = 4;
    let shots = [1_000u64, 10_000, 100_000];
    let medians: Vec<f64> = shots
        .iter()
        .map(|&s| {
            let deficits = (0..5u64)
                .map(|seed| {
                    let mode = OracleMode::Sampled(SamplingConfig {
                        shots: s,
                        seed: 40 + seed,
                    });
                    let mut oracle =
                        MeasurementOracle::new(haar(2, n, 300 + seed), n, mode).unwrap();
                    let rep =
                        disentangle_reconstruct(&mut oracle, n, 2, &DisentangleOptions::default())
                            .unwrap();
                    1.0 - rep.state_fidelity
                })
                .collect();
            median(deficits)
        })
        .collect();
    assert!(
        medians[0] > medians[1] && medians[1] > medians[2],
        "{medians:?}"
    );
    assert!(medians[0] / medians[2] > 10.0, "{medians:?}");
}
