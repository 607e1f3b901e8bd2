use sinewich::analysis::{
    epoch_grad_sim, gaussian_corr_oracle, monte_carlo_corr, pairwise_grad_cosine, rank_report, DEFAULT_RANK_EPSILON,
};
use sinewich::cli::rank_expansion;
use sinewich::numerics::{singular_values, RandomStream, Tensor};

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

#[test]
fn singular_values_match_jacobi() {
    for seed in 0..10 {
        let m = RandomStream::new(seed, 0).gaussian_tensor(&[5, 4], 1.0);
        let mtm = m.transpose2().unwrap().matmul(&m).unwrap();
        let rows = (0..4).map(|i| (0..4).map(|j| mtm.at2(i, j)).collect()).collect();
        let expect: Vec<f64> = jacobi_eigenvalues(rows).iter().map(|v| v.max(0.0).sqrt()).collect();
        let got = singular_values(&m).unwrap();
        assert_eq!(got.len(), 4);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-8, "{got:?} vs {expect:?}");
        }
    }
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    xy / (xx * yy).sqrt()
}

#[test]
fn stderr_agrees_with_bootstrap() {
    let (ws, wt, n) = (2.0, 5.0, 20_000);
    let est = monte_carlo_corr(ws, wt, 1.0, n, &mut RandomStream::new(9, 0)).unwrap();
    // the estimator draws sigma * normal() per sample, so replaying the stream recovers its inputs
    let mut replay = RandomStream::new(9, 0);
    let xs: Vec<f64> = (0..n).map(|_| replay.normal()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (ws * x).sin()).collect();
    let yt: Vec<f64> = xs.iter().map(|x| (wt * x).sin()).collect();
    assert!((cosine(&ys, &yt) - est.mean).abs() < 1e-12);

    let mut rng = RandomStream::new(10, 0);
    let boots: Vec<f64> = (0..200)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            let a: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
            let b: Vec<f64> = idx.iter().map(|&i| yt[i]).collect();
            cosine(&a, &b)
        })
        .collect();
    let mu = boots.iter().sum::<f64>() / 200.0;
    let sd = (boots.iter().map(|b| (b - mu).powi(2)).sum::<f64>() / 199.0).sqrt();
    let ratio = est.stderr / sd;
    assert!((0.75..1.33).contains(&ratio), "analytic {} bootstrap {sd}", est.stderr);
}

#[test]
fn monte_carlo_near_oracle_at_a_million_samples() {
    let oracle = gaussian_corr_oracle(2.0, 5.0, 1.0).unwrap();
    assert!((oracle - 0.0111).abs() < 5e-4, "{oracle}");
    let est = monte_carlo_corr(2.0, 5.0, 1.0, 1_000_000, &mut RandomStream::new(0, 0)).unwrap();
    assert!((est.mean - oracle).abs() < 3.0 * est.stderr, "{est:?} vs {oracle}");

    let far = gaussian_corr_oracle(5.0, 9.0, 1.0).unwrap();
    assert!(far.abs() < 0.01);
    let est = monte_carlo_corr(5.0, 9.0, 1.0, 1_000_000, &mut RandomStream::new(1, 0)).unwrap();
    assert!(
        est.mean.abs() < 0.05 && (est.mean - far).abs() < 3.0 * est.stderr,
        "{est:?}"
    );
}

#[test]
fn estimator_invariants() {
    for seed in 0..20 {
        let mut rng = RandomStream::new(seed, 3);
        let (ws, wt, sigma) = (
            rng.uniform_in(-6.0, 6.0),
            rng.uniform_in(-6.0, 6.0),
            rng.uniform_in(0.2, 3.0),
        );
        let est = monte_carlo_corr(ws, wt, sigma, 5000, &mut rng).unwrap();
        assert!(est.stderr >= 0.0);
        assert!(est.mean.abs() <= 1.0 + 5.0 * est.stderr);
    }
}

#[test]
fn oracle_decays_off_the_diagonal() {
    for ws in 1..=10 {
        let ws = ws as f64;
        assert!((gaussian_corr_oracle(ws, ws, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let mut prev = 1.0;
        for wt in (ws as usize + 1)..=10 {
            let v = gaussian_corr_oracle(ws, wt as f64, 1.0).unwrap().abs();
            assert!(v <= prev, "omega_s {ws} omega_t {wt}: {v} > {prev}");
            prev = v;
        }
    }
    // widening the base distribution at a fixed pair moves it further out too
    let mut prev = 1.0;
    for k in 1..=40 {
        let v = gaussian_corr_oracle(1.0, 1.5, 0.25 * k as f64).unwrap().abs();
        assert!(v <= prev, "sigma {}: {v} > {prev}", 0.25 * k as f64);
        prev = v;
    }
    assert!(prev < 1e-5, "{prev}");
}

#[test]
fn sine_raises_rank_of_a_rank_two_product() {
    let mut above = 0;
    for seed in 0..20 {
        let mut rng = RandomStream::new(seed, 0);
        let a = rng.gaussian_tensor(&[32, 2], 1.0);
        let b = rng.gaussian_tensor(&[32, 2], 1.0);
        let m = a.matmul(&b.transpose2().unwrap()).unwrap().map(|v| (3.0 * v).sin());
        if rank_report(&m, DEFAULT_RANK_EPSILON).unwrap().eps_rank > 2 {
            above += 1;
        }
    }
    assert!(above >= 19, "{above}/20");
}

#[test]
fn rank_expansion_over_frequency_grid() {
    for r in [1, 2, 4] {
        let rep = rank_expansion(r, 1000).unwrap();
        assert!(rep.passes(), "{rep:?}");
        for omega in [1.0, 2.0, 4.0, 8.0] {
            let (mut strict, mut kept) = (0, 0);
            for seed in 0..20 {
                let mut rng = RandomStream::new(seed, 4);
                let a = rng.gaussian_tensor(&[32, r], 1.0);
                let b = rng.gaussian_tensor(&[32, r], 1.0);
                let base = a.matmul(&b.transpose2().unwrap()).unwrap();
                let br = rank_report(&base, DEFAULT_RANK_EPSILON).unwrap().eps_rank;
                let sr = rank_report(&base.map(|v| (omega * v).sin()), DEFAULT_RANK_EPSILON)
                    .unwrap()
                    .eps_rank;
                strict += usize::from(sr > br);
                kept += usize::from(sr >= br);
            }
            assert!(
                kept >= 19 && strict >= 16,
                "r {r} omega {omega}: kept {kept} strict {strict}"
            );
        }
    }
}

#[test]
fn grad_sim_matches_two_pass_statistics() {
    let mut rng = RandomStream::new(5, 0);
    let samples: Vec<Vec<Option<f64>>> = (0..100)
        .map(|_| {
            let grads: Vec<Vec<f64>> = (0..3).map(|_| rng.gaussian_tensor(&[12], 1.0).into_data()).collect();
            pairwise_grad_cosine(&grads).unwrap()
        })
        .collect();
    let sim = epoch_grad_sim(4, &samples).unwrap();
    assert_eq!((sim.epoch, sim.tasks, sim.samples), (4, 3, 100));
    for i in 0..3 {
        for j in 0..3 {
            let vals: Vec<f64> = samples.iter().map(|s| s[i * 3 + j].unwrap()).collect();
            let mean = vals.iter().sum::<f64>() / 100.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!((sim.mean_at(i, j).unwrap() - mean).abs() < 1e-12);
            assert!((sim.variance_at(i, j).unwrap() - var).abs() < 1e-12);
            assert_eq!(sim.mean_at(i, j), sim.mean_at(j, i));
            if i == j {
                assert_eq!(sim.mean_at(i, j), Some(1.0));
            }
        }
    }
}

#[test]
fn parallel_results_independent_of_thread_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let r = rank_expansion(2, 77).unwrap();
                let s = sinewich::cli::prop2_suite(sinewich::cli::VerifyOptions {
                    seed: 3,
                    inject_fault: false,
                })
                .unwrap();
                (format!("{r:?}"), serde_json::to_string(&s).unwrap())
            })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn diagonal_matrix_singular_values() {
    let t = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]).unwrap();
    assert_eq!(singular_values(&t).unwrap(), vec![4.0, 3.0]);
}
