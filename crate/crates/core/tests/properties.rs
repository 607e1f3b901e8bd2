use proptest::prelude::*;

use sinewich::adapter::{
    clock_omega, fuse_awb, linear_scale, lowpass_matrix, pipeline_apply, sine_modulate, ClockNetParams, FusedKernel,
    LowRankFactors, MidKernel,
};
use sinewich::analysis::{rank_report, vec_correlation};
use sinewich::numerics::{conv2d, gaussian_kernel, RandomStream, Tensor};

fn factors(rng: &mut RandomStream, m: usize, n: usize, r: usize, k: usize) -> (LowRankFactors, MidKernel) {
    (
        LowRankFactors::new(rng.gaussian_tensor(&[m, r], 1.0), rng.gaussian_tensor(&[n, r], 1.0)).unwrap(),
        MidKernel::new(rng.gaussian_tensor(&[r, r, k, k], 1.0)).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fused_conv_matches_pipeline(
        seed in any::<u64>(),
        m in 1usize..=8,
        n in 1usize..=8,
        r in 1usize..=4,
        k in prop::sample::select(vec![1usize, 3]),
    ) {
        let r = r.min(m).min(n);
        let mut rng = RandomStream::new(seed, 0);
        let (f, mid) = factors(&mut rng, m, n, r, k);
        let x = rng.gaussian_tensor(&[m, 8, 8], 1.0);
        let fused = fuse_awb(&f, &mid).unwrap();
        let direct = conv2d(&x, fused.kernel()).unwrap();
        let staged = pipeline_apply(&f, &mid, &x).unwrap();
        prop_assert!(direct.max_abs_diff(&staged).unwrap() <= 1e-10);
    }

    #[test]
    fn sine_stays_in_unit_range(seed in any::<u64>(), omega in -50.0f64..50.0, scale in 0.1f64..100.0) {
        let w = RandomStream::new(seed, 0).gaussian_tensor(&[3, 2, 3, 3], scale);
        let base = FusedKernel::from_kernel(sinewich::numerics::ConvKernel::new(w).unwrap()).unwrap();
        let out = sine_modulate(&base, omega);
        prop_assert!(out.kernel.weights().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn frequency_is_bounded(
        seed in any::<u64>(),
        width in 1usize..=16,
        s in prop::sample::select(vec![-3.0f64, -0.5, 0.25, 1.0, 4.0]),
        c in -3.0f64..3.0,
    ) {
        let mut rng = RandomStream::new(seed, 0);
        let params = ClockNetParams::new(rng.gaussian_tensor(&[1, width], 1.0), s, c).unwrap();
        let omega = clock_omega(&params, &rng.gaussian_tensor(&[width], 1.0)).unwrap();
        prop_assert!((omega - s * c).abs() < s.abs());
        let (lo, hi) = params.bounds();
        prop_assert!(lo < omega && omega < hi);
    }

    #[test]
    fn linear_scaling_keeps_perfect_correlation(
        seed in any::<u64>(),
        ws in prop::sample::select(vec![-5.0f64, -0.3, 0.7, 2.0, 9.0]),
        wt in 0.01f64..10.0,
    ) {
        let w = RandomStream::new(seed, 0).gaussian_tensor(&[4, 3, 3, 3], 1.0);
        let base = FusedKernel::from_kernel(sinewich::numerics::ConvKernel::new(w).unwrap()).unwrap();
        let a = linear_scale(&base, ws).kernel.into_weights();
        let b = linear_scale(&base, wt).kernel.into_weights();
        let rho = vec_correlation(&a, &b).unwrap();
        prop_assert!((rho.abs() - 1.0).abs() <= 1e-12, "rho = {rho}");
    }

    #[test]
    fn lowpass_preserves_constants(value in -100.0f64..100.0, rows in 7usize..16, cols in 7usize..16) {
        let view = Tensor::filled(&[rows, cols], value);
        let out = lowpass_matrix(&view, 7, 1.0).unwrap();
        for i in 3..rows - 3 {
            for j in 3..cols - 3 {
                prop_assert!((out.at2(i, j) - value).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_kernel_is_normalised_and_symmetric(half in 0usize..5, sigma in 0.2f64..4.0) {
        let size = 2 * half + 1;
        let g = gaussian_kernel(size, sigma).unwrap();
        prop_assert!((g.sum() - 1.0).abs() <= 1e-12);
        let at = |i: usize, j: usize| g.at2(i, j);
        for i in 0..size {
            for j in 0..size {
                let v = at(i, j);
                for w in [at(j, i), at(size - 1 - i, j), at(i, size - 1 - j), at(size - 1 - j, size - 1 - i)] {
                    prop_assert!((v - w).abs() <= 1e-15);
                }
            }
        }
    }
}

#[test]
fn sine_does_not_factor_through_the_product() {
    // eps-rank of sin(A W B) differs from that of the fuse of sin(A), sin(W), sin(B)
    let mut differing = 0;
    for seed in 0..20 {
        let mut rng = RandomStream::new(seed, 7);
        let (f, mid) = factors(&mut rng, 8, 8, 2, 3);
        let lhs = sine_modulate(&fuse_awb(&f, &mid).unwrap(), 1.0).matrix_view();
        let sf = LowRankFactors::new(f.a().map(f64::sin), f.b().map(f64::sin)).unwrap();
        let sw = MidKernel::new(mid.weights().map(f64::sin)).unwrap();
        let rhs = fuse_awb(&sf, &sw).unwrap().matrix_view();
        let (rl, rr) = (rank_report(&lhs, 1e-6).unwrap(), rank_report(&rhs, 1e-6).unwrap());
        if rl.eps_rank != rr.eps_rank {
            differing += 1;
        }
    }
    assert!(differing >= 1, "{differing} of 20 differ");
}

#[test]
fn checkerboard_is_attenuated() {
    let view = Tensor::from_fn(&[16, 36], |i| if (i / 36 + i % 36) % 2 == 0 { 1.0 } else { -1.0 });
    let out = lowpass_matrix(&view, 7, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for i in 3..13 {
        for j in 3..33 {
            worst = worst.max(out.at2(i, j).abs());
        }
    }
    assert!(worst < 0.05, "{worst}");
}
