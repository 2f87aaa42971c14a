mod common;

use common::{band_cov_dense, cvec, dense_ctf_update, dense_noise_update, dense_posterior, C};
use dereverb_core::em::expected_loglik;
use dereverb_core::{
    apply_ctf, e_step, init_state, m_step_ctf, m_step_noise, run_em, CtfFilter64, EmConfig64,
    PosteriorStats64, PriorVariance64, Spectrogram64,
};
use proptest::prelude::*;

fn max_abs_diff(a: impl Iterator<Item = (C, C)>) -> (f64, f64) {
    a.fold((0.0f64, 0.0f64), |(d, s), (x, y)| {
        (d.max((x - y).norm()), s.max(y.norm()))
    })
}

/// Worst relative error of the banded posterior against the dense one, over
/// means and every stored covariance entry.
fn e_step_error(seed: u64, f: usize, n: usize, p: usize) -> f64 {
    let st = common::random_state(seed, f, n, p);
    let post = e_step(&st).unwrap();
    let mut worst = 0.0f64;
    for band in 0..f {
        let (mean, cov) = dense_posterior(
            st.observed.band(band),
            st.ctf.band(band),
            st.noise.power[band],
            st.prior.band(band),
        );
        let (d, s) = max_abs_diff(
            post.mean_band(band)
                .iter()
                .copied()
                .zip(mean.iter().copied()),
        );
        worst = worst.max(d / s);
        let stored = (0..=p).flat_map(|d| (d..n).map(move |i| (d, i)));
        let (d, s) = max_abs_diff(stored.map(|(d, i)| (post.cov(band, d, i), cov[(i, i - d)])));
        worst = worst.max(d / s);
    }
    worst
}

#[test]
fn small_instance_matches_dense_inverse() {
    assert!(e_step_error(11, 2, 8, 2) < 1e-8);
}

#[test]
fn stored_band_is_hermitian_consistent() {
    let st = common::random_state(5, 3, 10, 3);
    let post = e_step(&st).unwrap();
    for f in 0..3 {
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(post.cov_entry(f, i, j), post.cov_entry(f, j, i).conj());
            }
            assert_eq!(post.cov(f, 0, i).im, 0.0);
        }
    }
}

#[test]
fn noiseless_least_squares_recovers_filter() {
    let mut r = common::rng(8);
    let (n, p) = (24, 3);
    let mu = cvec(&mut r, n);
    let h_true = CtfFilter64::new(cvec(&mut r, p + 1), 1, p + 1).unwrap();
    let s = Spectrogram64::from_bins(mu.clone(), n, 2, 1).unwrap();
    let x = apply_ctf(&h_true, &s).unwrap();

    let mut st = common::random_state(1, 1, n, p);
    st.observed = x;
    let post =
        PosteriorStats64::from_parts(mu, vec![C::new(0.0, 0.0); (p + 1) * n], 1, n, p).unwrap();
    let h = m_step_ctf(&st, &post);
    for (a, b) in h.coeffs().iter().zip(h_true.coeffs()) {
        assert!((a - b).norm() < 1e-8 * b.norm().max(1.0));
    }
    // and the residual it leaves is exactly zero, so the noise update hits the floor
    assert_eq!(m_step_noise(&st, &post, &h).power[0], st.noise_floor);
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let syn = common::synthetic(21, 6, 48, 3, 0.5, 25.0);
    let run = |workers| {
        let cfg = EmConfig64 {
            order: 3,
            iterations: 8,
            workers,
            ..EmConfig64::default()
        };
        run_em(&syn.observed, &syn.prior, &cfg).unwrap()
    };
    let (s1, st1) = run(1);
    for workers in [2, 5] {
        let (s, st) = run(workers);
        assert_eq!(s.bins(), s1.bins());
        assert_eq!(st.ctf.coeffs(), st1.ctf.coeffs());
        assert_eq!(st.noise.power, st1.noise.power);
        assert_eq!(st.history, st1.history);
    }
}

#[test]
fn band_order_does_not_change_any_bit() {
    let syn = common::synthetic(22, 5, 40, 2, 0.5, 25.0);
    let (f, n) = (5, 40);
    let perm = [3usize, 0, 4, 1, 2];
    let permute = |v: &[C]| -> Vec<C> {
        perm.iter()
            .flat_map(|&src| v[src * n..(src + 1) * n].to_vec())
            .collect()
    };
    let x2 = syn
        .observed
        .with_bins(permute(syn.observed.bins()))
        .unwrap();
    let pv: Vec<f64> = perm
        .iter()
        .flat_map(|&src| syn.prior.band(src).to_vec())
        .collect();
    let p2 = PriorVariance64::new(pv, f, n, 1e-10).unwrap();
    let cfg = EmConfig64 {
        order: 2,
        iterations: 6,
        likelihood_tracking: false,
        ..EmConfig64::default()
    };
    let (s1, st1) = run_em(&syn.observed, &syn.prior, &cfg).unwrap();
    let (s2, st2) = run_em(&x2, &p2, &cfg).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(s2.band(dst), s1.band(src));
        assert_eq!(st2.ctf.band(dst), st1.ctf.band(src));
        assert_eq!(st2.noise.power[dst], st1.noise.power[src]);
    }
}

#[test]
fn identity_noiseless_input_is_a_fixed_point() {
    // started next to the truth (negligible noise), EM must stay there
    let mut r = common::rng(4);
    let (f, n) = (4, 64);
    let x = Spectrogram64::from_bins(cvec(&mut r, f * n), n, 2 * f, 1).unwrap();
    let power: Vec<f64> = x.bins().iter().map(|z| z.norm_sqr()).collect();
    let prior = PriorVariance64::new(power, f, n, 1e-10).unwrap();
    let cfg = EmConfig64 {
        order: 0,
        iterations: 10,
        noise_init_scale: 1e-6,
        ..EmConfig64::default()
    };
    let (est, st) = run_em(&x, &prior, &cfg).unwrap();
    let num: f64 = est
        .bins()
        .iter()
        .zip(x.bins())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    assert!((num / x.energy()).sqrt() < 1e-3);
    assert!(st
        .ctf
        .coeffs()
        .iter()
        .all(|h| (h - C::new(1.0, 0.0)).norm() < 1e-3));
}

#[test]
fn single_precision_engine_runs() {
    let syn = common::synthetic_with_range(30, 4, 96, 2, 0.5, 30.0, (-1.0, 1.0));
    let x32 = Spectrogram64::from_bins(syn.observed.bins().to_vec(), 96, 8, 1).unwrap();
    let bins: Vec<_> = x32
        .bins()
        .iter()
        .map(|z| dereverb_core::Complex32::new(z.re as f32, z.im as f32))
        .collect();
    let x32 = dereverb_core::Spectrogram32::from_bins(bins, 96, 8, 1).unwrap();
    let pv: Vec<f32> = syn.prior.values().iter().map(|&v| v as f32).collect();
    let p32 = dereverb_core::PriorVariance32::new(pv, 4, 96, 1e-10).unwrap();
    let cfg = dereverb_core::EmConfig32 {
        order: 2,
        iterations: 20,
        ..Default::default()
    };
    let (est, st) = run_em(&x32, &p32, &cfg).unwrap();
    assert!(est
        .bins()
        .iter()
        .all(|z| z.re.is_finite() && z.im.is_finite()));
    assert!(st.history.windows(2).all(|w| w[1].log_marginal.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn e_step_matches_dense(seed in any::<u64>(), f in 1usize..=4, p in 0usize..=4, extra in 1usize..=12) {
        let n = (p + extra).min(16);
        prop_assume!(p < n);
        let err = e_step_error(seed, f, n, p);
        prop_assert!(err < 1e-8, "relative error {err:e}");
    }

    #[test]
    fn posterior_variance_is_below_prior(seed in any::<u64>(), f in 1usize..=3, p in 0usize..=4) {
        let st = common::random_state(seed, f, 20, p);
        let post = e_step(&st).unwrap();
        for band in 0..f {
            for n in 0..20 {
                let v = post.cov(band, 0, n).re;
                prop_assert!(v > 0.0);
                prop_assert!(v <= st.prior.get(band, n) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn m_steps_match_dense_formulas(seed in any::<u64>(), f in 1usize..=3, p in 0usize..=4, n in 6usize..=16) {
        prop_assume!(p < n);
        let st = common::random_state(seed, f, n, p);
        let post = e_step(&st).unwrap();
        let h = m_step_ctf(&st, &post);
        let noise = m_step_noise(&st, &post, &h);
        for band in 0..f {
            let cov = band_cov_dense(&post, band);
            let want = dense_ctf_update(st.observed.band(band), post.mean_band(band), &cov, p);
            let scale = want.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (a, b) in h.band(band).iter().zip(&want) {
                prop_assert!((a - b).norm() < 1e-10 * scale);
            }
            let s2 = dense_noise_update(st.observed.band(band), post.mean_band(band), &cov, h.band(band));
            prop_assert!((noise.power[band] - s2).abs() < 1e-10 * s2);
        }
    }

    #[test]
    fn m_step_never_lowers_the_surrogate(seed in any::<u64>(), p in 0usize..=3) {
        let syn = common::synthetic(seed, 3, 32, p, 0.6, 20.0);
        let cfg = EmConfig64 { order: p, ..EmConfig64::default() };
        let mut st = init_state(&syn.observed, &syn.prior, &cfg).unwrap();
        for _ in 0..4 {
            let post = e_step(&st).unwrap();
            let before = expected_loglik(&st.observed, &post, &st.ctf, &st.noise);
            let h = m_step_ctf(&st, &post);
            let noise = m_step_noise(&st, &post, &h);
            let after = expected_loglik(&st.observed, &post, &h, &noise);
            prop_assert!(after >= before - 1e-9 * before.abs());
            st.ctf = h;
            st.noise = noise;
        }
    }
}
