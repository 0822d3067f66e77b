mod common;

use diveq::autodiff::{check_gradient, check_gradient_many, Tape};
use diveq::codebook::{nearest, Codebook, DitheredCodebook, UsageStats};
use diveq::data::{read_dataset, write_dataset};
use diveq::metrics::{distortion_per_bit, rate_distortion_table};
use diveq::quantizers::{quantize, quantize_residual, Method, QuantizerConfig};
use diveq::replacement::{replace, ReplacementKind, ReplacementPolicy};
use diveq::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn batch_and_codebook() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 2usize..10, 1usize..5).prop_flat_map(|(n, k, d)| (matrix(n, d), matrix(k, d)))
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_pullbacks(x in matrix(2, 3)) {
        prop_assert!(check_gradient(|_, v| v.exp()?.sum(), &x, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.tanh()?.sum(), &x, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.square()?.mean(), &x, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.scale(-1.5)?.add_scalar(0.3)?.square()?.sum(), &x, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.square()?.add_scalar(1.0)?.log()?.sum(), &x, H).unwrap() < TOL);
    }

    #[test]
    fn relu_pullback_away_from_kink(x in matrix(2, 3)) {
        prop_assume!(x.data().iter().all(|v| v.abs() > 1e-3));
        prop_assert!(check_gradient(|_, v| v.relu()?.square()?.sum(), &x, H).unwrap() < TOL);
    }

    #[test]
    fn binary_pullbacks(a in matrix(3, 2), b in matrix(3, 2)) {
        let pts = [a, b];
        prop_assert!(check_gradient_many(|_, v| v[0].mul(v[1])?.sum(), &pts, H).unwrap() < TOL);
        prop_assert!(check_gradient_many(|_, v| v[0].sub(v[1])?.square()?.sum(), &pts, H).unwrap() < TOL);
        prop_assert!(check_gradient_many(|_, v| v[0].div(v[1].square()?.add_scalar(1.0)?)?.sum(), &pts, H).unwrap() < TOL);
    }

    #[test]
    fn matrix_pullbacks(a in matrix(3, 4), b in matrix(4, 2), w in matrix(3, 2)) {
        let pts = [a, b];
        prop_assert!(check_gradient_many(|t, v| v[0].matmul(v[1])?.mul(t.constant(w.clone()))?.sum(), &pts, H).unwrap() < TOL);
        prop_assert!(check_gradient_many(|_, v| v[0].transpose()?.square()?.column_means()?.sum(), &pts, H).unwrap() < TOL);
    }

    #[test]
    fn row_pullbacks(a in matrix(3, 4), w in matrix(3, 4)) {
        prop_assume!(a.iter_rows().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2));
        let wc = w.clone();
        prop_assert!(check_gradient(|t, v| v.softmax()?.mul(t.constant(wc.clone()))?.sum(), &a, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.row_norms()?.sum(), &a, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.row_sums()?.square()?.sum(), &a, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.l2norm(), &a, H).unwrap() < TOL);
        prop_assert!(check_gradient(|_, v| v.gather_rows(&[2, 0, 2])?.square()?.sum(), &a, H).unwrap() < TOL);
    }

    #[test]
    fn nearest_matches_brute_force((z, cb) in batch_and_codebook()) {
        let codewords: Vec<Vec<f64>> = cb.iter_rows().map(<[f64]>::to_vec).collect();
        let a = nearest(&z, &cb).unwrap();
        for (n, row) in z.iter_rows().enumerate() {
            prop_assert_eq!(a.indices[n], common::brute_nearest(row, &codewords));
        }
    }

    #[test]
    fn dithered_points_lie_on_their_segments(cb in matrix(6, 3), lambdas in prop::collection::vec(0.0f64..1.0, 5)) {
        let dc = DitheredCodebook::from_lambdas(&cb, lambdas.clone()).unwrap();
        for (j, &l) in lambdas.iter().enumerate() {
            let (a, b, p) = (cb.row(j), cb.row(j + 1), dc.points.row(j));
            for c in 0..3 {
                prop_assert!((p[c] - (a[c] + l * (b[c] - a[c]))).abs() < 1e-12);
                prop_assert!(p[c] >= a[c].min(b[c]) - 1e-12 && p[c] <= a[c].max(b[c]) + 1e-12);
            }
        }
    }

    #[test]
    fn perplexity_is_bounded(counts in prop::collection::vec(0u64..50, 1..20)) {
        let u = UsageStats::from_counts(&counts);
        let k = counts.len() as f64;
        prop_assert!(u.perplexity >= 1.0 && u.perplexity <= k + 1e-9);
        prop_assert!(u.usage_fraction >= 0.0 && u.usage_fraction <= 1.0);
        let used = counts.iter().filter(|&&c| c > 0).count() as f64;
        if used > 0.0 {
            prop_assert!(u.perplexity <= used + 1e-9);
        }
        prop_assert!(distortion_per_bit(0.5, &u).value >= 0.0);
    }

    #[test]
    fn noise_family_keeps_the_quantization_error_magnitude((z, cb) in batch_and_codebook(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let (zv, cv) = (tape.var(z.clone()), tape.var(cb.clone()));
        for method in [Method::Nsvq, Method::Diveq] {
            let q = quantize(zv, cv, &QuantizerConfig::with_method(method), 1.0, &mut rng).unwrap();
            let zq = q.z_q.value();
            for n in 0..z.rows() {
                let moved: f64 = zq.row(n).iter().zip(z.row(n)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let target: f64 = cb.row(q.indices[n]).iter().zip(z.row(n)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!((moved - target).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residuals_are_input_minus_hard_points((z, cb) in batch_and_codebook(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let zv = tape.var(z.clone());
        let books = [tape.var(cb.clone()), tape.var(cb.clone()), tape.var(cb.clone())];
        let out = quantize_residual(zv, &books, &QuantizerConfig::with_method(Method::Diveq), 1.0, &mut rng).unwrap();
        let mut input = z.clone();
        for (s, stage) in out.stage_results.iter().enumerate() {
            for (v, h) in input.data_mut().iter_mut().zip(stage.hard_points.data()) {
                *v -= h;
            }
            prop_assert_eq!(&out.residuals[s], &input);
        }
    }

    #[test]
    fn rate_distortion_flags_exactly_the_increases(ds in prop::collection::vec(0.0f64..10.0, 2..8)) {
        let runs: Vec<(u32, f64)> = ds.iter().enumerate().map(|(i, &d)| (i as u32 + 1, d)).collect();
        let table = rate_distortion_table(&runs).unwrap();
        let expected: Vec<u32> = (1..ds.len()).filter(|&i| ds[i] > ds[i - 1]).map(|i| i as u32 + 1).collect();
        prop_assert_eq!(table.violations(), expected);
    }

    #[test]
    fn dataset_file_round_trip(t in matrix(5, 3)) {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &t).unwrap();
        prop_assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn codebook_checkpoint_round_trip(t in matrix(4, 2), idx in prop::collection::vec(0usize..4, 0..20)) {
        let mut cb = Codebook::new(t).unwrap();
        cb.record_usage(&idx);
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        let back = Codebook::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.vectors(), cb.vectors());
    }
}

/// Pearson statistic of `observed` against `expected` probabilities.
fn chi_square(observed: &[usize], expected: &[f64]) -> f64 {
    let total: usize = observed.iter().sum();
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

fn donor_histogram(kind: ReplacementKind) -> Vec<usize> {
    let policy = ReplacementPolicy::with_kind(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let base = Tensor::from_rows(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [9.0, 9.0]]).unwrap();
    let mut hist = vec![0usize; 3];
    for _ in 0..10_000 {
        let mut cb = Codebook::new(base.clone()).unwrap();
        let mut usage = vec![0usize; 50];
        usage.extend(vec![1; 30]);
        usage.extend(vec![2; 20]);
        cb.record_usage(&usage);
        let event = replace(&mut cb, &policy, &mut rng).unwrap();
        assert_eq!(event.replaced, [3]);
        hist[event.donors[0]] += 1;
    }
    hist
}

// 2 degrees of freedom; 13.82 is the 0.999 quantile
const CHI2_2DOF_999: f64 = 13.82;

#[test]
fn importance_donors_follow_usage() {
    let hist = donor_histogram(ReplacementKind::Importance);
    let stat = chi_square(&hist, &[0.5, 0.3, 0.2]);
    assert!(stat < CHI2_2DOF_999, "{hist:?}: chi2 {stat}");
}

#[test]
fn uniform_donors_ignore_usage() {
    let hist = donor_histogram(ReplacementKind::NsvqUniform);
    let stat = chi_square(&hist, &[1.0 / 3.0; 3]);
    assert!(stat < CHI2_2DOF_999, "{hist:?}: chi2 {stat}");
}

#[test]
fn nsvq_directions_are_isotropic() {
    // angle of z_q - z relative to c - z is uniform, so its cosine averages to zero
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let z = Tensor::zeros(&[n, 2]);
    let cb = Tensor::from_rows(&[[1.0, 0.0], [-5.0, -5.0]]).unwrap();
    let tape = Tape::new();
    let q = quantize(tape.var(z), tape.var(cb), &QuantizerConfig::with_method(Method::Nsvq), 1.0, &mut rng).unwrap();
    let mean_cos = q.z_q.value().iter_rows().map(|r| r[0]).sum::<f64>() / n as f64;
    // standard error of the mean cosine is 1/sqrt(2n)
    assert!(mean_cos.abs() < 5.0 / (2.0 * n as f64).sqrt(), "{mean_cos}");
}

#[test]
fn diveq_direction_concentrates_as_variance_shrinks() {
    let z = Tensor::zeros(&[2000, 2]);
    let cb = Tensor::from_rows(&[[1.0, 0.0], [-5.0, -5.0]]).unwrap();
    let mean_cos = |sigma2: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let config = QuantizerConfig {
            sigma2,
            ..QuantizerConfig::with_method(Method::Diveq)
        };
        let q = quantize(tape.var(z.clone()), tape.var(cb.clone()), &config, 1.0, &mut rng).unwrap();
        q.z_q.value().iter_rows().map(|r| r[0]).sum::<f64>() / 2000.0
    };
    let cos: Vec<f64> = [10.0, 1.0, 0.1, 0.01].map(mean_cos).to_vec();
    assert!(cos.windows(2).all(|w| w[0] < w[1]), "{cos:?}");
    assert!(cos[3] > 0.99);
}

#[test]
fn lloyd_oracle_is_at_a_fixed_point() {
    let data = diveq::data::DatasetSpec { size: 500, ..Default::default() }.generate().unwrap().data;
    let (centroids, d) = common::lloyd(&data, 8, 0);
    assert!((common::hard_distortion(&data, &centroids) - d).abs() < 1e-12);
    assert!(common::lloyd_best(&data, 8, 3) <= d);
}
