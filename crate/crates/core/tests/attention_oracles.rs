use linattn_core::attention::{self, AttentionBlockParams, KamParams, ProjectionWeights};
use linattn_core::tensor::alloc::MemoryScope;
use linattn_core::tensor::ops;
use linattn_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Kernel attention evaluated pair by pair, straight from the weighted-sum
/// definition.
fn naive_kernel_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, dk, dv) = (q.dim(0), q.dim(1), v.dim(1));
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let mut total = 0.0;
        let mut acc = vec![0.0; dv];
        for j in 0..n {
            let s: f64 = (0..dk).map(|d| softplus(q.at2(i, d)) * softplus(k.at2(j, d))).sum();
            total += s;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += s * v.at2(j, c);
            }
        }
        for (c, a) in acc.into_iter().enumerate() {
            out.data_mut()[i * dv + c] = a / total;
        }
    }
    out
}

fn random_qkv(r: &mut ChaCha8Rng, n: usize, dk: usize, dv: usize) -> [Tensor<f64>; 3] {
    let scale = r.random_range(0.1..3.0);
    [
        Tensor::randn(&[n, dk], scale, r),
        Tensor::randn(&[n, dk], scale, r),
        Tensor::randn(&[n, dv], 1.0, r),
    ]
}

#[test]
fn linear_form_equals_quadratic_form() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, dk, dv) = (r.random_range(1..=256), r.random_range(1..=32), r.random_range(1..=64));
        let [q, k, v] = random_qkv(&mut r, n, dk, dv);
        let lin = attention::kernel_attention_linear(&q, &k, &v).unwrap();
        let quad = attention::kernel_attention_quadratic(&q, &k, &v).unwrap();
        worst = worst.max(lin.rel_err(&quad));
    }
    assert!(worst <= 1e-10, "worst relative error {worst:e}");
}

#[test]
fn quadratic_form_matches_pairwise_definition() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let (n, dk, dv) = (r.random_range(1..=24), r.random_range(1..=6), r.random_range(1..=5));
        let [q, k, v] = random_qkv(&mut r, n, dk, dv);
        let quad = attention::kernel_attention_quadratic(&q, &k, &v).unwrap();
        assert!(quad.rel_err(&naive_kernel_attention(&q, &k, &v)) <= 1e-12);
    }
}

fn column_bounds(v: &Tensor<f64>) -> Vec<(f64, f64)> {
    (0..v.dim(1))
        .map(|c| {
            (0..v.dim(0)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                (lo.min(v.at2(i, c)), hi.max(v.at2(i, c)))
            })
        })
        .collect()
}

fn assert_convex(out: &Tensor<f64>, v: &Tensor<f64>) {
    let bounds = column_bounds(v);
    for i in 0..out.dim(0) {
        for (c, &(lo, hi)) in bounds.iter().enumerate() {
            let x = out.at2(i, c);
            let slack = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
            assert!(x >= lo - slack && x <= hi + slack, "row {i} col {c}: {x} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn outputs_are_convex_combinations_of_values() {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let [q, k, v] = random_qkv(&mut r, 40, 8, 6);
        assert_convex(&attention::dot_attention(&q, &k, &v).unwrap(), &v);
        assert_convex(&attention::kernel_attention_linear(&q, &k, &v).unwrap(), &v);
        assert_convex(&attention::kernel_attention_quadratic(&q, &k, &v).unwrap(), &v);
    }
}

#[test]
fn identical_keys_give_column_means() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let q = Tensor::randn(&[6, 3], 1.0, &mut r);
    let key = Tensor::<f64>::randn(&[1, 3], 1.0, &mut r);
    let k = Tensor::from_fn(&[6, 3], |i| key.data()[i % 3]);
    let v = Tensor::randn(&[6, 4], 1.0, &mut r);
    let means: Vec<f64> = (0..4).map(|c| (0..6).map(|i| v.at2(i, c)).sum::<f64>() / 6.0).collect();
    for out in [
        attention::dot_attention(&q, &k, &v).unwrap(),
        attention::kernel_attention_linear(&q, &k, &v).unwrap(),
    ] {
        for row in out.data().chunks(4) {
            for (a, m) in row.iter().zip(&means) {
                assert!((a - m).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn normalizer_stays_positive_under_extreme_inputs() {
    let n = 64;
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let v = Tensor::<f64>::randn(&[n, 5], 1.0, &mut r);
    let mixed = Tensor::from_fn(&[n, 4], |i| if i % 3 == 0 { 1e4 } else { -1e4 });
    let cases = [
        ("all -1e4", Tensor::full(&[n, 4], -1e4), Tensor::full(&[n, 4], -1e4)),
        ("all +1e4", Tensor::full(&[n, 4], 1e4), Tensor::full(&[n, 4], 1e4)),
        ("mixed", mixed.clone(), mixed.map(|x| -x)),
        ("q low, k high", Tensor::full(&[n, 4], -1e4), Tensor::full(&[n, 4], 1e4)),
    ];
    for (name, q, k) in cases {
        let out = attention::kernel_attention_linear(&q, &k, &v)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(out.is_finite(), "{name}");
        assert_convex(&out, &v);
        let quad = attention::kernel_attention_quadratic(&q, &k, &v).unwrap();
        assert!(out.rel_err(&quad) <= 1e-10, "{name}");
    }
    let q32 = Tensor::<f32>::full(&[n, 4], -1e4);
    let v32 = v.cast::<f32>();
    let out = attention::kernel_attention_linear(&q32, &q32, &v32).unwrap();
    assert!(out.is_finite());
}

#[test]
fn linear_form_allocates_no_quadratic_buffer() {
    let (n, dk, dv) = (2048, 16, 32);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let q = Tensor::<f32>::randn(&[n, dk], 1.0, &mut r);
    let k = Tensor::<f32>::randn(&[n, dk], 1.0, &mut r);
    let v = Tensor::<f32>::randn(&[n, dv], 1.0, &mut r);
    let scope = MemoryScope::start();
    let out = attention::kernel_attention_linear(&q, &k, &v).unwrap();
    let peak = scope.peak_bytes();
    let bound = 4 * (2 * n * dk + dk * dv + dk + n * dv);
    assert_eq!(peak, bound);
    assert!(peak < 4 * n * n / 10);
    drop(out);

    let scope = MemoryScope::start();
    let _ = attention::dot_attention(&q, &k, &v).unwrap();
    assert!(scope.peak_bytes() >= 4 * n * n);
}

#[test]
fn kam_with_identity_projection_matches_composition() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let x = Tensor::<f64>::randn(&[4, 3, 5], 1.0, &mut r);
    let params = KamParams {
        proj: ProjectionWeights::identity(4),
        gamma: 1.0,
    };
    let got = attention::kam_forward(&x, &params).unwrap();
    let tokens = Tensor::from_fn(&[15, 4], |i| x.data()[(i % 4) * 15 + i / 4]);
    let att = naive_kernel_attention(&tokens, &tokens, &tokens);
    let want = Tensor::from_fn(&[4, 3, 5], |i| x.data()[i] + att.data()[(i % 15) * 4 + i / 15]);
    assert!(got.rel_err(&want) <= 1e-10);
}

#[test]
fn cam_rows_sum_to_one_and_zero_beta_is_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(&[6, 4, 4], 1.0, &mut r);
    let a = attention::cam_attention_map(&x).unwrap();
    for row in a.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    assert_eq!(attention::cam_forward(&x, 0.0).unwrap(), x);
}

#[test]
fn block_channel_count_and_zero_scales() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let low = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut r);
    let high = Tensor::<f64>::randn(&[5, 4, 4], 1.0, &mut r);
    let p = AttentionBlockParams::init(8, 6, &mut r).unwrap();
    let out = attention::attention_block_forward(&low, &high, &p).unwrap();
    assert_eq!(out.shape(), &[6, 4, 4]);
    let cat = ops::concat_channels(&low, &high).unwrap();
    let z = ops::conv2d_grouped(&cat, &p.fuse_weight, Default::default()).unwrap();
    let z = ops::channel_affine(&z, &Tensor::ones(&[6]), &p.fuse_bias).unwrap();
    assert_eq!(out, z);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exactness_holds_for_any_shape(n in 1usize..48, dk in 1usize..9, dv in 1usize..9, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let [q, k, v] = random_qkv(&mut r, n, dk, dv);
        let lin = attention::kernel_attention_linear(&q, &k, &v).unwrap();
        let quad = attention::kernel_attention_quadratic(&q, &k, &v).unwrap();
        prop_assert!(lin.rel_err(&quad) <= 1e-10);
    }

    #[test]
    fn kernel_weights_are_a_distribution(n in 1usize..20, dk in 1usize..6, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::<f64>::randn(&[n, dk], 2.0, &mut r);
        let k = Tensor::<f64>::randn(&[n, dk], 2.0, &mut r);
        let w = attention::kernel_attention_weights(&q, &k).unwrap();
        for row in w.data().chunks(n) {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
