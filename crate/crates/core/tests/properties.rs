use dwc_core::consolidation::{consolidate, decode_checkpoint, encode_checkpoint};
use dwc_core::eval::{dice_from_labels, error_mask, paired_ttest, student_t_two_tailed};
use dwc_core::meshnet::{init_map_weights, NetworkSpec};
use dwc_core::tensor::{softmax_channels, tile_volume, untile_volume};
use dwc_core::variational::{kl_ffg, FfgPosterior, FfgTensor, GaussianPrior};
use dwc_core::{
    dilated_conv3d, naive_conv_oracle, FeatureMap, KernelShape, SiteCheckpoint, Volume,
};
use proptest::prelude::*;
use std::path::Path;

fn scalar_posterior(mu: &[f32], sigma: &[f32]) -> FfgPosterior {
    FfgPosterior::new(vec![FfgTensor {
        name: "w".into(),
        shape: vec![mu.len()],
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
    }])
    .unwrap()
}

fn conv_case() -> impl Strategy<
    Value = (
        usize,
        usize,
        [usize; 3],
        usize,
        usize,
        Vec<f32>,
        Vec<f32>,
        Vec<f32>,
    ),
> {
    (
        1usize..=2,
        1usize..=2,
        [2usize..7, 2usize..7, 2usize..7],
        0usize..=1,
        1usize..=3,
    )
        .prop_flat_map(|(cin, filters, dims, half, dilation)| {
            let n = dims.iter().product::<usize>();
            let taps = (2 * half + 1).pow(3);
            (
                Just(cin),
                Just(filters),
                Just(dims),
                Just(half),
                Just(dilation),
                prop::collection::vec(-2.0f32..2.0, cin * n),
                prop::collection::vec(-1.0f32..1.0, filters * cin * taps),
                prop::collection::vec(-1.0f32..1.0, filters),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_loop_oracle((cin, _f, dims, half, l, x, w, b) in conv_case()) {
        let input = FeatureMap::new(x, cin, dims).unwrap();
        let shape = KernelShape::cubic_same(half, l);
        let fast = dilated_conv3d(&input, &w, &b, &shape).unwrap();
        let slow = naive_conv_oracle(&input, &w, &b, &shape).unwrap();
        prop_assert_eq!(fast.dims(), dims);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - e).abs() <= 1e-5, "{} vs {}", a, e);
        }
    }

    #[test]
    fn conv_is_linear_in_the_input((cin, f, dims, half, l, x, w, _b) in conv_case(), k in -3.0f32..3.0) {
        let shape = KernelShape::cubic_same(half, l);
        let zero = vec![0.0; f];
        let y = dilated_conv3d(&FeatureMap::new(x.clone(), cin, dims).unwrap(), &w, &zero, &shape).unwrap();
        let scaled: Vec<f32> = x.iter().map(|v| k * v).collect();
        let ky = dilated_conv3d(&FeatureMap::new(scaled, cin, dims).unwrap(), &w, &zero, &shape).unwrap();
        for (a, e) in ky.data().iter().zip(y.data()) {
            prop_assert!((a - k * e).abs() <= 1e-4 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-30.0f32..30.0, 4 * 8),
        shift in -50.0f32..50.0,
    ) {
        let p = softmax_channels(&FeatureMap::new(logits.clone(), 4, [2, 2, 2]).unwrap());
        let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
        let q = softmax_channels(&FeatureMap::new(shifted, 4, [2, 2, 2]).unwrap());
        for v in 0..8 {
            let total: f32 = (0..4).map(|c| p.channel(c)[v]).sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            for c in 0..4 {
                prop_assert!(p.channel(c)[v] >= 0.0);
                prop_assert!((p.channel(c)[v] - q.channel(c)[v]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tiles_reassemble_bitwise(k in 1usize..=3, side in 1usize..=4, seed in any::<u32>()) {
        let dims = [k * side; 3];
        let n = dims.iter().product::<usize>();
        let data = (0..n).map(|i| ((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 / 1e9).collect();
        let v = Volume::new(data, dims).unwrap();
        let tiles = tile_volume(&v, side).unwrap();
        prop_assert_eq!(tiles.len(), k * k * k);
        prop_assert_eq!(untile_volume(&tiles, dims, side).unwrap(), v);
    }

    #[test]
    fn consolidation_ignores_site_order(
        prior_var in 0.5f32..2.0,
        sites in prop::collection::vec((-1.0f32..1.0, 0.05f32..0.45), 2..5),
        rotate in 0usize..4,
    ) {
        let prior = scalar_posterior(&[0.1], &[prior_var.sqrt()]);
        let qs: Vec<FfgPosterior> = sites.iter().map(|&(m, v)| scalar_posterior(&[m], &[v.sqrt()])).collect();
        let mut rotated = qs.clone();
        rotated.rotate_left(rotate % qs.len());
        let a = consolidate(&prior, &qs).unwrap().posterior;
        let b = consolidate(&prior, &rotated).unwrap().posterior;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn single_site_consolidation_is_identity(m in -2.0f32..2.0, s in 0.01f32..0.9) {
        let prior = scalar_posterior(&[0.0], &[1.0]);
        let site = scalar_posterior(&[m], &[s]);
        prop_assert_eq!(consolidate(&prior, &[site.clone()]).unwrap().posterior, site);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_on_the_prior(
        params in prop::collection::vec((-2.0f32..2.0, 0.05f32..3.0), 1..12),
    ) {
        let (mu, sigma): (Vec<f32>, Vec<f32>) = params.into_iter().unzip();
        let q = scalar_posterior(&mu, &sigma);
        prop_assert!(kl_ffg(&q, &GaussianPrior::standard_normal()).unwrap() >= 0.0);
        prop_assert!(kl_ffg(&q, &GaussianPrior::Posterior(q.clone())).unwrap().abs() < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), width in 1usize..4, variational in any::<bool>()) {
        let spec = NetworkSpec::meshnet(1, 3, width, &[1, 2]);
        let w = init_map_weights(&spec, seed);
        let ck = if variational {
            let q = FfgPosterior::from_point(&w, 0.25).unwrap();
            SiteCheckpoint::variational(spec, q, vec!["H".into(), "N".into()]).unwrap()
        } else {
            SiteCheckpoint::map_point(spec, w, vec!["H".into()]).unwrap()
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn dice_is_symmetric_and_one_on_itself(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..200),
    ) {
        let (a, b): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        prop_assert_eq!(dice_from_labels(&a, &b, 4).unwrap(), dice_from_labels(&b, &a, 4).unwrap());
        for (c, d) in dice_from_labels(&a, &a, 4).unwrap().into_iter().enumerate() {
            prop_assert_eq!(d, a.contains(&(c as u32)).then_some(1.0));
        }
        for d in dice_from_labels(&a, &b, 4).unwrap().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn error_mask_counts_the_misclassified_voxels(
        pairs in prop::collection::vec((0u32..3, 0u32..3), 27),
    ) {
        let (a, b): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let vol = |l: &[u32]| Volume::new(l.iter().map(|&v| v as f32).collect(), [3; 3]).unwrap();
        let mask = error_mask(&vol(&a), &vol(&b)).unwrap();
        let accuracy = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / 27.0;
        let ones: f32 = mask.data().iter().sum();
        prop_assert!((ones as f64 - (1.0 - accuracy) * 27.0).abs() < 1e-9);
        prop_assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
    }

    #[test]
    fn ttest_p_matches_incomplete_beta(t in -25.0f64..25.0, df in 1usize..=200) {
        let p = student_t_two_tailed(t, df as f64);
        let want = t_two_tailed_oracle(t, df);
        prop_assert!((p - want).abs() < 1e-6, "t={} df={}: {} vs {}", t, df, p, want);
    }

    #[test]
    fn paired_ttest_matches_hand_computation(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..60),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let n = a.len() as f64;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let r = paired_ttest(&a, &b).unwrap();
        prop_assume!(sd > 1e-9);
        let t = mean / (sd / n.sqrt());
        prop_assert!((r.t - t).abs() <= 1e-9 * (1.0 + t.abs()));
        prop_assert_eq!(r.df, a.len() - 1);
        prop_assert!((r.p - t_two_tailed_oracle(t, a.len() - 1)).abs() < 1e-6);
        let swapped = paired_ttest(&b, &a).unwrap();
        prop_assert_eq!(swapped.t, -r.t);
        prop_assert!((swapped.p - r.p).abs() < 1e-12);
    }
}

/// ln Γ(k/2) for a positive integer k, by exact recursion from Γ(1) and Γ(1/2).
fn ln_gamma_half(k: usize) -> f64 {
    let (mut acc, mut x) = if k % 2 == 0 {
        (0.0, 1.0)
    } else {
        (0.5 * std::f64::consts::PI.ln(), 0.5)
    };
    while x < k as f64 / 2.0 - 0.25 {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

/// Lentz continued fraction for the incomplete beta function.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for num in [aa, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + num * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = 1.0 + num / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Two-tailed Student t p-value as the regularized incomplete beta
/// I_{df/(df+t²)}(df/2, 1/2).
fn t_two_tailed_oracle(t: f64, df: usize) -> f64 {
    let (a, b) = (df as f64 / 2.0, 0.5);
    let x = df as f64 / (df as f64 + t * t);
    if x >= 1.0 {
        return 1.0;
    }
    let ln_beta = ln_gamma_half(df) + ln_gamma_half(1) - ln_gamma_half(df + 1);
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

#[test]
fn oracle_reproduces_known_p_values() {
    // Differences (1, 2, 3): t = 2√3 on two degrees of freedom.
    assert!((t_two_tailed_oracle(2.0 * 3f64.sqrt(), 2) - 0.074_179_900).abs() < 1e-8);
    // Cauchy: p = 1 − 2·atan(t)/π.
    let t: f64 = 1.7;
    assert!(
        (t_two_tailed_oracle(t, 1) - (1.0 - 2.0 * t.atan() / std::f64::consts::PI)).abs() < 1e-12
    );
}
