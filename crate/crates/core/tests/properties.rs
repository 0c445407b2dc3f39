use proptest::prelude::*;

use sandformer::autograd::Tape;
use sandformer::dcp::{dark_channel, dehaze_dcp, DcpConfig};
use sandformer::metrics::{psnr, ssim};
use sandformer::synth::{degrade, depth_map, synthesize_sample, transmission_map, DepthMode, Preset, Severity};
use sandformer::{ImageBuffer, Plane, Tensor};

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.0f32..=1.0, h * w * 3).prop_map(move |d| ImageBuffer::new(h, w, d).unwrap())
}

fn sized_image(max: usize) -> impl Strategy<Value = ImageBuffer> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| image(h, w))
}

fn airlight() -> impl Strategy<Value = [f32; 3]> {
    [0.3f32..1.0, 0.3f32..1.0, 0.3f32..1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(
        data in prop::collection::vec(-30.0f64..30.0, 24),
        axis in 0usize..3,
    ) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::new(&[2, 3, 4], data).unwrap()).softmax(axis).unwrap();
        let v = y.value();
        let shape = [2usize, 3, 4];
        let stride: usize = shape[axis + 1..].iter().product();
        for base in 0..24 {
            if (base / stride) % shape[axis] != 0 {
                continue;
            }
            let s: f64 = (0..shape[axis]).map(|k| v.data()[base + k * stride]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn layer_norm_standardizes_each_location(
        data in prop::collection::vec(-5.0f64..5.0, 6 * 9),
        shift in -100.0f64..100.0,
    ) {
        let tape = Tape::new();
        let x = Tensor::new(&[6, 3, 3], data.iter().map(|v| v + shift).collect()).unwrap();
        let y = tape
            .constant(x)
            .layer_norm(tape.constant(Tensor::ones(&[6])), tape.constant(Tensor::zeros(&[6])), 1e-12)
            .unwrap();
        let v = y.value();
        for loc in 0..9 {
            let col: Vec<f64> = (0..6).map(|c| v.data()[c * 9 + loc]).collect();
            let raw: Vec<f64> = (0..6).map(|c| data[c * 9 + loc]).collect();
            let raw_mean = raw.iter().sum::<f64>() / 6.0;
            let raw_var = raw.iter().map(|r| (r - raw_mean).powi(2)).sum::<f64>() / 6.0;
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-9);
            if raw_var > 1e-6 {
                prop_assert!((var - 1.0).abs() < 1e-6, "variance {}", var);
            }
        }
    }

    #[test]
    fn gelu_odd_part_is_identity(x in -12.0f64..12.0) {
        // x·Φ(x) − (−x)·Φ(−x) = x for any symmetric CDF Φ.
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(&[2], vec![x, -x]).unwrap()).gelu().unwrap().value();
        prop_assert!((v.data()[0] - v.data()[1] - x).abs() < 1e-12);
        prop_assert!(v.data()[0] >= x.min(0.0) - 0.2);
    }

    #[test]
    fn zero_beta_is_bitwise_identity(img in sized_image(12), a in airlight(), near in 0.1f32..2.0, span in 0.0f32..5.0) {
        let depth = depth_map(&DepthMode::VerticalRamp { near, far: near + span }, img.height(), img.width()).unwrap();
        let t = transmission_map(&depth, 0.0).unwrap();
        prop_assert!(t.data().iter().all(|&v| v == 1.0));
        let out = degrade(&img, a, &t).unwrap();
        prop_assert_eq!(out.data(), img.data());
    }

    #[test]
    fn more_haze_moves_every_pixel_toward_airlight(
        img in sized_image(10),
        a in airlight(),
        d in 0.05f32..4.0,
        b1 in 0.0f32..3.0,
        db in 0.0f32..3.0,
    ) {
        let depth = Plane::filled(img.height(), img.width(), d);
        let lo = degrade(&img, a, &transmission_map(&depth, b1).unwrap()).unwrap();
        let hi = degrade(&img, a, &transmission_map(&depth, b1 + db).unwrap()).unwrap();
        for i in 0..img.data().len() {
            let c = i % 3;
            prop_assert!((hi.data()[i] - a[c]).abs() <= (lo.data()[i] - a[c]).abs());
            prop_assert!((0.0..=1.0).contains(&hi.data()[i]));
        }
    }

    #[test]
    fn transmission_is_exp_of_optical_depth(d in 0.0f32..10.0, beta in 0.0f32..5.0) {
        let t = transmission_map(&Plane::filled(2, 2, d), beta).unwrap();
        let oracle = (-(beta as f64) * d as f64).exp();
        prop_assert!((t.get(0, 0) as f64 - oracle).abs() <= 1e-6 * oracle.max(1e-30) + 1e-12);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(a in image(12, 14), b in image(12, 14)) {
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12 && s1 >= -1.0 - 1e-12);
    }

    #[test]
    fn psnr_falls_as_error_grows(a in image(6, 6), k in 1.5f32..4.0) {
        let small = a.map(|v| (v + 0.01).min(1.0));
        let large = a.map(|v| (v + 0.01 * k).min(1.0));
        let (p_small, p_large) = (psnr(&a, &small, 1.0).unwrap(), psnr(&a, &large, 1.0).unwrap());
        if p_small.is_finite() {
            prop_assert!(p_large <= p_small);
        }
        prop_assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn dark_channel_is_bounded_by_own_pixel(img in sized_image(9), patch in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let dark = dark_channel(&img, patch).unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let own = img.pixel(y, x).into_iter().fold(f32::INFINITY, f32::min);
                prop_assert!(dark.get(y, x) <= own);
            }
        }
        if patch == 1 {
            let raw: Vec<f32> = (0..img.height() * img.width())
                .map(|i| img.pixel(i / img.width(), i % img.width()).into_iter().fold(f32::INFINITY, f32::min))
                .collect();
            prop_assert_eq!(dark.data(), raw.as_slice());
        }
    }

    #[test]
    fn dcp_output_stays_in_range(img in sized_image(16)) {
        let out = dehaze_dcp(&img, &DcpConfig { patch: 3, ..Default::default() }).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn sandstorm_transmits_less_than_dust() {
    let clean = ImageBuffer::filled(8, 8, [0.5; 3]);
    let mean_t = |sev: Severity| {
        (0..40)
            .map(|seed| {
                synthesize_sample(&clean, sev, &Preset::default_for(sev), &DepthMode::default(), seed)
                    .unwrap()
                    .transmission
                    .mean()
            })
            .sum::<f64>()
            / 40.0
    };
    let (dust, sand, storm) = (
        mean_t(Severity::Dust),
        mean_t(Severity::Sand),
        mean_t(Severity::Sandstorm),
    );
    assert!(
        dust > sand && sand > storm,
        "dust {dust}, sand {sand}, sandstorm {storm}"
    );
}

#[test]
fn same_seed_same_sample() {
    let clean = ImageBuffer::from_fn(9, 7, |y, x, c| ((y * 7 + x + c) % 5) as f32 / 5.0);
    let p = Preset::default_for(Severity::Sand);
    let a = synthesize_sample(&clean, Severity::Sand, &p, &DepthMode::default(), 77).unwrap();
    let b = synthesize_sample(&clean, Severity::Sand, &p, &DepthMode::default(), 77).unwrap();
    let c = synthesize_sample(&clean, Severity::Sand, &p, &DepthMode::default(), 78).unwrap();
    assert_eq!(a.degraded.data(), b.degraded.data());
    assert_ne!(a.degraded.data(), c.degraded.data());
}
