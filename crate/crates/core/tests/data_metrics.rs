mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use common::{randn, rng, ssim_oracle, uniform};
use hit_core::data::attribution::{affine_target, heat_image, integrated_gradients, region_mean_target, Region};
use hit_core::data::dataset::{load_images, load_paired};
use hit_core::data::degrade::{Degradation, DegradationKind};
use hit_core::data::metrics::{mse, psnr, psnr_from_mse, rgb_to_y, ssim, SSIM_K1};
use hit_core::data::ppm::{decode_ppm, encode_ppm, write_ppm};
use hit_core::data::{clamp01, ImagePair};
use hit_core::{HitError, Model64, ModelConfig, Tensor};
use proptest::prelude::*;

#[test]
fn psnr_anchors() {
    let a = uniform(&mut rng(1), &[8, 8, 3]);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let zeros = Tensor::<f64>::zeros(&[4, 4, 3]);
    let ones = Tensor::<f64>::ones(&[4, 4, 3]);
    assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
    assert_eq!(psnr_from_mse(1e-2, 1.0), 20.0);
    let shifted = a.map(|v| v + 0.1);
    assert!((psnr(&a, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&a, &zeros, 1.0).is_err());
}

#[test]
fn ssim_identity_and_constant_images() {
    let a = uniform(&mut rng(2), &[16, 20, 3]);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let c1 = SSIM_K1 * SSIM_K1;
    let s = ssim(&Tensor::<f64>::zeros(&[12, 12, 1]), &Tensor::ones(&[12, 12, 1])).unwrap();
    assert!((s - c1 / (1.0 + c1)).abs() < 1e-15);
}

#[test]
fn ssim_matches_sliding_window_oracle() {
    let mut r = rng(3);
    for (h, w, c) in [(11, 11, 1), (16, 13, 3), (24, 20, 1)] {
        let a = uniform(&mut r, &[h, w, c]);
        let b = clamp01(&a.add(&randn(&mut r, &[h, w, c]).scale(0.1)).unwrap());
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-10);
        assert!((got - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ssim_rejects_small_images() {
    let a = Tensor::<f64>::zeros(&[10, 30, 3]);
    assert!(matches!(ssim(&a, &a), Err(HitError::Domain(_))));
}

#[test]
fn luma_anchors() {
    let px = |r: f64, g: f64, b: f64| Tensor::new(vec![1, 1, 3], vec![r, g, b]).unwrap();
    let y = |t: Tensor<f64>| rgb_to_y(&t).unwrap().data()[0];
    assert!((y(px(0.0, 0.0, 0.0)) - 16.0 / 255.0).abs() < 1e-15);
    assert!((y(px(1.0, 1.0, 1.0)) - 235.0 / 255.0).abs() < 1e-9);
    assert!((y(px(1.0, 0.0, 0.0)) - (65.481 + 16.0) / 255.0).abs() < 1e-15);
    assert_eq!(rgb_to_y(&uniform(&mut rng(0), &[3, 5, 3])).unwrap().shape(), &[3, 5, 1]);
    assert!(matches!(rgb_to_y(&Tensor::<f64>::zeros(&[2, 2, 1])), Err(HitError::Contract(_))));
}

fn noise(sigma: f64, seed: u64) -> Degradation {
    Degradation::new(DegradationKind::GaussianNoise { sigma }, seed)
}

fn digest(t: &Tensor<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in t.data() {
        v.to_le_bytes().hash(&mut h);
    }
    h.finish()
}

#[test]
fn degradation_identities() {
    let clean = uniform(&mut rng(4), &[9, 7, 3]);
    assert_eq!(noise(0.0, 1).apply(&clean).unwrap(), clean);
    let blur = Degradation::new(DegradationKind::BoxBlur { radius: 0 }, 1);
    assert_eq!(blur.apply(&clean).unwrap(), clean);
}

#[test]
fn noise_mean_is_unbiased_before_clamping() {
    let clean = Tensor::<f64>::full(&[64, 64, 3], 0.5);
    let noisy = noise(0.1, 5).apply_unclamped(&clean).unwrap();
    let n = noisy.numel() as f64;
    let mean = noisy.sum() / n;
    assert!((mean - 0.5).abs() < 3.0 * 0.1 / n.sqrt(), "{mean}");
}

#[test]
fn degradations_are_seeded_and_clamped() {
    let clean = uniform(&mut rng(6), &[32, 32, 3]);
    let kinds = [
        DegradationKind::GaussianNoise { sigma: 0.3 },
        DegradationKind::RainStreaks { count: 40, length: 9, angle: 15.0, intensity: 0.6 },
    ];
    for kind in kinds {
        let a = Degradation::new(kind.clone(), 7).apply(&clean).unwrap();
        let b = Degradation::new(kind.clone(), 7).apply(&clean).unwrap();
        let c = Degradation::new(kind, 8).apply(&clean).unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_ne!(digest(&a), digest(&c));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn rain_only_brightens() {
    let clean = uniform(&mut rng(9), &[24, 24, 3]).scale(0.5);
    let rain = Degradation::new(DegradationKind::RainStreaks { count: 30, length: 7, angle: -20.0, intensity: 0.5 }, 3);
    let out = rain.apply(&clean).unwrap();
    assert!(out.data().iter().zip(clean.data()).all(|(o, c)| o >= c));
    assert_ne!(out, clean);
}

#[test]
fn invalid_degradations_are_domain_errors() {
    let clean = Tensor::<f64>::zeros(&[4, 4, 3]);
    assert!(matches!(noise(-0.1, 0).apply(&clean), Err(HitError::Domain(_))));
    assert!(matches!(noise(f64::NAN, 0).apply(&clean), Err(HitError::Domain(_))));
    let rain = Degradation::new(DegradationKind::RainStreaks { count: 1, length: 1, angle: 0.0, intensity: 2.0 }, 0);
    assert!(matches!(rain.apply(&clean), Err(HitError::Domain(_))));
}

#[test]
fn degradation_json_is_tagged() {
    let d: Degradation = serde_json::from_str(r#"{"kind":{"type":"box_blur","radius":2},"seed":4}"#).unwrap();
    assert_eq!(d, Degradation::new(DegradationKind::BoxBlur { radius: 2 }, 4));
    assert!(serde_json::from_str::<Degradation>(r#"{"kind":{"type":"box_blur","radius":2,"x":1},"seed":4}"#).is_err());
}

#[test]
fn ppm_roundtrip_is_bit_exact() {
    let mut r = rng(10);
    let img = Tensor::<f64>::from_fn(&[5, 7, 3], |_| (rand::Rng::random_range(&mut r, 0..=255u8)) as f64 / 255.0);
    let bytes = encode_ppm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
    let back = decode_ppm::<f64>(&bytes).unwrap();
    assert_eq!(back, img);
    assert_eq!(encode_ppm(&back).unwrap(), bytes);
}

#[test]
fn ppm_header_comments_and_errors() {
    let mut bytes = b"P6 # comment\n2 1\n# another\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 51, 255, 255, 0, 102]);
    let img = decode_ppm::<f64>(&bytes).unwrap();
    assert_eq!(img.data(), &[0.0, 0.2, 1.0, 1.0, 0.0, 0.4]);
    assert!(matches!(decode_ppm::<f64>(&bytes[..bytes.len() - 1]), Err(HitError::Format(_))));
    assert!(matches!(decode_ppm::<f64>(b"P3\n1 1\n255\n000"), Err(HitError::Format(_))));
    assert!(matches!(decode_ppm::<f64>(b"P6\n1 1\n65535\n000000"), Err(HitError::Format(_))));
}

#[test]
fn paired_dataset_loads_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    for side in ["degraded", "clean"] {
        std::fs::create_dir(dir.path().join(side)).unwrap();
    }
    for (i, name) in ["b.ppm", "a.ppm"].iter().enumerate() {
        let v = i as f64 / 255.0;
        write_ppm(&dir.path().join("degraded").join(name), &Tensor::<f64>::full(&[2, 3, 3], v)).unwrap();
        write_ppm(&dir.path().join("clean").join(name), &Tensor::<f64>::full(&[2, 3, 3], 1.0 - v)).unwrap();
    }
    std::fs::write(dir.path().join("clean").join("notes.txt"), "ignored").unwrap();
    let pairs = load_paired::<f64>(dir.path()).unwrap();
    let names: Vec<&str> = pairs.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["a.ppm", "b.ppm"]);
    assert_eq!(pairs[0].1.degraded.data()[0], 1.0 / 255.0);
    assert_eq!(load_images::<f64>(&dir.path().join("clean")).unwrap().len(), 2);

    write_ppm(&dir.path().join("degraded").join("c.ppm"), &Tensor::<f64>::zeros(&[2, 3, 3])).unwrap();
    write_ppm(&dir.path().join("clean").join("d.ppm"), &Tensor::<f64>::zeros(&[2, 3, 3])).unwrap();
    match load_paired::<f64>(dir.path()) {
        Err(HitError::Unpaired(o)) => assert_eq!(o, ["degraded/c.ppm", "clean/d.ppm"]),
        other => panic!("expected orphans, got {other:?}"),
    }
}

#[test]
fn pair_extents_must_match() {
    let err = ImagePair::new(Tensor::<f64>::zeros(&[2, 2, 3]), Tensor::zeros(&[2, 3, 3])).unwrap_err();
    assert!(matches!(err, HitError::Dimension { .. }));
}

#[test]
fn attribution_of_a_zero_path_is_zero() {
    let x = uniform(&mut rng(11), &[4, 4, 3]);
    let a = integrated_gradients(affine_target(randn(&mut rng(12), &[4, 4, 3]), 0.3), &x, &x, 8).unwrap();
    assert!(a.values.data().iter().all(|&v| v == 0.0));
    assert_eq!(a.completeness_error(), 0.0);
}

#[test]
fn affine_attribution_is_exact_for_any_step_count() {
    let mut r = rng(13);
    let coef = randn(&mut r, &[5, 6, 3]);
    let x = uniform(&mut r, &[5, 6, 3]);
    let x0 = uniform(&mut r, &[5, 6, 3]);
    for steps in [1, 2, 7, 64] {
        let a = integrated_gradients(affine_target(coef.clone(), -1.5), &x, &x0, steps).unwrap();
        let want = coef.mul(&x.sub(&x0).unwrap()).unwrap();
        assert!(a.values.max_abs_diff(&want) < 1e-14);
        assert!(a.completeness_error() < 1e-12);
    }
}

#[test]
fn attribution_argument_errors() {
    let x = Tensor::<f64>::zeros(&[2, 2, 3]);
    let t = || affine_target(Tensor::<f64>::ones(&[2, 2, 3]), 0.0);
    assert!(matches!(integrated_gradients(t(), &x, &x, 0), Err(HitError::Domain(_))));
    let other = Tensor::<f64>::zeros(&[2, 3, 3]);
    assert!(matches!(integrated_gradients(t(), &x, &other, 4), Err(HitError::Dimension { .. })));
}

/// With the zero-initialised output convolution the model is the identity, so
/// the region-mean target is affine and the attribution is the region mask
/// times the input.
#[test]
fn identity_model_attributes_the_region_mean() {
    let m = Model64::build(&ModelConfig::hit_micro(), 0).unwrap();
    let region = Region { y: 2, x: 3, h: 4, w: 5 };
    let x = uniform(&mut rng(14), &[12, 10, 3]);
    let black = Tensor::zeros(&[12, 10, 3]);
    let a = integrated_gradients(region_mean_target(&m, region), &x, &black, 3).unwrap();
    let want = region.mean_mask::<f64>(12, 10, 3).mul(&x).unwrap();
    assert!(a.values.max_abs_diff(&want) < 1e-14);
    assert!(a.completeness_error() < 1e-12);

    let outside = Region { y: 10, x: 0, h: 4, w: 4 };
    assert!(matches!(
        integrated_gradients(region_mean_target(&m, outside), &x, &black, 1),
        Err(HitError::Domain(_))
    ));
}

#[test]
fn heat_image_is_normalised_magnitude() {
    let attr = Tensor::new(vec![1, 2, 3], vec![1.0, -1.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
    let heat = heat_image(&attr).unwrap();
    assert_eq!(heat.data(), &[1.0, 1.0, 1.0, 0.25, 0.25, 0.25]);
    let zero = heat_image(&Tensor::<f64>::zeros(&[2, 2, 3])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn psnr_is_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[4, 4, 3]);
        let b = uniform(&mut r, &[4, 4, 3]);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }

    #[test]
    fn psnr_falls_as_mse_grows(m in 1e-12f64..10.0, f in 1.0001f64..100.0) {
        prop_assert!(psnr_from_mse(m, 1.0) > psnr_from_mse(m * f, 1.0));
    }
}
