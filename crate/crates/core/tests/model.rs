mod common;

use common::{rng, uniform};
use hit_core::model::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use hit_core::nn::{Bound, Conv, Init, ParamStore};
use hit_core::tensor::Conv2dSpec;
use hit_core::training::{charbonnier_var, LossReduction};
use hit_core::{HitError, Model, Model64, ModelConfig, Tape, Tensor};
use rand::Rng;

fn micro() -> Model64 {
    Model64::build(&ModelConfig::hit_micro(), 1).unwrap()
}

#[test]
fn named_variants_echo_their_settings() {
    let t = ModelConfig::hit_t();
    assert_eq!((t.base_channels, t.window_size, t.levels), (16, 8, 4));
    assert_eq!(t.block_counts, vec![2, 2, 2, 2]);
    assert_eq!(t.head_counts, vec![1, 2, 4, 8]);
    assert!(!t.encoder_attention);
    let b = ModelConfig::hit_b();
    assert_eq!((b.base_channels, b.window_size), (32, 8));
    assert_eq!(b.block_counts, vec![1, 2, 8, 8]);
    let m = ModelConfig::hit_micro();
    assert_eq!((m.base_channels, m.window_size), (8, 4));
    assert_eq!(m.block_counts, vec![1, 1, 1, 1]);

    assert_eq!(ModelConfig::variant("HIT-T").unwrap(), t);
    assert_eq!(ModelConfig::variant("b").unwrap(), b);
    assert_eq!(ModelConfig::variant("hit_micro").unwrap(), m);
    assert!(matches!(ModelConfig::variant("hit-xl"), Err(HitError::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::hit_micro();
    c.block_counts.pop();
    assert!(matches!(Model64::build(&c, 0), Err(HitError::Config(_))));
    let mut c = ModelConfig::hit_micro();
    c.head_counts[1] = 3;
    assert!(matches!(Model64::build(&c, 0), Err(HitError::Config(_))));
    let mut c = ModelConfig::hit_micro();
    c.levels = 0;
    c.block_counts.clear();
    c.head_counts.clear();
    assert!(matches!(Model64::build(&c, 0), Err(HitError::Config(_))));
    let mut c = ModelConfig::hit_micro();
    c.window_size = 0;
    assert!(matches!(Model64::build(&c, 0), Err(HitError::Config(_))));
}

#[test]
fn construction_is_deterministic_in_the_seed() {
    let a = micro();
    let b = micro();
    assert_eq!(a.params().flatten(), b.params().flatten());
    let c = Model64::build(&ModelConfig::hit_micro(), 2).unwrap();
    assert_ne!(a.params().flatten(), c.params().flatten());
}

#[test]
fn one_bim_per_level_boundary() {
    for cfg in [ModelConfig::hit_t(), ModelConfig::hit_micro()] {
        let m = Model64::build(&cfg, 0).unwrap();
        assert_eq!(m.bim_count(), cfg.levels - 1);
        assert_eq!(m.decoder.first().unwrap().level, cfg.levels - 2);
    }
}

#[test]
fn single_pointwise_conv_count() {
    for (c, k) in [(1, 1), (3, 5), (16, 8)] {
        let mut store = ParamStore::<f64>::new();
        Conv::new(&mut store, &mut Init::new(rng(0)), "pw", 1, c, k, Conv2dSpec::same(1), true);
        assert_eq!(store.scalar_count(), k * c + k);
    }
}

/// Layer-by-layer count for a config, written from the architecture description.
fn hand_tally(cfg: &ModelConfig) -> usize {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let dw = |c: usize| 9 * c + c;
    let linear = |i: usize, o: usize, bias: bool| i * o + if bias { o } else { 0 };
    let norm = |c: usize| 2 * c;
    let ffn = |c: usize| {
        let h = c * cfg.ffn_expand;
        linear(c, h, true) + dw(h) + linear(h, c, true)
    };
    let side = 2 * cfg.window_size - 1;
    let attn = |c: usize, heads: usize| 4 * c * c + c + side * side * heads + 1;
    let block = |c: usize, heads: usize, with_attn: bool| {
        norm(c) + ffn(c) + if with_attn { norm(c) + attn(c, heads) } else { 0 }
    };

    let c0 = cfg.base_channels;
    let mut total = conv(3, 3, c0);
    let mut cin = 3;
    for s in &cfg.extractor.stages {
        total += conv(3, cin, s.out_channels);
        cin = s.out_channels;
    }
    for l in 0..cfg.levels {
        let c = c0 << l;
        total += cfg.block_counts[l] * block(c, cfg.head_counts[l], cfg.encoder_attention);
        if l + 1 < cfg.levels {
            total += conv(4, c, 2 * c);
            let up = 2 * c * 4 * c + c;
            let bim = 3 * linear(c, c, false) + 3 * linear(2 * c, 2 * c, false) + dw(c) + dw(2 * c) + 2 + linear(6 * c, c, true);
            total += up + bim + linear(2 * c, c, true) + cfg.block_counts[l] * block(c, cfg.head_counts[l], true);
        }
    }
    total + conv(3, c0, 3)
}

#[test]
fn parameter_count_matches_hand_tally() {
    for cfg in [ModelConfig::hit_micro(), ModelConfig::hit_t(), ModelConfig::hit_b()] {
        let m = Model64::build(&cfg, 0).unwrap();
        assert_eq!(m.count_params(), hand_tally(&cfg), "{}", cfg.name);
    }
    let mut with_attn = ModelConfig::hit_micro();
    with_attn.encoder_attention = true;
    assert_eq!(Model64::build(&with_attn, 0).unwrap().count_params(), hand_tally(&with_attn));
}

#[test]
fn parameter_count_grows_with_width() {
    let mut cfg = ModelConfig::hit_micro();
    let mut last = 0;
    for c in [8, 16, 32] {
        cfg.base_channels = c;
        let n = Model64::build(&cfg, 0).unwrap().count_params();
        assert!(n > last);
        last = n;
    }
}

#[test]
fn zero_output_conv_returns_the_input() {
    for cfg in [ModelConfig::hit_micro(), ModelConfig::hit_t()] {
        let m = Model64::build(&cfg, 3).unwrap();
        let img = uniform(&mut rng(4), &[24, 40, 3]);
        let out = m.forward(&img).unwrap();
        assert_eq!(out.restored, img);
        assert!(out.residual.data().iter().all(|&v| v == 0.0));
    }
}

fn randomize_output_conv(m: &mut Model64, seed: u64) {
    let mut r = rng(seed);
    let ids = [m.out_conv.w, m.out_conv.b.unwrap()];
    for id in ids {
        let t = m.params_mut().get_mut(id);
        for v in t.data_mut() {
            *v = r.random_range(-0.1..0.1);
        }
    }
}

#[test]
fn output_extents_follow_input_for_any_size() {
    let mut m = micro();
    randomize_output_conv(&mut m, 5);
    for (h, w) in [(37, 37), (64, 64), (100, 100), (37, 100), (1, 1)] {
        let img = uniform(&mut rng(h as u64), &[h, w, 3]);
        let out = m.forward(&img).unwrap();
        assert_eq!(out.restored.shape(), &[h, w, 3]);
        assert!(out.restored.is_finite());
        // restored is degraded + residual, element by element
        let sum = img.add(&out.residual).unwrap();
        assert_eq!(out.restored, sum);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut m = micro();
    randomize_output_conv(&mut m, 6);
    let img = uniform(&mut rng(7), &[32, 32, 3]);
    assert_eq!(m.forward(&img).unwrap(), m.forward(&img).unwrap());
}

#[test]
fn non_rgb_input_is_a_contract_error() {
    let err = micro().forward(&Tensor::zeros(&[32, 32, 4])).unwrap_err();
    assert!(matches!(err, HitError::Contract(_)));
}

#[test]
fn external_features_must_match_the_image() {
    let m = micro();
    let tape = Tape::new();
    let b = Bound::new(&tape, m.params(), false);
    let img = tape.constant(Tensor::full(&[32, 32, 3], 0.5));
    let good = tape.constant(Tensor::zeros(&[32, 32, 8]));
    assert!(m.forward_var(&b, &img, Some(&good)).is_ok());
    let bad = tape.constant(Tensor::zeros(&[32, 32, 4]));
    assert!(matches!(m.forward_var(&b, &img, Some(&bad)), Err(HitError::Alignment(_))));
}

/// Charbonnier gradient against central differences for ten random scalars.
#[test]
fn loss_gradient_spot_checks() {
    let mut m = micro();
    randomize_output_conv(&mut m, 8);
    let mut r = rng(9);
    let img = uniform(&mut r, &[32, 32, 3]);
    let clean = uniform(&mut r, &[32, 32, 3]);

    let loss_of = |model: &Model64| -> f64 {
        let tape = Tape::new();
        let b = Bound::new(&tape, model.params(), false);
        let (pred, _) = model.forward_var(&b, &tape.constant(img.clone()), None).unwrap();
        let l = charbonnier_var(&pred, &tape.constant(clean.clone()), 1e-3, LossReduction::GlobalNorm).unwrap();
        l.value().item()
    };
    let grads = {
        let tape = Tape::new();
        let b = Bound::new(&tape, m.params(), true);
        let (pred, _) = m.forward_var(&b, &tape.constant(img.clone()), None).unwrap();
        let l = charbonnier_var(&pred, &tape.constant(clean.clone()), 1e-3, LossReduction::GlobalNorm).unwrap();
        b.grads(&tape.backward(&l).unwrap())
    };

    let names: Vec<String> = m.params().iter().map(|(n, _)| n.to_owned()).collect();
    for _ in 0..10 {
        let t = r.random_range(0..names.len());
        let id = m.params().find(&names[t]).unwrap();
        let k = r.random_range(0..m.params().get(id).numel());
        let analytic = grads[t].data()[k];
        let at = |model: &mut Model64, delta: f64| {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + delta;
            let l = loss_of(model);
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            l
        };
        let h = 1e-4;
        let d = |model: &mut Model64, h: f64| (at(model, h) - at(model, -h)) / (2.0 * h);
        let coarse = d(&mut m, h);
        let fine = d(&mut m, h / 2.0);
        let numeric = (4.0 * fine - coarse) / 3.0;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(rel < 1e-5, "{} [{k}]: analytic {analytic} numeric {numeric}", names[t]);
    }
}

fn micro_trained_like() -> Model64 {
    let mut m = micro();
    randomize_output_conv(&mut m, 10);
    m
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let m = micro_trained_like();
    let bytes = m.to_checkpoint_bytes();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    let back = Model64::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params().flatten(), m.params().flatten());
    assert_eq!(back.to_checkpoint_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hitc");
    m.save(&path).unwrap();
    let loaded = Model64::load(&path).unwrap();
    let img = uniform(&mut rng(11), &[20, 20, 3]);
    assert_eq!(loaded.forward(&img).unwrap(), m.forward(&img).unwrap());

    // f32 models store through the same f64 payload
    let as32 = Model::<f32>::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(as32.count_params(), m.count_params());
}

fn replace(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
    assert_eq!(from.len(), to.len());
    let pos = bytes.windows(from.len()).position(|w| w == from.as_bytes()).unwrap();
    let mut out = bytes.to_vec();
    out[pos..pos + to.len()].copy_from_slice(to.as_bytes());
    out
}

#[test]
fn checkpoint_mismatches_are_reported() {
    let bytes = micro().to_checkpoint_bytes();
    let is_ckpt = |b: &[u8]| matches!(Model64::from_checkpoint_bytes(b), Err(HitError::Checkpoint(_)));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(is_ckpt(&bad), "magic");

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(is_ckpt(&bad), "version");

    assert!(is_ckpt(&bytes[..bytes.len() - 3]), "truncated");

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(is_ckpt(&bad), "trailing");

    assert!(is_ckpt(&replace(&bytes, "in_conv.w", "in_cunv.w")), "parameter name");
    assert!(is_ckpt(&replace(&bytes, "\"base_channels\":8", "\"base_channels\":9")), "shape");
    assert!(is_ckpt(&replace(&bytes, "\"window_size\":4", "\"windows_ize\":4")), "config json");
}

#[test]
fn canonical_config_json_roundtrips() {
    let cfg = ModelConfig::hit_b();
    let json = cfg.to_canonical_json();
    let back: ModelConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_canonical_json(), json);
}

#[test]
fn pad_multiple_covers_windows_and_levels() {
    assert_eq!(ModelConfig::hit_t().pad_multiple(), 64);
    assert_eq!(ModelConfig::hit_micro().pad_multiple(), 32);
}
