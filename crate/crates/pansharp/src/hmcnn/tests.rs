use super::*;
use crate::raster::{Raster, RANGE_11BIT, RGBN};
use crate::tensor::{backward, Tape};

fn test_config() -> HmcnnConfig {
    HmcnnConfig {
        n_res_blocks: 1,
        feat_channels: 4,
        attention_hidden: 2,
        ..HmcnnConfig::default()
    }
}

fn pseudo_random(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            lo + (z >> 11) as f64 / (1u64 << 53) as f64 * (hi - lo)
        })
        .collect()
}

fn plain(shape: Shape, seed: u64) -> Tensor {
    Tensor::from_vec(shape, pseudo_random(shape.numel(), seed, 0.0, 1.0)).unwrap()
}

#[test]
fn constant_pan_zeroes_the_hmb_output() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 3).unwrap();
    let model = weights.bind(&cfg, None, false).unwrap();
    let band = plain(Shape::new(1, 1, 8, 8), 1);
    let pan = Tensor::constant(Shape::new(1, 1, 8, 8), 0.7).unwrap();
    let out = hmb_forward(&band, &pan, &model.stage1[0], 2).unwrap();
    assert!(out.values().iter().all(|&v| v == 0.0));
}

#[test]
fn forced_zero_attention_passes_the_highpass_through() {
    let cfg = test_config();
    let mut weights = ModelWeights::init(&cfg, 4).unwrap();
    // drive the attention logit to -inf territory so sigmoid is exactly 0
    for name in ["stage1.hmb.sa1.weight", "stage1.hmb.sa1.bias"] {
        let p = weights.get_mut(name).unwrap();
        for v in p.data.iter_mut() {
            *v = 0.0;
        }
    }
    weights.get_mut("stage1.hmb.sa1.bias").unwrap().data[0] = -1e6;
    let model = weights.bind(&cfg, None, false).unwrap();
    let band = plain(Shape::new(1, 1, 8, 8), 5);
    let pan = plain(Shape::new(1, 1, 8, 8), 6);
    let out = hmb_forward(&band, &pan, &model.stage1[0], 2).unwrap();
    let p_hat = highpass_tensor(&pan, 2).unwrap();
    assert_eq!(out.values(), p_hat.values());
}

#[test]
fn attention_bounds_the_injection_between_one_and_two_highpasses() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 7).unwrap();
    let model = weights.bind(&cfg, None, false).unwrap();
    let band = plain(Shape::new(1, 1, 16, 16), 8);
    let pan = plain(Shape::new(1, 1, 16, 16), 9);
    let out = hmb_forward(&band, &pan, &model.stage2[0], 2).unwrap();
    let p_hat = highpass_tensor(&pan, 2).unwrap();
    for (x, p) in out.values().iter().zip(p_hat.values()) {
        assert!(x.abs() >= p.abs() - 1e-15 && x.abs() <= 2.0 * p.abs() + 1e-15);
        assert!(x.signum() * p.signum() >= 0.0);
    }
}

#[test]
fn shared_weights_make_identical_bands_identical() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 11).unwrap();
    let model = weights.bind(&cfg, None, false).unwrap();
    let one_band = pseudo_random(64, 12, 0.0, 1.0);
    let mut all = Vec::new();
    for _ in 0..BANDS {
        all.extend_from_slice(&one_band);
    }
    let features = Tensor::from_vec(Shape::new(1, 4, 8, 8), all).unwrap();
    let pan = plain(Shape::new(1, 1, 8, 8), 13);
    let fused = hmb_fuse(&features, &pan, &model.stage1).unwrap();
    let first = fused.slice_channels(0, 1).unwrap();
    for b in 1..BANDS {
        assert_eq!(fused.slice_channels(b, 1).unwrap().values(), first.values());
    }
}

#[test]
fn hmb_fuse_rejects_wrong_channel_count() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 14).unwrap();
    let model = weights.bind(&cfg, None, false).unwrap();
    let features = plain(Shape::new(1, 3, 8, 8), 15);
    let pan = plain(Shape::new(1, 1, 8, 8), 16);
    assert!(matches!(
        hmb_fuse(&features, &pan, &model.stage1),
        Err(Error::Config(_))
    ));
}

#[test]
fn forward_geometry_and_additive_decomposition() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 17).unwrap();
    let model = weights.bind(&cfg, None, false).unwrap();
    let lrms = plain(Shape::new(1, 4, 8, 8), 18);
    let pan = plain(Shape::new(1, 1, 32, 32), 19);
    let out = forward(&model, &lrms, &pan).unwrap();
    assert_eq!(out.fused_x2.shape(), Shape::new(1, 4, 16, 16));
    assert_eq!(out.fused_x4.shape(), Shape::new(1, 4, 32, 32));

    // the fusion is additive: fused = features + hmb, bit for bit
    for i in 0..out.fused_x4.values().len() {
        assert_eq!(
            out.fused_x4.values()[i],
            out.features_x4.values()[i] + out.hmb_x4.values()[i]
        );
    }
    for i in 0..out.fused_x2.values().len() {
        assert_eq!(
            out.fused_x2.values()[i],
            out.features_x2.values()[i] + out.hmb_x2.values()[i]
        );
    }
}

#[test]
fn constant_pan_leaves_only_the_feature_path() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 20).unwrap();
    let model = weights.bind(&cfg, None, false).unwrap();
    let lrms = plain(Shape::new(1, 4, 8, 8), 21);
    let pan = Tensor::constant(Shape::new(1, 1, 32, 32), 0.4).unwrap();
    let out = forward(&model, &lrms, &pan).unwrap();
    assert_eq!(out.fused_x4.values(), out.features_x4.values());
    assert_eq!(out.fused_x2.values(), out.features_x2.values());
}

#[test]
fn forward_rejects_bad_geometry() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 22).unwrap();
    let model = weights.bind(&cfg, None, false).unwrap();
    let lrms = plain(Shape::new(1, 4, 8, 8), 23);
    let pan = plain(Shape::new(1, 1, 16, 16), 24);
    assert!(matches!(forward(&model, &lrms, &pan), Err(Error::Shape { .. })));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 25).unwrap();
    let dead = check_gradient_flow(&weights, &cfg, 26).unwrap();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn weight_roundtrip_is_bitwise_and_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.hmw");
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 27).unwrap();
    weights.save(&path).unwrap();
    let loaded = ModelWeights::load(&path).unwrap();
    assert_eq!(loaded, weights);

    let lrms = plain(Shape::new(1, 4, 8, 8), 28);
    let pan = plain(Shape::new(1, 1, 32, 32), 29);
    let a = forward(&weights.bind(&cfg, None, false).unwrap(), &lrms, &pan).unwrap();
    let b = forward(&loaded.bind(&cfg, None, false).unwrap(), &lrms, &pan).unwrap();
    assert_eq!(a.fused_x4.values(), b.fused_x4.values());
}

#[test]
fn bind_names_missing_parameters() {
    let cfg = test_config();
    let mut weights = ModelWeights::init(&cfg, 30).unwrap();
    weights.remove("f2.tail.weight").unwrap();
    match weights.bind(&cfg, None, false) {
        Err(Error::Weights(msg)) => assert!(msg.contains("f2.tail.weight")),
        other => panic!("expected weights error, got {:?}", other.is_ok()),
    }
}

fn synthetic_pair(seed: u64, lw: usize, lh: usize) -> (Raster, Raster) {
    let lrms = Raster::new(
        lw,
        lh,
        RGBN.to_vec(),
        pseudo_random(lw * lh * 4, seed, 100.0, 1900.0),
        RANGE_11BIT,
    )
    .unwrap();
    let pan = Raster::new(
        4 * lw,
        4 * lh,
        vec![BandRole::Pan],
        pseudo_random(16 * lw * lh, seed ^ 99, 100.0, 1900.0),
        RANGE_11BIT,
    )
    .unwrap();
    (lrms, pan)
}

#[test]
fn predict_geometry_and_determinism() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 31).unwrap();
    let (lrms, pan) = synthetic_pair(32, 16, 16);
    let out = predict(&lrms, &pan, &weights, &cfg).unwrap();
    assert_eq!((out.width(), out.height(), out.bands()), (64, 64, 4));
    assert_eq!(out.band_roles(), lrms.band_roles());
    let again = predict(&lrms, &pan, &weights, &cfg).unwrap();
    assert_eq!(out.data(), again.data());
}

#[test]
fn tiled_prediction_matches_untiled_away_from_borders() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 33).unwrap();
    let (lrms, pan) = synthetic_pair(34, 64, 64); // 256x256 pan

    let whole = predict(&lrms, &pan, &weights, &cfg).unwrap();
    let tiled_cfg = HmcnnConfig { tile: 128, ..cfg };
    let tiled = predict(&lrms, &pan, &weights, &tiled_cfg).unwrap();

    let span = lrms.range_span();
    let margin = TILE_OVERLAP;
    for b in 0..4 {
        for y in margin..256 - margin {
            for x in margin..256 - margin {
                let a = whole.get(b, x, y);
                let t = tiled.get(b, x, y);
                assert!(
                    (a - t).abs() <= 1e-6 * span,
                    "band {b} ({x},{y}): {a} vs {t}"
                );
            }
        }
    }
}

#[test]
fn predict_with_constant_pan_ignores_the_pan_level() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 35).unwrap();
    let (lrms, _) = synthetic_pair(36, 8, 8);
    let pan_a = Raster::filled(32, 32, vec![BandRole::Pan], 400.0, RANGE_11BIT).unwrap();
    let pan_b = Raster::filled(32, 32, vec![BandRole::Pan], 1600.0, RANGE_11BIT).unwrap();
    let a = predict(&lrms, &pan_a, &weights, &cfg).unwrap();
    let b = predict(&lrms, &pan_b, &weights, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn hmb_parameter_gradients_match_finite_differences() {
    let cfg = test_config();
    let weights = ModelWeights::init(&cfg, 37).unwrap();
    let band_v = pseudo_random(64, 38, 0.0, 1.0);
    let pan_v = pseudo_random(64, 39, 0.0, 1.0);
    let shape = Shape::new(1, 1, 8, 8);

    let eval = |w: &ModelWeights| -> f64 {
        let model = w.bind(&cfg, None, false).unwrap();
        let band = Tensor::from_vec(shape, band_v.clone()).unwrap();
        let pan = Tensor::from_vec(shape, pan_v.clone()).unwrap();
        let out = hmb_forward(&band, &pan, &model.stage1[0], 2).unwrap();
        out.mul(&out).unwrap().mean_all().unwrap().item()
    };

    // analytic gradients
    let tape = Tape::new();
    let model = weights.bind(&cfg, Some(&tape), true).unwrap();
    let band = Tensor::from_vec(shape, band_v.clone()).unwrap();
    let pan = Tensor::from_vec(shape, pan_v.clone()).unwrap();
    let out = hmb_forward(&band, &pan, &model.stage1[0], 2).unwrap();
    let loss = out.mul(&out).unwrap().mean_all().unwrap();
    backward(&loss).unwrap();

    let eps = 1e-5;
    let mut checked = 0;
    for name in weights.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        if !name.starts_with("stage1.hmb.") {
            continue;
        }
        let analytic = model.tensor(&name).unwrap().grad().unwrap();
        let len = weights.get(&name).unwrap().data.len();
        for i in 0..len {
            let mut w = weights.clone();
            w.get_mut(&name).unwrap().data[i] += eps;
            let fp = eval(&w);
            let mut w = weights.clone();
            w.get_mut(&name).unwrap().data[i] -= eps;
            let fm = eval(&w);
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{i}]: {} vs {numeric}", analytic[i]);
            checked += 1;
        }
    }
    assert!(checked > 100, "expected to sweep the whole hmb, got {checked}");
}
