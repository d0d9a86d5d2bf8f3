use evplug::dataset::{generate_scene, Dataset, EventConfig, Split};
use evplug::efformer::{EFormerConfig, PlugModule};
use evplug::encoders::{BaseModel, EncoderConfig, ImageModel, TaskKind};
use evplug::evalharness::{ablate, eval_anchors, evaluate, Condition, EvalConfig, EvalMode};
use evplug::scenegen::SceneSampler;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> (BaseModel, PlugModule<f32>, Dataset) {
    let sampler = SceneSampler {
        height: 32,
        width: 32,
        duration_s: 0.25,
        radius: [4.0, 6.0],
        ..Default::default()
    };
    // 1 and 11 fall in the test split
    let scenes = [1u64, 11, 2]
        .iter()
        .map(|s| generate_scene(&sampler.sample(*s).unwrap(), &EventConfig::default()).unwrap().0)
        .collect();
    let enc = EncoderConfig::new(1, vec![4, 8], 32, 32);
    let base = BaseModel::freeze(
        ImageModel::new(enc.clone(), TaskKind::Centroid { n_shapes: 1 }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
    );
    let cfg = EFormerConfig { layers: 1, heads: 2, dim: 8, mlp_ratio: 2 };
    let plug = PlugModule::new(&enc, 5, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    (base, plug, Dataset { scenes })
}

#[test]
fn high_rate_modes_emit_k_predictions_per_interval() {
    let (base, plug, ds) = fixture();
    for k in [1usize, 2, 4] {
        let cfg = EvalConfig { k, anchors_per_scene: 3, ..Default::default() };
        let n_anchors = eval_anchors(&ds, &cfg).len();
        for mode in [EvalMode::HighRateIter, EvalMode::HighRateNoIter] {
            let r = evaluate(&base, Some(&plug), &ds, mode, Condition::Clean, &cfg, "full").unwrap();
            assert_eq!(r.rows.len(), k + 1, "{mode} k={k}");
            let interval = (ds.scenes[0].frames_rgb[1].t - ds.scenes[0].frames_rgb[0].t) as f64;
            for (s, row) in r.rows.iter().enumerate() {
                assert_eq!(row.step, s);
                assert_eq!(row.n, n_anchors);
                // frame times and slice boundaries are rounded to whole µs
                let want = interval * s as f64 / k as f64;
                assert!((row.dt_us - want).abs() <= 3.0, "dt {} vs {want}", row.dt_us);
                assert!(row.centroid_error_px.unwrap().is_finite());
                assert!(row.iou.is_none());
            }
        }
    }
}

#[test]
fn anchors_are_shared_across_modes_and_test_only() {
    let (_, _, ds) = fixture();
    let cfg = EvalConfig::default();
    let a = eval_anchors(&ds, &cfg);
    assert_eq!(a, eval_anchors(&ds, &cfg));
    assert!(a.iter().all(|(s, _)| ds.scenes[*s].split() == Split::Test));
    assert!(a.iter().all(|(s, i)| *i >= 1 && i + cfg.intervals < ds.scenes[*s].frames_rgb.len()));
}

#[test]
fn plug_modes_require_a_plug() {
    let (base, plug, ds) = fixture();
    let cfg = EvalConfig::default();
    assert!(evaluate(&base, None, &ds, EvalMode::FusedAnchor, Condition::Clean, &cfg, "x").is_err());
    let rgb = evaluate(&base, None, &ds, EvalMode::RgbOnly, Condition::Exposure, &cfg, "x").unwrap();
    assert_eq!(rgb.rows.len(), 1);
    let missing = evaluate(&base, Some(&plug), &ds, EvalMode::EventsMissing, Condition::Clean, &cfg, "x").unwrap();
    assert!(missing.is_finite());
    let bad = EvalConfig { k: 0, ..Default::default() };
    assert!(evaluate(&base, Some(&plug), &ds, EvalMode::HighRateIter, Condition::Clean, &bad, "x").is_err());
}

#[test]
fn rgb_only_ignores_the_plug_and_degradation_changes_inputs() {
    let (base, plug, ds) = fixture();
    let cfg = EvalConfig::default();
    let a = evaluate(&base, None, &ds, EvalMode::RgbOnly, Condition::Clean, &cfg, "x").unwrap();
    let b = evaluate(&base, Some(&plug), &ds, EvalMode::RgbOnly, Condition::Clean, &cfg, "x").unwrap();
    assert_eq!(a, b);
    let c = evaluate(&base, None, &ds, EvalMode::RgbOnly, Condition::Exposure, &cfg, "x").unwrap();
    assert_ne!(a.rows[0].centroid_error_px, c.rows[0].centroid_error_px);
}

#[test]
fn ablation_table_has_every_variant_and_condition() {
    let (base, plug, ds) = fixture();
    let cfg = EvalConfig { k: 1, intervals: 2, ..Default::default() };
    let r = ablate(&base, &plug, &plug, &ds, &cfg).unwrap();
    for c in Condition::ALL {
        assert!(r.find("rgb_only", EvalMode::RgbOnly, *c, 0).is_some());
        assert!(r.find("full", EvalMode::FusedAnchor, *c, 0).is_some());
        assert!(r.find("wo_delta", EvalMode::FusedAnchor, *c, 0).is_some());
        assert!(r.find("iter", EvalMode::HighRateIter, *c, 2).is_some());
        assert!(r.find("no_iter", EvalMode::HighRateNoIter, *c, 2).is_some());
    }
    // same plug under both names → identical rows
    let full = r.find("full", EvalMode::FusedAnchor, Condition::Exposure, 0).unwrap();
    let wo = r.find("wo_delta", EvalMode::FusedAnchor, Condition::Exposure, 0).unwrap();
    assert_eq!(full.centroid_error_px, wo.centroid_error_px);
    // step 1 of the two chains coincides: both fuse the first slice onto the anchor
    let it = r.find("iter", EvalMode::HighRateIter, Condition::Clean, 1).unwrap();
    let no = r.find("no_iter", EvalMode::HighRateNoIter, Condition::Clean, 1).unwrap();
    assert_eq!(it.centroid_error_px, no.centroid_error_px);
}
