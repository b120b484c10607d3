use proptest::prelude::*;
use sparseformer::cnms::DetBox;
use sparseformer::slicer::{
    overlap_slices, run_pipeline, scale_filter, Extent, FilterRole, OracleDetector, PipelineConfig, ScaleFilter,
    SceneSpec, SliceSpec, TwoScaleConfig,
};

proptest! {
    #[test]
    fn every_small_object_fits_in_some_slice(w in 100u32..3000, h in 100u32..3000, seed: u64, max_side in 5u32..300, extra in 1u32..800) {
        let scene = SceneSpec::random(seed, Extent::new(w, h), 20, max_side, false);
        let overlap = scene.max_object_side().ceil() as u32;
        let slices = overlap_slices(scene.extent, overlap + extra, overlap).unwrap();
        for b in &scene.boxes {
            prop_assert!(slices.iter().any(|s| s.contains(b)), "{b:?} not contained");
        }
    }

    #[test]
    fn slices_cover_the_extent(w in 1u32..3000, h in 1u32..3000, size in 2u32..1500, frac in 0.0f64..0.9) {
        let overlap = (size as f64 * frac) as u32;
        let slices = overlap_slices(Extent::new(w, h), size, overlap).unwrap();
        prop_assert!(slices.iter().all(|s| s.x2() <= w && s.y2() <= h));
        prop_assert_eq!(slices.iter().map(|s| s.x2()).max(), Some(w));
        prop_assert_eq!(slices.iter().map(|s| s.y2()).max(), Some(h));
    }

    #[test]
    fn coordinate_round_trip(x in 0u32..5000, y in 0u32..5000, scale in prop::sample::select(vec![1.0, 0.5, 0.25, 0.125]), bx in 0.0f64..500.0, by in 0.0f64..500.0, bw in 0.5f64..300.0) {
        let s = SliceSpec { id: 1, x, y, width: 1024, height: 1024, scale };
        let b = DetBox::new(bx, by, bx + bw, by + bw, 0.5, 0, 0).unwrap();
        let back = s.to_local(&s.to_global(&b));
        for (p, q) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_filters_partition(sides in prop::collection::vec((1.0f64..600.0, 1.0f64..600.0), 0..40), t in 100.0f64..100000.0) {
        let boxes: Vec<DetBox> = sides.iter().map(|&(w, h)| DetBox::new(0.0, 0.0, w, h, 0.5, 0, 0).unwrap()).collect();
        let fine = scale_filter(&boxes, &ScaleFilter::new(t, FilterRole::Fine).unwrap());
        let coarse = scale_filter(&boxes, &ScaleFilter::new(t, FilterRole::Coarse).unwrap());
        prop_assert_eq!(fine.len() + coarse.len(), boxes.len());
        prop_assert!(fine.iter().all(|b| !coarse.contains(b) || boxes.iter().filter(|x| *x == b).count() > 1));
    }
}

#[test]
fn pipeline_is_deterministic() {
    let scene = SceneSpec::random(3, Extent::new(2500, 1800), 40, 400, true);
    let cfg = PipelineConfig {
        slicing: TwoScaleConfig { fine_size: 600, overlap: 400, ..TwoScaleConfig::default() },
        ..PipelineConfig::default()
    };
    let det = OracleDetector { scene: &scene };
    let a = run_pipeline(&scene, &det, &cfg).unwrap();
    for _ in 0..3 {
        assert_eq!(run_pipeline(&scene, &det, &cfg).unwrap(), a);
    }
}
