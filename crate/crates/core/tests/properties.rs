use ddep::config::Config;
use ddep::corruption::{corrupt_with, gamma_to_sigma, sigma_to_gamma, NoiseSpec, Target};
use ddep::data::{load_mask, save_mask, subset_labels, IGNORE};
use ddep::eval::{miou, ConfusionMatrix};
use ddep::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_parameterizations_invert(sigma in 0.0f64..10.0) {
        let g = sigma_to_gamma(sigma).unwrap();
        prop_assert!(g > 0.0 && g <= 1.0);
        prop_assert!((gamma_to_sigma(g).unwrap() - sigma).abs() < 1e-6);
    }

    #[test]
    fn subsets_are_sorted_distinct_and_sized(n in 1usize..500, frac in 0.001f64..1.0, seed in any::<u64>()) {
        match subset_labels(n, frac, seed) {
            Ok(idx) => {
                prop_assert_eq!(idx.len(), ((frac * n as f64) - 1e-9).ceil() as usize);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < n));
                prop_assert_eq!(subset_labels(n, frac, seed).unwrap(), idx);
            }
            Err(_) => prop_assert!(frac * (n as f64) <= 1e-9),
        }
    }

    #[test]
    fn masks_survive_png((h, w, mask) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(prop_oneof![0u8..5, Just(IGNORE)], h * w))
    })) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask(&path, &mask, h, w).unwrap();
        prop_assert_eq!(load_mask(&path, 5).unwrap(), (mask, h, w));
    }

    #[test]
    fn miou_is_one_exactly_when_prediction_matches(gt in prop::collection::vec(0u8..4, 1..64)) {
        let mut cm = ConfusionMatrix::new(4).unwrap();
        cm.update(&gt, &gt).unwrap();
        prop_assert_eq!(miou(&cm).unwrap().miou, 1.0);
        let shifted: Vec<u8> = gt.iter().map(|&g| (g + 1) % 4).collect();
        let mut cm = ConfusionMatrix::new(4).unwrap();
        cm.update(&shifted, &gt).unwrap();
        prop_assert_eq!(miou(&cm).unwrap().miou, 0.0);
    }

    #[test]
    fn confusion_counts_every_labeled_pixel(pairs in prop::collection::vec((0u8..3, prop_oneof![0u8..3, Just(IGNORE)]), 0..64)) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.update(&pred, &gt).unwrap();
        prop_assert_eq!(cm.total(), gt.iter().filter(|&&g| g != IGNORE).count() as u64);
    }

    #[test]
    fn flips_are_involutions(h in 1usize..6, w in 1usize..6) {
        let t = Tensor::new(&[1, 2, h, w], (0..2 * h * w).map(|i| i as f32).collect()).unwrap();
        prop_assert_eq!(t.flip_horizontal().unwrap().flip_horizontal().unwrap(), t);
    }

    #[test]
    fn scaled_corruption_interpolates(gamma in 0.01f64..1.0, x in -3.0f32..3.0, e in -3.0f32..3.0) {
        let spec = NoiseSpec::scaled(gamma, Target::Noise).unwrap();
        let xs = Tensor::new(&[1, 1], vec![x]).unwrap();
        let s = corrupt_with(&xs, &spec, Tensor::new(&[1, 1], vec![e]).unwrap(), vec![gamma]).unwrap();
        let expected = gamma.sqrt() * x as f64 + (1.0 - gamma).sqrt() * e as f64;
        prop_assert!((s.noisy.data()[0] as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn config_text_round_trips(lr in 1e-6f64..1.0, epochs in 1usize..100, mult in 1usize..4) {
        let mut cfg = Config::default();
        cfg.set("finetune.lr", &lr.to_string()).unwrap();
        cfg.set("finetune.epochs", &epochs.to_string()).unwrap();
        cfg.set("model.decoder_width_multiplier", &mult.to_string()).unwrap();
        let back = Config::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.parse_as::<f64>("finetune.lr").unwrap(), lr);
    }
}
