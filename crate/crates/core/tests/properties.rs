use proptest::prelude::*;

use spectre_core::nn::{Checkpoint, ModelConfig, ModelParams};
use spectre_core::signal::{decode_dataset, encode_dataset, SignalSegment};
use spectre_core::spectral::assign_nearest;
use spectre_core::train::{lr_at, mask_count, regression_metrics, sample_mask, AdamWConfig};
use spectre_core::CyRopeTable;

fn small_cfg(d: usize, layers: usize) -> ModelConfig {
    ModelConfig { d, layers, heads: 2, codebook_size: 6, ..ModelConfig::desk() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_are_sorted_unique_and_sized(n in 1usize..400, ratio in 0.0f64..=1.0, seed: u64) {
        let plan = sample_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(plan.masked.len(), mask_count(n, ratio).min(n));
        prop_assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.masked.iter().all(|&i| i < n));
        prop_assert_eq!(plan, sample_mask(n, ratio, seed).unwrap());
    }

    #[test]
    fn schedule_stays_in_range(warmup in 0u64..50, extra in 1u64..500, peak in 1e-6f64..1e-1) {
        let cfg = AdamWConfig { lr_peak: peak, warmup_steps: warmup, total_steps: warmup + extra, ..AdamWConfig::default() };
        let lrs: Vec<f64> = (0..=warmup + extra).map(|s| lr_at(s, &cfg)).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak * (1.0 + 1e-12)).contains(&l)));
        prop_assert!(lrs[..=warmup as usize].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[warmup as usize..].windows(2).all(|w| w[1] <= w[0] + 1e-18));
    }

    #[test]
    fn nearest_centroid_matches_scan(k in 2usize..8, dim in 1usize..5, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // integer grid so ties actually occur
        let centroids: Vec<f64> = (0..k * dim).map(|_| rng.gen_range(-2..=2) as f64).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2..=2) as f64).collect();
        let d: Vec<f64> = centroids.chunks(dim).map(|c| c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected = d.iter().position(|&x| x == min).unwrap();
        prop_assert_eq!(assign_nearest(&centroids, dim, &v).0, expected);
    }

    #[test]
    fn rotation_is_orthogonal(t in -100i64..100, c in -30i64..30, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let table = CyRopeTable::new(16, 12, 10.0).unwrap();
        let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = table.apply(&v, t, c);
        let n0: f64 = v.iter().map(|x| x * x).sum();
        let n1: f64 = r.iter().map(|x| x * x).sum();
        prop_assert!((n0 - n1).abs() < 1e-12);
        let mut back = r.clone();
        table.apply_inverse_in_place(&mut back, t, c);
        prop_assert!(back.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn dataset_bytes_round_trip(count in 1usize..4, len_patches in 1usize..4, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (c, l, dof) = (3, 100 * len_patches, 2);
        let segs: Vec<SignalSegment> = (0..count)
            .map(|_| {
                let data: Vec<f32> = (0..c * l).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let targets: Vec<f32> = (0..dof).map(|_| rng.gen_range(0.0..1.0)).collect();
                SignalSegment::new(c, l, 2000.0, data, Some(targets)).unwrap()
            })
            .collect();
        let bytes = encode_dataset(&segs).unwrap();
        let back = decode_dataset(&bytes, Some(100)).unwrap();
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        prop_assert_eq!(back.len(), count);
    }

    #[test]
    fn perfect_predictions_score_one(rows in 2usize..20, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<Vec<f64>> = (0..rows).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let m = regression_metrics(&targets, &targets).unwrap();
        prop_assert_eq!(m.mse, 0.0);
        prop_assert!((m.r2.unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_encoding_is_stable(seed: u64, d in prop::sample::select(vec![8usize, 16]), layers in 0usize..3) {
        let cfg = small_cfg(d, layers);
        let params = ModelParams::init(&cfg, seed).unwrap();
        let bytes = Checkpoint::from_params(&params, &cfg).unwrap().encode();
        let decoded = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(decoded.encode(), bytes.clone());
        let restored = decoded.into_params(&cfg).unwrap();
        prop_assert_eq!(Checkpoint::from_params(&restored, &cfg).unwrap().encode(), bytes);
    }
}
