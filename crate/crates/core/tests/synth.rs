//! Label/signal consistency of generated and augmented clips.

use physformer::signal::hr_from_psd;
use physformer::synth::{augment, generate_clip, resample_temporal, training_sample, Sample, SynthConfig, SPEED_FACTORS};
use physformer::Rng;
use proptest::prelude::*;

fn small() -> SynthConfig {
    SynthConfig { height: 16, width: 16, ..SynthConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn label_is_the_bvp_spectral_peak(seed in any::<u64>(), index in 0usize..1000) {
        let clip = generate_clip(&small(), seed, index);
        let peak = hr_from_psd(&clip.bvp, clip.fps).unwrap().bpm;
        prop_assert!((peak - clip.hr).abs() <= 0.5, "label {} peak {}", clip.hr, peak);
    }

    #[test]
    fn resampling_keeps_label_and_signal_consistent(seed in any::<u64>(), which in 0usize..3) {
        let clip = generate_clip(&small(), seed, 0);
        let s: Sample<f32> = clip.window(0, clip.frames).unwrap();
        let factor = SPEED_FACTORS[which];
        prop_assume!((42.0..=180.0).contains(&(s.hr * factor)));
        let r = resample_temporal(&s, factor).unwrap();
        let peak = hr_from_psd(&r.bvp, clip.fps).unwrap().bpm;
        prop_assert!((peak - r.hr).abs() <= 1.0, "factor {}: label {} peak {}", factor, r.hr, peak);
        prop_assert_eq!(r.x.shape()[1], r.bvp.len());
    }

    #[test]
    fn random_augmentation_keeps_label_and_signal_consistent(seed in any::<u64>()) {
        let clip = generate_clip(&small(), seed, 1);
        let s: Sample<f32> = clip.window(0, clip.frames).unwrap();
        let a = augment(&s, &mut Rng::new(seed), 200).unwrap();
        let peak = hr_from_psd(&a.bvp, clip.fps).unwrap().bpm;
        prop_assert!((peak - a.hr).abs() <= 1.0, "label {} peak {}", a.hr, peak);
    }
}

#[test]
fn clips_are_a_function_of_seed_and_index() {
    let cfg = small();
    assert_eq!(generate_clip(&cfg, 3, 5), generate_clip(&cfg, 3, 5));
    assert_ne!(generate_clip(&cfg, 3, 5).rgb, generate_clip(&cfg, 3, 6).rgb);
    assert_ne!(generate_clip(&cfg, 4, 5).rgb, generate_clip(&cfg, 3, 5).rgb);
}

#[test]
fn training_samples_are_reproducible_and_sized() {
    let clip = generate_clip(&small(), 8, 2);
    for stream in 0..10 {
        let a: Sample<f32> = training_sample(&clip, 96, &mut Rng::derive(1, stream), true).unwrap();
        let b: Sample<f32> = training_sample(&clip, 96, &mut Rng::derive(1, stream), true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.shape(), [3, 96, 16, 16]);
        assert_eq!(a.bvp.len(), 96);
    }
}
