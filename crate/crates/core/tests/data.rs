use ecmc_core::data::{
    batch_iter, caption_text, generate_synthetic, label_rates, ModalitySpec, Split, SyntheticConfig, COGNITION_RATES,
    NEGATIVE_RATE,
};
use ecmc_core::decoder::Vocab;
use ecmc_core::losses::EmotionLabel;
use proptest::prelude::*;

fn small(seed: u64, splits: [usize; 3]) -> SyntheticConfig {
    SyntheticConfig {
        splits,
        modalities: [ModalitySpec {
            t_min: 1,
            t_max: 2,
            dim: 2,
        }; 3],
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn generation_is_a_function_of_the_config() {
    let v = Vocab::caption_default();
    let a = generate_synthetic(&small(5, [30, 5, 10]), &v).unwrap();
    let b = generate_synthetic(&small(5, [30, 5, 10]), &v).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&small(6, [30, 5, 10]), &v).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.split(Split::Train).len(), 30);
    assert_eq!(a.split(Split::Val).len(), 5);
    assert_eq!(a.split(Split::Test).len(), 10);
    a.validate().unwrap();
}

#[test]
fn label_rates_match_priors_within_three_sigma() {
    let n = 10_000;
    let d = generate_synthetic(&small(11, [n, 0, 0]), &Vocab::caption_default()).unwrap();
    let (rates, count) = label_rates(&d.samples);
    assert_eq!(count, n);
    let expected = [
        NEGATIVE_RATE,
        COGNITION_RATES[0],
        COGNITION_RATES[1],
        COGNITION_RATES[2],
        COGNITION_RATES[3],
    ];
    for (got, p) in rates.iter().zip(expected) {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (got - p).abs() <= 3.0 * sigma,
            "rate {got} vs prior {p} (sigma {sigma})"
        );
    }
}

#[test]
fn prior_multiplier_scales_cognition_only() {
    let cfg = SyntheticConfig {
        prior_multiplier: 8.0,
        ..small(2, [4000, 0, 0])
    };
    assert_eq!(cfg.effective_cognition_rates()[3], 1.0);
    let d = generate_synthetic(&cfg, &Vocab::caption_default()).unwrap();
    let (rates, _) = label_rates(&d.samples);
    assert_eq!(rates[4], 1.0);
    let p = NEGATIVE_RATE;
    assert!((rates[0] - p).abs() <= 3.0 * (p * (1.0 - p) / 4000.0).sqrt());
}

#[test]
fn noiseless_rows_depend_only_on_labels() {
    let cfg = SyntheticConfig {
        noise_std: 0.0,
        cognition_rates: [0.0; 4],
        ..small(3, [60, 0, 0])
    };
    let d = generate_synthetic(&cfg, &Vocab::caption_default()).unwrap();
    for e in EmotionLabel::ALL {
        let class: Vec<_> = d.samples.iter().filter(|s| s.emotion == e).collect();
        assert!(!class.is_empty());
        for m in 0..3 {
            let first = class[0].features[m].row(0).to_vec();
            for s in &class {
                for t in 0..s.features[m].rows() {
                    assert_eq!(s.features[m].row(t), first.as_slice());
                }
            }
        }
    }
}

#[test]
fn captions_describe_labels() {
    let v = Vocab::caption_default();
    let d = generate_synthetic(&small(9, [200, 0, 0]), &v).unwrap();
    for s in &d.samples {
        assert_eq!(v.decode(&s.caption), caption_text(s.emotion, s.cognition));
        assert_eq!(s.caption.last(), Some(&ecmc_core::decoder::EOS));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let v = Vocab::caption_default();
    for cfg in [
        SyntheticConfig {
            negative_rate: 1.5,
            ..small(0, [4, 0, 0])
        },
        SyntheticConfig {
            noise_std: -1.0,
            ..small(0, [4, 0, 0])
        },
        SyntheticConfig {
            modalities: [ModalitySpec {
                t_min: 3,
                t_max: 2,
                dim: 2,
            }; 3],
            ..small(0, [4, 0, 0])
        },
    ] {
        assert!(generate_synthetic(&cfg, &v).is_err());
    }
}

proptest! {
    #[test]
    fn batches_partition_the_indices(n in 2usize..300, b in 2usize..70, seed in any::<u64>(), epoch in 0u64..5, shuffle in any::<bool>()) {
        let batches = batch_iter(n, b, seed, epoch, shuffle).unwrap();
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|x| x.len() >= 2 && x.len() <= b + 1));
        prop_assert_eq!(batch_iter(n, b, seed, epoch, shuffle).unwrap(), batches);
    }
}
