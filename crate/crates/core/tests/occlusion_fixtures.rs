use occrec::occlusion::{estimate_visibility, PartLayout};
use occrec::synth::{generate_masks, MASK_HEIGHT, MASK_WIDTH};

fn agreement(seed: u64, rate: f64) -> f64 {
    let layout = PartLayout::standard(MASK_HEIGHT, MASK_WIDTH).unwrap();
    let fixtures = generate_masks(500, rate, seed).unwrap();
    let (mut agree, mut total) = (0, 0);
    for f in &fixtures {
        let est = estimate_visibility(&f.mask, &layout).unwrap();
        agree += est.mask.iter().zip(&f.truth).filter(|(a, b)| a == b).count();
        total += f.truth.len();
    }
    agree as f64 / total as f64
}

#[test]
fn estimator_agrees_with_fixture_truth() {
    for seed in 0..3 {
        for rate in [0.2, 0.5, 0.8] {
            let a = agreement(seed, rate);
            assert!(a >= 0.95, "seed {seed} rate {rate}: {a}");
        }
    }
}

#[test]
fn fixtures_are_reproducible() {
    assert_eq!(generate_masks(20, 0.5, 3).unwrap(), generate_masks(20, 0.5, 3).unwrap());
}
