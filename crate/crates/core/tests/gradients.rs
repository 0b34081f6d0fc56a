use occrec::encoder::EncoderParams;
use occrec::gradcheck::{
    check_encoder, check_gnn, check_gnn_inputs, random_encoder_batch, random_gnn_instance, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
use occrec::orgnn::GnnOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn orgnn_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for opts in [GnnOptions::OUTLIER_REMOVABLE, GnnOptions::PLAIN] {
        for _ in 0..10 {
            let inst = random_gnn_instance(&mut rng, 8, 4, 2, 2, 5);
            let r = check_gnn(&inst, &opts, DEFAULT_STEP).unwrap();
            assert!(r.passes(DEFAULT_TOLERANCE), "{opts:?}: {r:?}");
            assert!(r.checked > r.skipped);
        }
    }
}

#[test]
fn orgnn_input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let inst = random_gnn_instance(&mut rng, 6, 5, 1, 2, 4);
        let r = check_gnn_inputs(&inst, 0, &GnnOptions::OUTLIER_REMOVABLE, DEFAULT_STEP).unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
    }
}

#[test]
fn averaging_variant_has_classifier_gradients_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inst = random_gnn_instance(&mut rng, 4, 3, 1, 2, 3);
    let out = occrec::orgnn::orgnn_loss(&inst.input, inst.label, &inst.params, &GnnOptions::AVERAGE).unwrap();
    for l in &out.grad.parts[0].layers {
        assert!(l.w.as_slice().iter().chain(&l.v).all(|&g| g == 0.0));
        assert_eq!(l.b, 0.0);
    }
    let r = check_gnn(&inst, &GnnOptions::AVERAGE, DEFAULT_STEP).unwrap();
    assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..4 {
        let train = random_encoder_batch(&mut rng, 2, 6).unwrap();
        let params = EncoderParams::init(2, 6, 4, 3, seed);
        // larger margin keeps most hinges active
        let r = check_encoder(&train, &params, 1.0, DEFAULT_STEP).unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
    }
}
