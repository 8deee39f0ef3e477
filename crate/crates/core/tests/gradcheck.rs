mod common;

use common::*;
use f2_core::losses::Variant;

#[test]
fn primitive_gradients_match_central_differences() {
    for seed in 0..3 {
        for (name, inputs, build) in primitive_cases(seed) {
            let err = gradcheck(&inputs, build.as_ref());
            assert!(err < 1e-6, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn full_objective_gradients_match_central_differences() {
    let fx = small_fixture(3);
    let model = tiny_model(fx.tok.vocab_size(), 5);
    let samples = prepared(&fx, &model, 4);
    for (i, variant) in [Variant::F2, Variant::QaFqaR, Variant::Qa].into_iter().enumerate() {
        let err = f2_gradcheck(&model, &samples[i], variant, i as u64, 6, false);
        assert!(err < 1e-4, "{variant} base parameters: {err:e}");
        let err = f2_gradcheck(&model, &samples[i], variant, i as u64, 6, true);
        assert!(err < 1e-4, "{variant} adapters: {err:e}");
    }
}
