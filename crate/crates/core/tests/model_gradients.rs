use sinewich::model::{model_finite_diff_check, Model, ModelConfig, ModelProblem, SignFlip, Variant};
use sinewich::numerics::RandomStream;

fn desk_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        in_channels: 4,
        image_size: 16,
        num_tasks: 3,
        variant,
        ..ModelConfig::default()
    }
}

fn problem(variant: Variant, seed: u64) -> ModelProblem {
    let model = Model::new(desk_config(variant), seed).unwrap();
    let mut rng = RandomStream::new(seed, 99);
    let mut p = ModelProblem::random(model, 2, &mut rng).unwrap();
    p.perturb(0.3, &mut rng);
    p
}

#[test]
fn full_model_matches_finite_differences() {
    for variant in [
        Variant::Sinewich,
        Variant::LinearScale,
        Variant::NoModulation,
        Variant::IndependentBase,
        Variant::IndependentDecoder,
    ] {
        let mut p = problem(variant, 3);
        let check = model_finite_diff_check(&mut p, 1e-6).unwrap();
        let worst = check.worst().unwrap();
        println!("{variant:?}: worst {} {:.3e}", worst.name, worst.max_rel_error);
        assert!(
            check.passes(1e-4),
            "{variant:?}: {} at {:.3e}",
            worst.name,
            worst.max_rel_error
        );
    }
}

#[test]
fn sign_flip_is_caught() {
    let p = problem(Variant::Sinewich, 5);
    let idx = p.model.params().index_of("enc.s1.ts.base.A").unwrap();
    let mut bad = SignFlip { inner: p, tensor: idx };
    let check = model_finite_diff_check(&mut bad, 1e-6).unwrap();
    assert!(!check.passes(1e-4));
    let t = check
        .eval
        .tensors
        .iter()
        .find(|t| t.name == "enc.s1.ts.base.A")
        .unwrap();
    assert!(t.max_rel_error > 0.1, "{}", t.max_rel_error);
}
