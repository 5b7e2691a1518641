use vitlite::data::ToyDataset;
use vitlite::model::{
    build_model, forward_classify, BlockVariant, Form, ForwardOptions, Model, ModelConfig,
};
use vitlite::ops::BnMode;
use vitlite::par::Exec;
use vitlite::params::Params;
use vitlite::rng::Rng;
use vitlite::tensor::Tensor;
use vitlite::train::{train_toy, TrainConfig};

fn toy(variant: BlockVariant, seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::toy().with_variant(variant)
    }
}

fn snapshot(m: &Model) -> Vec<(String, Tensor)> {
    m.named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

#[test]
fn every_tensor_moves_after_two_steps() {
    // the head starts at zero, so only the second step reaches the body
    for variant in [BlockVariant::Vanilla, BlockVariant::Ours] {
        let cfg = toy(variant, 1);
        let data = ToyDataset::generate(&cfg, 16, 1).unwrap();
        let mut m = build_model(&cfg).unwrap();
        let before = snapshot(&m);
        let tc = TrainConfig {
            steps: 2,
            ..TrainConfig::default()
        };
        train_toy(&mut m, &data, &tc).unwrap();
        let after = snapshot(&m);
        assert_eq!(before.len(), after.len());
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            assert!(a != b, "{variant:?}: `{name}` did not change");
        }
        if variant == BlockVariant::Ours {
            let names: Vec<&str> = after.iter().map(|(n, _)| n.as_str()).collect();
            for want in [
                "ihh_kernels",
                "chh_weight",
                "ffn.u.0.bn.gamma",
                "ffn.v.1.bn.beta",
            ] {
                assert!(names.iter().any(|n| n.contains(want)), "missing {want}");
            }
        }
    }
}

#[test]
fn merged_model_matches_train_form_in_eval_mode() {
    let cfg = toy(BlockVariant::Ours, 2);
    let data = ToyDataset::generate(&cfg, 16, 2).unwrap();
    let mut m = build_model(&cfg).unwrap();
    let tc = TrainConfig {
        steps: 20,
        ..TrainConfig::default()
    };
    train_toy(&mut m, &data, &tc).unwrap();
    assert!(m.has_train_branches());
    let merged = m.merged().unwrap();
    assert_eq!(merged.form, Form::Inference);
    assert!(!merged.has_train_branches());
    let a = forward_classify(&m, &data.images).unwrap();
    let b = forward_classify(&merged, &data.images).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-8);
}

#[test]
fn zeroed_output_projections_make_blocks_identities() {
    for variant in [BlockVariant::Vanilla, BlockVariant::Ours] {
        let cfg = toy(variant, 3);
        let mut m = build_model(&cfg).unwrap().merged().unwrap();
        m.head = vitlite::params::Linear::init(&mut Rng::seed(9), cfg.c, cfg.num_classes, true);
        m.visit_params_mut("", &mut |n, t| {
            let out_proj = n.contains("attn.proj.")
                || n.ends_with("ffn.m2.weight")
                || n.ends_with("ffn.m2.bias")
                || n.ends_with("ffn.v_hat")
                || n.ends_with("ffn.v_bias");
            if out_proj {
                *t = Tensor::zeros(t.shape());
            }
        });
        let mut bare = m.clone();
        bare.blocks.clear();
        let x = Rng::seed(4).normal_tensor(&[3, 3, 16, 16], 1.0);
        let a = forward_classify(&m, &x).unwrap();
        let b = forward_classify(&bare, &x).unwrap();
        assert_eq!(a, b, "{variant:?}");
    }
}

#[test]
fn loss_goes_down() {
    for variant in [BlockVariant::Vanilla, BlockVariant::Ours] {
        for seed in 0..3 {
            let cfg = toy(variant, seed);
            let data = ToyDataset::generate(&cfg, 64, seed).unwrap();
            let mut m = build_model(&cfg).unwrap();
            let tc = TrainConfig {
                steps: 40,
                seed,
                ..TrainConfig::default()
            };
            let losses = train_toy(&mut m, &data, &tc).unwrap();
            let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
            let last: f64 = losses[20..].iter().sum::<f64>() / 20.0;
            assert!(last < first, "{variant:?}/{seed}: {first} -> {last}");
        }
    }
}

#[test]
fn minibatch_training_is_seeded() {
    let cfg = toy(BlockVariant::Vanilla, 5);
    let data = ToyDataset::generate(&cfg, 16, 5).unwrap();
    let tc = TrainConfig {
        steps: 6,
        batch_size: Some(4),
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = build_model(&cfg).unwrap();
        let l = train_toy(&mut m, &data, &tc).unwrap();
        (m, l)
    };
    assert_eq!(run(), run());
}

#[test]
fn execution_policy_does_not_change_results() {
    let cfg = toy(BlockVariant::Ours, 6);
    let m = build_model(&cfg).unwrap();
    let x = Rng::seed(6).normal_tensor(&[4, 3, 16, 16], 1.0);
    let run = |exec| {
        let opts = ForwardOptions {
            mode: BnMode::Train,
            capture_maps: true,
            exec,
        };
        let out = m.forward(&x, opts).unwrap();
        let g = Tensor::ones(out.logits.shape());
        let grads = m.backward(&out.cache, &g).unwrap();
        (out.logits, out.maps, grads)
    };
    let (l1, a1, g1) = run(Exec::Sequential);
    let (l2, a2, g2) = run(Exec::Parallel);
    assert_eq!(l1, l2);
    assert_eq!(a1, a2);
    assert_eq!(g1, g2);
}

#[test]
fn same_seed_same_model() {
    for variant in [BlockVariant::Vanilla, BlockVariant::Ours] {
        let a = build_model(&toy(variant, 11)).unwrap();
        assert_eq!(a, build_model(&toy(variant, 11)).unwrap());
        assert_ne!(a, build_model(&toy(variant, 12)).unwrap());
    }
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["deit_s.json", "deit_t.json", "toy.json"] {
        let cfg = ModelConfig::load(dir.join(name)).unwrap();
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
    assert_eq!(
        ModelConfig::load(dir.join("deit_s.json")).unwrap(),
        ModelConfig::deit_small()
    );
}
