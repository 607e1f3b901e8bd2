use sinewich::model::{
    decoder_forward, Checkpoint, DecoderTask, Mode, Model, ModelConfig, NormStats, TaskKernel, Variant,
    CHECKPOINT_FORMAT,
};
use sinewich::numerics::{ConvKernel, RandomStream, Tensor};
use sinewich::trainer::{self, TrainConfig};
use sinewich::Error;

fn small(variant: Variant, tasks: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        num_tasks: tasks,
        variant,
        ..ModelConfig::default()
    }
}

fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = RandomStream::new(seed, 50);
    (0..n)
        .map(|_| rng.gaussian_tensor(&[cfg.in_channels, cfg.image_size, cfg.image_size], 1.0))
        .collect()
}

fn set(model: &mut Model, name: &str, value: Tensor) {
    let idx = model
        .params()
        .index_of(name)
        .unwrap_or_else(|| panic!("no tensor {name}"));
    model.params_mut().tensors_mut()[idx] = value;
}

#[test]
fn zero_adapters_leave_the_backbone_alone() {
    let cfg = small(Variant::Sinewich, 2);
    let mut model = Model::new(cfg.clone(), 3).unwrap();
    let names: Vec<String> = model.params().info().iter().map(|i| i.name.clone()).collect();
    for name in names
        .iter()
        .filter(|n| n.starts_with("enc.") && (n.ends_with(".A") || n.ends_with(".B")))
    {
        let shape = model.params().by_name(name).unwrap().shape().to_vec();
        set(&mut model, name, Tensor::zeros(&shape));
    }
    let xs = batch(&cfg, 2, 0);
    let bb = model.backbone();
    for task in 0..2 {
        let feats = model.encoder_features(&xs, task).unwrap();
        for (x, f) in xs.iter().zip(&feats) {
            let mut cur = x.clone();
            for s in 0..4 {
                let mut h = bb.entry(s, &cur).unwrap();
                for layer in &bb.layers[s] {
                    h = layer.forward(&h).unwrap().0;
                }
                assert!(h.max_abs_diff(&f[s]).unwrap() < 1e-14, "stage {s}");
                cur = h;
            }
        }
    }
}

#[test]
fn tasks_with_equal_tokens_and_heads_agree() {
    let cfg = small(Variant::Sinewich, 3);
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    let xs = batch(&cfg, 2, 1);
    let (p0, _) = model.forward(&xs, 0, Mode::Eval).unwrap();
    let (p2, _) = model.forward(&xs, 2, Mode::Eval).unwrap();
    assert!(
        p0.iter().zip(&p2).any(|(a, b)| a != b),
        "distinct tokens should give distinct outputs"
    );

    let copy: Vec<(String, Tensor)> = model
        .params()
        .info()
        .iter()
        .zip(model.params().tensors())
        .filter(|(i, _)| i.task == Some(0))
        .map(|(i, t)| (i.name.clone(), t.clone()))
        .collect();
    for (name, t) in copy {
        set(&mut model, &name.replace("t0", "t2"), t);
    }
    for mode in [Mode::Eval, Mode::Train] {
        let (a, _) = model.forward(&xs, 0, mode).unwrap();
        let (b, _) = model.forward(&xs, 2, mode).unwrap();
        assert_eq!(a, b);
    }
    let k0 = model.task_kernels(0).unwrap();
    let k2 = model.task_kernels(2).unwrap();
    assert!(k0.iter().zip(&k2).all(|(a, b)| a.omega == b.omega));
}

#[test]
fn forward_is_pure() {
    let cfg = small(Variant::Sinewich, 2);
    let model = Model::new(cfg.clone(), 1).unwrap();
    let before = model.params().tensors().to_vec();
    let xs = batch(&cfg, 3, 2);
    let (a, _) = model.forward(&xs, 1, Mode::Train).unwrap();
    let (b, _) = model.forward(&xs, 1, Mode::Train).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.params().tensors(), &before[..]);
}

#[test]
fn task_passes_touch_only_their_own_tensors() {
    for variant in [Variant::Sinewich, Variant::IndependentBase] {
        let cfg = small(variant, 3);
        let model = Model::new(cfg.clone(), 2).unwrap();
        let xs = batch(&cfg, 2, 3);
        let passes = model
            .forward_backward_tasks(&xs, &[0, 1, 2], Mode::Train, |_, preds| {
                Ok((0.0, preds.iter().map(|p| p.map(|v| v + 0.5)).collect()))
            })
            .unwrap();
        for pass in &passes {
            for (info, g) in model.params().info().iter().zip(pass.grads.tensors()) {
                if let Some(owner) = info.task {
                    if owner != pass.task {
                        assert_eq!(
                            g.max_abs(),
                            0.0,
                            "{variant:?} task {} leaked into {}",
                            pass.task,
                            info.name
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn other_task_parameters_do_not_change_predictions() {
    let cfg = small(Variant::IndependentBase, 2);
    let mut model = Model::new(cfg.clone(), 8).unwrap();
    let xs = batch(&cfg, 2, 4);
    let (before, _) = model.forward(&xs, 0, Mode::Eval).unwrap();
    let owned: Vec<usize> = (0..model.params().len())
        .filter(|&i| model.params().info()[i].task == Some(1))
        .collect();
    for i in owned {
        let t = model.params().get(i).map(|v| v * 3.0 + 1.0);
        model.params_mut().tensors_mut()[i] = t;
    }
    let (after, _) = model.forward(&xs, 0, Mode::Eval).unwrap();
    assert_eq!(before, after);
}

#[test]
fn backbone_is_frozen_through_training() {
    let config = TrainConfig {
        epochs: 2,
        train_size: 8,
        val_size: 4,
        batch_size: 4,
        baselines: false,
        model: small(Variant::Sinewich, 3),
        ..TrainConfig::default()
    };
    let outcome = trainer::train_with_baselines(&config, None).unwrap();
    let fresh = Model::new(config.model.clone(), config.seed).unwrap();
    let trained = outcome.model.backbone().tensors();
    let initial = fresh.backbone().tensors();
    assert_eq!(trained.len(), initial.len());
    for (a, b) in trained.iter().zip(&initial) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_ne!(outcome.model.params().tensors(), fresh.params().tensors());
}

#[test]
fn stale_cache_is_rejected() {
    let cfg = small(Variant::Sinewich, 2);
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    let xs = batch(&cfg, 1, 5);
    let (preds, cache) = model.forward(&xs, 0, Mode::Train).unwrap();
    let _ = model.params_mut();
    assert!(matches!(model.backward(&cache, &preds), Err(Error::StaleCache)));
}

#[test]
fn unknown_task_and_bad_input() {
    let cfg = small(Variant::Sinewich, 2);
    let model = Model::new(cfg.clone(), 0).unwrap();
    let xs = batch(&cfg, 1, 6);
    assert!(matches!(model.forward(&xs, 2, Mode::Eval), Err(Error::UnknownTask(2))));
    assert!(matches!(model.task_kernels(7), Err(Error::UnknownTask(7))));
    assert!(model.forward(&[Tensor::zeros(&[3, 8, 8])], 0, Mode::Eval).is_err());
    assert!(model.forward(&[], 0, Mode::Eval).is_err());
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let cfg = small(Variant::Sinewich, 2);
    let model = Model::new(cfg.clone(), 4).unwrap();
    let xs = batch(&cfg, 2, 7);
    for mode in [Mode::Train, Mode::Eval] {
        let (preds, cache) = model.forward(&xs, 1, mode).unwrap();
        let zeros: Vec<Tensor> = preds.iter().map(|p| Tensor::zeros(p.shape())).collect();
        assert_eq!(model.backward(&cache, &zeros).unwrap().max_abs(), 0.0);
    }
}

fn prefixed(model: &Model, prefix: &str) -> usize {
    model
        .params()
        .info()
        .iter()
        .zip(model.params().tensors())
        .filter(|(i, _)| i.name.starts_with(prefix))
        .map(|(_, t)| t.len())
        .sum()
}

#[test]
fn parameter_audit() {
    for tasks in 1..=4 {
        let shared = Model::new(small(Variant::Sinewich, tasks), 0).unwrap();
        let indep = Model::new(small(Variant::IndependentBase, tasks), 0).unwrap();
        let cfg = shared.config().clone();
        let (r, k, w) = (cfg.rank, cfg.awb_kernel, cfg.token_width);
        let mut extra = 0;
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            let base = 2 * c * r + r * r * k * k;
            assert_eq!(base, cfg.encoder_base_params(s));
            let prefix = format!("enc.s{s}.ts.");
            assert_eq!(prefixed(&shared, &prefix), base + w + 2, "T = {tasks}");
            assert_eq!(prefixed(&indep, &prefix), tasks * base + w + 2, "T = {tasks}");
            extra += (tasks - 1) * base;
        }
        let dec = cfg.decoder_base_params();
        assert_eq!(prefixed(&shared, "dec.main."), dec + w + 2);
        extra += (tasks - 1) * dec;
        assert_eq!(indep.num_trainable() - shared.num_trainable(), extra);
        if tasks >= 2 {
            assert!(shared.num_trainable() < indep.num_trainable());
        }
        // the shared encoder does not grow with T
        let one = Model::new(small(Variant::Sinewich, 1), 0).unwrap();
        assert_eq!(prefixed(&shared, "enc."), prefixed(&one, "enc."));
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small(Variant::Sinewich, 2);
    let mut model = Model::new(cfg.clone(), 11).unwrap();
    let xs = batch(&cfg, 2, 8);
    let (_, cache) = model.forward(&xs, 1, Mode::Train).unwrap();
    model.update_running_stats(&cache, 0.5).unwrap();
    let perturbed = model.params().get(0).map(|v| v + 0.25);
    model.params_mut().tensors_mut()[0] = perturbed;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let ck = Checkpoint::capture(&model, 11).unwrap();
    assert_eq!(ck.format, CHECKPOINT_FORMAT);
    ck.save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().restore().unwrap();
    assert_eq!(restored.params().tensors(), model.params().tensors());
    assert_eq!(restored.running_stats(), model.running_stats());
    for task in 0..2 {
        assert_eq!(
            restored.forward(&xs, task, Mode::Eval).unwrap().0,
            model.forward(&xs, task, Mode::Eval).unwrap().0
        );
    }

    let mut bad = ck.clone();
    bad.config_hash = "00".repeat(32);
    assert!(matches!(bad.restore(), Err(Error::Checkpoint(_))));
    let mut bad = ck.clone();
    bad.tensors[0].data.pop();
    assert!(matches!(bad.restore(), Err(Error::Checkpoint(_))));
    let mut bad = ck;
    bad.version = 99;
    assert!(matches!(bad.restore(), Err(Error::Checkpoint(_))));
}

#[test]
fn decoder_on_all_zero_features() {
    let cfg = small(Variant::Sinewich, 1);
    let model = Model::new(cfg.clone(), 0).unwrap();
    let p = model.params();
    let get = |n: &str| p.by_name(n).unwrap();
    let proj = ["dec.t0.proj0", "dec.t0.proj1", "dec.t0.proj2", "dec.t0.proj3"].map(get);
    let beta = Tensor::from_fn(&[cfg.decoder_hidden], |i| i as f64 - 1.5);
    let dt = DecoderTask {
        proj,
        bias: get("dec.t0.bias"),
        gamma: get("dec.t0.gamma"),
        beta: &beta,
        tail: get("dec.t0.tail"),
        tail_bias: get("dec.t0.tail_bias"),
    };
    let kernel: TaskKernel = model.task_kernels(0).unwrap().pop().unwrap();
    let feats: Vec<Vec<Tensor>> = (0..2)
        .map(|_| {
            (0..4)
                .map(|s| Tensor::zeros(&[cfg.stage_channels[s], cfg.stage_size(s), cfg.stage_size(s)]))
                .collect()
        })
        .collect();
    let (preds, _) = decoder_forward(&feats, &dt, &kernel, NormStats::Batch).unwrap();
    // zero variance normalizes to zero, leaving relu(beta) through the tail
    let hidden = Tensor::from_fn(&[cfg.decoder_hidden, 16, 16], |i| beta.data()[i / 256].max(0.0));
    let tail = ConvKernel::new(get("dec.t0.tail").clone()).unwrap();
    let mut expect = sinewich::numerics::conv2d(&hidden, &tail).unwrap();
    for (c, b) in get("dec.t0.tail_bias").data().iter().enumerate() {
        expect.channel_mut(c).iter_mut().for_each(|v| *v += b);
    }
    for pred in &preds {
        assert!(pred.is_finite());
        assert!(pred.max_abs_diff(&expect).unwrap() < 1e-12);
    }
}
