use sinewich::model::{ModelConfig, Variant};
use sinewich::numerics::{conv2d, gaussian_kernel, ConvKernel, Tensor};
use sinewich::trainer::{
    self, delta_m, format_delta_m, make_toy_suite, mse, mtl_loss, optimizer_step, AdamHyper, AdamState, TargetOperator,
    TrainConfig, REPORT_FORMAT,
};
use sinewich::Error;

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 3,
        train_size: 8,
        val_size: 4,
        batch_size: 4,
        baselines: false,
        model: ModelConfig {
            image_size: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    let d = a.max_abs_diff(b).unwrap();
    assert!(d <= tol, "max-abs {d:e}");
}

#[test]
fn target_operators_match_direct_evaluation() {
    let mut cfg = quick(4);
    cfg.model.num_tasks = 4;
    let (data, tasks) = make_toy_suite(&cfg).unwrap();
    let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(
        names,
        ["gaussian-blur", "edge-magnitude", "channel-negation", "channel-mix"]
    );
    let (c, s) = (3, 16);
    for (i, x) in data.train_inputs.iter().enumerate() {
        // blur: single-channel convolution of each channel with the normalized kernel
        let taps = gaussian_kernel(5, 1.0).unwrap();
        let k = ConvKernel::new(taps.reshape(&[1, 1, 5, 5]).unwrap()).unwrap();
        for ch in 0..c {
            let plane = Tensor::new(vec![1, s, s], x.channel(ch).to_vec()).unwrap();
            let want = conv2d(&plane, &k).unwrap();
            let got = Tensor::new(vec![1, s, s], data.train_targets[0][i].channel(ch).to_vec()).unwrap();
            close(&got, &want, 1e-12);
        }
        close(&data.train_targets[2][i], &x.scale(-1.0), 0.0);
        let TargetOperator::ChannelMix { matrix } = &tasks[3].operator else {
            panic!()
        };
        let mix = &data.train_targets[3][i];
        for p in 0..s * s {
            for o in 0..c {
                let want: f64 = (0..c).map(|j| matrix.at2(o, j) * x.channel(j)[p]).sum();
                assert!((mix.channel(o)[p] - want).abs() < 1e-12);
            }
        }
    }
    // a horizontal ramp has unit central difference away from the border
    let ramp = Tensor::from_fn(&[1, 6, 6], |i| (i % 6) as f64);
    let edges = TargetOperator::EdgeMagnitude.apply(&ramp).unwrap();
    for y in 1..5 {
        for x in 1..5 {
            assert!((edges.channel(0)[y * 6 + x] - 1.0).abs() < 1e-15);
        }
    }
}

#[test]
fn datasets_are_reproducible_and_disjoint() {
    let (a, ta) = make_toy_suite(&quick(9)).unwrap();
    let (b, tb) = make_toy_suite(&quick(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = make_toy_suite(&quick(10)).unwrap();
    assert_ne!(a.train_inputs, c.train_inputs);
    for v in &a.val_inputs {
        assert!(!a.train_inputs.contains(v));
    }
    for x in a.train_inputs.iter().chain(&a.val_inputs) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        assert!(mean.abs() < 1e-12);
        assert!((x.norm_sq() / n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mtl_loss_is_the_weighted_sum_of_mses() {
    let t = |v: &[f64]| Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap();
    let preds = vec![
        vec![t(&[1.0, 2.0]), t(&[0.0, 0.0])],
        vec![t(&[3.0, -1.0]), t(&[1.0, 1.0])],
    ];
    let targets = vec![
        vec![t(&[0.0, 2.0]), t(&[0.0, 2.0])],
        vec![t(&[3.0, 1.0]), t(&[1.0, 1.0])],
    ];
    // task 0: (1 + 0 + 0 + 4) / 4, task 1: (0 + 4 + 0 + 0) / 4
    let (total, per) = mtl_loss(&preds, &targets, &[2.0, 0.5]).unwrap();
    assert_eq!(per, vec![1.25, 1.0]);
    assert_eq!(total, 2.0 * 1.25 + 0.5 * 1.0);
    assert_eq!(mse(&preds[0], &targets[0]).unwrap(), 1.25);
    assert!(mtl_loss(&preds, &targets, &[1.0]).is_err());
}

#[test]
fn delta_m_reproduces_published_rows() {
    let nyud = delta_m(
        &[71.25, 61.38, 66.24, 16.14],
        &[67.21, 61.93, 62.35, 17.97],
        &[false, false, false, true],
    )
    .unwrap();
    assert!((nyud - 5.39).abs() <= 0.01, "{nyud}");
    assert_eq!(format_delta_m(nyud), "+5.39");
    let pascal = delta_m(
        &[42.26, 64.08, 59.40, 23.41],
        &[42.59, 66.08, 59.80, 22.58],
        &[false, true, false, true],
    )
    .unwrap();
    assert_eq!(format_delta_m(pascal), "-0.52");
    assert_eq!(format_delta_m(delta_m(&[3.0], &[3.0], &[true]).unwrap()), "0.00");
}

#[test]
fn adam_first_step_moves_by_lr() {
    let hyper = AdamHyper {
        lr: 0.01,
        ..AdamHyper::default()
    };
    for g in [1e-3, 0.5, -7.0] {
        let mut params = vec![Tensor::scalar(2.0)];
        let mut state = AdamState::new(&params);
        optimizer_step(&mut params, &[Tensor::scalar(g)], &mut state, &hyper).unwrap();
        let step = 2.0 - params[0].data()[0];
        // bias correction makes the first step exactly lr * g / (|g| + eps)
        let expect = hyper.lr * g / (g.abs() + hyper.eps);
        assert!((step - expect).abs() < 1e-15, "g {g}: step {step}");
        assert!((step.abs() - hyper.lr).abs() < 1e-4 * hyper.lr);
    }
}

#[test]
fn zero_epochs_report_initial_state_only() {
    let mut cfg = quick(1);
    cfg.epochs = 0;
    let report = trainer::train(&cfg).unwrap();
    assert_eq!(report.format, REPORT_FORMAT);
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.epochs[0].epoch, 0);
    assert!(report.grad_sim.is_empty());
    assert_eq!(report.final_val, report.epochs[0].val_metric);
    assert!(report.delta_m.is_none());
}

#[test]
fn identical_configs_give_identical_report_bytes() {
    let a = trainer::train(&quick(2)).unwrap().to_json().unwrap();
    let b = trainer::train(&quick(2)).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let c = trainer::train(&quick(3)).unwrap().to_json().unwrap();
    assert_ne!(a, c);

    let dir = tempfile::tempdir().unwrap();
    let report = trainer::train(&quick(2)).unwrap();
    report.write_outputs(&dir.path().join("one")).unwrap();
    report.write_outputs(&dir.path().join("two")).unwrap();
    for f in ["report.json", "metrics.csv", "gradsim.csv", "resolved-config.json"] {
        let x = std::fs::read(dir.path().join("one").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("two").join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn gradient_similarity_is_well_formed() {
    let report = trainer::train(&quick(5)).unwrap();
    assert_eq!(report.grad_sim.len(), 3);
    for m in &report.grad_sim {
        assert_eq!(m.tasks, 3);
        for i in 0..3 {
            assert_eq!(m.mean_at(i, i), Some(1.0));
            assert_eq!(m.variance_at(i, i), Some(0.0));
            for j in 0..3 {
                assert_eq!(m.mean_at(i, j), m.mean_at(j, i));
                if let Some(v) = m.mean_at(i, j) {
                    assert!((-1.0..=1.0).contains(&v));
                }
            }
        }
    }
    assert_eq!(report.kernels.len(), 5);
    for k in &report.kernels {
        assert_eq!(k.omegas.len(), 3);
        assert_eq!(k.corr[0], Some(1.0));
    }
}

#[test]
fn training_loss_falls_by_epoch_ten() {
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            epochs: 10,
            baselines: false,
            ..TrainConfig::default()
        };
        let report = trainer::train(&cfg).unwrap();
        let total = |e: usize| report.epochs[e].train_loss.iter().sum::<f64>();
        assert!(total(10) < total(0), "seed {seed}: {} -> {}", total(0), total(10));
    }
}

#[test]
fn divergence_is_reported() {
    let mut cfg = quick(0);
    cfg.optimizer.lr = 1e9;
    match trainer::train(&cfg) {
        Err(Error::Diverged { loss, .. }) => assert!(!(loss <= cfg.divergence_limit)),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.final_val)),
    }
    let mut cfg = quick(0);
    cfg.divergence_limit = 1e-9;
    assert!(matches!(
        trainer::train(&cfg),
        Err(Error::Diverged {
            epoch: 1,
            iteration: 0,
            ..
        })
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = quick(0);
    cfg.model.num_tasks = 5;
    assert!(trainer::train(&cfg).is_err());
    let mut cfg = quick(0);
    cfg.weights = Some(vec![1.0, 0.0, 1.0]);
    assert!(matches!(trainer::train(&cfg), Err(Error::Contract(_))));
    let mut cfg = quick(0);
    cfg.batch_size = 0;
    assert!(trainer::train(&cfg).is_err());
    let mut cfg = quick(0);
    cfg.model.variant = Variant::IndependentBase;
    cfg.epochs = 0;
    assert!(trainer::train(&cfg).is_ok());
}

#[test]
fn single_task_baselines_feed_delta_m() {
    let mut cfg = quick(6);
    cfg.epochs = 1;
    cfg.baselines = true;
    let report = trainer::train(&cfg).unwrap();
    let st = report.baseline_val.clone().unwrap();
    assert_eq!(st.len(), 3);
    let expect = delta_m(&report.final_val, &st, &[true; 3]).unwrap();
    assert_eq!(report.delta_m, Some(expect));
    assert_eq!(st[1], trainer::train_single_task(&cfg, 1).unwrap());
}
