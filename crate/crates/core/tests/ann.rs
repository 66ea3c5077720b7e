mod common;

use common::{rel_err, rng};
use iirsnn::ann::{ann_backward, ann_forward, ann_forward_cached, fit_ann, Mode};
use iirsnn::data::{synthetic_dataset, SplitConfig, SyntheticConfig};
use iirsnn::kernels::{one_hot, softmax_crossentropy};
use iirsnn::{evaluate_ann, train_ann, AnnParams, AnnTrainConfig, ConvSpec, LayerSpec, NetworkSpec, Tensor};
use rand::Rng;

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        name: "ann-test".into(),
        input: [1, 4, 4],
        layers: vec![
            LayerSpec::Conv2d(ConvSpec::same(1, 3, 3)),
            LayerSpec::Avgpool2x2,
            LayerSpec::Linear { n_in: 12, n_out: 5 },
            LayerSpec::Linear { n_in: 5, n_out: 3 },
        ],
    }
}

fn train_loss(p: &AnnParams, x: &Tensor, y: &Tensor) -> f64 {
    let fwd = ann_forward_cached(p, x, Mode::Train, Some(0.0), &mut rng(0)).unwrap();
    softmax_crossentropy(&fwd.logits, y).unwrap().0
}

#[test]
fn backward_matches_finite_differences_through_batchnorm() {
    let spec = small_spec();
    let mut params = AnnParams::init(&spec, 3).unwrap();
    let mut r = rng(4);
    for bn in params.bn.iter_mut().flatten() {
        bn.gamma
            .data_mut()
            .iter_mut()
            .for_each(|g| *g = r.random_range(0.5..1.5));
        bn.beta
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = r.random_range(-0.3..0.3));
    }
    let x = Tensor::from_fn(&[6, 1, 4, 4], |_| r.random_range(-1.0..1.0));
    let y = one_hot(&[0, 1, 2, 0, 1, 2], 3);
    let fwd = ann_forward_cached(&params, &x, Mode::Train, Some(0.0), &mut rng(0)).unwrap();
    let (_, g) = softmax_crossentropy(&fwd.logits, &y).unwrap();
    let grads = ann_backward(&params, &fwd, &g).unwrap();
    let h = 1e-5;
    for k in 0..params.weights.len() {
        let fd: Vec<f64> = (0..params.weights[k].len())
            .map(|i| {
                let mut p = params.clone();
                p.weights[k].data_mut()[i] += h;
                let up = train_loss(&p, &x, &y);
                p.weights[k].data_mut()[i] -= 2.0 * h;
                (up - train_loss(&p, &x, &y)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(grads.weights[k].data(), &fd) < 1e-5, "weights {k}");
        if params.bn[k].is_some() {
            for (which, analytic) in [("gamma", &grads.gamma[k]), ("beta", &grads.beta[k])] {
                let analytic = analytic.as_ref().unwrap();
                let fd: Vec<f64> = (0..analytic.len())
                    .map(|i| {
                        let bump = |p: &mut AnnParams, d: f64| {
                            let bn = p.bn[k].as_mut().unwrap();
                            let t = if which == "gamma" { &mut bn.gamma } else { &mut bn.beta };
                            t.data_mut()[i] += d;
                        };
                        let mut p = params.clone();
                        bump(&mut p, h);
                        let up = train_loss(&p, &x, &y);
                        bump(&mut p, -2.0 * h);
                        (up - train_loss(&p, &x, &y)) / (2.0 * h)
                    })
                    .collect();
                assert!(rel_err(analytic.data(), &fd) < 1e-5, "{which} {k}");
            }
        }
    }
}

#[test]
fn batch_statistics_normalize_each_channel() {
    let spec = small_spec();
    let params = AnnParams::init(&spec, 1).unwrap();
    let mut r = rng(2);
    let x = Tensor::from_fn(&[8, 1, 4, 4], |_| r.random_range(-2.0..3.0));
    let fwd = ann_forward_cached(&params, &x, Mode::Train, Some(0.0), &mut r).unwrap();
    let xhat = fwd.normalized(0).unwrap();
    let (n, c, hw) = (8, 3, 16);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|s| xhat.sample(s)[ch * hw..(ch + 1) * hw].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3, "variance {v}");
    }
}

#[test]
fn eval_mode_is_deterministic_and_batch_independent() {
    let spec = small_spec();
    let params = AnnParams::init(&spec, 5).unwrap();
    let mut r = rng(6);
    let x = Tensor::from_fn(&[4, 1, 4, 4], |_| r.random_range(0.0..1.0));
    let all = ann_forward(&params, &x, Mode::Eval).unwrap();
    let one = ann_forward(
        &params,
        &Tensor::new(vec![1, 1, 4, 4], x.sample(2).to_vec()).unwrap(),
        Mode::Eval,
    )
    .unwrap();
    assert_eq!(all.sample(2), one.data());
}

fn synthetic() -> iirsnn::DatasetHandle {
    synthetic_dataset(
        &SyntheticConfig {
            samples_per_class: 60,
            ..SyntheticConfig::default()
        },
        &SplitConfig::default(),
    )
    .unwrap()
}

#[test]
fn learns_synthetic_blobs() {
    let data = synthetic();
    let spec = NetworkSpec::conv_small([1, 8, 8], 4);
    let cfg = AnnTrainConfig {
        epochs: 8,
        batch_size: 16,
        initial_lr: 0.05,
        ..AnnTrainConfig::default()
    };
    let trained = train_ann(&spec, &cfg, &data).unwrap();
    assert_eq!(trained.metrics.len(), 8);
    assert!(evaluate_ann(&trained.params, &data.test).unwrap() > 0.95);
    let best = &trained.metrics[trained.best_epoch];
    assert!(trained.metrics.iter().all(|m| m.val_acc <= best.val_acc));
}

#[test]
fn same_seed_same_parameters() {
    let data = synthetic();
    let spec = NetworkSpec::conv_small([1, 8, 8], 4);
    let cfg = AnnTrainConfig {
        epochs: 2,
        ..AnnTrainConfig::default()
    };
    let a = train_ann(&spec, &cfg, &data).unwrap();
    let b = train_ann(&spec, &cfg, &data).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn huge_learning_rate_diverges_with_error() {
    let data = synthetic();
    let spec = NetworkSpec::deep_mlp([1, 8, 8], 4, 2, 16);
    let cfg = AnnTrainConfig {
        epochs: 20,
        initial_lr: 1e12,
        ..AnnTrainConfig::default()
    };
    let params = AnnParams::init(&spec, 0).unwrap();
    match fit_ann(params, &cfg, &data, &mut rng(0)) {
        Err(iirsnn::Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|t| t.best_epoch)),
    }
}
