use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::features::{NormStats, N_FEATURES};

fn tiny_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        cnn_filters: vec![8, 8],
        kernels: vec![3, 2],
        pools: vec![2, 2],
        padding: 1,
        stride: 1,
        dilation: 1,
        feature_nn: vec![8, 8],
        prediction_nn: vec![8],
        cnn_flatten_out: 8,
        input_image: [1, 12, 10],
        input_features: 4,
    }
}

fn palette_image(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)]).collect()
}

fn random_inputs<T: Real>(arch: &ArchitectureConfig, n: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = arch.input_image;
    let img = palette_image(n * c * h * w, &mut rng).into_iter().map(|v| T::of(v as f64)).collect();
    let feat = (0..n * arch.input_features)
        .map(|_| T::of(rng.random_range(-3.0..3.0)))
        .collect();
    (
        Tensor::new(vec![n, c, h, w], img).unwrap(),
        Tensor::new(vec![n, arch.input_features], feat).unwrap(),
    )
}

fn norm_identity(n: usize) -> NormStats {
    NormStats {
        mean: vec![0.0; n],
        std: vec![1.0; n],
        degenerate: vec![false; n],
    }
}

fn meta() -> TrainMeta {
    TrainMeta {
        seed: 0,
        epochs_run: 0,
        best_epoch: 0,
        final_train_loss: 0.0,
        final_val_loss: None,
        n_train: 0,
        n_val: 0,
    }
}

#[test]
fn full_architecture_shape_chain() {
    let arch = ArchitectureConfig::default();
    // n_out = n + 2*3 - k + 1, then floor(n / 2).
    let (mut h, mut w) = (128usize, 64usize);
    let mut want = Vec::new();
    for k in [5, 3, 3, 3, 3, 2] {
        let conv = (h + 6 - k + 1, w + 6 - k + 1);
        (h, w) = (conv.0 / 2, conv.1 / 2);
        want.push((conv, (h, w)));
    }
    assert_eq!(want[0], ((130, 66), (65, 33)));
    let pooled: Vec<_> = want.iter().map(|b| b.1).collect();
    assert_eq!(pooled, [(65, 33), (34, 18), (19, 11), (11, 7), (7, 5), (6, 5)]);
    assert_eq!(arch.block_shapes().unwrap(), want);
    assert_eq!(arch.flatten_len().unwrap(), 30);

    let model = Model::<f32>::new(arch.clone(), 1).unwrap();
    let (img, feat) = random_inputs::<f32>(&arch, 2, 3);
    let mut trace = Vec::new();
    let out = model.infer_traced(img, feat, &mut trace).unwrap();
    assert_eq!(out.shape(), [2, 1]);
    let shape_of = |name: &str| trace.iter().find(|(n, _)| n == name).unwrap().1.clone();
    let filters = [32, 16, 16, 16, 10, 1];
    for (i, ((conv, pool), f)) in want.iter().zip(filters).enumerate() {
        assert_eq!(shape_of(&format!("cnn.{i}.conv")), [2, f, conv.0, conv.1]);
        assert_eq!(shape_of(&format!("cnn.{i}.pool")), [2, f, pool.0, pool.1]);
    }
    assert_eq!(shape_of("cnn.flatten"), [2, 32]);
    assert_eq!(shape_of("feature.3.bn"), [2, 32]);
    assert_eq!(shape_of("prediction.0.linear"), [2, 16]);
    assert_eq!(shape_of("prediction.out"), [2, 1]);
}

#[test]
fn gradients_match_central_differences() {
    let arch = tiny_arch();
    let mut model = Model::<f64>::new(arch.clone(), 5).unwrap();
    model.set_output_affine(1.7, 0.3);
    let n = 4;
    let (img, feat) = random_inputs::<f64>(&arch, n, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let coef: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |m: &mut Model<f64>, f: &Tensor<f64>| -> f64 {
        let out = m.forward(img.clone(), f.clone(), true).unwrap();
        out.data().iter().zip(&coef).map(|(o, c)| o * c).sum()
    };

    loss(&mut model, &feat);
    model.zero_grad();
    let dfeat = model.backward(Tensor::new(vec![n, 1], coef.clone()).unwrap()).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        model.params_mut().into_iter().map(|(k, p)| (k, p.grad.clone())).collect();

    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-5);
    let mut worst = 0.0f64;
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if grad.len() <= 8 {
            (0..grad.len()).collect()
        } else {
            (0..8).map(|_| rng.random_range(0..grad.len())).collect()
        };
        for j in picks {
            let orig = model.params_mut()[pi].1.value[j];
            model.params_mut()[pi].1.value[j] = orig + h;
            let up = loss(&mut model, &feat);
            model.params_mut()[pi].1.value[j] = orig - h;
            let down = loss(&mut model, &feat);
            model.params_mut()[pi].1.value[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel(grad[j], numeric);
            worst = worst.max(e);
            assert!(e < 1e-4, "{name}[{j}]: analytic {} vs numeric {numeric}", grad[j]);
        }
    }
    for j in 0..feat.len() {
        let mut f = feat.clone();
        f.data_mut()[j] += h;
        let up = loss(&mut model, &f);
        f.data_mut()[j] -= 2.0 * h;
        let down = loss(&mut model, &f);
        let numeric = (up - down) / (2.0 * h);
        assert!(rel(dfeat.data()[j], numeric) < 1e-4, "input feature {j}");
    }
    assert!(worst < 1e-4);
}

#[test]
fn memorizes_ten_samples() {
    let arch = ArchitectureConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 10;
    let data = TrainingSet {
        images: palette_image(n * arch.image_len(), &mut rng),
        features: (0..n * N_FEATURES).map(|_| rng.random_range(-2.0..2.0)).collect(),
        targets: (0..n).map(|_| rng.random_range(-10.0..10.0)).collect(),
        image_len: arch.image_len(),
        n_features: N_FEATURES,
    };
    let mut model = Model::<f32>::new(arch, 4).unwrap();
    let cfg = TrainConfig {
        max_epochs: 500,
        early_stop_patience: None,
        batch_size: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let hist = fit(&mut model, &data, &TrainingSet::default(), &cfg).unwrap();
    assert_eq!(hist.epochs_run(), 500);
    let best = hist.train_loss[hist.best_epoch];
    assert!(best < 0.01, "train mse {best}");
}

fn tiny_set(n: usize, seed: u64) -> TrainingSet {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainingSet {
        images: palette_image(n * arch.image_len(), &mut rng),
        features: (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect(),
        targets: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
        image_len: arch.image_len(),
        n_features: 4,
    }
}

fn tiny_checkpoint(seed: u64) -> (ModelCheckpoint, TrainHistory) {
    let mut model = Model::<f32>::new(tiny_arch(), seed).unwrap();
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let hist = fit(&mut model, &tiny_set(37, 1), &tiny_set(9, 2), &cfg).unwrap();
    (ModelCheckpoint::from_model(&mut model, norm_identity(4), meta()), hist)
}

#[test]
fn training_is_deterministic() {
    let (a, ha) = tiny_checkpoint(3);
    let (b, hb) = tiny_checkpoint(3);
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(ha, hb);
    assert_eq!(ha.val_loss.len(), ha.epochs_run());
    let (c, _) = tiny_checkpoint(4);
    assert_ne!(a.weights, c.weights);
}

#[test]
fn early_stopping_halts_and_keeps_best() {
    let mut model = Model::<f32>::new(tiny_arch(), 2).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        early_stop_patience: Some(2),
        batch_size: 8,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let hist = fit(&mut model, &tiny_set(30, 5), &tiny_set(10, 6), &cfg).unwrap();
    assert!(hist.epochs_run() < 200);
    assert_eq!(hist.epochs_run(), hist.best_epoch + 3);
    let best = hist.val_loss[hist.best_epoch];
    assert!(hist.val_loss.iter().all(|v| *v >= best));
    let now = mse(&predict_set(&model, &tiny_set(10, 6)).unwrap(), &tiny_set(10, 6).targets);
    assert!((now - best).abs() < 1e-6 * best.max(1.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (ck, _) = tiny_checkpoint(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let loaded = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let (img, feat) = random_inputs::<f32>(&tiny_arch(), 5, 77);
    let a = ck.to_model().unwrap().infer(img.clone(), feat.clone()).unwrap();
    let b = loaded.to_model().unwrap().infer(img, feat).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (ck, _) = tiny_checkpoint(8);
    let text = ck.to_json();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.json");
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(ModelCheckpoint::load(&path), Err(Error::Checkpoint(_))));

    let mut other = ck.clone();
    other.architecture.cnn_filters[0] = 16;
    let err = other.to_model().unwrap_err();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("cnn.0.conv.weight")), "{err}");

    let mut other = ck.clone();
    other.version = 99;
    assert!(matches!(other.to_model(), Err(Error::Checkpoint(_))));

    let mut other = ck.clone();
    other.weights.remove("feature.1.bn.running_var");
    assert!(matches!(other.to_model(), Err(Error::Checkpoint(_))));

    let mut other = ck;
    other.weights.insert("extra".into(), String::new());
    assert!(matches!(other.to_model(), Err(Error::Checkpoint(_))));
}

#[test]
fn inference_is_batch_independent() {
    let arch = ArchitectureConfig::default();
    let mut model = Model::<f32>::new(arch.clone(), 6).unwrap();
    // Train briefly so running statistics are not the initial identity.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = TrainingSet {
        images: palette_image(4 * arch.image_len(), &mut rng),
        features: (0..40).map(|_| rng.random_range(-2.0..2.0)).collect(),
        targets: vec![1.0, -2.0, 0.5, 3.0],
        image_len: arch.image_len(),
        n_features: N_FEATURES,
    };
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &TrainingSet::default(), &cfg).unwrap();
    let single = predict_set(&model, &TrainingSet {
        images: data.images[..arch.image_len()].to_vec(),
        features: data.features[..N_FEATURES].to_vec(),
        ..data.clone()
    })
    .unwrap();
    let (img, feat) = data.batch(&[0, 1, 0, 2, 0], &arch).unwrap();
    let batch = model.infer(img, feat).unwrap();
    for i in [0, 2, 4] {
        assert_eq!(batch.data()[i].to_bits(), single[0].to_bits());
    }
}

#[test]
fn outputs_are_finite_over_feature_range() {
    let arch = ArchitectureConfig::default();
    let model = Model::<f32>::new(arch.clone(), 10).unwrap();
    for chunk in 0..4 {
        let (img, feat) = random_inputs::<f32>(&arch, 250, 100 + chunk);
        let out = model.infer(img, feat).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn single_and_double_precision_agree() {
    let arch = tiny_arch();
    let mut m32 = Model::<f32>::new(arch.clone(), 12).unwrap();
    let m64 = m32.cast::<f64>();
    let (img, feat) = random_inputs::<f64>(&arch, 6, 1);
    let a = m32.infer(img.cast(), feat.cast()).unwrap();
    let b = m64.infer(img, feat).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((*x as f64 - y).abs() < 1e-4 * y.abs().max(1.0));
    }
}

#[test]
fn non_finite_activation_names_the_layer() {
    let arch = tiny_arch();
    let mut model = Model::<f32>::new(arch.clone(), 1).unwrap();
    model.params_mut()[0].1.value[0] = f32::NAN;
    let (img, feat) = random_inputs::<f32>(&arch, 2, 1);
    match model.infer(img, feat) {
        Err(Error::Numeric { layer, .. }) => assert_eq!(layer, "cnn.0.conv"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn shape_errors_on_bad_inputs() {
    let arch = tiny_arch();
    let model = Model::<f32>::new(arch.clone(), 1).unwrap();
    let (img, _) = random_inputs::<f32>(&arch, 2, 1);
    let bad = Tensor::zeros(vec![2, 5]);
    assert!(matches!(model.infer(img, bad), Err(Error::Shape(_))));
}

/// Deterministic fixture input for the golden forward value.
fn fixture_input(arch: &ArchitectureConfig) -> (Tensor<f32>, Tensor<f32>) {
    let [c, h, w] = arch.input_image;
    let img = (0..h * w)
        .map(|i| {
            let (r, col) = (i / w, i % w);
            if (20..40).contains(&r) && (10..30).contains(&col) {
                0.0
            } else if r > 100 {
                0.5
            } else {
                1.0
            }
        })
        .collect();
    let feat = (0..arch.input_features).map(|i| (i as f32 - 4.5) / 3.0).collect();
    (
        Tensor::new(vec![1, c, h, w], img).unwrap(),
        Tensor::new(vec![1, arch.input_features], feat).unwrap(),
    )
}

/// Overwrites every bias and batch-norm statistic with a fixed pattern so the
/// golden value exercises all of them.
fn perturb_state<T: Real>(m: &mut Model<T>) {
    for (k, v) in m.state_mut() {
        if k.ends_with(".weight") || k == "output.affine" {
            continue;
        }
        for (i, x) in v.iter_mut().enumerate() {
            let t = i as f32;
            let y = if k.ends_with(".gamma") {
                1.0 + 0.3 * (0.7 * t).sin()
            } else if k.ends_with(".beta") {
                0.2 * (1.3 * t).cos()
            } else if k.ends_with("running_mean") {
                0.1 * (0.9 * t).sin()
            } else if k.ends_with("running_var") {
                1.0 + 0.5 * (1.1 * t).cos().abs()
            } else {
                0.05 * (2.1 * t).sin()
            };
            *x = T::of(y as f64);
        }
    }
}

/// Reference output for seed 2024 on the fixture, computed independently in
/// double precision with a conventional deep-learning framework.
const GOLDEN_FORWARD: f64 = -0.3282109831892184;

#[test]
fn golden_forward_value() {
    let arch = ArchitectureConfig::default();
    let mut m32 = Model::<f32>::new(arch.clone(), 2024).unwrap();
    perturb_state(&mut m32);
    let m64: Model<f64> = m32.cast();
    let (img, feat) = fixture_input(&arch);
    let a = m32.infer(img.clone(), feat.clone()).unwrap().data()[0] as f64;
    let b = m64.infer(img.cast(), feat.cast()).unwrap().data()[0];
    assert!((b - GOLDEN_FORWARD).abs() < 1e-9, "f64 forward {b}");
    assert!((a - GOLDEN_FORWARD).abs() < 1e-5, "f32 forward {a}");
}
