use super::*;
use crate::rng::{seeded, standard_normal};

fn small(channels: usize, image_size: usize, depth: usize) -> NetworkConfig {
    NetworkConfig {
        channels,
        depth,
        fourier_dim: 4,
        fourier_seed: 3,
        image_size,
    }
}

fn inputs<T: Element>(n: usize, size: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = seeded(seed);
    let x = standard_normal([n, 3, size, size], &mut rng);
    let line = Tensor::from_fn([n, 1, size, size], |i| T::lit(if i % 7 == 0 { -1.0 } else { 1.0 }));
    (x, line)
}

#[test]
fn fourier_embedding_reference_values() {
    let b = [0.3f64, -1.2, 2.0];
    let g = fourier_embed(0.0, &b);
    assert_eq!(&g[..3], &[1.0, 1.0, 1.0]);
    assert_eq!(&g[3..], &[0.0, 0.0, 0.0]);

    let g = fourier_embed(1.0, &[0.5f64]);
    assert!((g[0] + 1.0).abs() < 1e-15);
    assert!(g[1].abs() < 1e-15);

    let g = fourier_embed(0.37, &b);
    let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 3f64.sqrt()).abs() < 1e-12);
    assert!(g.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn config_validation() {
    assert!(NetworkConfig::default().validate().is_ok());
    assert!(NetworkConfig { channels: 0, ..Default::default() }.validate().is_err());
    assert!(NetworkConfig { image_size: 24, ..Default::default() }.validate().is_err());
    assert!(NetworkConfig { image_size: 48, ..Default::default() }.validate().is_ok());
}

#[test]
fn zero_mlp_weights_return_the_final_bias() {
    let cfg = small(2, 8, 2);
    let mut model = DenoiserModel::<f64>::zeroed(cfg).unwrap();
    let bias = Tensor::new([8], (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
    model.params_mut().set("mlp.4.bias", bias.clone()).unwrap();
    let e = model.embed(&[0.3]).unwrap();
    assert_eq!(e.shape(), &[1, 8]);
    assert_eq!(e.data(), bias.data());
}

#[test]
fn single_path_mlp_matches_hand_composition() {
    // C = 1 gives a 4-wide embedding; route everything through unit 0.
    let cfg = NetworkConfig { fourier_dim: 1, ..small(1, 8, 2) };
    let mut model = DenoiserModel::<f64>::zeroed(cfg).unwrap();
    // b = 0 makes gamma = [cos 0, sin 0] = [1, 0] for any alpha_bar
    let mut w0 = Tensor::zeros([4, 2]);
    w0.data_mut()[0] = 2.0;
    model.params_mut().set("mlp.0.weight", w0).unwrap();
    model.params_mut().set("mlp.0.bias", Tensor::new([4], vec![0.5, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let eye = Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    for l in 1..5 {
        model.params_mut().set(&format!("mlp.{l}.weight"), eye.clone()).unwrap();
    }
    model.params_mut().set("mlp.4.bias", Tensor::new([4], vec![0.25, 0.0, -1.0, 0.0]).unwrap()).unwrap();

    let m = |x: f64| x * (1.0 + x.exp()).ln().tanh();
    let unit0 = m(m(m(m(2.0 * 1.0 + 0.5)))) + 0.25;
    let e = model.embed(&[0.8]).unwrap();
    assert!((e.data()[0] - unit0).abs() < 1e-14, "{} vs {unit0}", e.data()[0]);
    assert_eq!(&e.data()[1..], &[0.0, -1.0, 0.0]);
}

#[test]
fn random_embeddings_depend_on_alpha_bar() {
    let model = DenoiserModel::<f32>::new(small(2, 8, 2), &mut seeded(1)).unwrap();
    let e = model.embed(&[0.9, 0.01]).unwrap();
    let (a, b) = e.data().split_at(8);
    assert!(a.iter().zip(b).any(|(x, y)| x != y));
}

#[test]
fn film_reference_cases() {
    let mut model = DenoiserModel::<f64>::zeroed(small(1, 8, 2)).unwrap();
    let features = Tensor::new([1, 1, 2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap();
    let embedding = Tensor::full([1, 4], 0.7);

    model.params_mut().set("film.0.scale.bias", Tensor::full([1], 1.0)).unwrap();
    assert_eq!(model.film(0, &features, &embedding).unwrap(), features);

    model.params_mut().set("film.0.scale.bias", Tensor::full([1], 0.0)).unwrap();
    model.params_mut().set("film.0.shift.bias", Tensor::full([1], 0.25)).unwrap();
    assert!(model.film(0, &features, &embedding).unwrap().data().iter().all(|&v| v == 0.25));

    model.params_mut().set("film.0.scale.bias", Tensor::full([1], 2.0)).unwrap();
    model.params_mut().set("film.0.shift.bias", Tensor::full([1], -1.0)).unwrap();
    let single = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
    assert_eq!(model.film(0, &single, &embedding).unwrap().data(), &[5.0]);

    let wrong = Tensor::zeros([1, 2, 1, 1]);
    assert!(model.film(0, &wrong, &embedding).is_err());
}

#[test]
fn zero_model_predicts_zero() {
    let model = DenoiserModel::<f32>::zeroed(small(2, 16, 3)).unwrap();
    let (x, line) = inputs::<f32>(2, 16, 1);
    let out = model.predict_eps(&x, 0.5, &line).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn prediction_is_deterministic_and_shape_preserving() {
    let model = DenoiserModel::<f32>::new(small(2, 16, 2), &mut seeded(5)).unwrap();
    for n in [1, 3] {
        let (x, line) = inputs::<f32>(n, 16, 2);
        let a = model.predict_eps(&x, 0.3, &line).unwrap();
        let b = model.predict_eps(&x, 0.3, &line).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a.data(), b.data());
        assert!(a.all_finite());
    }
}

#[test]
fn batched_prediction_matches_individual_samples() {
    let model = DenoiserModel::<f32>::new(small(2, 16, 2), &mut seeded(5)).unwrap();
    let (x, line) = inputs::<f32>(3, 16, 9);
    let batched = model.predict_eps(&x, 0.6, &line).unwrap();
    for i in 0..3 {
        let single = model.predict_eps(&x.batch_item(i).unwrap(), 0.6, &line.batch_item(i).unwrap()).unwrap();
        assert_eq!(single.data(), batched.batch_item(i).unwrap().data());
    }
}

#[test]
fn cached_encoder_gives_identical_output() {
    let model = DenoiserModel::<f32>::new(small(2, 16, 2), &mut seeded(6)).unwrap();
    let (x1, line) = inputs::<f32>(2, 16, 3);
    let (x2, _) = inputs::<f32>(2, 16, 4);
    let features = model.encode(&line).unwrap();
    for x in [&x1, &x2] {
        let direct = model.predict_eps(x, 0.2, &line).unwrap();
        let cached = model.predict_eps_cached(x, 0.2, &features).unwrap();
        assert_eq!(direct.data(), cached.data());
    }
    let again = model.encode(&line).unwrap();
    for (a, b) in features.levels().zip(again.levels()) {
        assert_eq!(a, b);
    }
}

#[test]
fn alpha_bar_reaches_the_output() {
    let model = DenoiserModel::<f32>::new(small(2, 16, 2), &mut seeded(7)).unwrap();
    let (x, line) = inputs::<f32>(1, 16, 5);
    let hi = model.predict_eps(&x, 0.9, &line).unwrap();
    let lo = model.predict_eps(&x, 0.01, &line).unwrap();
    let diff: f32 = hi.data().iter().zip(lo.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
}

#[test]
fn rejects_mismatched_resolution() {
    let model = DenoiserModel::<f32>::zeroed(small(2, 16, 2)).unwrap();
    let (x, line) = inputs::<f32>(1, 8, 1);
    let err = model.predict_eps(&x, 0.5, &line).unwrap_err();
    assert!(err.to_string().contains("resolution"), "{err}");
    let (x, _) = inputs::<f32>(1, 16, 1);
    assert!(model.predict_eps(&x, 0.5, &Tensor::zeros([2, 1, 16, 16])).is_err());
    assert!(model.predict_eps(&x, 0.5, &Tensor::zeros([1, 3, 16, 16])).is_err());
}

#[test]
fn parameter_names_are_unique_and_finite() {
    let model = DenoiserModel::<f32>::new(NetworkConfig::default(), &mut seeded(1)).unwrap();
    let mut names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
    let count = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), count);
    assert!(model.params().all_finite());
}
