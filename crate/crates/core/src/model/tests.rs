use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::Network;
use super::*;
use crate::cells::CellKind;
use crate::nn::gradcheck::{check, DEFAULT_STEP};
use crate::nn::{Array, Bound, Graph, Mode, ParamStore, RunningStats};

fn tiny_config(cell: CellKind) -> ModelConfig {
    ModelConfig {
        cell,
        r: 3,
        lmu: LmuSettings { d: 4, theta: 0.1, ..Default::default() },
        ..ModelConfig::default().with_filters(&[4, 3, 2])
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn default_encoder_keeps_time_and_flattens_features() {
    let net = Network::<f32>::new(ModelConfig::default(), 273, 233, 3).unwrap();
    // ceil(ceil(ceil(273/2)/2)/2) = 35 rows of 32 channels
    assert_eq!(net.pooled_features(), 35);
    assert_eq!(net.feat_dim(), 1120);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new(0);
    net.init_params(&mut store, &mut rng).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Array::uniform(&[1, 273, 233], 1.0, &mut rng));
    let mut stats = net.running_stats(&store).unwrap();
    let seq = net.encode(&mut g, &bound, x, Mode::Eval, &mut stats).unwrap();
    assert_eq!(g.shape(seq), &[1, 233, 1120]);
}

#[test]
fn zero_input_encodes_to_zero() {
    let net = Network::<f64>::new(tiny_config(CellKind::Lmu), 9, 12, 2).unwrap();
    let mut store = ParamStore::new(1);
    net.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Array::zeros(&[2, 9, 12]));
    let mut stats = net.running_stats(&store).unwrap();
    let seq = net.encode(&mut g, &bound, x, Mode::Eval, &mut stats).unwrap();
    assert!(g.value(seq).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_is_time_equivariant_away_from_the_edges() {
    let (f, t, shift) = (7, 40, 9);
    let net = Network::<f64>::new(tiny_config(CellKind::None), f, t, 2).unwrap();
    let mut store = ParamStore::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    net.init_params(&mut store, &mut rng).unwrap();
    let xa: Array<f64> = Array::uniform(&[1, f, t], 1.0, &mut rng);
    let mut shifted = vec![0.0; f * t];
    for r in 0..f {
        for c in 0..t {
            shifted[r * t + (c + shift) % t] = xa.data()[r * t + c];
        }
    }
    let run = |data: Vec<f64>| {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(Array::from_vec(&[1, f, t], data).unwrap());
        let mut stats = net.running_stats(&store).unwrap();
        let seq = net.encode(&mut g, &bound, x, Mode::Eval, &mut stats).unwrap();
        g.value(seq).clone()
    };
    let a = run(xa.data().to_vec());
    let b = run(shifted);
    let width = net.feat_dim();
    // three 3-wide kernels see 3 frames either side; zero padding breaks the
    // wrap-around only within that radius of the sequence ends
    let radius = 3;
    for c in radius..t - radius {
        let target = (c + shift) % t;
        if target < radius || target >= t - radius {
            continue;
        }
        for k in 0..width {
            let (va, vb) = (a.data()[c * width + k], b.data()[target * width + k]);
            assert!((va - vb).abs() < 1e-12, "frame {c} feature {k}");
        }
    }
}

#[test]
fn untrained_logits_are_finite_and_deterministic() {
    for cell in [CellKind::Lmu, CellKind::Lstm, CellKind::None] {
        let net = Network::<f32>::new(tiny_config(cell), 10, 16, 3).unwrap();
        let mut store = ParamStore::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.init_params(&mut store, &mut rng).unwrap();
        let sample: Vec<f32> = (0..160).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = [sample.clone(), sample].concat();
        let logits = checkpoint::eval_logits(&net, &store, data, 2).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0], logits[1]);
        assert!(logits[0].iter().all(|v| v.is_finite()));
        assert!((softmax(&logits[0]).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn subset_rows_are_zeroed_before_standardising() {
    let model = ModelConfig { feature_subset: "mfcc+stft".parse().unwrap(), ..Default::default() };
    let frames = 2;
    let z = ZScore { mean: vec![1.0; 273], std: vec![2.0; 273] };
    let mut s = vec![5.0f32; 273 * frames];
    checkpoint::prepare_sample(&model, &z, 273, &mut s).unwrap();
    assert_eq!(s[0], 2.0);
    assert_eq!(s[269 * frames], 2.0);
    for r in 270..273 {
        // zeroed then standardised with the stored statistics
        assert_eq!(s[r * frames], -0.5);
    }
}

/// Every learned parameter of a tiny end-to-end model against central
/// differences, with batch norm in training mode and a fixed dropout mask.
fn end_to_end_gradcheck(cell: CellKind) -> f64 {
    let (f, t) = (5, 8);
    let model = ModelConfig { dropout: 0.3, ..tiny_config(cell) };
    let net = Network::<f64>::new(model, f, t, 3).unwrap();
    let mut store = ParamStore::<f64>::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    net.init_params(&mut store, &mut rng).unwrap();
    let x: Array<f64> = Array::uniform(&[2, f, t], 1.0, &mut rng);
    let names: Vec<String> = store.names().map(String::from).collect();
    let trainable: Vec<String> = names.iter().filter(|n| !n.contains("running_")).cloned().collect();
    let inputs: Vec<Array<f64>> = trainable.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let report = check(&inputs, DEFAULT_STEP, |g, vars| {
        let bound = Bound::from_named(trainable.iter().cloned().zip(vars.iter().copied()));
        let xv = g.constant(x.clone());
        let mut stats: Vec<RunningStats<f64>> = net.running_stats(&store)?;
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let logits = net.forward(g, &bound, xv, Mode::Train, &mut mask_rng, &mut stats)?;
        g.softmax_cross_entropy(logits, &[0, 2], Some(&[1.0, 0.5, 2.0]))
    })
    .unwrap();
    assert_eq!(report.checked, inputs.iter().map(|a| a.len()).sum::<usize>());
    report.max_rel_err
}

#[test]
fn end_to_end_gradients_lmu() {
    let e = end_to_end_gradcheck(CellKind::Lmu);
    assert!(e < 1e-3, "{e}");
}

#[test]
fn end_to_end_gradients_lstm() {
    let e = end_to_end_gradcheck(CellKind::Lstm);
    assert!(e < 1e-3, "{e}");
}

#[test]
fn end_to_end_gradients_plain_cnn() {
    let e = end_to_end_gradcheck(CellKind::None);
    assert!(e < 1e-3, "{e}");
}

/// Three classes distinguished by which feature row carries a tone-like bump.
fn toy_data(n_per_class: usize, seed: u64) -> Dataset {
    let (f, t) = (9, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(f, t);
    for i in 0..3 * n_per_class {
        let label = i % 3;
        let mut x: Vec<f32> = (0..f * t).map(|_| rng.random_range(-0.3..0.3)).collect();
        for c in 0..t {
            x[(2 + 2 * label) * t + c] += 1.5;
        }
        ds.push(x, label).unwrap();
    }
    ds
}

fn labels3() -> Vec<String> {
    vec!["a".into(), "b".into(), "c".into()]
}

#[test]
fn frozen_learning_rate_stops_after_two_epochs() {
    let model = tiny_config(CellKind::Lmu);
    let cfg = TrainConfig { lr: 0.0, patience: 1, max_epochs: 20, ..Default::default() };
    let (_, report) = train(&toy_data(4, 1), &toy_data(2, 2), &labels3(), &model, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.stopped_early);
}

#[test]
fn training_learns_and_is_deterministic() {
    let model = ModelConfig { dropout: 0.1, ..tiny_config(CellKind::Lmu) };
    let cfg = TrainConfig { lr: 0.01, max_epochs: 40, patience: 40, seed: 5, ..Default::default() };
    let (tr, va) = (toy_data(8, 3), toy_data(4, 4));
    let (ck1, r1) = train(&tr, &va, &labels3(), &model, &cfg).unwrap();
    let (ck2, r2) = train(&tr, &va, &labels3(), &model, &cfg).unwrap();
    let strip = |r: &TrainReport| r.epochs.iter().map(|e| (e.epoch, e.train_loss, e.val_macro_f1)).collect::<Vec<_>>();
    assert_eq!(strip(&r1), strip(&r2));
    assert_eq!(ck1.store.to_bytes(), ck2.store.to_bytes());
    assert!(r1.epochs[4].train_loss < r1.epochs[0].train_loss);
    let max = r1.epochs.iter().map(|e| e.val_macro_f1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r1.best_val_macro_f1, max);
    assert_eq!(ck1.best_val_macro_f1, max);
    assert!(max >= 0.9, "{r1:?}");
}

#[test]
fn checkpoint_roundtrip_preserves_logits() {
    let model = tiny_config(CellKind::Lstm);
    let cfg = TrainConfig { max_epochs: 2, ..Default::default() };
    let (tr, va) = (toy_data(3, 5), toy_data(2, 6));
    let (ck, _) = train(&tr, &va, &labels3(), &model, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let a = predict_logits(&ck, &va, 4).unwrap();
    let b = predict_logits(&back, &va, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), va.len());
    assert_eq!(back.labels, labels3());

    // a configuration edit without a matching hash is refused
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"r\": 3", "\"r\": 4", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(crate::Error::Config(_))));
}

#[test]
fn missing_class_in_training_data() {
    let mut tr = toy_data(2, 7);
    tr.y.iter_mut().for_each(|y| *y = (*y).min(1));
    let r = train(&tr, &toy_data(1, 8), &labels3(), &tiny_config(CellKind::Lmu), &TrainConfig::default());
    assert!(matches!(r, Err(crate::Error::Data(_))));
}
