use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;
use crate::numerics::{check_tape, Adam, Tensor};
use crate::rng::Rng;

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dense_const(tape: &mut Tape, w: Tensor, b: Tensor) -> Dense {
    Dense {
        w: tape.constant(w),
        b: tape.constant(b),
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        transform_hidden: 4,
        node_emb: 4,
        graph_emb: 5,
        readout_hidden: vec![3, 4],
        classes: 2,
        window: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

#[test]
fn intra_correlation_hand_value() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let w = tape.constant(Tensor::identity(2));
    let a = intra_correlation(&mut tape, x, w).unwrap();
    let e = std::f64::consts::E;
    let a = tape.value(a);
    assert!((a.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
    assert!((a.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert!((a.get(0, 0) - 0.7311).abs() < 1e-4);
    assert!((a.get(1, 1) - 0.7311).abs() < 1e-4);
}

#[test]
fn identical_nodes_get_uniform_adjacency() {
    let mut g = rng(1);
    let row = random(&[1, 5], &mut g);
    let x = Tensor::from_rows(&[row.data(), row.data(), row.data(), row.data()]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let w = tape.constant(random(&[5, 5], &mut g));
    let a = intra_correlation(&mut tape, xv, w).unwrap();
    for v in tape.value(a).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn inter_correlation_hand_value_and_node_mismatch() {
    let mut tape = Tape::new();
    let h = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let w = tape.constant(Tensor::identity(2));
    let a = inter_correlation(&mut tape, h, h, w).unwrap();
    let e = std::f64::consts::E;
    assert!((tape.value(a).get(1, 1) - e / (e + 1.0)).abs() < 1e-15);
    assert!((tape.value(a).get(1, 0) - 1.0 / (e + 1.0)).abs() < 1e-15);

    let three = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(inter_correlation(&mut tape, h, three, w).is_err());
}

#[test]
fn message_pass_with_zero_weights_is_one_half() {
    let mut g = rng(2);
    let mut tape = Tape::new();
    let a = tape.constant(random(&[3, 3], &mut g));
    let h = tape.constant(random(&[3, 4], &mut g));
    let agg = dense_const(&mut tape, Tensor::zeros(&[8, 5]), Tensor::zeros(&[1, 5]));
    let out = message_pass(&mut tape, a, h, agg).unwrap();
    assert_eq!(tape.value(out).shape(), &[3, 5]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.5));
}

#[test]
fn message_pass_single_node() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[&[1.0]]));
    let h = tape.constant(t(&[&[0.5, -2.0]]));
    let agg = dense_const(&mut tape, Tensor::identity(4).reshape(&[4, 4]).unwrap(), Tensor::zeros(&[1, 4]));
    let out = message_pass(&mut tape, a, h, agg).unwrap();
    let expected = [0.5, -2.0, 0.5, -2.0].map(sigmoid);
    for (o, e) in tape.value(out).data().iter().zip(expected) {
        assert!((o - e).abs() < 1e-15);
    }
}

#[test]
fn message_pass_matches_per_node_loop() {
    let mut g = rng(3);
    let (n, din, dout) = (4, 3, 5);
    let a = random(&[n, n], &mut g).map(f64::abs);
    let h = random(&[n, din], &mut g);
    let w = random(&[2 * din, dout], &mut g);
    let b = random(&[1, dout], &mut g);

    let mut tape = Tape::new();
    let (av, hv) = (tape.constant(a.clone()), tape.constant(h.clone()));
    let agg = dense_const(&mut tape, w.clone(), b.clone());
    let out = message_pass(&mut tape, av, hv, agg).unwrap();

    for i in 0..n {
        let mut input = h.row_slice(i).to_vec();
        for k in 0..din {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a.get(i, j) * h.get(j, k);
            }
            input.push(acc / n as f64);
        }
        for o in 0..dout {
            let mut z = b.get(0, o);
            for (k, v) in input.iter().enumerate() {
                z += v * w.get(k, o);
            }
            assert!((tape.value(out).get(i, o) - sigmoid(z)).abs() < 1e-12);
        }
    }
}

fn readout_fixture(g: &mut Rng) -> (Tensor, Tensor, Vec<(Tensor, Tensor)>) {
    let h = random(&[5, 4], g);
    let x = random(&[5, 3], g);
    let layers = vec![
        (random(&[7, 3], g), random(&[1, 3], g)),
        (random(&[3, 6], g), random(&[1, 6], g)),
        (random(&[6, 2], g), random(&[1, 2], g)),
    ];
    (h, x, layers)
}

fn run_readout(h: &Tensor, x: &Tensor, layers: &[(Tensor, Tensor)]) -> Tensor {
    let mut tape = Tape::new();
    let (hv, xv) = (tape.constant(h.clone()), tape.constant(x.clone()));
    let stack: Vec<Dense> = layers
        .iter()
        .map(|(w, b)| dense_const(&mut tape, w.clone(), b.clone()))
        .collect();
    let out = graph_readout(&mut tape, hv, xv, &stack).unwrap();
    tape.value(out).clone()
}

#[test]
fn readout_matches_mean_then_mlp() {
    let mut g = rng(4);
    let (h, x, layers) = readout_fixture(&mut g);
    let n = h.shape()[0];
    let mut v: Vec<f64> = (0..7)
        .map(|k| {
            (0..n)
                .map(|i| if k < 4 { h.get(i, k) } else { x.get(i, k - 4) })
                .sum::<f64>()
                / n as f64
        })
        .collect();
    for (li, (w, b)) in layers.iter().enumerate() {
        let (fan_in, fan_out) = w.dims2().unwrap();
        v = (0..fan_out)
            .map(|o| {
                let z = b.get(0, o) + (0..fan_in).map(|k| v[k] * w.get(k, o)).sum::<f64>();
                if li + 1 < layers.len() {
                    sigmoid(z)
                } else {
                    z
                }
            })
            .collect();
    }
    let out = run_readout(&h, &x, &layers);
    assert_eq!(out.shape(), &[1, 2]);
    for (a, b) in out.data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn readout_is_permutation_invariant_and_constant_on_zeros() {
    let mut g = rng(5);
    let (h, x, layers) = readout_fixture(&mut g);
    let perm = [3, 0, 4, 1, 2];
    let hp = Tensor::from_rows(&perm.map(|i| h.row_slice(i).to_vec())).unwrap();
    let xp = Tensor::from_rows(&perm.map(|i| x.row_slice(i).to_vec())).unwrap();
    let a = run_readout(&h, &x, &layers);
    let b = run_readout(&hp, &xp, &layers);
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-12);
    }

    let zero_layers: Vec<(Tensor, Tensor)> = layers
        .iter()
        .map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape())))
        .collect();
    let z = run_readout(&Tensor::zeros(&[5, 4]), &Tensor::zeros(&[5, 3]), &zero_layers);
    assert_eq!(z.data(), &[0.0, 0.0]);
}

#[test]
fn fusion_rows_are_normalised() {
    let mut g = rng(6);
    let mut tape = Tape::new();
    let row = random(&[1, 4], &mut g);
    let h = tape.constant(Tensor::from_rows(&[row.data(), row.data(), row.data()]).unwrap());
    let ge = tape.constant(random(&[1, 6], &mut g));
    let fuse = dense_const(&mut tape, random(&[10, 4], &mut g), random(&[1, 4], &mut g));
    let out = fuse_embeddings(&mut tape, h, ge, fuse, 1e-5).unwrap();
    let out = tape.value(out);
    assert_eq!(out.row_slice(0), out.row_slice(1));
    assert_eq!(out.row_slice(0), out.row_slice(2));

    let h = tape.constant(random(&[5, 4], &mut g));
    let out = fuse_embeddings(&mut tape, h, ge, fuse, 1e-5).unwrap();
    for i in 0..5 {
        let r = tape.value(out).row_slice(i);
        let mean = r.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
    }
}

#[test]
fn zero_window_returns_fused_embedding_unchanged() {
    let mut g = rng(7);
    let mut tape = Tape::new();
    let h = tape.constant(random(&[4, 3], &mut g));
    let w_tem = tape.constant(random(&[3, 3], &mut g));
    let agg = dense_const(&mut tape, random(&[6, 3], &mut g), random(&[1, 3], &mut g));
    let before = tape.value(h).clone();
    let out = temporal_propagate(&mut tape, &[h], w_tem, agg).unwrap();
    assert_eq!(out, h);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(tape.value(out)), bits(&before));
    assert!(temporal_propagate(&mut tape, &[], w_tem, agg).is_err());
}

#[test]
fn one_step_window_is_a_single_message_pass() {
    let mut g = rng(8);
    let mut tape = Tape::new();
    let h0 = tape.constant(random(&[4, 3], &mut g));
    let h1 = tape.constant(random(&[4, 3], &mut g));
    let w_tem = tape.constant(random(&[3, 3], &mut g));
    let agg = dense_const(&mut tape, random(&[6, 3], &mut g), random(&[1, 3], &mut g));
    let got = temporal_propagate(&mut tape, &[h0, h1], w_tem, agg).unwrap();
    let a = inter_correlation(&mut tape, h1, h0, w_tem).unwrap();
    let manual = message_pass(&mut tape, a, h0, agg).unwrap();
    assert_eq!(tape.value(got), tape.value(manual));
}

#[test]
fn temporal_output_shape_for_windows_up_to_four() {
    let mut g = rng(9);
    for w in 0..=4 {
        let mut tape = Tape::new();
        let hs: Vec<Var> = (0..=w).map(|_| tape.constant(random(&[5, 3], &mut g))).collect();
        let w_tem = tape.constant(random(&[3, 3], &mut g));
        let agg = dense_const(&mut tape, random(&[6, 3], &mut g), random(&[1, 3], &mut g));
        let out = temporal_propagate(&mut tape, &hs, w_tem, agg).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 3]);
    }
}

#[test]
fn final_embedding_zero_weights() {
    let mut g = rng(10);
    let mut tape = Tape::new();
    let hs = tape.constant(random(&[3, 4], &mut g));
    let ht = tape.constant(random(&[3, 4], &mut g));
    let out = dense_const(&mut tape, Tensor::zeros(&[8, 5]), Tensor::zeros(&[1, 5]));
    let e = final_embedding(&mut tape, hs, ht, out).unwrap();
    assert_eq!(tape.value(e).shape(), &[3, 5]);
    assert!(tape.value(e).data().iter().all(|&v| v == 0.5));
}

#[test]
fn logits_and_loss_hand_values() {
    let ln2 = std::f64::consts::LN_2;
    let mut tape = Tape::new();
    let emb = tape.constant(t(&[&[0.0, ln2], &[0.0, ln2]]));
    let p = predict_logits(&mut tape, emb).unwrap();
    assert!((tape.value(p).get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(p).get(0, 1) - 2.0 / 3.0).abs() < 1e-15);

    let uniform = tape.constant(t(&[&[0.5, 0.5]]));
    let l = classification_loss(&mut tape, uniform, 1).unwrap();
    assert!((tape.value(l).data()[0] - ln2).abs() < 1e-15);

    let sure = tape.constant(t(&[&[0.0, 1.0]]));
    let l = classification_loss(&mut tape, sure, 1).unwrap();
    assert!(tape.value(l).data()[0] <= 1e-6);
    let l = classification_loss(&mut tape, sure, 0).unwrap();
    assert!((tape.value(l).data()[0] + PROB_FLOOR.ln()).abs() < 1e-9);
    assert!(matches!(
        classification_loss(&mut tape, sure, 2),
        Err(Error::InvalidLabel { label: 2, classes: 2 })
    ));

    let single = tape.constant(t(&[&[0.2, -0.1, 0.4]]));
    let p = predict_logits(&mut tape, single).unwrap();
    let expected = Tensor::from_rows(&[[0.2, -0.1, 0.4]]).unwrap().softmax_rows().unwrap();
    assert_eq!(tape.value(p), &expected);
}

#[test]
fn parameter_names_and_shapes_are_stable() {
    let model = Diig::new(ModelConfig::default()).unwrap();
    let p = model.init_params(&mut rng(0)).unwrap();
    assert_eq!(p["spa.w"].shape(), &[16, 16]);
    assert_eq!(p["intra.0.w"].shape(), &[32, 32]);
    assert_eq!(p["intra.1.w"].shape(), &[64, 32]);
    assert_eq!(p["readout.0.w"].shape(), &[48, 32]);
    assert_eq!(p["readout.1.w"].shape(), &[32, 64]);
    assert_eq!(p["readout.out.w"].shape(), &[64, 64]);
    assert_eq!(p["fuse.w"].shape(), &[96, 32]);
    assert_eq!(p["tem.w"].shape(), &[32, 32]);
    assert_eq!(p["tem_agg.w"].shape(), &[64, 32]);
    assert_eq!(p["out.w"].shape(), &[64, 4]);
    assert!(p["out.b"].data().iter().all(|&v| v == 0.0));
    model.check_params(&p).unwrap();

    let mut missing = p.clone();
    let mut pruned = ParamSet::new();
    for (n, t) in &missing {
        if n != "tem.w" {
            pruned.insert(n.clone(), t.clone());
        }
    }
    missing = pruned;
    assert!(matches!(model.check_params(&missing), Err(Error::NameMismatch(_))));
}

fn toy_sample(g: &mut Rng, cfg: &ModelConfig, nodes: usize, steps: usize, label: usize) -> Sample {
    Sample {
        features: (0..steps).map(|_| random(&[nodes, cfg.feature_dim], g)).collect(),
        adjacency: None,
        label,
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = small_config();
    let model = Diig::new(cfg.clone()).unwrap();
    let mut g = rng(11);
    let params = model.init_params(&mut g).unwrap();
    let sample = toy_sample(&mut g, &cfg, 3, 3, 1);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &params).unwrap();
    let xs: Vec<Var> = sample.features.iter().map(|x| tape.constant(x.clone())).collect();
    let fwd = model.forward_sequence(&mut tape, &bound, &xs, None, 1, None).unwrap();
    assert_eq!(fwd.probs.len(), 1);
    let report = check_tape(&mut tape, fwd.loss).unwrap();
    assert_eq!(report.entries_checked, params.numel());
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn transform_gradient_matches_finite_differences() {
    let mut g = rng(12);
    let params = transform_params(6, 4, 3, &mut g).unwrap();
    let mut tape = Tape::new();
    let net = [
        Dense {
            w: tape.param("transform.0.w", params["transform.0.w"].clone()),
            b: tape.param("transform.0.b", params["transform.0.b"].clone()),
        },
        Dense {
            w: tape.param("transform.1.w", params["transform.1.w"].clone()),
            b: tape.param("transform.1.b", params["transform.1.b"].clone()),
        },
    ];
    let frame = tape.constant(random(&[3, 6], &mut g));
    let x = transform_frame(&mut tape, frame, &net).unwrap();
    let target = tape.constant(random(&[3, 3], &mut g));
    let loss = tape.mse(x, target).unwrap();
    let report = check_tape(&mut tape, loss).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn transform_shapes_and_zero_weights() {
    let mut g = rng(13);
    let mut params = transform_params(8, 5, 4, &mut g).unwrap();
    let seq = random(&[7, 6, 8], &mut g);
    let x = transform_features(&seq, &params).unwrap();
    assert_eq!(x.len(), 7);
    assert!(x.iter().all(|f| f.shape() == [6, 4]));

    for (_, t) in params.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let x = transform_features(&seq, &params).unwrap();
    assert!(x.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    assert!(transform_features(&random(&[7, 6, 5], &mut g), &params).is_err());
}

#[test]
fn sequence_forward_shares_spatial_work_across_windows() {
    let cfg = small_config();
    let model = Diig::new(cfg.clone()).unwrap();
    let mut g = rng(14);
    let params = model.init_params(&mut g).unwrap();
    let sample = toy_sample(&mut g, &cfg, 4, 6, 0);
    let probs = predict(&model, &params, &sample).unwrap();
    assert_eq!(probs.len(), 4);

    // Each window on its own gives the same probabilities.
    for (k, p) in probs.iter().enumerate() {
        let window = Sample {
            features: sample.features[k..k + 3].to_vec(),
            adjacency: None,
            label: 0,
        };
        let alone = predict(&model, &params, &window).unwrap();
        assert_eq!(alone.len(), 1);
        for (a, b) in alone[0].data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn static_adjacency_replaces_learned_one() {
    let cfg = ModelConfig {
        intra: IntraMode::Knn,
        knn_k: 2,
        ..small_config()
    };
    let model = Diig::new(cfg.clone()).unwrap();
    let mut g = rng(15);
    let params = model.init_params(&mut g).unwrap();
    let mut sample = toy_sample(&mut g, &cfg, 4, 4, 1);
    let adj: Vec<Tensor> = sample
        .features
        .iter()
        .map(|x| static_adjacency(&cfg, x, x).unwrap().unwrap())
        .collect();
    sample.adjacency = Some(adj);
    let (_, grads) = batch_gradients(&model, &params, &[sample], &[WindowRef { sample: 0, start: 1 }], None).unwrap();
    // The bilinear spatial weights are unused with a static graph.
    assert!(grads["spa.w"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_is_reproducible_and_off_at_inference() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..small_config()
    };
    let model = Diig::new(cfg.clone()).unwrap();
    let mut g = rng(16);
    let params = model.init_params(&mut g).unwrap();
    let sample = toy_sample(&mut g, &cfg, 4, 4, 1);
    let samples = [sample.clone()];
    let refs = window_refs(&samples, 2);
    assert_eq!(refs.len(), 2);
    let a = batch_gradients(&model, &params, &samples, &refs, Some(&mut rng(3))).unwrap();
    let b = batch_gradients(&model, &params, &samples, &refs, Some(&mut rng(3))).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(predict(&model, &params, &sample).unwrap(), predict(&model, &params, &sample).unwrap());
}

#[test]
fn training_reduces_loss_on_a_separable_toy_problem() {
    let cfg = small_config();
    let model = Diig::new(cfg.clone()).unwrap();
    let mut g = rng(17);
    let mut params = model.init_params(&mut g).unwrap();
    let samples: Vec<Sample> = (0..16)
        .map(|i| {
            let label = i % 2;
            let shift = if label == 0 { -1.0 } else { 1.0 };
            Sample {
                features: (0..3)
                    .map(|_| random(&[3, 3], &mut g).map(|v| 0.3 * v + shift))
                    .collect(),
                adjacency: None,
                label,
            }
        })
        .collect();
    let mut adam = Adam::new(crate::numerics::AdamConfig {
        lr: 1e-2,
        ..Default::default()
    });
    let first = train_epoch(&model, &mut params, &mut adam, &samples, 4, &mut g).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = train_epoch(&model, &mut params, &mut adam, &samples, 4, &mut g).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dynamic_adjacencies_are_row_stochastic(seed in any::<u64>(), n in 1usize..7, d in 1usize..6, scale in 0.1f64..20.0) {
        let mut g = rng(seed);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[n, d], &mut g).map(|v| v * scale));
        let y = tape.constant(random(&[n, d], &mut g).map(|v| v * scale));
        let w = tape.constant(random(&[d, d], &mut g).map(|v| v * scale));
        for a in [intra_correlation(&mut tape, x, w).unwrap(), inter_correlation(&mut tape, x, y, w).unwrap()] {
            for i in 0..n {
                let row = tape.value(a).row_slice(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn message_pass_is_permutation_equivariant(seed in any::<u64>()) {
        let mut g = rng(seed);
        let n = 5;
        let a = random(&[n, n], &mut g).map(f64::abs);
        let h = random(&[n, 3], &mut g);
        let w = random(&[6, 4], &mut g);
        let b = random(&[1, 4], &mut g);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut g);
        let ap = Tensor::new(vec![n, n], (0..n * n).map(|k| a.get(perm[k / n], perm[k % n])).collect()).unwrap();
        let hp = Tensor::from_rows(&perm.iter().map(|&i| h.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();

        let mut tape = Tape::new();
        let agg = dense_const(&mut tape, w, b);
        let (av, hv, apv, hpv) = (tape.constant(a), tape.constant(h), tape.constant(ap), tape.constant(hp));
        let out = message_pass(&mut tape, av, hv, agg).unwrap();
        let outp = message_pass(&mut tape, apv, hpv, agg).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (p, q) in tape.value(outp).row_slice(r).iter().zip(tape.value(out).row_slice(src)) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
