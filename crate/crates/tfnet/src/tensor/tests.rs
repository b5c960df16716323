use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let mut t = Tape::new();
    let ta = t.leaf(&[4, 3], a.clone());
    let ti = t.leaf(&[3, 3], eye);
    let c = t.matmul(ta, ti).unwrap();
    assert_eq!(t.values(c), a.as_slice());
}

#[test]
fn matmul_against_triple_loop_oracle() {
    let a = vec![1.0, 2.0, 3.0, 4.0];
    let b = vec![5.0, 6.0];
    let mut t = Tape::new();
    let ta = t.leaf(&[2, 2], a.clone());
    let tb = t.leaf(&[2, 1], b.clone());
    let c = t.matmul(ta, tb).unwrap();
    assert_eq!(t.values(c), &[17.0, 39.0]);
    assert_eq!(t.values(c), naive_matmul(&a, &b, 2, 2, 1).as_slice());
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.leaf(&[2, 3], vec![0.0; 6]);
    let b = t.leaf(&[2, 3], vec![0.0; 6]);
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn activation_values() {
    let mut t = Tape::new();
    let x = t.leaf(&[3], vec![-1.0, 2.0, 0.0]);
    let r = t.activation(x, Activation::Relu);
    assert_eq!(t.values(r), &[0.0, 2.0, 0.0]);
    let s = t.activation(x, Activation::Sigmoid);
    assert!((t.values(s)[2] - 0.5).abs() < 1e-15);
    let th = t.activation(x, Activation::Tanh);
    assert_eq!(t.values(th)[2], 0.0);
}

#[test]
fn reduce_max_examples() {
    let mut t = Tape::new();
    let single = t.leaf(&[1, 3], vec![0.5, -1.0, 2.0]);
    let m = t.reduce_max_over_points(single).unwrap();
    assert_eq!(t.values(m), &[0.5, -1.0, 2.0]);

    let x = t.leaf(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]);
    let m = t.reduce_max_over_points(x).unwrap();
    assert_eq!(t.values(m), &[3.0, 5.0]);

    let empty = t.leaf(&[0, 2], vec![]);
    assert!(matches!(
        t.reduce_max_over_points(empty),
        Err(TensorError::EmptyInput(_))
    ));
}

#[test]
fn reduce_max_tie_routes_gradient_to_first_row() {
    let mut t = Tape::new();
    let x = t.param(&[2, 2], vec![2.0, 2.0, 2.0, 2.0]);
    let m = t.reduce_max_over_points(x).unwrap();
    let s = t.sum(m);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn huber_closed_form() {
    let mut t = Tape::new();
    let zero = t.leaf(&[1], vec![0.0]);
    let l = t.huber_loss(zero, zero, 1.0).unwrap();
    assert_eq!(t.scalar_value(l), 0.0);

    let p = t.leaf(&[1], vec![0.5]);
    let l = t.huber_loss(p, zero, 1.0).unwrap();
    assert!((t.scalar_value(l) - 0.125).abs() < 1e-15);

    let p = t.leaf(&[1], vec![2.0]);
    let l = t.huber_loss(p, zero, 1.0).unwrap();
    assert!((t.scalar_value(l) - 1.5).abs() < 1e-15);
}

#[test]
fn softmax_ce_examples() {
    let mut t = Tape::new();
    let uniform = t.leaf(&[2], vec![0.3, 0.3]);
    let l = t.softmax_cross_entropy(uniform, 0).unwrap();
    assert!((t.scalar_value(l) - 2.0f64.ln()).abs() < 1e-12);

    let saturated = t.leaf(&[2], vec![100.0, 0.0]);
    let l = t.softmax_cross_entropy(saturated, 0).unwrap();
    assert!(t.scalar_value(l) < 1e-10);
    assert!(t.scalar_value(l) >= 0.0);

    let bad = t.leaf(&[2], vec![0.0, 0.0]);
    assert!(matches!(
        t.softmax_cross_entropy(bad, 2),
        Err(TensorError::LabelOutOfRange { .. })
    ));
}

#[test]
fn softmax_ce_matches_direct_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let label = rng.gen_range(0..5);
        let mut t = Tape::new();
        let tl = t.leaf(&[5], logits.clone());
        let l = t.softmax_cross_entropy(tl, label).unwrap();
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let direct = -(logits[label].exp() / z).ln();
        let rel = (t.scalar_value(l) - direct).abs() / direct.abs().max(1e-30);
        assert!(rel < 1e-10, "rel {rel}");
        assert!(t.scalar_value(l) >= 0.0);
    }
}

#[test]
fn cosine_distance_eq1_exactness() {
    let mut t = Tape::new();
    let v = t.leaf(&[3], vec![0.3, -1.2, 2.0]);
    let l = t.cosine_distance(v, v).unwrap();
    assert!(t.scalar_value(l).abs() < 1e-15);

    let e1 = t.leaf(&[2], vec![1.0, 0.0]);
    let e2 = t.leaf(&[2], vec![0.0, 1.0]);
    let l = t.cosine_distance(e1, e2).unwrap();
    assert_eq!(t.scalar_value(l), 1.0);

    let neg = t.leaf(&[3], vec![-0.3, 1.2, -2.0]);
    let l = t.cosine_distance(v, neg).unwrap();
    assert!((t.scalar_value(l) - 2.0).abs() < 1e-12);

    let zero = t.leaf(&[3], vec![0.0; 3]);
    assert!(matches!(
        t.cosine_distance(v, zero),
        Err(TensorError::DegenerateInput(_))
    ));
}

#[test]
fn cosine_distance_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let ta = t.leaf(&[4], a);
        let tb = t.leaf(&[4], b);
        if let Ok(l) = t.cosine_distance(ta, tb) {
            let v = t.scalar_value(l);
            assert!((-1e-12..=2.0 + 1e-12).contains(&v));
        }
    }
}

#[test]
fn gru_zero_params_hand_evaluation() {
    let mut t = Tape::new();
    let x = t.leaf(&[1], vec![0.7]);
    let h_prev = t.leaf(&[1], vec![1.0]);
    let zero_m = t.leaf(&[1, 1], vec![0.0]);
    let zero_v = t.leaf(&[1], vec![0.0]);
    let p = GruParamIds {
        w_z: zero_m,
        w_r: zero_m,
        w_h: zero_m,
        u_z: zero_m,
        u_r: zero_m,
        u_h: zero_m,
        b_z: zero_v,
        b_r: zero_v,
        b_h: zero_v,
    };
    let h = gru_cell(&mut t, x, h_prev, &p).unwrap();
    // z = r = 0.5, hcand = 0, h_new = 0.5 * 1.0
    assert!((t.values(h)[0] - 0.5).abs() < 1e-15);
}

#[test]
fn gru_update_gate_saturation_keeps_previous_hidden() {
    let mut t = Tape::new();
    let x = t.leaf(&[1], vec![0.3]);
    let h_prev = t.leaf(&[1], vec![-0.8]);
    let zero_m = t.leaf(&[1, 1], vec![0.0]);
    let zero_v = t.leaf(&[1], vec![0.0]);
    let big = t.leaf(&[1], vec![100.0]);
    let p = GruParamIds {
        w_z: zero_m,
        w_r: zero_m,
        w_h: zero_m,
        u_z: zero_m,
        u_r: zero_m,
        u_h: zero_m,
        b_z: big,
        b_r: zero_v,
        b_h: zero_v,
    };
    let h = gru_cell(&mut t, x, h_prev, &p).unwrap();
    assert!((t.values(h)[0] - (-0.8)).abs() < 1e-10);
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut params = ParamStore::new();
    params.insert("w", &[2], vec![1.0, -2.0]);
    let mut state = AdamState::default();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![0.0, 0.0]);
    for _ in 0..10 {
        adam_step(&mut params, &grads, &mut state).unwrap();
    }
    assert_eq!(params.get("w").unwrap().values, vec![1.0, -2.0]);
    assert_eq!(state.step, 10);
}

#[test]
fn adam_first_step_magnitude_is_lr() {
    let mut params = ParamStore::new();
    params.insert("w", &[1], vec![0.0]);
    let mut state = AdamState::default();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![1.0]);
    adam_step(&mut params, &grads, &mut state).unwrap();
    // bias-corrected m_hat = v_hat = 1, update = lr / (1 + eps)
    let w = params.get("w").unwrap().values[0];
    assert!((w + 0.001).abs() < 1e-8, "w = {w}");
}

#[test]
fn adam_descends_on_quadratic() {
    let mut params = ParamStore::new();
    params.insert("w", &[1], vec![1.0]);
    let mut state = AdamState::default();
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let w = params.get("w").unwrap().values[0];
        let f = w * w;
        assert!(f < prev || f == 0.0, "not strictly decreasing: {f} vs {prev}");
        prev = f;
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![2.0 * w]);
        adam_step(&mut params, &grads, &mut state).unwrap();
    }
    assert!(params.get("w").unwrap().values[0].abs() < 0.95);
}

#[test]
fn adam_rejects_nan_gradient_with_parameter_name() {
    let mut params = ParamStore::new();
    params.insert("layer.w", &[1], vec![0.0]);
    let mut state = AdamState::default();
    let mut grads = BTreeMap::new();
    grads.insert("layer.w".to_string(), vec![f64::NAN]);
    let err = adam_step(&mut params, &grads, &mut state).unwrap_err();
    assert!(err.to_string().contains("layer.w"));
}

#[test]
fn tape_backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut t = Tape::new();
    let ta = t.param(&[3, 4], a);
    let tb = t.param(&[4, 2], b);
    let c = t.matmul(ta, tb).unwrap();
    let act = t.activation(c, Activation::Tanh);
    let s = t.sum(act);
    let g1 = t.backward(s).unwrap();
    let g2 = t.backward(s).unwrap();
    assert_eq!(g1.get(ta).unwrap(), g2.get(ta).unwrap());
    assert_eq!(g1.get(tb).unwrap(), g2.get(tb).unwrap());
    // bitwise equality
    for (x, y) in g1.get(tb).unwrap().iter().zip(g2.get(tb).unwrap()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn op_suite_passes_below_1e5() {
    for (name, err) in run_op_suite(42, 20) {
        assert!(err < 1e-5, "{name}: max rel err {err}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut params = ParamStore::new();
    params.insert("a.w", &[2, 3], vec![1.5, -2.25, 0.0, 1e-30, f64::MIN_POSITIVE, 3.7]);
    params.insert("a.b", &[3], vec![0.125, -0.5, 9.0]);
    let mut buf = Vec::new();
    save_params(&mut buf, &params).unwrap();
    assert_eq!(&buf[0..5], b"TFNV1");
    let loaded = load_params(&mut buf.as_slice()).unwrap();
    let mut buf2 = Vec::new();
    save_params(&mut buf2, &loaded).unwrap();
    assert_eq!(buf, buf2);
    assert_eq!(params, loaded);
}

#[test]
fn checkpoint_bad_magic() {
    let buf = b"NOPE1\x00\x00\x00\x00".to_vec();
    assert!(matches!(
        load_params(&mut buf.as_slice()),
        Err(CheckpointError::BadMagic)
    ));
}

#[test]
fn slice_and_concat_backward() {
    let mut t = Tape::new();
    let a = t.param(&[4], vec![1.0, 2.0, 3.0, 4.0]);
    let s = t.slice(a, 1, 2).unwrap();
    assert_eq!(t.values(s), &[2.0, 3.0]);
    let total = t.sum(s);
    let g = t.backward(total).unwrap();
    assert_eq!(g.get(a).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
}
