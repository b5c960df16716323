//! Central finite-difference gradient checking.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gru_cell, Activation, GruParamIds, Tape, TensorId};

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Compare an analytic gradient against central differences of `f`.
/// Relative error is |analytic - numeric| / max(1, |analytic|).
pub fn gradcheck_scalar_fn<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> GradcheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradcheckReport {
        max_rel_err,
        worst_index,
    }
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Runs the finite-difference suite over every differentiable op at
/// `trials` random configurations each. Returns (op name, max relative
/// error) pairs. Kink points of relu/Huber are resampled away.
pub fn run_op_suite(seed: u64, trials: usize) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut results: Vec<(String, f64)> = Vec::new();
    fn record(results: &mut Vec<(String, f64)>, name: &str, err: f64) {
        match results.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => results.push((name.to_string(), err)),
        }
    }

    // matmul: grads w.r.t. both factors of sum(A*B)
    for _ in 0..trials {
        let a = random_vec(&mut rng, 6);
        let b = random_vec(&mut rng, 6);
        let build = |av: &[f64], bv: &[f64]| {
            let mut t = Tape::new();
            let ta = t.param(&[2, 3], av.to_vec());
            let tb = t.param(&[3, 2], bv.to_vec());
            let c = t.matmul(ta, tb).unwrap();
            let s = t.sum(c);
            (t, s, ta, tb)
        };
        let (t, s, ta, tb) = build(&a, &b);
        let g = t.backward(s).unwrap();
        let rep_a = gradcheck_scalar_fn(
            |av| {
                let (t, s, _, _) = build(av, &b);
                t.scalar_value(s)
            },
            &a,
            g.get(ta).unwrap(),
            h,
        );
        let rep_b = gradcheck_scalar_fn(
            |bv| {
                let (t, s, _, _) = build(&a, bv);
                t.scalar_value(s)
            },
            &b,
            g.get(tb).unwrap(),
            h,
        );
        record(&mut results, "matmul", rep_a.max_rel_err.max(rep_b.max_rel_err));
    }

    // activations, relu kink points resampled away
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        };
        for _ in 0..trials {
            let mut x = random_vec(&mut rng, 5);
            if kind == Activation::Relu {
                for v in &mut x {
                    while v.abs() < 1e-3 {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                }
            }
            let w = random_vec(&mut rng, 5);
            let build = |xv: &[f64]| {
                let mut t = Tape::new();
                let tx = t.param(&[5], xv.to_vec());
                let y = t.activation(tx, kind);
                let tw = t.leaf(&[5], w.clone());
                let p = t.mul(y, tw).unwrap();
                let s = t.sum(p);
                (t, s, tx)
            };
            let (t, s, tx) = build(&x);
            let g = t.backward(s).unwrap();
            let rep = gradcheck_scalar_fn(
                |xv| {
                    let (t, s, _) = build(xv);
                    t.scalar_value(s)
                },
                &x,
                g.get(tx).unwrap(),
                h,
            );
            record(&mut results, name, rep.max_rel_err);
        }
    }

    // max pool over rows (exact ties have measure zero under random draws)
    for _ in 0..trials {
        let x = random_vec(&mut rng, 12);
        let w = random_vec(&mut rng, 3);
        let build = |xv: &[f64]| {
            let mut t = Tape::new();
            let tx = t.param(&[4, 3], xv.to_vec());
            let y = t.reduce_max_over_points(tx).unwrap();
            let tw = t.leaf(&[3], w.clone());
            let p = t.mul(y, tw).unwrap();
            let s = t.sum(p);
            (t, s, tx)
        };
        let (t, s, tx) = build(&x);
        let g = t.backward(s).unwrap();
        let rep = gradcheck_scalar_fn(
            |xv| {
                let (t, s, _) = build(xv);
                t.scalar_value(s)
            },
            &x,
            g.get(tx).unwrap(),
            h,
        );
        record(&mut results, "reduce_max_over_points", rep.max_rel_err);
    }

    // huber, |r| == delta kink resampled away
    for _ in 0..trials {
        let delta = 1.0;
        let target = random_vec(&mut rng, 6);
        let mut pred = random_vec(&mut rng, 6);
        for (p, t) in pred.iter_mut().zip(&target) {
            while ((*p - t).abs() - delta).abs() < 1e-3 {
                *p = rng.gen_range(-2.0..2.0);
            }
        }
        let build = |pv: &[f64]| {
            let mut t = Tape::new();
            let tp = t.param(&[6], pv.to_vec());
            let tt = t.leaf(&[6], target.clone());
            let l = t.huber_loss(tp, tt, delta).unwrap();
            (t, l, tp)
        };
        let (t, l, tp) = build(&pred);
        let g = t.backward(l).unwrap();
        let rep = gradcheck_scalar_fn(
            |pv| {
                let (t, l, _) = build(pv);
                t.scalar_value(l)
            },
            &pred,
            g.get(tp).unwrap(),
            h,
        );
        record(&mut results, "huber_loss", rep.max_rel_err);
    }

    // softmax cross entropy
    for _ in 0..trials {
        let logits = random_vec(&mut rng, 4);
        let label = rng.gen_range(0..4usize);
        let build = |lv: &[f64]| {
            let mut t = Tape::new();
            let tl = t.param(&[4], lv.to_vec());
            let l = t.softmax_cross_entropy(tl, label).unwrap();
            (t, l, tl)
        };
        let (t, l, tl) = build(&logits);
        let g = t.backward(l).unwrap();
        let rep = gradcheck_scalar_fn(
            |lv| {
                let (t, l, _) = build(lv);
                t.scalar_value(l)
            },
            &logits,
            g.get(tl).unwrap(),
            h,
        );
        record(&mut results, "softmax_cross_entropy", rep.max_rel_err);
    }

    // cosine distance, both sides
    for _ in 0..trials {
        let a = random_vec(&mut rng, 6);
        let b = random_vec(&mut rng, 6);
        let build = |av: &[f64], bv: &[f64]| {
            let mut t = Tape::new();
            let ta = t.param(&[6], av.to_vec());
            let tb = t.param(&[6], bv.to_vec());
            let l = t.cosine_distance(ta, tb).unwrap();
            (t, l, ta, tb)
        };
        let (t, l, ta, tb) = build(&a, &b);
        let g = t.backward(l).unwrap();
        let rep_a = gradcheck_scalar_fn(
            |av| {
                let (t, l, _, _) = build(av, &b);
                t.scalar_value(l)
            },
            &a,
            g.get(ta).unwrap(),
            h,
        );
        let rep_b = gradcheck_scalar_fn(
            |bv| {
                let (t, l, _, _) = build(&a, bv);
                t.scalar_value(l)
            },
            &b,
            g.get(tb).unwrap(),
            h,
        );
        record(&mut results, "cosine_distance", rep_a.max_rel_err.max(rep_b.max_rel_err));
    }

    // gru cell: x, h_prev and all nine parameter blocks packed flat
    for _ in 0..(trials / 4).max(2) {
        let (input, hidden) = (3usize, 4usize);
        let total = input + hidden + 3 * (hidden * input) + 3 * (hidden * hidden) + 3 * hidden;
        let flat = random_vec(&mut rng, total);
        let w = random_vec(&mut rng, hidden);
        let build = |fv: &[f64]| {
            let mut t = Tape::new();
            let mut off = 0usize;
            let mut take = |t: &mut Tape, shape: &[usize]| -> TensorId {
                let len: usize = shape.iter().product();
                let id = t.param(shape, fv[off..off + len].to_vec());
                off += len;
                id
            };
            let x = take(&mut t, &[input]);
            let h_prev = take(&mut t, &[hidden]);
            let p = GruParamIds {
                w_z: take(&mut t, &[hidden, input]),
                w_r: take(&mut t, &[hidden, input]),
                w_h: take(&mut t, &[hidden, input]),
                u_z: take(&mut t, &[hidden, hidden]),
                u_r: take(&mut t, &[hidden, hidden]),
                u_h: take(&mut t, &[hidden, hidden]),
                b_z: take(&mut t, &[hidden]),
                b_r: take(&mut t, &[hidden]),
                b_h: take(&mut t, &[hidden]),
            };
            let ids = vec![
                x, h_prev, p.w_z, p.w_r, p.w_h, p.u_z, p.u_r, p.u_h, p.b_z, p.b_r, p.b_h,
            ];
            let h_new = gru_cell(&mut t, x, h_prev, &p).unwrap();
            let tw = t.leaf(&[hidden], w.clone());
            let prod = t.mul(h_new, tw).unwrap();
            let s = t.sum(prod);
            (t, s, ids)
        };
        let (t, s, ids) = build(&flat);
        let g = t.backward(s).unwrap();
        let mut analytic = Vec::with_capacity(total);
        for id in &ids {
            match g.get(*id) {
                Some(gv) => analytic.extend_from_slice(gv),
                None => analytic.extend(std::iter::repeat(0.0).take(t.values(*id).len())),
            }
        }
        let rep = gradcheck_scalar_fn(
            |fv| {
                let (t, s, _) = build(fv);
                t.scalar_value(s)
            },
            &flat,
            &analytic,
            h,
        );
        record(&mut results, "gru_cell", rep.max_rel_err);
    }

    // box corners: center, size, heading packed flat
    for _ in 0..trials {
        let mut flat = random_vec(&mut rng, 7);
        for v in &mut flat[3..6] {
            *v = v.abs() + 0.5;
        }
        let w = random_vec(&mut rng, 24);
        let build = |fv: &[f64]| {
            let mut t = Tape::new();
            let c = t.param(&[3], fv[0..3].to_vec());
            let s = t.param(&[3], fv[3..6].to_vec());
            let th = t.param(&[1], vec![fv[6]]);
            let corners = t.box_corners(c, s, th).unwrap();
            let tw = t.leaf(&[24], w.clone());
            let p = t.mul(corners, tw).unwrap();
            let sum = t.sum(p);
            (t, sum, [c, s, th])
        };
        let (t, sum, ids) = build(&flat);
        let g = t.backward(sum).unwrap();
        let mut analytic = Vec::new();
        for id in ids {
            analytic.extend_from_slice(g.get(id).unwrap());
        }
        let rep = gradcheck_scalar_fn(
            |fv| {
                let (t, s, _) = build(fv);
                t.scalar_value(s)
            },
            &flat,
            &analytic,
            h,
        );
        record(&mut results, "box_corners", rep.max_rel_err);
    }

    results
}
