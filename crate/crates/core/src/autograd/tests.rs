use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(&mut rng))
}

/// Builds a graph from the given leaves and reduces it to a scalar by a
/// fixed random projection, so every output element contributes.
fn check<F>(leaves: Vec<ArrayD<f64>>, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let project = |tape: &mut Tape<f64>, vars: &[Var]| -> (Var, ArrayD<f64>) {
        let out = build(tape, vars);
        let weights = random(tape.shape(out), 99);
        (out, weights)
    };
    let scalar = |leaves: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.param(l.clone())).collect();
        let (out, w) = project(&mut tape, &vars);
        (tape.value(out) * &w).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.param(l.clone())).collect();
    let (out, w) = project(&mut tape, &vars);
    // the gradient of sum(out * w) with respect to `out` is `w`
    let grads = backward_seeded(&tape, out, w);

    let h = 1e-6;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| ArrayD::zeros(leaf.raw_dim()));
        for idx in 0..leaf.len() {
            let mut plus = leaves.clone();
            plus[li].as_slice_mut().unwrap()[idx] += h;
            let mut minus = leaves.clone();
            minus[li].as_slice_mut().unwrap()[idx] -= h;
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            assert!(err < 1e-5, "leaf {li} index {idx}: analytic {a} numeric {numeric}");
        }
    }
}

/// Reverse pass with an arbitrary seed gradient on a non-scalar node.
fn backward_seeded(tape: &Tape<f64>, root: Var, seed: ArrayD<f64>) -> Gradients<f64> {
    let mut grads: Vec<Option<ArrayD<f64>>> = (0..tape.nodes.len()).map(|_| None).collect();
    grads[root.0] = Some(seed);
    for i in (0..=root.0).rev() {
        let node = &tape.nodes[i];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        tape.propagate(node, &g, &mut grads);
        if matches!(node.op, Op::Leaf) {
            grads[i] = Some(g);
        }
    }
    Gradients { grads }
}

#[test]
fn conv_gradients() {
    for (spec, cin, cout, size) in [
        (ConvSpec::same3(1), 2, 3, [4, 3, 5]),
        (ConvSpec::same3(2), 4, 2, [3, 4, 3]),
        (ConvSpec::down2(2), 2, 4, [4, 4, 2]),
        (ConvSpec::pointwise(), 3, 2, [2, 3, 2]),
    ] {
        let k = spec.kernel;
        let x = random(&[2, cin, size[0], size[1], size[2]], 1);
        let w = random(&[cout, cin / spec.groups, k, k, k], 2);
        let b = random(&[cout], 3);
        check(vec![x, w, b], |t, v| t.conv3d(v[0], v[1], Some(v[2]), spec));
    }
}

#[test]
fn conv_transpose_gradients() {
    for (spec, cin, cout, size) in [
        (ConvSpec::down2(1), 3, 2, [2, 3, 2]),
        (ConvSpec::down2(2), 4, 2, [2, 2, 1]),
        (ConvSpec::same3(1), 2, 2, [3, 2, 3]),
    ] {
        let k = spec.kernel;
        let x = random(&[1, cin, size[0], size[1], size[2]], 4);
        let w = random(&[cin, cout / spec.groups, k, k, k], 5);
        let b = random(&[cout], 6);
        check(vec![x, w, b], |t, v| t.conv_transpose3d(v[0], v[1], Some(v[2]), spec));
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> with the same weights and no bias
    let spec = ConvSpec {
        kernel: 3,
        stride: 2,
        padding: 1,
        groups: 2,
    };
    let x = random(&[1, 4, 5, 7, 3], 7);
    let w = random(&[6, 2, 3, 3, 3], 8);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv3d(xv, wv, None, spec);
    let probe = random(tape.shape(y), 9);
    let lhs = (tape.value(y) * &probe).sum();
    // transposed weights: [c_in_of_convT = 6, c_out_per_group = 2, k, k, k]
    let pv = tape.constant(probe);
    let back = tape.conv_transpose3d(pv, wv, None, spec);
    assert_eq!(tape.shape(back), x.shape());
    let rhs = (tape.value(back) * &x).sum();
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn instance_norm_gradients() {
    let x = random(&[2, 3, 3, 2, 4], 10);
    let gamma = random(&[3], 11);
    let beta = random(&[3], 12);
    check(vec![x, gamma, beta], |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn elementwise_gradients() {
    let a = random(&[1, 2, 3, 2, 2], 13);
    let b = random(&[1, 2, 3, 2, 2], 14);
    check(vec![a, b], |t, v| {
        let s = t.add(v[0], v[1]);
        let r = t.relu(s);
        t.scale(r, 1.7)
    });
}

#[test]
fn group_max_gradients_and_ties() {
    let x = random(&[2, 6, 2, 2, 3], 15);
    check(vec![x], |t, v| t.group_max(v[0], 3));

    let mut tape = Tape::<f64>::new();
    let x = tape.param(ArrayD::from_elem(IxDyn(&[1, 4, 1, 1, 1]), 2.0));
    let m = tape.group_max(x, 4);
    let grads = backward_seeded(&tape, m, ArrayD::from_elem(IxDyn(&[1, 1, 1, 1, 1]), 1.0));
    let g = grads.get(x).unwrap();
    assert_eq!(g.as_slice().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_gradients_and_values() {
    let x = random(&[1, 2, 2, 1, 3], 16);
    check(vec![x.clone()], |t, v| t.upsample(v[0], 2));
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let u = tape.upsample(v, 3);
    let out = tape.value(u);
    assert_eq!(out.shape(), &[1, 2, 6, 3, 9]);
    for c in 0..2 {
        for i in 0..6 {
            for j in 0..3 {
                for k in 0..9 {
                    assert_eq!(out[[0, c, i, j, k]], x[[0, c, i / 3, j / 3, k / 3]]);
                }
            }
        }
    }
}

#[test]
fn softmax_gradients_and_simplex() {
    let x = random(&[2, 4, 2, 3, 2], 17);
    check(vec![x.clone()], |t, v| t.softmax(v[0]));
    let mut tape = Tape::new();
    let v = tape.constant(x.mapv(|a| a * 50.0));
    let s = tape.softmax(v);
    let sums = tape.value(s).sum_axis(ndarray::Axis(1));
    assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn dice_loss_gradient_through_backward() {
    let logits = random(&[2, 3, 4, 4, 4], 18);
    let labels = random(&[2, 3, 4, 4, 4], 19).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    for k in [1.0, 2.0] {
        let loss_of = |l: &ArrayD<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(l.clone());
            let p = tape.softmax(v);
            let d = tape.dice_loss(p, labels.clone(), k, 1e-5);
            tape.value(d)[0]
        };
        let mut tape = Tape::new();
        let v = tape.param(logits.clone());
        let p = tape.softmax(v);
        let d = tape.dice_loss(p, labels.clone(), k, 1e-5);
        let grads = tape.backward(d);
        let g = grads.get(v).unwrap();
        let h = 1e-6;
        for idx in (0..logits.len()).step_by(7) {
            let mut plus = logits.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = logits.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = g.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            assert!(err < 1e-4, "k={k} idx {idx}: {a} vs {numeric}");
        }
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(random(&[1, 1, 2, 2, 2], 20));
    let p = tape.param(random(&[1, 1, 2, 2, 2], 21));
    let s = tape.add(c, p);
    let probs = tape.softmax(s);
    let loss = tape.dice_loss(probs, ArrayD::zeros(IxDyn(&[1, 1, 2, 2, 2])), 2.0, 1e-5);
    let grads = tape.backward(loss);
    assert!(grads.get(c).is_none());
    assert!(grads.get(p).is_some());
}

#[test]
fn f32_conv_matches_f64() {
    let x = random(&[1, 2, 5, 4, 3], 22);
    let w = random(&[2, 2, 3, 3, 3], 23);
    let mut t64 = Tape::<f64>::new();
    let (a, b) = (t64.constant(x.clone()), t64.constant(w.clone()));
    let y64 = t64.conv3d(a, b, None, ConvSpec::same3(1));
    let mut t32 = Tape::<f32>::new();
    let (a, b) = (t32.constant(x.mapv(|v| v as f32)), t32.constant(w.mapv(|v| v as f32)));
    let y32 = t32.conv3d(a, b, None, ConvSpec::same3(1));
    for (p, q) in t64.value(y64).iter().zip(t32.value(y32).iter()) {
        assert!((p - *q as f64).abs() < 1e-4);
    }
}

#[test]
fn chunked_columns_match_single_chunk() {
    let run = || {
        let mut out = Vec::new();
        for (spec, transposed) in [(ConvSpec::same3(2), false), (ConvSpec::down2(1), false), (ConvSpec::down2(2), true)] {
            let x = random(&[2, 4, 6, 4, 6], 30);
            let wshape = if transposed { [4, 1, spec.kernel, spec.kernel, spec.kernel] } else { [4, 4 / spec.groups, spec.kernel, spec.kernel, spec.kernel] };
            let w = random(&wshape, 31);
            let mut tape = Tape::new();
            let xv = tape.param(x);
            let wv = tape.param(w);
            let y = if transposed {
                tape.conv_transpose3d(xv, wv, None, spec)
            } else {
                tape.conv3d(xv, wv, None, spec)
            };
            let probe = random(tape.shape(y), 32);
            let grads = backward_seeded(&tape, y, probe);
            out.push((tape.value(y).clone(), grads.get(xv).unwrap().clone(), grads.get(wv).unwrap().clone()));
        }
        out
    };
    let whole = run();
    let previous = conv::set_column_budget(1);
    let chunked = run();
    conv::set_column_budget(previous);
    for (a, b) in whole.iter().zip(&chunked) {
        for (p, q) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
            for (u, v) in p.iter().zip(q.iter()) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
        }
    }
}
