use cigan_nn::{Tape, Var};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

/// Compare the tape gradient of `build` w.r.t. its first input against
/// central differences.
fn check<F>(inputs: Vec<Array4<f64>>, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Array4<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut grads = tape.backward(out);
        let g: Vec<Array4<f64>> = vars.iter().map(|v| grads.take(*v).unwrap_or_else(|| Array4::zeros(tape.value(*v).raw_dim()))).collect();
        (tape.scalar(out), g)
    };
    let (_, analytic) = eval(&inputs);
    let h = 1e-6;
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[which].as_slice_mut().unwrap()[idx] += h;
            minus[which].as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let an = analytic[which].as_slice().unwrap()[idx];
            let tol = 1e-5 * fd.abs().max(an.abs()).max(1e-3);
            assert!((fd - an).abs() <= tol, "input {which} idx {idx}: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn conv_relu_pool_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random((2, 2, 4, 4), &mut rng, -1.0, 1.0);
    let w = random((3, 2, 3, 3), &mut rng, -0.5, 0.5);
    let b = random((1, 3, 1, 1), &mut rng, -0.1, 0.1);
    check(vec![x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1);
        let y = t.leaky_relu(y, 0.2);
        let y = t.max_pool2(y);
        let z = t.constant(Array4::zeros(t.value(y).raw_dim()));
        t.mean_abs_diff(y, z)
    });
}

#[test]
fn upsample_concat_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random((1, 2, 2, 2), &mut rng, -1.0, 1.0);
    let b = random((1, 1, 4, 4), &mut rng, -1.0, 1.0);
    let w = random((1, 3, 1, 1), &mut rng, -1.0, 1.0);
    check(vec![a, b, w], |t, v| {
        let up = t.upsample2(v[0]);
        let cat = t.concat(up, v[1]);
        let y = t.conv2d(cat, v[2], None, 0);
        let p = t.sigmoid(y);
        t.neg_mean_log(p, 1e-7, true)
    });
}

#[test]
fn dense_and_pooling_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random((3, 2, 2, 2), &mut rng, -1.0, 1.0);
    let w = random((1, 8, 1, 1), &mut rng, -1.0, 1.0);
    let b = random((1, 1, 1, 1), &mut rng, -1.0, 1.0);
    check(vec![x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.dense(v[0], v[1], v[2]);
        let p = t.sigmoid(y);
        t.bce(p, &[1.0, 0.0, 1.0], 1e-7)
    });
    let w2 = random((1, 2, 1, 1), &mut rng, -1.0, 1.0);
    check(vec![x, w2, b], |t, v| {
        let g = t.global_avg_pool(v[0]);
        let y = t.dense(g, v[1], v[2]);
        let p = t.sigmoid(y);
        t.neg_mean_log(p, 1e-7, false)
    });
}

#[test]
fn composite_repeat_weighted_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = random((1, 1, 4, 4), &mut rng, 0.0, 1.0);
    let other = random((1, 3, 4, 4), &mut rng, 0.0, 1.0);
    let mask = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| if (y + x) % 3 == 0 { 1.0 } else { 0.0 });
    let base = random((1, 1, 4, 4), &mut rng, 0.0, 1.0);
    let w = random((1, 3, 4, 4), &mut rng, 0.0, 2.0);
    check(vec![raw, other], move |t, v| {
        let c = t.composite(v[0], &mask, &base);
        let r = t.repeat_channels(c, 3);
        let l1 = t.weighted_l1(r, v[1], &w);
        let s = t.scale(l1, 3.0);
        t.add(s, l1)
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Array4::ones((1, 1, 2, 2)));
    let w = tape.variable(Array4::ones((1, 1, 1, 1)));
    let y = tape.conv2d(x, w, None, 0);
    let z = tape.constant(Array4::zeros((1, 1, 2, 2)));
    let l = tape.mean_abs_diff(y, z);
    let grads = tape.backward(l);
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap()[[0, 0, 0, 0]], 1.0);
}
