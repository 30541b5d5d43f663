use jgrp2o::numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn dot_const(tape: &mut Tape<f64>, v: Var, r: Tensor4<f64>) -> Var {
    let s: f64 = tape.value(v).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    tape.push(Tensor4::full([1, 1, 1, 1], s), vec![v], move |_, g| Ok(vec![r.map(|x| x * g.data()[0])]))
}

/// Compares tape gradients of `<f(inputs), r>` against central differences.
fn check(name: &str, inputs: Vec<Tensor4<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let r = rand_t(&mut rng, tape.dims(out));
    let eval = |ins: &[Tensor4<f64>]| {
        let mut tp = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|t| tp.leaf(t.clone(), true)).collect();
        let o = f(&mut tp, &vs);
        let l = dot_const(&mut tp, o, r.clone());
        tp.value(l).data()[0]
    };
    let l = dot_const(&mut tape, out, r.clone());
    let g = tape.gradients(l).unwrap();
    let mut worst = 0.0f64;
    for (k, inp) in inputs.iter().enumerate() {
        let an = g.get(vars[k]).cloned().unwrap_or(Tensor4::zeros(inp.dims()));
        for i in 0..inp.len() {
            let mut p = inputs.clone();
            p[k].data_mut()[i] += 1e-6;
            let mut m = inputs.clone();
            m[k].data_mut()[i] -= 1e-6;
            let num = (eval(&p) - eval(&m)) / 2e-6;
            worst = worst.max(relative_error(an.data()[i], num));
        }
    }
    assert!(worst <= 1e-5, "{name}: relative error {worst:e}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |d| rand_t(&mut rng, d);
    check("conv5", vec![r([2, 6, 6, 2]), r([5, 5, 2, 3]), r([1, 1, 1, 3])], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same).unwrap());
    check("conv3", vec![r([2, 4, 4, 2]), r([3, 3, 2, 3])], |t, v| t.conv2d(v[0], v[1], None, 1, Padding::Same).unwrap());
    check("conv1", vec![r([2, 4, 4, 3]), r([1, 1, 3, 2])], |t, v| t.conv2d(v[0], v[1], None, 1, Padding::Same).unwrap());
    check("ssoft", vec![r([2, 3, 3, 2])], |t, v| t.spatial_softmax(v[0]));
    check("csoft", vec![r([2, 3, 1, 3])], |t, v| t.channel_softmax(v[0]));
    check("bmm_tn", vec![r([2, 6, 1, 3]), r([2, 6, 1, 4])], |t, v| t.bmm(v[0], true, v[1], false).unwrap());
    check("bmm_nt", vec![r([2, 3, 1, 4]), r([2, 5, 1, 4])], |t, v| t.bmm(v[0], false, v[1], true).unwrap());
    check("bmm_bcast", vec![r([1, 3, 1, 3]), r([2, 3, 1, 4])], |t, v| t.bmm(v[0], false, v[1], false).unwrap());
    check("bmm_bcast_b", vec![r([2, 3, 1, 4]), r([1, 4, 1, 4])], |t, v| t.bmm(v[0], false, v[1], false).unwrap());
    check("bmm_img", vec![r([2, 2, 3, 4]), r([2, 4, 1, 5])], |t, v| t.bmm(v[0], false, v[1], false).unwrap());
    check("maxpool", vec![r([2, 4, 4, 2])], |t, v| t.max_pool2(v[0]).unwrap());
    check("avgpool", vec![r([2, 4, 4, 2])], |t, v| t.avg_pool2(v[0]).unwrap());
    check("ups", vec![r([2, 2, 2, 2])], |t, v| t.upsample2(v[0]));
    check("cat", vec![r([2, 2, 2, 2]), r([2, 2, 2, 3])], |t, v| t.concat_channels(v[0], v[1]).unwrap());
    let st = NormStats { mean: vec![0.1, -0.2], var: vec![0.5, 1.5] };
    let st2 = st.clone();
    check("bn_eval", vec![r([2, 3, 3, 2]), r([1, 1, 1, 2]), r([1, 1, 1, 2])], move |t, v| t.batch_norm(v[0], v[1], v[2], NormMode::Eval, &st, "x").unwrap());
    check("bn_train", vec![r([2, 3, 3, 2]), r([1, 1, 1, 2]), r([1, 1, 1, 2])], move |t, v| t.batch_norm(v[0], v[1], v[2], NormMode::Train, &st2, "x").unwrap());
    check("reshape_scale", vec![r([2, 3, 2, 2])], |t, v| { let a = t.reshape(v[0], [2, 6, 1, 2]).unwrap(); t.scale(a, 0.3) });
    check("relu", vec![r([2, 3, 3, 2])], |t, v| t.relu(v[0]));
}
